//! Define-by-run reverse-mode autodiff over [`Tensor`] values.
//!
//! A [`Graph`] is rebuilt for every training step. Inputs are registered with
//! [`Graph::input`]; every op records the parent ids and a backward closure.
//! [`Graph::backward`] walks nodes in reverse creation order, so gradient
//! accumulation happens in a fixed order and results are reproducible.

use crate::ops;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub usize);

type BackwardFn = Box<dyn Fn(&Graph, &Tensor, &[bool]) -> Vec<Option<Tensor>> + Send + Sync>;

struct Node {
    value: Tensor,
    parents: Vec<NodeId>,
    needs_grad: bool,
    backward: Option<BackwardFn>,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of one scalar node with respect to every graph node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn needs_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn push(&mut self, value: Tensor, parents: Vec<NodeId>, backward: BackwardFn) -> NodeId {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            value,
            parents,
            needs_grad,
            backward: Some(backward),
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn input(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            parents: vec![],
            needs_grad: requires_grad,
            backward: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.input(value, false)
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).add(self.value(b));
        self.push(
            v,
            vec![a, b],
            Box::new(|_, g, need| {
                vec![
                    need[0].then(|| g.clone()),
                    need[1].then(|| g.clone()),
                ]
            }),
        )
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).sub(self.value(b));
        self.push(
            v,
            vec![a, b],
            Box::new(|_, g, need| {
                vec![
                    need[0].then(|| g.clone()),
                    need[1].then(|| g.scale(-1.0)),
                ]
            }),
        )
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).mul(self.value(b));
        let (aid, bid) = (a, b);
        self.push(
            v,
            vec![a, b],
            Box::new(move |gr, g, need| {
                vec![
                    need[0].then(|| g.mul(gr.value(bid))),
                    need[1].then(|| g.mul(gr.value(aid))),
                ]
            }),
        )
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).scale(c);
        self.push(
            v,
            vec![a],
            Box::new(move |_, g, need| vec![need[0].then(|| g.scale(c))]),
        )
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::abs);
        let aid = a;
        self.push(
            v,
            vec![a],
            Box::new(move |gr, g, need| {
                vec![need[0].then(|| {
                    g.zip(gr.value(aid), |gv, av| gv * sign(av))
                })]
            }),
        )
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x.max(0.0));
        let aid = a;
        self.push(
            v,
            vec![a],
            Box::new(move |gr, g, need| {
                vec![need[0].then(|| g.zip(gr.value(aid), |gv, av| if av > 0.0 { gv } else { 0.0 }))]
            }),
        )
    }

    pub fn leaky_relu(&mut self, a: NodeId, slope: f64) -> NodeId {
        let v = self.value(a).map(|x| if x > 0.0 { x } else { slope * x });
        let aid = a;
        self.push(
            v,
            vec![a],
            Box::new(move |gr, g, need| {
                vec![need[0].then(|| {
                    g.zip(gr.value(aid), |gv, av| if av > 0.0 { gv } else { slope * gv })
                })]
            }),
        )
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::tanh);
        let out = NodeId(self.nodes.len());
        self.push(
            v,
            vec![a],
            Box::new(move |gr, g, need| {
                vec![need[0].then(|| g.zip(gr.value(out), |gv, yv| gv * (1.0 - yv * yv)))]
            }),
        )
    }

    /// Clamp with a straight-through gradient: identity inside `[lo, hi]`
    /// (inclusive), zero outside.
    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        let v = self.value(a).map(|x| x.clamp(lo, hi));
        let aid = a;
        self.push(
            v,
            vec![a],
            Box::new(move |gr, g, need| {
                vec![need[0].then(|| {
                    g.zip(gr.value(aid), |gv, av| if av >= lo && av <= hi { gv } else { 0.0 })
                })]
            }),
        )
    }

    // ---- reductions / shape ----

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let n = self.value(a).numel() as f64;
        let shape = self.value(a).shape().to_vec();
        let v = Tensor::scalar(self.value(a).mean());
        self.push(
            v,
            vec![a],
            Box::new(move |_, g, need| {
                vec![need[0].then(|| Tensor::full(&shape, g.item() / n))]
            }),
        )
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> NodeId {
        let old_shape = self.value(a).shape().to_vec();
        let v = self.value(a).reshape(shape);
        self.push(
            v,
            vec![a],
            Box::new(move |_, g, need| vec![need[0].then(|| g.reshape(&old_shape))]),
        )
    }

    /// Concatenate along the channel axis of `[n,c,h,w]` tensors.
    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (n, ca, h, w) = self.value(a).dims4();
        let (n2, cb, h2, w2) = self.value(b).dims4();
        assert_eq!((n, h, w), (n2, h2, w2), "concat_channels spatial mismatch");
        let plane = h * w;
        let mut out = vec![0.0f64; n * (ca + cb) * plane];
        for ni in 0..n {
            let dst = &mut out[ni * (ca + cb) * plane..];
            dst[..ca * plane]
                .copy_from_slice(&self.value(a).data()[ni * ca * plane..(ni + 1) * ca * plane]);
            dst[ca * plane..(ca + cb) * plane]
                .copy_from_slice(&self.value(b).data()[ni * cb * plane..(ni + 1) * cb * plane]);
        }
        let v = Tensor::from_vec(&[n, ca + cb, h, w], out);
        self.push(
            v,
            vec![a, b],
            Box::new(move |_, g, need| {
                let split = |first: bool| {
                    let c = if first { ca } else { cb };
                    let off = if first { 0 } else { ca * plane };
                    let mut part = vec![0.0f64; n * c * plane];
                    for ni in 0..n {
                        let src = &g.data()[ni * (ca + cb) * plane + off..];
                        part[ni * c * plane..(ni + 1) * c * plane]
                            .copy_from_slice(&src[..c * plane]);
                    }
                    Tensor::from_vec(&[n, c, h, w], part)
                };
                vec![need[0].then(|| split(true)), need[1].then(|| split(false))]
            }),
        )
    }

    /// Multiply `[n,c,h,w]` by a `[n,1,h,w]` map, broadcast over channels.
    /// The map is treated as a constant: no gradient flows into it.
    pub fn mul_map(&mut self, a: NodeId, map: NodeId) -> NodeId {
        assert!(
            !self.needs_grad(map),
            "mul_map: the broadcast map must not require gradients"
        );
        let (n, c, h, w) = self.value(a).dims4();
        let (n2, c2, h2, w2) = self.value(map).dims4();
        assert_eq!((n, 1, h, w), (n2, c2, h2, w2), "mul_map shape mismatch");
        let plane = h * w;
        let mul_by_map = move |x: &Tensor, m: &Tensor| {
            let mut out = vec![0.0f64; n * c * plane];
            for ni in 0..n {
                let mp = &m.data()[ni * plane..(ni + 1) * plane];
                for ci in 0..c {
                    let base = (ni * c + ci) * plane;
                    for i in 0..plane {
                        out[base + i] = x.data()[base + i] * mp[i];
                    }
                }
            }
            Tensor::from_vec(&[n, c, h, w], out)
        };
        let v = mul_by_map(self.value(a), self.value(map));
        let mid = map;
        self.push(
            v,
            vec![a, map],
            Box::new(move |gr, g, need| {
                vec![need[0].then(|| mul_by_map(g, gr.value(mid))), None]
            }),
        )
    }

    // ---- linear algebra / conv ----

    /// x:[n,k] * w:[m,k]^T + b:[m] -> [n,m]
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let (n, k) = self.value(x).dims2();
        let (m, k2) = self.value(w).dims2();
        assert_eq!(k, k2, "linear: input dim {} vs weight dim {}", k, k2);
        assert_eq!(self.value(b).shape(), &[m]);
        let mut y = ops::matmul_bt(self.value(x), self.value(w));
        for ni in 0..n {
            for mi in 0..m {
                y.data_mut()[ni * m + mi] += self.value(b).data()[mi];
            }
        }
        let (xid, wid) = (x, w);
        self.push(
            y,
            vec![x, w, b],
            Box::new(move |gr, g, need| {
                let dx = need[0].then(|| ops::matmul(g, gr.value(wid)));
                let dw = need[1].then(|| ops::matmul_at(g, gr.value(xid)));
                let db = need[2].then(|| {
                    let mut d = vec![0.0f64; m];
                    for ni in 0..n {
                        for (mi, dv) in d.iter_mut().enumerate() {
                            *dv += g.data()[ni * m + mi];
                        }
                    }
                    Tensor::from_vec(&[m], d)
                });
                vec![dx, dw, db]
            }),
        )
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId, s: usize, p: usize) -> NodeId {
        let v = ops::conv2d(self.value(x), self.value(w), self.value(b), s, p);
        let (xid, wid) = (x, w);
        self.push(
            v,
            vec![x, w, b],
            Box::new(move |gr, g, need| {
                let (dx, dw, db) =
                    ops::conv2d_backward(gr.value(xid), gr.value(wid), g, s, p, need[0]);
                vec![dx, need[1].then_some(dw), need[2].then_some(db)]
            }),
        )
    }

    pub fn conv_transpose2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        s: usize,
        p: usize,
    ) -> NodeId {
        let v = ops::conv_transpose2d(self.value(x), self.value(w), self.value(b), s, p);
        let (xid, wid) = (x, w);
        self.push(
            v,
            vec![x, w, b],
            Box::new(move |gr, g, need| {
                let (dx, dw, db) =
                    ops::conv_transpose2d_backward(gr.value(xid), gr.value(wid), g, s, p, need[0]);
                vec![dx, need[1].then_some(dw), need[2].then_some(db)]
            }),
        )
    }

    pub fn avg_pool2d(&mut self, x: NodeId, f: usize) -> NodeId {
        let (_, _, h, w) = self.value(x).dims4();
        let v = ops::avg_pool2d(self.value(x), f);
        self.push(
            v,
            vec![x],
            Box::new(move |_, g, need| {
                vec![need[0].then(|| ops::avg_pool2d_backward(g, f, h, w))]
            }),
        )
    }

    /// [n,c,h,w] -> [n,c] spatial mean.
    pub fn global_avg_pool(&mut self, x: NodeId) -> NodeId {
        let (n, c, h, w) = self.value(x).dims4();
        let plane = (h * w) as f64;
        let mut out = vec![0.0f64; n * c];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * h * w;
                let mut acc = 0.0;
                for i in 0..h * w {
                    acc += self.value(x).data()[base + i];
                }
                out[ni * c + ci] = acc / plane;
            }
        }
        let v = Tensor::from_vec(&[n, c], out);
        self.push(
            v,
            vec![x],
            Box::new(move |_, g, need| {
                vec![need[0].then(|| {
                    let mut dx = vec![0.0f64; n * c * h * w];
                    for ni in 0..n {
                        for ci in 0..c {
                            let gv = g.data()[ni * c + ci] / plane;
                            let base = (ni * c + ci) * h * w;
                            for i in 0..h * w {
                                dx[base + i] = gv;
                            }
                        }
                    }
                    Tensor::from_vec(&[n, c, h, w], dx)
                })]
            }),
        )
    }

    // ---- batch norm ----

    /// Training-mode batch normalization over `(n, h, w)` per channel.
    /// Returns the output node plus the biased batch mean/variance so the
    /// caller can maintain running statistics.
    pub fn batchnorm_train(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> (NodeId, Tensor, Tensor) {
        let (n, c, h, w) = self.value(x).dims4();
        assert_eq!(self.value(gamma).shape(), &[c]);
        assert_eq!(self.value(beta).shape(), &[c]);
        let m = (n * h * w) as f64;
        let xd = self.value(x).data();
        let mut mean = vec![0.0f64; c];
        let mut var = vec![0.0f64; c];
        for ci in 0..c {
            let mut acc = 0.0;
            for ni in 0..n {
                let base = (ni * c + ci) * h * w;
                for i in 0..h * w {
                    acc += xd[base + i];
                }
            }
            mean[ci] = acc / m;
            let mut acc2 = 0.0;
            for ni in 0..n {
                let base = (ni * c + ci) * h * w;
                for i in 0..h * w {
                    let d = xd[base + i] - mean[ci];
                    acc2 += d * d;
                }
            }
            var[ci] = acc2 / m;
        }
        let gd = self.value(gamma).data();
        let bd = self.value(beta).data();
        let mut out = vec![0.0f64; n * c * h * w];
        for ni in 0..n {
            for ci in 0..c {
                let inv = 1.0 / (var[ci] + eps).sqrt();
                let base = (ni * c + ci) * h * w;
                for i in 0..h * w {
                    out[base + i] = gd[ci] * (xd[base + i] - mean[ci]) * inv + bd[ci];
                }
            }
        }
        let mean_t = Tensor::from_vec(&[c], mean.clone());
        let var_t = Tensor::from_vec(&[c], var.clone());
        let xid = x;
        let gid = gamma;
        let node = self.push(
            Tensor::from_vec(&[n, c, h, w], out),
            vec![x, gamma, beta],
            Box::new(move |gr, g, need| {
                let xd = gr.value(xid).data();
                let gammad = gr.value(gid).data();
                let gdout = g.data();
                // per-channel reductions in fixed index order
                let mut dgamma = vec![0.0f64; c];
                let mut dbeta = vec![0.0f64; c];
                let mut sum_dy = vec![0.0f64; c];
                let mut sum_dy_xhat = vec![0.0f64; c];
                for ci in 0..c {
                    let inv = 1.0 / (var[ci] + eps).sqrt();
                    for ni in 0..n {
                        let base = (ni * c + ci) * h * w;
                        for i in 0..h * w {
                            let xhat = (xd[base + i] - mean[ci]) * inv;
                            let dy = gdout[base + i];
                            dbeta[ci] += dy;
                            dgamma[ci] += dy * xhat;
                        }
                    }
                    sum_dy[ci] = dbeta[ci];
                    sum_dy_xhat[ci] = dgamma[ci];
                }
                let dx = need[0].then(|| {
                    let mut dx = vec![0.0f64; n * c * h * w];
                    for ci in 0..c {
                        let inv = 1.0 / (var[ci] + eps).sqrt();
                        let gscale = gammad[ci] * inv / m;
                        for ni in 0..n {
                            let base = (ni * c + ci) * h * w;
                            for i in 0..h * w {
                                let xhat = (xd[base + i] - mean[ci]) * inv;
                                dx[base + i] = gscale
                                    * (m * gdout[base + i]
                                        - sum_dy[ci]
                                        - xhat * sum_dy_xhat[ci]);
                            }
                        }
                    }
                    Tensor::from_vec(&[n, c, h, w], dx)
                });
                vec![
                    dx,
                    need[1].then(|| Tensor::from_vec(&[c], dgamma)),
                    need[2].then(|| Tensor::from_vec(&[c], dbeta)),
                ]
            }),
        );
        (node, mean_t, var_t)
    }

    /// Eval-mode batch normalization with fixed statistics.
    pub fn batchnorm_eval(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running_mean: &Tensor,
        running_var: &Tensor,
        eps: f64,
    ) -> NodeId {
        let (n, c, h, w) = self.value(x).dims4();
        let rm = running_mean.data().to_vec();
        let rv = running_var.data().to_vec();
        let gd = self.value(gamma).data();
        let bd = self.value(beta).data();
        let xd = self.value(x).data();
        let mut out = vec![0.0f64; n * c * h * w];
        for ni in 0..n {
            for ci in 0..c {
                let inv = 1.0 / (rv[ci] + eps).sqrt();
                let base = (ni * c + ci) * h * w;
                for i in 0..h * w {
                    out[base + i] = gd[ci] * (xd[base + i] - rm[ci]) * inv + bd[ci];
                }
            }
        }
        let xid = x;
        let gid = gamma;
        self.push(
            Tensor::from_vec(&[n, c, h, w], out),
            vec![x, gamma, beta],
            Box::new(move |gr, g, need| {
                let xd = gr.value(xid).data();
                let gammad = gr.value(gid).data();
                let dx = need[0].then(|| {
                    let mut dx = vec![0.0f64; n * c * h * w];
                    for ci in 0..c {
                        let s = gammad[ci] / (rv[ci] + eps).sqrt();
                        for ni in 0..n {
                            let base = (ni * c + ci) * h * w;
                            for i in 0..h * w {
                                dx[base + i] = g.data()[base + i] * s;
                            }
                        }
                    }
                    Tensor::from_vec(&[n, c, h, w], dx)
                });
                let dgamma = need[1].then(|| {
                    let mut d = vec![0.0f64; c];
                    for ci in 0..c {
                        let inv = 1.0 / (rv[ci] + eps).sqrt();
                        for ni in 0..n {
                            let base = (ni * c + ci) * h * w;
                            for i in 0..h * w {
                                d[ci] += g.data()[base + i] * (xd[base + i] - rm[ci]) * inv;
                            }
                        }
                    }
                    Tensor::from_vec(&[c], d)
                });
                let dbeta = need[2].then(|| {
                    let mut d = vec![0.0f64; c];
                    for ci in 0..c {
                        for ni in 0..n {
                            let base = (ni * c + ci) * h * w;
                            for i in 0..h * w {
                                d[ci] += g.data()[base + i];
                            }
                        }
                    }
                    Tensor::from_vec(&[c], d)
                });
                vec![dx, dgamma, dbeta]
            }),
        )
    }

    /// Mean binary cross-entropy on logits against a constant target in [0,1].
    /// Numerically stable; gradient is `(sigmoid(l) - target) / numel`.
    pub fn bce_with_logits(&mut self, logits: NodeId, target: f64) -> NodeId {
        assert!((0.0..=1.0).contains(&target));
        let ld = self.value(logits).data();
        let n = ld.len() as f64;
        let mut acc = 0.0;
        for &l in ld {
            acc += target * softplus(-l) + (1.0 - target) * softplus(l);
        }
        let shape = self.value(logits).shape().to_vec();
        let lid = logits;
        self.push(
            Tensor::scalar(acc / n),
            vec![logits],
            Box::new(move |gr, g, need| {
                vec![need[0].then(|| {
                    let scale = g.item() / n;
                    let mut d = Vec::with_capacity(gr.value(lid).numel());
                    for &l in gr.value(lid).data() {
                        d.push(scale * (sigmoid(l) - target));
                    }
                    Tensor::from_vec(&shape, d)
                })]
            }),
        )
    }

    // ---- backward ----

    fn value_of_parent(&self, _idx: usize) -> &Tensor {
        unreachable!("placeholder; parents are captured by id")
    }

    /// Reverse-mode sweep from a scalar `loss` node. Panics if `loss` is not
    /// scalar. Gradient accumulation follows reverse creation order.
    pub fn backward(&self, loss: NodeId) -> Gradients {
        assert!(
            self.value(loss).is_scalar(),
            "backward() requires a scalar loss, got {:?}",
            self.value(loss).shape()
        );
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            if let Some(bw) = &self.nodes[id].backward {
                let need: Vec<bool> = self.nodes[id]
                    .parents
                    .iter()
                    .map(|p| self.nodes[p.0].needs_grad)
                    .collect();
                let pgrads = bw(self, &g, &need);
                assert_eq!(pgrads.len(), self.nodes[id].parents.len());
                for (p, pg) in self.nodes[id].parents.iter().zip(pgrads) {
                    if let Some(pg) = pg {
                        match &mut grads[p.0] {
                            Some(acc) => acc.add_assign(&pg),
                            slot @ None => *slot = Some(pg),
                        }
                    }
                }
            }
            grads[id] = Some(g);
        }
        Gradients { grads }
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// ln(1 + e^x), stable for large |x|.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central finite difference of a scalar-valued graph builder with
    /// respect to one input coordinate.
    fn fd<F>(build: F, inputs: &[Tensor], which: usize, coord: usize, h: f64) -> f64
    where
        F: Fn(&mut Graph, &[NodeId]) -> NodeId,
    {
        let eval = |delta: f64| {
            let mut ins = inputs.to_vec();
            ins[which].data_mut()[coord] += delta;
            let mut g = Graph::new();
            let ids: Vec<NodeId> = ins.iter().map(|t| g.input(t.clone(), true)).collect();
            let out = build(&mut g, &ids);
            g.value(out).item()
        };
        (eval(h) - eval(-h)) / (2.0 * h)
    }

    fn check<F>(build: F, inputs: &[Tensor], tol: f64)
    where
        F: Fn(&mut Graph, &[NodeId]) -> NodeId,
    {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = inputs.iter().map(|t| g.input(t.clone(), true)).collect();
        let out = build(&mut g, &ids);
        let grads = g.backward(out);
        for (wi, id) in ids.iter().enumerate() {
            let analytic = grads.get(*id).expect("missing gradient");
            for coord in 0..inputs[wi].numel() {
                let num = fd(&build, inputs, wi, coord, 1e-6);
                let a = analytic.data()[coord];
                let denom = a.abs().max(num.abs()).max(1e-6);
                assert!(
                    (a - num).abs() / denom < tol,
                    "input {} coord {}: analytic {} vs numeric {}",
                    wi,
                    coord,
                    a,
                    num
                );
            }
        }
    }

    #[test]
    fn elementwise_chain_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = Tensor::randn(&[2, 3], 1.0, &mut rng);
        let b = Tensor::randn(&[2, 3], 1.0, &mut rng);
        check(
            |g, ids| {
                let s = g.sub(ids[0], ids[1]);
                let t = g.tanh(s);
                let m = g.mul(t, ids[0]);
                g.mean_all(m)
            },
            &[a, b],
            1e-6,
        );
    }

    #[test]
    fn conv_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = Tensor::randn(&[2, 2, 5, 4], 1.0, &mut rng);
        let w = Tensor::randn(&[3, 2, 3, 3], 0.5, &mut rng);
        let b = Tensor::randn(&[3], 0.5, &mut rng);
        check(
            |g, ids| {
                let y = g.conv2d(ids[0], ids[1], ids[2], 2, 1);
                let t = g.tanh(y);
                g.mean_all(t)
            },
            &[x, w, b],
            1e-5,
        );
    }

    #[test]
    fn deconv_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::randn(&[1, 3, 3, 2], 1.0, &mut rng);
        let w = Tensor::randn(&[3, 2, 4, 4], 0.5, &mut rng);
        let b = Tensor::randn(&[2], 0.5, &mut rng);
        check(
            |g, ids| {
                let y = g.conv_transpose2d(ids[0], ids[1], ids[2], 2, 1);
                let t = g.tanh(y);
                g.mean_all(t)
            },
            &[x, w, b],
            1e-5,
        );
    }

    #[test]
    fn linear_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let w = Tensor::randn(&[2, 4], 0.5, &mut rng);
        let b = Tensor::randn(&[2], 0.5, &mut rng);
        check(
            |g, ids| {
                let y = g.linear(ids[0], ids[1], ids[2]);
                let t = g.tanh(y);
                g.mean_all(t)
            },
            &[x, w, b],
            1e-6,
        );
    }

    #[test]
    fn batchnorm_train_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::randn(&[3, 2, 3, 3], 1.0, &mut rng);
        let gamma = Tensor::randn(&[2], 0.3, &mut rng).map(|v| v + 1.0);
        let beta = Tensor::randn(&[2], 0.3, &mut rng);
        check(
            |g, ids| {
                let (y, _, _) = g.batchnorm_train(ids[0], ids[1], ids[2], 1e-5);
                let t = g.tanh(y);
                g.mean_all(t)
            },
            &[x, gamma, beta],
            1e-4,
        );
    }

    #[test]
    fn bce_with_logits_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let l = Tensor::randn(&[5], 2.0, &mut rng);
        for &t in &[0.0, 1.0, 0.9] {
            check(|g, ids| g.bce_with_logits(ids[0], t), &[l.clone()], 1e-6);
        }
    }

    #[test]
    fn bce_with_logits_known_values() {
        let mut g = Graph::new();
        let l = g.input(Tensor::from_vec(&[2], vec![0.0, 0.0]), false);
        let real = g.bce_with_logits(l, 1.0);
        assert!((g.value(real).item() - (2.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn avg_pool_and_concat_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let a = Tensor::randn(&[1, 2, 4, 4], 1.0, &mut rng);
        let b = Tensor::randn(&[1, 1, 4, 4], 1.0, &mut rng);
        check(
            |g, ids| {
                let c = g.concat_channels(ids[0], ids[1]);
                let p = g.avg_pool2d(c, 2);
                let q = g.global_avg_pool(p);
                let r = g.reshape(q, &[3]);
                let t = g.tanh(r);
                g.mean_all(t)
            },
            &[a, b],
            1e-6,
        );
    }

    #[test]
    fn clamp_straight_through_gradient() {
        let x = Tensor::from_vec(&[3], vec![-2.0, 0.5, 2.0]);
        let mut g = Graph::new();
        let id = g.input(x, true);
        let c = g.clamp(id, -1.0, 1.0);
        let m = g.mean_all(c);
        let grads = g.backward(m);
        let gx = grads.get(id).unwrap();
        assert_eq!(gx.data(), &[0.0, 1.0 / 3.0, 0.0]);
    }

    #[test]
    fn no_grad_inputs_are_skipped() {
        let mut g = Graph::new();
        let a = g.input(Tensor::from_vec(&[2], vec![1.0, 2.0]), false);
        let b = g.input(Tensor::from_vec(&[2], vec![3.0, 4.0]), true);
        let s = g.add(a, b);
        let m = g.mean_all(s);
        let grads = g.backward(m);
        assert!(grads.get(a).is_none());
        assert!(grads.get(b).is_some());
    }
}
