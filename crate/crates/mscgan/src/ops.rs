//! Low-level numeric kernels: GEMM, im2col/col2im, convolutions, pooling.
//!
//! Parallelism policy: rayon is only ever applied across independent output
//! slices (rows of a GEMM, samples of a batch). Every accumulation that feeds
//! a single output element runs in a fixed sequential order, so results are
//! bit-identical regardless of thread count.

use crate::tensor::Tensor;
use rayon::prelude::*;

/// Output extent of a convolution along one axis.
pub fn conv_out(extent: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    assert!(
        extent + 2 * pad >= kernel,
        "input extent {} too small for kernel {} pad {}",
        extent,
        kernel,
        pad
    );
    (extent + 2 * pad - kernel) / stride + 1
}

/// Output extent of a transposed convolution along one axis.
///
/// Fixed to `stride * extent`: the implicit output padding is
/// `stride - kernel + 2 * pad`, which must lie in `[0, stride)`.
pub fn deconv_out(extent: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    let op = stride as i64 - kernel as i64 + 2 * pad as i64;
    assert!(
        op >= 0 && op < stride as i64,
        "deconv k={} s={} p={} cannot produce an exact {}x upsample",
        kernel,
        stride,
        pad,
        stride
    );
    stride * extent
}

/// C = A * B with A:[m,k], B:[k,n].
pub fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = a.dims2();
    let (k2, n) = b.dims2();
    assert_eq!(k, k2, "matmul inner dims {} vs {}", k, k2);
    let ad = a.data();
    let bd = b.data();
    let mut out = vec![0.0f64; m * n];
    out.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
        let arow = &ad[i * k..(i + 1) * k];
        for (kk, &aik) in arow.iter().enumerate() {
            if aik != 0.0 {
                let brow = &bd[kk * n..(kk + 1) * n];
                for (o, &bv) in row.iter_mut().zip(brow) {
                    *o += aik * bv;
                }
            }
        }
    });
    Tensor::from_vec(&[m, n], out)
}

/// C = A^T * B with A:[k,m], B:[k,n].
pub fn matmul_at(a: &Tensor, b: &Tensor) -> Tensor {
    let (k, m) = a.dims2();
    let (k2, n) = b.dims2();
    assert_eq!(k, k2, "matmul_at inner dims {} vs {}", k, k2);
    let ad = a.data();
    let bd = b.data();
    let mut out = vec![0.0f64; m * n];
    out.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
        for kk in 0..k {
            let aki = ad[kk * m + i];
            if aki != 0.0 {
                let brow = &bd[kk * n..(kk + 1) * n];
                for (o, &bv) in row.iter_mut().zip(brow) {
                    *o += aki * bv;
                }
            }
        }
    });
    Tensor::from_vec(&[m, n], out)
}

/// C = A * B^T with A:[m,k], B:[n,k].
pub fn matmul_bt(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = a.dims2();
    let (n, k2) = b.dims2();
    assert_eq!(k, k2, "matmul_bt inner dims {} vs {}", k, k2);
    let ad = a.data();
    let bd = b.data();
    let mut out = vec![0.0f64; m * n];
    out.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
        let arow = &ad[i * k..(i + 1) * k];
        for (j, o) in row.iter_mut().enumerate() {
            let brow = &bd[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (&av, &bv) in arow.iter().zip(brow) {
                acc += av * bv;
            }
            *o = acc;
        }
    });
    Tensor::from_vec(&[m, n], out)
}

/// Lower one sample `[c,h,w]` to a `[c*k*k, ho*wo]` patch matrix.
pub fn im2col(x: &[f64], c: usize, h: usize, w: usize, k: usize, s: usize, p: usize) -> Tensor {
    let ho = conv_out(h, k, s, p);
    let wo = conv_out(w, k, s, p);
    let mut col = vec![0.0f64; c * k * k * ho * wo];
    let cols = ho * wo;
    for ci in 0..c {
        let xplane = &x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = ((ci * k + ki) * k + kj) * cols;
                for oy in 0..ho {
                    let iy = (oy * s + ki) as i64 - p as i64;
                    if iy < 0 || iy >= h as i64 {
                        continue;
                    }
                    let base = iy as usize * w;
                    let orow = row + oy * wo;
                    for ox in 0..wo {
                        let ix = (ox * s + kj) as i64 - p as i64;
                        if ix >= 0 && ix < w as i64 {
                            col[orow + ox] = xplane[base + ix as usize];
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[c * k * k, cols], col)
}

/// Adjoint of [`im2col`]: scatter-add a `[c*k*k, ho*wo]` patch matrix back
/// into a `[c,h,w]` image.
pub fn col2im(
    col: &Tensor,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    s: usize,
    p: usize,
) -> Vec<f64> {
    let ho = conv_out(h, k, s, p);
    let wo = conv_out(w, k, s, p);
    let cols = ho * wo;
    assert_eq!(col.shape(), &[c * k * k, cols]);
    let cd = col.data();
    let mut x = vec![0.0f64; c * h * w];
    for ci in 0..c {
        let xplane = &mut x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = ((ci * k + ki) * k + kj) * cols;
                for oy in 0..ho {
                    let iy = (oy * s + ki) as i64 - p as i64;
                    if iy < 0 || iy >= h as i64 {
                        continue;
                    }
                    let base = iy as usize * w;
                    let orow = row + oy * wo;
                    for ox in 0..wo {
                        let ix = (ox * s + kj) as i64 - p as i64;
                        if ix >= 0 && ix < w as i64 {
                            xplane[base + ix as usize] += cd[orow + ox];
                        }
                    }
                }
            }
        }
    }
    x
}

fn add_bias_rows(y: &mut [f64], bias: &[f64], cols: usize) {
    for (co, b) in bias.iter().enumerate() {
        for v in &mut y[co * cols..(co + 1) * cols] {
            *v += b;
        }
    }
}

/// Convolution forward. x:[n,ci,h,w], w:[co,ci,k,k], b:[co].
pub fn conv2d(x: &Tensor, weight: &Tensor, bias: &Tensor, s: usize, p: usize) -> Tensor {
    let (n, ci, h, w) = x.dims4();
    let (co, ci2, k, k2) = weight.dims4();
    assert_eq!(ci, ci2, "conv2d channel mismatch {} vs {}", ci, ci2);
    assert_eq!(k, k2);
    assert_eq!(bias.shape(), &[co]);
    let ho = conv_out(h, k, s, p);
    let wo = conv_out(w, k, s, p);
    let wr = weight.reshape(&[co, ci * k * k]);
    let plane = ho * wo;
    let mut out = vec![0.0f64; n * co * plane];
    out.par_chunks_mut(co * plane)
        .enumerate()
        .for_each(|(ni, yslice)| {
            let xs = &x.data()[ni * ci * h * w..(ni + 1) * ci * h * w];
            let col = im2col(xs, ci, h, w, k, s, p);
            let y = matmul(&wr, &col);
            yslice.copy_from_slice(y.data());
            add_bias_rows(yslice, bias.data(), plane);
        });
    Tensor::from_vec(&[n, co, ho, wo], out)
}

/// Convolution backward. Returns (dx, dw, db); dx is `None` when not needed.
pub fn conv2d_backward(
    x: &Tensor,
    weight: &Tensor,
    dy: &Tensor,
    s: usize,
    p: usize,
    need_dx: bool,
) -> (Option<Tensor>, Tensor, Tensor) {
    let (n, ci, h, w) = x.dims4();
    let (co, _, k, _) = weight.dims4();
    let (n2, co2, ho, wo) = dy.dims4();
    assert_eq!(n, n2);
    assert_eq!(co, co2);
    let plane = ho * wo;
    let wr = weight.reshape(&[co, ci * k * k]);

    // Per-sample contributions computed in parallel, reduced in batch order.
    let per_sample: Vec<(Option<Vec<f64>>, Tensor)> = (0..n)
        .into_par_iter()
        .map(|ni| {
            let xs = &x.data()[ni * ci * h * w..(ni + 1) * ci * h * w];
            let dys = Tensor::from_vec(
                &[co, plane],
                dy.data()[ni * co * plane..(ni + 1) * co * plane].to_vec(),
            );
            let col = im2col(xs, ci, h, w, k, s, p);
            let dw_n = matmul_bt(&dys, &col);
            let dx_n = if need_dx {
                let dcol = matmul_at(&wr, &dys);
                Some(col2im(&dcol, ci, h, w, k, s, p))
            } else {
                None
            };
            (dx_n, dw_n)
        })
        .collect();

    let mut dw = Tensor::zeros(&[co, ci * k * k]);
    for (_, dw_n) in &per_sample {
        dw.add_assign(dw_n);
    }
    let dw = dw.reshape(&[co, ci, k, k]);

    let mut db = vec![0.0f64; co];
    for ni in 0..n {
        let base = ni * co * plane;
        for (c, dbv) in db.iter_mut().enumerate() {
            for i in 0..plane {
                *dbv += dy.data()[base + c * plane + i];
            }
        }
    }

    let dx = if need_dx {
        let mut dxv = vec![0.0f64; n * ci * h * w];
        for (ni, (dx_n, _)) in per_sample.into_iter().enumerate() {
            dxv[ni * ci * h * w..(ni + 1) * ci * h * w].copy_from_slice(&dx_n.unwrap());
        }
        Some(Tensor::from_vec(&[n, ci, h, w], dxv))
    } else {
        None
    };
    (dx, dw, Tensor::from_vec(&[co], db))
}

/// Transposed convolution forward, upsampling by exactly `s`.
/// x:[n,ci,h,w], w:[ci,co,k,k], b:[co] -> [n,co,s*h,s*w].
pub fn conv_transpose2d(x: &Tensor, weight: &Tensor, bias: &Tensor, s: usize, p: usize) -> Tensor {
    let (n, ci, h, w) = x.dims4();
    let (ci2, co, k, _) = weight.dims4();
    assert_eq!(ci, ci2, "deconv channel mismatch {} vs {}", ci, ci2);
    assert_eq!(bias.shape(), &[co]);
    let ho = deconv_out(h, k, s, p);
    let wo = deconv_out(w, k, s, p);
    // Sanity: the conv view of the output must land back on the input size.
    assert_eq!(conv_out(ho, k, s, p), h);
    assert_eq!(conv_out(wo, k, s, p), w);
    let wr = weight.reshape(&[ci, co * k * k]);
    let plane = ho * wo;
    let mut out = vec![0.0f64; n * co * plane];
    out.par_chunks_mut(co * plane)
        .enumerate()
        .for_each(|(ni, yslice)| {
            let xflat = Tensor::from_vec(
                &[ci, h * w],
                x.data()[ni * ci * h * w..(ni + 1) * ci * h * w].to_vec(),
            );
            let col = matmul_at(&wr, &xflat);
            let y = col2im(&col, co, ho, wo, k, s, p);
            yslice.copy_from_slice(&y);
            add_bias_rows(yslice, bias.data(), plane);
        });
    Tensor::from_vec(&[n, co, ho, wo], out)
}

/// Transposed-convolution backward. Returns (dx, dw, db).
pub fn conv_transpose2d_backward(
    x: &Tensor,
    weight: &Tensor,
    dy: &Tensor,
    s: usize,
    p: usize,
    need_dx: bool,
) -> (Option<Tensor>, Tensor, Tensor) {
    let (n, ci, h, w) = x.dims4();
    let (_, co, k, _) = weight.dims4();
    let (_, _, ho, wo) = dy.dims4();
    let plane = ho * wo;
    let wr = weight.reshape(&[ci, co * k * k]);

    let per_sample: Vec<(Option<Tensor>, Tensor)> = (0..n)
        .into_par_iter()
        .map(|ni| {
            let dys = &dy.data()[ni * co * plane..(ni + 1) * co * plane];
            let dcol = im2col(dys, co, ho, wo, k, s, p);
            let xflat = Tensor::from_vec(
                &[ci, h * w],
                x.data()[ni * ci * h * w..(ni + 1) * ci * h * w].to_vec(),
            );
            let dw_n = matmul_bt(&xflat, &dcol.reshape(&[co * k * k, h * w]));
            let dx_n = if need_dx {
                Some(matmul(&wr, &dcol.reshape(&[co * k * k, h * w])))
            } else {
                None
            };
            (dx_n, dw_n)
        })
        .collect();

    let mut dw = Tensor::zeros(&[ci, co * k * k]);
    for (_, dw_n) in &per_sample {
        dw.add_assign(dw_n);
    }
    let dw = dw.reshape(&[ci, co, k, k]);

    let mut db = vec![0.0f64; co];
    for ni in 0..n {
        let base = ni * co * plane;
        for (c, dbv) in db.iter_mut().enumerate() {
            for i in 0..plane {
                *dbv += dy.data()[base + c * plane + i];
            }
        }
    }

    let dx = if need_dx {
        let mut dxv = vec![0.0f64; n * ci * h * w];
        for (ni, (dx_n, _)) in per_sample.into_iter().enumerate() {
            dxv[ni * ci * h * w..(ni + 1) * ci * h * w]
                .copy_from_slice(dx_n.as_ref().unwrap().data());
        }
        Some(Tensor::from_vec(&[n, ci, h, w], dxv))
    } else {
        None
    };
    (dx, dw, Tensor::from_vec(&[co], db))
}

/// Non-overlapping average pooling by `f` on [n,c,h,w].
pub fn avg_pool2d(x: &Tensor, f: usize) -> Tensor {
    let (n, c, h, w) = x.dims4();
    assert!(f >= 1);
    assert!(
        h % f == 0 && w % f == 0,
        "avg_pool2d: dims {}x{} not divisible by {}",
        h,
        w,
        f
    );
    let (ho, wo) = (h / f, w / f);
    let inv = 1.0 / (f * f) as f64;
    let mut out = vec![0.0f64; n * c * ho * wo];
    let xd = x.data();
    for ni in 0..n {
        for ci in 0..c {
            let xp = &xd[(ni * c + ci) * h * w..];
            let op = (ni * c + ci) * ho * wo;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0;
                    for dy in 0..f {
                        for dx in 0..f {
                            acc += xp[(oy * f + dy) * w + (ox * f + dx)];
                        }
                    }
                    out[op + oy * wo + ox] = acc * inv;
                }
            }
        }
    }
    Tensor::from_vec(&[n, c, ho, wo], out)
}

/// Backward of [`avg_pool2d`]: spread each gradient uniformly over its block.
pub fn avg_pool2d_backward(dy: &Tensor, f: usize, h: usize, w: usize) -> Tensor {
    let (n, c, ho, wo) = dy.dims4();
    assert_eq!((ho * f, wo * f), (h, w));
    let inv = 1.0 / (f * f) as f64;
    let mut dx = vec![0.0f64; n * c * h * w];
    let dyd = dy.data();
    for ni in 0..n {
        for ci in 0..c {
            let dp = &mut dx[(ni * c + ci) * h * w..(ni * c + ci + 1) * h * w];
            let gp = (ni * c + ci) * ho * wo;
            for oy in 0..ho {
                for ox in 0..wo {
                    let g = dyd[gp + oy * wo + ox] * inv;
                    for dy_ in 0..f {
                        for dx_ in 0..f {
                            dp[(oy * f + dy_) * w + (ox * f + dx_)] += g;
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[n, c, h, w], dx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::randn(shape, 1.0, rng)
    }

    fn dot(a: &Tensor, b: &Tensor) -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn matmul_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = randn(&[4, 5], &mut rng);
        let b = randn(&[5, 3], &mut rng);
        let c = matmul(&a, &b);
        for i in 0..4 {
            for j in 0..3 {
                let mut acc = 0.0;
                for k in 0..5 {
                    acc += a.data()[i * 5 + k] * b.data()[k * 3 + j];
                }
                assert!((c.data()[i * 3 + j] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matmul_transpose_variants_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = randn(&[4, 6], &mut rng);
        let b = randn(&[6, 5], &mut rng);
        let c = matmul(&a, &b);
        // A^T path: (A^T)^T * B
        let at = Tensor::from_fn(&[6, 4], |i| a.data()[(i % 4) * 6 + i / 4]);
        let c2 = matmul_at(&at, &b);
        // B^T path
        let bt = Tensor::from_fn(&[5, 6], |i| b.data()[(i % 6) * 5 + i / 6]);
        let c3 = matmul_bt(&a, &bt);
        for ((x, y), z) in c.data().iter().zip(c2.data()).zip(c3.data()) {
            assert!((x - y).abs() < 1e-12);
            assert!((x - z).abs() < 1e-12);
        }
    }

    #[test]
    fn conv2d_matches_direct_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = randn(&[2, 3, 6, 5], &mut rng);
        let w = randn(&[4, 3, 3, 3], &mut rng);
        let b = randn(&[4], &mut rng);
        for &(s, p) in &[(1usize, 1usize), (2, 1)] {
            let y = conv2d(&x, &w, &b, s, p);
            let (_, _, ho, wo) = y.dims4();
            for n in 0..2 {
                for co in 0..4 {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let mut acc = b.data()[co];
                            for ci in 0..3 {
                                for ki in 0..3 {
                                    for kj in 0..3 {
                                        let iy = (oy * s + ki) as i64 - p as i64;
                                        let ix = (ox * s + kj) as i64 - p as i64;
                                        if iy >= 0 && iy < 6 && ix >= 0 && ix < 5 {
                                            let xv = x.data()
                                                [((n * 3 + ci) * 6 + iy as usize) * 5 + ix as usize];
                                            let wv =
                                                w.data()[((co * 3 + ci) * 3 + ki) * 3 + kj];
                                            acc += xv * wv;
                                        }
                                    }
                                }
                            }
                            let got = y.data()[((n * 4 + co) * ho + oy) * wo + ox];
                            assert!(
                                (got - acc).abs() < 1e-10,
                                "mismatch at s={} p={}: {} vs {}",
                                s,
                                p,
                                got,
                                acc
                            );
                        }
                    }
                }
            }
        }
    }

    // <conv(x; w), y> == <x, conv^T(y; w)> pins im2col/col2im adjointness.
    #[test]
    fn conv_and_transpose_are_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for &(k, s, p, h, w) in &[(3usize, 2usize, 1usize, 8usize, 6usize), (4, 2, 1, 8, 6), (3, 1, 1, 5, 7)] {
            let ci = 3;
            let co = 2;
            let x = randn(&[1, ci, h, w], &mut rng);
            let wt = randn(&[co, ci, k, k], &mut rng);
            let zb_co = Tensor::zeros(&[co]);
            let zb_ci = Tensor::zeros(&[ci]);
            let y = conv2d(&x, &wt, &zb_co, s, p);
            let g = randn(y.shape(), &mut rng);
            // transpose weight layout [co,ci,k,k] -> [co(=in of deconv), ci(=out), k, k]
            let yt = conv_transpose2d(&g, &wt.reshape(&[co, ci, k, k]), &zb_ci, s, p);
            // adjoint identity only holds when deconv output matches x's size
            if yt.shape() == x.shape() {
                let lhs = dot(&y, &g);
                let rhs = dot(&x, &yt);
                assert!(
                    (lhs - rhs).abs() < 1e-9 * (1.0 + lhs.abs()),
                    "adjoint identity failed k={} s={} p={}: {} vs {}",
                    k,
                    s,
                    p,
                    lhs,
                    rhs
                );
            }
        }
    }

    #[test]
    fn avg_pool_constant_block() {
        let x = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, -1.0, 1.0, -1.0]);
        let y = avg_pool2d(&x, 2);
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data()[0], 0.0);
    }

    #[test]
    fn avg_pool_backward_spreads_uniformly() {
        let dy = Tensor::from_vec(&[1, 1, 1, 1], vec![4.0]);
        let dx = avg_pool2d_backward(&dy, 2, 2, 2);
        assert_eq!(dx.data(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn deconv_doubles_spatial_extent() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = randn(&[1, 2, 4, 3], &mut rng);
        for &k in &[3usize, 4usize] {
            let w = randn(&[2, 5, k, k], &mut rng);
            let b = Tensor::zeros(&[5]);
            let y = conv_transpose2d(&x, &w, &b, 2, 1);
            assert_eq!(y.shape(), &[1, 5, 8, 6]);
        }
    }
}
