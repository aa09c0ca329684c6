//! Batched tensor kernels on `(M, C, H, W)` arrays: convolution through
//! im2col, average pooling, and their backward passes.

use ndarray::{s, Array1, Array2, Array4, Axis};

use crate::error::{shape_err, Result};

pub fn conv_out_dim(size: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = size + 2 * padding;
    if stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Column matrix of shape `(C*k*k, M*Ho*Wo)`; zero where a tap hits padding.
fn im2col(x: &Array4<f64>, k: usize, stride: usize, pad: usize, ho: usize, wo: usize) -> Array2<f64> {
    let (m, c, h, w) = x.dim();
    let mut cols = Array2::zeros((c * k * k, m * ho * wo));
    let xs = x.as_standard_layout();
    let xs = xs.as_slice().unwrap();
    let width = m * ho * wo;
    let out = cols.as_slice_mut().unwrap();
    for ci in 0..c {
        for di in 0..k {
            for dj in 0..k {
                let row = ((ci * k + di) * k + dj) * width;
                for b in 0..m {
                    let plane = (b * c + ci) * h * w;
                    for oi in 0..ho {
                        let ii = (oi * stride + di) as isize - pad as isize;
                        if ii < 0 || ii >= h as isize {
                            continue;
                        }
                        let base = row + (b * ho + oi) * wo;
                        let src = plane + ii as usize * w;
                        for oj in 0..wo {
                            let jj = (oj * stride + dj) as isize - pad as isize;
                            if jj >= 0 && jj < w as isize {
                                out[base + oj] = xs[src + jj as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(
    cols: &Array2<f64>,
    dims: (usize, usize, usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Array4<f64> {
    let (m, c, h, w) = dims;
    let mut x = Array4::zeros(dims);
    let xs = x.as_slice_mut().unwrap();
    let cs = cols.as_slice().unwrap();
    let width = m * ho * wo;
    for ci in 0..c {
        for di in 0..k {
            for dj in 0..k {
                let row = ((ci * k + di) * k + dj) * width;
                for b in 0..m {
                    let plane = (b * c + ci) * h * w;
                    for oi in 0..ho {
                        let ii = (oi * stride + di) as isize - pad as isize;
                        if ii < 0 || ii >= h as isize {
                            continue;
                        }
                        let base = row + (b * ho + oi) * wo;
                        let dst = plane + ii as usize * w;
                        for oj in 0..wo {
                            let jj = (oj * stride + dj) as isize - pad as isize;
                            if jj >= 0 && jj < w as isize {
                                xs[dst + jj as usize] += cs[base + oj];
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

fn conv_geometry(x: &Array4<f64>, weight: &Array4<f64>, stride: usize, pad: usize) -> Result<(usize, usize, usize)> {
    let (_, c, h, w) = x.dim();
    let (_, wc, k, k2) = weight.dim();
    if wc != c || k != k2 {
        return shape_err(format!(
            "conv weight {:?} does not fit input {:?}",
            weight.dim(),
            x.dim()
        ));
    }
    match (conv_out_dim(h, k, stride, pad), conv_out_dim(w, k, stride, pad)) {
        (Some(ho), Some(wo)) => Ok((k, ho, wo)),
        _ => shape_err(format!("kernel {k} does not fit a {h}x{w} input")),
    }
}

/// `(O, M*Ho*Wo)` matrix to an `(M, O, Ho, Wo)` tensor.
fn unflatten(y: Array2<f64>, m: usize, ho: usize, wo: usize) -> Array4<f64> {
    let o = y.nrows();
    y.into_shape_with_order((o, m, ho, wo))
        .expect("conv output size")
        .permuted_axes([1, 0, 2, 3])
        .as_standard_layout()
        .into_owned()
}

fn flatten(dy: &Array4<f64>) -> Array2<f64> {
    let (m, o, ho, wo) = dy.dim();
    dy.view()
        .permuted_axes([1, 0, 2, 3])
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((o, m * ho * wo))
        .expect("conv gradient size")
}

pub fn conv2d(
    x: &Array4<f64>,
    weight: &Array4<f64>,
    bias: &Array1<f64>,
    stride: usize,
    pad: usize,
) -> Result<Array4<f64>> {
    let (k, ho, wo) = conv_geometry(x, weight, stride, pad)?;
    let o = weight.dim().0;
    let cols = im2col(x, k, stride, pad, ho, wo);
    let w2 = weight.view().into_shape_with_order((o, cols.nrows())).unwrap();
    let mut y = w2.dot(&cols);
    for (mut row, &b) in y.outer_iter_mut().zip(bias) {
        row += b;
    }
    Ok(unflatten(y, x.dim().0, ho, wo))
}

pub struct ConvGrads {
    pub weight: Array4<f64>,
    pub bias: Array1<f64>,
    pub input: Array4<f64>,
}

pub fn conv2d_backward(
    x: &Array4<f64>,
    weight: &Array4<f64>,
    stride: usize,
    pad: usize,
    dy: &Array4<f64>,
) -> Result<ConvGrads> {
    let (k, ho, wo) = conv_geometry(x, weight, stride, pad)?;
    let o = weight.dim().0;
    if dy.dim() != (x.dim().0, o, ho, wo) {
        return shape_err("conv upstream gradient has the wrong shape");
    }
    let cols = im2col(x, k, stride, pad, ho, wo);
    let dy2 = flatten(dy);
    let dw = dy2.dot(&cols.t());
    let db = dy2.sum_axis(Axis(1));
    let w2 = weight.view().into_shape_with_order((o, cols.nrows())).unwrap();
    let dcols = w2.t().dot(&dy2);
    Ok(ConvGrads {
        weight: dw.into_shape_with_order(weight.dim()).unwrap(),
        bias: db,
        input: col2im(&dcols, x.dim(), k, stride, pad, ho, wo),
    })
}

pub fn avg_pool(x: &Array4<f64>, window: usize, stride: usize) -> Result<Array4<f64>> {
    let (m, c, h, w) = x.dim();
    let (Some(ho), Some(wo)) = (conv_out_dim(h, window, stride, 0), conv_out_dim(w, window, stride, 0)) else {
        return shape_err(format!("pool window {window}/{stride} does not fit {h}x{w}"));
    };
    if window == 0 {
        return shape_err("pool window must be positive");
    }
    let inv = 1.0 / (window * window) as f64;
    let mut out = Array4::zeros((m, c, ho, wo));
    for ((b, ci, i, j), v) in out.indexed_iter_mut() {
        let (r, q) = (i * stride, j * stride);
        *v = x.slice(s![b, ci, r..r + window, q..q + window]).sum() * inv;
    }
    Ok(out)
}

pub fn avg_pool_backward(
    dims: (usize, usize, usize, usize),
    window: usize,
    stride: usize,
    dy: &Array4<f64>,
) -> Array4<f64> {
    let inv = 1.0 / (window * window) as f64;
    let mut dx = Array4::zeros(dims);
    for ((b, ci, i, j), &g) in dy.indexed_iter() {
        let (r, q) = (i * stride, j * stride);
        dx.slice_mut(s![b, ci, r..r + window, q..q + window])
            .mapv_inplace(|v| v + g * inv);
    }
    dx
}

pub fn global_avg_pool(x: &Array4<f64>) -> Array4<f64> {
    let (m, c, h, w) = x.dim();
    let area = (h * w) as f64;
    Array4::from_shape_fn((m, c, 1, 1), |(b, ci, _, _)| x.slice(s![b, ci, .., ..]).sum() / area)
}

pub fn global_avg_pool_backward(dims: (usize, usize, usize, usize), dy: &Array4<f64>) -> Array4<f64> {
    let (_, _, h, w) = dims;
    let area = (h * w) as f64;
    Array4::from_shape_fn(dims, |(b, ci, _, _)| dy[[b, ci, 0, 0]] / area)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Direct nested-loop convolution.
    fn naive_conv(x: &Array4<f64>, wt: &Array4<f64>, b: &Array1<f64>, stride: usize, pad: usize) -> Array4<f64> {
        let (m, c, h, w) = x.dim();
        let (o, _, k, _) = wt.dim();
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        let mut y = Array4::zeros((m, o, ho, wo));
        for bi in 0..m {
            for oc in 0..o {
                for i in 0..ho {
                    for j in 0..wo {
                        let mut acc = b[oc];
                        for ci in 0..c {
                            for di in 0..k {
                                for dj in 0..k {
                                    let ii = (i * stride + di) as isize - pad as isize;
                                    let jj = (j * stride + dj) as isize - pad as isize;
                                    if ii >= 0 && jj >= 0 && (ii as usize) < h && (jj as usize) < w {
                                        acc += wt[[oc, ci, di, dj]] * x[[bi, ci, ii as usize, jj as usize]];
                                    }
                                }
                            }
                        }
                        y[[bi, oc, i, j]] = acc;
                    }
                }
            }
        }
        y
    }

    fn random(rng: &mut ChaCha8Rng, dims: (usize, usize, usize, usize)) -> Array4<f64> {
        Array4::from_shape_fn(dims, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn conv_matches_nested_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for &(k, stride, pad) in &[(1, 1, 0), (3, 1, 1), (3, 2, 1), (3, 1, 0), (2, 2, 0)] {
            let x = random(&mut rng, (2, 3, 7, 6));
            let wt = random(&mut rng, (4, 3, k, k));
            let b = Array1::from_shape_fn(4, |_| rng.gen_range(-1.0..1.0));
            let got = conv2d(&x, &wt, &b, stride, pad).unwrap();
            let want = naive_conv(&x, &wt, &b, stride, pad);
            assert_eq!(got.dim(), want.dim());
            let err = (&got - &want).mapv(f64::abs).fold(0.0f64, |a, &b| a.max(b));
            assert!(err < 1e-12, "k={k} s={stride} p={pad}: {err}");
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(&mut rng, (2, 2, 5, 5));
        let wt = random(&mut rng, (3, 2, 3, 3));
        let b = Array1::from_shape_fn(3, |_| rng.gen_range(-1.0..1.0));
        let up = random(&mut rng, (2, 3, 3, 3));
        let loss = |x: &Array4<f64>, wt: &Array4<f64>, b: &Array1<f64>| (conv2d(x, wt, b, 2, 1).unwrap() * &up).sum();
        let g = conv2d_backward(&x, &wt, 2, 1, &up).unwrap();
        let h = 1e-5;
        for (idx, &a) in g.weight.indexed_iter().step_by(5) {
            let (mut p, mut m) = (wt.clone(), wt.clone());
            p[idx] += h;
            m[idx] -= h;
            assert!((a - (loss(&x, &p, &b) - loss(&x, &m, &b)) / (2.0 * h)).abs() < 1e-7);
        }
        for (idx, &a) in g.input.indexed_iter().step_by(3) {
            let (mut p, mut m) = (x.clone(), x.clone());
            p[idx] += h;
            m[idx] -= h;
            assert!((a - (loss(&p, &wt, &b) - loss(&m, &wt, &b)) / (2.0 * h)).abs() < 1e-7);
        }
        for i in 0..3 {
            let (mut p, mut m) = (b.clone(), b.clone());
            p[i] += h;
            m[i] -= h;
            assert!((g.bias[i] - (loss(&x, &wt, &p) - loss(&x, &wt, &m)) / (2.0 * h)).abs() < 1e-7);
        }
    }

    #[test]
    fn pooling_examples() {
        let x = array![[[[1.0, 2.0], [3.0, 4.0]]]];
        assert_eq!(avg_pool(&x, 2, 2).unwrap()[[0, 0, 0, 0]], 2.5);
        assert_eq!(global_avg_pool(&x)[[0, 0, 0, 0]], 2.5);
        let c = Array4::from_elem((2, 3, 4, 4), -1.75);
        assert!(global_avg_pool(&c).iter().all(|&v| v == -1.75));
        assert!(avg_pool(&x, 3, 1).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&mut rng, (1, 2, 4, 4));
        let scaled = avg_pool(&(&x * 3.0), 2, 2).unwrap();
        let err = (&scaled - &(avg_pool(&x, 2, 2).unwrap() * 3.0)).mapv(f64::abs).sum();
        assert!(err < 1e-12);
    }

    #[test]
    fn pool_backward_is_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(&mut rng, (2, 2, 6, 6));
        let dy = random(&mut rng, (2, 2, 3, 3));
        let lhs = (avg_pool(&x, 2, 2).unwrap() * &dy).sum();
        let rhs = (avg_pool_backward(x.dim(), 2, 2, &dy) * &x).sum();
        assert!((lhs - rhs).abs() < 1e-12);
        let dy = random(&mut rng, (2, 2, 1, 1));
        let lhs = (global_avg_pool(&x) * &dy).sum();
        let rhs = (global_avg_pool_backward(x.dim(), &dy) * &x).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
