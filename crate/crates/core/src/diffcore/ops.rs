//! Slice-level numeric primitives shared by the kernels and the hand-written
//! model backward passes. Matrices are row-major.

use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const L2_MIN_NORM: f64 = 1e-12;
pub const PROB_CLIP: f64 = 1e-7;

/// `c = alpha * op(a) * op(b) + beta * c`.
///
/// `op(a)` is `m x k` and `op(b)` is `k x n`. When `ta` is set, `a` is stored
/// as `k x m`; when `tb` is set, `b` is stored as `n x k`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    ta: bool,
    tb: bool,
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    b: &[f64],
    beta: f64,
    c: &mut [f64],
) {
    assert_eq!(a.len(), m * k, "gemm: lhs length");
    assert_eq!(b.len(), k * n, "gemm: rhs length");
    assert_eq!(c.len(), m * n, "gemm: output length");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|x| *x *= beta);
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: lengths were checked above and the strides describe exactly
    // those buffers.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `a (m x k) * b (k x n)` into a fresh buffer.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    gemm(false, false, m, k, n, 1.0, a, b, 0.0, &mut c);
    c
}

/// Plain triple loop with a fixed summation order. Used where results must be
/// bit-reproducible against an independent evaluation.
pub fn matvec_rowvec(x: &[f64], w: &[f64], out: &mut [f64]) {
    let n = out.len();
    debug_assert_eq!(w.len(), x.len() * n);
    for (i, &xi) in x.iter().enumerate() {
        let row = &w[i * n..(i + 1) * n];
        for (o, &wij) in out.iter_mut().zip(row) {
            *o += xi * wij;
        }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
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

pub fn relu_inplace(x: &mut [f64]) {
    x.iter_mut().for_each(|v| {
        if *v < 0.0 {
            *v = 0.0
        }
    });
}

/// Zeroes `grad` wherever the ReLU output was not positive.
pub fn relu_backward_inplace(out: &[f64], grad: &mut [f64]) {
    for (g, &o) in grad.iter_mut().zip(out) {
        if o <= 0.0 {
            *g = 0.0;
        }
    }
}

pub fn softmax_inplace(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Given softmax output `y` and upstream `dy`, writes `dx` into `dy`.
pub fn softmax_backward_inplace(y: &[f64], dy: &mut [f64]) {
    let s = dot(y, dy);
    for (d, &yi) in dy.iter_mut().zip(y) {
        *d = yi * (*d - s);
    }
}

pub fn logsumexp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Row-wise layer norm over `n` columns. Returns `(y, xhat, rstd)`.
pub fn layer_norm_forward(
    x: &[f64],
    n: usize,
    gamma: &[f64],
    beta: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let rows = x.len() / n;
    let mut y = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = vec![0.0; rows];
    for r in 0..rows {
        let xr = &x[r * n..(r + 1) * n];
        let mean = xr.iter().sum::<f64>() / n as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        rstd[r] = rs;
        for j in 0..n {
            let h = (xr[j] - mean) * rs;
            xhat[r * n + j] = h;
            y[r * n + j] = h * gamma[j] + beta[j];
        }
    }
    (y, xhat, rstd)
}

/// Backward of [`layer_norm_forward`]. Accumulates into `dgamma`/`dbeta` and
/// returns `dx`.
pub fn layer_norm_backward(
    dy: &[f64],
    xhat: &[f64],
    rstd: &[f64],
    gamma: &[f64],
    dgamma: &mut [f64],
    dbeta: &mut [f64],
) -> Vec<f64> {
    let n = gamma.len();
    let rows = dy.len() / n;
    let mut dx = vec![0.0; dy.len()];
    let mut g = vec![0.0; n];
    for r in 0..rows {
        let dyr = &dy[r * n..(r + 1) * n];
        let xh = &xhat[r * n..(r + 1) * n];
        let mut mean_g = 0.0;
        let mut mean_gx = 0.0;
        for j in 0..n {
            dgamma[j] += dyr[j] * xh[j];
            dbeta[j] += dyr[j];
            g[j] = dyr[j] * gamma[j];
            mean_g += g[j];
            mean_gx += g[j] * xh[j];
        }
        mean_g /= n as f64;
        mean_gx /= n as f64;
        let dxr = &mut dx[r * n..(r + 1) * n];
        for j in 0..n {
            dxr[j] = rstd[r] * (g[j] - mean_g - xh[j] * mean_gx);
        }
    }
    dx
}

/// Normalizes `x` to unit length, returning the output and the input norm.
pub fn l2_normalize(x: &[f64]) -> Result<(Vec<f64>, f64)> {
    let norm = dot(x, x).sqrt();
    if !norm.is_finite() {
        return Err(Error::NonFinite("l2_normalize".into()));
    }
    if norm <= L2_MIN_NORM {
        return Err(Error::Degenerate(format!(
            "l2_normalize on vector with norm {norm:e}"
        )));
    }
    Ok((x.iter().map(|v| v / norm).collect(), norm))
}

/// `dx = (dy - y (y . dy)) / norm`.
pub fn l2_normalize_backward(y: &[f64], norm: f64, dy: &[f64]) -> Vec<f64> {
    let s = dot(y, dy);
    y.iter()
        .zip(dy)
        .map(|(&yi, &di)| (di - yi * s) / norm)
        .collect()
}

pub fn clip_prob(p: f64) -> f64 {
    p.clamp(PROB_CLIP, 1.0 - PROB_CLIP)
}

/// Binary cross-entropy of one prediction, with probability clipping.
pub fn bce(p: f64, y: f64) -> f64 {
    let p = clip_prob(p);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

/// d bce / d p, zero where clipping is active.
pub fn bce_grad(p: f64, y: f64) -> f64 {
    if p < PROB_CLIP || p > 1.0 - PROB_CLIP {
        return 0.0;
    }
    -(y / p) + (1.0 - y) / (1.0 - p)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_transposes_agree_with_naive() {
        let a: Vec<f64> = (0..6).map(|v| v as f64 - 2.0).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|v| (v as f64) * 0.5).collect(); // 3x4
        let c = matmul(&a, &b, 2, 3, 4);
        let mut naive = vec![0.0; 8];
        for i in 0..2 {
            for j in 0..4 {
                for k in 0..3 {
                    naive[i * 4 + j] += a[i * 3 + k] * b[k * 4 + j];
                }
            }
        }
        assert_eq!(c, naive);

        // a^T stored as 3x2
        let mut at = vec![0.0; 6];
        for i in 0..2 {
            for k in 0..3 {
                at[k * 2 + i] = a[i * 3 + k];
            }
        }
        let mut bt = vec![0.0; 12];
        for k in 0..3 {
            for j in 0..4 {
                bt[j * 3 + k] = b[k * 4 + j];
            }
        }
        let mut c2 = vec![0.0; 8];
        gemm(true, true, 2, 3, 4, 1.0, &at, &bt, 0.0, &mut c2);
        for (x, y) in c2.iter().zip(&naive) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn l2_normalize_rejects_zero_vector() {
        assert!(matches!(
            l2_normalize(&[0.0, 0.0]),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn bce_is_finite_at_extremes() {
        assert!(bce(0.0, 1.0).is_finite());
        assert!(bce(1.0, 0.0).is_finite());
        assert!(bce(1.0, 1.0) < 1e-6);
    }

    #[test]
    fn sigmoid_is_stable() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0);
        assert!(sigmoid(800.0) <= 1.0);
    }
}
