//! Central-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::kernels::{kernel_by_name, Kernel};
use super::optim::Parameters;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const DEFAULT_EPS: f64 = 1e-5;
pub const TOLERANCE_F64: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradReport {
    pub op_name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl GradReport {
    pub fn new(op_name: impl Into<String>, max_rel_err: f64, tolerance: f64) -> Self {
        Self {
            op_name: op_name.into(),
            max_rel_err,
            tolerance,
            passed: max_rel_err <= tolerance,
        }
    }

    /// Combines reports of the same op, keeping the worst error.
    pub fn merge(self, other: GradReport) -> GradReport {
        GradReport::new(
            self.op_name,
            self.max_rel_err.max(other.max_rel_err),
            self.tolerance.min(other.tolerance),
        )
    }
}

/// `|a - n| / max(|a|, |n|, 1e-8)`
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Checks a registered kernel by name at the default tolerance.
pub fn grad_check(kernel: &str, point: &[Tensor], eps: f64) -> Result<GradReport> {
    let k = kernel_by_name(kernel)?;
    grad_check_kernel(k.as_ref(), point, eps, TOLERANCE_F64)
}

/// The kernel output is reduced to a scalar through fixed pseudo-random
/// weights, so every output entry contributes to the checked gradient.
pub fn grad_check_kernel(
    kernel: &dyn Kernel,
    point: &[Tensor],
    eps: f64,
    tolerance: f64,
) -> Result<GradReport> {
    if point.iter().any(|t| !t.is_finite()) {
        return Err(Error::NonFinite(format!("grad_check point for {}", kernel.name())));
    }
    let refs: Vec<&Tensor> = point.iter().collect();
    let out = kernel.forward(&refs)?;
    let mut wrng = ChaCha8Rng::seed_from_u64(0x5eed_0f_9ad);
    let weights = Tensor::new(
        out.shape(),
        (0..out.len()).map(|_| wrng.random_range(-1.0..1.0)).collect(),
    )?;
    let analytic = kernel.backward(&refs, &weights)?;
    let objective = |inputs: &[Tensor]| -> Result<f64> {
        let r: Vec<&Tensor> = inputs.iter().collect();
        let y = kernel.forward(&r)?;
        Ok(y.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum())
    };

    let mut worst: f64 = 0.0;
    let mut work: Vec<Tensor> = point.to_vec();
    for (idx, grad) in analytic.iter().enumerate() {
        let Some(grad) = grad else { continue };
        for j in 0..work[idx].len() {
            let orig = work[idx].data()[j];
            work[idx].data_mut()[j] = orig + eps;
            let fp = objective(&work)?;
            work[idx].data_mut()[j] = orig - eps;
            let fm = objective(&work)?;
            work[idx].data_mut()[j] = orig;
            let numeric = (fp - fm) / (2.0 * eps);
            if !numeric.is_finite() {
                return Err(Error::NonFinite(format!("numeric gradient of {}", kernel.name())));
            }
            worst = worst.max(rel_err(grad.data()[j], numeric));
        }
    }
    Ok(GradReport::new(kernel.name(), worst, tolerance))
}

/// A valid random evaluation point for a registered kernel.
pub fn sample_point<R: Rng + ?Sized>(kernel: &str, rng: &mut R) -> Result<Vec<Tensor>> {
    let mut normal = |shape: &[usize]| Tensor::randn(shape, 1.0, rng);
    let pt = match kernel {
        "matmul" => vec![normal(&[3, 4]), normal(&[4, 2])],
        "add" | "elementwise_mul" => vec![normal(&[3, 4]), normal(&[3, 4])],
        "concat" => vec![normal(&[3, 2]), normal(&[3, 4])],
        "softmax" | "log_softmax" | "sigmoid" | "l2_normalize" => vec![normal(&[3, 5])],
        "layer_norm" => {
            let mut gamma = normal(&[6]);
            gamma.data_mut().iter_mut().for_each(|g| *g += 1.0);
            vec![normal(&[3, 6]), gamma, normal(&[6])]
        }
        "relu" => {
            // keep entries away from the kink
            let mut x = normal(&[3, 5]);
            for v in x.data_mut() {
                if v.abs() < 0.05 {
                    *v = 0.05_f64.copysign(*v);
                }
            }
            vec![x]
        }
        "cross_entropy_binary" => {
            let p: Vec<f64> = (0..8).map(|_| rng.random_range(0.05..0.95)).collect();
            let y: Vec<f64> = (0..8)
                .map(|_| if rng.random_bool(0.5) { 1.0 } else { 0.0 })
                .collect();
            vec![Tensor::from_vec(p), Tensor::from_vec(y)]
        }
        other => return Err(Error::NotFound(format!("kernel `{other}`"))),
    };
    Ok(pt)
}

/// Compares analytic parameter gradients with central differences of `loss`
/// on a random subset of at most `samples` coordinates.
pub fn check_parameters<P, F, R>(
    name: &str,
    params: &mut P,
    analytic: &P,
    mut loss: F,
    eps: f64,
    samples: usize,
    tolerance: f64,
    rng: &mut R,
) -> Result<GradReport>
where
    P: Parameters,
    F: FnMut(&P) -> Result<f64>,
    R: Rng + ?Sized,
{
    let sizes: Vec<usize> = params.tensors().iter().map(|t| t.len()).collect();
    let total: usize = sizes.iter().sum();
    let picks = sample(rng, total, samples.min(total)).into_vec();
    let grads: Vec<Vec<f64>> = analytic.tensors().iter().map(|t| t.data().to_vec()).collect();
    let mut worst: f64 = 0.0;
    for flat in picks {
        let (mut ti, mut off) = (0, flat);
        while off >= sizes[ti] {
            off -= sizes[ti];
            ti += 1;
        }
        let orig = params.tensors()[ti].data()[off];
        params.tensors_mut()[ti].data_mut()[off] = orig + eps;
        let fp = loss(params)?;
        params.tensors_mut()[ti].data_mut()[off] = orig - eps;
        let fm = loss(params)?;
        params.tensors_mut()[ti].data_mut()[off] = orig;
        let numeric = (fp - fm) / (2.0 * eps);
        if !numeric.is_finite() {
            return Err(Error::NonFinite(format!("numeric gradient of {name}")));
        }
        worst = worst.max(rel_err(grads[ti][off], numeric));
    }
    Ok(GradReport::new(name, worst, tolerance))
}

/// Same as [`check_parameters`] but over a plain input vector.
pub fn check_input<F>(
    name: &str,
    x: &mut [f64],
    analytic: &[f64],
    mut f: F,
    eps: f64,
    tolerance: f64,
) -> Result<GradReport>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let mut worst: f64 = 0.0;
    for j in 0..x.len() {
        let orig = x[j];
        x[j] = orig + eps;
        let fp = f(x)?;
        x[j] = orig - eps;
        let fm = f(x)?;
        x[j] = orig;
        worst = worst.max(rel_err(analytic[j], (fp - fm) / (2.0 * eps)));
    }
    Ok(GradReport::new(name, worst, tolerance))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_passes_at_random_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pt = sample_point("matmul", &mut rng).unwrap();
        let r = grad_check("matmul", &pt, DEFAULT_EPS).unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn l2_normalize_at_one_two_three() {
        let pt = vec![Tensor::from_vec(vec![1.0, 2.0, 3.0])];
        let r = grad_check("l2_normalize", &pt, DEFAULT_EPS).unwrap();
        assert!(r.max_rel_err <= 1e-4, "{r:?}");
    }

    #[test]
    fn sigmoid_numeric_derivative_at_zero() {
        let s = |x: f64| super::super::ops::sigmoid(x);
        let numeric = (s(DEFAULT_EPS) - s(-DEFAULT_EPS)) / (2.0 * DEFAULT_EPS);
        assert!((numeric - 0.25).abs() < 1e-6);
    }

    #[test]
    fn non_finite_point_is_rejected() {
        let pt = vec![Tensor::from_vec(vec![f64::NAN, 1.0])];
        assert!(matches!(
            grad_check("sigmoid", &pt, DEFAULT_EPS),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn report_passed_iff_within_tolerance() {
        assert!(GradReport::new("x", 1e-4, 1e-4).passed);
        assert!(!GradReport::new("x", 1.1e-4, 1e-4).passed);
    }
}
