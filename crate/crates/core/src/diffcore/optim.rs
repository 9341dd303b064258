use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// A fixed, ordered collection of named tensors.
///
/// Gradient buffers use the same type as the parameters they belong to, so
/// `tensors()` of a parameter set and of its gradient line up index by index.
pub trait Parameters {
    fn names(&self) -> Vec<String>;
    fn tensors(&self) -> Vec<&Tensor>;
    fn tensors_mut(&mut self) -> Vec<&mut Tensor>;

    /// Which tensors receive decoupled weight decay. Defaults to every
    /// matrix-shaped tensor.
    fn decay_mask(&self) -> Vec<bool> {
        self.tensors().iter().map(|t| t.shape().len() >= 2).collect()
    }

    fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    fn zero(&mut self) {
        for t in self.tensors_mut() {
            t.fill(0.0);
        }
    }

    /// SHA-256 over names, shapes and little-endian values.
    fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.names().iter().zip(self.tensors()) {
            h.update(name.as_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex_digest(&h.finalize())
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamWConfig {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::config("lr", format!("must be > 0, got {}", self.lr)));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::config("weight_decay", "must be >= 0"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("beta", "must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// First and second moment estimates, one buffer per parameter tensor.
#[derive(Clone, Debug, Default)]
pub struct AdamState {
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

/// One bias-corrected AdamW update over matching parameter/gradient lists.
pub fn adamw_step(
    params: &mut [&mut Tensor],
    grads: &[&Tensor],
    decay: &[bool],
    state: &mut AdamState,
    cfg: &AdamWConfig,
) -> Result<()> {
    cfg.validate()?;
    if params.len() != grads.len() || params.len() != decay.len() {
        return Err(Error::shape(
            "adamw_step",
            &[params.len(), decay.len()],
            &[grads.len()],
        ));
    }
    if state.m.is_empty() {
        state.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
        state.v = params.iter().map(|p| vec![0.0; p.len()]).collect();
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::shape("adamw_step", p.shape(), g.shape()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        if !p.requires_grad {
            continue;
        }
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        let shrink = if decay[i] { 1.0 - cfg.lr * cfg.weight_decay } else { 1.0 };
        for (j, w) in p.data_mut().iter_mut().enumerate() {
            let gj = g.data()[j];
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            if shrink != 1.0 {
                *w *= shrink;
            }
            *w -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// AdamW bound to a [`Parameters`] implementation.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    pub state: AdamState,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            state: AdamState::default(),
        })
    }

    pub fn step<P: Parameters>(&mut self, params: &mut P, grads: &P) -> Result<()> {
        let decay = params.decay_mask();
        let g = grads.tensors();
        let mut p = params.tensors_mut();
        adamw_step(&mut p, &g, &decay, &mut self.state, &self.cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_without_decay_leaves_params_unchanged() {
        let mut w = Tensor::from_vec(vec![0.3, -1.2]);
        let g = Tensor::zeros(&[2]);
        let before = w.clone();
        let mut st = AdamState::default();
        adamw_step(&mut [&mut w], &[&g], &[true], &mut st, &AdamWConfig::new(1e-2, 0.0)).unwrap();
        assert_eq!(w, before);
    }

    #[test]
    fn one_step_on_square_decreases_magnitude() {
        let mut w = Tensor::from_vec(vec![1.0]);
        let g = Tensor::from_vec(vec![2.0 * w.data()[0]]);
        let mut st = AdamState::default();
        adamw_step(&mut [&mut w], &[&g], &[false], &mut st, &AdamWConfig::new(1e-2, 0.0)).unwrap();
        assert!(w.data()[0].abs() < 1.0);
    }

    #[test]
    fn non_positive_lr_is_a_config_error() {
        let mut w = Tensor::from_vec(vec![1.0]);
        let g = Tensor::from_vec(vec![1.0]);
        let mut st = AdamState::default();
        let r = adamw_step(&mut [&mut w], &[&g], &[false], &mut st, &AdamWConfig::new(0.0, 0.0));
        assert!(matches!(r, Err(Error::Config { .. })));
    }

    #[test]
    fn converges_on_two_dimensional_quadratic() {
        // f(w) = (w0 - 1)^2 + 3 (w1 + 2)^2, argmin (1, -2)
        let mut w = Tensor::from_vec(vec![0.0, 0.0]);
        let mut st = AdamState::default();
        let cfg = AdamWConfig::new(0.1, 0.0);
        for _ in 0..100 {
            let d = w.data();
            let g = Tensor::from_vec(vec![2.0 * (d[0] - 1.0), 6.0 * (d[1] + 2.0)]);
            adamw_step(&mut [&mut w], &[&g], &[false], &mut st, &cfg).unwrap();
        }
        // keep stepping with a decayed rate to settle Adam's oscillation
        let cfg = AdamWConfig::new(0.01, 0.0);
        for _ in 0..200 {
            let d = w.data();
            let g = Tensor::from_vec(vec![2.0 * (d[0] - 1.0), 6.0 * (d[1] + 2.0)]);
            adamw_step(&mut [&mut w], &[&g], &[false], &mut st, &cfg).unwrap();
        }
        assert!((w.data()[0] - 1.0).abs() < 1e-3, "{:?}", w);
        assert!((w.data()[1] + 2.0).abs() < 1e-3, "{:?}", w);
    }
}
