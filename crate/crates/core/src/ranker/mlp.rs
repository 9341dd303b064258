use rand::Rng;

use crate::diffcore::ops::{self, gemm};
use crate::diffcore::{Parameters, Tensor};
use crate::error::{Error, Result};

/// Dense layers with ReLU between them. The last layer is linear unless
/// `relu_last` is set.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub weights: Vec<Tensor>,
    pub biases: Vec<Tensor>,
    pub relu_last: bool,
}

/// Post-activation outputs of every layer for one batch.
#[derive(Clone, Debug)]
pub struct MlpPass {
    pub n: usize,
    input: Vec<f64>,
    pub outputs: Vec<Vec<f64>>,
}

impl MlpPass {
    pub fn output(&self) -> &[f64] {
        self.outputs.last().map(|v| v.as_slice()).unwrap_or(&self.input)
    }
}

impl Mlp {
    /// He-scaled weights, zero biases.
    pub fn init<R: Rng + ?Sized>(sizes: &[usize], relu_last: bool, rng: &mut R) -> Self {
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for w in sizes.windows(2) {
            weights.push(Tensor::randn(&[w[0], w[1]], (2.0 / w[0] as f64).sqrt(), rng));
            biases.push(Tensor::zeros(&[w[1]]));
        }
        Self {
            weights,
            biases,
            relu_last,
        }
    }

    pub fn d_in(&self) -> usize {
        self.weights[0].rows()
    }

    pub fn d_out(&self) -> usize {
        self.weights.last().expect("non-empty mlp").cols()
    }

    fn activated(&self, layer: usize) -> bool {
        layer + 1 < self.weights.len() || self.relu_last
    }

    pub fn forward(&self, x: &[f64], n: usize) -> Result<MlpPass> {
        if x.len() != n * self.d_in() {
            return Err(Error::shape("mlp", &[x.len()], &[n, self.d_in()]));
        }
        let mut outputs: Vec<Vec<f64>> = Vec::with_capacity(self.weights.len());
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let prev = if l == 0 { x } else { &outputs[l - 1] };
            let (k, m) = (w.rows(), w.cols());
            let mut out = vec![0.0; n * m];
            for r in 0..n {
                out[r * m..(r + 1) * m].copy_from_slice(b.data());
            }
            gemm(false, false, n, k, m, 1.0, prev, w.data(), 1.0, &mut out);
            if self.activated(l) {
                ops::relu_inplace(&mut out);
            }
            outputs.push(out);
        }
        Ok(MlpPass {
            n,
            input: x.to_vec(),
            outputs,
        })
    }

    /// Accumulates into `g` and returns the gradient with respect to the input.
    pub fn backward(&self, pass: &MlpPass, d_out: &[f64], g: &mut Mlp) -> Vec<f64> {
        let n = pass.n;
        let mut delta = d_out.to_vec();
        for l in (0..self.weights.len()).rev() {
            let w = &self.weights[l];
            let (k, m) = (w.rows(), w.cols());
            if self.activated(l) {
                ops::relu_backward_inplace(&pass.outputs[l], &mut delta);
            }
            let prev = if l == 0 { &pass.input } else { &pass.outputs[l - 1] };
            gemm(true, false, k, n, m, 1.0, prev, &delta, 1.0, g.weights[l].data_mut());
            for r in 0..n {
                ops::axpy(1.0, &delta[r * m..(r + 1) * m], g.biases[l].data_mut());
            }
            let mut d_prev = vec![0.0; n * k];
            gemm(false, true, n, m, k, 1.0, &delta, w.data(), 0.0, &mut d_prev);
            delta = d_prev;
        }
        delta
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.zero();
        z
    }
}

impl Parameters for Mlp {
    fn names(&self) -> Vec<String> {
        (0..self.weights.len())
            .flat_map(|l| [format!("{l}.w"), format!("{l}.b")])
            .collect()
    }

    fn tensors(&self) -> Vec<&Tensor> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| [w, b])
            .collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.weights
            .iter_mut()
            .zip(self.biases.iter_mut())
            .flat_map(|(w, b)| [w, b])
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::diffcore::gradcheck::{check_input, check_parameters, DEFAULT_EPS};

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut mlp = Mlp::init(&[5, 7, 3], false, &mut rng);
        let n = 4;
        let mut x: Vec<f64> = (0..n * 5).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w: Vec<f64> = (0..n * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let pass = mlp.forward(&x, n).unwrap();
        let mut g = mlp.zeros_like();
        let dx = mlp.backward(&pass, &w, &mut g);
        let m2 = mlp.clone();
        let r = check_input(
            "mlp_input",
            &mut x,
            &dx,
            |x| Ok(ops::dot(m2.forward(x, n)?.output(), &w)),
            DEFAULT_EPS,
            1e-4,
        )
        .unwrap();
        assert!(r.passed, "{r:?}");
        let r = check_parameters(
            "mlp",
            &mut mlp,
            &g,
            |m| Ok(ops::dot(m.forward(&x, n)?.output(), &w)),
            DEFAULT_EPS,
            60,
            1e-4,
            &mut rng,
        )
        .unwrap();
        assert!(r.passed, "{r:?}");
    }
}
