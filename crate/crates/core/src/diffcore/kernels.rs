//! Differentiable kernels with a stateless forward/backward contract.
//!
//! `backward` receives the same inputs as `forward` plus the gradient of some
//! scalar with respect to the forward output, and returns one gradient per
//! input (`None` for inputs that are not differentiable, e.g. labels).

use super::ops;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub trait Kernel: Send + Sync {
    fn name(&self) -> &'static str;
    fn arity(&self) -> usize;
    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor>;
    fn backward(&self, inputs: &[&Tensor], grad_out: &Tensor) -> Result<Vec<Option<Tensor>>>;
}

fn check_arity(k: &dyn Kernel, inputs: &[&Tensor]) -> Result<()> {
    if inputs.len() != k.arity() {
        return Err(Error::Input(format!(
            "{} expects {} inputs, got {}",
            k.name(),
            k.arity(),
            inputs.len()
        )));
    }
    Ok(())
}

fn matrix_dims(t: &Tensor, op: &str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        other => Err(Error::shape(op, other, &[0, 0])),
    }
}

pub struct MatMul;
pub struct Add;
pub struct Concat;
pub struct Softmax;
pub struct Sigmoid;
pub struct Relu;
pub struct LayerNorm;
pub struct L2Normalize;
pub struct ElementwiseMul;
pub struct CrossEntropyBinary;
pub struct LogSoftmax;

impl Kernel for MatMul {
    fn name(&self) -> &'static str {
        "matmul"
    }
    fn arity(&self) -> usize {
        2
    }
    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        check_arity(self, inputs)?;
        let (m, k) = matrix_dims(inputs[0], "matmul")?;
        let (k2, n) = matrix_dims(inputs[1], "matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", inputs[0].shape(), inputs[1].shape()));
        }
        Tensor::new(&[m, n], ops::matmul(inputs[0].data(), inputs[1].data(), m, k, n))
    }
    fn backward(&self, inputs: &[&Tensor], g: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let (m, k) = matrix_dims(inputs[0], "matmul")?;
        let (_, n) = matrix_dims(inputs[1], "matmul")?;
        let mut da = vec![0.0; m * k];
        ops::gemm(false, true, m, n, k, 1.0, g.data(), inputs[1].data(), 0.0, &mut da);
        let mut db = vec![0.0; k * n];
        ops::gemm(true, false, k, m, n, 1.0, inputs[0].data(), g.data(), 0.0, &mut db);
        Ok(vec![
            Some(Tensor::new(&[m, k], da)?),
            Some(Tensor::new(&[k, n], db)?),
        ])
    }
}

impl Kernel for Add {
    fn name(&self) -> &'static str {
        "add"
    }
    fn arity(&self) -> usize {
        2
    }
    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        check_arity(self, inputs)?;
        inputs[0].same_shape(inputs[1], "add")?;
        let mut out = inputs[0].clone();
        out.add_assign(inputs[1]);
        Ok(out)
    }
    fn backward(&self, _inputs: &[&Tensor], g: &Tensor) -> Result<Vec<Option<Tensor>>> {
        Ok(vec![Some(g.clone()), Some(g.clone())])
    }
}

impl Kernel for Concat {
    fn name(&self) -> &'static str {
        "concat"
    }
    fn arity(&self) -> usize {
        2
    }
    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        check_arity(self, inputs)?;
        let (a, b) = (inputs[0], inputs[1]);
        if a.rows() != b.rows() || a.shape().len() != b.shape().len() {
            return Err(Error::shape("concat", a.shape(), b.shape()));
        }
        let (ca, cb) = (a.cols(), b.cols());
        let mut data = Vec::with_capacity(a.len() + b.len());
        for r in 0..a.rows() {
            data.extend_from_slice(a.row(r));
            data.extend_from_slice(b.row(r));
        }
        let mut shape = a.shape().to_vec();
        if let Some(last) = shape.last_mut() {
            *last = ca + cb;
        }
        Tensor::new(&shape, data)
    }
    fn backward(&self, inputs: &[&Tensor], g: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let (a, b) = (inputs[0], inputs[1]);
        let ca = a.cols();
        let mut da = Vec::with_capacity(a.len());
        let mut db = Vec::with_capacity(b.len());
        for r in 0..a.rows() {
            let row = g.row(r);
            da.extend_from_slice(&row[..ca]);
            db.extend_from_slice(&row[ca..]);
        }
        Ok(vec![
            Some(Tensor::new(a.shape(), da)?),
            Some(Tensor::new(b.shape(), db)?),
        ])
    }
}

impl Kernel for Softmax {
    fn name(&self) -> &'static str {
        "softmax"
    }
    fn arity(&self) -> usize {
        1
    }
    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        check_arity(self, inputs)?;
        let mut out = inputs[0].clone();
        for r in 0..out.rows() {
            ops::softmax_inplace(out.row_mut(r));
        }
        Ok(out)
    }
    fn backward(&self, inputs: &[&Tensor], g: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let y = self.forward(inputs)?;
        let mut dx = g.clone();
        for r in 0..y.rows() {
            ops::softmax_backward_inplace(y.row(r), dx.row_mut(r));
        }
        Ok(vec![Some(dx)])
    }
}

impl Kernel for LogSoftmax {
    fn name(&self) -> &'static str {
        "log_softmax"
    }
    fn arity(&self) -> usize {
        1
    }
    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        check_arity(self, inputs)?;
        let mut out = inputs[0].clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let lse = ops::logsumexp(row);
            row.iter_mut().for_each(|v| *v -= lse);
        }
        Ok(out)
    }
    fn backward(&self, inputs: &[&Tensor], g: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let y = self.forward(inputs)?;
        let mut dx = g.clone();
        for r in 0..y.rows() {
            let gsum: f64 = g.row(r).iter().sum();
            let yr = y.row(r).to_vec();
            for (d, lv) in dx.row_mut(r).iter_mut().zip(yr) {
                *d -= lv.exp() * gsum;
            }
        }
        Ok(vec![Some(dx)])
    }
}

impl Kernel for Sigmoid {
    fn name(&self) -> &'static str {
        "sigmoid"
    }
    fn arity(&self) -> usize {
        1
    }
    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        check_arity(self, inputs)?;
        let data = inputs[0].data().iter().map(|&x| ops::sigmoid(x)).collect();
        Tensor::new(inputs[0].shape(), data)
    }
    fn backward(&self, inputs: &[&Tensor], g: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let data = inputs[0]
            .data()
            .iter()
            .zip(g.data())
            .map(|(&x, &gi)| {
                let s = ops::sigmoid(x);
                gi * s * (1.0 - s)
            })
            .collect();
        Ok(vec![Some(Tensor::new(inputs[0].shape(), data)?)])
    }
}

impl Kernel for Relu {
    fn name(&self) -> &'static str {
        "relu"
    }
    fn arity(&self) -> usize {
        1
    }
    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        check_arity(self, inputs)?;
        let mut out = inputs[0].clone();
        ops::relu_inplace(out.data_mut());
        Ok(out)
    }
    fn backward(&self, inputs: &[&Tensor], g: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let y = self.forward(inputs)?;
        let mut dx = g.clone();
        ops::relu_backward_inplace(y.data(), dx.data_mut());
        Ok(vec![Some(dx)])
    }
}

impl Kernel for LayerNorm {
    fn name(&self) -> &'static str {
        "layer_norm"
    }
    fn arity(&self) -> usize {
        3
    }
    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        check_arity(self, inputs)?;
        let (x, gamma, beta) = (inputs[0], inputs[1], inputs[2]);
        let n = x.cols();
        if gamma.len() != n || beta.len() != n {
            return Err(Error::shape("layer_norm", x.shape(), gamma.shape()));
        }
        let (y, _, _) = ops::layer_norm_forward(x.data(), n, gamma.data(), beta.data());
        Tensor::new(x.shape(), y)
    }
    fn backward(&self, inputs: &[&Tensor], g: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let (x, gamma, beta) = (inputs[0], inputs[1], inputs[2]);
        let n = x.cols();
        let (_, xhat, rstd) = ops::layer_norm_forward(x.data(), n, gamma.data(), beta.data());
        let mut dgamma = vec![0.0; n];
        let mut dbeta = vec![0.0; n];
        let dx = ops::layer_norm_backward(g.data(), &xhat, &rstd, gamma.data(), &mut dgamma, &mut dbeta);
        Ok(vec![
            Some(Tensor::new(x.shape(), dx)?),
            Some(Tensor::new(gamma.shape(), dgamma)?),
            Some(Tensor::new(beta.shape(), dbeta)?),
        ])
    }
}

impl Kernel for L2Normalize {
    fn name(&self) -> &'static str {
        "l2_normalize"
    }
    fn arity(&self) -> usize {
        1
    }
    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        check_arity(self, inputs)?;
        let x = inputs[0];
        let mut data = Vec::with_capacity(x.len());
        for r in 0..x.rows() {
            let (y, _) = ops::l2_normalize(x.row(r))?;
            data.extend(y);
        }
        Tensor::new(x.shape(), data)
    }
    fn backward(&self, inputs: &[&Tensor], g: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let x = inputs[0];
        let mut data = Vec::with_capacity(x.len());
        for r in 0..x.rows() {
            let (y, norm) = ops::l2_normalize(x.row(r))?;
            data.extend(ops::l2_normalize_backward(&y, norm, g.row(r)));
        }
        Ok(vec![Some(Tensor::new(x.shape(), data)?)])
    }
}

impl Kernel for ElementwiseMul {
    fn name(&self) -> &'static str {
        "elementwise_mul"
    }
    fn arity(&self) -> usize {
        2
    }
    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        check_arity(self, inputs)?;
        inputs[0].same_shape(inputs[1], "elementwise_mul")?;
        let data = inputs[0]
            .data()
            .iter()
            .zip(inputs[1].data())
            .map(|(a, b)| a * b)
            .collect();
        Tensor::new(inputs[0].shape(), data)
    }
    fn backward(&self, inputs: &[&Tensor], g: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let (a, b) = (inputs[0], inputs[1]);
        let da = g.data().iter().zip(b.data()).map(|(g, b)| g * b).collect();
        let db = g.data().iter().zip(a.data()).map(|(g, a)| g * a).collect();
        Ok(vec![
            Some(Tensor::new(a.shape(), da)?),
            Some(Tensor::new(b.shape(), db)?),
        ])
    }
}

/// Mean binary cross-entropy of probabilities against `{0,1}` labels. Labels
/// receive no gradient.
impl Kernel for CrossEntropyBinary {
    fn name(&self) -> &'static str {
        "cross_entropy_binary"
    }
    fn arity(&self) -> usize {
        2
    }
    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        check_arity(self, inputs)?;
        let (p, y) = (inputs[0], inputs[1]);
        p.same_shape(y, "cross_entropy_binary")?;
        if p.is_empty() {
            return Err(Error::Input("cross_entropy_binary on empty batch".into()));
        }
        let n = p.len() as f64;
        let loss = p
            .data()
            .iter()
            .zip(y.data())
            .map(|(&p, &y)| ops::bce(p, y))
            .sum::<f64>()
            / n;
        Ok(Tensor::scalar(loss))
    }
    fn backward(&self, inputs: &[&Tensor], g: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let (p, y) = (inputs[0], inputs[1]);
        let scale = g.data()[0] / p.len() as f64;
        let dp = p
            .data()
            .iter()
            .zip(y.data())
            .map(|(&p, &y)| scale * ops::bce_grad(p, y))
            .collect();
        Ok(vec![Some(Tensor::new(p.shape(), dp)?), None])
    }
}

/// All registered kernels.
pub fn registry() -> Vec<Box<dyn Kernel>> {
    vec![
        Box::new(MatMul),
        Box::new(Add),
        Box::new(Concat),
        Box::new(Softmax),
        Box::new(Sigmoid),
        Box::new(Relu),
        Box::new(LayerNorm),
        Box::new(L2Normalize),
        Box::new(ElementwiseMul),
        Box::new(CrossEntropyBinary),
        Box::new(LogSoftmax),
    ]
}

pub fn kernel_by_name(name: &str) -> Result<Box<dyn Kernel>> {
    registry()
        .into_iter()
        .find(|k| k.name() == name)
        .ok_or_else(|| Error::NotFound(format!("kernel `{name}`")))
}
