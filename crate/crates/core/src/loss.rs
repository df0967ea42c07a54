//! Target losses and classification metrics.

use crate::error::{config_err, shape_err, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LossKind {
    /// `½‖z − y‖²`, solved exactly at the output layer.
    Mse,
    /// `½‖z − y‖²` linearised at the current output pre-activation.
    LinearizedMse,
    /// Softmax cross-entropy linearised at the current output pre-activation.
    LinearizedSoftmaxCe,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::Mse => "mse",
            LossKind::LinearizedMse => "linearized_mse",
            LossKind::LinearizedSoftmaxCe => "linearized_softmax_ce",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mse" => Ok(LossKind::Mse),
            "linearized_mse" => Ok(LossKind::LinearizedMse),
            "linearized_softmax_ce" | "softmax_ce" => Ok(LossKind::LinearizedSoftmaxCe),
            other => config_err(format!("unknown loss '{other}'")),
        }
    }

    /// Per-sample loss value of outputs `z` against target vector `y`.
    pub fn value(self, z: &[f64], y: &[f64]) -> f64 {
        match self {
            LossKind::Mse | LossKind::LinearizedMse => {
                0.5 * z.iter().zip(y).fold(0.0, |acc, (a, b)| acc + (a - b) * (a - b))
            }
            LossKind::LinearizedSoftmaxCe => {
                let lse = log_sum_exp(z);
                lse - z.iter().zip(y).fold(0.0, |acc, (a, b)| acc + a * b)
            }
        }
    }

    /// `∂ℓ/∂z` at `z` for target `y`, written into `out`.
    pub fn gradient_into(self, z: &[f64], y: &[f64], out: &mut [f64]) {
        match self {
            LossKind::Mse | LossKind::LinearizedMse => {
                for ((o, a), b) in out.iter_mut().zip(z).zip(y) {
                    *o = a - b;
                }
            }
            LossKind::LinearizedSoftmaxCe => {
                softmax_into(z, out);
                for (o, b) in out.iter_mut().zip(y) {
                    *o -= b;
                }
            }
        }
    }

    /// Batched `∂ℓ/∂z`.
    pub fn gradient(self, z: &Tensor, y: &Tensor) -> Result<Tensor> {
        z.expect_same_shape(y)?;
        let mut out = Tensor::zeros(z.shape());
        let r = z.row_len();
        for b in 0..z.batch_size() {
            self.gradient_into(z.row(b), y.row(b), &mut out.data_mut()[b * r..(b + 1) * r]);
        }
        Ok(out)
    }
}

pub fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

pub fn softmax_into(z: &[f64], out: &mut [f64]) {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for (o, v) in out.iter_mut().zip(z) {
        *o = (v - m).exp();
        s += *o;
    }
    for o in out.iter_mut() {
        *o /= s;
    }
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// One-hot encoding of labels into a `[B, classes]` tensor.
pub fn one_hot(labels: &[usize], classes: usize) -> Tensor {
    let mut t = Tensor::zeros(&[labels.len(), classes]);
    for (b, &l) in labels.iter().enumerate() {
        t.data_mut()[b * classes + l] = 1.0;
    }
    t
}

/// Mean loss (against one-hot targets) and accuracy in percent.
pub fn loss_and_accuracy(outputs: &Tensor, labels: &[usize], loss: LossKind) -> Result<(f64, f64)> {
    let batch = outputs.batch_size();
    if batch != labels.len() || outputs.shape().len() != 2 {
        return shape_err(format!(
            "outputs {:?} do not match {} labels",
            outputs.shape(),
            labels.len()
        ));
    }
    if batch == 0 {
        return Ok((0.0, 0.0));
    }
    let classes = outputs.row_len();
    let mut target = vec![0.0; classes];
    let (mut total, mut correct) = (0.0, 0usize);
    for (b, &label) in labels.iter().enumerate() {
        target.fill(0.0);
        target[label] = 1.0;
        let row = outputs.row(b);
        total += loss.value(row, &target);
        if argmax(row) == label {
            correct += 1;
        }
    }
    Ok((total / batch as f64, 100.0 * correct as f64 / batch as f64))
}
