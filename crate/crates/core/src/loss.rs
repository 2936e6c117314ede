//! Cross-entropy losses and L2 regularization.
//!
//! Layers accumulate raw per-batch sums, so the `1/B` averaging happens here
//! (unless a configuration explicitly asks for a summed loss).

use std::str::FromStr;

use crate::error::{Error, Result};
use crate::layers::softmax;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LogBase {
    #[default]
    Natural,
    Base2,
}

impl LogBase {
    fn ln_scale(self) -> f64 {
        match self {
            LogBase::Natural => 1.0,
            LogBase::Base2 => std::f64::consts::LN_2,
        }
    }
}

impl FromStr for LogBase {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "e" | "natural" | "ln" => Ok(LogBase::Natural),
            "2" | "base2" => Ok(LogBase::Base2),
            other => Err(format!("unknown log base '{other}' (expected natural or base2)")),
        }
    }
}

/// How per-sample losses are combined over a batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LossReduction {
    #[default]
    Mean,
    Sum,
}

impl FromStr for LossReduction {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "mean" => Ok(LossReduction::Mean),
            "sum" => Ok(LossReduction::Sum),
            other => Err(format!("unknown reduction '{other}' (expected mean or sum)")),
        }
    }
}

/// Which loss drives training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LossKind {
    /// Fused softmax and cross-entropy on raw logits.
    #[default]
    SoftmaxCe,
    /// Cross-entropy with the `ε` guard on probabilities produced by the model.
    CrossEntropy,
}

impl FromStr for LossKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "softmax_ce" => Ok(LossKind::SoftmaxCe),
            "cross_entropy" => Ok(LossKind::CrossEntropy),
            other => Err(format!("unknown loss '{other}' (expected softmax_ce or cross_entropy)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub kind: LossKind,
    pub epsilon: f64,
    pub log_base: LogBase,
    pub lambda: f64,
    pub reduction: LossReduction,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            kind: LossKind::SoftmaxCe,
            epsilon: 1e-4,
            log_base: LogBase::Natural,
            lambda: 0.0,
            reduction: LossReduction::Mean,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "cross-entropy epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "lambda must be nonnegative, got {}",
                self.lambda
            )));
        }
        Ok(())
    }

    fn scale(&self, batch: usize) -> f64 {
        match self.reduction {
            LossReduction::Mean => 1.0 / batch as f64,
            LossReduction::Sum => 1.0,
        }
    }

    /// Data loss and its gradient w.r.t. `output`, which holds logits for
    /// [`LossKind::SoftmaxCe`] and probabilities for [`LossKind::CrossEntropy`].
    pub fn loss_and_grad(&self, y_true: &Tensor, output: &Tensor) -> Result<(f64, Tensor)> {
        self.validate()?;
        let batch = check_pair("loss", y_true, output)?;
        let scale = self.scale(batch);
        match self.kind {
            LossKind::SoftmaxCe => {
                let (sum, mut grad) = softmax_ce_sum(y_true, output)?;
                grad.data_mut().iter_mut().for_each(|g| *g *= scale);
                Ok((sum * scale, grad))
            }
            LossKind::CrossEntropy => {
                let sum = cross_entropy_sum(y_true, output, self.epsilon, self.log_base)?;
                let k = -scale / self.log_base.ln_scale();
                let eps = self.epsilon;
                let grad = y_true.zip_map(output, |y, p| k * y / (p + eps))?;
                Ok((sum * scale, grad))
            }
        }
    }
}

fn check_pair(op: &'static str, y_true: &Tensor, pred: &Tensor) -> Result<usize> {
    if y_true.shape() != pred.shape() || y_true.rank() != 2 {
        return Err(Error::shape(op, y_true.shape(), pred.shape()));
    }
    Ok(y_true.batch())
}

fn cross_entropy_sum(y_true: &Tensor, y_pred: &Tensor, eps: f64, base: LogBase) -> Result<f64> {
    if let Some(p) = y_pred.data().iter().find(|p| !(**p >= 0.0)) {
        return Err(Error::InvalidArgument(format!(
            "cross-entropy needs probabilities, found {p}"
        )));
    }
    let s = base.ln_scale();
    Ok(-y_true
        .data()
        .iter()
        .zip(y_pred.data())
        .map(|(y, p)| y * (p + eps).ln() / s)
        .sum::<f64>())
}

/// Batch-mean cross-entropy `-Σ_j y_j log(ŷ_j + ε)`.
pub fn cross_entropy(y_true: &Tensor, y_pred: &Tensor, config: &LossConfig) -> Result<f64> {
    config.validate()?;
    let batch = check_pair("cross_entropy", y_true, y_pred)?;
    Ok(cross_entropy_sum(y_true, y_pred, config.epsilon, config.log_base)? / batch as f64)
}

/// Summed loss and unscaled gradient `softmax(z) - y`.
fn softmax_ce_sum(y_true: &Tensor, logits: &Tensor) -> Result<(f64, Tensor)> {
    let c = logits.shape()[1];
    let mut total = 0.0;
    for (z, y) in logits.data().chunks_exact(c).zip(y_true.data().chunks_exact(c)) {
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += y.iter().zip(z).map(|(y, z)| y * (lse - z)).sum::<f64>();
    }
    let grad = softmax(logits)?.zip_map(y_true, |p, y| p - y)?;
    Ok((total, grad))
}

/// Batch-mean softmax cross-entropy on logits via log-sum-exp, with the
/// gradient `(softmax(z) - y) / B`.
pub fn softmax_cross_entropy_with_logits(y_true: &Tensor, logits: &Tensor) -> Result<(f64, Tensor)> {
    let batch = check_pair("softmax_cross_entropy_with_logits", y_true, logits)?;
    let (sum, grad) = softmax_ce_sum(y_true, logits)?;
    let inv = 1.0 / batch as f64;
    Ok((sum * inv, grad.map(|g| g * inv)))
}

/// `λ Σ W²` over the given weight tensors.
pub fn l2_penalty<'a>(weights: impl IntoIterator<Item = &'a Tensor>, lambda: f64) -> f64 {
    lambda
        * weights
            .into_iter()
            .map(|w| w.data().iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
}

/// Adds the penalty gradient `2λW` into `grad`.
pub fn add_l2_grad(weight: &Tensor, grad: &mut Tensor, lambda: f64) -> Result<()> {
    if weight.shape() != grad.shape() {
        return Err(Error::shape("add_l2_grad", weight.shape(), grad.shape()));
    }
    for (g, w) in grad.data_mut().iter_mut().zip(weight.data()) {
        *g += 2.0 * lambda * w;
    }
    Ok(())
}
