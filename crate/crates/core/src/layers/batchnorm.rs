use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{Mode, ParamMut};

/// Batch normalization over the last (channel) axis.
///
/// Training mode normalizes with the batch mean and population variance of
/// every channel (over batch and any spatial positions) and folds them into
/// running statistics; evaluation mode uses the running statistics.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub(super) gamma: Tensor,
    pub(super) beta: Tensor,
    pub(super) running_mean: Tensor,
    pub(super) running_var: Tensor,
    gamma_grad: Tensor,
    beta_grad: Tensor,
    epsilon: f64,
    momentum: f64,
    pub(super) mode: Mode,
    cache: Option<BnCache>,
    pub frozen: bool,
}

#[derive(Debug, Clone)]
struct BnCache {
    normalized: Vec<f64>,
    inv_std: Vec<f64>,
    mode: Mode,
}

impl BatchNorm {
    pub const DEFAULT_EPSILON: f64 = 1e-5;
    pub const DEFAULT_MOMENTUM: f64 = 0.9;

    pub fn new(channels: usize) -> Self {
        Self::with_options(channels, Self::DEFAULT_EPSILON, Self::DEFAULT_MOMENTUM)
    }

    pub fn with_options(channels: usize, epsilon: f64, momentum: f64) -> Self {
        BatchNorm {
            gamma: Tensor::full(&[channels], 1.0),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], 1.0),
            gamma_grad: Tensor::zeros(&[channels]),
            beta_grad: Tensor::zeros(&[channels]),
            epsilon,
            momentum,
            mode: Mode::Train,
            cache: None,
            frozen: false,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn gamma(&self) -> &Tensor {
        &self.gamma
    }

    pub fn beta(&self) -> &Tensor {
        &self.beta
    }

    pub fn set_affine(&mut self, gamma: Tensor, beta: Tensor) -> Result<()> {
        if gamma.shape() != self.gamma.shape() || beta.shape() != self.beta.shape() {
            return Err(Error::shape("BatchNorm::set_affine", gamma.shape(), beta.shape()));
        }
        self.gamma = gamma;
        self.beta = beta;
        Ok(())
    }

    pub fn running_mean(&self) -> &Tensor {
        &self.running_mean
    }

    pub fn running_var(&self) -> &Tensor {
        &self.running_var
    }

    pub fn gamma_grad(&self) -> &Tensor {
        &self.gamma_grad
    }

    pub fn beta_grad(&self) -> &Tensor {
        &self.beta_grad
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        if input.last() != Some(&self.channels()) {
            return Err(Error::shape("batchnorm channels", input, self.gamma.shape()));
        }
        Ok(input.to_vec())
    }

    fn check(&self, x: &Tensor) -> Result<usize> {
        let c = self.channels();
        if x.rank() < 2 || x.shape().last() != Some(&c) {
            return Err(Error::shape("batchnorm_forward", x.shape(), self.gamma.shape()));
        }
        Ok(c)
    }

    /// Per-channel population mean and variance of `x`.
    pub fn batch_stats(x: &Tensor, channels: usize) -> (Vec<f64>, Vec<f64>) {
        let n = (x.len() / channels) as f64;
        let mut mean = vec![0.0; channels];
        for row in x.data().chunks_exact(channels) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= n;
        }
        let mut var = vec![0.0; channels];
        for row in x.data().chunks_exact(channels) {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        for s in &mut var {
            *s /= n;
        }
        (mean, var)
    }

    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let c = self.check(x)?;
        let (mean, inv_std) = match self.mode {
            Mode::Train => {
                if x.batch() < 2 {
                    return Err(Error::InvalidArgument(
                        "batchnorm training needs a batch of at least 2".into(),
                    ));
                }
                let (mean, var) = Self::batch_stats(x, c);
                let m = self.momentum;
                for (r, b) in self.running_mean.data_mut().iter_mut().zip(&mean) {
                    *r = m * *r + (1.0 - m) * b;
                }
                for (r, b) in self.running_var.data_mut().iter_mut().zip(&var) {
                    *r = m * *r + (1.0 - m) * b;
                }
                let inv_std = var.iter().map(|v| 1.0 / (v + self.epsilon).sqrt()).collect();
                (mean, inv_std)
            }
            Mode::Eval => self.eval_stats(),
        };
        let normalized = normalize(x.data(), &mean, &inv_std);
        let out = self.affine(&normalized, x.shape())?;
        self.cache = Some(BnCache {
            normalized,
            inv_std,
            mode: self.mode,
        });
        Ok(out)
    }

    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        self.check(x)?;
        let (mean, inv_std) = self.eval_stats();
        self.affine(&normalize(x.data(), &mean, &inv_std), x.shape())
    }

    fn eval_stats(&self) -> (Vec<f64>, Vec<f64>) {
        (
            self.running_mean.data().to_vec(),
            self.running_var
                .data()
                .iter()
                .map(|v| 1.0 / (v + self.epsilon).sqrt())
                .collect(),
        )
    }

    fn affine(&self, normalized: &[f64], shape: &[usize]) -> Result<Tensor> {
        let c = self.channels();
        let mut out = normalized.to_vec();
        for row in out.chunks_exact_mut(c) {
            for ((v, g), b) in row.iter_mut().zip(self.gamma.data()).zip(self.beta.data()) {
                *v = g * *v + b;
            }
        }
        Tensor::new(shape, out)
    }

    pub fn backward(&mut self, upstream: &Tensor) -> Result<Tensor> {
        let cache = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::State("batchnorm backward called before forward".into()))?;
        let c = self.channels();
        if upstream.len() != cache.normalized.len() {
            return Err(Error::shape(
                "batchnorm_backward",
                upstream.shape(),
                &[cache.normalized.len()],
            ));
        }
        let n = (upstream.len() / c) as f64;
        let g = upstream.data();

        let mut sum_g = vec![0.0; c];
        let mut sum_gx = vec![0.0; c];
        for (row, xh) in g.chunks_exact(c).zip(cache.normalized.chunks_exact(c)) {
            for j in 0..c {
                sum_g[j] += row[j];
                sum_gx[j] += row[j] * xh[j];
            }
        }
        if !self.frozen {
            self.beta_grad.data_mut().copy_from_slice(&sum_g);
            self.gamma_grad.data_mut().copy_from_slice(&sum_gx);
        }

        let gamma = self.gamma.data();
        let mut dx = upstream.clone();
        match cache.mode {
            Mode::Train => {
                // Full chain rule through the batch mean and variance.
                for (row, xh) in dx.data_mut().chunks_exact_mut(c).zip(cache.normalized.chunks_exact(c)) {
                    for j in 0..c {
                        row[j] = gamma[j] * cache.inv_std[j] / n
                            * (n * row[j] - sum_g[j] - xh[j] * sum_gx[j]);
                    }
                }
            }
            Mode::Eval => {
                for row in dx.data_mut().chunks_exact_mut(c) {
                    for j in 0..c {
                        row[j] *= gamma[j] * cache.inv_std[j];
                    }
                }
            }
        }
        Ok(dx)
    }

    pub(super) fn params_mut(&mut self) -> Vec<ParamMut<'_>> {
        vec![
            ParamMut {
                role: "gamma",
                value: &mut self.gamma,
                grad: &self.gamma_grad,
                decay: false,
            },
            ParamMut {
                role: "beta",
                value: &mut self.beta,
                grad: &self.beta_grad,
                decay: false,
            },
        ]
    }
}

fn normalize(x: &[f64], mean: &[f64], inv_std: &[f64]) -> Vec<f64> {
    let c = mean.len();
    let mut out = x.to_vec();
    for row in out.chunks_exact_mut(c) {
        for j in 0..c {
            row[j] = (row[j] - mean[j]) * inv_std[j];
        }
    }
    out
}
