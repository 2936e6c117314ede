//! Layer kinds with hand-written forward and backward passes.
//!
//! `forward` caches whatever `backward` needs; `infer` is the cache-free
//! evaluation path used for prediction and is always evaluation-mode.
//! Parameter gradients hold raw sums over the batch: the loss owns the
//! `1/N` averaging.

mod activation;
mod batchnorm;
mod conv;
mod dense;
mod dropout;
mod pool;

pub use activation::{softmax, Activation, ActivationKind, LEAKY_RELU_SLOPE};
pub use batchnorm::BatchNorm;
pub use conv::{conv2d_direct, Conv2D, Padding};
pub use dense::Dense;
pub use dropout::{Dropout, DropoutConvention};
pub use pool::MaxPool2D;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A trainable tensor together with its gradient.
pub struct ParamMut<'a> {
    pub role: &'static str,
    pub value: &'a mut Tensor,
    pub grad: &'a Tensor,
    /// Whether L2 regularization applies (weights and filters only).
    pub decay: bool,
}

/// Reshapes `[batch, ...]` to `[batch, product(...)]`.
#[derive(Debug, Clone, Default)]
pub struct Flatten {
    input_shape: Option<Vec<usize>>,
}

impl Flatten {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        self.input_shape = Some(x.shape().to_vec());
        self.infer(x)
    }

    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        let b = x.batch();
        x.reshape(&[b, x.len() / b])
    }

    pub fn backward(&mut self, upstream: &Tensor) -> Result<Tensor> {
        let shape = self
            .input_shape
            .as_ref()
            .ok_or_else(|| Error::State("flatten backward called before forward".into()))?;
        upstream.reshape(shape)
    }
}

#[derive(Debug, Clone)]
pub enum Layer {
    Dense(Dense),
    Conv2D(Conv2D),
    MaxPool2D(MaxPool2D),
    Activation(Activation),
    Dropout(Dropout),
    BatchNorm(BatchNorm),
    Flatten(Flatten),
}

impl Layer {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Layer::Dense(_) => "dense",
            Layer::Conv2D(_) => "conv",
            Layer::MaxPool2D(_) => "pool",
            Layer::Activation(a) => a.kind().name(),
            Layer::Dropout(_) => "dropout",
            Layer::BatchNorm(_) => "batchnorm",
            Layer::Flatten(_) => "flatten",
        }
    }

    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        match self {
            Layer::Dense(l) => l.forward(x),
            Layer::Conv2D(l) => l.forward(x),
            Layer::MaxPool2D(l) => l.forward(x),
            Layer::Activation(l) => l.forward(x),
            Layer::Dropout(l) => l.forward(x),
            Layer::BatchNorm(l) => l.forward(x),
            Layer::Flatten(l) => l.forward(x),
        }
    }

    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            Layer::Dense(l) => l.infer(x),
            Layer::Conv2D(l) => l.infer(x),
            Layer::MaxPool2D(l) => l.infer(x),
            Layer::Activation(l) => l.infer(x),
            Layer::Dropout(l) => l.infer(x),
            Layer::BatchNorm(l) => l.infer(x),
            Layer::Flatten(l) => l.infer(x),
        }
    }

    /// Backpropagates `upstream`, filling parameter gradients. The gradient
    /// with respect to the input is only computed when `want_input_grad`.
    pub fn backward(&mut self, upstream: &Tensor, want_input_grad: bool) -> Result<Option<Tensor>> {
        match self {
            Layer::Conv2D(l) => l.backward_impl(upstream, want_input_grad),
            Layer::Dense(l) => l.backward_impl(upstream, want_input_grad),
            Layer::MaxPool2D(l) => l.backward(upstream).map(Some),
            Layer::Activation(l) => l.backward(upstream).map(Some),
            Layer::Dropout(l) => l.backward(upstream).map(Some),
            Layer::BatchNorm(l) => l.backward(upstream).map(Some),
            Layer::Flatten(l) => l.backward(upstream).map(Some),
        }
    }

    /// Per-sample output shape for a per-sample input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match self {
            Layer::Dense(l) => l.output_shape(input),
            Layer::Conv2D(l) => l.output_shape(input),
            Layer::MaxPool2D(l) => l.output_shape(input),
            Layer::BatchNorm(l) => l.output_shape(input),
            Layer::Activation(_) | Layer::Dropout(_) => Ok(input.to_vec()),
            Layer::Flatten(_) => Ok(vec![input.iter().product()]),
        }
    }

    pub fn params_mut(&mut self) -> Vec<ParamMut<'_>> {
        match self {
            Layer::Dense(l) => l.params_mut(),
            Layer::Conv2D(l) => l.params_mut(),
            Layer::Activation(l) => l.params_mut(),
            Layer::BatchNorm(l) => l.params_mut(),
            _ => Vec::new(),
        }
    }

    /// Every persistent tensor (trainable or not) under its role name.
    pub fn state(&self) -> Vec<(&'static str, &Tensor)> {
        match self {
            Layer::Dense(l) => vec![("weight", l.weights()), ("bias", l.bias())],
            Layer::Conv2D(l) => vec![("filters", l.filters()), ("bias", l.bias())],
            Layer::Activation(l) => l.prelu_param().map(|a| ("prelu_a", a)).into_iter().collect(),
            Layer::BatchNorm(l) => vec![
                ("gamma", l.gamma()),
                ("beta", l.beta()),
                ("running_mean", l.running_mean()),
                ("running_var", l.running_var()),
            ],
            _ => Vec::new(),
        }
    }

    /// Mutable access to the tensor stored under `role`.
    pub fn state_mut(&mut self, role: &str) -> Option<&mut Tensor> {
        match (self, role) {
            (Layer::Dense(l), "weight") => Some(&mut l.weights),
            (Layer::Dense(l), "bias") => Some(&mut l.bias),
            (Layer::Conv2D(l), "filters") => Some(&mut l.filters),
            (Layer::Conv2D(l), "bias") => Some(&mut l.bias),
            (Layer::Activation(l), "prelu_a") => l.prelu_param_mut(),
            (Layer::BatchNorm(l), "gamma") => Some(&mut l.gamma),
            (Layer::BatchNorm(l), "beta") => Some(&mut l.beta),
            (Layer::BatchNorm(l), "running_mean") => Some(&mut l.running_mean),
            (Layer::BatchNorm(l), "running_var") => Some(&mut l.running_var),
            _ => None,
        }
    }

    /// Number of trainable scalars.
    pub fn param_count(&self) -> usize {
        match self {
            Layer::Dense(l) => l.weights().len() + l.bias().len(),
            Layer::Conv2D(l) => l.filters().len() + l.bias().len(),
            Layer::Activation(l) => l.prelu_param().map_or(0, Tensor::len),
            Layer::BatchNorm(l) => l.gamma().len() + l.beta().len(),
            _ => 0,
        }
    }

    pub fn set_mode(&mut self, mode: Mode) {
        match self {
            Layer::Dropout(l) => l.mode = mode,
            Layer::BatchNorm(l) => l.mode = mode,
            _ => {}
        }
    }

    /// Mode of mode-dependent layers.
    pub fn mode(&self) -> Option<Mode> {
        match self {
            Layer::Dropout(l) => Some(l.mode),
            Layer::BatchNorm(l) => Some(l.mode),
            _ => None,
        }
    }

    /// Frozen layers skip their parameter gradients during backward.
    pub fn set_frozen(&mut self, frozen: bool) {
        match self {
            Layer::Dense(l) => l.frozen = frozen,
            Layer::Conv2D(l) => l.frozen = frozen,
            Layer::BatchNorm(l) => l.frozen = frozen,
            _ => {}
        }
    }

    /// Re-establishes parameter constraints after an optimizer update.
    pub fn post_update(&mut self) {
        if let Layer::Activation(l) = self {
            l.clamp_prelu();
        }
    }
}

#[cfg(test)]
pub(crate) mod testutil {
    //! Central finite differences against a random linear scalarization
    //! `L = sum(r * f(x))`, whose gradient w.r.t. the output is `r`.

    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use crate::tensor::Tensor;

    pub const H: f64 = 1e-6;

    pub fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    pub fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    pub fn dot(a: &Tensor, b: &Tensor) -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
    }

    /// Relative error with a small absolute floor so that two values that
    /// are both essentially zero compare equal.
    pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
        (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-7)
    }

    /// Checks `analytic[i]` against central differences of `loss` at up to
    /// `samples` coordinates of `point`. `skip` rejects coordinates at
    /// non-differentiable points. Returns the worst relative error.
    pub fn check_coords(
        point: &Tensor,
        analytic: &Tensor,
        samples: usize,
        rng: &mut ChaCha8Rng,
        mut skip: impl FnMut(usize) -> bool,
        mut loss: impl FnMut(&Tensor) -> f64,
    ) -> f64 {
        assert_eq!(point.shape(), analytic.shape());
        let n = point.len();
        let coords: Vec<usize> = if n <= samples {
            (0..n).collect()
        } else {
            (0..samples).map(|_| rng.random_range(0..n)).collect()
        };
        let mut worst: f64 = 0.0;
        let mut checked = 0;
        for i in coords {
            if skip(i) {
                continue;
            }
            let mut plus = point.clone();
            plus.data_mut()[i] += H;
            let mut minus = point.clone();
            minus.data_mut()[i] -= H;
            let numeric = (loss(&plus) - loss(&minus)) / (2.0 * H);
            worst = worst.max(rel_err(analytic.data()[i], numeric));
            checked += 1;
        }
        assert!(checked > 0, "every sampled coordinate was rejected");
        worst
    }
}
