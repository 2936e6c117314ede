use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::ParamMut;

/// Fixed negative slope of the leaky ReLU.
pub const LEAKY_RELU_SLOPE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActivationKind {
    Relu,
    LeakyRelu,
    /// `max(a*x, x)` with one learnable `a` in `[0, 1]` per layer.
    Prelu,
    Sigmoid,
    Tanh,
    /// Normalizes over the last axis.
    Softmax,
}

impl ActivationKind {
    pub fn name(self) -> &'static str {
        match self {
            ActivationKind::Relu => "relu",
            ActivationKind::LeakyRelu => "leaky_relu",
            ActivationKind::Prelu => "prelu",
            ActivationKind::Sigmoid => "sigmoid",
            ActivationKind::Tanh => "tanh",
            ActivationKind::Softmax => "softmax",
        }
    }
}

impl FromStr for ActivationKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Ok(match s {
            "relu" => ActivationKind::Relu,
            "leaky_relu" => ActivationKind::LeakyRelu,
            "prelu" => ActivationKind::Prelu,
            "sigmoid" | "logistic" => ActivationKind::Sigmoid,
            "tanh" => ActivationKind::Tanh,
            "softmax" => ActivationKind::Softmax,
            other => return Err(format!("unknown activation '{other}'")),
        })
    }
}

#[derive(Debug, Clone)]
pub struct Activation {
    kind: ActivationKind,
    prelu_a: Option<Tensor>,
    prelu_grad: Option<Tensor>,
    /// Pre-activation input for the piecewise-linear kinds, output otherwise.
    cache: Option<Tensor>,
}

impl Activation {
    pub fn new(kind: ActivationKind) -> Self {
        Self::with_prelu(kind, 0.1)
    }

    /// `prelu_a` is only used by [`ActivationKind::Prelu`]; it is clamped to `[0, 1]`.
    pub fn with_prelu(kind: ActivationKind, prelu_a: f64) -> Self {
        let (a, g) = if kind == ActivationKind::Prelu {
            (
                Some(Tensor::vector(vec![prelu_a.clamp(0.0, 1.0)])),
                Some(Tensor::zeros(&[1])),
            )
        } else {
            (None, None)
        };
        Activation {
            kind,
            prelu_a: a,
            prelu_grad: g,
            cache: None,
        }
    }

    pub fn kind(&self) -> ActivationKind {
        self.kind
    }

    pub fn prelu_param(&self) -> Option<&Tensor> {
        self.prelu_a.as_ref()
    }

    pub(super) fn prelu_param_mut(&mut self) -> Option<&mut Tensor> {
        self.prelu_a.as_mut()
    }

    pub fn prelu_grad(&self) -> Option<&Tensor> {
        self.prelu_grad.as_ref()
    }

    fn slope(&self) -> f64 {
        match self.kind {
            ActivationKind::Relu => 0.0,
            ActivationKind::LeakyRelu => LEAKY_RELU_SLOPE,
            ActivationKind::Prelu => self.prelu_a.as_ref().map_or(0.0, |a| a.data()[0]),
            _ => unreachable!("slope only applies to rectifiers"),
        }
    }

    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let out = self.infer(x)?;
        self.cache = Some(match self.kind {
            ActivationKind::Relu | ActivationKind::LeakyRelu | ActivationKind::Prelu => x.clone(),
            _ => out.clone(),
        });
        Ok(out)
    }

    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        Ok(match self.kind {
            ActivationKind::Relu | ActivationKind::LeakyRelu | ActivationKind::Prelu => {
                let a = self.slope();
                x.map(|v| if v > 0.0 { v } else { a * v })
            }
            ActivationKind::Sigmoid => x.map(|v| 1.0 / (1.0 + (-v).exp())),
            ActivationKind::Tanh => x.map(f64::tanh),
            ActivationKind::Softmax => softmax(x)?,
        })
    }

    pub fn backward(&mut self, upstream: &Tensor) -> Result<Tensor> {
        let cache = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::State("activation backward called before forward".into()))?;
        if cache.shape() != upstream.shape() {
            return Err(Error::shape("activation_backward", upstream.shape(), cache.shape()));
        }
        match self.kind {
            ActivationKind::Relu | ActivationKind::LeakyRelu | ActivationKind::Prelu => {
                let a = self.slope();
                // The derivative at exactly zero takes the negative-side slope.
                let dx = cache.zip_map(upstream, |x, g| if x > 0.0 { g } else { a * g })?;
                if let Some(grad) = self.prelu_grad.as_mut() {
                    let ga: f64 = cache
                        .data()
                        .iter()
                        .zip(upstream.data())
                        .filter(|(x, _)| **x < 0.0)
                        .map(|(x, g)| x * g)
                        .sum();
                    grad.data_mut()[0] = ga;
                }
                Ok(dx)
            }
            ActivationKind::Sigmoid => cache.zip_map(upstream, |y, g| g * y * (1.0 - y)),
            ActivationKind::Tanh => cache.zip_map(upstream, |y, g| g * (1.0 - y * y)),
            ActivationKind::Softmax => {
                let n = *cache.shape().last().expect("non-empty shape");
                let mut dx = upstream.clone();
                for (row, y) in dx.data_mut().chunks_exact_mut(n).zip(cache.data().chunks_exact(n)) {
                    let dot: f64 = row.iter().zip(y).map(|(g, y)| g * y).sum();
                    for (g, y) in row.iter_mut().zip(y) {
                        *g = y * (*g - dot);
                    }
                }
                Ok(dx)
            }
        }
    }

    pub(super) fn params_mut(&mut self) -> Vec<ParamMut<'_>> {
        match (self.prelu_a.as_mut(), self.prelu_grad.as_ref()) {
            (Some(value), Some(grad)) => vec![ParamMut {
                role: "prelu_a",
                value,
                grad,
                decay: false,
            }],
            _ => Vec::new(),
        }
    }

    pub(super) fn clamp_prelu(&mut self) {
        if let Some(a) = self.prelu_a.as_mut() {
            let v = &mut a.data_mut()[0];
            *v = v.clamp(0.0, 1.0);
        }
    }
}

/// Row-wise softmax over the last axis, computed with the row maximum
/// subtracted for stability.
pub fn softmax(x: &Tensor) -> Result<Tensor> {
    let n = *x.shape().last().expect("non-empty shape");
    if n == 0 {
        return Err(Error::InvalidArgument("softmax over an empty axis".into()));
    }
    let mut out = x.clone();
    for row in out.data_mut().chunks_exact_mut(n) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::testutil::*;
    use proptest::prelude::*;

    #[test]
    fn relu_values() {
        let a = Activation::new(ActivationKind::Relu);
        assert_eq!(a.infer(&Tensor::vector(vec![-1.0, 0.0, 2.0])).unwrap().data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn relu_derivative_at_zero_is_zero() {
        let mut a = Activation::new(ActivationKind::Relu);
        a.forward(&Tensor::vector(vec![0.0, 1.0])).unwrap();
        assert_eq!(a.backward(&Tensor::vector(vec![1.0, 1.0])).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn leaky_and_prelu_slopes() {
        let x = Tensor::vector(vec![-2.0, 3.0]);
        let leaky = Activation::new(ActivationKind::LeakyRelu).infer(&x).unwrap();
        assert_eq!(leaky.data(), &[-0.02, 3.0]);
        let prelu = Activation::new(ActivationKind::Prelu).infer(&x).unwrap();
        assert_eq!(prelu.data(), &[-0.2, 3.0]);
        let clamped = Activation::with_prelu(ActivationKind::Prelu, 4.0);
        assert_eq!(clamped.prelu_param().unwrap().data(), &[1.0]);
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let out = softmax(&Tensor::zeros(&[1, 10])).unwrap();
        assert!(out.data().iter().all(|&v| (v - 0.1).abs() < 1e-15));
    }

    #[test]
    fn softmax_is_shift_invariant() {
        let mut r = rng(40);
        let x = random(&[3, 10], &mut r);
        let shifted = x.map(|v| v + 123.4);
        let (a, b) = (softmax(&x).unwrap(), softmax(&shifted).unwrap());
        for (p, q) in a.data().iter().zip(b.data()) {
            assert!((p - q).abs() < 1e-9);
        }
    }

    #[test]
    fn backward_before_forward_is_a_state_error() {
        let mut a = Activation::new(ActivationKind::Tanh);
        assert!(a.backward(&Tensor::zeros(&[1])).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut r = rng(41);
        for kind in [
            ActivationKind::Relu,
            ActivationKind::LeakyRelu,
            ActivationKind::Prelu,
            ActivationKind::Sigmoid,
            ActivationKind::Tanh,
            ActivationKind::Softmax,
        ] {
            let x = random(&[4, 30], &mut r).map(|v| 3.0 * v);
            let proj = random(&[4, 30], &mut r);
            let mut layer = Activation::with_prelu(kind, 0.25);
            layer.forward(&x).unwrap();
            let dx = layer.backward(&proj).unwrap();
            let frozen = layer.clone();
            let kink = |i: usize| {
                matches!(kind, ActivationKind::Relu | ActivationKind::LeakyRelu | ActivationKind::Prelu)
                    && x.data()[i].abs() < 10.0 * H
            };
            let e = check_coords(&x, &dx, 120, &mut r, kink, |x| dot(&frozen.infer(x).unwrap(), &proj));
            assert!(e < 1e-5, "{kind:?} input grad rel err {e}");

            if kind == ActivationKind::Prelu {
                let a0 = layer.prelu_param().unwrap().clone();
                let e = check_coords(&a0, layer.prelu_grad().unwrap(), 1, &mut r, |_| false, |a| {
                    let l = Activation::with_prelu(kind, a.data()[0]);
                    dot(&l.infer(&x).unwrap(), &proj)
                });
                assert!(e < 1e-5, "prelu a grad rel err {e}");
            }
        }
    }

    proptest! {
        #[test]
        fn softmax_rows_are_distributions(v in prop::collection::vec(-10.0f64..10.0, 20)) {
            let out = softmax(&Tensor::new(&[2, 10], v).unwrap()).unwrap();
            for row in out.data().chunks(10) {
                let s: f64 = row.iter().sum();
                prop_assert!((s - 1.0).abs() < 1e-9);
                prop_assert!(row.iter().all(|&p| p > 0.0 && p < 1.0));
            }
        }
    }
}
