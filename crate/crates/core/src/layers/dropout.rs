use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::Mode;

/// How the train/eval scale mismatch of dropout is compensated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DropoutConvention {
    /// Survivors are scaled by `1/(1-p)` during training; eval is identity.
    #[default]
    Inverted,
    /// No scaling during training; eval multiplies activations by `1-p`.
    EvalScaled,
}

#[derive(Debug, Clone)]
pub struct Dropout {
    p: f64,
    pub(super) mode: Mode,
    convention: DropoutConvention,
    rng: ChaCha8Rng,
    /// Per-element multiplier applied in the last training forward pass.
    cached_mask: Option<Vec<f64>>,
}

impl Dropout {
    pub fn new(p: f64, convention: DropoutConvention, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::InvalidArgument(format!(
                "dropout probability {p} outside [0, 1]"
            )));
        }
        Ok(Dropout {
            p,
            mode: Mode::Train,
            convention,
            rng: ChaCha8Rng::seed_from_u64(seed),
            cached_mask: None,
        })
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn convention(&self) -> DropoutConvention {
        self.convention
    }

    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        if self.mode == Mode::Eval {
            self.cached_mask = None;
            return self.infer(x);
        }
        if self.p >= 1.0 {
            return Err(Error::InvalidArgument(
                "dropout with p = 1 zeroes every unit in training".into(),
            ));
        }
        let keep = match self.convention {
            DropoutConvention::Inverted => 1.0 / (1.0 - self.p),
            DropoutConvention::EvalScaled => 1.0,
        };
        let p = self.p;
        let mask: Vec<f64> = (0..x.len())
            .map(|_| if self.rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let mut out = x.clone();
        for (v, m) in out.data_mut().iter_mut().zip(&mask) {
            *v *= m;
        }
        self.cached_mask = Some(mask);
        Ok(out)
    }

    /// Evaluation-mode pass.
    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        Ok(match self.convention {
            DropoutConvention::Inverted => x.clone(),
            DropoutConvention::EvalScaled => {
                let s = 1.0 - self.p;
                x.map(|v| v * s)
            }
        })
    }

    pub fn backward(&mut self, upstream: &Tensor) -> Result<Tensor> {
        match (self.mode, &self.cached_mask) {
            (Mode::Train, Some(mask)) => {
                if mask.len() != upstream.len() {
                    return Err(Error::shape("dropout_backward", upstream.shape(), &[mask.len()]));
                }
                let mut dx = upstream.clone();
                for (g, m) in dx.data_mut().iter_mut().zip(mask) {
                    *g *= m;
                }
                Ok(dx)
            }
            (Mode::Train, None) => Err(Error::State("dropout backward called before forward".into())),
            (Mode::Eval, _) => self.infer(upstream),
        }
    }
}
