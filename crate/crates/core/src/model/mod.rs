//! Model assembly from a [`ModelSpec`], training, evaluation, checkpoints,
//! fine-tuning and feature extraction.

mod checkpoint;
mod config;
mod train;

pub use checkpoint::{Checkpoint, Dtype};
pub use config::{parse_convention, InitKind, LayerSpec, ModelSpec, TrainConfig};
pub use train::{
    accuracy, evaluate, fit_preprocessor, prepare_data, train, train_with_progress, EvalPoint, EvalResult, TrainReport, EVAL_CHUNK,
};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::layers::{
    Activation, ActivationKind, BatchNorm, Conv2D, Dense, Dropout, Flatten, Layer, MaxPool2D, Mode,
};
use crate::tensor::Tensor;

/// Weight initialization settings shared by every layer of a build.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InitConfig {
    pub kind: InitKind,
    pub stddev: f64,
    pub bias: f64,
    pub out_bias: f64,
}

impl InitConfig {
    pub fn from_train(t: &TrainConfig) -> Self {
        InitConfig {
            kind: t.init,
            stddev: t.stddev,
            bias: t.bias,
            out_bias: t.out_bias,
        }
    }
}

/// Independent generator for one layer, so that re-initializing a layer
/// does not depend on any other layer.
fn layer_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

fn draw_weights(shape: &[usize], fan_in: usize, init: &InitConfig, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let sigma = match init.kind {
        InitKind::Zeros => return Ok(Tensor::zeros(shape)),
        InitKind::He => (2.0 / fan_in as f64).sqrt(),
        InitKind::Normal | InitKind::TruncatedNormal => init.stddev,
    };
    if sigma == 0.0 {
        return Ok(Tensor::zeros(shape));
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::Build(format!("bad stddev {sigma}: {e}")))?;
    let truncate = init.kind == InitKind::TruncatedNormal;
    let data = (0..n)
        .map(|_| loop {
            let v: f64 = normal.sample(rng);
            if !truncate || v.abs() <= 2.0 * sigma {
                break v;
            }
        })
        .collect();
    Tensor::new(shape, data)
}

#[derive(Debug, Clone)]
pub struct Model {
    layers: Vec<Layer>,
    specs: Vec<LayerSpec>,
    input: Vec<usize>,
    /// Per-sample output shape of every layer.
    shapes: Vec<Vec<usize>>,
    frozen: Vec<bool>,
}

impl Model {
    /// Builds with the spec's training seed and initializer.
    pub fn build(spec: &ModelSpec) -> Result<Self> {
        Self::build_with(spec, spec.train.seed, &InitConfig::from_train(&spec.train))
    }

    pub fn build_with(spec: &ModelSpec, seed: u64, init: &InitConfig) -> Result<Self> {
        let last_dense = spec.layers.iter().rposition(|l| matches!(l, LayerSpec::Dense { .. }));
        let mut layers = Vec::with_capacity(spec.layers.len());
        let mut shapes = Vec::with_capacity(spec.layers.len());
        let mut cur = spec.input.to_vec();
        for (i, ls) in spec.layers.iter().enumerate() {
            let describe = |j: usize| match j {
                0 => "the input".to_string(),
                _ => format!(
                    "layer {} ({}, line {})",
                    j - 1,
                    spec.layers[j - 1].kind_name(),
                    spec.lines.get(j - 1).copied().unwrap_or(0)
                ),
            };
            let mismatch = |why: String| {
                Error::Build(format!(
                    "layer {i} ({}, line {}) cannot follow {} with output {:?}: {why}",
                    ls.kind_name(),
                    spec.lines.get(i).copied().unwrap_or(0),
                    describe(i),
                    cur
                ))
            };
            let mut rng = layer_rng(seed, i);
            let layer = match *ls {
                LayerSpec::Conv {
                    filters,
                    kernel,
                    stride,
                    padding,
                } => {
                    let [_, _, d] = cur[..] else {
                        return Err(mismatch("conv needs an [H, W, C] input".into()));
                    };
                    let f = draw_weights(&[filters, kernel, kernel, d], kernel * kernel * d, init, &mut rng)?;
                    Layer::Conv2D(Conv2D::new(f, Tensor::full(&[filters], init.bias), stride, padding)?)
                }
                LayerSpec::Dense { units } => {
                    let [fan_in] = cur[..] else {
                        return Err(mismatch("dense needs a flat input (add a flatten layer)".into()));
                    };
                    let w = draw_weights(&[fan_in, units], fan_in, init, &mut rng)?;
                    let b = if Some(i) == last_dense { init.out_bias } else { init.bias };
                    Layer::Dense(Dense::new(w, Tensor::full(&[units], b))?)
                }
                LayerSpec::Pool { window, stride } => Layer::MaxPool2D(MaxPool2D::new(window, stride)?),
                LayerSpec::Flatten => Layer::Flatten(Flatten::new()),
                LayerSpec::Dropout { p } => Layer::Dropout(Dropout::new(
                    p,
                    spec.train.dropout_convention,
                    seed ^ (0x9E37_79B9_7F4A_7C15u64.wrapping_mul(i as u64 + 1)),
                )?),
                LayerSpec::BatchNorm { momentum, epsilon } => {
                    let c = *cur.last().expect("non-empty shape");
                    Layer::BatchNorm(BatchNorm::with_options(c, epsilon, momentum))
                }
                LayerSpec::Activation { kind, prelu_a } => Layer::Activation(Activation::with_prelu(kind, prelu_a)),
            };
            cur = layer.output_shape(&cur).map_err(|e| mismatch(e.to_string()))?;
            layers.push(layer);
            shapes.push(cur.clone());
        }
        Ok(Model {
            frozen: vec![false; layers.len()],
            layers,
            specs: spec.layers.clone(),
            input: spec.input.to_vec(),
            shapes,
        })
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layer_specs(&self) -> &[LayerSpec] {
        &self.specs
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input
    }

    /// Per-sample output shape of layer `i`.
    pub fn layer_output_shape(&self, i: usize) -> &[usize] {
        &self.shapes[i]
    }

    pub fn output_shape(&self) -> &[usize] {
        self.shapes.last().map_or(&self.input, Vec::as_slice)
    }

    /// Whether the last layer is a softmax activation.
    pub fn ends_with_softmax(&self) -> bool {
        matches!(self.layers.last(), Some(Layer::Activation(a)) if a.kind() == ActivationKind::Softmax)
    }

    /// Number of layers producing logits (everything but a trailing softmax).
    pub fn logits_end(&self) -> usize {
        self.len() - usize::from(self.ends_with_softmax())
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.layers.iter_mut().for_each(|l| l.set_mode(mode));
    }

    /// Fails if any mode-dependent layer is not in `mode`.
    pub fn check_mode(&self, mode: Mode) -> Result<()> {
        match self.layers.iter().position(|l| l.mode().is_some_and(|m| m != mode)) {
            Some(i) => Err(Error::State(format!(
                "layer {i} ({}) is not in {mode:?} mode",
                self.layers[i].kind_name()
            ))),
            None => Ok(()),
        }
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.rank() < 2 || x.shape()[1..] != self.input[..] {
            return Err(Error::shape("model input", x.shape(), &self.input));
        }
        Ok(())
    }

    /// Training-path forward through layers `0..end`, caching for backward.
    pub fn forward(&mut self, x: &Tensor, end: usize) -> Result<Tensor> {
        self.check_input(x)?;
        let mut h = x.clone();
        for layer in &mut self.layers[..end] {
            h = layer.forward(&h)?;
        }
        Ok(h)
    }

    /// Backpropagates `grad` (w.r.t. the output of layer `end - 1`),
    /// filling parameter gradients of unfrozen layers. Returns the input
    /// gradient when `want_input_grad`.
    pub fn backward(&mut self, grad: &Tensor, end: usize, want_input_grad: bool) -> Result<Option<Tensor>> {
        // Nothing below the lowest trainable layer needs a gradient.
        let lowest = if want_input_grad {
            0
        } else {
            match (0..end).find(|&i| !self.frozen[i] && self.layers[i].param_count() > 0) {
                Some(i) => i,
                None => return Ok(None),
            }
        };
        let mut g = grad.clone();
        for i in (lowest..end).rev() {
            let need = want_input_grad || i > lowest;
            match self.layers[i].backward(&g, need)? {
                Some(next) => g = next,
                None => return Ok(None),
            }
        }
        Ok(Some(g))
    }

    /// Evaluation-mode pass through layers `0..end` without caching.
    pub fn infer_to(&self, x: &Tensor, end: usize) -> Result<Tensor> {
        self.check_input(x)?;
        let mut h = x.clone();
        for layer in &self.layers[..end] {
            h = layer.infer(&h)?;
        }
        Ok(h)
    }

    /// Evaluation-mode output of the full model.
    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        self.infer_to(x, self.len())
    }

    /// Output of layer `tap` flattened per sample.
    pub fn extract_features(&self, x: &Tensor, tap: usize) -> Result<Tensor> {
        if tap >= self.len() {
            return Err(Error::InvalidArgument(format!(
                "tap layer {tap} out of range (model has {} layers)",
                self.len()
            )));
        }
        let out = self.infer_to(x, tap + 1)?;
        let b = out.batch();
        out.into_reshaped(&[b, self.shapes[tap].iter().product()])
    }

    /// The layer right before the final dense layer (the penultimate
    /// representation), or the last layer if there is no dense layer.
    pub fn default_tap(&self) -> usize {
        match self.layers.iter().rposition(|l| matches!(l, Layer::Dense(_))) {
            Some(0) | None => self.len().saturating_sub(1),
            Some(i) => i - 1,
        }
    }

    /// Trainable scalars per layer.
    pub fn param_counts(&self) -> Vec<usize> {
        self.layers.iter().map(Layer::param_count).collect()
    }

    pub fn param_count(&self) -> usize {
        self.param_counts().iter().sum()
    }

    pub fn is_frozen(&self, i: usize) -> bool {
        self.frozen[i]
    }

    /// Freezes every layer with index below `n`, except those in `keep_trainable`.
    pub fn freeze_below(&mut self, n: usize, keep_trainable: &[usize]) -> Result<()> {
        if n > self.len() {
            return Err(Error::InvalidArgument(format!(
                "freeze index {n} beyond the {} layers of the model",
                self.len()
            )));
        }
        for i in 0..self.len() {
            let f = i < n && !keep_trainable.contains(&i);
            self.frozen[i] = f;
            self.layers[i].set_frozen(f);
        }
        Ok(())
    }

    /// Every persistent tensor named `"<layer>.<role>"`, in layer order.
    pub fn named_state(&self) -> Vec<(String, &Tensor)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| l.state().into_iter().map(move |(r, t)| (format!("{i}.{r}"), t)))
            .collect()
    }

    /// Direct access to the layers, e.g. to perturb parameters in place.
    /// Replacing a tensor with one of a different shape breaks the model.
    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }
}
