//! Line-oriented architecture and training configuration.
//!
//! ```text
//! input 28 28 1
//! conv filters=8 kernel=5 stride=1 pad=same act=relu
//! pool window=2 stride=2
//! flatten
//! dense units=10 act=softmax
//! [train]
//! optimizer=adam eta=0.001 batch=64 iters=10000 seed=42
//! ```
//!
//! `#` starts a comment. An `act=` key on `conv` or `dense` expands into a
//! separate activation layer, so layer indices count it.

use std::collections::HashMap;
use std::path::Path;
use std::str::FromStr;

use crate::data::{AugmentOp, PreprocessKind, SamplingMode};
use crate::error::{Error, Result};
use crate::layers::{ActivationKind, DropoutConvention, Padding};
use crate::loss::{LogBase, LossConfig, LossKind, LossReduction};
use crate::optim::{OptimizerConfig, OptimizerKind};

#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    Conv {
        filters: usize,
        kernel: usize,
        stride: usize,
        padding: Padding,
    },
    Pool {
        window: usize,
        stride: usize,
    },
    Flatten,
    Dense {
        units: usize,
    },
    Dropout {
        p: f64,
    },
    BatchNorm {
        momentum: f64,
        epsilon: f64,
    },
    Activation {
        kind: ActivationKind,
        prelu_a: f64,
    },
}

impl LayerSpec {
    pub fn kind_name(&self) -> &'static str {
        match self {
            LayerSpec::Conv { .. } => "conv",
            LayerSpec::Pool { .. } => "pool",
            LayerSpec::Flatten => "flatten",
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Dropout { .. } => "dropout",
            LayerSpec::BatchNorm { .. } => "batchnorm",
            LayerSpec::Activation { kind, .. } => kind.name(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitKind {
    /// Normal draws redrawn until they fall within two standard deviations.
    TruncatedNormal,
    Normal,
    /// Normal with `σ = sqrt(2 / fan_in)`.
    He,
    Zeros,
}

impl FromStr for InitKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "truncated_normal" => Ok(InitKind::TruncatedNormal),
            "normal" => Ok(InitKind::Normal),
            "he" => Ok(InitKind::He),
            "zeros" => Ok(InitKind::Zeros),
            other => Err(format!("unknown init '{other}'")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub optimizer: OptimizerConfig,
    /// Exponential decay constant `d`; `None` keeps `eta` fixed.
    pub decay: Option<f64>,
    pub loss: LossConfig,
    /// Multiplies the loss and its gradient.
    pub loss_scale: f64,
    pub batch: usize,
    pub iters: usize,
    pub seed: u64,
    pub init: InitKind,
    pub stddev: f64,
    pub bias: f64,
    /// Bias of the final dense layer.
    pub out_bias: f64,
    pub sampling: SamplingMode,
    pub preprocess: Option<PreprocessKind>,
    pub augment: Vec<AugmentOp>,
    pub eval_every: usize,
    pub dropout_convention: DropoutConvention,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: OptimizerConfig::defaults(OptimizerKind::Sgd),
            decay: None,
            loss: LossConfig::default(),
            loss_scale: 1.0,
            batch: 64,
            iters: 1000,
            seed: 42,
            init: InitKind::TruncatedNormal,
            stddev: 0.1,
            bias: 0.1,
            out_bias: 0.0,
            sampling: SamplingMode::Uniform,
            preprocess: None,
            augment: Vec::new(),
            eval_every: 100,
            dropout_convention: DropoutConvention::Inverted,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    /// Per-sample input shape `[H, W, C]`.
    pub input: [usize; 3],
    pub layers: Vec<LayerSpec>,
    /// Config line of each layer, for error messages.
    pub lines: Vec<usize>,
    pub train: TrainConfig,
}

impl ModelSpec {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        text.parse()
    }
}

fn config_err(line: usize, msg: impl Into<String>) -> Error {
    Error::Config {
        line,
        msg: msg.into(),
    }
}

/// `key=value` pairs of one line, rejecting duplicates and malformed tokens.
struct Pairs {
    line: usize,
    map: HashMap<String, String>,
}

impl Pairs {
    fn parse<'a>(line: usize, tokens: impl Iterator<Item = &'a str>) -> Result<Self> {
        let mut map = HashMap::new();
        for tok in tokens {
            let (k, v) = tok
                .split_once('=')
                .ok_or_else(|| config_err(line, format!("expected key=value, found '{tok}'")))?;
            if map.insert(k.to_string(), v.to_string()).is_some() {
                return Err(config_err(line, format!("duplicate key '{k}'")));
            }
        }
        Ok(Pairs { line, map })
    }

    fn take<T: FromStr>(&mut self, key: &str) -> Result<Option<T>> {
        match self.map.remove(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| config_err(self.line, format!("bad value '{v}' for {key}"))),
        }
    }

    fn take_parsed<T: FromStr<Err = String>>(&mut self, key: &str) -> Result<Option<T>> {
        match self.map.remove(key) {
            None => Ok(None),
            Some(v) => v.parse().map(Some).map_err(|e| config_err(self.line, e)),
        }
    }

    fn require<T: FromStr>(&mut self, key: &str, what: &str) -> Result<T> {
        self.take(key)?
            .ok_or_else(|| config_err(self.line, format!("{what} needs {key}=")))
    }

    fn positive(&mut self, key: &str, what: &str, default: Option<usize>) -> Result<usize> {
        let v = match default {
            Some(d) => self.take(key)?.unwrap_or(d),
            None => self.require(key, what)?,
        };
        if v == 0 {
            return Err(config_err(self.line, format!("{key} must be positive")));
        }
        Ok(v)
    }

    fn finish(self) -> Result<()> {
        let mut left: Vec<_> = self.map.into_keys().collect();
        left.sort();
        match left.first() {
            Some(k) => Err(config_err(self.line, format!("unknown key '{k}'"))),
            None => Ok(()),
        }
    }
}

fn parse_activation(line: usize, pairs: &mut Pairs, key: &str) -> Result<Option<LayerSpec>> {
    let kind: Option<ActivationKind> = pairs.take_parsed(key)?;
    let a: Option<f64> = pairs.take("a")?;
    match (kind, a) {
        (Some(kind), a) => {
            if a.is_some() && kind != ActivationKind::Prelu {
                return Err(config_err(line, "a= only applies to prelu"));
            }
            let a = a.unwrap_or(0.1);
            if !(0.0..=1.0).contains(&a) {
                return Err(config_err(line, format!("prelu a={a} outside [0, 1]")));
            }
            Ok(Some(LayerSpec::Activation { kind, prelu_a: a }))
        }
        (None, Some(_)) => Err(config_err(line, "a= given without a prelu activation")),
        (None, None) => Ok(None),
    }
}

fn parse_train_line(line: usize, pairs: &mut Pairs, t: &mut TrainConfig, raw: &mut RawTrain) -> Result<()> {
    if let Some(k) = pairs.take_parsed::<OptimizerKind>("optimizer")? {
        raw.optimizer = Some(k);
    }
    macro_rules! opt {
        ($field:expr, $key:literal) => {
            if let Some(v) = pairs.take($key)? {
                $field = Some(v);
            }
        };
    }
    opt!(raw.eta, "eta");
    opt!(raw.alpha, "alpha");
    opt!(raw.gamma, "gamma");
    opt!(raw.opt_epsilon, "opt_epsilon");
    if let Some(d) = pairs.take::<f64>("decay")? {
        if d < 0.0 || !d.is_finite() {
            return Err(config_err(line, "decay must be >= 0 (0 disables it)"));
        }
        t.decay = (d > 0.0).then_some(d);
    }
    if let Some(k) = pairs.take_parsed::<LossKind>("loss")? {
        t.loss.kind = k;
    }
    if let Some(b) = pairs.take_parsed::<LogBase>("log_base")? {
        t.loss.log_base = b;
    }
    if let Some(e) = pairs.take("ce_epsilon")? {
        t.loss.epsilon = e;
    }
    if let Some(r) = pairs.take_parsed::<LossReduction>("reduction")? {
        t.loss.reduction = r;
    }
    if let Some(l) = pairs.take("lambda")? {
        t.loss.lambda = l;
    }
    if let Some(s) = pairs.take::<f64>("loss_scale")? {
        if !(s > 0.0 && s.is_finite()) {
            return Err(config_err(line, "loss_scale must be positive"));
        }
        t.loss_scale = s;
    }
    if pairs.map.contains_key("batch") {
        t.batch = pairs.positive("batch", "", None)?;
    }
    if let Some(i) = pairs.take("iters")? {
        t.iters = i;
    }
    if let Some(s) = pairs.take("seed")? {
        t.seed = s;
    }
    if let Some(i) = pairs.take_parsed::<InitKind>("init")? {
        t.init = i;
    }
    if let Some(s) = pairs.take::<f64>("stddev")? {
        if !(s >= 0.0 && s.is_finite()) {
            return Err(config_err(line, "stddev must be >= 0"));
        }
        t.stddev = s;
    }
    if let Some(b) = pairs.take("bias")? {
        t.bias = b;
    }
    if let Some(b) = pairs.take("out_bias")? {
        t.out_bias = b;
    }
    if let Some(s) = pairs.take_parsed::<SamplingMode>("sampling")? {
        t.sampling = s;
    }
    if let Some(p) = pairs.map.remove("preprocess") {
        t.preprocess = match p.as_str() {
            "none" => None,
            other => Some(other.parse().map_err(|e: String| config_err(line, e))?),
        };
    }
    if let Some(a) = pairs.map.remove("augment") {
        t.augment = a
            .split(',')
            .filter(|s| !s.is_empty() && *s != "none")
            .map(|s| s.parse::<AugmentOp>().map_err(|e| config_err(line, e)))
            .collect::<Result<_>>()?;
        if let Some(op) = t.augment.iter().find(|op| op.changes_shape()) {
            return Err(config_err(line, format!("{op:?} changes the image size and cannot be used in training")));
        }
    }
    if pairs.map.contains_key("eval_every") {
        t.eval_every = pairs.positive("eval_every", "", None)?;
    }
    if let Some(c) = pairs.map.remove("dropout_convention") {
        t.dropout_convention = parse_convention(&c).map_err(|e| config_err(line, e))?;
    }
    Ok(())
}

pub fn parse_convention(s: &str) -> Result<DropoutConvention, String> {
    match s {
        "inverted" => Ok(DropoutConvention::Inverted),
        "paper" => Ok(DropoutConvention::EvalScaled),
        other => Err(format!("unknown dropout convention '{other}' (expected inverted or paper)")),
    }
}

/// Optimizer keys collected across `[train]` lines; resolved once at the end
/// so that hyperparameters fall back to the chosen optimizer's defaults.
#[derive(Default)]
struct RawTrain {
    optimizer: Option<OptimizerKind>,
    eta: Option<f64>,
    alpha: Option<f64>,
    gamma: Option<f64>,
    opt_epsilon: Option<f64>,
    line: usize,
}

impl FromStr for ModelSpec {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let mut input = None;
        let mut layers = Vec::new();
        let mut lines = Vec::new();
        let mut in_train = false;
        let mut train = TrainConfig::default();
        let mut raw = RawTrain::default();

        for (i, full) in text.lines().enumerate() {
            let line = i + 1;
            let content = full.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            if content.starts_with('[') {
                if content != "[train]" {
                    return Err(config_err(line, format!("unknown section {content}")));
                }
                if in_train {
                    return Err(config_err(line, "duplicate [train] section"));
                }
                in_train = true;
                continue;
            }
            let mut tokens = content.split_whitespace();
            if in_train {
                raw.line = line;
                let mut pairs = Pairs::parse(line, tokens)?;
                parse_train_line(line, &mut pairs, &mut train, &mut raw)?;
                pairs.finish()?;
                continue;
            }
            let word = tokens.next().expect("non-empty line");
            if word == "input" {
                if input.is_some() {
                    return Err(config_err(line, "duplicate input declaration"));
                }
                if !layers.is_empty() {
                    return Err(config_err(line, "input must come before any layer"));
                }
                let dims: Vec<usize> = tokens
                    .map(|t| t.parse().map_err(|_| config_err(line, format!("bad dimension '{t}'"))))
                    .collect::<Result<_>>()?;
                match dims[..] {
                    [h, w, c] if h > 0 && w > 0 && c > 0 => input = Some([h, w, c]),
                    _ => return Err(config_err(line, "input needs three positive dimensions: H W C")),
                }
                continue;
            }
            if input.is_none() {
                return Err(config_err(line, "the first declaration must be 'input H W C'"));
            }
            let mut pairs = Pairs::parse(line, tokens)?;
            let mut push = |spec: LayerSpec| {
                layers.push(spec);
                lines.push(line);
            };
            match word {
                "conv" => {
                    let filters = pairs.positive("filters", "conv", None)?;
                    let kernel = pairs.positive("kernel", "conv", None)?;
                    let stride = pairs.positive("stride", "conv", Some(1))?;
                    let padding = match pairs.map.remove("pad").as_deref() {
                        None | Some("same") => Padding::Same,
                        Some("valid") => Padding::Valid,
                        Some(other) => return Err(config_err(line, format!("unknown padding '{other}'"))),
                    };
                    push(LayerSpec::Conv {
                        filters,
                        kernel,
                        stride,
                        padding,
                    });
                    if let Some(act) = parse_activation(line, &mut pairs, "act")? {
                        push(act);
                    }
                }
                "dense" => {
                    let units = pairs.positive("units", "dense", None)?;
                    push(LayerSpec::Dense { units });
                    if let Some(act) = parse_activation(line, &mut pairs, "act")? {
                        push(act);
                    }
                }
                "pool" => {
                    let window = pairs.positive("window", "pool", None)?;
                    let stride = pairs.positive("stride", "pool", Some(window))?;
                    push(LayerSpec::Pool { window, stride });
                }
                "flatten" => push(LayerSpec::Flatten),
                "dropout" => {
                    let p: f64 = pairs.require("p", "dropout")?;
                    if !(0.0..1.0).contains(&p) {
                        return Err(config_err(line, format!("dropout p={p} outside [0, 1)")));
                    }
                    push(LayerSpec::Dropout { p });
                }
                "batchnorm" => {
                    let momentum = pairs.take("momentum")?.unwrap_or(crate::layers::BatchNorm::DEFAULT_MOMENTUM);
                    let epsilon = pairs.take("eps")?.unwrap_or(crate::layers::BatchNorm::DEFAULT_EPSILON);
                    if !(0.0..1.0).contains(&momentum) || !(epsilon > 0.0) {
                        return Err(config_err(line, "batchnorm needs 0 <= momentum < 1 and eps > 0"));
                    }
                    push(LayerSpec::BatchNorm { momentum, epsilon });
                }
                "activation" => match parse_activation(line, &mut pairs, "kind")? {
                    Some(act) => push(act),
                    None => return Err(config_err(line, "activation needs kind=")),
                },
                other => return Err(config_err(line, format!("unknown declaration '{other}'"))),
            }
            pairs.finish()?;
        }

        let input = input.ok_or_else(|| config_err(1, "missing 'input H W C' declaration"))?;
        let kind = raw.optimizer.unwrap_or(train.optimizer.kind);
        let mut opt = OptimizerConfig::defaults(kind);
        opt.eta = raw.eta.unwrap_or(opt.eta);
        opt.alpha = raw.alpha.unwrap_or(opt.alpha);
        opt.gamma = raw.gamma.unwrap_or(opt.gamma);
        opt.epsilon = raw.opt_epsilon.unwrap_or(opt.epsilon);
        opt.validate().map_err(|e| config_err(raw.line.max(1), e.to_string()))?;
        train.optimizer = opt;
        train
            .loss
            .validate()
            .map_err(|e| config_err(raw.line.max(1), e.to_string()))?;
        Ok(ModelSpec {
            input,
            layers,
            lines,
            train,
        })
    }
}
