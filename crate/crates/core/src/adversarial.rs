//! Gradient-based input perturbations and robustness tables.

use std::str::FromStr;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::layers::Mode;
use crate::model::{Model, EVAL_CHUNK};
use crate::parallel;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AttackMode {
    /// Step along `g / ‖g‖∞`.
    #[default]
    Scaled,
    /// Step along `sign(g)`.
    Sign,
}

impl FromStr for AttackMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "scaled" => Ok(AttackMode::Scaled),
            "sign" => Ok(AttackMode::Sign),
            other => Err(format!("unknown attack mode '{other}' (expected scaled or sign)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttackConfig {
    /// Budget as a fraction of the input range.
    pub epsilon: f64,
    /// Class whose score is ascended; `None` ascends the loss of the true label.
    pub target: Option<usize>,
    pub mode: AttackMode,
    /// Valid input interval.
    pub bounds: (f64, f64),
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            epsilon: 0.04,
            target: None,
            mode: AttackMode::Scaled,
            bounds: (0.0, 1.0),
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(Error::InvalidArgument(format!("epsilon {} outside [0, 1]", self.epsilon)));
        }
        if !(self.bounds.0 < self.bounds.1) {
            return Err(Error::InvalidArgument(format!("empty input bounds {:?}", self.bounds)));
        }
        Ok(())
    }

    fn range(&self) -> f64 {
        self.bounds.1 - self.bounds.0
    }
}

/// Gradient w.r.t. the input of each sample's own objective: the softmax
/// cross-entropy of its label, or the logit of `target`. Samples do not
/// interact in evaluation mode, so row `i` only depends on sample `i`.
pub fn input_gradient(model: &mut Model, x: &Tensor, labels: &Tensor, target: Option<usize>) -> Result<Tensor> {
    model.check_mode(Mode::Eval)?;
    let end = model.logits_end();
    let logits = model.forward(x, end)?;
    if logits.shape() != labels.shape() {
        return Err(Error::shape("input_gradient", logits.shape(), labels.shape()));
    }
    let c = logits.shape()[1];
    let upstream = match target {
        Some(t) if t >= c => {
            return Err(Error::InvalidArgument(format!("target class {t} outside {c} classes")));
        }
        Some(t) => {
            let mut g = Tensor::zeros(logits.shape());
            g.data_mut().chunks_exact_mut(c).for_each(|row| row[t] = 1.0);
            g
        }
        None => crate::layers::softmax(&logits)?.zip_map(labels, |p, y| p - y)?,
    };
    model
        .backward(&upstream, end, true)?
        .ok_or_else(|| Error::State("no input gradient produced".into()))
}

/// Per-sample step directions with unit sup-norm; `None` for samples whose
/// gradient vanishes.
fn directions(grad: &Tensor, mode: AttackMode) -> Vec<Option<Vec<f64>>> {
    let per = grad.len() / grad.batch();
    grad.data()
        .chunks_exact(per)
        .map(|g| {
            let norm = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            (norm > 0.0).then(|| match mode {
                AttackMode::Scaled => g.iter().map(|v| v / norm).collect(),
                AttackMode::Sign => g.iter().map(|v| v.signum() * f64::from(u8::from(*v != 0.0))).collect(),
            })
        })
        .collect()
}

fn apply(x: &Tensor, dirs: &[Option<Vec<f64>>], cfg: &AttackConfig) -> Tensor {
    let step = cfg.epsilon * cfg.range();
    let (lo, hi) = cfg.bounds;
    let per = x.len() / x.batch();
    let mut out = x.clone();
    for (row, dir) in out.data_mut().chunks_exact_mut(per).zip(dirs) {
        if let Some(d) = dir {
            for (v, d) in row.iter_mut().zip(d) {
                *v = (*v + step * d).clamp(lo, hi);
            }
        }
    }
    out
}

/// `x_adv = clamp(x + ε·range·g/‖g‖∞)` per sample (or `sign(g)` in sign
/// mode). Fails if any sample has an all-zero gradient.
pub fn perturb(model: &mut Model, x: &Tensor, labels: &Tensor, cfg: &AttackConfig) -> Result<Tensor> {
    cfg.validate()?;
    let g = input_gradient(model, x, labels, cfg.target)?;
    let dirs = directions(&g, cfg.mode);
    if let Some(i) = dirs.iter().position(Option::is_none) {
        return Err(Error::InvalidArgument(format!(
            "sample {i} has a zero input gradient, so there is no attack direction"
        )));
    }
    Ok(apply(x, &dirs, cfg))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RobustnessRow {
    pub epsilon: f64,
    pub adv_accuracy: f64,
    /// Samples left unperturbed because their gradient vanished.
    pub skipped: usize,
}

fn report_chunk(model: &mut Model, data: &Dataset, start: usize, epsilons: &[f64], cfg: &AttackConfig) -> Result<Vec<(usize, usize)>> {
    let end = (start + EVAL_CHUNK).min(data.len());
    let x = data.images().slice_rows(start, end);
    let y = data.labels().slice_rows(start, end);
    let dirs = directions(&input_gradient(model, &x, &y, cfg.target)?, cfg.mode);
    let skipped = dirs.iter().filter(|d| d.is_none()).count();
    let truth = y.argmax_rows();
    epsilons
        .iter()
        .map(|&epsilon| {
            let adv = apply(&x, &dirs, &AttackConfig { epsilon, ..*cfg });
            let pred = model.infer_to(&adv, model.logits_end())?.argmax_rows();
            Ok((pred.iter().zip(&truth).filter(|(p, t)| p == t).count(), skipped))
        })
        .collect()
}

/// Adversarial accuracy over `data` for each budget in `epsilons`, in order.
/// Rows for samples with a vanishing gradient use the clean input.
pub fn robustness_report(model: &Model, data: &Dataset, epsilons: &[f64], cfg: &AttackConfig) -> Result<Vec<RobustnessRow>> {
    for &e in epsilons {
        AttackConfig { epsilon: e, ..*cfg }.validate()?;
    }
    if data.is_empty() {
        return Err(Error::InvalidArgument("cannot attack an empty dataset".into()));
    }
    let starts: Vec<usize> = (0..data.len()).step_by(EVAL_CHUNK).collect();
    let workers = parallel::threads().min(starts.len()).max(1);
    let chunks: Vec<Vec<(usize, usize)>> = std::thread::scope(|scope| {
        let handles: Vec<_> = parallel::split_ranges(starts.len(), workers)
            .into_iter()
            .map(|r| {
                let starts = &starts[r];
                let mut local = model.clone();
                scope.spawn(move || {
                    starts
                        .iter()
                        .map(|&s| report_chunk(&mut local, data, s, epsilons, cfg))
                        .collect::<Result<Vec<_>>>()
                })
            })
            .collect();
        let mut all = Vec::new();
        for h in handles {
            all.extend(h.join().expect("attack worker panicked")?);
        }
        Ok::<_, Error>(all)
    })?;
    Ok(epsilons
        .iter()
        .enumerate()
        .map(|(k, &epsilon)| {
            let correct: usize = chunks.iter().map(|c| c[k].0).sum();
            RobustnessRow {
                epsilon,
                adv_accuracy: correct as f64 / data.len() as f64,
                skipped: chunks.iter().map(|c| c[k].1).sum(),
            }
        })
        .collect())
}
