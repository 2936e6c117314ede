use std::io::Write;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Model, TrainConfig};
use crate::data::{add_noise, flip_h, flip_v, AugmentOp, BatchSampler, Dataset, FancyPca, Preprocessor};
use crate::error::{Error, Result};
use crate::layers::Mode;
use crate::loss::{l2_penalty, LossKind};
use crate::optim::{DecaySchedule, Optimizer, ParamRef};
use crate::parallel;
use crate::tensor::Tensor;

/// Evaluation processes the data in chunks of this many samples.
pub const EVAL_CHUNK: usize = 500;

/// Stream reserved for the augmentation generator.
const AUGMENT_STREAM: u64 = u64::MAX;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalResult {
    pub accuracy: f64,
    /// Mean softmax cross-entropy (natural log) of the logits.
    pub loss: f64,
    pub correct: usize,
    pub total: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalPoint {
    /// 1-based iteration after which the accuracies were measured.
    pub iter: usize,
    /// Accuracy on the iteration's training batch.
    pub train_acc: f64,
    pub test_acc: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    /// Objective per iteration: `loss_scale * data loss + λ·L2`.
    pub losses: Vec<f64>,
    /// Learning rate used at each iteration.
    pub etas: Vec<f64>,
    pub evals: Vec<EvalPoint>,
    pub iter_seconds: Vec<f64>,
}

impl TrainReport {
    pub fn final_test_accuracy(&self) -> Option<f64> {
        self.evals.last().and_then(|e| e.test_acc)
    }

    /// One row per iteration with header `iter,loss,train_acc,test_acc,eta`.
    /// Accuracy columns are empty on iterations without an evaluation.
    pub fn write_csv(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(out, "iter,loss,train_acc,test_acc,eta")?;
        let mut evals = self.evals.iter().peekable();
        for (i, (loss, eta)) in self.losses.iter().zip(&self.etas).enumerate() {
            let iter = i + 1;
            let (train_acc, test_acc) = match evals.next_if(|e| e.iter == iter) {
                Some(e) => (e.train_acc.to_string(), e.test_acc.map(|a| a.to_string()).unwrap_or_default()),
                None => (String::new(), String::new()),
            };
            writeln!(out, "{iter},{loss},{train_acc},{test_acc},{eta}")?;
        }
        Ok(())
    }
}

/// Fraction of rows whose argmax matches the label's argmax, ties going to
/// the lowest index.
pub fn accuracy(predictions: &Tensor, labels: &Tensor) -> Result<f64> {
    if predictions.shape() != labels.shape() || predictions.rank() != 2 {
        return Err(Error::shape("accuracy", predictions.shape(), labels.shape()));
    }
    Ok(count_correct(predictions, labels) as f64 / predictions.batch() as f64)
}

fn count_correct(predictions: &Tensor, labels: &Tensor) -> usize {
    predictions
        .argmax_rows()
        .iter()
        .zip(labels.argmax_rows())
        .filter(|(p, l)| **p == *l)
        .count()
}

/// Summed softmax cross-entropy of logit rows.
fn logit_loss_sum(logits: &Tensor, labels: &Tensor) -> f64 {
    let c = logits.shape()[1];
    logits
        .data()
        .chunks_exact(c)
        .zip(labels.data().chunks_exact(c))
        .map(|(z, y)| {
            let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            y.iter().zip(z).map(|(y, z)| y * (lse - z)).sum::<f64>()
        })
        .sum()
}

fn eval_chunk(model: &Model, data: &Dataset, start: usize) -> Result<(usize, f64)> {
    let end = (start + EVAL_CHUNK).min(data.len());
    let x = data.images().slice_rows(start, end);
    let y = data.labels().slice_rows(start, end);
    let logits = model.infer_to(&x, model.logits_end())?;
    if logits.shape() != y.shape() {
        return Err(Error::shape("evaluate", logits.shape(), y.shape()));
    }
    Ok((count_correct(&logits, &y), logit_loss_sum(&logits, &y)))
}

/// Evaluation-mode accuracy and mean loss. Chunks are spread over
/// [`parallel::threads`] workers and combined in order, so the result does
/// not depend on the thread count.
pub fn evaluate(model: &Model, data: &Dataset) -> Result<EvalResult> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("cannot evaluate on an empty dataset".into()));
    }
    let starts: Vec<usize> = (0..data.len()).step_by(EVAL_CHUNK).collect();
    let workers = parallel::threads().min(starts.len());
    let parts: Vec<(usize, f64)> = if workers <= 1 {
        starts.iter().map(|&s| eval_chunk(model, data, s)).collect::<Result<_>>()?
    } else {
        std::thread::scope(|scope| {
            let handles: Vec<_> = parallel::split_ranges(starts.len(), workers)
                .into_iter()
                .map(|r| {
                    let starts = &starts[r];
                    scope.spawn(move || {
                        starts.iter().map(|&s| eval_chunk(model, data, s)).collect::<Result<Vec<_>>>()
                    })
                })
                .collect();
            let mut all = Vec::with_capacity(starts.len());
            for h in handles {
                all.extend(h.join().expect("evaluation worker panicked")?);
            }
            Ok::<_, Error>(all)
        })?
    };
    let correct: usize = parts.iter().map(|p| p.0).sum();
    let loss_sum: f64 = parts.iter().map(|p| p.1).sum();
    let total = data.len();
    Ok(EvalResult {
        accuracy: correct as f64 / total as f64,
        loss: loss_sum / total as f64,
        correct,
        total,
    })
}

/// Fits the configured preprocessing on the training split.
pub fn fit_preprocessor(cfg: &TrainConfig, train: &Dataset) -> Result<Option<Preprocessor>> {
    cfg.preprocess
        .map(|kind| {
            let mut p = Preprocessor::new(kind);
            p.fit(train)?;
            Ok(p)
        })
        .transpose()
}

/// Applies the configured preprocessing (fitted on `train`) to `data`.
pub fn prepare_data(cfg: &TrainConfig, train: &Dataset, data: &Dataset) -> Result<Dataset> {
    match fit_preprocessor(cfg, train)? {
        Some(p) => p.apply(data),
        None => Ok(data.clone()),
    }
}

fn augment_batch(
    x: &Tensor,
    ops: &[AugmentOp],
    pca: Option<&FancyPca>,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    let b = x.batch();
    let sample_shape = &x.shape()[1..];
    let per = x.len() / b;
    let mut out = Vec::with_capacity(x.len());
    for i in 0..b {
        let mut img = Tensor::new(sample_shape, x.data()[i * per..(i + 1) * per].to_vec())?;
        for op in ops {
            img = match *op {
                AugmentOp::FlipH if rng.random_bool(0.5) => flip_h(&img)?,
                AugmentOp::FlipV if rng.random_bool(0.5) => flip_v(&img)?,
                AugmentOp::FlipH | AugmentOp::FlipV => img,
                AugmentOp::Noise(sigma) => add_noise(&img, sigma, rng)?,
                AugmentOp::FancyPca(sigma) => pca.expect("fitted when requested").apply(&img, sigma, rng)?,
                AugmentOp::Crop(..) => {
                    return Err(Error::InvalidArgument("crop changes the input size and cannot run in training".into()))
                }
            };
        }
        out.extend_from_slice(img.data());
    }
    Tensor::new(x.shape(), out)
}

/// Trains `model` in place on raw (unpreprocessed) `train` data following `cfg`.
///
/// Each iteration draws a batch, augments it, applies the preprocessing
/// fitted on `train`, runs the training forward pass, scales the loss by
/// `loss_scale`, adds `λ·ΣW²`, backpropagates and takes one optimizer step
/// with `η(k) = η0·exp(-k/d)` for the zero-based iteration `k`.
///
/// Accuracies are recorded every `eval_every` iterations and after the last
/// one; the test accuracy is measured on the preprocessed `test` set when given.
pub fn train(model: &mut Model, cfg: &TrainConfig, train: &Dataset, test: Option<&Dataset>) -> Result<TrainReport> {
    train_with_progress(model, cfg, train, test, |_, _| {})
}

/// [`train`], calling `progress(point, loss)` after every evaluation.
pub fn train_with_progress(
    model: &mut Model,
    cfg: &TrainConfig,
    train: &Dataset,
    test: Option<&Dataset>,
    mut progress: impl FnMut(&EvalPoint, f64),
) -> Result<TrainReport> {
    cfg.loss.validate()?;
    if cfg.loss.kind == LossKind::CrossEntropy && !model.ends_with_softmax() {
        return Err(Error::InvalidArgument(
            "loss=cross_entropy needs a model ending in softmax".into(),
        ));
    }
    if train.image_shape() != model.input_shape() {
        return Err(Error::shape("training data", train.image_shape(), model.input_shape()));
    }
    let preprocessor = fit_preprocessor(cfg, train)?;
    let test = match (test, &preprocessor) {
        (Some(t), Some(p)) => Some(p.apply(t)?),
        (Some(t), None) => Some(t.clone()),
        (None, _) => None,
    };
    let pca = match cfg.augment.iter().any(|op| matches!(op, AugmentOp::FancyPca(_))) {
        true => Some(FancyPca::fit(train)?),
        false => None,
    };
    let schedule = match cfg.decay {
        Some(d) => DecaySchedule::new(cfg.optimizer.eta, d)?,
        None => DecaySchedule::constant(cfg.optimizer.eta)?,
    };
    let mut optimizer = Optimizer::new(cfg.optimizer)?;
    let mut sampler = BatchSampler::new(cfg.batch, cfg.sampling, cfg.seed.wrapping_add(1))?;
    let mut aug_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    aug_rng.set_stream(AUGMENT_STREAM);

    let end = match cfg.loss.kind {
        LossKind::SoftmaxCe => model.logits_end(),
        LossKind::CrossEntropy => model.len(),
    };
    let lambda = cfg.loss.lambda;
    let mut report = TrainReport::default();
    model.set_mode(Mode::Train);

    for iter in 1..=cfg.iters {
        let started = Instant::now();
        let eta = schedule.eta(iter as u64 - 1);
        let (mut x, y) = sampler.next_batch(train)?;
        if !cfg.augment.is_empty() {
            x = augment_batch(&x, &cfg.augment, pca.as_ref(), &mut aug_rng)?;
        }
        if let Some(p) = &preprocessor {
            x = p.transform(&x)?;
        }

        let out = model.forward(&x, end)?;
        let (data_loss, grad) = cfg.loss.loss_and_grad(&y, &out)?;
        let mut loss = cfg.loss_scale * data_loss;
        if lambda > 0.0 {
            let weights: Vec<Tensor> = model
                .layers_mut()
                .iter_mut()
                .flat_map(|l| l.params_mut().into_iter().filter(|p| p.decay).map(|p| p.value.clone()))
                .collect();
            loss += l2_penalty(&weights, lambda);
        }
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("training loss at iteration {iter}")));
        }
        let grad = if cfg.loss_scale == 1.0 {
            grad
        } else {
            grad.map(|g| g * cfg.loss_scale)
        };
        model.backward(&grad, end, false)?;
        step(model, &mut optimizer, lambda, eta).map_err(|e| match e {
            Error::NonFinite(what) => Error::NonFinite(format!("{what} at iteration {iter}")),
            other => other,
        })?;

        report.losses.push(loss);
        report.etas.push(eta);
        if iter % cfg.eval_every == 0 || iter == cfg.iters {
            let train_acc = accuracy(&out, &y)?;
            let test_acc = match &test {
                Some(t) => Some(evaluate(model, t)?.accuracy),
                None => None,
            };
            let point = EvalPoint {
                iter,
                train_acc,
                test_acc,
            };
            progress(&point, loss);
            report.evals.push(point);
        }
        report.iter_seconds.push(started.elapsed().as_secs_f64());
    }
    model.set_mode(Mode::Eval);
    Ok(report)
}

/// One optimizer update over every trainable layer. Parameters are keyed by
/// `(layer, role position)` so their optimizer state survives freezing.
fn step(model: &mut Model, optimizer: &mut Optimizer, lambda: f64, eta: f64) -> Result<()> {
    const ROLES_PER_LAYER: usize = 8;
    let frozen = model.frozen.clone();
    let mut names = Vec::new();
    let mut params = Vec::new();
    for (i, layer) in model.layers_mut().iter_mut().enumerate() {
        if frozen[i] {
            continue;
        }
        for (j, p) in layer.params_mut().into_iter().enumerate() {
            names.push(format!("{i}.{}", p.role));
            params.push((i * ROLES_PER_LAYER + j, p));
        }
    }
    let regularized: Vec<Option<Tensor>> = params
        .iter()
        .map(|(_, p)| {
            (lambda > 0.0 && p.decay).then(|| {
                let mut g = p.grad.clone();
                crate::loss::add_l2_grad(p.value, &mut g, lambda).expect("matching shapes");
                g
            })
        })
        .collect();
    let mut refs: Vec<ParamRef<'_>> = params
        .into_iter()
        .zip(&regularized)
        .zip(&names)
        .map(|(((key, p), reg), name)| ParamRef {
            key,
            name,
            grad: reg.as_ref().unwrap_or(p.grad),
            value: p.value,
        })
        .collect();
    optimizer.step(&mut refs, eta)?;
    drop(refs);
    model.layers_mut().iter_mut().for_each(|l| l.post_update());
    Ok(())
}
