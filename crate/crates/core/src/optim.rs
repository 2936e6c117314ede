//! Parameter update rules and the exponential learning-rate schedule.
//!
//! Momentum and RMSProp use the convex-combination form
//! `Δ_t = α·Δ_{t-1} + (1-α)·(-η·step)`, so `α` blends the previous
//! displacement with the fresh step instead of adding to it.

use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Momentum,
    AdaGrad,
    RmsProp,
    Adam,
}

impl OptimizerKind {
    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Momentum => "momentum",
            OptimizerKind::AdaGrad => "adagrad",
            OptimizerKind::RmsProp => "rmsprop",
            OptimizerKind::Adam => "adam",
        }
    }
}

impl FromStr for OptimizerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Ok(match s {
            "sgd" => OptimizerKind::Sgd,
            "momentum" => OptimizerKind::Momentum,
            "adagrad" => OptimizerKind::AdaGrad,
            "rmsprop" => OptimizerKind::RmsProp,
            "adam" => OptimizerKind::Adam,
            other => return Err(format!("unknown optimizer '{other}'")),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub eta: f64,
    /// Momentum blend, or Adam's first-moment decay.
    pub alpha: f64,
    /// Second-moment decay for RMSProp and Adam.
    pub gamma: f64,
    pub epsilon: f64,
}

impl OptimizerConfig {
    /// Defaults chosen so that each rule converges on a unit-scale quadratic.
    pub fn defaults(kind: OptimizerKind) -> Self {
        let (eta, alpha, gamma) = match kind {
            OptimizerKind::Sgd => (0.01, 0.0, 0.0),
            OptimizerKind::Momentum => (0.01, 0.9, 0.0),
            OptimizerKind::AdaGrad => (0.1, 0.0, 0.0),
            OptimizerKind::RmsProp => (0.001, 0.0, 0.9),
            OptimizerKind::Adam => (0.001, 0.9, 0.999),
        };
        OptimizerConfig {
            kind,
            eta,
            alpha,
            gamma,
            epsilon: 1e-8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str, v: f64| Err(Error::InvalidArgument(format!("optimizer {what} out of range: {v}")));
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return bad("eta", self.eta);
        }
        if !(0.0..1.0).contains(&self.alpha) {
            return bad("alpha", self.alpha);
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return bad("gamma", self.gamma);
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return bad("epsilon", self.epsilon);
        }
        Ok(())
    }
}

/// A parameter handed to [`Optimizer::step`].
///
/// `key` identifies the parameter across steps so its buffers persist even
/// when other parameters are skipped (frozen).
pub struct ParamRef<'a> {
    pub key: usize,
    pub name: &'a str,
    pub value: &'a mut Tensor,
    pub grad: &'a Tensor,
}

#[derive(Debug, Clone)]
struct Slot {
    prev_delta: Vec<f64>,
    g_accum: Vec<f64>,
    m: Vec<f64>,
}

impl Slot {
    fn zeros(n: usize) -> Self {
        Slot {
            prev_delta: vec![0.0; n],
            g_accum: vec![0.0; n],
            m: vec![0.0; n],
        }
    }
}

#[derive(Debug, Clone)]
pub struct Optimizer {
    config: OptimizerConfig,
    t: u64,
    slots: Vec<Option<Slot>>,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Optimizer {
            config,
            t: 0,
            slots: Vec::new(),
        })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    /// Number of completed steps.
    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// Second-moment (or squared-gradient) accumulator of a parameter, once created.
    pub fn accumulator(&self, key: usize) -> Option<&[f64]> {
        self.slots.get(key)?.as_ref().map(|s| s.g_accum.as_slice())
    }

    /// Applies one update with learning rate `eta` to every parameter.
    /// Nothing is modified if any gradient is non-finite.
    pub fn step(&mut self, params: &mut [ParamRef<'_>], eta: f64) -> Result<()> {
        for p in params.iter() {
            if p.value.shape() != p.grad.shape() {
                return Err(Error::shape("optimizer_step", p.value.shape(), p.grad.shape()));
            }
            if !p.grad.is_finite() {
                return Err(Error::NonFinite(format!("gradient of {}", p.name)));
            }
        }
        self.t += 1;
        let c = self.config;
        for p in params.iter_mut() {
            if self.slots.len() <= p.key {
                self.slots.resize(p.key + 1, None);
            }
            let slot = self.slots[p.key].get_or_insert_with(|| Slot::zeros(p.grad.len()));
            if slot.g_accum.len() != p.grad.len() {
                return Err(Error::State(format!("parameter {} changed size between steps", p.name)));
            }
            let w = p.value.data_mut();
            let g = p.grad.data();
            match c.kind {
                OptimizerKind::Sgd => {
                    for (w, g) in w.iter_mut().zip(g) {
                        *w -= eta * g;
                    }
                }
                OptimizerKind::Momentum => {
                    for ((w, g), prev) in w.iter_mut().zip(g).zip(&mut slot.prev_delta) {
                        let d = c.alpha * *prev + (1.0 - c.alpha) * (-eta * g);
                        *w += d;
                        *prev = d;
                    }
                }
                OptimizerKind::AdaGrad => {
                    for ((w, g), acc) in w.iter_mut().zip(g).zip(&mut slot.g_accum) {
                        *acc += g * g;
                        *w -= eta * g / (acc.sqrt() + c.epsilon);
                    }
                }
                OptimizerKind::RmsProp => {
                    for (((w, g), acc), prev) in
                        w.iter_mut().zip(g).zip(&mut slot.g_accum).zip(&mut slot.prev_delta)
                    {
                        *acc = c.gamma * *acc + (1.0 - c.gamma) * g * g;
                        let d = c.alpha * *prev + (1.0 - c.alpha) * (-eta * g / (acc.sqrt() + c.epsilon));
                        *w += d;
                        *prev = d;
                    }
                }
                OptimizerKind::Adam => {
                    let t = self.t as i32;
                    let bc1 = 1.0 - c.alpha.powi(t);
                    let bc2 = 1.0 - c.gamma.powi(t);
                    for (((w, g), v), m) in w.iter_mut().zip(g).zip(&mut slot.g_accum).zip(&mut slot.m) {
                        *m = c.alpha * *m + (1.0 - c.alpha) * g;
                        *v = c.gamma * *v + (1.0 - c.gamma) * g * g;
                        let m_hat = *m / bc1;
                        let v_hat = *v / bc2;
                        *w -= eta * m_hat / (v_hat.sqrt() + c.epsilon);
                    }
                }
            }
        }
        Ok(())
    }
}

/// `η(k) = η0 · exp(-k/d)`; without a decay constant the rate stays at `η0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecaySchedule {
    eta0: f64,
    d: Option<f64>,
}

impl DecaySchedule {
    pub fn new(eta0: f64, d: f64) -> Result<Self> {
        if !(eta0 > 0.0 && eta0.is_finite()) || !(d > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "decay schedule needs eta0 > 0 and d > 0, got {eta0} and {d}"
            )));
        }
        Ok(DecaySchedule { eta0, d: Some(d) })
    }

    pub fn constant(eta0: f64) -> Result<Self> {
        if !(eta0 > 0.0 && eta0.is_finite()) {
            return Err(Error::InvalidArgument(format!("eta0 must be positive, got {eta0}")));
        }
        Ok(DecaySchedule { eta0, d: None })
    }

    pub fn eta0(&self) -> f64 {
        self.eta0
    }

    pub fn decay(&self) -> Option<f64> {
        self.d
    }

    pub fn eta(&self, k: u64) -> f64 {
        match self.d {
            Some(d) => self.eta0 * (-(k as f64) / d).exp(),
            None => self.eta0,
        }
    }
}

/// Free-function form of the schedule.
pub fn decayed_eta(schedule: &DecaySchedule, k: u64) -> f64 {
    schedule.eta(k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn opt(kind: OptimizerKind, eta: f64, alpha: f64, gamma: f64) -> Optimizer {
        Optimizer::new(OptimizerConfig {
            kind,
            eta,
            alpha,
            gamma,
            epsilon: 1e-8,
        })
        .unwrap()
    }

    /// Applies one step to a single parameter with gradient `g`.
    fn step(o: &mut Optimizer, w: &mut Tensor, g: &[f64]) {
        let grad = Tensor::new(w.shape(), g.to_vec()).unwrap();
        let eta = o.config().eta;
        o.step(
            &mut [ParamRef {
                key: 0,
                name: "w",
                value: w,
                grad: &grad,
            }],
            eta,
        )
        .unwrap();
    }

    const ALL: [OptimizerKind; 5] = [
        OptimizerKind::Sgd,
        OptimizerKind::Momentum,
        OptimizerKind::AdaGrad,
        OptimizerKind::RmsProp,
        OptimizerKind::Adam,
    ];

    #[test]
    fn sgd_single_step() {
        let mut o = opt(OptimizerKind::Sgd, 0.1, 0.0, 0.0);
        let mut w = Tensor::vector(vec![1.0]);
        step(&mut o, &mut w, &[0.5]);
        assert_eq!(w.data(), &[0.95]);
    }

    #[test]
    fn sgd_on_quadratic_follows_closed_form() {
        let mut o = opt(OptimizerKind::Sgd, 0.1, 0.0, 0.0);
        let mut w = Tensor::vector(vec![1.0]);
        let mut expect = 1.0f64;
        for t in 1..=50 {
            let g = w.data()[0];
            step(&mut o, &mut w, &[g]);
            expect -= 0.1 * expect;
            assert_eq!(w.data()[0], expect);
            assert!((w.data()[0] - 0.9f64.powi(t)).abs() < 1e-12 * 0.9f64.powi(t));
        }
    }

    #[test]
    fn non_finite_gradient_names_the_parameter() {
        let mut o = opt(OptimizerKind::Sgd, 0.1, 0.0, 0.0);
        let mut w = Tensor::vector(vec![1.0]);
        let g = Tensor::vector(vec![f64::NAN]);
        let err = o
            .step(
                &mut [ParamRef {
                    key: 0,
                    name: "3.weight",
                    value: &mut w,
                    grad: &g,
                }],
                0.1,
            )
            .unwrap_err();
        assert!(err.to_string().contains("3.weight"));
        assert_eq!(w.data(), &[1.0]);
    }

    #[test]
    fn momentum_without_alpha_is_sgd() {
        let mut a = opt(OptimizerKind::Momentum, 0.1, 0.0, 0.0);
        let mut b = opt(OptimizerKind::Sgd, 0.1, 0.0, 0.0);
        let (mut wa, mut wb) = (Tensor::vector(vec![1.0, -2.0]), Tensor::vector(vec![1.0, -2.0]));
        for k in 0..10 {
            let g = [0.3 * k as f64, -0.7];
            step(&mut a, &mut wa, &g);
            step(&mut b, &mut wb, &g);
            assert_eq!(wa, wb);
        }
    }

    #[test]
    fn momentum_unrolled() {
        let (eta, alpha, g) = (0.1, 0.9, 2.0);
        let mut o = opt(OptimizerKind::Momentum, eta, alpha, 0.0);
        let mut w = Tensor::vector(vec![1.0]);
        step(&mut o, &mut w, &[g]);
        let d1 = -(1.0 - alpha) * eta * g;
        assert_eq!(w.data()[0], 1.0 + d1);
        step(&mut o, &mut w, &[g]);
        let d2 = alpha * d1 + (1.0 - alpha) * (-eta * g);
        step(&mut o, &mut w, &[g]);
        let d3 = alpha * d2 + (1.0 - alpha) * (-eta * g);
        assert_eq!(w.data()[0], 1.0 + d1 + d2 + d3);
    }

    #[test]
    fn adagrad_first_step_and_shrinking_steps() {
        let mut o = opt(OptimizerKind::AdaGrad, 0.1, 0.0, 0.0);
        let mut w = Tensor::vector(vec![0.0]);
        step(&mut o, &mut w, &[1.0]);
        assert!((w.data()[0] + 0.1).abs() < 1e-8);
        let mut last = w.data()[0];
        let mut prev_step = 0.1;
        for t in 2..=50 {
            step(&mut o, &mut w, &[1.0]);
            let s = last - w.data()[0];
            assert!((s - 0.1 / (t as f64).sqrt()).abs() < 1e-8);
            assert!(s < prev_step);
            prev_step = s;
            last = w.data()[0];
        }
    }

    #[test]
    fn rmsprop_first_step() {
        let mut o = opt(OptimizerKind::RmsProp, 0.01, 0.0, 0.9);
        let mut w = Tensor::vector(vec![0.0]);
        step(&mut o, &mut w, &[1.0]);
        assert!((w.data()[0] + 0.01 / 0.1f64.sqrt()).abs() < 1e-9);
    }

    #[test]
    fn rmsprop_without_memory_takes_sign_steps() {
        let mut o = opt(OptimizerKind::RmsProp, 0.01, 0.0, 0.0);
        let mut w = Tensor::vector(vec![0.0, 0.0, 0.0]);
        step(&mut o, &mut w, &[5.0, -0.3, 1e-2]);
        for (v, s) in w.data().iter().zip([-1.0, 1.0, -1.0]) {
            assert!((v - 0.01 * s).abs() < 1e-7);
        }
    }

    #[test]
    fn rmsprop_unrolled() {
        let (eta, alpha, gamma, eps) = (0.01, 0.5, 0.9, 1e-8);
        let gs = [1.0, -0.5, 2.0, 0.25, -1.5];
        let mut o = opt(OptimizerKind::RmsProp, eta, alpha, gamma);
        let mut w = Tensor::vector(vec![0.3]);
        let (mut ew, mut acc, mut prev) = (0.3f64, 0.0f64, 0.0f64);
        for g in gs {
            step(&mut o, &mut w, &[g]);
            acc = gamma * acc + (1.0 - gamma) * g * g;
            let d = alpha * prev + (1.0 - alpha) * (-eta * g / (acc.sqrt() + eps));
            ew += d;
            prev = d;
            assert_eq!(w.data()[0], ew);
        }
    }

    #[test]
    fn adam_first_step_is_about_eta() {
        for g in [1e-3, -0.5, 42.0] {
            let mut o = opt(OptimizerKind::Adam, 0.001, 0.9, 0.999);
            let mut w = Tensor::vector(vec![0.0]);
            step(&mut o, &mut w, &[g]);
            let expect = 0.001 * g.abs() / (g.abs() + 1e-8);
            assert!((w.data()[0].abs() - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn adam_unrolled() {
        let (eta, a, b, eps) = (0.001, 0.9, 0.999, 1e-8);
        let mut o = opt(OptimizerKind::Adam, eta, a, b);
        let mut w = Tensor::vector(vec![0.5]);
        let (mut ew, mut m, mut v) = (0.5f64, 0.0f64, 0.0f64);
        for (t, g) in [0.2, -0.1, 0.4].into_iter().enumerate() {
            step(&mut o, &mut w, &[g]);
            let t = t as i32 + 1;
            m = a * m + (1.0 - a) * g;
            v = b * v + (1.0 - b) * g * g;
            ew -= eta * (m / (1.0 - a.powi(t))) / ((v / (1.0 - b.powi(t))).sqrt() + eps);
            assert_eq!(w.data()[0], ew);
        }
        assert_eq!(o.step_count(), 3);
    }

    #[test]
    fn adam_bound_does_not_hold_after_a_quiet_history() {
        // With α = 0 the step is η·|g_t|/sqrt(v̂_t); a small history inflates it.
        let mut o = opt(OptimizerKind::Adam, 0.001, 0.0, 0.999);
        let mut w = Tensor::vector(vec![0.0]);
        step(&mut o, &mut w, &[1e-6]);
        let before = w.data()[0];
        step(&mut o, &mut w, &[1.0]);
        assert!((before - w.data()[0]).abs() > 1.4 * 0.001);
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        for kind in ALL {
            let mut o = Optimizer::new(OptimizerConfig::defaults(kind)).unwrap();
            let mut w = Tensor::vector(vec![0.25, -3.0, 7.5]);
            let orig = w.clone();
            for _ in 0..20 {
                step(&mut o, &mut w, &[0.0; 3]);
            }
            assert_eq!(w, orig, "{kind:?}");
            assert!(o.accumulator(0).unwrap().iter().all(|&a| a == 0.0));
        }
    }

    #[test]
    fn skipped_parameters_are_bit_identical() {
        let mut o = Optimizer::new(OptimizerConfig::defaults(OptimizerKind::Adam)).unwrap();
        let mut trained = Tensor::vector(vec![1.0, 2.0]);
        let frozen = Tensor::vector(vec![3.0, 4.0]);
        let snapshot = frozen.clone();
        let g = Tensor::vector(vec![0.5, -0.5]);
        for _ in 0..10 {
            o.step(
                &mut [ParamRef {
                    key: 1,
                    name: "trained",
                    value: &mut trained,
                    grad: &g,
                }],
                0.01,
            )
            .unwrap();
        }
        assert_eq!(frozen, snapshot);
        assert!(o.accumulator(0).is_none());
    }

    #[test]
    fn defaults_converge_on_a_quadratic() {
        for kind in ALL {
            let mut o = Optimizer::new(OptimizerConfig::defaults(kind)).unwrap();
            let mut w = Tensor::vector(vec![0.6, 0.8]);
            let mut reached = None;
            for t in 0..10_000 {
                let g = w.data().to_vec();
                step(&mut o, &mut w, &g);
                if w.data().iter().map(|v| v * v).sum::<f64>().sqrt() < 1e-3 {
                    reached = Some(t);
                    break;
                }
            }
            assert!(reached.is_some(), "{kind:?} ended at {:?}", w.data());
        }
    }

    #[test]
    fn decay_schedule_values() {
        let s = DecaySchedule::new(0.005, 2000.0).unwrap();
        assert_eq!(s.eta(0), 0.005);
        assert!((decayed_eta(&s, 2000) - 0.0018394).abs() < 1e-7);
        let mut prev = f64::INFINITY;
        for k in (0..=1000).step_by(100) {
            let e = s.eta(k);
            assert!(e > 0.0 && e < prev);
            prev = e;
        }
        assert!(DecaySchedule::new(0.1, 0.0).is_err());
        assert_eq!(DecaySchedule::constant(0.1).unwrap().eta(10_000), 0.1);
    }

    proptest! {
        #[test]
        fn accumulators_stay_nonnegative(gs in prop::collection::vec(-100.0f64..100.0, 1..40)) {
            for kind in [OptimizerKind::AdaGrad, OptimizerKind::RmsProp, OptimizerKind::Adam] {
                let mut o = Optimizer::new(OptimizerConfig::defaults(kind)).unwrap();
                let mut w = Tensor::vector(vec![0.0]);
                for &g in &gs {
                    step(&mut o, &mut w, &[g]);
                    prop_assert!(o.accumulator(0).unwrap()[0] >= 0.0);
                }
            }
        }

        #[test]
        fn adagrad_steps_never_grow_under_constant_gradient(g in -10.0f64..10.0) {
            let mut o = Optimizer::new(OptimizerConfig::defaults(OptimizerKind::AdaGrad)).unwrap();
            let mut w = Tensor::vector(vec![0.0]);
            let mut prev = f64::INFINITY;
            for _ in 0..30 {
                let before = w.data()[0];
                step(&mut o, &mut w, &[g]);
                let s = (w.data()[0] - before).abs();
                prop_assert!(s <= prev);
                prev = s;
            }
        }

        /// The first Adam step, and every step once the first moment is off
        /// and the gradient is steady, stays within the learning rate.
        #[test]
        fn adam_step_bounded_by_eta(g in prop::collection::vec(-1e3f64..1e3, 1..8), gamma in 0.0f64..0.9999, steps in 1usize..20) {
            let mut o = opt(OptimizerKind::Adam, 0.01, 0.0, gamma);
            let mut w = Tensor::vector(vec![0.0; g.len()]);
            for _ in 0..steps {
                let before = w.clone();
                step(&mut o, &mut w, &g);
                for (a, b) in w.data().iter().zip(before.data()) {
                    prop_assert!((a - b).abs() <= 0.01 * (1.0 + 1e-6));
                }
            }
        }

        #[test]
        fn adam_without_moment_memory_is_bounded_for_any_sequence(gs in prop::collection::vec(-1e3f64..1e3, 1..30)) {
            let mut o = opt(OptimizerKind::Adam, 0.01, 0.0, 0.0);
            let mut w = Tensor::vector(vec![0.0]);
            for &g in &gs {
                let before = w.data()[0];
                step(&mut o, &mut w, &[g]);
                prop_assert!((w.data()[0] - before).abs() <= 0.01 * (1.0 + 1e-6));
            }
        }
    }
}
