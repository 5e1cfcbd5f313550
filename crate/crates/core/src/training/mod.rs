//! Optimization: SGD with momentum, the triangular cyclical learning rate, gradient accumulation
//! and the regression, classification and fine-tuning procedures built on them.

mod data;
mod gradcheck;
mod history;
mod runner;

use std::collections::BTreeSet;

use rand::Rng;

use crate::batching::PaddedBatch;
use crate::dataset::mos_to_class;
use crate::model::{backward, cross_entropy, forward, l1_loss, mse_loss, LayerId, Mode, Model, ModelParams};
use crate::{Error, Result};

pub use data::{predict, LabeledSet};
pub use gradcheck::{check_gradients, relative_error, GradCheckReport};
pub use history::{History, HistoryRow};
pub use runner::{
    classification_phases, finetune, train_classification, train_regression, PhaseSpec,
    StopReason, TrainOutcome, TrainRunConfig,
};

/// Triangular schedule: `base` at the start of each cycle, `max` halfway through.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CyclicalLr {
    pub base_lr: f64,
    pub max_lr: f64,
    pub cycle_len: usize,
}

impl Default for CyclicalLr {
    fn default() -> Self {
        CyclicalLr {
            base_lr: 0.0005,
            max_lr: 0.005,
            cycle_len: 200,
        }
    }
}

impl CyclicalLr {
    pub fn new(base_lr: f64, max_lr: f64, cycle_len: usize) -> Result<Self> {
        let s = CyclicalLr {
            base_lr,
            max_lr,
            cycle_len,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0 && self.base_lr <= self.max_lr && self.max_lr.is_finite()) {
            return Err(Error::invalid(format!(
                "cyclical lr needs 0 < base ({}) <= max ({})",
                self.base_lr, self.max_lr
            )));
        }
        if self.cycle_len == 0 || !self.cycle_len.is_multiple_of(2) {
            return Err(Error::invalid(format!(
                "cycle length {} must be even and positive",
                self.cycle_len
            )));
        }
        Ok(())
    }

    pub fn lr(&self, iter: usize) -> f64 {
        let half = (self.cycle_len / 2) as f64;
        let pos = (iter % self.cycle_len) as f64;
        self.base_lr + (self.max_lr - self.base_lr) * (1.0 - (pos - half).abs() / half)
    }
}

pub fn cyclical_lr(schedule: &CyclicalLr, iter: usize) -> f64 {
    schedule.lr(iter)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LrSchedule {
    Constant(f64),
    Cyclical(CyclicalLr),
}

impl LrSchedule {
    pub fn at(&self, iter: usize) -> f64 {
        match self {
            LrSchedule::Constant(lr) => *lr,
            LrSchedule::Cyclical(c) => c.lr(iter),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            LrSchedule::Constant(lr) if *lr >= 0.0 && lr.is_finite() => Ok(()),
            LrSchedule::Constant(lr) => Err(Error::invalid(format!("learning rate {lr} must be >= 0"))),
            LrSchedule::Cyclical(c) => c.validate(),
        }
    }
}

/// Momentum buffers, shaped like the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub momentum: f64,
    pub velocity: ModelParams,
}

impl OptimizerState {
    pub fn new(params: &ModelParams, momentum: f64) -> Self {
        OptimizerState {
            momentum,
            velocity: params.zeros_like(),
        }
    }
}

/// Scales `grads` so their global L2 norm is at most `max_norm`; returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut ModelParams, max_norm: f64) -> f64 {
    let norm = grads
        .tensors()
        .iter()
        .flat_map(|(_, _, t)| t.data.iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for (_, _, t) in grads.tensors_mut() {
            t.data.iter_mut().for_each(|g| *g *= scale);
        }
    }
    norm
}

/// `v ← μ·v + g; p ← p − lr·v` for every tensor outside `frozen`. Frozen tensors and their
/// buffers are not touched. Returns the layers whose parameter values changed.
pub fn sgd_momentum_step(
    params: &mut ModelParams,
    grads: &ModelParams,
    state: &mut OptimizerState,
    lr: f64,
    frozen: &BTreeSet<LayerId>,
) -> Result<BTreeSet<LayerId>> {
    let grad_tensors = grads.tensors();
    for (_, name, g) in &grad_tensors {
        if let Some(i) = g.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric {
                layer: format!("gradient of {name} (element {i} is {})", g.data[i]),
            });
        }
    }
    let mu = state.momentum;
    let mut p_tensors = params.tensors_mut();
    let mut v_tensors = state.velocity.tensors_mut();
    if p_tensors.len() != grad_tensors.len() || v_tensors.len() != grad_tensors.len() {
        return Err(Error::Shape("parameter, gradient and momentum sets differ".into()));
    }
    let mut updated = BTreeSet::new();
    for ((p, v), g) in p_tensors.iter_mut().zip(v_tensors.iter_mut()).zip(&grad_tensors) {
        if frozen.contains(&p.0) {
            continue;
        }
        if p.2.shape != g.2.shape || v.2.shape != g.2.shape {
            return Err(Error::Shape(format!("{}: {:?} vs {:?}", p.1, p.2.shape, g.2.shape)));
        }
        let mut changed = false;
        for ((pi, vi), gi) in p.2.data.iter_mut().zip(v.2.data.iter_mut()).zip(&g.2.data) {
            *vi = mu * *vi + gi;
            let next = *pi - lr * *vi;
            changed |= next.to_bits() != pi.to_bits();
            *pi = next;
        }
        if changed {
            updated.insert(p.0);
        }
    }
    Ok(updated)
}

/// Sums micro-batch gradients weighted by their sample counts; [`GradAccumulator::take`] yields
/// the per-sample mean over the window and resets it.
#[derive(Debug, Clone)]
pub struct GradAccumulator {
    sum: ModelParams,
    loss_sum: f64,
    samples: usize,
    micro_batches: usize,
}

impl GradAccumulator {
    pub fn new(like: &ModelParams) -> Self {
        GradAccumulator {
            sum: like.zeros_like(),
            loss_sum: 0.0,
            samples: 0,
            micro_batches: 0,
        }
    }

    /// `grad` and `loss` are means over the `samples` items of one micro-batch.
    pub fn add(&mut self, grad: &ModelParams, loss: f64, samples: usize) {
        let w = samples as f64;
        for ((_, _, acc), (_, _, g)) in self.sum.tensors_mut().into_iter().zip(grad.tensors()) {
            for (a, x) in acc.data.iter_mut().zip(&g.data) {
                *a += w * x;
            }
        }
        self.loss_sum += w * loss;
        self.samples += samples;
        self.micro_batches += 1;
    }

    pub fn micro_batches(&self) -> usize {
        self.micro_batches
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    /// Mean gradient and mean loss over the window, or `None` if it is empty.
    pub fn take(&mut self) -> Option<(ModelParams, f64)> {
        if self.samples == 0 {
            return None;
        }
        let n = self.samples as f64;
        let mut mean = self.sum.zeros_like();
        std::mem::swap(&mut mean, &mut self.sum);
        for (_, _, t) in mean.tensors_mut() {
            t.data.iter_mut().for_each(|g| *g /= n);
        }
        let loss = self.loss_sum / n;
        self.loss_sum = 0.0;
        self.samples = 0;
        self.micro_batches = 0;
        Some((mean, loss))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RegressionLoss {
    #[default]
    L1,
    Mse,
}

impl std::str::FromStr for RegressionLoss {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "l1" => Ok(RegressionLoss::L1),
            "mse" => Ok(RegressionLoss::Mse),
            other => Err(Error::invalid(format!("unknown regression loss {other:?}"))),
        }
    }
}

impl std::fmt::Display for RegressionLoss {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            RegressionLoss::L1 => "l1",
            RegressionLoss::Mse => "mse",
        })
    }
}

/// Training criterion. Targets are always MOS values; the classifier maps them to classes.
#[derive(Debug, Clone, PartialEq)]
pub enum Objective {
    Regression(RegressionLoss),
    /// Cross-entropy weighted per class (33 weights).
    Classification(Vec<f64>),
}

impl Objective {
    /// Batch-mean loss and its gradient with respect to the model outputs.
    pub fn evaluate(&self, outputs: &[f64], targets: &[f64]) -> Result<(f64, Vec<f64>)> {
        match self {
            Objective::Regression(RegressionLoss::L1) => l1_loss(outputs, targets).map(|l| (l.loss, l.grad)),
            Objective::Regression(RegressionLoss::Mse) => mse_loss(outputs, targets).map(|l| (l.loss, l.grad)),
            Objective::Classification(weights) => {
                let classes = targets.iter().map(|&m| mos_to_class(m)).collect::<Result<Vec<_>>>()?;
                let ce = cross_entropy(outputs, &classes, weights)?;
                Ok((ce.loss, ce.grad))
            }
        }
    }
}

/// Forward, loss and backward for one batch. The gradient is the batch mean.
pub fn batch_gradient(
    model: &Model,
    batch: &PaddedBatch,
    targets: &[f64],
    objective: &Objective,
    rng: &mut impl Rng,
) -> Result<(f64, ModelParams)> {
    let (outputs, trace) = forward(model, batch, Mode::Train, rng)?;
    let (loss, grad_out) = objective.evaluate(&outputs, targets)?;
    let grads = backward(model, &trace, &grad_out)?;
    Ok((loss, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_model() -> Model {
        let cfg = ModelConfig {
            lstm_hidden: 4,
            dense_hidden: 3,
            dropout_enabled: false,
            ..ModelConfig::regression(3)
        };
        Model::init(cfg, 5).unwrap()
    }

    fn random_batch(n: usize, rng: &mut ChaCha8Rng) -> (PaddedBatch, Vec<f64>) {
        let lengths: Vec<usize> = (0..n).map(|_| rng.random_range(1..6)).collect();
        let rows: Vec<Vec<f64>> = lengths
            .iter()
            .map(|&l| (0..l * 3).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let targets = (0..n).map(|_| rng.random_range(1.0..5.0)).collect();
        (PaddedBatch::from_rows(&rows, &lengths, 3).unwrap(), targets)
    }

    #[test]
    fn schedule_values() {
        let s = CyclicalLr::default();
        for (it, lr) in [(0, 0.0005), (50, 0.00275), (100, 0.005), (150, 0.00275), (200, 0.0005)] {
            assert_relative_eq!(cyclical_lr(&s, it), lr, max_relative = 1e-12);
        }
        assert!(CyclicalLr::new(0.01, 0.001, 200).is_err());
        assert!(CyclicalLr::new(0.001, 0.01, 201).is_err());
    }

    #[test]
    fn zero_lr_and_plain_sgd() {
        let m = tiny_model();
        let mut grads = m.params.zeros_like();
        for (_, _, t) in grads.tensors_mut() {
            t.data.iter_mut().enumerate().for_each(|(i, g)| *g = (i as f64 * 0.37).sin());
        }
        let mut p = m.params.clone();
        let mut st = OptimizerState::new(&p, 0.9);
        let updated = sgd_momentum_step(&mut p, &grads, &mut st, 0.0, &BTreeSet::new()).unwrap();
        assert_eq!(p, m.params);
        assert!(updated.is_empty());

        let mut p = m.params.clone();
        let mut st = OptimizerState::new(&p, 0.0);
        sgd_momentum_step(&mut p, &grads, &mut st, 0.1, &BTreeSet::new()).unwrap();
        sgd_momentum_step(&mut p, &grads, &mut st, 0.1, &BTreeSet::new()).unwrap();
        for ((_, _, a), ((_, _, b), (_, _, g))) in p.tensors().iter().zip(m.params.tensors().iter().zip(grads.tensors())) {
            for ((x, y), z) in a.data.iter().zip(&b.data).zip(&g.data) {
                assert_relative_eq!(*x, y - 0.2 * z, epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn momentum_accumulates_velocity() {
        let m = tiny_model();
        let mut grads = m.params.zeros_like();
        grads.output.bias.data[0] = 1.0;
        let mut p = m.params.clone();
        let mut st = OptimizerState::new(&p, 0.9);
        sgd_momentum_step(&mut p, &grads, &mut st, 1.0, &BTreeSet::new()).unwrap();
        let updated = sgd_momentum_step(&mut p, &grads, &mut st, 1.0, &BTreeSet::new()).unwrap();
        // velocities 1 then 1.9
        assert_relative_eq!(p.output.bias.data[0], m.params.output.bias.data[0] - 2.9, epsilon = 1e-12);
        assert_eq!(updated, BTreeSet::from([LayerId::Output]));
    }

    #[test]
    fn frozen_layers_stay_bit_identical() {
        let m = tiny_model();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let frozen = BTreeSet::from([LayerId::Projection, LayerId::Lstm(1)]);
        let mut p = m.params.clone();
        let mut st = OptimizerState::new(&p, 0.9);
        let model = m.clone();
        for _ in 0..100 {
            let (batch, targets) = random_batch(4, &mut rng);
            let cur = Model { params: p.clone(), ..model.clone() };
            let (_, g) = batch_gradient(&cur, &batch, &targets, &Objective::Regression(RegressionLoss::L1), &mut rng).unwrap();
            let updated = sgd_momentum_step(&mut p, &g, &mut st, 0.01, &frozen).unwrap();
            assert!(updated.is_disjoint(&frozen));
        }
        assert_eq!(p.projection, m.params.projection);
        assert_eq!(p.lstm[1], m.params.lstm[1]);
        assert!(st.velocity.projection.weight.data.iter().all(|v| *v == 0.0));
        assert_ne!(p.lstm[0], m.params.lstm[0]);
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let m = tiny_model();
        let mut grads = m.params.zeros_like();
        grads.dense.weight.data[2] = f64::NAN;
        let mut p = m.params.clone();
        let mut st = OptimizerState::new(&p, 0.9);
        let err = sgd_momentum_step(&mut p, &grads, &mut st, 0.1, &BTreeSet::new()).unwrap_err();
        assert!(err.to_string().contains("dense"), "{err}");
        assert_eq!(p, m.params);
    }

    #[test]
    fn accumulation_matches_large_batch() {
        let m = tiny_model();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let lengths: Vec<usize> = (0..24).map(|_| rng.random_range(1..6)).collect();
        let rows: Vec<Vec<f64>> = lengths
            .iter()
            .map(|&l| (0..l * 3).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let targets: Vec<f64> = (0..24).map(|_| rng.random_range(1.0..5.0)).collect();
        let obj = Objective::Regression(RegressionLoss::Mse);
        let full = PaddedBatch::from_rows(&rows, &lengths, 3).unwrap();
        let (full_loss, full_grad) = batch_gradient(&m, &full, &targets, &obj, &mut rng).unwrap();

        let mut acc = GradAccumulator::new(&m.params);
        // uneven micro-batches: 8, 8, 5, 3
        for r in [0..8, 8..16, 16..21, 21..24] {
            let b = PaddedBatch::from_rows(&rows[r.clone()], &lengths[r.clone()], 3).unwrap();
            let (l, g) = batch_gradient(&m, &b, &targets[r.clone()], &obj, &mut rng).unwrap();
            acc.add(&g, l, r.len());
        }
        assert_eq!(acc.micro_batches(), 4);
        let (g, l) = acc.take().unwrap();
        assert_relative_eq!(l, full_loss, max_relative = 1e-12);
        for ((_, _, a), (_, _, b)) in g.tensors().iter().zip(full_grad.tensors()) {
            for (x, y) in a.data.iter().zip(&b.data) {
                assert!((x - y).abs() <= 1e-10 * x.abs().max(y.abs()).max(1e-12));
            }
        }
        assert!(acc.take().is_none());
        assert_eq!(acc.micro_batches(), 0);
    }

    #[test]
    fn clipping_bounds_norm() {
        let m = tiny_model();
        let mut g = m.params.zeros_like();
        g.output.bias.data[0] = 3.0;
        g.dense.bias.data[0] = 4.0;
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert_relative_eq!(g.output.bias.data[0], 0.6, epsilon = 1e-15);
        assert_relative_eq!(clip_grad_norm(&mut g, 10.0), 1.0, epsilon = 1e-15);
    }
}
