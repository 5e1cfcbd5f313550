use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use log::{info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::data::{predict, LabeledSet};
use super::history::{History, HistoryRow};
use super::{
    batch_gradient, clip_grad_norm, sgd_momentum_step, CyclicalLr, GradAccumulator, LrSchedule, Objective,
    OptimizerState, RegressionLoss,
};
use crate::batching::plan_sorted;
use crate::dataset::{class_weights, mos_to_class};
use crate::model::{cross_entropy, transfer_from_regression, Head, LayerId, Model, ModelParams};
use crate::{Error, Result};

/// Settings shared by every procedure, plus the regression phase itself.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainRunConfig {
    pub seed: u64,
    pub micro_batch: usize,
    pub accumulation_steps: usize,
    pub momentum: f64,
    pub schedule: CyclicalLr,
    pub loss: RegressionLoss,
    /// Validation evaluations without improvement tolerated before stopping.
    pub patience: usize,
    pub max_epochs: usize,
    pub max_updates: Option<usize>,
    pub max_restarts: usize,
    /// Restart when the lowest validation prediction is above this...
    pub coverage_low: f64,
    /// ...or the highest is below this.
    pub coverage_high: f64,
    pub clip_norm: Option<f64>,
    /// Stop as soon as the validation loss reaches this value.
    pub target_val_loss: Option<f64>,
    pub eval_batch: usize,
}

impl Default for TrainRunConfig {
    fn default() -> Self {
        TrainRunConfig {
            seed: 0,
            micro_batch: 8,
            accumulation_steps: 10,
            momentum: 0.9,
            schedule: CyclicalLr::default(),
            loss: RegressionLoss::L1,
            patience: 5,
            max_epochs: 200,
            max_updates: None,
            max_restarts: 3,
            coverage_low: 1.5,
            coverage_high: 4.5,
            clip_norm: None,
            target_val_loss: None,
            eval_batch: 32,
        }
    }
}

impl TrainRunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.micro_batch == 0 || self.accumulation_steps == 0 || self.eval_batch == 0 {
            return Err(Error::invalid("batch sizes and accumulation steps must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if let Some(c) = self.clip_norm {
            if c.is_nan() || c <= 0.0 {
                return Err(Error::invalid(format!("clip norm {c} must be positive")));
            }
        }
        self.schedule.validate()
    }

    pub fn regression_phase(&self) -> PhaseSpec {
        PhaseSpec {
            name: "regression".into(),
            frozen: BTreeSet::new(),
            micro_batch: self.micro_batch,
            accumulation: self.accumulation_steps,
            lr: LrSchedule::Cyclical(self.schedule),
            max_epochs: self.max_epochs,
            max_updates: self.max_updates,
            patience: self.patience,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhaseSpec {
    pub name: String,
    pub frozen: BTreeSet<LayerId>,
    pub micro_batch: usize,
    pub accumulation: usize,
    pub lr: LrSchedule,
    pub max_epochs: usize,
    pub max_updates: Option<usize>,
    pub patience: usize,
}

impl PhaseSpec {
    /// Out-of-domain fine-tuning: constant lr 0.0001, batch 10.
    pub fn finetune(run: &TrainRunConfig) -> Self {
        PhaseSpec {
            name: "finetune".into(),
            frozen: BTreeSet::new(),
            micro_batch: 10,
            accumulation: 1,
            lr: LrSchedule::Constant(0.0001),
            max_epochs: run.max_epochs,
            max_updates: run.max_updates,
            patience: run.patience,
        }
    }

    pub fn validate(&self, model: &Model) -> Result<()> {
        if self.micro_batch == 0 || self.accumulation == 0 {
            return Err(Error::invalid(format!("phase {}: batch size must be positive", self.name)));
        }
        let layers = model.config.layers();
        if let Some(l) = self.frozen.iter().find(|l| !layers.contains(l)) {
            return Err(Error::invalid(format!("phase {}: no layer {l} to freeze", self.name)));
        }
        self.lr.validate()
    }
}

/// The three transfer phases: projection frozen at lr 0.0005 and batch 100; batch ×1.5 and lr ×0.2;
/// everything unfrozen at batch 8.
pub fn classification_phases(run: &TrainRunConfig) -> Vec<PhaseSpec> {
    let base_lr = 0.0005;
    let base_batch = 100;
    let frozen = BTreeSet::from([LayerId::Projection]);
    let phase = |name: &str, frozen: &BTreeSet<LayerId>, batch, lr| PhaseSpec {
        name: name.into(),
        frozen: frozen.clone(),
        micro_batch: batch,
        accumulation: 1,
        lr: LrSchedule::Constant(lr),
        max_epochs: run.max_epochs,
        max_updates: run.max_updates,
        patience: run.patience,
    };
    vec![
        phase("phase1", &frozen, base_batch, base_lr),
        phase("phase2", &frozen, base_batch * 3 / 2, base_lr * 0.2),
        phase("phase3", &BTreeSet::new(), 8, base_lr * 0.2),
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    EarlyStopped,
    MaxEpochs,
    MaxUpdates,
    TargetReached,
    /// Non-finite loss, gradient or activation; the best earlier parameters are kept.
    Diverged,
}

impl fmt::Display for StopReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StopReason::EarlyStopped => "early-stopped",
            StopReason::MaxEpochs => "max-epochs",
            StopReason::MaxUpdates => "max-updates",
            StopReason::TargetReached => "target-reached",
            StopReason::Diverged => "diverged",
        })
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters with the best validation loss seen.
    pub model: Model,
    pub best_val_loss: Option<f64>,
    pub history: History,
    pub stop: StopReason,
    pub restarts: usize,
}

/// Mean validation loss: L1 for regression, weighted cross-entropy for classification.
fn validation_loss(model: &Model, val: &LabeledSet<'_>, objective: &Objective, eval_batch: usize) -> Result<f64> {
    let outputs = predict(model, val, eval_batch)?;
    let labels = val.dataset.labels()?;
    match objective {
        Objective::Regression(_) => {
            Ok(outputs.iter().zip(&labels).map(|(o, l)| (o[0] - l.mean).abs()).sum::<f64>() / labels.len() as f64)
        }
        Objective::Classification(weights) => {
            let classes = labels.iter().map(|l| mos_to_class(l.mean)).collect::<Result<Vec<_>>>()?;
            let flat: Vec<f64> = outputs.concat();
            Ok(cross_entropy(&flat, &classes, weights)?.loss)
        }
    }
}

fn is_numeric(e: &Error) -> bool {
    matches!(e, Error::Numeric { .. })
}

struct PhaseRunner<'a> {
    spec: &'a PhaseSpec,
    run: &'a TrainRunConfig,
    objective: &'a Objective,
    train: LabeledSet<'a>,
    val: LabeledSet<'a>,
    lengths: BTreeMap<String, usize>,
    targets: HashMap<String, f64>,
    model: Model,
    opt: OptimizerState,
    iteration: usize,
    epoch: usize,
    best: Option<(f64, ModelParams)>,
    since_best: usize,
    dropout_rng: ChaCha8Rng,
    plan_rng: ChaCha8Rng,
}

impl<'a> PhaseRunner<'a> {
    #[allow(clippy::too_many_arguments)]
    fn new(
        model: Model,
        spec: &'a PhaseSpec,
        run: &'a TrainRunConfig,
        objective: &'a Objective,
        train: LabeledSet<'a>,
        val: LabeledSet<'a>,
        phase_index: u64,
    ) -> Result<Self> {
        spec.validate(&model)?;
        if train.dataset.is_empty() || val.dataset.is_empty() {
            return Err(Error::invalid("training and validation splits must be non-empty"));
        }
        let mut dropout_rng = ChaCha8Rng::seed_from_u64(run.seed);
        dropout_rng.set_stream(2 * phase_index + 1);
        let mut plan_rng = ChaCha8Rng::seed_from_u64(run.seed);
        plan_rng.set_stream(2 * phase_index);
        Ok(PhaseRunner {
            spec,
            run,
            objective,
            lengths: train.lengths()?,
            targets: train.targets()?,
            train,
            val,
            opt: OptimizerState::new(&model.params, run.momentum),
            model,
            iteration: 0,
            epoch: 0,
            best: None,
            since_best: 0,
            dropout_rng,
            plan_rng,
        })
    }

    fn update(&mut self, acc: &mut GradAccumulator, history: &mut History) -> Result<bool> {
        let Some((mut grad, loss)) = acc.take() else {
            return Ok(false);
        };
        if let Some(max) = self.run.clip_norm {
            clip_grad_norm(&mut grad, max);
        }
        let lr = self.spec.lr.at(self.iteration);
        let updated = sgd_momentum_step(&mut self.model.params, &grad, &mut self.opt, lr, &self.spec.frozen)?;
        history.rows.push(HistoryRow {
            phase: self.spec.name.clone(),
            epoch: self.epoch,
            iteration: self.iteration,
            lr,
            batch_size: self.spec.micro_batch,
            accumulation: self.spec.accumulation,
            train_loss: loss,
            val_loss: None,
            frozen: self.spec.frozen.clone(),
            updated,
        });
        self.iteration += 1;
        Ok(self.spec.max_updates.is_some_and(|m| self.iteration >= m))
    }

    /// One pass over the training split. Returns whether the update budget ran out.
    fn epoch(&mut self, history: &mut History) -> Result<bool> {
        let plan = plan_sorted(&self.lengths, self.spec.micro_batch, self.plan_rng.random())?;
        let mut acc = GradAccumulator::new(&self.model.params);
        for ids in &plan.batches {
            let batch = self.train.batch(ids)?;
            let targets: Vec<f64> = ids.iter().map(|id| self.targets[id]).collect();
            let (loss, grad) = batch_gradient(&self.model, &batch, &targets, self.objective, &mut self.dropout_rng)?;
            if !loss.is_finite() {
                return Err(Error::Numeric { layer: "loss".into() });
            }
            acc.add(&grad, loss, ids.len());
            if acc.micro_batches() == self.spec.accumulation && self.update(&mut acc, history)? {
                return Ok(true);
            }
        }
        // a short trailing window is applied with its own sample mean
        self.update(&mut acc, history)
    }

    fn run(&mut self, history: &mut History) -> Result<StopReason> {
        loop {
            if self.epoch >= self.spec.max_epochs {
                return Ok(StopReason::MaxEpochs);
            }
            if self.spec.max_updates.is_some_and(|m| self.iteration >= m) {
                return Ok(StopReason::MaxUpdates);
            }
            let budget_spent = match self.epoch(history) {
                Ok(b) => b,
                Err(e) if is_numeric(&e) => {
                    warn!("{}: diverged in epoch {}: {e}", self.spec.name, self.epoch);
                    return Ok(StopReason::Diverged);
                }
                Err(e) => return Err(e),
            };
            let val = match validation_loss(&self.model, &self.val, self.objective, self.run.eval_batch) {
                Ok(v) if v.is_finite() => v,
                Ok(_) => return Ok(StopReason::Diverged),
                Err(e) if is_numeric(&e) => return Ok(StopReason::Diverged),
                Err(e) => return Err(e),
            };
            if let Some(last) = history.rows.last_mut() {
                last.val_loss = Some(val);
            }
            info!("{} epoch {} val_loss {val:.5}", self.spec.name, self.epoch);
            self.epoch += 1;
            if self.best.as_ref().is_none_or(|(b, _)| val < *b) {
                self.best = Some((val, self.model.params.clone()));
                self.since_best = 0;
            } else {
                self.since_best += 1;
            }
            if self.run.target_val_loss.is_some_and(|t| val <= t) {
                return Ok(StopReason::TargetReached);
            }
            if budget_spent {
                return Ok(StopReason::MaxUpdates);
            }
            if self.since_best > self.spec.patience {
                return Ok(StopReason::EarlyStopped);
            }
        }
    }

    fn best_model(&self) -> Model {
        match &self.best {
            Some((_, p)) => Model {
                config: self.model.config.clone(),
                params: p.clone(),
            },
            None => self.model.clone(),
        }
    }
}

/// Regression training with early stopping and the coverage restart: when the best model's
/// validation predictions miss either end of the scale, training resumes from the current
/// parameters with the optimizer state and schedule position kept.
pub fn train_regression(
    model: Model,
    train: LabeledSet<'_>,
    val: LabeledSet<'_>,
    run: &TrainRunConfig,
) -> Result<TrainOutcome> {
    run.validate()?;
    if model.config.head != Head::Regression {
        return Err(Error::invalid("train_regression needs a regression model"));
    }
    let spec = run.regression_phase();
    let objective = Objective::Regression(run.loss);
    let mut runner = PhaseRunner::new(model, &spec, run, &objective, train, val, 0)?;
    let mut history = History::default();
    let mut restarts = 0;
    let stop = loop {
        let stop = runner.run(&mut history)?;
        if stop != StopReason::EarlyStopped || restarts >= run.max_restarts {
            break stop;
        }
        let preds = predict(&runner.best_model(), &val, run.eval_batch)?;
        let lo = preds.iter().map(|p| p[0]).fold(f64::INFINITY, f64::min);
        let hi = preds.iter().map(|p| p[0]).fold(f64::NEG_INFINITY, f64::max);
        if lo <= run.coverage_low && hi >= run.coverage_high {
            break stop;
        }
        restarts += 1;
        info!("predictions span [{lo:.3}, {hi:.3}]; restart {restarts} of {}", run.max_restarts);
        runner.since_best = 0;
    };
    Ok(TrainOutcome {
        model: runner.best_model(),
        best_val_loss: runner.best.as_ref().map(|b| b.0),
        history,
        stop,
        restarts,
    })
}

/// Transfers the trunk of a regression model to a classifier and trains it through `phases`
/// with class-weighted cross-entropy. Each phase starts from the best parameters of the previous
/// one with fresh optimizer state.
pub fn train_classification(
    source: &Model,
    train: LabeledSet<'_>,
    val: LabeledSet<'_>,
    phases: &[PhaseSpec],
    run: &TrainRunConfig,
) -> Result<TrainOutcome> {
    run.validate()?;
    if phases.is_empty() {
        return Err(Error::invalid("classification training needs at least one phase"));
    }
    let cfg = source.config.with_head(Head::Classification);
    let mut model = transfer_from_regression(source, &cfg, run.seed)?;
    let objective = Objective::Classification(class_weights(train.dataset)?);
    let mut history = History::default();
    let mut best: Option<(f64, Model)> = None;
    let mut stop = StopReason::MaxEpochs;
    for (i, spec) in phases.iter().enumerate() {
        let mut runner = PhaseRunner::new(model, spec, run, &objective, train, val, i as u64 + 1)?;
        stop = runner.run(&mut history)?;
        info!("{} stopped: {stop}", spec.name);
        model = runner.best_model();
        if let Some((v, _)) = runner.best {
            if best.as_ref().is_none_or(|(b, _)| v < *b) {
                best = Some((v, model.clone()));
            }
        }
        if stop == StopReason::Diverged {
            break;
        }
    }
    let (best_val_loss, model) = match best {
        Some((v, m)) => (Some(v), m),
        None => (None, model),
    };
    Ok(TrainOutcome {
        model,
        best_val_loss,
        history,
        stop,
        restarts: 0,
    })
}

/// Continues regression training on another domain, keeping the incoming parameters if no epoch
/// beats them on validation. Zero epochs returns the input unchanged.
pub fn finetune(
    model: Model,
    train: LabeledSet<'_>,
    val: LabeledSet<'_>,
    spec: &PhaseSpec,
    run: &TrainRunConfig,
) -> Result<TrainOutcome> {
    run.validate()?;
    if model.config.head != Head::Regression {
        return Err(Error::invalid("finetune needs a regression model"));
    }
    let objective = Objective::Regression(run.loss);
    let mut runner = PhaseRunner::new(model, spec, run, &objective, train, val, 0)?;
    if spec.max_epochs > 0 {
        // the incoming model is a candidate, so fine-tuning never returns something worse on val
        let v = validation_loss(&runner.model, &val, &objective, run.eval_batch)?;
        runner.best = Some((v, runner.model.params.clone()));
    }
    let mut history = History::default();
    let stop = runner.run(&mut history)?;
    Ok(TrainOutcome {
        model: runner.best_model(),
        best_val_loss: runner.best.as_ref().map(|b| b.0),
        history,
        stop,
        restarts: 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{Dataset, FeatureStore};
    use crate::model::ModelConfig;
    use crate::synthetic::{SyntheticSpec, SyntheticSet};

    fn fixture(n: usize, seed: u64) -> SyntheticSet {
        SyntheticSpec {
            utterances: n,
            dim: 4,
            min_frames: 3,
            max_frames: 8,
            ..SyntheticSpec::default()
        }
        .generate(seed)
        .unwrap()
    }

    fn small_model(seed: u64) -> Model {
        let cfg = ModelConfig {
            lstm_hidden: 6,
            dense_hidden: 5,
            ..ModelConfig::regression(4)
        };
        Model::init(cfg, seed).unwrap()
    }

    fn set<'a>(d: &'a Dataset, f: &'a FeatureStore) -> LabeledSet<'a> {
        LabeledSet::new(d, f)
    }

    fn quick_run() -> TrainRunConfig {
        TrainRunConfig {
            max_epochs: 4,
            micro_batch: 4,
            accumulation_steps: 2,
            max_restarts: 0,
            ..TrainRunConfig::default()
        }
    }

    #[test]
    fn regression_history_is_consistent() {
        let s = fixture(20, 1);
        let run = quick_run();
        let out = train_regression(small_model(1), set(&s.dataset, &s.features), set(&s.dataset, &s.features), &run).unwrap();
        // 20 samples in micro-batches of 4 → 5 per epoch → windows of 2, 2, 1
        assert_eq!(out.history.len(), 3 * 4);
        assert_eq!(out.stop, StopReason::MaxEpochs);
        for (i, r) in out.history.rows.iter().enumerate() {
            assert_eq!(r.iteration, i);
            assert_eq!(r.lr, run.schedule.lr(i));
            assert_eq!(r.val_loss.is_some(), i % 3 == 2);
        }
        let best = out.history.rows.iter().filter_map(|r| r.val_loss).fold(f64::INFINITY, f64::min);
        assert_eq!(out.best_val_loss, Some(best));
    }

    #[test]
    fn training_is_deterministic() {
        let s = fixture(16, 2);
        let run = quick_run();
        let a = train_regression(small_model(3), set(&s.dataset, &s.features), set(&s.dataset, &s.features), &run).unwrap();
        let b = train_regression(small_model(3), set(&s.dataset, &s.features), set(&s.dataset, &s.features), &run).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.model, b.model);
        let c = train_regression(
            small_model(3),
            set(&s.dataset, &s.features),
            set(&s.dataset, &s.features),
            &TrainRunConfig { seed: 9, ..run },
        )
        .unwrap();
        assert_ne!(a.history, c.history);
    }

    #[test]
    fn patience_zero_stops_at_first_non_improvement() {
        let s = fixture(12, 3);
        let run = TrainRunConfig {
            patience: 0,
            max_epochs: 50,
            schedule: CyclicalLr::new(0.5, 0.5, 2).unwrap(),
            ..quick_run()
        };
        let out = train_regression(small_model(2), set(&s.dataset, &s.features), set(&s.dataset, &s.features), &run).unwrap();
        let vals: Vec<f64> = out.history.rows.iter().filter_map(|r| r.val_loss).collect();
        if out.stop == StopReason::EarlyStopped {
            let last = vals.len() - 1;
            assert!(vals[last] >= vals[..last].iter().copied().fold(f64::INFINITY, f64::min));
            assert!(vals[..last].windows(2).all(|w| w[1] < w[0]));
        } else {
            assert_eq!(out.stop, StopReason::Diverged);
        }
    }

    #[test]
    fn coverage_restart_runs_until_budget() {
        let s = fixture(12, 4);
        // a narrow-target fixture can never span [1.5, 4.5], so every early stop restarts
        let run = TrainRunConfig {
            patience: 0,
            max_epochs: 100,
            max_restarts: 2,
            coverage_low: f64::NEG_INFINITY,
            ..quick_run()
        };
        let out = train_regression(small_model(5), set(&s.dataset, &s.features), set(&s.dataset, &s.features), &run).unwrap();
        assert_eq!(out.restarts, 2);
        assert_eq!(out.stop, StopReason::EarlyStopped);
    }

    #[test]
    fn update_budget_is_respected() {
        let s = fixture(20, 5);
        let run = TrainRunConfig {
            max_updates: Some(7),
            ..quick_run()
        };
        let out = train_regression(small_model(1), set(&s.dataset, &s.features), set(&s.dataset, &s.features), &run).unwrap();
        assert_eq!(out.history.len(), 7);
        assert_eq!(out.stop, StopReason::MaxUpdates);
        assert!(out.history.rows.last().unwrap().val_loss.is_some());
    }

    #[test]
    fn divergence_keeps_last_good_parameters() {
        let s = fixture(12, 6);
        let run = TrainRunConfig {
            schedule: CyclicalLr::new(1e300, 1e300, 2).unwrap(),
            max_epochs: 5,
            ..quick_run()
        };
        let init = small_model(4);
        let out = train_regression(init.clone(), set(&s.dataset, &s.features), set(&s.dataset, &s.features), &run).unwrap();
        assert_eq!(out.stop, StopReason::Diverged);
        assert!(out.model.params.is_finite());
    }

    #[test]
    fn classification_phases_follow_the_schedule() {
        let run = TrainRunConfig::default();
        let p = classification_phases(&run);
        assert_eq!(p.len(), 3);
        assert_eq!((p[0].micro_batch, p[0].lr), (100, LrSchedule::Constant(0.0005)));
        assert_eq!(p[1].micro_batch, 150);
        assert!(matches!(p[1].lr, LrSchedule::Constant(lr) if (lr - 0.0001).abs() < 1e-18));
        assert_eq!(p[2].micro_batch, 8);
        assert!(p[0].frozen.contains(&LayerId::Projection));
        assert!(p[2].frozen.is_empty());
    }

    #[test]
    fn classification_freezes_projection_in_phase_one() {
        let s = fixture(24, 7);
        let run = TrainRunConfig { max_epochs: 2, ..quick_run() };
        let mut phases = classification_phases(&run);
        for p in &mut phases {
            p.micro_batch = p.micro_batch.min(10);
        }
        let reg = small_model(8);
        let out = train_classification(&reg, set(&s.dataset, &s.features), set(&s.dataset, &s.features), &phases, &run)
            .unwrap();
        assert_eq!(out.model.config.head, Head::Classification);
        for r in &out.history.rows {
            if r.phase != "phase3" {
                assert!(!r.updated.contains(&LayerId::Projection));
            }
        }
        assert!(out
            .history
            .rows
            .iter()
            .any(|r| r.phase == "phase3" && r.updated.contains(&LayerId::Projection)));
    }

    #[test]
    fn finetune_zero_epochs_is_identity() {
        let s = fixture(8, 8);
        let run = TrainRunConfig { max_epochs: 0, ..quick_run() };
        let m = small_model(9);
        let spec = PhaseSpec::finetune(&run);
        assert_eq!((spec.micro_batch, spec.lr), (10, LrSchedule::Constant(0.0001)));
        let out = finetune(m.clone(), set(&s.dataset, &s.features), set(&s.dataset, &s.features), &spec, &run).unwrap();
        assert_eq!(out.model, m);
        assert!(out.history.is_empty());
    }

    #[test]
    fn finetune_on_source_domain_does_not_hurt() {
        let s = fixture(24, 10);
        let held_out = fixture(12, 11);
        let run = TrainRunConfig { max_epochs: 6, ..quick_run() };
        let base = train_regression(small_model(1), set(&s.dataset, &s.features), set(&s.dataset, &s.features), &run)
            .unwrap()
            .model;
        let val = set(&held_out.dataset, &held_out.features);
        let obj = Objective::Regression(RegressionLoss::L1);
        let before = validation_loss(&base, &val, &obj, 8).unwrap();
        let spec = PhaseSpec::finetune(&run);
        let out = finetune(base, set(&s.dataset, &s.features), val, &spec, &run).unwrap();
        let after = validation_loss(&out.model, &val, &obj, 8).unwrap();
        assert!(after <= before + 1e-3, "{before} -> {after}");
    }
}
