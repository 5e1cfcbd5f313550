use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Objective;
use crate::batching::PaddedBatch;
use crate::model::{backward, forward, Mode, Model};
use crate::Result;

/// Largest disagreement between the analytic gradient and central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst_tensor: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

fn loss_at(model: &Model, batch: &PaddedBatch, targets: &[f64], objective: &Objective, seed: u64) -> Result<f64> {
    let (out, _) = forward(model, batch, Mode::Train, &mut ChaCha8Rng::seed_from_u64(seed))?;
    Ok(objective.evaluate(&out, targets)?.0)
}

/// Compares every parameter's analytic gradient with `(L(θ+ε) − L(θ−ε)) / 2ε`. Train mode is used
/// and the dropout generator is reseeded with `seed` for every evaluation, so all passes see the
/// same masks.
pub fn check_gradients(
    model: &Model,
    batch: &PaddedBatch,
    targets: &[f64],
    objective: &Objective,
    seed: u64,
    eps: f64,
    floor: f64,
) -> Result<GradCheckReport> {
    let (out, trace) = forward(model, batch, Mode::Train, &mut ChaCha8Rng::seed_from_u64(seed))?;
    let (_, grad_out) = objective.evaluate(&out, targets)?;
    let grads = backward(model, &trace, &grad_out)?;

    let mut probe = model.clone();
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_error: 0.0,
        worst_tensor: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    let names: Vec<(String, usize)> = model
        .params
        .tensors()
        .iter()
        .map(|(_, name, t)| (name.clone(), t.data.len()))
        .collect();
    let analytic: Vec<Vec<f64>> = grads.tensors().iter().map(|(_, _, t)| t.data.clone()).collect();

    for (k, (name, len)) in names.iter().enumerate() {
        for (i, &a) in analytic[k].iter().enumerate().take(*len) {
            let orig = model.params.tensors()[k].2.data[i];
            probe.params.tensors_mut()[k].2.data[i] = orig + eps;
            let plus = loss_at(&probe, batch, targets, objective, seed)?;
            probe.params.tensors_mut()[k].2.data[i] = orig - eps;
            let minus = loss_at(&probe, batch, targets, objective, seed)?;
            probe.params.tensors_mut()[k].2.data[i] = orig;

            let numeric = (plus - minus) / (2.0 * eps);
            let err = relative_error(a, numeric, floor);
            report.checked += 1;
            if err > report.max_rel_error || report.worst_tensor.is_empty() {
                report = GradCheckReport {
                    max_rel_error: err.max(report.max_rel_error),
                    worst_tensor: name.clone(),
                    worst_index: i,
                    analytic: a,
                    numeric,
                    ..report
                };
            }
        }
    }
    Ok(report)
}
