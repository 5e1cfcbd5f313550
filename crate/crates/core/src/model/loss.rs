use log::warn;

use crate::{Error, Result};

/// Probabilities below this are clamped before taking the log.
pub const PROB_FLOOR: f64 = 1e-12;

/// A batch-mean loss and its gradient with respect to the model outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub loss: f64,
    pub grad: Vec<f64>,
}

fn check_lengths(pred: &[f64], target: &[f64]) -> Result<()> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(Error::Shape(format!(
            "{} predictions for {} targets",
            pred.len(),
            target.len()
        )));
    }
    Ok(())
}

/// Mean absolute error; the subgradient at exact equality is 0.
pub fn l1_loss(pred: &[f64], target: &[f64]) -> Result<LossValue> {
    check_lengths(pred, target)?;
    let n = pred.len() as f64;
    let loss = pred.iter().zip(target).map(|(p, t)| (p - t).abs()).sum::<f64>() / n;
    let grad = pred
        .iter()
        .zip(target)
        .map(|(p, t)| match p.partial_cmp(t) {
            Some(std::cmp::Ordering::Greater) => 1.0 / n,
            Some(std::cmp::Ordering::Less) => -1.0 / n,
            _ => 0.0,
        })
        .collect();
    Ok(LossValue { loss, grad })
}

pub fn mse_loss(pred: &[f64], target: &[f64]) -> Result<LossValue> {
    check_lengths(pred, target)?;
    let n = pred.len() as f64;
    let loss = pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / n;
    let grad = pred.iter().zip(target).map(|(p, t)| 2.0 * (p - t) / n).collect();
    Ok(LossValue { loss, grad })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrossEntropy {
    pub loss: f64,
    /// Gradient with respect to the probabilities, `B×C`.
    pub grad: Vec<f64>,
    /// Number of target probabilities that had to be clamped to [`PROB_FLOOR`].
    pub clamped: usize,
}

/// Class-weighted categorical cross-entropy, `−(1/B) Σ w[y]·ln p[y]`. `classes` are 1-based.
pub fn cross_entropy(probs: &[f64], classes: &[usize], weights: &[f64]) -> Result<CrossEntropy> {
    let c = weights.len();
    let nb = classes.len();
    if nb == 0 || probs.len() != nb * c {
        return Err(Error::Shape(format!(
            "{} probabilities for {nb} samples of {c} classes",
            probs.len()
        )));
    }
    let mut loss = 0.0;
    let mut grad = vec![0.0; probs.len()];
    let mut clamped = 0;
    for (b, &y) in classes.iter().enumerate() {
        if !(1..=c).contains(&y) {
            return Err(Error::invalid(format!("class {y} outside 1..={c}")));
        }
        let p = probs[b * c + y - 1];
        let w = weights[y - 1];
        let pc = if p < PROB_FLOOR {
            clamped += 1;
            PROB_FLOOR
        } else {
            p
        };
        loss -= w * pc.ln();
        grad[b * c + y - 1] = -w / (nb as f64 * pc);
    }
    if clamped > 0 {
        warn!("cross-entropy clamped {clamped} target probabilities to {PROB_FLOOR:e}");
    }
    Ok(CrossEntropy {
        loss: loss / nb as f64,
        grad,
        clamped,
    })
}
