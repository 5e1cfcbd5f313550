//! Turning raw model outputs into final MOS predictions.
//!
//! The default pipeline is decode → ensemble → correct → quantize → clamp. Both models compress
//! the extremes of the scale, so predictions below `low_threshold` are nudged down and those above
//! `high_threshold` are nudged up before snapping to the rating grid.

use std::fmt;
use std::str::FromStr;

use crate::dataset::{class_to_mos, MAX_MOS, MIN_MOS, NUM_CLASSES};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Decode {
    /// Most probable class; the first one on ties.
    #[default]
    Argmax,
    /// Probability-weighted mean of the class MOS values.
    Expectation,
}

impl fmt::Display for Decode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Decode::Argmax => "argmax",
            Decode::Expectation => "expectation",
        })
    }
}

impl FromStr for Decode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "argmax" => Ok(Decode::Argmax),
            "expectation" => Ok(Decode::Expectation),
            other => Err(Error::invalid(format!("unknown decode mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PostConfig {
    pub resolution: f64,
    pub low_threshold: f64,
    pub high_threshold: f64,
    pub low_delta: f64,
    pub high_delta: f64,
    pub ensemble: bool,
    pub decode: Decode,
    /// Snap to the grid before applying the range correction instead of after.
    pub quantize_before_correct: bool,
}

impl Default for PostConfig {
    fn default() -> Self {
        PostConfig {
            resolution: 0.125,
            low_threshold: 1.3,
            high_threshold: 4.2,
            low_delta: -0.05,
            high_delta: 0.25,
            ensemble: true,
            decode: Decode::Argmax,
            quantize_before_correct: false,
        }
    }
}

impl PostConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.resolution > 0.0 && self.resolution.is_finite()) {
            return Err(Error::invalid(format!("resolution {} must be positive", self.resolution)));
        }
        if !(MIN_MOS < self.low_threshold
            && self.low_threshold < self.high_threshold
            && self.high_threshold < MAX_MOS)
        {
            return Err(Error::invalid(format!(
                "thresholds must satisfy 1 < {} < {} < 5",
                self.low_threshold, self.high_threshold
            )));
        }
        Ok(())
    }
}

/// Clamps to [1, 5] and snaps to the nearest `1 + k·resolution`; exact midpoints round up.
pub fn quantize(pred: f64, resolution: f64) -> Result<f64> {
    if !pred.is_finite() {
        return Err(Error::invalid(format!("cannot quantize {pred}")));
    }
    if !(resolution > 0.0 && resolution.is_finite()) {
        return Err(Error::invalid(format!("resolution {resolution} must be positive")));
    }
    let x = pred.clamp(MIN_MOS, MAX_MOS);
    let top = ((MAX_MOS - MIN_MOS) / resolution + 1e-9).floor();
    let k = ((x - MIN_MOS) / resolution + 0.5).floor().min(top);
    Ok(MIN_MOS + k * resolution)
}

pub fn decode_classification(probs: &[f64], mode: Decode) -> Result<f64> {
    if probs.len() != NUM_CLASSES {
        return Err(Error::invalid(format!(
            "expected {NUM_CLASSES} probabilities, got {}",
            probs.len()
        )));
    }
    if probs.iter().any(|p| !p.is_finite() || *p < 0.0 || *p > 1.0) {
        return Err(Error::invalid("probabilities must lie in [0, 1]"));
    }
    let sum: f64 = probs.iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(Error::invalid(format!("probabilities sum to {sum}")));
    }
    match mode {
        Decode::Argmax => {
            let mut best = 0;
            for (k, &p) in probs.iter().enumerate() {
                if p > probs[best] {
                    best = k;
                }
            }
            class_to_mos(best + 1)
        }
        Decode::Expectation => probs
            .iter()
            .enumerate()
            .map(|(k, &p)| class_to_mos(k + 1).map(|m| p * m))
            .sum(),
    }
}

pub fn ensemble(reg_pred: f64, cls_pred: f64) -> f64 {
    (reg_pred + cls_pred) / 2.0
}

/// Shifts the extremes of the scale outward and clamps to [1, 5].
pub fn correct(pred: f64, cfg: &PostConfig) -> f64 {
    let shifted = if pred < cfg.low_threshold {
        pred + cfg.low_delta
    } else if pred > cfg.high_threshold {
        pred + cfg.high_delta
    } else {
        pred
    };
    shifted.clamp(MIN_MOS, MAX_MOS)
}

/// Combines whichever model outputs are available into the final grid-aligned prediction.
pub fn pipeline(reg: Option<f64>, cls_probs: Option<&[f64]>, cfg: &PostConfig) -> Result<f64> {
    let cls = cls_probs
        .map(|p| decode_classification(p, cfg.decode))
        .transpose()?;
    let combined = match (reg, cls) {
        (Some(r), Some(c)) if cfg.ensemble => ensemble(r, c),
        (Some(r), _) => r,
        (None, Some(c)) => c,
        (None, None) => return Err(Error::invalid("no model output to post-process")),
    };
    if !combined.is_finite() {
        return Err(Error::invalid(format!("non-finite prediction {combined}")));
    }
    let out = if cfg.quantize_before_correct {
        quantize(correct(quantize(combined, cfg.resolution)?, cfg), cfg.resolution)?
    } else {
        quantize(correct(combined, cfg), cfg.resolution)?
    };
    Ok(out.clamp(MIN_MOS, MAX_MOS))
}
