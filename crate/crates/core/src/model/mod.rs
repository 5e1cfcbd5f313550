//! Downstream network over frame features.
//!
//! ```text
//! frames ─ projection ─ SiLU ─ [drop 0.375] ─ LSTM ─ LSTM ─ last valid step ─ [drop 0.75]
//!        ─ dense ─ SiLU ─ [drop 0.75] ─ output ─ (softmax, classification only)
//! ```
//!
//! The projection is a trainable stand-in for the fine-tuned top of the speech encoder, so it can
//! be frozen and unfrozen like the original backbone. Bracketed dropouts apply to the regression
//! head only.

mod checkpoint;
mod loss;
mod network;
mod ops;
mod params;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataset::NUM_CLASSES;
use crate::{Error, Result};

pub use checkpoint::{CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use loss::{cross_entropy, l1_loss, mse_loss, CrossEntropy, LossValue, PROB_FLOOR};
pub use network::{backward, forward, ForwardTrace, Mode};
pub use params::{init_params, transfer_from_regression, Linear, Lstm, Model, ModelParams, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Head {
    Regression,
    Classification,
}

impl fmt::Display for Head {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Head::Regression => "regression",
            Head::Classification => "classification",
        })
    }
}

impl FromStr for Head {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "regression" => Ok(Head::Regression),
            "classification" => Ok(Head::Classification),
            other => Err(Error::invalid(format!("unknown head {other:?}"))),
        }
    }
}

/// A trainable layer, used for freezing and for per-layer reporting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum LayerId {
    Projection,
    Lstm(usize),
    Dense,
    Output,
}

impl fmt::Display for LayerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerId::Projection => f.write_str("projection"),
            LayerId::Lstm(i) => write!(f, "lstm{i}"),
            LayerId::Dense => f.write_str("dense"),
            LayerId::Output => f.write_str("output"),
        }
    }
}

impl FromStr for LayerId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "projection" => Ok(LayerId::Projection),
            "dense" => Ok(LayerId::Dense),
            "output" => Ok(LayerId::Output),
            _ => s
                .strip_prefix("lstm")
                .and_then(|i| i.parse().ok())
                .map(LayerId::Lstm)
                .ok_or_else(|| Error::invalid(format!("unknown layer {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub projection_dim: usize,
    pub lstm_hidden: usize,
    pub lstm_layers: usize,
    pub dense_hidden: usize,
    pub head: Head,
    pub num_classes: usize,
    pub dropout_in: f64,
    pub dropout_mid: f64,
    pub dropout_out: f64,
    pub dropout_enabled: bool,
}

impl ModelConfig {
    pub fn regression(input_dim: usize) -> Self {
        ModelConfig {
            input_dim,
            projection_dim: input_dim,
            lstm_hidden: 128,
            lstm_layers: 2,
            dense_hidden: 128,
            head: Head::Regression,
            num_classes: NUM_CLASSES,
            dropout_in: 0.375,
            dropout_mid: 0.75,
            dropout_out: 0.75,
            dropout_enabled: true,
        }
    }

    pub fn classification(input_dim: usize) -> Self {
        ModelConfig {
            head: Head::Classification,
            dropout_enabled: false,
            ..Self::regression(input_dim)
        }
    }

    /// Same trunk, different head; dropout follows the head.
    pub fn with_head(&self, head: Head) -> Self {
        ModelConfig {
            head,
            dropout_enabled: head == Head::Regression,
            ..self.clone()
        }
    }

    pub fn output_dim(&self) -> usize {
        match self.head {
            Head::Regression => 1,
            Head::Classification => self.num_classes,
        }
    }

    pub fn layers(&self) -> Vec<LayerId> {
        let mut v = vec![LayerId::Projection];
        v.extend((0..self.lstm_layers).map(LayerId::Lstm));
        v.extend([LayerId::Dense, LayerId::Output]);
        v
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("input_dim", self.input_dim),
            ("projection_dim", self.projection_dim),
            ("lstm_hidden", self.lstm_hidden),
            ("lstm_layers", self.lstm_layers),
            ("dense_hidden", self.dense_hidden),
            ("num_classes", self.num_classes),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::invalid(format!("{name} must be positive")));
        }
        for (name, p) in [
            ("dropout_in", self.dropout_in),
            ("dropout_mid", self.dropout_mid),
            ("dropout_out", self.dropout_out),
        ] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::invalid(format!("{name} = {p} outside [0, 1)")));
            }
        }
        if self.head == Head::Classification && self.dropout_enabled {
            return Err(Error::invalid("classification head trains without dropout"));
        }
        Ok(())
    }
}
