//! Rating manifests, feature sequences and label arithmetic.
//!
//! Averaged MOS values live on a grid whose step is the reciprocal of the number of listeners
//! per utterance (1/8 for main-track-style data). The classifier works on the 33 points of the
//! 1/8 grid over [1, 5].

mod io;
mod stats;

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub use io::{
    load_features, load_manifest, read_feature_file, read_feature_header, write_feature_file,
    write_manifest, FeatureStore, FEATURE_MAGIC, FEATURE_VERSION,
};
pub use stats::{class_counts, class_weights, mean_std_scatter, mos_histogram, range_fraction};

pub const NUM_CLASSES: usize = 33;
pub const MIN_MOS: f64 = 1.0;
pub const MAX_MOS: f64 = 5.0;

const GRID_STEPS_PER_POINT: f64 = 8.0;
const MOS_EPS: f64 = 1e-9;

/// A single listener vote.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Rating(u8);

impl Rating {
    pub fn new(value: u8) -> Result<Self> {
        if (1..=5).contains(&value) {
            Ok(Rating(value))
        } else {
            Err(Error::invalid(format!("rating {value} outside 1..=5")))
        }
    }

    pub fn value(self) -> u8 {
        self.0
    }
}

/// Non-empty list of votes for one utterance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RatingSet(Vec<Rating>);

impl RatingSet {
    pub fn new(ratings: Vec<Rating>) -> Result<Self> {
        if ratings.is_empty() {
            return Err(Error::invalid("empty rating set"));
        }
        Ok(RatingSet(ratings))
    }

    pub fn from_values(values: &[u8]) -> Result<Self> {
        let ratings = values
            .iter()
            .map(|&v| Rating::new(v))
            .collect::<Result<Vec<_>>>()?;
        Self::new(ratings)
    }

    pub fn ratings(&self) -> &[Rating] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Averaged opinion score and its population standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MosLabel {
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "validation" | "val" | "dev" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => Err(Error::invalid(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub system_id: String,
    pub ratings: Option<RatingSet>,
    pub label: Option<MosLabel>,
    pub feature_path: String,
    pub num_frames: usize,
}

impl Utterance {
    /// The label, derived from raw votes when present (votes win over a stored mean).
    pub fn mos(&self) -> Option<MosLabel> {
        match &self.ratings {
            Some(r) => Some(aggregate_ratings(r)),
            None => self.label,
        }
    }
}

/// Row-major `T×D` matrix of frame features.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    frames: Vec<f32>,
    num_frames: usize,
    dim: usize,
}

impl FeatureSequence {
    pub fn new(frames: Vec<f32>, num_frames: usize, dim: usize) -> Result<Self> {
        if num_frames == 0 || dim == 0 {
            return Err(Error::invalid(format!(
                "feature sequence must be non-empty, got {num_frames}x{dim}"
            )));
        }
        if frames.len() != num_frames * dim {
            return Err(Error::Shape(format!(
                "{} values for a {num_frames}x{dim} sequence",
                frames.len()
            )));
        }
        if let Some(pos) = frames.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!(
                "non-finite feature at frame {} dim {}",
                pos / dim,
                pos % dim
            )));
        }
        Ok(FeatureSequence {
            frames,
            num_frames,
            dim,
        })
    }

    pub fn num_frames(&self) -> usize {
        self.num_frames
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn frames(&self) -> &[f32] {
        &self.frames
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        &self.frames[t * self.dim..(t + 1) * self.dim]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub split: Split,
    pub utterances: Vec<Utterance>,
    /// Step of the MOS grid for this split.
    pub resolution: f64,
}

impl Dataset {
    /// Builds a dataset, checking id uniqueness. The resolution is `1/n` when every rated
    /// utterance has the same vote count `n`, otherwise `default_resolution`.
    pub fn new(split: Split, utterances: Vec<Utterance>, default_resolution: f64) -> Result<Self> {
        let mut seen = HashSet::with_capacity(utterances.len());
        for u in &utterances {
            if !seen.insert(u.id.as_str()) {
                return Err(Error::invalid(format!("duplicate utterance id {:?}", u.id)));
            }
        }
        let mut counts = utterances
            .iter()
            .filter_map(|u| u.ratings.as_ref().map(RatingSet::len));
        let resolution = match counts.next() {
            Some(first) if counts.all(|n| n == first) => resolution_for(first)?,
            _ => default_resolution,
        };
        Ok(Dataset {
            split,
            utterances,
            resolution,
        })
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    /// Labels of every utterance, failing on the first unlabeled one.
    pub fn labels(&self) -> Result<Vec<MosLabel>> {
        self.utterances
            .iter()
            .map(|u| {
                u.mos().ok_or_else(|| {
                    Error::invalid(format!(
                        "utterance {:?} in {} split has neither ratings nor mean",
                        u.id, self.split
                    ))
                })
            })
            .collect()
    }

    pub fn get(&self, id: &str) -> Option<&Utterance> {
        self.utterances.iter().find(|u| u.id == id)
    }
}

/// Mean and population standard deviation of the votes.
pub fn aggregate_ratings(ratings: &RatingSet) -> MosLabel {
    let n = ratings.len() as f64;
    let mean = ratings.0.iter().map(|r| f64::from(r.0)).sum::<f64>() / n;
    let var = ratings
        .0
        .iter()
        .map(|r| {
            let d = f64::from(r.0) - mean;
            d * d
        })
        .sum::<f64>()
        / n;
    MosLabel {
        mean,
        std: var.sqrt(),
    }
}

pub fn resolution_for(n_ratings: usize) -> Result<f64> {
    if n_ratings == 0 {
        return Err(Error::invalid("resolution needs at least one rating"));
    }
    Ok(1.0 / n_ratings as f64)
}

fn check_mos_range(mos: f64) -> Result<f64> {
    if !(MIN_MOS - MOS_EPS..=MAX_MOS + MOS_EPS).contains(&mos) {
        return Err(Error::invalid(format!("MOS {mos} outside [1, 5]")));
    }
    Ok(mos.clamp(MIN_MOS, MAX_MOS))
}

/// 1-based class on the 0.125 grid: class 1 is MOS 1.0, class 33 is MOS 5.0.
pub fn mos_to_class(mos: f64) -> Result<usize> {
    let mos = check_mos_range(mos)?;
    Ok(((mos - MIN_MOS) * GRID_STEPS_PER_POINT).round() as usize + 1)
}

pub fn class_to_mos(class: usize) -> Result<f64> {
    if !(1..=NUM_CLASSES).contains(&class) {
        return Err(Error::invalid(format!("class {class} outside 1..=33")));
    }
    Ok(MIN_MOS + (class - 1) as f64 / GRID_STEPS_PER_POINT)
}
