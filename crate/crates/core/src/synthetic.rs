//! Synthetic feature fixtures: each utterance has a hidden mean vector, its frames are that
//! vector plus uniform noise, and its MOS is an affine function of the mean-pooled features
//! clamped to [1, 5].

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::{
    write_feature_file, write_manifest, Dataset, FeatureSequence, FeatureStore, MosLabel, Split, Utterance, MAX_MOS,
    MIN_MOS,
};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub utterances: usize,
    pub dim: usize,
    pub min_frames: usize,
    pub max_frames: usize,
    /// Half-width of the per-frame uniform noise.
    pub noise: f64,
    pub systems: usize,
    pub split: Split,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            utterances: 64,
            dim: 16,
            min_frames: 20,
            max_frames: 60,
            noise: 0.1,
            systems: 8,
            split: Split::Train,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticSet {
    pub dataset: Dataset,
    pub features: FeatureStore,
    /// Affine map from mean-pooled features to MOS, before clamping.
    pub weights: Vec<f64>,
    pub bias: f64,
}

/// `n` lengths drawn uniformly from `lo..=hi`, keyed `u0000`, `u0001`, ...
pub fn random_lengths(n: usize, lo: usize, hi: usize, seed: u64) -> BTreeMap<String, usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| (format!("u{i:04}"), rng.random_range(lo..=hi)))
        .collect()
}

impl SyntheticSpec {
    pub fn generate(&self, seed: u64) -> Result<SyntheticSet> {
        if self.utterances == 0 || self.dim == 0 || self.systems == 0 {
            return Err(Error::invalid("synthetic set needs utterances, dim and systems > 0"));
        }
        if self.min_frames == 0 || self.min_frames > self.max_frames {
            return Err(Error::invalid("synthetic frame range must satisfy 1 <= min <= max"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // mean vectors are U(-1, 1), so the score has standard deviation 1 before clamping
        let mut weights: Vec<f64> = (0..self.dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let scale = (weights.iter().map(|w| w * w).sum::<f64>() / 3.0).sqrt();
        weights.iter_mut().for_each(|w| *w /= scale);
        let bias = 3.0;

        let mut utterances = Vec::with_capacity(self.utterances);
        let mut features = FeatureStore::new();
        for i in 0..self.utterances {
            let id = format!("utt{i:04}");
            let len = rng.random_range(self.min_frames..=self.max_frames);
            let mean: Vec<f64> = (0..self.dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut frames = Vec::with_capacity(len * self.dim);
            for _ in 0..len {
                for m in &mean {
                    frames.push((m + self.noise * rng.random_range(-1.0..=1.0)) as f32);
                }
            }
            let seq = FeatureSequence::new(frames, len, self.dim)?;
            let pooled: Vec<f64> = (0..self.dim)
                .map(|d| (0..len).map(|t| f64::from(seq.frame(t)[d])).sum::<f64>() / len as f64)
                .collect();
            let score = bias + weights.iter().zip(&pooled).map(|(w, x)| w * x).sum::<f64>();
            features.insert(id.clone(), seq)?;
            utterances.push(Utterance {
                id: id.clone(),
                system_id: format!("sys{:02}", i % self.systems),
                ratings: None,
                label: Some(MosLabel {
                    mean: score.clamp(MIN_MOS, MAX_MOS),
                    std: 0.0,
                }),
                feature_path: format!("features/{id}.mosf"),
                num_frames: len,
            });
        }
        Ok(SyntheticSet {
            dataset: Dataset::new(self.split, utterances, 0.125)?,
            features,
            weights,
            bias,
        })
    }
}

impl SyntheticSet {
    /// Writes `features/<id>.mosf` under `dir` plus a manifest named `manifest_name`, returning
    /// the manifest path. Feature paths in the manifest are relative to `dir`.
    pub fn write_to_dir(&self, dir: impl AsRef<Path>, manifest_name: &str) -> Result<PathBuf> {
        let dir = dir.as_ref();
        let feat_dir = dir.join("features");
        std::fs::create_dir_all(&feat_dir).map_err(|e| Error::io(&feat_dir, e))?;
        for u in &self.dataset.utterances {
            write_feature_file(dir.join(&u.feature_path), self.features.get(&u.id)?)?;
        }
        let manifest = dir.join(manifest_name);
        write_manifest(&manifest, &self.dataset.utterances)?;
        Ok(manifest)
    }
}
