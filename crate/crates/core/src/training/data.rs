use std::collections::{BTreeMap, HashMap};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::batching::{pad_and_mask, plan_sorted, PaddedBatch};
use crate::dataset::{Dataset, FeatureStore};
use crate::model::{forward, Mode, Model};
use crate::{Error, Result};

/// A split together with its loaded features. Targets are MOS means; unlabeled splits can still
/// be used for prediction.
#[derive(Debug, Clone, Copy)]
pub struct LabeledSet<'a> {
    pub dataset: &'a Dataset,
    pub features: &'a FeatureStore,
}

impl<'a> LabeledSet<'a> {
    pub fn new(dataset: &'a Dataset, features: &'a FeatureStore) -> Self {
        LabeledSet { dataset, features }
    }

    pub fn lengths(&self) -> Result<BTreeMap<String, usize>> {
        self.dataset
            .utterances
            .iter()
            .map(|u| Ok((u.id.clone(), self.features.get(&u.id)?.num_frames())))
            .collect()
    }

    pub fn targets(&self) -> Result<HashMap<String, f64>> {
        let labels = self.dataset.labels()?;
        Ok(self
            .dataset
            .utterances
            .iter()
            .zip(labels)
            .map(|(u, l)| (u.id.clone(), l.mean))
            .collect())
    }

    pub fn batch(&self, ids: &[String]) -> Result<PaddedBatch> {
        let seqs = ids
            .iter()
            .map(|id| self.features.get(id))
            .collect::<Result<Vec<_>>>()?;
        pad_and_mask(&seqs)
    }
}

/// Eval-mode outputs for every utterance, in dataset order. Batches are formed by length and
/// evaluated in parallel; each batch is computed sequentially, so results do not depend on the
/// thread count.
pub fn predict(model: &Model, set: &LabeledSet<'_>, batch_size: usize) -> Result<Vec<Vec<f64>>> {
    if set.dataset.is_empty() {
        return Ok(Vec::new());
    }
    let plan = plan_sorted(&set.lengths()?, batch_size, 0)?;
    let out_dim = model.config.output_dim();
    let per_batch = plan
        .batches
        .par_iter()
        .map(|ids| {
            let batch = set.batch(ids)?;
            // eval mode draws nothing from the generator
            let (outputs, _) = forward(model, &batch, Mode::Eval, &mut ChaCha8Rng::seed_from_u64(0))?;
            Ok(ids.iter().cloned().zip(outputs.chunks(out_dim).map(<[f64]>::to_vec)).collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>>>()?;
    let mut by_id: HashMap<String, Vec<f64>> = per_batch.into_iter().flatten().collect();
    set.dataset
        .utterances
        .iter()
        .map(|u| {
            by_id
                .remove(&u.id)
                .ok_or_else(|| Error::invalid(format!("no prediction produced for {:?}", u.id)))
        })
        .collect()
}
