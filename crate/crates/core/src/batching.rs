//! Mini-batch compilation.
//!
//! Sorting utterances by frame count and chunking consecutive runs keeps sequences of similar
//! length together, so little padding is needed. Batch membership is fixed by the sort; only the
//! order in which batches are visited changes between epochs.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::dataset::FeatureSequence;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchPlan {
    pub batches: Vec<Vec<String>>,
    pub lengths: BTreeMap<String, usize>,
}

/// One line of the NDJSON plan dump.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct BatchSummary {
    pub batch: Vec<String>,
    pub max_len: usize,
    pub padding: usize,
}

impl BatchPlan {
    fn chunked(order: Vec<String>, lengths: &BTreeMap<String, usize>, batch_size: usize) -> Self {
        let batches = order.chunks(batch_size).map(<[String]>::to_vec).collect();
        BatchPlan {
            batches,
            lengths: lengths.clone(),
        }
    }

    pub fn len(&self) -> usize {
        self.batches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.batches.is_empty()
    }

    fn batch_lengths<'a>(&'a self, batch: &'a [String]) -> impl Iterator<Item = usize> + 'a {
        batch.iter().map(|id| self.lengths[id])
    }

    pub fn summaries(&self) -> Vec<BatchSummary> {
        self.batches
            .iter()
            .map(|b| {
                let max_len = self.batch_lengths(b).max().unwrap_or(0);
                let padding = self.batch_lengths(b).map(|l| max_len - l).sum();
                BatchSummary {
                    batch: b.clone(),
                    max_len,
                    padding,
                }
            })
            .collect()
    }
}

fn check_args(lengths: &BTreeMap<String, usize>, batch_size: usize) -> Result<()> {
    if batch_size == 0 {
        return Err(Error::invalid("batch size must be at least 1"));
    }
    if lengths.is_empty() {
        return Err(Error::invalid("cannot plan batches for an empty set"));
    }
    Ok(())
}

/// Length-sorted plan: ascending length (ties by id), consecutive chunks, batch order shuffled
/// with `epoch_seed`. The final batch may be short.
pub fn plan_sorted(
    lengths: &BTreeMap<String, usize>,
    batch_size: usize,
    epoch_seed: u64,
) -> Result<BatchPlan> {
    check_args(lengths, batch_size)?;
    let mut order: Vec<(&String, usize)> = lengths.iter().map(|(k, &v)| (k, v)).collect();
    order.sort_by(|a, b| a.1.cmp(&b.1).then_with(|| a.0.cmp(b.0)));
    let order = order.into_iter().map(|(id, _)| id.clone()).collect();
    let mut plan = BatchPlan::chunked(order, lengths, batch_size);
    plan.batches
        .shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed));
    Ok(plan)
}

/// Uniformly random membership, deterministic in `seed`.
pub fn plan_random(lengths: &BTreeMap<String, usize>, batch_size: usize, seed: u64) -> Result<BatchPlan> {
    check_args(lengths, batch_size)?;
    let mut order: Vec<String> = lengths.keys().cloned().collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(BatchPlan::chunked(order, lengths, batch_size))
}

/// Total number of padding frames: for every batch, the sum of `max_len − len` over members.
pub fn padding_cost(plan: &BatchPlan) -> usize {
    plan.summaries().iter().map(|s| s.padding).sum()
}

/// Right-zero-padded `B×T_max×D` batch with the true length of each row.
#[derive(Debug, Clone, PartialEq)]
pub struct PaddedBatch {
    data: Vec<f64>,
    lengths: Vec<usize>,
    max_len: usize,
    dim: usize,
}

impl PaddedBatch {
    /// Builds a batch from per-sequence row-major `len×dim` buffers.
    pub fn from_rows(seqs: &[Vec<f64>], lengths: &[usize], dim: usize) -> Result<Self> {
        if seqs.is_empty() || seqs.len() != lengths.len() {
            return Err(Error::invalid("batch needs one length per non-empty sequence"));
        }
        if dim == 0 {
            return Err(Error::invalid("feature dim must be positive"));
        }
        let max_len = lengths.iter().copied().max().unwrap_or(0);
        let mut data = vec![0.0; seqs.len() * max_len * dim];
        for (b, (seq, &len)) in seqs.iter().zip(lengths).enumerate() {
            if len == 0 || seq.len() != len * dim {
                return Err(Error::Shape(format!(
                    "sequence {b} has {} values for length {len} and dim {dim}",
                    seq.len()
                )));
            }
            let off = b * max_len * dim;
            data[off..off + len * dim].copy_from_slice(seq);
        }
        Ok(PaddedBatch {
            data,
            lengths: lengths.to_vec(),
            max_len,
            dim,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.lengths.len()
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn lengths(&self) -> &[usize] {
        &self.lengths
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Feature vector of sequence `b` at timestep `t`.
    pub fn frame(&self, b: usize, t: usize) -> &[f64] {
        let off = (b * self.max_len + t) * self.dim;
        &self.data[off..off + self.dim]
    }

    /// Strips padding, returning each sequence's valid frames.
    pub fn unpad(&self) -> Vec<Vec<f64>> {
        self.lengths
            .iter()
            .enumerate()
            .map(|(b, &len)| {
                let off = b * self.max_len * self.dim;
                self.data[off..off + len * self.dim].to_vec()
            })
            .collect()
    }
}

/// Pads a batch of feature sequences; all must share the same dimension.
pub fn pad_and_mask(seqs: &[&FeatureSequence]) -> Result<PaddedBatch> {
    let dim = seqs
        .first()
        .map(|s| s.dim())
        .ok_or_else(|| Error::invalid("empty batch"))?;
    if let Some(bad) = seqs.iter().find(|s| s.dim() != dim) {
        return Err(Error::invalid(format!(
            "mixed feature dims in batch: {dim} and {}",
            bad.dim()
        )));
    }
    let rows: Vec<Vec<f64>> = seqs
        .iter()
        .map(|s| s.frames().iter().map(|&v| f64::from(v)).collect())
        .collect();
    let lengths: Vec<usize> = seqs.iter().map(|s| s.num_frames()).collect();
    PaddedBatch::from_rows(&rows, &lengths, dim)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::BTreeSet;

    fn lens(pairs: &[(&str, usize)]) -> BTreeMap<String, usize> {
        pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    /// Every way of splitting `items` into unordered groups of exactly `size`.
    fn all_groupings(items: &[usize], size: usize) -> Vec<Vec<Vec<usize>>> {
        if items.is_empty() {
            return vec![vec![]];
        }
        let first = items[0];
        let rest = &items[1..];
        let mut out = Vec::new();
        for combo in combinations(rest, size - 1) {
            let remaining: Vec<usize> = rest.iter().copied().filter(|x| !combo.contains(x)).collect();
            for mut tail in all_groupings(&remaining, size) {
                let mut g = vec![first];
                g.extend(&combo);
                tail.insert(0, g);
                out.push(tail);
            }
        }
        out
    }

    fn combinations(items: &[usize], k: usize) -> Vec<Vec<usize>> {
        if k == 0 {
            return vec![vec![]];
        }
        if items.len() < k {
            return vec![];
        }
        let mut with: Vec<Vec<usize>> = combinations(&items[1..], k - 1)
            .into_iter()
            .map(|mut c| {
                c.insert(0, items[0]);
                c
            })
            .collect();
        with.extend(combinations(&items[1..], k));
        with
    }

    fn grouping_cost(lengths: &[usize], groups: &[Vec<usize>]) -> usize {
        groups
            .iter()
            .map(|g| {
                let m = g.iter().map(|&i| lengths[i]).max().unwrap();
                g.iter().map(|&i| m - lengths[i]).sum::<usize>()
            })
            .sum()
    }

    #[test]
    fn sorted_plan_example_is_minimal() {
        let l = lens(&[("u1", 10), ("u2", 3), ("u3", 7), ("u4", 5)]);
        let plan = plan_sorted(&l, 2, 0).unwrap();
        let groups: BTreeSet<Vec<String>> = plan.batches.iter().cloned().collect();
        let expected: BTreeSet<Vec<String>> = [vec!["u2", "u4"], vec!["u3", "u1"]]
            .iter()
            .map(|b| b.iter().map(|s| s.to_string()).collect())
            .collect();
        assert_eq!(groups, expected);
        assert_eq!(padding_cost(&plan), 5);

        let raw = [10, 3, 7, 5];
        let mut costs: Vec<usize> = all_groupings(&[0, 1, 2, 3], 2)
            .iter()
            .map(|g| grouping_cost(&raw, g))
            .collect();
        costs.sort();
        assert_eq!(costs, vec![5, 9, 9]);
    }

    #[test]
    fn sorted_plan_edge_cases() {
        let l = lens(&[("a", 4), ("b", 4), ("c", 4)]);
        assert_eq!(padding_cost(&plan_sorted(&l, 2, 3).unwrap()), 0);
        let l = lens(&[("a", 1), ("b", 9), ("c", 4)]);
        let plan = plan_sorted(&l, 5, 3).unwrap();
        assert_eq!(plan.batches, vec![vec!["a", "c", "b"]]);
        assert!(plan_sorted(&l, 0, 0).is_err());
        assert!(plan_sorted(&BTreeMap::new(), 2, 0).is_err());
    }

    #[test]
    fn final_partial_batch_is_kept() {
        let l: BTreeMap<String, usize> = (0..7).map(|i| (format!("u{i}"), i + 1)).collect();
        let plan = plan_sorted(&l, 3, 1).unwrap();
        let mut sizes: Vec<usize> = plan.batches.iter().map(Vec::len).collect();
        sizes.sort();
        assert_eq!(sizes, vec![1, 3, 3]);
    }

    #[test]
    fn random_plan_is_seeded() {
        let l: BTreeMap<String, usize> = (0..20).map(|i| (format!("u{i}"), i * 3 % 11)).collect();
        assert_eq!(plan_random(&l, 4, 9).unwrap(), plan_random(&l, 4, 9).unwrap());
        let single = lens(&[("only", 5)]);
        assert_eq!(plan_random(&single, 4, 0).unwrap().batches, vec![vec!["only"]]);
        let members: BTreeSet<String> = plan_random(&l, 4, 2).unwrap().batches.concat().into_iter().collect();
        assert_eq!(members, l.keys().cloned().collect());
    }

    #[test]
    fn padding_cost_examples() {
        let l = lens(&[("u1", 10), ("u2", 3), ("u3", 7), ("u4", 5)]);
        let plan = BatchPlan {
            batches: vec![vec!["u2".into(), "u4".into()], vec!["u3".into(), "u1".into()]],
            lengths: l.clone(),
        };
        assert_eq!(padding_cost(&plan), 5);
        let singles = BatchPlan {
            batches: l.keys().map(|k| vec![k.clone()]).collect(),
            lengths: l,
        };
        assert_eq!(padding_cost(&singles), 0);
    }

    #[test]
    fn pad_and_mask_examples() {
        let a = FeatureSequence::new(vec![1.0; 6], 3, 2).unwrap();
        let b = FeatureSequence::new(vec![2.0; 10], 5, 2).unwrap();
        let batch = pad_and_mask(&[&a, &b]).unwrap();
        assert_eq!((batch.batch_size(), batch.max_len(), batch.dim()), (2, 5, 2));
        assert_eq!(batch.lengths(), &[3, 5]);
        assert_eq!(batch.frame(0, 2), &[1.0, 1.0]);
        assert_eq!(batch.frame(0, 3), &[0.0, 0.0]);
        assert_eq!(batch.frame(0, 4), &[0.0, 0.0]);
        assert_eq!(batch.frame(1, 4), &[2.0, 2.0]);

        let single = pad_and_mask(&[&a]).unwrap();
        assert_eq!(single.max_len(), 3);
        assert_eq!(single.data().len(), 6);

        let c = FeatureSequence::new(vec![0.0; 3], 1, 3).unwrap();
        assert!(pad_and_mask(&[&a, &c]).is_err());
        assert!(pad_and_mask(&[]).is_err());
    }

    fn arb_lengths() -> impl Strategy<Value = BTreeMap<String, usize>> {
        proptest::collection::vec(1usize..60, 1..40)
            .prop_map(|v| v.into_iter().enumerate().map(|(i, l)| (format!("id{i:02}"), l)).collect())
    }

    proptest! {
        #[test]
        fn sorted_plan_partitions_ids(l in arb_lengths(), size in 1usize..9, seed in any::<u64>()) {
            let plan = plan_sorted(&l, size, seed).unwrap();
            let all = plan.batches.concat();
            prop_assert_eq!(all.len(), l.len());
            let set: BTreeSet<_> = all.into_iter().collect();
            prop_assert_eq!(set.len(), l.len());
            let short = plan.batches.iter().filter(|b| b.len() != size).count();
            prop_assert!(short <= 1);
        }

        #[test]
        fn sorted_plan_is_locally_optimal(l in arb_lengths(), size in 1usize..6) {
            // Only holds when every batch is full: a short batch of long items can beat chunking.
            prop_assume!(l.len() % size == 0);
            let mut order: Vec<(&String, usize)> = l.iter().map(|(k, &v)| (k, v)).collect();
            order.sort_by(|a, b| a.1.cmp(&b.1).then_with(|| a.0.cmp(b.0)));
            let ids: Vec<String> = order.iter().map(|p| p.0.clone()).collect();
            let chunks: Vec<Vec<String>> = ids.chunks(size).map(<[String]>::to_vec).collect();
            let base = padding_cost(&plan_sorted(&l, size, 0).unwrap());
            for w in 0..chunks.len().saturating_sub(1) {
                for i in 0..chunks[w].len() {
                    for j in 0..chunks[w + 1].len() {
                        let mut swapped = chunks.clone();
                        let tmp = swapped[w][i].clone();
                        swapped[w][i] = swapped[w + 1][j].clone();
                        swapped[w + 1][j] = tmp;
                        let cost = padding_cost(&BatchPlan { batches: swapped, lengths: l.clone() });
                        prop_assert!(base <= cost);
                    }
                }
            }
        }

        #[test]
        fn sorted_plan_ignores_input_order(l in arb_lengths(), size in 1usize..6, seed in any::<u64>()) {
            // The input is a map, so rebuilding it from a reversed pair list must not matter.
            let rebuilt: BTreeMap<String, usize> = l.iter().rev().map(|(k, v)| (k.clone(), *v)).collect();
            prop_assert_eq!(plan_sorted(&l, size, seed).unwrap(), plan_sorted(&rebuilt, size, seed).unwrap());
        }

        #[test]
        fn unpad_inverts_pad(lengths in proptest::collection::vec(1usize..9, 1..6), dim in 1usize..4) {
            let seqs: Vec<Vec<f64>> = lengths
                .iter()
                .enumerate()
                .map(|(b, &l)| (0..l * dim).map(|i| (b * 100 + i) as f64 + 0.5).collect())
                .collect();
            let batch = PaddedBatch::from_rows(&seqs, &lengths, dim).unwrap();
            prop_assert_eq!(batch.unpad(), seqs);
        }
    }
}
