use std::ops::RangeBounds;

use super::{aggregate_ratings, mos_to_class, Dataset, MAX_MOS, MIN_MOS, NUM_CLASSES};
use crate::{Error, Result};

/// Histogram of averaged MOS values with bins centred on `1 + k·bin_width`. Empty bins are
/// included with a zero count.
pub fn mos_histogram(d: &Dataset, bin_width: f64) -> Result<Vec<(f64, usize)>> {
    if !(bin_width > 0.0 && bin_width.is_finite()) {
        return Err(Error::invalid(format!("bin width {bin_width} must be positive")));
    }
    let labels = d.labels()?;
    let last = ((MAX_MOS - MIN_MOS) / bin_width + 1e-9).floor() as usize;
    let mut counts = vec![0usize; last + 1];
    for l in labels {
        let k = ((l.mean - MIN_MOS) / bin_width).round().clamp(0.0, last as f64) as usize;
        counts[k] += 1;
    }
    Ok(counts
        .into_iter()
        .enumerate()
        .map(|(k, c)| (MIN_MOS + k as f64 * bin_width, c))
        .collect())
}

/// Fraction of utterances whose averaged MOS falls in `range`.
pub fn range_fraction(d: &Dataset, range: impl RangeBounds<f64>) -> Result<f64> {
    let labels = d.labels()?;
    if labels.is_empty() {
        return Ok(0.0);
    }
    let hits = labels.iter().filter(|l| range.contains(&l.mean)).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Distinct `(mean, std)` points of the per-utterance votes with their multiplicity, sorted by
/// mean then std.
pub fn mean_std_scatter(d: &Dataset) -> Result<Vec<(f64, f64, usize)>> {
    let mut points = d
        .utterances
        .iter()
        .map(|u| {
            u.ratings
                .as_ref()
                .map(|r| {
                    let l = aggregate_ratings(r);
                    (l.mean, l.std)
                })
                .ok_or_else(|| Error::invalid(format!("utterance {:?} has no raw ratings", u.id)))
        })
        .collect::<Result<Vec<_>>>()?;
    points.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));

    let mut out: Vec<(f64, f64, usize)> = Vec::new();
    for (m, s) in points {
        match out.last_mut() {
            Some(last) if last.0 == m && last.1 == s => last.2 += 1,
            _ => out.push((m, s, 1)),
        }
    }
    Ok(out)
}

/// Occurrences of each of the 33 classes (index 0 is class 1).
pub fn class_counts(d: &Dataset) -> Result<[usize; NUM_CLASSES]> {
    let mut counts = [0usize; NUM_CLASSES];
    for l in d.labels()? {
        counts[mos_to_class(l.mean)? - 1] += 1;
    }
    Ok(counts)
}

/// Reciprocal-frequency class weights, normalized to mean 1 over observed classes.
/// Unobserved classes get weight 0.
pub fn class_weights(d: &Dataset) -> Result<Vec<f64>> {
    Ok(weights_from_counts(&class_counts(d)?))
}

pub(crate) fn weights_from_counts(counts: &[usize]) -> Vec<f64> {
    let raw: Vec<f64> = counts
        .iter()
        .map(|&c| if c == 0 { 0.0 } else { 1.0 / c as f64 })
        .collect();
    let observed = counts.iter().filter(|&&c| c > 0).count();
    if observed == 0 {
        return raw;
    }
    let mean = raw.iter().sum::<f64>() / observed as f64;
    raw.into_iter().map(|w| w / mean).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{MosLabel, RatingSet, Split, Utterance};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn utt(id: &str, votes: &[u8]) -> Utterance {
        Utterance {
            id: id.into(),
            system_id: "s".into(),
            ratings: Some(RatingSet::from_values(votes).unwrap()),
            label: None,
            feature_path: String::new(),
            num_frames: 1,
        }
    }

    fn with_means(means: &[f64]) -> Dataset {
        let utts = means
            .iter()
            .enumerate()
            .map(|(i, &m)| Utterance {
                id: format!("u{i}"),
                system_id: "s".into(),
                ratings: None,
                label: Some(MosLabel { mean: m, std: 0.0 }),
                feature_path: String::new(),
                num_frames: 1,
            })
            .collect();
        Dataset::new(Split::Train, utts, 0.125).unwrap()
    }

    #[test]
    fn histogram_single_utterance() {
        let h = mos_histogram(&with_means(&[3.0]), 0.125).unwrap();
        assert_eq!(h.len(), 33);
        let nonzero: Vec<_> = h.iter().filter(|(_, c)| *c > 0).collect();
        assert_eq!(nonzero, vec![&(3.0, 1)]);
        assert!(h.iter().filter(|(_, c)| *c == 0).count() == 32);
    }

    #[test]
    fn histogram_rejects_unlabeled() {
        let mut d = with_means(&[3.0]);
        d.utterances[0].label = None;
        assert!(mos_histogram(&d, 0.125).is_err());
    }

    #[test]
    fn range_masses_partition() {
        // 1 of 4 below 2, 2 in [2, 4.125], 1 above
        let d = with_means(&[1.5, 2.0, 4.125, 4.25]);
        let low = range_fraction(&d, 1.0..2.0).unwrap();
        let mid = range_fraction(&d, 2.0..=4.125).unwrap();
        let high = range_fraction(
            &d,
            (std::ops::Bound::Excluded(4.125), std::ops::Bound::Included(5.0)),
        )
        .unwrap();
        assert_eq!((low, mid, high), (0.25, 0.5, 0.25));
    }

    #[test]
    fn scatter_merges_identical_votes() {
        let d = Dataset::new(
            Split::Train,
            vec![
                utt("a", &[3, 3, 3, 3, 4, 4, 4, 4]),
                utt("b", &[4, 4, 4, 4, 3, 3, 3, 3]),
                utt("c", &[3; 8]),
            ],
            0.125,
        )
        .unwrap();
        let s = mean_std_scatter(&d).unwrap();
        assert_eq!(s, vec![(3.0, 0.0, 1), (3.5, 0.5, 2)]);
        assert_eq!(s.iter().map(|p| p.2).sum::<usize>(), 3);
    }

    #[test]
    fn scatter_needs_raw_votes() {
        assert!(mean_std_scatter(&with_means(&[3.0])).is_err());
    }

    #[test]
    fn class_weight_examples() {
        let uniform = weights_from_counts(&[7; 33]);
        assert!(uniform.iter().all(|&w| (w - 1.0).abs() < 1e-15));

        // raw [1/2, 1], mean 3/4
        let mut counts = [0usize; 33];
        counts[0] = 2;
        counts[5] = 1;
        let w = weights_from_counts(&counts);
        assert_abs_diff_eq!(w[0], 2.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(w[5], 4.0 / 3.0, epsilon = 1e-15);
        assert_eq!(w.iter().filter(|&&x| x == 0.0).count(), 31);

        assert_eq!(weights_from_counts(&[0; 33]), vec![0.0; 33]);
    }

    #[test]
    fn class_weights_from_dataset() {
        let w = class_weights(&with_means(&[1.0, 1.0, 5.0])).unwrap();
        assert_abs_diff_eq!(w[0], 2.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(w[32], 4.0 / 3.0, epsilon = 1e-15);
    }

    proptest! {
        #[test]
        fn counts_sum_to_dataset_size(ks in proptest::collection::vec(0usize..33, 1..200)) {
            let means: Vec<f64> = ks.iter().map(|&k| 1.0 + k as f64 * 0.125).collect();
            let d = with_means(&means);
            let h = mos_histogram(&d, 0.125).unwrap();
            prop_assert_eq!(h.iter().map(|b| b.1).sum::<usize>(), means.len());
            let h = mos_histogram(&d, 0.5).unwrap();
            prop_assert_eq!(h.iter().map(|b| b.1).sum::<usize>(), means.len());
        }

        #[test]
        fn observed_weights_average_to_one(counts in proptest::collection::vec(0usize..50, 33)) {
            let w = weights_from_counts(&counts);
            let observed: Vec<f64> = counts.iter().zip(&w).filter(|(c, _)| **c > 0).map(|(_, w)| *w).collect();
            if !observed.is_empty() {
                let mean = observed.iter().sum::<f64>() / observed.len() as f64;
                prop_assert!((mean - 1.0).abs() < 1e-12);
            }
            for (c, w) in counts.iter().zip(&w) {
                if *c == 0 { prop_assert_eq!(*w, 0.0); }
            }
        }
    }
}
