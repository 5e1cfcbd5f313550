//! MSE, Pearson (LCC), Spearman (SRCC) and Kendall (KTAU) at utterance and system level.
//!
//! Spearman uses average ranks for ties. Kendall defaults to tau-b, computed with Knight's
//! merge-sort algorithm in O(n log n).

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

use crate::dataset::Dataset;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TauVariant {
    /// Tie-corrected.
    #[default]
    B,
    /// `(C − D) / (n(n−1)/2)`.
    A,
}

impl FromStr for TauVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "b" | "tau_b" => Ok(TauVariant::B),
            "a" | "tau_a" => Ok(TauVariant::A),
            other => Err(Error::invalid(format!("unknown tau variant {other:?}"))),
        }
    }
}

impl fmt::Display for TauVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TauVariant::B => "tau_b",
            TauVariant::A => "tau_a",
        })
    }
}

fn check_pair(pred: &[f64], truth: &[f64], min_len: usize) -> Result<()> {
    if pred.len() != truth.len() {
        return Err(Error::invalid(format!(
            "length mismatch: {} predictions, {} ground-truth values",
            pred.len(),
            truth.len()
        )));
    }
    if pred.len() < min_len {
        return Err(Error::invalid(format!(
            "need at least {min_len} values, got {}",
            pred.len()
        )));
    }
    if pred.iter().chain(truth).any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite value in metric input"));
    }
    Ok(())
}

pub fn mse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_pair(pred, truth, 1)?;
    Ok(pred.iter().zip(truth).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / pred.len() as f64)
}

pub fn lcc(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_pair(pred, truth, 2)?;
    let n = pred.len() as f64;
    let mp = pred.iter().sum::<f64>() / n;
    let mt = truth.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (p, t) in pred.iter().zip(truth) {
        let (dx, dy) = (p - mp, t - mt);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedMetric("LCC of a constant vector".into()));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// 1-based ranks; tied values share the mean of the ranks they span.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut start = 0;
    while start < idx.len() {
        let mut end = start;
        while end + 1 < idx.len() && v[idx[end + 1]] == v[idx[start]] {
            end += 1;
        }
        let rank = (start + end) as f64 / 2.0 + 1.0;
        for &i in &idx[start..=end] {
            ranks[i] = rank;
        }
        start = end + 1;
    }
    ranks
}

pub fn srcc(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_pair(pred, truth, 2)?;
    lcc(&average_ranks(pred), &average_ranks(truth))
        .map_err(|_| Error::UndefinedMetric("SRCC with all-tied ranks".into()))
}

/// Number of tied pairs among runs of equal values in an already sorted slice.
fn tied_pairs<T: PartialEq>(sorted: &[T]) -> u64 {
    let mut total = 0u64;
    let mut run = 1u64;
    for w in sorted.windows(2) {
        if w[0] == w[1] {
            run += 1;
        } else {
            total += run * (run - 1) / 2;
            run = 1;
        }
    }
    total + run * (run - 1) / 2
}

/// Sorts `v` ascending, returning the number of strict inversions removed.
fn merge_count(v: &mut [f64], buf: &mut [f64]) -> u64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut swaps = {
        let (l, r) = v.split_at_mut(mid);
        let (bl, br) = buf.split_at_mut(mid);
        merge_count(l, bl) + merge_count(r, br)
    };
    let (mut i, mut j, mut k) = (0, mid, 0);
    while i < mid && j < n {
        if v[j] < v[i] {
            buf[k] = v[j];
            swaps += (mid - i) as u64;
            j += 1;
        } else {
            buf[k] = v[i];
            i += 1;
        }
        k += 1;
    }
    buf[k..k + mid - i].copy_from_slice(&v[i..mid]);
    let k = k + mid - i;
    buf[k..k + n - j].copy_from_slice(&v[j..n]);
    v.copy_from_slice(&buf[..n]);
    swaps
}

pub fn ktau(pred: &[f64], truth: &[f64], variant: TauVariant) -> Result<f64> {
    check_pair(pred, truth, 2)?;
    let n = pred.len() as u64;
    let n0 = n * (n - 1) / 2;
    let mut pairs: Vec<(f64, f64)> = pred.iter().copied().zip(truth.iter().copied()).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));

    let xs: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let ties_x = tied_pairs(&xs);
    let ties_xy = tied_pairs(&pairs);
    let mut ys: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let mut buf = vec![0.0; ys.len()];
    let swaps = merge_count(&mut ys, &mut buf);
    let ties_y = tied_pairs(&ys);

    let s = n0 as i64 - ties_x as i64 - ties_y as i64 + ties_xy as i64 - 2 * swaps as i64;
    match variant {
        TauVariant::A => Ok(s as f64 / n0 as f64),
        TauVariant::B => {
            if ties_x == n0 || ties_y == n0 {
                return Err(Error::UndefinedMetric("KTAU with an all-tied vector".into()));
            }
            Ok(s as f64 / (((n0 - ties_x) as f64) * ((n0 - ties_y) as f64)).sqrt())
        }
    }
}

/// Per-system means of predictions and of ground truth, ordered by system id.
pub fn system_level(
    pred: &HashMap<String, f64>,
    truth: &HashMap<String, f64>,
    systems: &HashMap<String, String>,
) -> Result<(Vec<String>, Vec<f64>, Vec<f64>)> {
    let mut groups: BTreeMap<&str, (f64, f64, usize)> = BTreeMap::new();
    let mut ids: Vec<&String> = truth.keys().collect();
    ids.sort();
    for id in ids {
        let sys = systems
            .get(id)
            .ok_or_else(|| Error::invalid(format!("utterance {id:?} has no system id")))?;
        let p = pred
            .get(id)
            .ok_or_else(|| Error::MissingPredictions(vec![id.clone()]))?;
        let g = groups.entry(sys.as_str()).or_insert((0.0, 0.0, 0));
        g.0 += p;
        g.1 += truth[id];
        g.2 += 1;
    }
    let mut names = Vec::with_capacity(groups.len());
    let mut sp = Vec::with_capacity(groups.len());
    let mut st = Vec::with_capacity(groups.len());
    for (name, (p, t, c)) in groups {
        names.push(name.to_string());
        sp.push(p / c as f64);
        st.push(t / c as f64);
    }
    Ok((names, sp, st))
}

/// The four criteria at one level. `None` marks an undefined correlation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LevelReport {
    pub mse: Option<f64>,
    pub lcc: Option<f64>,
    pub srcc: Option<f64>,
    pub ktau: Option<f64>,
}

impl LevelReport {
    /// Correlations of a single point (e.g. one system) are reported as undefined.
    pub fn compute(pred: &[f64], truth: &[f64], tau: TauVariant) -> Result<Self> {
        let single = pred.len() == 1 && truth.len() == 1;
        let defined = |r: Result<f64>| match r {
            _ if single => Ok(None),
            Ok(v) => Ok(Some(v)),
            Err(Error::UndefinedMetric(_)) => Ok(None),
            Err(e) => Err(e),
        };
        Ok(LevelReport {
            mse: Some(mse(pred, truth)?),
            lcc: defined(lcc(pred, truth))?,
            srcc: defined(srcc(pred, truth))?,
            ktau: defined(ktau(pred, truth, tau))?,
        })
    }

    pub fn entries(&self) -> [(&'static str, Option<f64>); 4] {
        [
            ("mse", self.mse),
            ("lcc", self.lcc),
            ("srcc", self.srcc),
            ("ktau", self.ktau),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalReport {
    pub utterance: LevelReport,
    pub system: LevelReport,
}

impl EvalReport {
    /// `(level, metric, value)` rows; undefined values are `NaN`.
    pub fn rows(&self) -> Vec<(&'static str, &'static str, f64)> {
        let mut rows = Vec::with_capacity(8);
        for (level, r) in [("utterance", &self.utterance), ("system", &self.system)] {
            for (name, v) in r.entries() {
                rows.push((level, name, v.unwrap_or(f64::NAN)));
            }
        }
        rows
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<10} {:>10} {:>10} {:>10} {:>10}", "level", "MSE", "LCC", "SRCC", "KTAU")?;
        for (level, r) in [("utterance", &self.utterance), ("system", &self.system)] {
            write!(f, "{level:<10}")?;
            for (_, v) in r.entries() {
                match v {
                    Some(v) => write!(f, " {v:>10.4}")?,
                    None => write!(f, " {:>10}", "undefined")?,
                }
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

/// Evaluates predictions (keyed by utterance id) against a labeled split.
pub fn evaluate(predictions: &HashMap<String, f64>, dataset: &Dataset, tau: TauVariant) -> Result<EvalReport> {
    let missing: Vec<String> = dataset
        .utterances
        .iter()
        .filter(|u| !predictions.contains_key(&u.id))
        .map(|u| u.id.clone())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingPredictions(missing));
    }
    let labels = dataset.labels()?;
    let pred: Vec<f64> = dataset.utterances.iter().map(|u| predictions[&u.id]).collect();
    let truth: Vec<f64> = labels.iter().map(|l| l.mean).collect();

    let truth_map: HashMap<String, f64> = dataset
        .utterances
        .iter()
        .zip(&truth)
        .map(|(u, &t)| (u.id.clone(), t))
        .collect();
    let systems: HashMap<String, String> = dataset
        .utterances
        .iter()
        .map(|u| (u.id.clone(), u.system_id.clone()))
        .collect();
    let (_, sys_pred, sys_truth) = system_level(predictions, &truth_map, &systems)?;

    Ok(EvalReport {
        utterance: LevelReport::compute(&pred, &truth, tau)?,
        system: LevelReport::compute(&sys_pred, &sys_truth, tau)?,
    })
}
