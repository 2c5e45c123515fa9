//! Multi-label F1 scoring and the frequency-matched random baseline.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type LabelSet = BTreeSet<String>;

pub const BASELINE_DRAWS: usize = 100;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Counts {
    pub fn add(&mut self, other: Counts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }

    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    /// 2TP / (2TP + FP + FN); 1 when there is nothing to find and nothing was predicted.
    pub fn f1(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            1.0
        } else {
            2.0 * self.tp as f64 / denom as f64
        }
    }
}

fn ratio(num: usize, denom: usize) -> f64 {
    if denom == 0 {
        0.0
    } else {
        num as f64 / denom as f64
    }
}

fn check_aligned(predictions: &[LabelSet], truths: &[LabelSet]) -> Result<()> {
    if predictions.len() != truths.len() {
        return Err(Error::shape(format!(
            "{} predictions for {} ground-truth samples",
            predictions.len(),
            truths.len()
        )));
    }
    Ok(())
}

/// TP/FP/FN per label over the union of predicted and true labels.
pub fn label_counts(predictions: &[LabelSet], truths: &[LabelSet]) -> Result<BTreeMap<String, Counts>> {
    check_aligned(predictions, truths)?;
    let mut counts: BTreeMap<String, Counts> = BTreeMap::new();
    for (p, t) in predictions.iter().zip(truths) {
        for l in p.union(t) {
            let c = counts.entry(l.clone()).or_default();
            match (p.contains(l), t.contains(l)) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => unreachable!(),
            }
        }
    }
    Ok(counts)
}

pub fn micro_counts(predictions: &[LabelSet], truths: &[LabelSet]) -> Result<Counts> {
    let mut total = Counts::default();
    for c in label_counts(predictions, truths)?.into_values() {
        total.add(c);
    }
    Ok(total)
}

pub fn micro_f1(predictions: &[LabelSet], truths: &[LabelSet]) -> Result<f64> {
    Ok(micro_counts(predictions, truths)?.f1())
}

/// Mean micro-F1 of a predictor that marks each label positive
/// independently with probability `frequencies[label]`, over
/// [`BASELINE_DRAWS`] seeded draws.
pub fn baseline(frequencies: &BTreeMap<String, f64>, truths: &[LabelSet], seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sum = 0.0;
    for _ in 0..BASELINE_DRAWS {
        let predictions: Vec<LabelSet> = truths
            .iter()
            .map(|_| {
                frequencies
                    .iter()
                    .filter(|(_, &f)| rng.random_bool(f.clamp(0.0, 1.0)))
                    .map(|(l, _)| l.clone())
                    .collect()
            })
            .collect();
        sum += micro_f1(&predictions, truths).expect("aligned by construction");
    }
    sum / BASELINE_DRAWS as f64
}

/// Best micro-F1 reachable by predicting one fixed label set for every
/// sample. For a set S of size k, F1 = 2·Σ_{l∈S} n_l / (k·N + T), so the
/// optimum takes the k most frequent labels for some k.
pub fn best_constant_f1(truths: &[LabelSet], universe: &[String]) -> f64 {
    let n = truths.len();
    let total: usize = truths.iter().map(|t| t.len()).sum();
    let mut counts: Vec<usize> = universe
        .iter()
        .map(|l| truths.iter().filter(|t| t.contains(l)).count())
        .collect();
    counts.sort_unstable_by(|a, b| b.cmp(a));
    let mut best = if total == 0 { 1.0 } else { 0.0 };
    let mut tp = 0;
    for (k, c) in counts.iter().enumerate() {
        tp += c;
        let denom = (k + 1) * n + total;
        if denom > 0 {
            best = f64::max(best, 2.0 * tp as f64 / denom as f64);
        }
    }
    best
}

/// Fraction of samples carrying each label.
pub fn label_frequencies(labels: &[LabelSet], universe: &[String]) -> BTreeMap<String, f64> {
    universe
        .iter()
        .map(|l| {
            let n = labels.iter().filter(|s| s.contains(l)).count();
            (l.clone(), n as f64 / labels.len().max(1) as f64)
        })
        .collect()
}
