//! One-vs-rest linear SVMs trained with Pegasos on standardized features.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SvmConfig {
    pub lambda: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for SvmConfig {
    fn default() -> Self {
        SvmConfig {
            lambda: 1e-4,
            epochs: 50,
            seed: 0,
        }
    }
}

/// Per-dimension affine map to zero mean and unit variance on the training set.
/// Constant dimensions are centered only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    pub fn fit(features: &[Vec<f32>]) -> Self {
        let d = features[0].len();
        let n = features.len() as f64;
        let mut mean = vec![0.0; d];
        for f in features {
            for (m, &v) in mean.iter_mut().zip(f) {
                *m += v as f64 / n;
            }
        }
        let mut var = vec![0.0; d];
        for f in features {
            for ((s, &v), m) in var.iter_mut().zip(f).zip(&mean) {
                *s += (v as f64 - m).powi(2) / n;
            }
        }
        let scale = var.into_iter().map(|v| if v > 1e-12 { 1.0 / v.sqrt() } else { 1.0 }).collect();
        Standardizer { mean, scale }
    }

    pub fn apply(&self, x: &[f32]) -> Vec<f64> {
        x.iter()
            .zip(&self.mean)
            .zip(&self.scale)
            .map(|((&v, m), s)| (v as f64 - m) * s)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearClassifier {
    pub label: String,
    pub weights: Vec<f64>,
    pub bias: f64,
    /// Trained without a single positive example; always predicts negative.
    pub no_positives: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvmModel {
    pub classifiers: Vec<LinearClassifier>,
    pub standardizer: Standardizer,
    pub config: SvmConfig,
}

impl SvmModel {
    pub fn labels(&self) -> impl Iterator<Item = &str> {
        self.classifiers.iter().map(|c| c.label.as_str())
    }

    /// Labels whose classifier never saw a positive example.
    pub fn flagged(&self) -> Vec<String> {
        self.classifiers
            .iter()
            .filter(|c| c.no_positives)
            .map(|c| c.label.clone())
            .collect()
    }

    /// Signed margin per label, in label order.
    pub fn decision(&self, features: &[f32]) -> Result<Vec<f64>> {
        if features.len() != self.standardizer.mean.len() {
            return Err(Error::shape(format!(
                "feature length {} does not match model dimension {}",
                features.len(),
                self.standardizer.mean.len()
            )));
        }
        let x = self.standardizer.apply(features);
        Ok(self
            .classifiers
            .iter()
            .map(|c| {
                if c.no_positives {
                    f64::NEG_INFINITY
                } else {
                    c.weights.iter().zip(&x).map(|(w, v)| w * v).sum::<f64>() + c.bias
                }
            })
            .collect())
    }

    /// Labels with a positive margin.
    pub fn predict(&self, features: &[f32]) -> Result<BTreeSet<String>> {
        let scores = self.decision(features)?;
        Ok(self
            .classifiers
            .iter()
            .zip(scores)
            .filter(|(_, s)| *s > 0.0)
            .map(|(c, _)| c.label.clone())
            .collect())
    }
}

/// Pegasos on the hinge loss for one label. The bias is learned as the weight
/// of a constant-1 feature.
fn pegasos(x: &[Vec<f64>], y: &[f64], config: &SvmConfig, seed: u64) -> (Vec<f64>, f64) {
    let d = x[0].len();
    let mut w = vec![0.0; d + 1];
    let mut order: Vec<usize> = (0..x.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let radius = 1.0 / config.lambda.sqrt();
    let mut t = 0usize;
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for &i in &order {
            t += 1;
            let eta = 1.0 / (config.lambda * t as f64);
            let margin = y[i] * (w[..d].iter().zip(&x[i]).map(|(a, b)| a * b).sum::<f64>() + w[d]);
            let shrink = 1.0 - eta * config.lambda;
            w.iter_mut().for_each(|v| *v *= shrink);
            if margin < 1.0 {
                for (wj, xj) in w[..d].iter_mut().zip(&x[i]) {
                    *wj += eta * y[i] * xj;
                }
                w[d] += eta * y[i];
            }
            let norm = w.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > radius {
                let s = radius / norm;
                w.iter_mut().for_each(|v| *v *= s);
            }
        }
    }
    let bias = w.pop().unwrap();
    (w, bias)
}

/// Trains one classifier per entry of `labels` (parallel across labels).
pub fn train_ovr_svm(
    features: &[Vec<f32>],
    targets: &[BTreeSet<String>],
    labels: &[String],
    config: &SvmConfig,
) -> Result<SvmModel> {
    if features.len() < 2 {
        return Err(Error::InvalidConfig("SVM training needs at least two examples".into()));
    }
    if features.len() != targets.len() {
        return Err(Error::shape(format!(
            "{} feature vectors for {} label sets",
            features.len(),
            targets.len()
        )));
    }
    let d = features[0].len();
    if d == 0 || features.iter().any(|f| f.len() != d) {
        return Err(Error::shape("feature vectors must share a non-zero length"));
    }
    if config.lambda <= 0.0 || config.epochs == 0 {
        return Err(Error::InvalidConfig("SVM needs lambda > 0 and at least one epoch".into()));
    }
    let standardizer = Standardizer::fit(features);
    let x: Vec<Vec<f64>> = features.iter().map(|f| standardizer.apply(f)).collect();
    let classifiers = labels
        .par_iter()
        .enumerate()
        .map(|(k, label)| {
            let y: Vec<f64> = targets.iter().map(|t| if t.contains(label) { 1.0 } else { -1.0 }).collect();
            if y.iter().all(|&v| v < 0.0) {
                log::warn!("label `{label}` has no positive training example");
                return LinearClassifier {
                    label: label.clone(),
                    weights: vec![0.0; d],
                    bias: 0.0,
                    no_positives: true,
                };
            }
            let (weights, bias) = pegasos(&x, &y, config, config.seed.wrapping_add(k as u64));
            LinearClassifier {
                label: label.clone(),
                weights,
                bias,
                no_positives: false,
            }
        })
        .collect();
    Ok(SvmModel {
        classifiers,
        standardizer,
        config: config.clone(),
    })
}
