//! Gram-matrix style representation and the content/style objective.
//!
//! Scalar losses are accumulated in `f64` regardless of the tensor element
//! type; cotangents are produced in the tensor type and handed to
//! [`Network::backward`], which applies the ReLU clamp.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generate::GenerationConfig;
use crate::nn::{ForwardTrace, Network};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct GramMatrix<T = f32> {
    layer: String,
    /// Filter count (N_l).
    n: usize,
    /// Flattened spatial size h·w (M_l).
    m: usize,
    values: Vec<T>,
}

pub type GramSet<T = f32> = BTreeMap<String, GramMatrix<T>>;

impl<T: Real> GramMatrix<T> {
    pub fn from_parts(layer: impl Into<String>, n: usize, m: usize, values: Vec<T>) -> Result<Self> {
        if values.len() != n * n {
            return Err(Error::shape(format!("gram of {n} filters needs {} values, got {}", n * n, values.len())));
        }
        Ok(GramMatrix {
            layer: layer.into(),
            n,
            m,
            values,
        })
    }

    pub fn layer(&self) -> &str {
        &self.layer
    }

    pub fn filters(&self) -> usize {
        self.n
    }

    pub fn positions(&self) -> usize {
        self.m
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        self.values[i * self.n + j]
    }
}

/// Unnormalized Gram matrix `G_ij = Σ_k F_ik F_jk` of a `1×N×h×w` feature map.
/// The upper triangle is computed and mirrored, so the result is exactly symmetric.
pub fn gram<T: Real>(layer: &str, features: &Tensor<T>) -> Result<GramMatrix<T>> {
    if features.batch() != 1 {
        return Err(Error::shape(format!("gram needs batch 1, got {}", features.batch())));
    }
    let n = features.channels();
    let m = features.plane();
    let f = features.data();
    let rows: Vec<Vec<T>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let fi = &f[i * m..(i + 1) * m];
            (i..n)
                .map(|j| {
                    let fj = &f[j * m..(j + 1) * m];
                    let mut acc = T::zero();
                    for k in 0..m {
                        acc += fi[k] * fj[k];
                    }
                    acc
                })
                .collect()
        })
        .collect();
    let mut values = vec![T::zero(); n * n];
    for (i, row) in rows.iter().enumerate() {
        for (off, &v) in row.iter().enumerate() {
            let j = i + off;
            values[i * n + j] = v;
            values[j * n + i] = v;
        }
    }
    Ok(GramMatrix {
        layer: layer.to_string(),
        n,
        m,
        values,
    })
}

/// Gram matrices for `layers` from a trace that tapped them.
pub fn gram_set<T: Real, S: AsRef<str>>(trace: &ForwardTrace<T>, layers: &[S]) -> Result<GramSet<T>> {
    layers
        .iter()
        .map(|l| {
            let l = l.as_ref();
            let f = trace
                .activation(l)
                .ok_or_else(|| Error::MissingTraceActivation(l.to_string()))?;
            Ok((l.to_string(), gram(l, f)?))
        })
        .collect()
}

fn check_compatible<T: Real>(a: &GramMatrix<T>, b: &GramMatrix<T>) -> Result<()> {
    if a.layer != b.layer || a.n != b.n || a.m != b.m {
        return Err(Error::LayerMismatch(format!(
            "{} (N={}, M={}) vs {} (N={}, M={})",
            a.layer, a.n, a.m, b.layer, b.n, b.m
        )));
    }
    Ok(())
}

/// Per-layer style loss `E_l = Σ (G − Ĝ)² / (4 M² N²)`.
pub fn layer_style_loss<T: Real>(style: &GramMatrix<T>, generated: &GramMatrix<T>) -> Result<f64> {
    check_compatible(style, generated)?;
    let sq: f64 = style
        .values
        .iter()
        .zip(&generated.values)
        .map(|(&a, &b)| {
            let d = a.as_f64() - b.as_f64();
            d * d
        })
        .sum();
    let (n, m) = (style.n as f64, style.m as f64);
    Ok(sq / (4.0 * m * m * n * n))
}

/// The style contribution of one closet image.
#[derive(Debug, Clone)]
pub struct StyleTerm<T = f32> {
    pub grams: GramSet<T>,
    /// Image weight W_s.
    pub weight: f64,
    /// Per-layer weights w_l; they sum to 1.
    pub layer_weights: BTreeMap<String, f64>,
}

impl<T: Real> StyleTerm<T> {
    /// Uniform layer weights over every layer in `grams`.
    pub fn uniform(grams: GramSet<T>, weight: f64) -> Self {
        let w = 1.0 / grams.len().max(1) as f64;
        let layer_weights = grams.keys().map(|k| (k.clone(), w)).collect();
        StyleTerm {
            grams,
            weight,
            layer_weights,
        }
    }
}

/// Weighted set of S ≥ 1 style terms.
#[derive(Debug, Clone)]
pub struct StyleObjective<T = f32> {
    terms: Vec<StyleTerm<T>>,
}

impl<T: Real> StyleObjective<T> {
    pub fn new(terms: Vec<StyleTerm<T>>) -> Result<Self> {
        if terms.is_empty() {
            return Err(Error::NoStylesSelected);
        }
        for (s, term) in terms.iter().enumerate() {
            if !(term.weight > 0.0 && term.weight.is_finite()) {
                return Err(Error::InvalidConfig(format!("style weight W_{s} = {} must be positive", term.weight)));
            }
            if term.layer_weights.is_empty() {
                return Err(Error::InvalidConfig(format!("style term {s} has no layers")));
            }
            let total: f64 = term.layer_weights.values().sum();
            if (total - 1.0).abs() > 1e-6 || term.layer_weights.values().any(|&w| w < 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "layer weights of style term {s} must be non-negative and sum to 1 (sum = {total})"
                )));
            }
            if let Some(l) = term.layer_weights.keys().find(|l| !term.grams.contains_key(*l)) {
                return Err(Error::LayerMismatch(format!("style term {s} has no gram for layer {l}")));
            }
        }
        Ok(StyleObjective { terms })
    }

    pub fn terms(&self) -> &[StyleTerm<T>] {
        &self.terms
    }

    /// Union of all layers any term weights.
    pub fn layers(&self) -> BTreeSet<String> {
        self.terms
            .iter()
            .flat_map(|t| t.layer_weights.keys().cloned())
            .collect()
    }
}

/// `coeff · (Ĝ − G_target)` summed over targets, times `F̂`, as a feature-map tensor.
fn gram_cotangent<T: Real>(features: &Tensor<T>, diff: &[T]) -> Tensor<T> {
    let n = features.channels();
    let m = features.plane();
    let mut out = vec![T::zero(); n * m];
    T::gemm(n, n, m, diff, features.data(), &mut out);
    Tensor::from_vec(features.shape(), out).expect("shape preserved")
}

/// `L_s = Σ_l w_l E_l` for one style image, with cotangents
/// `w_l/(M² N²) · (Ĝ − G)·F̂` at each layer.
pub fn single_image_style_loss<T: Real>(
    term: &StyleTerm<T>,
    trace: &ForwardTrace<T>,
) -> Result<(f64, BTreeMap<String, Tensor<T>>)> {
    let mut loss = 0.0;
    let mut cotangents = BTreeMap::new();
    for (layer, &w) in &term.layer_weights {
        let features = trace
            .activation(layer)
            .ok_or_else(|| Error::MissingTraceActivation(layer.clone()))?;
        let generated = gram(layer, features)?;
        let target = term
            .grams
            .get(layer)
            .ok_or_else(|| Error::LayerMismatch(format!("no style gram for layer {layer}")))?;
        loss += w * layer_style_loss(target, &generated)?;
        let (n, m) = (generated.n as f64, generated.m as f64);
        let coeff = T::from_f64_lossy(w / (m * m * n * n));
        let diff: Vec<T> = generated
            .values
            .iter()
            .zip(&target.values)
            .map(|(&g, &t)| coeff * (g - t))
            .collect();
        cotangents.insert(layer.clone(), gram_cotangent(features, &diff));
    }
    Ok((loss, cotangents))
}

/// `L_style = (1/S) Σ_s W_s L_s` with cotangents merged by the same weights.
///
/// The generated Gram matrix of each layer is computed once and the weighted
/// Gram differences are folded before the single product with `F̂`.
pub fn combined_style_loss<T: Real>(
    objective: &StyleObjective<T>,
    trace: &ForwardTrace<T>,
) -> Result<(f64, Vec<f64>, BTreeMap<String, Tensor<T>>)> {
    let s_count = objective.terms.len() as f64;
    let mut per_image = vec![0.0; objective.terms.len()];
    let mut cotangents = BTreeMap::new();
    for layer in objective.layers() {
        let features = trace
            .activation(&layer)
            .ok_or_else(|| Error::MissingTraceActivation(layer.clone()))?;
        let generated = gram(&layer, features)?;
        let (n, m) = (generated.n as f64, generated.m as f64);
        let mut diff = vec![0.0f64; generated.values.len()];
        for (s, term) in objective.terms.iter().enumerate() {
            let Some(&w) = term.layer_weights.get(&layer) else { continue };
            let target = term
                .grams
                .get(&layer)
                .ok_or_else(|| Error::LayerMismatch(format!("no style gram for layer {layer}")))?;
            per_image[s] += w * layer_style_loss(target, &generated)?;
            let coeff = term.weight / s_count * w / (m * m * n * n);
            for ((d, &g), &t) in diff.iter_mut().zip(&generated.values).zip(&target.values) {
                *d += coeff * (g.as_f64() - t.as_f64());
            }
        }
        let diff: Vec<T> = diff.into_iter().map(T::from_f64_lossy).collect();
        cotangents.insert(layer, gram_cotangent(features, &diff));
    }
    let total = objective
        .terms
        .iter()
        .zip(&per_image)
        .map(|(t, l)| t.weight * l)
        .sum::<f64>()
        / s_count;
    Ok((total, per_image, cotangents))
}

/// Feature map of the content image at the content layer.
#[derive(Debug, Clone)]
pub struct ContentTarget<T = f32> {
    pub layer: String,
    pub features: Tensor<T>,
}

impl<T: Real> ContentTarget<T> {
    pub fn from_image(network: &Network<T>, layer: &str, image: &Tensor<T>) -> Result<Self> {
        let trace = network.forward(image, &[layer])?;
        Ok(ContentTarget {
            layer: layer.to_string(),
            features: trace.activation(layer).expect("tapped").clone(),
        })
    }
}

/// `½ Σ (F − F̂)²` and its cotangent `F̂ − F`.
pub fn content_loss<T: Real>(target: &ContentTarget<T>, trace: &ForwardTrace<T>) -> Result<(f64, Tensor<T>)> {
    let generated = trace
        .activation(&target.layer)
        .ok_or_else(|| Error::MissingTraceActivation(target.layer.clone()))?;
    target.features.check_same_shape(generated)?;
    let mut cot = generated.clone();
    let mut loss = 0.0;
    for (c, &f) in cot.data_mut().iter_mut().zip(target.features.data()) {
        let d = *c - f;
        loss += d.as_f64() * d.as_f64();
        *c = d;
    }
    Ok((0.5 * loss, cot))
}

/// Loss values for one objective evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub iteration: usize,
    pub content: f64,
    pub per_image: Vec<f64>,
    pub style: f64,
    pub total: f64,
    pub alpha: f64,
    pub beta: f64,
}

/// `L_total = α L_content + β L_style` and its gradient with respect to the
/// image, from one forward pass and one reverse sweep.
pub fn total_loss_and_grad<T: Real>(
    network: &Network<T>,
    config: &GenerationConfig,
    content: &ContentTarget<T>,
    styles: &StyleObjective<T>,
    image: &Tensor<T>,
) -> Result<(LossReport, Tensor<T>)> {
    let mut taps = styles.layers();
    taps.insert(content.layer.clone());
    let taps: Vec<String> = taps.into_iter().collect();
    let trace = network.forward(image, &taps)?;

    let (l_content, content_cot) = content_loss(content, &trace)?;
    let (l_style, per_image, style_cots) = combined_style_loss(styles, &trace)?;

    let mut cotangents: BTreeMap<String, Tensor<T>> = BTreeMap::new();
    if config.alpha != 0.0 {
        let mut c = content_cot;
        c.scale(T::from_f64_lossy(config.alpha));
        cotangents.insert(content.layer.clone(), c);
    }
    if config.beta != 0.0 {
        let beta = T::from_f64_lossy(config.beta);
        for (layer, cot) in style_cots {
            match cotangents.get_mut(&layer) {
                Some(existing) => existing.add_scaled(&cot, beta)?,
                None => {
                    let mut c = cot;
                    c.scale(beta);
                    cotangents.insert(layer, c);
                }
            }
        }
    }
    let grad = network.backward(&trace, &cotangents)?;
    let report = LossReport {
        iteration: 0,
        content: l_content,
        per_image,
        style: l_style,
        total: config.alpha * l_content + config.beta * l_style,
        alpha: config.alpha,
        beta: config.beta,
    };
    Ok((report, grad))
}
