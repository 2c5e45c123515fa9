//! Attribute-prediction evaluation: featurize images, train one-vs-rest SVMs
//! on closet attributes, generate designs for sampled attribute pairs and
//! score the SVM's predictions on them.

mod experiment;
pub mod metrics;
pub mod svm;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::imaging::{self, RgbImage};
use crate::nn::Network;
use crate::tensor::Tensor;

pub use experiment::{
    run_experiment, Corpus, CorpusSpec, EvaluationPlan, ExperimentConfig, ExperimentManifest, ExperimentResult,
    F1Report, LabelScore, LabeledImage, Regime, SampleOutcome,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub layer: String,
    pub pooling: String,
    pub values: Vec<f32>,
}

/// Global average of the post-ReLU activation at `layer` (the deepest conv
/// when `None`), after canvas placement and normalization.
pub fn featurize(network: &Network, image: &RgbImage, canvas: u32, layer: Option<&str>) -> Result<FeatureVector> {
    let (placed, _) = imaging::canvas_resize(image, canvas);
    featurize_tensor(network, &imaging::normalize(&placed), layer)
}

/// [`featurize`] on an already normalized image tensor.
pub fn featurize_tensor(network: &Network, image: &Tensor<f32>, layer: Option<&str>) -> Result<FeatureVector> {
    let layer = layer.unwrap_or_else(|| network.topology().deepest_conv()).to_string();
    let trace = network.forward(image, std::slice::from_ref(&layer))?;
    let act = trace.activation(&layer).expect("tapped layer present");
    let plane = act.plane();
    let values = act
        .data()
        .chunks(plane)
        .map(|c| (c.iter().map(|&v| v as f64).sum::<f64>() / plane as f64) as f32)
        .collect();
    Ok(FeatureVector {
        layer,
        pooling: "global_average".into(),
        values,
    })
}
