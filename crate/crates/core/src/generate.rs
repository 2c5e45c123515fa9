//! One design job: select styles, preprocess the outline, optimize pixels,
//! postprocess.

use std::cell::RefCell;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{self, CanvasPlacement, Mask, MaskConfig, RgbImage, CANVAS_SIZE};
use crate::nn::Network;
use crate::optim::{self, InitMode, IterationRecord, LbfgsConfig, Status};
use crate::store::{Fingerprint, SelectionPlan, StyleStore};
use crate::style::{self, ContentTarget, LossReport, StyleObjective};
use crate::tensor::Tensor;

pub const DEFAULT_CONTENT_LAYER: &str = "conv4_2";
pub const DEFAULT_STYLE_LAYERS: [&str; 5] = ["conv1_1", "conv2_1", "conv3_1", "conv4_1", "conv5_1"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationConfig {
    pub content_layer: String,
    pub style_layers: Vec<String>,
    /// Per-layer w_l; uniform over `style_layers` when absent.
    pub layer_weights: Option<BTreeMap<String, f64>>,
    pub alpha: f64,
    pub beta: f64,
    pub lbfgs: LbfgsConfig,
    pub init: InitMode,
    pub seed: u64,
    /// Entries taken per requested attribute.
    pub cap: usize,
    pub canvas: u32,
    pub mask: MaskConfig,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig {
            content_layer: DEFAULT_CONTENT_LAYER.to_string(),
            style_layers: DEFAULT_STYLE_LAYERS.iter().map(|s| s.to_string()).collect(),
            layer_weights: None,
            alpha: 1.0,
            beta: 1e4,
            lbfgs: LbfgsConfig::default(),
            init: InitMode::WhiteNoise,
            seed: 0,
            cap: 3,
            canvas: CANVAS_SIZE,
            mask: MaskConfig::default(),
        }
    }
}

impl GenerationConfig {
    /// Settings sized for the three-block TinyVGG on a 64×64 canvas.
    pub fn tiny() -> Self {
        GenerationConfig {
            content_layer: "conv3_1".to_string(),
            style_layers: vec!["conv1_1".into(), "conv2_1".into(), "conv3_1".into()],
            canvas: 64,
            lbfgs: LbfgsConfig {
                max_iterations: 200,
                ..LbfgsConfig::default()
            },
            ..GenerationConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.lbfgs.validate()?;
        if !(self.alpha.is_finite() && self.alpha >= 0.0 && self.beta.is_finite() && self.beta >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "alpha and beta must be finite and non-negative (alpha = {}, beta = {})",
                self.alpha, self.beta
            )));
        }
        if self.style_layers.is_empty() {
            return Err(Error::InvalidConfig("at least one style layer is required".into()));
        }
        if self.cap == 0 {
            return Err(Error::InvalidConfig("selection cap must be at least 1".into()));
        }
        if self.canvas == 0 {
            return Err(Error::InvalidConfig("canvas size must be positive".into()));
        }
        if let Some(w) = &self.layer_weights {
            let keys: Vec<&String> = w.keys().collect();
            let mut layers: Vec<&String> = self.style_layers.iter().collect();
            layers.sort();
            if keys != layers {
                return Err(Error::InvalidConfig("layer weights must cover exactly the style layers".into()));
            }
        }
        Ok(())
    }

    /// Fingerprint a store must carry to serve this config on `network`.
    pub fn fingerprint(&self, network: &Network) -> Fingerprint {
        Fingerprint {
            network_id: network.id().to_string(),
            style_layers: self.style_layers.clone(),
            canvas: self.canvas,
        }
    }
}

/// Outcome of pixel optimization on the canvas.
#[derive(Debug, Clone)]
pub struct Synthesis {
    /// Clamped optimized canvas, normalized.
    pub image: Tensor<f32>,
    /// Loss breakdown at the initial point and after every accepted step.
    pub history: Vec<LossReport>,
    pub records: Vec<IterationRecord>,
    pub status: Status,
    pub evaluations: usize,
}

/// Minimizes the total loss over pixels starting from `init`.
pub fn synthesize(
    network: &Network,
    config: &GenerationConfig,
    content: &ContentTarget,
    styles: &StyleObjective,
    init: &Tensor<f32>,
    progress: &mut dyn FnMut(&LossReport),
) -> Result<Synthesis> {
    config.validate()?;
    let shape = init.shape();
    let evaluated: RefCell<Vec<LossReport>> = RefCell::new(Vec::new());
    let failure: RefCell<Option<Error>> = RefCell::new(None);

    let mut objective = |x: &[f64], grad: &mut [f64]| -> f64 {
        let image = Tensor::from_vec(shape, x.iter().map(|&v| v as f32).collect()).expect("iterate keeps its shape");
        match style::total_loss_and_grad(network, config, content, styles, &image) {
            Ok((report, g)) => {
                for (d, s) in grad.iter_mut().zip(g.data()) {
                    *d = *s as f64;
                }
                let total = report.total;
                evaluated.borrow_mut().push(report);
                total
            }
            Err(e) => {
                failure.borrow_mut().get_or_insert(e);
                grad.iter_mut().for_each(|d| *d = 0.0);
                f64::INFINITY
            }
        }
    };

    let mut history: Vec<LossReport> = Vec::new();
    let start: Vec<f64> = init.data().iter().map(|&v| v as f64).collect();
    let accepted = |iteration: usize, loss: f64, history: &mut Vec<LossReport>| {
        let evals = evaluated.borrow();
        if let Some(r) = evals.iter().rev().find(|r| r.total == loss) {
            let mut r = r.clone();
            r.iteration = iteration;
            history.push(r);
        }
    };

    let result = {
        let mut on_iteration = |rec: &IterationRecord| {
            if history.is_empty() {
                accepted(0, evaluated.borrow()[0].total, &mut history);
                progress(&history[0]);
            }
            accepted(rec.iteration, rec.loss, &mut history);
            if let Some(last) = history.last() {
                progress(last);
            }
            evaluated.borrow_mut().clear();
        };
        optim::minimize(&mut objective, start, &config.lbfgs, &mut on_iteration)?
    };
    if let Some(e) = failure.into_inner() {
        return Err(e);
    }
    if history.is_empty() {
        let first = evaluated.borrow().first().cloned();
        if let Some(r) = first {
            history.push(r);
            progress(&history[0]);
        }
    }

    let mut image = Tensor::from_vec(shape, result.x.iter().map(|&v| v as f32).collect())?;
    imaging::clamp_normalized(&mut image);
    Ok(Synthesis {
        image,
        history,
        records: result.records,
        status: result.status,
        evaluations: result.evaluations,
    })
}

/// A finished design with everything needed to audit it.
#[derive(Debug, Clone)]
pub struct Design {
    pub image: RgbImage,
    pub mask: Mask,
    pub placement: CanvasPlacement,
    pub plan: SelectionPlan,
    pub synthesis: Synthesis,
}

/// Full pipeline for one outline and attribute request.
pub fn generate_design<S: AsRef<str>>(
    network: &Network,
    store: &StyleStore,
    uco: &RgbImage,
    attributes: &[S],
    config: &GenerationConfig,
    progress: &mut dyn FnMut(&LossReport),
) -> Result<Design> {
    config.validate()?;
    let wanted = config.fingerprint(network);
    if store.fingerprint() != &wanted {
        return Err(Error::IncompatibleStore(format!(
            "store fingerprint {:?} does not match generation settings {:?}",
            store.fingerprint(),
            wanted
        )));
    }
    let plan = store.select(attributes, config.cap)?;
    let styles = store.objective(&plan, config.layer_weights.as_ref())?;

    let mask = imaging::extract_mask(uco, &config.mask)?;
    let (canvas, placement) = imaging::canvas_resize(uco, config.canvas);
    let content_image = imaging::normalize(&canvas);
    let content = ContentTarget::from_image(network, &config.content_layer, &content_image)?;
    let init = optim::init_image(config.init, &content_image, config.seed);

    let synthesis = synthesize(network, config, &content, &styles, &init, progress)?;
    let image = imaging::postprocess(&synthesis.image, &placement, &mask)?;
    Ok(Design {
        image,
        mask,
        placement,
        plan,
        synthesis,
    })
}
