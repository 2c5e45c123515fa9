use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::{self, Counts, LabelSet};
use super::svm::{self, SvmConfig};
use super::featurize;
use crate::error::{Error, Result};
use crate::generate::{self, GenerationConfig};
use crate::imaging::{self, RgbImage};
use crate::nn::Network;
use crate::store::StyleStore;
use crate::synth::{self, Texture};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// Styles come from images disjoint from the SVM training set.
    #[default]
    Separate,
    /// Styles come from the SVM training images themselves.
    Same,
}

impl std::str::FromStr for Regime {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "separate" => Ok(Regime::Separate),
            "same" => Ok(Regime::Same),
            other => Err(format!("unknown regime `{other}` (expected separate|same)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    pub id: String,
    pub image: RgbImage,
    pub attributes: BTreeSet<String>,
}

/// Images an experiment draws from.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub attributes: Vec<String>,
    /// SVM training images; also the style pool in the `same` regime.
    pub wardrobe: Vec<LabeledImage>,
    /// Style pool for the `separate` regime.
    pub held_out: Vec<LabeledImage>,
    pub ucos: Vec<(String, RgbImage)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CorpusSpec {
    /// Procedural textures (stripes, dots, checker, noise) cycled over the
    /// wardrobe, plus plain outlines.
    Synthetic {
        #[serde(default = "default_image_size")]
        image_size: u32,
        #[serde(default)]
        seed: u64,
    },
    /// JSON manifests of `{"path", "attributes", "id"?}` records, paths
    /// relative to the manifest, and a directory of outline images.
    Directory {
        wardrobe: PathBuf,
        held_out: PathBuf,
        ucos: PathBuf,
    },
}

fn default_image_size() -> u32 {
    64
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec::Synthetic {
            image_size: default_image_size(),
            seed: 0,
        }
    }
}

fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Deserialize)]
struct ManifestRecord {
    path: PathBuf,
    attributes: Vec<String>,
    id: Option<String>,
}

fn read_labeled(manifest: &Path) -> Result<Vec<LabeledImage>> {
    let bytes = std::fs::read(manifest).map_err(|e| Error::io(manifest, e))?;
    let records: Vec<ManifestRecord> = serde_json::from_slice(&bytes)?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    records
        .into_iter()
        .map(|r| {
            let path = base.join(&r.path);
            let id = r
                .id
                .or_else(|| path.file_stem().map(|s| s.to_string_lossy().into_owned()))
                .unwrap_or_default();
            Ok(LabeledImage {
                id,
                image: imaging::load_rgb(&path)?,
                attributes: crate::store::normalize_attributes(&r.attributes)?,
            })
        })
        .collect()
}

impl Corpus {
    /// `wardrobe` training images and as many held-out images, textures
    /// cycling through [`Texture::ALL`], and `ucos` plain outlines.
    pub fn synthetic(wardrobe: usize, ucos: usize, image_size: u32, seed: u64) -> Self {
        let labeled = |prefix: &str, s: u64| -> Vec<LabeledImage> {
            let mut rng = stream(seed, s);
            (0..wardrobe)
                .map(|i| {
                    let kind = Texture::ALL[i % Texture::ALL.len()];
                    LabeledImage {
                        id: format!("{prefix}-{i:03}-{}", kind.name()),
                        image: synth::wardrobe_image(kind, image_size, rng.random()),
                        attributes: BTreeSet::from([kind.name().to_string()]),
                    }
                })
                .collect()
        };
        let mut uco_rng = stream(seed, 2);
        Corpus {
            attributes: Texture::ALL.iter().map(|t| t.name().to_string()).collect(),
            wardrobe: labeled("train", 0),
            held_out: labeled("style", 1),
            ucos: (0..ucos)
                .map(|i| (format!("uco-{i:03}"), synth::outline_image(image_size, uco_rng.random())))
                .collect(),
        }
    }

    pub fn from_spec(spec: &CorpusSpec, wardrobe: usize, ucos: usize) -> Result<Self> {
        match spec {
            CorpusSpec::Synthetic { image_size, seed } => Ok(Self::synthetic(wardrobe, ucos, *image_size, *seed)),
            CorpusSpec::Directory {
                wardrobe: w,
                held_out,
                ucos: dir,
            } => {
                let wardrobe_images = read_labeled(w)?;
                let held_out = read_labeled(held_out)?;
                let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
                    .map_err(|e| Error::io(dir, e))?
                    .filter_map(|e| e.ok().map(|e| e.path()))
                    .filter(|p| {
                        matches!(
                            p.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()).as_deref(),
                            Some("png" | "jpg" | "jpeg")
                        )
                    })
                    .collect();
                paths.sort();
                let ucos = paths
                    .iter()
                    .take(ucos)
                    .map(|p| {
                        let id = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                        Ok((id, imaging::load_rgb(p)?))
                    })
                    .collect::<Result<Vec<_>>>()?;
                let attributes: BTreeSet<String> = wardrobe_images
                    .iter()
                    .chain(&held_out)
                    .flat_map(|l| l.attributes.iter().cloned())
                    .collect();
                Ok(Corpus {
                    attributes: attributes.into_iter().collect(),
                    wardrobe: wardrobe_images.into_iter().take(wardrobe).collect(),
                    held_out,
                    ucos,
                })
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub regime: Regime,
    pub ucos: usize,
    pub wardrobe: usize,
    /// Seeds the attribute-pair sampler and the baseline draws.
    pub seed: u64,
    pub generation: GenerationConfig,
    pub svm: SvmConfig,
    /// Feature layer; the deepest conv when absent.
    pub feature_layer: Option<String>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            regime: Regime::Separate,
            ucos: 40,
            wardrobe: 20,
            seed: 0,
            generation: GenerationConfig::tiny(),
            svm: SvmConfig::default(),
            feature_layer: None,
        }
    }
}

/// A complete evaluation job as read from a config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvaluationPlan {
    /// `tiny:<seed>` or a weights container path.
    pub network: String,
    pub corpus: CorpusSpec,
    pub regimes: Vec<Regime>,
    pub experiment: ExperimentConfig,
}

impl Default for EvaluationPlan {
    fn default() -> Self {
        EvaluationPlan {
            network: "tiny:42".into(),
            corpus: CorpusSpec::default(),
            regimes: vec![Regime::Separate, Regime::Same],
            experiment: ExperimentConfig::default(),
        }
    }
}

impl EvaluationPlan {
    pub fn run(&self) -> Result<Vec<ExperimentResult>> {
        let network = Network::open(&self.network)?;
        let corpus = Corpus::from_spec(&self.corpus, self.experiment.wardrobe, self.experiment.ucos)?;
        self.regimes
            .iter()
            .map(|&regime| {
                let config = ExperimentConfig {
                    regime,
                    ..self.experiment.clone()
                };
                run_experiment(&config, &corpus, &network)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub counts: Counts,
    /// The classifier had no positive training example.
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct F1Report {
    pub regime: Regime,
    pub samples: usize,
    pub failures: usize,
    pub micro_f1: f64,
    pub baseline: f64,
    /// Best score of a predictor that ignores its input and always emits the
    /// same label set. Reported for context; not part of any pass criterion.
    pub constant_reference: f64,
    pub counts: Counts,
    pub labels: BTreeMap<String, LabelScore>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleOutcome {
    pub uco: String,
    pub requested: Vec<String>,
    pub predicted: Option<Vec<String>>,
    pub final_loss: Option<f64>,
    pub iterations: Option<usize>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentManifest {
    pub config: ExperimentConfig,
    pub network_id: String,
    pub training_ids: Vec<String>,
    pub style_ids: Vec<String>,
    pub outcomes: Vec<SampleOutcome>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub report: F1Report,
    pub manifest: ExperimentManifest,
}

/// Uniform draw over unordered pairs of distinct attributes, one per outline.
fn sample_pairs(attributes: &[String], count: usize, seed: u64) -> Vec<Vec<String>> {
    let mut rng = stream(seed, 3);
    let n = attributes.len();
    (0..count)
        .map(|_| {
            let a = rng.random_range(0..n);
            let mut b = rng.random_range(0..n - 1);
            if b >= a {
                b += 1;
            }
            let mut pair = vec![attributes[a].clone(), attributes[b].clone()];
            pair.sort();
            pair
        })
        .collect()
}

/// Trains the SVM on the wardrobe, generates one design per outline from a
/// sampled attribute pair, and scores the SVM's predictions on the designs.
pub fn run_experiment(config: &ExperimentConfig, corpus: &Corpus, network: &Network) -> Result<ExperimentResult> {
    let count = config.ucos.min(corpus.ucos.len());
    if count == 0 {
        return Err(Error::EmptyExperiment("no attribute combinations to evaluate".into()));
    }
    if corpus.attributes.len() < 2 {
        return Err(Error::EmptyExperiment("attribute pairs need at least two attributes".into()));
    }
    config.generation.validate()?;
    let canvas = config.generation.canvas;
    let layer = config.feature_layer.as_deref();

    let training: Vec<&LabeledImage> = corpus.wardrobe.iter().take(config.wardrobe).collect();
    let features = training
        .par_iter()
        .map(|l| featurize(network, &l.image, canvas, layer).map(|f| f.values))
        .collect::<Result<Vec<_>>>()?;
    let targets: Vec<LabelSet> = training.iter().map(|l| l.attributes.clone()).collect();
    let model = svm::train_ovr_svm(&features, &targets, &corpus.attributes, &config.svm)?;

    let pool: Vec<&LabeledImage> = match config.regime {
        Regime::Same => training.clone(),
        Regime::Separate => {
            let train_ids: BTreeSet<&str> = training.iter().map(|l| l.id.as_str()).collect();
            let pool: Vec<&LabeledImage> = corpus.held_out.iter().collect();
            if let Some(clash) = pool
                .iter()
                .find(|l| train_ids.contains(l.id.as_str()) || training.iter().any(|t| t.image == l.image))
            {
                return Err(Error::InvalidConfig(format!(
                    "style image `{}` also appears in the training set",
                    clash.id
                )));
            }
            pool
        }
    };
    let mut store = StyleStore::in_memory(config.generation.fingerprint(network));
    for l in &pool {
        let attrs: Vec<&String> = l.attributes.iter().collect();
        store.ingest_image(&l.id, &l.id, &l.image, &attrs, network)?;
    }

    let pairs = sample_pairs(&corpus.attributes, count, config.seed);
    let outcomes: Vec<SampleOutcome> = corpus.ucos[..count]
        .par_iter()
        .zip(pairs.par_iter())
        .enumerate()
        .map(|(i, ((uco_id, uco), requested))| {
            let mut gen = config.generation.clone();
            gen.seed = gen.seed.wrapping_add(i as u64);
            let result = generate::generate_design(network, &store, uco, requested, &gen, &mut |_| {}).and_then(
                |design| {
                    let f = featurize(network, &design.image, canvas, layer)?;
                    Ok((design, model.predict(&f.values)?))
                },
            );
            match result {
                Ok((design, predicted)) => SampleOutcome {
                    uco: uco_id.clone(),
                    requested: requested.clone(),
                    predicted: Some(predicted.into_iter().collect()),
                    final_loss: design.synthesis.history.last().map(|r| r.total),
                    iterations: Some(design.synthesis.records.len()),
                    error: None,
                },
                Err(e) => {
                    log::warn!("generation for {uco_id} failed: {e}");
                    SampleOutcome {
                        uco: uco_id.clone(),
                        requested: requested.clone(),
                        predicted: None,
                        final_loss: None,
                        iterations: None,
                        error: Some(e.to_string()),
                    }
                }
            }
        })
        .collect();

    let (predictions, truths): (Vec<LabelSet>, Vec<LabelSet>) = outcomes
        .iter()
        .filter_map(|o| {
            o.predicted
                .as_ref()
                .map(|p| (p.iter().cloned().collect(), o.requested.iter().cloned().collect()))
        })
        .unzip();
    let failures = outcomes.len() - predictions.len();
    if predictions.is_empty() {
        return Err(Error::EmptyExperiment(format!("all {failures} generations failed")));
    }
    let per_label = metrics::label_counts(&predictions, &truths)?;
    let flagged: BTreeSet<String> = model.flagged().into_iter().collect();
    let labels = corpus
        .attributes
        .iter()
        .map(|l| {
            let c = per_label.get(l).copied().unwrap_or_default();
            let score = LabelScore {
                precision: c.precision(),
                recall: c.recall(),
                f1: c.f1(),
                counts: c,
                flagged: flagged.contains(l),
            };
            (l.clone(), score)
        })
        .collect();
    let counts = metrics::micro_counts(&predictions, &truths)?;
    let frequencies = metrics::label_frequencies(&targets, &corpus.attributes);
    let report = F1Report {
        regime: config.regime,
        samples: predictions.len(),
        failures,
        micro_f1: counts.f1(),
        baseline: metrics::baseline(&frequencies, &truths, config.seed),
        constant_reference: metrics::best_constant_f1(&truths, &corpus.attributes),
        counts,
        labels,
    };
    Ok(ExperimentResult {
        report,
        manifest: ExperimentManifest {
            config: config.clone(),
            network_id: network.id().to_string(),
            training_ids: training.iter().map(|l| l.id.clone()).collect(),
            style_ids: pool.iter().map(|l| l.id.clone()).collect(),
            outcomes,
        },
    })
}
