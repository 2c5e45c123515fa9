use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context, Result};
use drape::eval::EvaluationPlan;
use drape::imaging::{self, CanvasPlacement, MaskConfig};
use drape::optim::{IterationRecord, Status};
use drape::store::{Fingerprint, SelectionPlan, StyleStore, MANIFEST_FILE};
use drape::style::LossReport;
use drape::{GenerationConfig, Network};
use serde::Serialize;

use crate::{EvaluateArgs, GenerateArgs, IngestArgs, InspectArgs, MaskArgs};

/// Defaults matched to the network: the tiny stack has no conv4/conv5 layers.
fn base_config(network: &Network) -> GenerationConfig {
    if network.topology().name() == drape::nn::Topology::tiny().name() {
        GenerationConfig::tiny()
    } else {
        GenerationConfig::default()
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn progress_line(report: &LossReport) {
    if let Ok(line) = serde_json::to_string(report) {
        let mut err = std::io::stderr().lock();
        let _ = writeln!(err, "{line}");
    }
}

pub fn ingest(args: IngestArgs) -> Result<()> {
    let network = Network::open(&args.weights.weights)?;
    let mut store = if args.store.join(MANIFEST_FILE).exists() {
        StyleStore::open(&args.store)?
    } else {
        let mut config = base_config(&network);
        if let Some(layers) = args.style_layers {
            config.style_layers = layers;
        }
        if let Some(canvas) = args.canvas {
            config.canvas = canvas;
        }
        config.validate()?;
        StyleStore::create(&args.store, config.fingerprint(&network))?
    };
    let id = match args.id {
        Some(id) => id,
        None => args
            .image
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .ok_or_else(|| anyhow!("cannot derive an id from {}", args.image.display()))?,
    };
    let entry = store.ingest(&id, &args.image, &args.attrs, &network)?;
    println!(
        "{}",
        serde_json::json!({ "id": entry.item.id, "attributes": entry.item.attributes, "entries": store.len() })
    );
    Ok(())
}

#[derive(Serialize)]
struct Sidecar<'a> {
    image: String,
    uco: String,
    attributes: &'a [String],
    weights: &'a str,
    store: String,
    store_fingerprint: &'a Fingerprint,
    config: &'a GenerationConfig,
    plan: &'a SelectionPlan,
    placement: &'a CanvasPlacement,
    status: Status,
    evaluations: usize,
    history: &'a [LossReport],
    iterations: &'a [IterationRecord],
}

pub fn sidecar_path(out: &Path) -> PathBuf {
    out.with_extension("json")
}

pub fn generate(args: GenerateArgs) -> Result<()> {
    let network = Network::open(&args.weights.weights)?;
    let store = StyleStore::open(&args.store)?;
    let mut config = match &args.config {
        Some(path) => read_json(path)?,
        None => {
            let fp = store.fingerprint();
            GenerationConfig {
                style_layers: fp.style_layers.clone(),
                canvas: fp.canvas,
                ..base_config(&network)
            }
        }
    };
    if let Some(v) = args.alpha {
        config.alpha = v;
    }
    if let Some(v) = args.beta {
        config.beta = v;
    }
    if let Some(v) = args.iters {
        config.lbfgs.max_iterations = v;
    }
    if let Some(v) = args.init {
        config.init = v;
    }
    if let Some(v) = args.seed {
        config.seed = v;
    }
    if let Some(v) = args.cap {
        config.cap = v;
    }
    if let Some(v) = args.content_layer {
        config.content_layer = v;
    }
    config.validate()?;

    let uco = imaging::load_rgb(&args.uco)?;
    let design = drape::generate_design(&network, &store, &uco, &args.attrs, &config, &mut progress_line)?;
    imaging::save_png(&design.image, &args.out)?;
    let sidecar = Sidecar {
        image: args.out.display().to_string(),
        uco: args.uco.display().to_string(),
        attributes: &args.attrs,
        weights: network.id(),
        store: args.store.display().to_string(),
        store_fingerprint: store.fingerprint(),
        config: &config,
        plan: &design.plan,
        placement: &design.placement,
        status: design.synthesis.status,
        evaluations: design.synthesis.evaluations,
        history: &design.synthesis.history,
        iterations: &design.synthesis.records,
    };
    write_json(&sidecar_path(&args.out), &sidecar)
}

pub fn evaluate(args: EvaluateArgs) -> Result<()> {
    if let Some(jobs) = args.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs.max(1))
            .build_global()
            .context("configuring worker pool")?;
    }
    let plan: EvaluationPlan = match &args.config {
        Some(path) => read_json(path)?,
        None => EvaluationPlan::default(),
    };
    let results = plan.run()?;
    let reports: Vec<_> = results.iter().map(|r| &r.report).collect();
    write_json(&args.out, &serde_json::json!({ "network": plan.network, "reports": reports }))?;
    let manifests: Vec<_> = results.iter().map(|r| &r.manifest).collect();
    write_json(&args.out.with_extension("manifest.json"), &manifests)?;
    for r in &reports {
        eprintln!(
            "{}",
            serde_json::json!({ "regime": r.regime, "micro_f1": r.micro_f1, "baseline": r.baseline })
        );
    }
    Ok(())
}

pub fn inspect(args: InspectArgs) -> Result<()> {
    let store = StyleStore::open(&args.store)?;
    let entries: Vec<_> = store
        .entries()
        .map(|e| {
            serde_json::json!({
                "id": e.item.id,
                "source": e.item.source,
                "attributes": e.item.attributes,
                "layers": e.grams.keys().collect::<Vec<_>>(),
            })
        })
        .collect();
    let summary = serde_json::json!({
        "store": args.store.display().to_string(),
        "fingerprint": store.fingerprint(),
        "entry_count": store.len(),
        "attribute_counts": store.attribute_counts(),
        "entries": entries,
    });
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

pub fn mask(args: MaskArgs) -> Result<()> {
    let img = imaging::load_rgb(&args.image)?;
    let mut config = MaskConfig::default();
    if let Some(t) = args.threshold {
        config.threshold = t;
    }
    config.closing = !args.no_closing;
    let mask = imaging::extract_mask(&img, &config)?;
    mask.save_png(&args.out)?;
    Ok(())
}
