//! Personal style store: Gram representations of closet items keyed by their
//! texture/fabric attributes.
//!
//! On disk a store is a directory holding `store.json` plus one NSTW
//! container per entry under `grams/`, with one `gram.<layer>` tensor of shape
//! `[N, N]` per style layer.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::container::Container;
use crate::error::{Error, Result};
use crate::imaging::{self, RgbImage};
use crate::nn::Network;
use crate::style::{self, GramMatrix, GramSet, StyleObjective, StyleTerm};

pub const STORE_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "store.json";
const GRAM_DIR: &str = "grams";

/// What a Gram set depends on besides the image. Entries are only
/// comparable when their fingerprints are equal.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fingerprint {
    pub network_id: String,
    pub style_layers: Vec<String>,
    pub canvas: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClosetItem {
    pub id: String,
    pub source: String,
    pub attributes: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StoreEntry {
    pub item: ClosetItem,
    pub grams: GramSet,
    pub fingerprint: Fingerprint,
}

/// Lowercases, trims and deduplicates attribute labels. Empty input is an error.
pub fn normalize_attributes<S: AsRef<str>>(raw: &[S]) -> Result<BTreeSet<String>> {
    let attrs: BTreeSet<String> = raw
        .iter()
        .map(|a| a.as_ref().trim().to_lowercase())
        .filter(|a| !a.is_empty())
        .collect();
    if attrs.is_empty() {
        return Err(Error::BadAttributes("at least one attribute is required".into()));
    }
    Ok(attrs)
}

fn validate_id(id: &str) -> Result<()> {
    let ok = !id.is_empty()
        && !id.starts_with('.')
        && id.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'));
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!(
            "item id `{id}` must be non-empty and use only [A-Za-z0-9._-]"
        )))
    }
}

/// Gram set of one image: canvas placement, normalization, forward, Gram.
pub fn image_grams(network: &Network, image: &RgbImage, fingerprint: &Fingerprint) -> Result<GramSet> {
    let (canvas, _) = imaging::canvas_resize(image, fingerprint.canvas);
    let tensor = imaging::normalize(&canvas);
    let trace = network.forward(&tensor, &fingerprint.style_layers)?;
    style::gram_set(&trace, &fingerprint.style_layers)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectedEntry {
    pub id: String,
    /// Requested attributes this entry carries.
    pub matched: BTreeSet<String>,
    /// Image weight W_s.
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionPlan {
    pub requested: Vec<String>,
    pub cap: usize,
    pub selected: Vec<SelectedEntry>,
    /// Per requested attribute: entries carrying it in the whole store.
    pub store_counts: BTreeMap<String, usize>,
    /// Per requested attribute: selected entries carrying it.
    pub selected_counts: BTreeMap<String, usize>,
}

impl SelectionPlan {
    pub fn mean_weight(&self) -> f64 {
        self.selected.iter().map(|s| s.weight).sum::<f64>() / self.selected.len() as f64
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LayerMeta {
    layer: String,
    filters: usize,
    positions: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ManifestEntry {
    id: String,
    source: String,
    attributes: Vec<String>,
    gram_file: String,
    layers: Vec<LayerMeta>,
    fingerprint: Fingerprint,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    network_id: String,
    style_layers: Vec<String>,
    canvas: u32,
    entries: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StyleStore {
    dir: Option<PathBuf>,
    fingerprint: Fingerprint,
    entries: BTreeMap<String, StoreEntry>,
}

impl StyleStore {
    pub fn in_memory(fingerprint: Fingerprint) -> Self {
        StyleStore {
            dir: None,
            fingerprint,
            entries: BTreeMap::new(),
        }
    }

    /// Creates an empty store in `dir` and writes its manifest.
    pub fn create(dir: impl AsRef<Path>, fingerprint: Fingerprint) -> Result<Self> {
        let dir = dir.as_ref();
        if dir.join(MANIFEST_FILE).exists() {
            return Err(Error::InvalidConfig(format!("a store already exists in {}", dir.display())));
        }
        let mut store = Self::in_memory(fingerprint);
        store.persist(dir)?;
        store.dir = Some(dir.to_path_buf());
        Ok(store)
    }

    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join(MANIFEST_FILE);
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let value: serde_json::Value =
            serde_json::from_slice(&bytes).map_err(|e| Error::CorruptStore(format!("{}: {e}", path.display())))?;
        match value.get("version").and_then(|v| v.as_u64()) {
            Some(v) if v == STORE_VERSION as u64 => {}
            Some(v) => return Err(Error::IncompatibleStore(format!("version {v}, expected {STORE_VERSION}"))),
            None => return Err(Error::IncompatibleStore("manifest has no version".into())),
        }
        let manifest: Manifest =
            serde_json::from_value(value).map_err(|e| Error::CorruptStore(format!("{}: {e}", path.display())))?;

        let fingerprint = Fingerprint {
            network_id: manifest.network_id,
            style_layers: manifest.style_layers,
            canvas: manifest.canvas,
        };
        let mut entries = BTreeMap::new();
        for e in manifest.entries {
            let gram_path = dir.join(&e.gram_file);
            if !gram_path.is_file() {
                return Err(Error::CorruptStore(format!("missing gram file {}", e.gram_file)));
            }
            let container = Container::read_file(&gram_path)
                .map_err(|err| Error::CorruptStore(format!("{}: {err}", e.gram_file)))?;
            let mut grams = GramSet::new();
            for meta in &e.layers {
                let t = container
                    .get(&format!("gram.{}", meta.layer))
                    .ok_or_else(|| Error::CorruptStore(format!("{} lacks gram.{}", e.gram_file, meta.layer)))?;
                if t.shape != [meta.filters, meta.filters] {
                    return Err(Error::CorruptStore(format!(
                        "gram.{} in {} has shape {:?}",
                        meta.layer, e.gram_file, t.shape
                    )));
                }
                grams.insert(
                    meta.layer.clone(),
                    GramMatrix::from_parts(&meta.layer, meta.filters, meta.positions, t.data.clone())?,
                );
            }
            let item = ClosetItem {
                id: e.id.clone(),
                source: e.source,
                attributes: e.attributes.into_iter().collect(),
            };
            entries.insert(
                e.id,
                StoreEntry {
                    item,
                    grams,
                    fingerprint: e.fingerprint,
                },
            );
        }
        Ok(StyleStore {
            dir: Some(dir.to_path_buf()),
            fingerprint,
            entries,
        })
    }

    /// Writes the manifest and every entry's gram file into `dir`.
    pub fn persist(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        let grams_dir = dir.join(GRAM_DIR);
        std::fs::create_dir_all(&grams_dir).map_err(|e| Error::io(&grams_dir, e))?;
        for entry in self.entries.values() {
            self.write_grams(dir, entry)?;
        }
        self.write_manifest(dir)
    }

    fn gram_file(id: &str) -> String {
        format!("{GRAM_DIR}/{id}.nstw")
    }

    fn write_grams(&self, dir: &Path, entry: &StoreEntry) -> Result<()> {
        let mut c = Container::new();
        for (layer, g) in &entry.grams {
            c.push(format!("gram.{layer}"), vec![g.filters(), g.filters()], g.values().to_vec())?;
        }
        c.write_file(dir.join(Self::gram_file(&entry.item.id)))
    }

    fn write_manifest(&self, dir: &Path) -> Result<()> {
        let manifest = Manifest {
            version: STORE_VERSION,
            network_id: self.fingerprint.network_id.clone(),
            style_layers: self.fingerprint.style_layers.clone(),
            canvas: self.fingerprint.canvas,
            entries: self
                .entries
                .values()
                .map(|e| ManifestEntry {
                    id: e.item.id.clone(),
                    source: e.item.source.clone(),
                    attributes: e.item.attributes.iter().cloned().collect(),
                    gram_file: Self::gram_file(&e.item.id),
                    layers: e
                        .grams
                        .values()
                        .map(|g| LayerMeta {
                            layer: g.layer().to_string(),
                            filters: g.filters(),
                            positions: g.positions(),
                        })
                        .collect(),
                    fingerprint: e.fingerprint.clone(),
                })
                .collect(),
        };
        let json = serde_json::to_vec_pretty(&manifest)?;
        let tmp = dir.join(format!("{MANIFEST_FILE}.tmp"));
        let path = dir.join(MANIFEST_FILE);
        std::fs::write(&tmp, json).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))
    }

    pub fn fingerprint(&self) -> &Fingerprint {
        &self.fingerprint
    }

    pub fn directory(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = &StoreEntry> {
        self.entries.values()
    }

    pub fn get(&self, id: &str) -> Option<&StoreEntry> {
        self.entries.get(id)
    }

    /// Every attribute in the store with its entry count.
    pub fn attribute_counts(&self) -> BTreeMap<String, usize> {
        let mut counts = BTreeMap::new();
        for e in self.entries.values() {
            for a in &e.item.attributes {
                *counts.entry(a.clone()).or_insert(0) += 1;
            }
        }
        counts
    }

    /// Decodes the image at `path` and ingests it.
    pub fn ingest<S: AsRef<str>>(
        &mut self,
        id: &str,
        path: impl AsRef<Path>,
        attributes: &[S],
        network: &Network,
    ) -> Result<&StoreEntry> {
        let path = path.as_ref();
        let attrs = normalize_attributes(attributes)?;
        let image = imaging::load_rgb(path)?;
        self.insert(id, &path.display().to_string(), &image, attrs, network)
    }

    /// Ingests an already decoded image; `source` is recorded verbatim.
    pub fn ingest_image<S: AsRef<str>>(
        &mut self,
        id: &str,
        source: &str,
        image: &RgbImage,
        attributes: &[S],
        network: &Network,
    ) -> Result<&StoreEntry> {
        let attrs = normalize_attributes(attributes)?;
        self.insert(id, source, image, attrs, network)
    }

    fn insert(
        &mut self,
        id: &str,
        source: &str,
        image: &RgbImage,
        attributes: BTreeSet<String>,
        network: &Network,
    ) -> Result<&StoreEntry> {
        validate_id(id)?;
        if self.entries.contains_key(id) {
            return Err(Error::Duplicate(id.to_string()));
        }
        if network.id() != self.fingerprint.network_id {
            return Err(Error::IncompatibleStore(format!(
                "store was built with network `{}`, got `{}`",
                self.fingerprint.network_id,
                network.id()
            )));
        }
        let grams = image_grams(network, image, &self.fingerprint)?;
        let entry = StoreEntry {
            item: ClosetItem {
                id: id.to_string(),
                source: source.to_string(),
                attributes,
            },
            grams,
            fingerprint: self.fingerprint.clone(),
        };
        if let Some(dir) = self.dir.clone() {
            self.write_grams(&dir, &entry)?;
            self.entries.insert(id.to_string(), entry);
            if let Err(e) = self.write_manifest(&dir) {
                self.entries.remove(id);
                return Err(e);
            }
        } else {
            self.entries.insert(id.to_string(), entry);
        }
        Ok(&self.entries[id])
    }

    /// Picks up to `cap` entries per requested attribute in ascending id
    /// order, weighting each by the inverse selected frequency of its rarest
    /// requested attribute, rescaled so the weights average to 1.
    pub fn select<S: AsRef<str>>(&self, requested: &[S], cap: usize) -> Result<SelectionPlan> {
        if self.entries.is_empty() {
            return Err(Error::EmptyStore);
        }
        if cap == 0 {
            return Err(Error::InvalidConfig("selection cap must be at least 1".into()));
        }
        let mut wanted: Vec<String> = Vec::new();
        for a in requested {
            let a = a.as_ref().trim().to_lowercase();
            if !a.is_empty() && !wanted.contains(&a) {
                wanted.push(a);
            }
        }
        if wanted.is_empty() {
            return Err(Error::BadAttributes("no attributes requested".into()));
        }
        let usable = || {
            self.entries
                .values()
                .filter(|e| e.fingerprint == self.fingerprint)
        };
        let mut store_counts = BTreeMap::new();
        for a in &wanted {
            let count = usable().filter(|e| e.item.attributes.contains(a)).count();
            if count == 0 {
                return Err(Error::AttributeNotInCloset(a.clone()));
            }
            store_counts.insert(a.clone(), count);
        }

        let mut chosen: BTreeSet<&str> = BTreeSet::new();
        for a in &wanted {
            chosen.extend(
                usable()
                    .filter(|e| e.item.attributes.contains(a))
                    .take(cap)
                    .map(|e| e.item.id.as_str()),
            );
        }
        let matched = |id: &str| -> BTreeSet<String> {
            let attrs = &self.entries[id].item.attributes;
            wanted.iter().filter(|a| attrs.contains(*a)).cloned().collect()
        };
        let mut selected_counts: BTreeMap<String, usize> = wanted.iter().map(|a| (a.clone(), 0)).collect();
        for id in &chosen {
            for a in matched(id) {
                *selected_counts.get_mut(&a).unwrap() += 1;
            }
        }
        let raw: Vec<(String, BTreeSet<String>, f64)> = chosen
            .iter()
            .map(|&id| {
                let m = matched(id);
                let rarest = m.iter().map(|a| selected_counts[a]).min().expect("entry matches a request");
                (id.to_string(), m, 1.0 / rarest as f64)
            })
            .collect();
        let raw_sum: f64 = raw.iter().map(|r| r.2).sum();
        let s = raw.len() as f64;
        let selected = raw
            .into_iter()
            .map(|(id, matched, r)| SelectedEntry {
                id,
                matched,
                weight: r * s / raw_sum,
            })
            .collect();
        Ok(SelectionPlan {
            requested: wanted,
            cap,
            selected,
            store_counts,
            selected_counts,
        })
    }

    /// Style objective for a plan. `layer_weights` defaults to uniform over
    /// the store's style layers.
    pub fn objective(&self, plan: &SelectionPlan, layer_weights: Option<&BTreeMap<String, f64>>) -> Result<StyleObjective> {
        let terms = plan
            .selected
            .iter()
            .map(|s| {
                let entry = self
                    .entries
                    .get(&s.id)
                    .ok_or_else(|| Error::CorruptStore(format!("plan references unknown entry {}", s.id)))?;
                let mut term = StyleTerm::uniform(entry.grams.clone(), s.weight);
                if let Some(w) = layer_weights {
                    term.layer_weights = w.clone();
                }
                Ok(term)
            })
            .collect::<Result<Vec<_>>>()?;
        StyleObjective::new(terms)
    }
}
