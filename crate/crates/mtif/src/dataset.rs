//! Dataset discovery.
//!
//! Layout: `root/<pair-id>/a.png`, `b.png`, `<pair-id>.text.json`, and
//! optionally `a.saliency.png` and `<pair-id>.emb`. When `root/<split>` exists
//! it is used as the root.

use std::path::{Path, PathBuf};

use mtif_core::enrich::SaliencyMap;
use mtif_core::text::{encode_text, GrainedDescriptions, TextEncoderProvider, TextFeatureSet};
use mtif_core::{ImagePair, Task};
use serde::{Deserialize, Serialize};

use crate::config_file::{RunConfig, TextEncoder};
use crate::descriptions::{load_description_cache, read_embeddings};
use crate::error::{io_err, HarnessError, Result};
use crate::io::{load_image, load_saliency};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Entry {
    pub id: String,
    pub a: PathBuf,
    pub b: PathBuf,
    pub text: PathBuf,
    pub saliency: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub task: Task,
    pub split: Split,
    pub entries: Vec<Entry>,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Problems found while scanning, one per rejected pair or file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub issues: Vec<(String, String)>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.issues.is_empty()
    }
}

fn dims(path: &Path) -> Result<(u32, u32)> {
    image::image_dimensions(path).map_err(|source| HarnessError::Image {
        path: path.to_path_buf(),
        source,
    })
}

fn check_pair_dir(dir: &Path, id: &str, require_text: bool) -> std::result::Result<Entry, String> {
    let a = dir.join("a.png");
    let b = dir.join("b.png");
    let text = dir.join(format!("{id}.text.json"));
    for (p, what) in [(&a, "a.png"), (&b, "b.png")] {
        if !p.is_file() {
            return Err(format!("missing {what}"));
        }
    }
    if require_text && !text.is_file() {
        return Err(format!("missing description cache {id}.text.json"));
    }
    let (da, db) = (dims(&a).map_err(|e| e.to_string())?, dims(&b).map_err(|e| e.to_string())?);
    if da != db {
        return Err(format!("dimension mismatch: a is {}x{}, b is {}x{}", da.0, da.1, db.0, db.1));
    }
    if require_text {
        load_description_cache(&text).map_err(|e| e.to_string())?;
    }
    let saliency = Some(dir.join("a.saliency.png")).filter(|p| p.is_file());
    if let Some(s) = &saliency {
        if dims(s).map_err(|e| e.to_string())? != da {
            return Err("a.saliency.png does not match the image size".into());
        }
    }
    let embeddings = Some(dir.join(format!("{id}.emb"))).filter(|p| p.is_file());
    Ok(Entry {
        id: id.to_string(),
        a,
        b,
        text,
        saliency,
        embeddings,
    })
}

/// Scans `root` for pairs; rejected pairs go to the report, or fail the scan when `strict`.
pub fn scan(root: &Path, task: Task, split: Split, strict: bool, require_text: bool) -> Result<(DatasetManifest, ValidationReport)> {
    let split_dir = root.join(split.dir_name());
    let base = if split_dir.is_dir() { split_dir } else { root.to_path_buf() };
    let mut ids: Vec<String> = std::fs::read_dir(&base)
        .map_err(io_err(&base))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .filter_map(|e| e.file_name().into_string().ok())
        .filter(|n| n != "train" && n != "test")
        .collect();
    ids.sort();
    let mut report = ValidationReport::default();
    let mut entries = Vec::new();
    for id in ids {
        match check_pair_dir(&base.join(&id), &id, require_text) {
            Ok(e) => entries.push(e),
            Err(message) if strict => return Err(HarnessError::Dataset { id, message }),
            Err(message) => {
                log::warn!("skipping pair `{id}`: {message}");
                report.issues.push((id, message));
            }
        }
    }
    if entries.is_empty() {
        log::warn!("no usable pairs under {}", base.display());
    }
    Ok((DatasetManifest { task, split, entries }, report))
}

pub fn build_manifest(root: &Path, task: Task, split: Split, strict: bool) -> Result<(DatasetManifest, ValidationReport)> {
    scan(root, task, split, strict, true)
}

/// A pair with its description and embeddings, ready for training or inference.
#[derive(Debug, Clone)]
pub struct LoadedPair {
    pub id: String,
    pub pair: ImagePair,
    pub descriptions: GrainedDescriptions,
    pub texts: TextFeatureSet,
    pub saliency: Option<SaliencyMap>,
}

/// Embeddings for one pair under the configured encoder.
pub fn texts_for(desc: &GrainedDescriptions, embeddings: Option<&Path>, cfg: &RunConfig) -> Result<TextFeatureSet> {
    let provider = match cfg.text.encoder {
        TextEncoder::Stub => TextEncoderProvider::Stub {
            dim: cfg.model.text_native_dim,
            seed: cfg.text.seed,
        },
        TextEncoder::Precomputed => {
            let path = embeddings.ok_or_else(|| HarnessError::Io {
                path: PathBuf::from("<pair>.emb"),
                source: std::io::Error::new(std::io::ErrorKind::NotFound, "precomputed embeddings requested but none found"),
            })?;
            TextEncoderProvider::Precomputed(read_embeddings(path)?)
        }
    };
    Ok(encode_text(desc, &provider)?)
}

pub fn load_entry(entry: &Entry, cfg: &RunConfig) -> Result<LoadedPair> {
    let dataset_err = |message: String| HarnessError::Dataset {
        id: entry.id.clone(),
        message,
    };
    let pair = ImagePair::new(load_image(&entry.a)?, load_image(&entry.b)?).map_err(|e| dataset_err(e.to_string()))?;
    let descriptions = load_description_cache(&entry.text)?;
    let texts = texts_for(&descriptions, entry.embeddings.as_deref(), cfg)?;
    let (h, w, _) = pair.dims();
    let saliency = entry.saliency.as_deref().map(|p| load_saliency(p, h, w)).transpose()?;
    Ok(LoadedPair {
        id: entry.id.clone(),
        pair,
        descriptions,
        texts,
        saliency,
    })
}
