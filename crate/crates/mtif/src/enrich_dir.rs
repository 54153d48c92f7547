//! Offline enrichment of a pair directory into crop variants.

use std::path::Path;

use mtif_core::enrich::{partition_with_rng, stream_rng, CropWindow};
use mtif_core::train::pair_saliency;
use mtif_core::{Config, ImagePair, VeMode};
use serde::{Deserialize, Serialize};

use crate::dataset::{scan, Split};
use crate::error::{format_err, io_err, Result};
use crate::io::{load_image, load_saliency, save_image};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnrichedEntry {
    pub id: String,
    pub height: usize,
    pub width: usize,
    pub windows: Vec<CropWindow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnrichManifest {
    pub crop_size: usize,
    pub mode: VeMode,
    pub seed: u64,
    pub pairs: Vec<EnrichedEntry>,
}

/// Crops every pair under `input` into `out/<id>/v<n>_a.png` and `v<n>_b.png`.
pub fn enrich_dir(input: &Path, out: &Path, cfg: &Config) -> Result<EnrichManifest> {
    cfg.validate()?;
    let (manifest, _) = scan(input, cfg.task, Split::Train, false, false)?;
    let mut pairs = Vec::with_capacity(manifest.len());
    for (index, entry) in manifest.entries.iter().enumerate() {
        let pair = ImagePair::new(load_image(&entry.a)?, load_image(&entry.b)?)?;
        let (h, w, _) = pair.dims();
        let map = match &entry.saliency {
            Some(p) => load_saliency(p, h, w)?,
            None => pair_saliency(&pair)?,
        };
        let mut rng = stream_rng(cfg.seed, 0, index as u64);
        let set = partition_with_rng(&pair, &map, cfg, &mut rng)?;
        let dir = out.join(&entry.id);
        for (n, v) in set.variants.iter().enumerate() {
            save_image(&dir.join(format!("v{n}_a.png")), &v.a)?;
            save_image(&dir.join(format!("v{n}_b.png")), &v.b)?;
        }
        pairs.push(EnrichedEntry {
            id: entry.id.clone(),
            height: h,
            width: w,
            windows: set.windows,
        });
    }
    let result = EnrichManifest {
        crop_size: cfg.crop_size,
        mode: cfg.ablation.ve_mode,
        seed: cfg.seed,
        pairs,
    };
    std::fs::create_dir_all(out).map_err(io_err(out))?;
    let path = out.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&result).map_err(|e| format_err(&path, e))?;
    std::fs::write(&path, json).map_err(io_err(&path))?;
    Ok(result)
}
