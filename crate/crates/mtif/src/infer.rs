//! Full-resolution inference.

use std::path::Path;

use mtif_core::fusenet::{fuse_padded, Model};
use mtif_core::text::TextFeatureSet;
use mtif_core::{ColorSpace, Image, ImagePair};

use crate::checkpoint;
use crate::config_file::RunConfig;
use crate::dataset::texts_for;
use crate::descriptions::load_description_cache;
use crate::error::Result;
use crate::io::{load_image, save_image};

/// Fused image at the input size; grayscale when both inputs are.
pub fn fuse_pair(model: &Model<f32>, pair: &ImagePair, texts: &TextFeatureSet) -> Result<Image> {
    let fused = fuse_padded(model, pair, texts)?;
    let gray = pair.a.color() == ColorSpace::Gray && pair.b.color() == ColorSpace::Gray;
    Ok(if gray { fused.to_grayscale() } else { fused })
}

/// Loads a checkpoint, fuses two image files and writes the result.
///
/// `runtime`, when given, must describe the checkpoint's architecture.
/// `embeddings` is consulted only by the precomputed text encoder.
pub fn fuse_files(ckpt: &Path, a: &Path, b: &Path, text: &Path, embeddings: Option<&Path>, out: &Path, runtime: Option<&RunConfig>) -> Result<Image> {
    let state = match runtime {
        Some(r) => checkpoint::load_compatible(ckpt, r)?,
        None => checkpoint::load(ckpt)?,
    };
    let pair = ImagePair::new(load_image(a)?, load_image(b)?)?;
    let desc = load_description_cache(text)?;
    let texts = texts_for(&desc, embeddings, &state.config)?;
    let fused = fuse_pair(&state.model, &pair, &texts)?;
    save_image(out, &fused)?;
    Ok(fused)
}
