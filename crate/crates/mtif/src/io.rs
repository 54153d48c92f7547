//! 8-bit PNG images in and out.

use std::path::Path;

use image::{DynamicImage, GrayImage, RgbImage};
use mtif_core::enrich::SaliencyMap;
use mtif_core::image::Plane;
use mtif_core::{ColorSpace, Image};

use crate::error::{format_err, HarnessError, Result};

/// Reads an 8-bit grayscale or RGB(A) image; alpha is dropped.
pub fn load_image(path: &Path) -> Result<Image> {
    let dynimg = image::open(path).map_err(|source| HarnessError::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let (w, h) = (dynimg.width() as usize, dynimg.height() as usize);
    let (color, bytes) = match dynimg {
        DynamicImage::ImageLuma8(g) => (ColorSpace::Gray, g.into_raw()),
        DynamicImage::ImageLumaA8(_) => (ColorSpace::Gray, dynimg.to_luma8().into_raw()),
        DynamicImage::ImageRgb8(c) => (ColorSpace::Rgb, c.into_raw()),
        DynamicImage::ImageRgba8(_) => (ColorSpace::Rgb, dynimg.to_rgb8().into_raw()),
        other => {
            return Err(format_err(path, format!("unsupported pixel format {:?}, expected 8-bit", other.color())));
        }
    };
    let data = bytes.iter().map(|b| *b as f64 / 255.0).collect();
    Image::new(h, w, color, data).map_err(|e| format_err(path, e))
}

fn to_bytes(data: &[f64]) -> Vec<u8> {
    data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
}

/// Writes an image as 8-bit PNG, creating parent directories.
pub fn save_image(path: &Path, img: &Image) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(crate::error::io_err(dir))?;
    }
    let (w, h) = (img.width() as u32, img.height() as u32);
    let bytes = to_bytes(img.data());
    let res = match img.color() {
        ColorSpace::Gray => GrayImage::from_raw(w, h, bytes).map(|b| b.save(path)),
        ColorSpace::Rgb => RgbImage::from_raw(w, h, bytes).map(|b| b.save(path)),
    };
    match res {
        Some(r) => r.map_err(|source| HarnessError::Image {
            path: path.to_path_buf(),
            source,
        }),
        None => Err(format_err(path, "buffer does not match image dimensions")),
    }
}

/// Reads a saliency sidecar, which must match the image it belongs to.
pub fn load_saliency(path: &Path, height: usize, width: usize) -> Result<SaliencyMap> {
    let img = load_image(path)?.to_grayscale();
    let plane = Plane::new(img.height(), img.width(), img.into_data());
    SaliencyMap::from_external(plane, height, width).map_err(|e| format_err(path, e))
}
