//! Evaluation driver over a directory of fused images.

use std::fmt::Write as _;
use std::path::Path;

use mtif_core::metrics::{evaluate, MetricsReport};
use mtif_core::ImagePair;
use rayon::prelude::*;
use serde::Serialize;

use crate::dataset::DatasetManifest;
use crate::error::{format_err, io_err, HarnessError, Result};
use crate::io::load_image;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalRow {
    pub image: String,
    #[serde(flatten)]
    pub metrics: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub mean: MetricsReport,
    /// Entries without a fused image.
    pub missing: Vec<String>,
}

/// Scores `<fused_dir>/<id>.png` against each manifest pair, in manifest order.
pub fn evaluate_dir(fused_dir: &Path, manifest: &DatasetManifest, strict: bool) -> Result<EvalReport> {
    let mut missing = Vec::new();
    let mut present = Vec::new();
    for e in &manifest.entries {
        let path = fused_dir.join(format!("{}.png", e.id));
        if path.is_file() {
            present.push((e, path));
        } else if strict {
            return Err(HarnessError::Dataset {
                id: e.id.clone(),
                message: format!("no fused image at {}", path.display()),
            });
        } else {
            log::warn!("no fused image for `{}`", e.id);
            missing.push(e.id.clone());
        }
    }
    let rows = present
        .par_iter()
        .map(|(e, path)| -> Result<EvalRow> {
            let pair = ImagePair::new(load_image(&e.a)?, load_image(&e.b)?)?;
            let fused = load_image(path)?;
            Ok(EvalRow {
                image: e.id.clone(),
                metrics: evaluate(&fused, &pair)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let metrics: Vec<MetricsReport> = rows.iter().map(|r| r.metrics).collect();
    Ok(EvalReport {
        mean: MetricsReport::mean(&metrics),
        rows,
        missing,
    })
}

fn csv_line(out: &mut String, name: &str, m: &MetricsReport) {
    let _ = write!(out, "{name}");
    for v in m.fields() {
        let _ = write!(out, ",{v}");
    }
    out.push('\n');
}

pub fn report_csv(report: &EvalReport) -> String {
    let mut out = String::from("image,en,sd,sf,ag,vif,qabf\n");
    for r in &report.rows {
        csv_line(&mut out, &r.image, &r.metrics);
    }
    csv_line(&mut out, "MEAN", &report.mean);
    out
}

pub fn write_csv(path: &Path, report: &EvalReport) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    std::fs::write(path, report_csv(report)).map_err(io_err(path))
}

pub fn write_json(path: &Path, report: &EvalReport) -> Result<()> {
    let json = serde_json::to_string_pretty(report).map_err(|e| format_err(path, e))?;
    std::fs::write(path, json).map_err(io_err(path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{build_manifest, Split};
    use crate::io::save_image;
    use mtif_core::metrics::{average_gradient, entropy, spatial_frequency, std_dev};
    use mtif_core::{ColorSpace, Image, Task};

    fn textured(seed: usize) -> Image {
        Image::from_fn(40, 36, ColorSpace::Rgb, move |y, x, c| (((y * 7 + x * 13 + c * 5 + seed * 11) % 23) as f64) / 22.0).unwrap()
    }

    #[test]
    fn rows_mean_and_missing() {
        let dir = tempfile::tempdir().unwrap();
        let fused = dir.path().join("fused");
        for (i, id) in ["p0", "p1", "p2"].iter().enumerate() {
            let d = dir.path().join("data").join(id);
            let img = textured(i);
            save_image(&d.join("a.png"), &img).unwrap();
            save_image(&d.join("b.png"), &img).unwrap();
            std::fs::write(d.join(format!("{id}.text.json")), r#"{"detail":"d","structure":"s","semantic":"m"}"#).unwrap();
            if i < 2 {
                save_image(&fused.join(format!("{id}.png")), &img).unwrap();
            }
        }
        let (m, _) = build_manifest(&dir.path().join("data"), Task::Mef, Split::Test, true).unwrap();
        assert!(evaluate_dir(&fused, &m, true).is_err());
        let r = evaluate_dir(&fused, &m, false).unwrap();
        assert_eq!(r.missing, ["p2"]);
        assert_eq!(r.rows.len(), 2);

        let csv = report_csv(&r);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 1 + r.rows.len() + 1);
        assert_eq!(lines[0], "image,en,sd,sf,ag,vif,qabf");
        assert!(lines[3].starts_with("MEAN,"));
        let mean_en: f64 = lines[3].split(',').nth(1).unwrap().parse().unwrap();
        assert!((mean_en - (r.rows[0].metrics.en + r.rows[1].metrics.en) / 2.0).abs() < 1e-9);

        let img = load_image(&fused.join("p0.png")).unwrap();
        let row = &r.rows[0].metrics;
        assert!((row.en - entropy(&img)).abs() < 1e-9);
        assert!((row.sd - std_dev(&img)).abs() < 1e-9);
        assert!((row.sf - spatial_frequency(&img)).abs() < 1e-9);
        assert!((row.ag - average_gradient(&img)).abs() < 1e-9);

        let jpath = dir.path().join("r.json");
        write_json(&jpath, &r).unwrap();
        let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(jpath).unwrap()).unwrap();
        assert_eq!(v["rows"][0]["image"], "p0");
        assert!(v["mean"]["qabf"].is_number());
    }
}
