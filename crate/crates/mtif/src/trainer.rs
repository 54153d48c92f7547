//! Training driver: batching, logging, checkpoints and validation.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use mtif_core::fusenet::Model;
use mtif_core::losses::LossBreakdown;
use mtif_core::metrics::{evaluate, MetricsReport};
use mtif_core::optim::{cosine_lr, Adam};
use mtif_core::train::{apply, epoch_order, reduce, sample_gradients, steps_per_epoch, training_variants};
use mtif_core::ImagePair;
use rayon::prelude::*;
use serde::Serialize;

use crate::checkpoint::{self, Progress, TrainState};
use crate::config_file::RunConfig;
use crate::dataset::{load_entry, DatasetManifest, LoadedPair};
use crate::error::{format_err, io_err, HarnessError, Result};
use crate::infer::fuse_pair;

pub const LOG_FILE: &str = "train_log.jsonl";
pub const VAL_FILE: &str = "val_log.jsonl";
pub const LAST_CHECKPOINT: &str = "last.mtif";

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub out_dir: PathBuf,
    /// Stop after this many optimizer steps in total, saving `last.mtif`.
    pub max_steps: Option<u64>,
    /// Write a checkpoint at the end of every epoch.
    pub epoch_checkpoints: bool,
}

impl TrainOptions {
    pub fn new(out_dir: impl Into<PathBuf>) -> Self {
        Self {
            out_dir: out_dir.into(),
            max_steps: None,
            epoch_checkpoints: true,
        }
    }
}

#[derive(Serialize)]
struct LogLine<'a> {
    step: u64,
    epoch: u64,
    lr: f64,
    pairs: &'a [String],
    #[serde(flatten)]
    loss: &'a LossBreakdown,
}

#[derive(Serialize)]
struct ValLine {
    epoch: u64,
    images: usize,
    #[serde(flatten)]
    mean: MetricsReport,
}

#[derive(Serialize)]
struct NonFiniteDump<'a> {
    step: u64,
    epoch: u64,
    lr: f64,
    pairs: &'a [String],
    windows_per_pair: usize,
    loss: &'a LossBreakdown,
    error: String,
}

pub fn load_pairs(manifest: &DatasetManifest, cfg: &RunConfig) -> Result<Vec<LoadedPair>> {
    manifest.entries.iter().map(|e| load_entry(e, cfg)).collect()
}

/// Fresh parameters and optimizer for `cfg`.
pub fn new_state(cfg: RunConfig) -> Result<TrainState> {
    let model = Model::<f32>::init(cfg.model.clone(), cfg.model.seed)?;
    let adam = Adam::new(model.params.tensors());
    Ok(TrainState {
        config: cfg,
        model,
        adam,
        progress: Progress::default(),
    })
}

fn append_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path).map_err(io_err(path))?;
    let line = serde_json::to_string(value).map_err(|e| format_err(path, e))?;
    writeln!(f, "{line}").map_err(io_err(path))
}

/// Mean metrics of the fused validation pairs; pairs too small for a metric are skipped.
pub fn validate(model: &Model<f32>, pairs: &[LoadedPair]) -> Result<(usize, MetricsReport)> {
    let rows: Vec<MetricsReport> = pairs
        .par_iter()
        .map(|p| -> Result<Option<MetricsReport>> {
            let fused = fuse_pair(model, &p.pair, &p.texts)?;
            match evaluate(&fused, &p.pair) {
                Ok(r) => Ok(Some(r)),
                Err(e) => {
                    log::warn!("validation skips `{}`: {e}", p.id);
                    Ok(None)
                }
            }
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    Ok((rows.len(), MetricsReport::mean(&rows)))
}

/// Runs (or resumes) training until the configured epochs or `max_steps` are done.
pub fn train(mut state: TrainState, pairs: &[LoadedPair], validation: &[LoadedPair], opts: &TrainOptions) -> Result<TrainState> {
    if pairs.is_empty() {
        return Err(HarnessError::Dataset {
            id: "<none>".into(),
            message: "training needs at least one pair".into(),
        });
    }
    std::fs::create_dir_all(&opts.out_dir).map_err(io_err(&opts.out_dir))?;
    let log_path = opts.out_dir.join(LOG_FILE);
    let cfg = state.config.model.clone();
    let spe = steps_per_epoch(pairs.len(), cfg.batch_pairs) as u64;
    let total_steps = cfg.epochs as u64 * spe;

    while state.progress.epoch < cfg.epochs as u64 {
        let epoch = state.progress.epoch;
        let order = epoch_order(pairs.len(), cfg.seed, epoch);
        for b in state.progress.batch_in_epoch..spe {
            if opts.max_steps.is_some_and(|m| state.progress.step >= m) {
                checkpoint::save(&opts.out_dir.join(LAST_CHECKPOINT), &state)?;
                return Ok(state);
            }
            let lo = b as usize * cfg.batch_pairs;
            let idx = &order[lo..(lo + cfg.batch_pairs).min(order.len())];
            let mut samples: Vec<(ImagePair, usize)> = Vec::new();
            for &i in idx {
                let p = &pairs[i];
                for v in training_variants(&p.pair, p.saliency.as_ref(), &cfg, epoch, i as u64)? {
                    samples.push((v, i));
                }
            }
            let ids: Vec<String> = idx.iter().map(|i| pairs[*i].id.clone()).collect();
            let lr = cosine_lr(cfg.learning_rate, cfg.min_learning_rate, state.progress.step, total_steps);
            let weight = 1.0 / samples.len() as f32;
            let model = &state.model;
            let parts = samples
                .par_iter()
                .map(|(v, i)| sample_gradients(model, v, &pairs[*i].texts, weight))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            let (grads, loss) = reduce(parts)?;
            if let Err(e) = apply(&mut state.model, &mut state.adam, &grads, &loss, lr) {
                let stem = format!("nonfinite_step{}", state.progress.step);
                let dump = NonFiniteDump {
                    step: state.progress.step,
                    epoch,
                    lr,
                    pairs: &ids,
                    windows_per_pair: samples.len() / idx.len().max(1),
                    loss: &loss,
                    error: e.to_string(),
                };
                let path = opts.out_dir.join(format!("{stem}.json"));
                std::fs::write(&path, serde_json::to_string_pretty(&dump).unwrap_or_default()).map_err(io_err(&path))?;
                checkpoint::save(&opts.out_dir.join(format!("{stem}.mtif")), &state)?;
                log::error!("non-finite step {}; diagnostics in {}", state.progress.step, path.display());
                return Err(e.into());
            }
            append_json(
                &log_path,
                &LogLine {
                    step: state.progress.step,
                    epoch,
                    lr,
                    pairs: &ids,
                    loss: &loss,
                },
            )?;
            state.progress.step += 1;
            state.progress.batch_in_epoch = b + 1;
            state.progress.loss_history.push(loss);
            log::debug!("step {} loss {:.6}", state.progress.step, loss.total);
        }
        state.progress.epoch += 1;
        state.progress.batch_in_epoch = 0;
        log::info!(
            "epoch {} done, last loss {:.6}",
            state.progress.epoch,
            state.progress.loss_history.last().map_or(f64::NAN, |l| l.total)
        );
        if opts.epoch_checkpoints {
            checkpoint::save(&opts.out_dir.join(format!("epoch{:04}.mtif", state.progress.epoch)), &state)?;
            checkpoint::save(&opts.out_dir.join(LAST_CHECKPOINT), &state)?;
        }
        if !validation.is_empty() && cfg.validate_every > 0 && state.progress.epoch % cfg.validate_every as u64 == 0 {
            let (images, mean) = validate(&state.model, validation)?;
            append_json(&opts.out_dir.join(VAL_FILE), &ValLine { epoch: state.progress.epoch, images, mean })?;
        }
    }
    checkpoint::save(&opts.out_dir.join(LAST_CHECKPOINT), &state)?;
    Ok(state)
}
