//! Checkpoint container.
//!
//! Layout: `MTIFCKPT`, `u32` format version, `u64` header length, a JSON
//! header, then little-endian `f32` payload: all parameters in header order,
//! followed by the optimizer's first and second moments when present.
//! Writes go to a temporary file in the target directory and are renamed
//! into place.

use std::io::Write;
use std::path::Path;

use mtif_core::autograd::Tensor;
use mtif_core::fusenet::{Model, ModelParams};
use mtif_core::losses::LossBreakdown;
use mtif_core::optim::Adam;
use serde::{Deserialize, Serialize};

use crate::config_file::RunConfig;
use crate::error::{io_err, HarnessError, Result};

pub const MAGIC: &[u8; 8] = b"MTIFCKPT";
pub const VERSION: u32 = 1;

/// Where a run stands.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Progress {
    /// Epoch currently in progress.
    pub epoch: u64,
    /// Batches of that epoch already consumed.
    pub batch_in_epoch: u64,
    /// Optimizer steps taken in total.
    pub step: u64,
    pub loss_history: Vec<LossBreakdown>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: RunConfig,
    progress: Progress,
    tensors: Vec<(String, Vec<usize>)>,
    adam_t: Option<u64>,
}

/// Everything needed to continue or deploy a run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub config: RunConfig,
    pub model: Model<f32>,
    pub adam: Adam<f32>,
    pub progress: Progress,
}

fn ckpt_err(path: &Path, message: impl std::fmt::Display) -> HarnessError {
    HarnessError::Checkpoint {
        path: path.to_path_buf(),
        message: message.to_string(),
    }
}

fn encode(config: &RunConfig, params: &ModelParams<f32>, adam: Option<&Adam<f32>>, progress: &Progress) -> serde_json::Result<Vec<u8>> {
    let header = Header {
        config: config.clone(),
        progress: progress.clone(),
        tensors: params.iter().map(|(n, t)| (n.to_string(), t.shape().to_vec())).collect(),
        adam_t: adam.map(|a| a.t),
    };
    let json = serde_json::to_vec(&header)?;
    let mut buf = Vec::with_capacity(json.len() + 4 * params.num_scalars() * 3 + 24);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    let mut put = |ts: &[Tensor<f32>]| {
        for t in ts {
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
    };
    put(params.tensors());
    if let Some(a) = adam {
        put(&a.m);
        put(&a.v);
    }
    Ok(buf)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err(dir))?;
    tmp.write_all(bytes).map_err(io_err(tmp.path()))?;
    tmp.as_file().sync_all().map_err(io_err(tmp.path()))?;
    tmp.persist(path).map_err(|e| HarnessError::Io {
        path: path.to_path_buf(),
        source: e.error,
    })?;
    Ok(())
}

pub fn save(path: &Path, state: &TrainState) -> Result<()> {
    let bytes = encode(&state.config, &state.model.params, Some(&state.adam), &state.progress).map_err(|e| ckpt_err(path, e))?;
    write_atomic(path, &bytes)
}

/// Parameters and config only, for deployment.
pub fn save_model(path: &Path, config: &RunConfig, model: &Model<f32>) -> Result<()> {
    let bytes = encode(config, &model.params, None, &Progress::default()).map_err(|e| ckpt_err(path, e))?;
    write_atomic(path, &bytes)
}

pub fn load(path: &Path) -> Result<TrainState> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    if bytes.get(..8) != Some(MAGIC.as_slice()) {
        return Err(ckpt_err(path, "not a checkpoint"));
    }
    let version = bytes
        .get(8..12)
        .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
        .ok_or_else(|| ckpt_err(path, "truncated header"))?;
    if version != VERSION {
        return Err(ckpt_err(path, format!("format version {version}, expected {VERSION}")));
    }
    let hlen = bytes
        .get(12..20)
        .map(|b| u64::from_le_bytes(b.try_into().unwrap()) as usize)
        .ok_or_else(|| ckpt_err(path, "truncated header"))?;
    let json = bytes.get(20..20 + hlen).ok_or_else(|| ckpt_err(path, "truncated header"))?;
    let header: Header = serde_json::from_slice(json).map_err(|e| ckpt_err(path, e))?;
    let mut floats = bytes[20 + hlen..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()));
    let payload_len = (bytes.len() - 20 - hlen) / 4;
    let mut read = |shapes: &[(String, Vec<usize>)]| -> Result<Vec<Tensor<f32>>> {
        shapes
            .iter()
            .map(|(name, shape)| {
                let n: usize = shape.iter().product();
                let data: Vec<f32> = floats.by_ref().take(n).collect();
                if data.len() != n {
                    return Err(ckpt_err(path, format!("payload ends inside `{name}`")));
                }
                Ok(Tensor::new(shape, data))
            })
            .collect()
    };
    let tensors = read(&header.tensors)?;
    let params = ModelParams::from_parts(header.tensors.iter().map(|(n, _)| n.clone()).zip(tensors).collect())?;
    let model = Model::new(header.config.model.clone(), params).map_err(|e| ckpt_err(path, e))?;
    let adam = match header.adam_t {
        Some(t) => {
            let m = read(&header.tensors)?;
            let v = read(&header.tensors)?;
            Adam { m, v, t }
        }
        None => Adam::new(model.params.tensors()),
    };
    let expected = model.params.num_scalars() * if header.adam_t.is_some() { 3 } else { 1 };
    if payload_len != expected {
        return Err(ckpt_err(path, format!("{payload_len} payload values, expected {expected}")));
    }
    Ok(TrainState {
        config: header.config,
        model,
        adam,
        progress: header.progress,
    })
}

/// Loads a checkpoint whose architecture must equal `runtime`'s.
pub fn load_compatible(path: &Path, runtime: &RunConfig) -> Result<TrainState> {
    let state = load(path)?;
    if !state.config.model.same_architecture(&runtime.model) {
        return Err(ckpt_err(path, "architecture differs from the runtime configuration"));
    }
    if state.config.text != runtime.text {
        return Err(ckpt_err(path, "text encoder settings differ from the runtime configuration"));
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use mtif_core::{Config, Task};

    fn state() -> TrainState {
        let mut cfg = Config::desk(Task::Mef);
        cfg.channel_widths = vec![4, 8, 8];
        let model = Model::<f32>::init(cfg.clone(), 3).unwrap();
        let mut adam = Adam::new(model.params.tensors());
        adam.t = 7;
        adam.m[0].data_mut()[0] = 0.25;
        TrainState {
            config: RunConfig::new(cfg),
            model,
            adam,
            progress: Progress {
                epoch: 1,
                batch_in_epoch: 2,
                step: 9,
                loss_history: vec![LossBreakdown { total: 1.5, ..Default::default() }],
            },
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.mtif");
        let s = state();
        save(&p, &s).unwrap();
        assert_eq!(load(&p).unwrap(), s);
        let q = dir.path().join("m.mtif");
        save_model(&q, &s.config, &s.model).unwrap();
        let back = load(&q).unwrap();
        assert_eq!(back.model, s.model);
        assert_eq!(back.adam.t, 0);
        let names: Vec<_> = std::fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
        assert_eq!(names.len(), 2, "temporary files left behind: {names:?}");
    }

    #[test]
    fn mismatches_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.mtif");
        let s = state();
        save(&p, &s).unwrap();
        let mut other = s.config.clone();
        other.model.channel_widths = vec![8, 8, 8];
        assert!(matches!(load_compatible(&p, &other), Err(HarnessError::Checkpoint { .. })));
        let mut lr_only = s.config.clone();
        lr_only.model.learning_rate = 1.0;
        assert!(load_compatible(&p, &lr_only).is_ok());

        let mut bytes = std::fs::read(&p).unwrap();
        bytes.truncate(bytes.len() - 4);
        std::fs::write(&p, &bytes).unwrap();
        assert!(load(&p).is_err());
        std::fs::write(&p, b"garbage").unwrap();
        assert!(load(&p).is_err());
    }
}
