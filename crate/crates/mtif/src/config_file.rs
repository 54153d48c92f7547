//! TOML run configuration.
//!
//! A file names a `task` and optionally a `preset` (`full` or `desk`, default
//! `full`); every other top-level key overrides the matching field of the
//! preset, and `[text]` selects the text encoder:
//!
//! ```toml
//! task = "MFF"
//! preset = "desk"
//! epochs = 3
//! [ablation]
//! use_ml = false
//! [text]
//! encoder = "stub"
//! ```

use std::path::Path;

use mtif_core::{Config, Task};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::error::{format_err, io_err, Result};

pub const SEED_ENV: &str = "MTIF_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TextEncoder {
    /// Hashed token vectors of width `text_native_dim`.
    #[default]
    Stub,
    /// `<pair-id>.emb` containers next to each pair.
    Precomputed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct TextSettings {
    pub encoder: TextEncoder,
    pub seed: u64,
}

/// Network/training configuration plus harness-only settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: Config,
    pub text: TextSettings,
}

impl RunConfig {
    pub fn new(model: Config) -> Self {
        Self {
            model,
            text: TextSettings::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
enum Preset {
    #[default]
    Full,
    Desk,
}

/// Overlays `over` onto `base`, refusing keys `base` does not have.
fn merge(base: &mut Table, over: Table, prefix: &str) -> std::result::Result<(), String> {
    for (k, v) in over {
        let name = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match (base.get_mut(&k), v) {
            (None, _) => return Err(format!("unknown key `{name}`")),
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o, &name)?,
            (Some(slot), v) => *slot = v,
        }
    }
    Ok(())
}

pub fn parse_config(text: &str, origin: &Path) -> Result<RunConfig> {
    let mut table: Table = text.parse().map_err(|e| format_err(origin, e))?;
    let take = |t: &mut Table, key: &str| t.remove(key);
    let task: Task = match take(&mut table, "task") {
        Some(v) => v.try_into().map_err(|e| format_err(origin, e))?,
        None => return Err(format_err(origin, "missing `task` (\"MEF\" or \"MFF\")")),
    };
    let preset: Preset = match take(&mut table, "preset") {
        Some(v) => v.try_into().map_err(|e| format_err(origin, e))?,
        None => Preset::default(),
    };
    let text_settings: TextSettings = match take(&mut table, "text") {
        Some(v) => v.try_into().map_err(|e| format_err(origin, e))?,
        None => TextSettings::default(),
    };
    let base = match preset {
        Preset::Full => Config::for_task(task),
        Preset::Desk => Config::desk(task),
    };
    let mut merged = match Value::try_from(&base).map_err(|e| format_err(origin, e))? {
        Value::Table(t) => t,
        _ => unreachable!("a config serializes to a table"),
    };
    // The loss weights follow the task unless overridden explicitly.
    merge(&mut merged, table, "").map_err(|e| format_err(origin, e))?;
    let model: Config = Value::Table(merged).try_into().map_err(|e| format_err(origin, e))?;
    model.validate().map_err(|e| format_err(origin, e))?;
    Ok(RunConfig {
        model,
        text: text_settings,
    })
}

/// Reads a config file and applies the seed override from the environment.
pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let mut cfg = parse_config(&text, path)?;
    apply_env(&mut cfg, std::env::var(SEED_ENV).ok().as_deref()).map_err(|e| format_err(path, e))?;
    Ok(cfg)
}

/// `MTIF_SEED` replaces the configured seed.
pub fn apply_env(cfg: &mut RunConfig, seed: Option<&str>) -> std::result::Result<(), String> {
    if let Some(s) = seed {
        cfg.model.seed = s
            .trim()
            .parse()
            .map_err(|_| format!("{SEED_ENV}={s} is not an unsigned integer"))?;
    }
    Ok(())
}
