//! Run configuration and its invariants.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Task {
    /// Multi-exposure fusion.
    #[serde(rename = "MEF")]
    Mef,
    /// Multi-focus fusion.
    #[serde(rename = "MFF")]
    Mff,
}

/// `{alpha1, alpha2}` weight the level-wise feature terms, `{beta1, beta2}` the base terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha1: f64,
    pub alpha2: f64,
    pub beta1: f64,
    pub beta2: f64,
}

impl LossWeights {
    pub fn for_task(task: Task) -> Self {
        match task {
            Task::Mef => Self {
                alpha1: 10.0,
                alpha2: 1.0,
                beta1: 1.0,
                beta2: 100.0,
            },
            Task::Mff => Self {
                alpha1: 10.0,
                alpha2: 1.0,
                beta1: 1.0,
                beta2: 300.0,
            },
        }
    }
}

/// How crop windows are placed during enrichment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VeMode {
    /// Maximal-saliency center window plus diagonal peripheral windows.
    Saliency,
    /// Uniform random windows.
    Random,
}

/// Switches for the four component ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablation {
    /// Text-guided modulation; when off every modulation block is the identity.
    pub use_tg: bool,
    /// Level-wise feature loss; when off only the base loss is optimized.
    pub use_ml: bool,
    /// Enrichment; when off whole pairs resized to the crop size are used.
    pub use_ve: bool,
    pub ve_mode: VeMode,
}

impl Default for Ablation {
    fn default() -> Self {
        Self {
            use_tg: true,
            use_ml: true,
            use_ve: true,
            ve_mode: VeMode::Saliency,
        }
    }
}

/// Wiring of the text/visual cross-attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TgvmMode {
    /// Visual tokens query text keys/values; output keeps the spatial shape.
    VisualQuery,
    /// Text tokens query visual keys/values; the pooled result drives a
    /// channel-wise affine modulation of the visual features.
    TextQuery,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Config {
    pub task: Task,
    pub loss_weights: LossWeights,
    pub levels: usize,
    pub variants: usize,
    pub learning_rate: f64,
    pub min_learning_rate: f64,
    pub epochs: usize,
    pub crop_size: usize,
    pub channel_widths: Vec<usize>,
    pub heads: usize,
    /// Width of the text embedding consumed by the modulation blocks.
    pub embed_dim: usize,
    /// Width of the embeddings delivered by the text encoder.
    pub text_native_dim: usize,
    pub tgvm_mode: TgvmMode,
    pub ablation: Ablation,
    pub batch_pairs: usize,
    pub validate_every: usize,
    pub seed: u64,
}

impl Config {
    /// Published defaults for a task.
    pub fn for_task(task: Task) -> Self {
        Self {
            task,
            loss_weights: LossWeights::for_task(task),
            levels: 3,
            variants: 5,
            learning_rate: 8e-5,
            min_learning_rate: 1e-6,
            epochs: match task {
                Task::Mef => 100,
                Task::Mff => 45,
            },
            crop_size: 128,
            channel_widths: vec![32, 64, 128],
            heads: 4,
            embed_dim: 256,
            text_native_dim: 256,
            tgvm_mode: TgvmMode::VisualQuery,
            ablation: Ablation::default(),
            batch_pairs: 2,
            validate_every: 5,
            seed: 0,
        }
    }

    /// A narrow network and small crops that train in seconds on one core.
    pub fn desk(task: Task) -> Self {
        Self {
            crop_size: 32,
            channel_widths: vec![8, 16, 32],
            heads: 2,
            embed_dim: 32,
            text_native_dim: 32,
            learning_rate: 6e-3,
            min_learning_rate: 1e-5,
            epochs: 2,
            ..Self::for_task(task)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: alloc::string::String| Err(Error::Config(m));
        if self.levels != 3 {
            return err(alloc::format!(
                "levels = {}, the network has exactly three granularity levels",
                self.levels
            ));
        }
        if self.variants == 0 {
            return err("variants must be at least 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return err(alloc::format!("learning_rate = {} must be positive", self.learning_rate));
        }
        if !(self.min_learning_rate >= 0.0 && self.min_learning_rate <= self.learning_rate) {
            return err(alloc::format!(
                "min_learning_rate = {} must lie in [0, learning_rate]",
                self.min_learning_rate
            ));
        }
        if self.epochs == 0 {
            return err("epochs must be at least 1".into());
        }
        if self.crop_size < 32 || self.crop_size % 4 != 0 {
            return err(alloc::format!(
                "crop_size = {} must be at least 32 and divisible by 4",
                self.crop_size
            ));
        }
        if self.channel_widths.len() != self.levels {
            return err(alloc::format!(
                "{} channel widths given for {} levels",
                self.channel_widths.len(),
                self.levels
            ));
        }
        if self.heads == 0 {
            return err("heads must be at least 1".into());
        }
        for &w in &self.channel_widths {
            if w == 0 || w % self.heads != 0 {
                return err(alloc::format!(
                    "channel width {w} is not a positive multiple of heads = {}",
                    self.heads
                ));
            }
        }
        if self.embed_dim == 0 || self.text_native_dim == 0 {
            return err("embedding widths must be positive".into());
        }
        if self.batch_pairs == 0 {
            return err("batch_pairs must be at least 1".into());
        }
        let w = &self.loss_weights;
        for (name, v) in [("alpha1", w.alpha1), ("alpha2", w.alpha2), ("beta1", w.beta1), ("beta2", w.beta2)] {
            if !(v >= 0.0 && v.is_finite()) {
                return err(alloc::format!("{name} = {v} must be a nonnegative real"));
            }
        }
        if self.ablation.use_ve && self.ablation.ve_mode == VeMode::Saliency && self.variants > 5 {
            return err(alloc::format!(
                "saliency enrichment yields at most 5 variants, {} requested",
                self.variants
            ));
        }
        Ok(())
    }

    /// True when the two configs describe the same parameter layout.
    pub fn same_architecture(&self, other: &Config) -> bool {
        self.levels == other.levels
            && self.channel_widths == other.channel_widths
            && self.heads == other.heads
            && self.embed_dim == other.embed_dim
            && self.text_native_dim == other.text_native_dim
            && self.tgvm_mode == other.tgvm_mode
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn published_defaults() {
        let mef = Config::for_task(Task::Mef);
        assert_eq!(mef.loss_weights, LossWeights { alpha1: 10.0, alpha2: 1.0, beta1: 1.0, beta2: 100.0 });
        assert_eq!((mef.levels, mef.variants, mef.epochs), (3, 5, 100));
        assert_eq!(mef.learning_rate, 8e-5);
        let mff = Config::for_task(Task::Mff);
        assert_eq!(mff.loss_weights.beta2, 300.0);
        assert_eq!(mff.epochs, 45);
        mef.validate().unwrap();
        mff.validate().unwrap();
        Config::desk(Task::Mef).validate().unwrap();
    }

    #[test]
    fn invariant_violations() {
        let base = Config::for_task(Task::Mef);
        let cases: [fn(&mut Config); 7] = [
            |c| c.levels = 0,
            |c| c.variants = 0,
            |c| c.learning_rate = 0.0,
            |c| c.crop_size = 30,
            |c| c.crop_size = 34,
            |c| c.channel_widths = vec![30, 64, 128],
            |c| c.loss_weights.beta1 = -1.0,
        ];
        for f in cases {
            let mut c = base.clone();
            f(&mut c);
            assert!(matches!(c.validate(), Err(Error::Config(_))), "{c:?}");
        }
    }
}
