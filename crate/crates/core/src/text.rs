//! Multi-grained text descriptions and their embeddings.

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

/// Maximum number of tokens the stub encoder emits per description.
pub const MAX_TOKENS: usize = 32;

/// Three descriptions of one image pair, from fine to coarse.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GrainedDescriptions {
    pub detail: String,
    pub structure: String,
    pub semantic: String,
}

impl GrainedDescriptions {
    pub fn new(detail: impl Into<String>, structure: impl Into<String>, semantic: impl Into<String>) -> Result<Self> {
        let d = Self {
            detail: detail.into(),
            structure: structure.into(),
            semantic: semantic.into(),
        };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, text) in self.named() {
            if text.trim().is_empty() {
                return Err(Error::Schema(alloc::format!("description grain `{name}` is empty")));
            }
        }
        Ok(())
    }

    /// Grains in level order: detail, structure, semantic.
    pub fn grains(&self) -> [&str; 3] {
        [&self.detail, &self.structure, &self.semantic]
    }

    fn named(&self) -> [(&'static str, &str); 3] {
        [
            ("detail", &self.detail),
            ("structure", &self.structure),
            ("semantic", &self.semantic),
        ]
    }
}

/// Row-major `rows x cols` embedding matrix, one row per token.
#[derive(Debug, Clone, PartialEq)]
pub struct TextMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl TextMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 || data.len() != rows * cols {
            return Err(shape_err!(
                "embedding matrix {rows}x{cols} with {} values",
                data.len()
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("embedding contains a non-finite value".into()));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

/// Per-level text embeddings of one image pair.
#[derive(Debug, Clone, PartialEq)]
pub struct TextFeatureSet {
    pub levels: Vec<TextMatrix>,
}

impl TextFeatureSet {
    pub fn new(levels: Vec<TextMatrix>) -> Result<Self> {
        if levels.is_empty() {
            return Err(shape_err!("text feature set has no levels"));
        }
        let cols = levels[0].cols;
        if levels.iter().any(|m| m.cols != cols) {
            return Err(shape_err!("text levels disagree on embedding width"));
        }
        Ok(Self { levels })
    }

    pub fn width(&self) -> usize {
        self.levels[0].cols
    }
}

/// Source of text embeddings.
#[derive(Debug, Clone, PartialEq)]
pub enum TextEncoderProvider {
    /// Deterministic hashed token vectors of width `dim`.
    Stub { dim: usize, seed: u64 },
    /// Embeddings produced offline, already loaded.
    Precomputed(TextFeatureSet),
}

impl TextEncoderProvider {
    pub fn dim(&self) -> usize {
        match self {
            TextEncoderProvider::Stub { dim, .. } => *dim,
            TextEncoderProvider::Precomputed(set) => set.width(),
        }
    }
}

#[inline]
fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xCBF2_9CE4_8422_2325u64, |h, b| {
        (h ^ *b as u64).wrapping_mul(0x0000_0100_0000_01B3)
    })
}

fn token_vector(token: &str, dim: usize, seed: u64) -> Vec<f64> {
    let mut s = seed;
    let mut state = fnv1a64(token.as_bytes()) ^ splitmix64(&mut s);
    let mut v: Vec<f64> = (0..dim)
        .map(|_| (splitmix64(&mut state) >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0)
        .collect();
    let norm = libm::sqrt(v.iter().map(|x| x * x).sum::<f64>());
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    } else {
        v[0] = 1.0;
    }
    v
}

/// Hashed bag-of-tokens embedding: one unit-norm row per whitespace token, at most [`MAX_TOKENS`].
pub fn stub_embed(text: &str, dim: usize, seed: u64) -> Result<TextMatrix> {
    if dim == 0 {
        return Err(shape_err!("embedding width must be positive"));
    }
    let tokens: Vec<&str> = text.split_whitespace().take(MAX_TOKENS).collect();
    if tokens.is_empty() {
        return Err(Error::Schema("cannot embed an empty description".into()));
    }
    let mut data = Vec::with_capacity(tokens.len() * dim);
    for t in &tokens {
        data.extend(token_vector(t, dim, seed));
    }
    TextMatrix::new(tokens.len(), dim, data)
}

/// Embeds grain `l` into level `l`.
pub fn encode_text(desc: &GrainedDescriptions, provider: &TextEncoderProvider) -> Result<TextFeatureSet> {
    desc.validate()?;
    match provider {
        TextEncoderProvider::Stub { dim, seed } => {
            let levels = desc
                .grains()
                .iter()
                .map(|g| stub_embed(g, *dim, *seed))
                .collect::<Result<Vec<_>>>()?;
            TextFeatureSet::new(levels)
        }
        TextEncoderProvider::Precomputed(set) => {
            if set.levels.len() != 3 {
                return Err(shape_err!(
                    "precomputed embeddings have {} levels, expected 3",
                    set.levels.len()
                ));
            }
            Ok(set.clone())
        }
    }
}
