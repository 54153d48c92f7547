//! The fusion network.
//!
//! A shared three-stage encoder turns each image of a pair into a feature
//! pyramid (full, 1/2 and 1/4 resolution). At every level a text-guided
//! modulation block injects that level's text embedding into both streams.
//! Levels 1 and 2 feed lightweight reconstruction heads used only by the
//! training objective; level 3 is concatenated across streams and decoded into
//! the fused image.

mod params;

use alloc::format;
use alloc::vec::Vec;

pub use params::ModelParams;

use crate::autograd::{Graph, Tensor, Var};
use crate::config::{Config, TgvmMode};
use crate::error::{contract, shape_err, Result};
use crate::image::{ColorSpace, Image, ImagePair};
use crate::losses::OutputVars;
use crate::real::Real;
use crate::text::{TextFeatureSet, TextMatrix};

/// Final fused image and the two level-wise reconstructions.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionOutputs {
    pub fused: Image,
    pub intermediate_l1: Image,
    pub intermediate_l2: Image,
}

/// Per-level encoder features of one image, `C_l x H_l x W_l` each.
#[derive(Debug, Clone, PartialEq)]
pub struct VisualPyramid<T> {
    pub levels: Vec<Tensor<T>>,
}

/// A configuration with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub cfg: Config,
    pub params: ModelParams<T>,
}

impl<T: Real> Model<T> {
    pub fn new(cfg: Config, params: ModelParams<T>) -> Result<Self> {
        cfg.validate()?;
        params.check_layout(&cfg)?;
        Ok(Self { cfg, params })
    }

    pub fn init(cfg: Config, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let params = ModelParams::init(&cfg, seed);
        Ok(Self { cfg, params })
    }

    pub fn forward(&self, pair: &ImagePair, texts: &TextFeatureSet) -> Result<FusionOutputs> {
        let mut s = Session::new(self, false);
        let out = s.forward(pair, texts)?;
        s.outputs(out, pair.a.height(), pair.a.width())
    }
}

/// Network bound to a fresh autodiff graph.
pub struct Session<'m, T: Real> {
    pub graph: Graph<T>,
    model: &'m Model<T>,
    vars: Vec<Var>,
}

const NORM_EPS: f64 = 1e-5;
const L2_EPS: f64 = 1e-12;

impl<'m, T: Real> Session<'m, T> {
    /// Puts every parameter on the graph, as trainable leaves when `trainable`.
    pub fn new(model: &'m Model<T>, trainable: bool) -> Self {
        let mut graph = Graph::new();
        let vars = model
            .params
            .tensors()
            .iter()
            .map(|t| {
                if trainable {
                    graph.param(t.clone())
                } else {
                    graph.constant(t.clone())
                }
            })
            .collect();
        Self { graph, model, vars }
    }

    pub fn cfg(&self) -> &Config {
        &self.model.cfg
    }

    /// Graph variables of the parameters, in [`ModelParams`] order.
    pub fn param_vars(&self) -> &[Var] {
        &self.vars
    }

    fn p(&self, name: &str) -> Var {
        let i = self
            .model
            .params
            .index_of(name)
            .unwrap_or_else(|| panic!("missing parameter `{name}`"));
        self.vars[i]
    }

    fn try_p(&self, name: &str) -> Option<Var> {
        self.model.params.index_of(name).map(|i| self.vars[i])
    }

    fn conv(&mut self, x: Var, name: &str, stride: usize) -> Var {
        let w = self.p(&format!("{name}.w"));
        let b = self.try_p(&format!("{name}.b"));
        let k = self.graph.shape(w)[2];
        self.graph.conv2d(x, w, b, stride, k / 2, 1)
    }

    fn depthwise(&mut self, x: Var, name: &str) -> Var {
        let w = self.p(&format!("{name}.w"));
        let c = self.graph.shape(x)[0];
        self.graph.conv2d(x, w, None, 1, 1, c)
    }

    /// `W x + b` applied to the columns of a `[1, in, n]` tensor, giving `[out, n]`.
    fn linear_cols(&mut self, x: Var, name: &str) -> Var {
        let w = self.p(&format!("{name}.w"));
        let b = self.p(&format!("{name}.b"));
        let y = self.graph.matmul(w, x, false, false);
        let s = self.graph.shape(y).to_vec();
        let y = self.graph.reshape(y, &[s[1], s[2]]);
        self.graph.channel_shift(y, b)
    }

    fn layer_norm(&mut self, x: Var, name: &str) -> Var {
        let n = self.graph.channel_norm(x, T::lit(NORM_EPS));
        let w = self.p(&format!("{name}.w"));
        let b = self.p(&format!("{name}.b"));
        let n = self.graph.channel_scale(n, w);
        self.graph.channel_shift(n, b)
    }

    /// Channel ("transposed") self-attention followed by a gated depthwise feed-forward, both residual.
    fn transformer_block(&mut self, x: Var, p: &str) -> Var {
        let heads = self.cfg().heads;
        let s = self.graph.shape(x).to_vec();
        let (c, h, w) = (s[0], s[1], s[2]);
        let dh = c / heads;

        let n = self.layer_norm(x, &format!("{p}.norm1"));
        let qkv = self.conv(n, &format!("{p}.attn.qkv"), 1);
        let qkv = self.depthwise(qkv, &format!("{p}.attn.qkv_dw"));
        let mut split = Vec::with_capacity(3);
        for i in 0..3 {
            let part = self.graph.slice(qkv, i * c, c);
            split.push(self.graph.reshape(part, &[heads, dh, h * w]));
        }
        let (q, k, v) = (split[0], split[1], split[2]);
        let q = self.graph.l2_normalize_last(q, T::lit(L2_EPS));
        let k = self.graph.l2_normalize_last(k, T::lit(L2_EPS));
        let attn = self.graph.matmul(q, k, false, true);
        let temp = self.p(&format!("{p}.attn.temperature"));
        let attn = self.graph.channel_scale(attn, temp);
        let attn = self.graph.softmax_last(attn);
        let out = self.graph.matmul(attn, v, false, false);
        let out = self.graph.reshape(out, &[c, h, w]);
        let out = self.conv(out, &format!("{p}.attn.proj"), 1);
        let x = self.graph.add(x, out);

        let hidden = params::ffn_hidden(c);
        let n = self.layer_norm(x, &format!("{p}.norm2"));
        let f = self.conv(n, &format!("{p}.ffn.in"), 1);
        let f = self.depthwise(f, &format!("{p}.ffn.dw"));
        let gate = self.graph.slice(f, 0, hidden);
        let gate = self.graph.gelu(gate);
        let value = self.graph.slice(f, hidden, hidden);
        let f = self.graph.mul(gate, value);
        let f = self.conv(f, &format!("{p}.ffn.out"), 1);
        self.graph.add(x, f)
    }

    /// Encoder pyramid of one `3 x H x W` image.
    pub fn encode_visual(&mut self, img: Var) -> Result<[Var; 3]> {
        let s = self.graph.shape(img).to_vec();
        if s.len() != 3 || s[0] != 3 {
            return Err(shape_err!("encoder expects a 3 x H x W input, got {s:?}"));
        }
        if s[1] % 4 != 0 || s[2] % 4 != 0 {
            return Err(contract!("input {}x{} is not divisible by 4", s[1], s[2]));
        }
        let x = self.conv(img, "enc1.conv1", 1);
        let x = self.graph.gelu(x);
        let r = self.conv(x, "enc1.conv2", 1);
        let r = self.graph.gelu(r);
        let l1 = self.graph.add(x, r);

        let x = self.conv(l1, "enc2.down", 2);
        let l2 = self.transformer_block(x, "enc2.block");

        let x = self.conv(l2, "enc3.down", 2);
        let l3 = self.transformer_block(x, "enc3.block");
        Ok([l1, l2, l3])
    }

    /// Puts one level's text embedding on the graph as a `[1, tokens, d_t]` constant,
    /// projecting from the native width when it differs.
    pub fn text_input(&mut self, m: &TextMatrix, level: usize) -> Result<Var> {
        let cfg = self.cfg();
        if m.cols != cfg.text_native_dim {
            return Err(contract!(
                "text embedding width {} does not match the configured {}",
                m.cols,
                cfg.text_native_dim
            ));
        }
        let t = self.graph.constant(Tensor::from_f64(&[1, m.rows, m.cols], &m.data));
        match self.try_p(&format!("tgvm{level}.text_in.w")) {
            Some(w) => Ok(self.graph.matmul(t, w, false, true)),
            None => Ok(t),
        }
    }

    /// Text-guided modulation `F + gamma * Attn(F, text)`; identity when guidance is disabled.
    pub fn tgvm(&mut self, fv: Var, text: Var, level: usize) -> Result<Var> {
        if !(1..=3).contains(&level) {
            return Err(contract!("modulation level {level} outside 1..=3"));
        }
        if !self.cfg().ablation.use_tg {
            return Ok(fv);
        }
        Ok(self.tgvm_with_attention(fv, text, level)?.0)
    }

    /// Modulated features and the per-head attention weights, whose last axis sums to 1.
    pub fn tgvm_with_attention(&mut self, fv: Var, text: Var, level: usize) -> Result<(Var, Var)> {
        if !(1..=3).contains(&level) {
            return Err(contract!("modulation level {level} outside 1..=3"));
        }
        if self.graph.shape(fv).len() != 3 {
            return Err(contract!("level features must be C x H x W"));
        }
        let ts = self.graph.shape(text).to_vec();
        if ts.len() != 3 || ts[0] != 1 || ts[2] != self.cfg().embed_dim {
            return Err(contract!(
                "text input {ts:?} is not [1, tokens, {}]",
                self.cfg().embed_dim
            ));
        }
        let s = self.graph.shape(fv).to_vec();
        let (c, h, w) = (s[0], s[1], s[2]);
        if c != self.cfg().channel_widths[level - 1] {
            return Err(contract!("level {level} features have {c} channels"));
        }
        let heads = self.cfg().heads;
        let dh = c / heads;
        let tokens = ts[1];
        let scale = T::lit(1.0 / libm::sqrt(dh as f64));
        let p = format!("tgvm{level}");
        let gamma = self.p(&format!("{p}.gamma"));

        let (delta, weights) = match self.cfg().tgvm_mode {
            TgvmMode::VisualQuery => {
                let q = self.conv(fv, &format!("{p}.q"), 1);
                let q = self.graph.reshape(q, &[heads, dh, h * w]);
                let tt = self.graph.reshape(text, &[1, tokens, ts[2]]);
                let kt = self.text_cols(tt, &format!("{p}.k"));
                let k = self.graph.reshape(kt, &[heads, dh, tokens]);
                let vt = self.text_cols(tt, &format!("{p}.v"));
                let v = self.graph.reshape(vt, &[heads, dh, tokens]);
                let scores = self.graph.matmul(q, k, true, false);
                let scores = self.graph.mul_scalar(scores, scale);
                let attn = self.graph.softmax_last(scores);
                let out = self.graph.matmul(v, attn, false, true);
                let out = self.graph.reshape(out, &[c, h, w]);
                (self.conv(out, &format!("{p}.out"), 1), attn)
            }
            TgvmMode::TextQuery => {
                let qt = self.text_cols(text, &format!("{p}.q"));
                let q = self.graph.reshape(qt, &[heads, dh, tokens]);
                let k = self.conv(fv, &format!("{p}.k"), 1);
                let k = self.graph.reshape(k, &[heads, dh, h * w]);
                let v = self.conv(fv, &format!("{p}.v"), 1);
                let v = self.graph.reshape(v, &[heads, dh, h * w]);
                let scores = self.graph.matmul(q, k, true, false);
                let scores = self.graph.mul_scalar(scores, scale);
                let attn = self.graph.softmax_last(scores);
                let out = self.graph.matmul(v, attn, false, true);
                let out = self.graph.reshape(out, &[1, c, tokens]);
                let pool = self
                    .graph
                    .constant(Tensor::full(&[1, tokens, 1], T::one() / T::lit(tokens as f64)));
                let pooled = self.graph.matmul(out, pool, false, false);
                let s = self.linear_cols(pooled, &format!("{p}.scale"));
                let s = self.graph.reshape(s, &[c]);
                let sh = self.linear_cols(pooled, &format!("{p}.shift"));
                let sh = self.graph.reshape(sh, &[c]);
                let m = self.graph.channel_scale(fv, s);
                (self.graph.channel_shift(m, sh), attn)
            }
        };
        let scaled = self.graph.scale_by(delta, gamma);
        Ok((self.graph.add(fv, scaled), weights))
    }

    /// Projects text tokens `[1, tokens, d_t]` to `[C, tokens]` with `W t + b`.
    fn text_cols(&mut self, text: Var, name: &str) -> Var {
        let w = self.p(&format!("{name}.w"));
        let b = self.p(&format!("{name}.b"));
        let y = self.graph.matmul(w, text, false, true);
        let s = self.graph.shape(y).to_vec();
        let y = self.graph.reshape(y, &[s[1], s[2]]);
        self.graph.channel_shift(y, b)
    }

    /// Reconstruction head for level 1 or 2, at input resolution.
    pub fn decode_intermediate(&mut self, level: usize, a: Var, b: Var) -> Result<Var> {
        if level != 1 && level != 2 {
            return Err(contract!("intermediate decoders exist for levels 1 and 2, not {level}"));
        }
        if self.graph.shape(a) != self.graph.shape(b) {
            return Err(contract!("stream features differ in shape"));
        }
        let x = self.graph.concat(&[a, b]);
        let x = self.conv(x, &format!("dec{level}.conv1"), 1);
        let x = self.graph.gelu(x);
        let x = self.conv(x, &format!("dec{level}.conv2"), 1);
        let x = if level == 2 { self.graph.upsample2x(x) } else { x };
        Ok(self.graph.sigmoid(x))
    }

    /// Concatenates the last-level streams and decodes them to a full-resolution image.
    pub fn fuse_and_decode(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.graph.shape(a) != self.graph.shape(b) {
            return Err(contract!(
                "last-level features differ: {:?} vs {:?}",
                self.graph.shape(a),
                self.graph.shape(b)
            ));
        }
        let x = self.graph.concat(&[a, b]);
        let x = self.conv(x, "head.mix", 1);
        let x = self.graph.gelu(x);
        let x = self.graph.upsample2x(x);
        let x = self.conv(x, "head.up1", 1);
        let x = self.graph.gelu(x);
        let x = self.graph.upsample2x(x);
        let x = self.conv(x, "head.up2", 1);
        let x = self.graph.gelu(x);
        let x = self.conv(x, "head.out", 1);
        Ok(self.graph.sigmoid(x))
    }

    /// Whole pipeline on graph-resident inputs.
    pub fn forward(&mut self, pair: &ImagePair, texts: &TextFeatureSet) -> Result<OutputVars> {
        if texts.levels.len() != 3 {
            return Err(shape_err!("expected 3 text levels, got {}", texts.levels.len()));
        }
        let a = self.graph.constant(Tensor::from_image(&pair.a.to_rgb()));
        let b = self.graph.constant(Tensor::from_image(&pair.b.to_rgb()));
        let pa = self.encode_visual(a)?;
        let pb = self.encode_visual(b)?;
        let mut ma = [pa[0]; 3];
        let mut mb = [pb[0]; 3];
        for l in 0..3 {
            if self.cfg().ablation.use_tg {
                let t = self.text_input(&texts.levels[l], l + 1)?;
                ma[l] = self.tgvm(pa[l], t, l + 1)?;
                mb[l] = self.tgvm(pb[l], t, l + 1)?;
            } else {
                ma[l] = pa[l];
                mb[l] = pb[l];
            }
        }
        let intermediate_l1 = self.decode_intermediate(1, ma[0], mb[0])?;
        let intermediate_l2 = self.decode_intermediate(2, ma[1], mb[1])?;
        let fused = self.fuse_and_decode(ma[2], mb[2])?;
        Ok(OutputVars {
            fused,
            intermediate_l1,
            intermediate_l2,
        })
    }

    pub fn image(&self, v: Var, height: usize, width: usize) -> Result<Image> {
        let data = self.graph.value(v).to_f64();
        Image::from_planar(height, width, ColorSpace::Rgb, &data)
    }

    pub fn outputs(&self, out: OutputVars, height: usize, width: usize) -> Result<FusionOutputs> {
        Ok(FusionOutputs {
            fused: self.image(out.fused, height, width)?,
            intermediate_l1: self.image(out.intermediate_l1, height, width)?,
            intermediate_l2: self.image(out.intermediate_l2, height, width)?,
        })
    }
}

/// Encoder pyramids of both images, computed with shared weights.
pub fn encode_visual<T: Real>(pair: &ImagePair, model: &Model<T>) -> Result<(VisualPyramid<T>, VisualPyramid<T>)> {
    let mut s = Session::new(model, false);
    let a = s.graph.constant(Tensor::from_image(&pair.a.to_rgb()));
    let b = s.graph.constant(Tensor::from_image(&pair.b.to_rgb()));
    let pa = s.encode_visual(a)?;
    let pb = s.encode_visual(b)?;
    let collect = |vars: [Var; 3]| VisualPyramid {
        levels: vars.iter().map(|v| s.graph.value(*v).clone()).collect(),
    };
    Ok((collect(pa), collect(pb)))
}

/// One modulation block applied to standalone level features `C x H x W`.
pub fn tgvm<T: Real>(model: &Model<T>, features: &Tensor<T>, text: &TextMatrix, level: usize) -> Result<Tensor<T>> {
    let mut s = Session::new(model, false);
    let f = s.graph.constant(features.clone());
    let t = s.text_input(text, level)?;
    let out = s.tgvm(f, t, level)?;
    Ok(s.graph.value(out).clone())
}

/// Attention weights of one modulation block, `heads x queries x keys`.
pub fn tgvm_attention<T: Real>(model: &Model<T>, features: &Tensor<T>, text: &TextMatrix, level: usize) -> Result<Tensor<T>> {
    let mut s = Session::new(model, false);
    let f = s.graph.constant(features.clone());
    let t = s.text_input(text, level)?;
    let (_, attn) = s.tgvm_with_attention(f, t, level)?;
    Ok(s.graph.value(attn).clone())
}

/// Plain forward pass.
pub fn forward<T: Real>(pair: &ImagePair, texts: &TextFeatureSet, model: &Model<T>) -> Result<FusionOutputs> {
    model.forward(pair, texts)
}

/// Full-resolution inference for arbitrary sizes: replicate-pads to a multiple of 4 and crops back.
pub fn fuse_padded<T: Real>(model: &Model<T>, pair: &ImagePair, texts: &TextFeatureSet) -> Result<Image> {
    let (h, w, _) = pair.dims();
    let padded = ImagePair::new(pair.a.to_rgb().pad_to_multiple(4), pair.b.to_rgb().pad_to_multiple(4))?;
    let out = model.forward(&padded, texts)?;
    out.fused.crop(0, 0, h, w)
}

#[cfg(test)]
mod tests;
