use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::Tensor;
use crate::config::{Config, TgvmMode};
use crate::error::{shape_err, Error, Result};
use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Init {
    /// Uniform in `+-1/sqrt(fan_in)`.
    Fan(usize),
    Ones,
    Zeros,
}

/// Named, ordered collection of every learnable tensor of the network.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: BTreeMap<String, usize>,
}

impl<T: Real> ModelParams<T> {
    pub fn from_parts(parts: Vec<(String, Tensor<T>)>) -> Result<Self> {
        let mut p = Self {
            names: Vec::new(),
            tensors: Vec::new(),
            index: BTreeMap::new(),
        };
        for (name, t) in parts {
            if t.data().iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("parameter `{name}`")));
            }
            if p.index.insert(name.clone(), p.names.len()).is_some() {
                return Err(shape_err!("duplicate parameter `{name}`"));
            }
            p.names.push(name);
            p.tensors.push(t);
        }
        Ok(p)
    }

    /// Random initialization of the layout implied by `cfg`.
    pub fn init(cfg: &Config, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let parts = layout(cfg)
            .into_iter()
            .map(|(name, shape, init)| {
                let n: usize = shape.iter().product();
                let data = match init {
                    Init::Ones => alloc::vec![T::one(); n],
                    Init::Zeros => alloc::vec![T::zero(); n],
                    Init::Fan(fan_in) => {
                        let bound = 1.0 / libm::sqrt(fan_in as f64);
                        (0..n)
                            .map(|_| T::lit((rng.random::<f64>() * 2.0 - 1.0) * bound))
                            .collect()
                    }
                };
                (name, Tensor::new(&shape, data))
            })
            .collect();
        Self::from_parts(parts).expect("generated layout is consistent")
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Total number of scalars.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.index_of(name).map(move |i| &mut self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }

    /// Checks names and shapes against the layout implied by `cfg`.
    pub fn check_layout(&self, cfg: &Config) -> Result<()> {
        let expected = layout(cfg);
        if expected.len() != self.len() {
            return Err(shape_err!(
                "parameter count {} does not match the configured architecture ({})",
                self.len(),
                expected.len()
            ));
        }
        for ((name, shape, _), (have, t)) in expected.iter().zip(self.iter()) {
            if name != have || shape.as_slice() != t.shape() {
                return Err(shape_err!(
                    "parameter `{have}` {:?} does not match expected `{name}` {shape:?}",
                    t.shape()
                ));
            }
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::all_finite)
    }

    /// Names of the residual scales of the modulation blocks.
    pub fn gamma_names() -> [&'static str; 3] {
        ["tgvm1.gamma", "tgvm2.gamma", "tgvm3.gamma"]
    }
}

struct Layout(Vec<(String, Vec<usize>, Init)>);

impl Layout {
    fn add(&mut self, name: String, shape: &[usize], init: Init) {
        self.0.push((name, shape.to_vec(), init));
    }

    fn conv(&mut self, name: &str, cout: usize, cin: usize, k: usize, bias: bool) {
        let fan = cin * k * k;
        self.add(format!("{name}.w"), &[cout, cin, k, k], Init::Fan(fan));
        if bias {
            self.add(format!("{name}.b"), &[cout], Init::Fan(fan));
        }
    }

    fn depthwise(&mut self, name: &str, c: usize) {
        self.add(format!("{name}.w"), &[c, 1, 3, 3], Init::Fan(9));
    }

    fn linear(&mut self, name: &str, out: usize, inp: usize) {
        self.add(format!("{name}.w"), &[1, out, inp], Init::Fan(inp));
        self.add(format!("{name}.b"), &[out], Init::Fan(inp));
    }

    fn norm(&mut self, name: &str, c: usize) {
        self.add(format!("{name}.w"), &[c], Init::Ones);
        self.add(format!("{name}.b"), &[c], Init::Zeros);
    }

    fn transformer(&mut self, p: &str, c: usize, heads: usize) {
        let hidden = ffn_hidden(c);
        self.norm(&format!("{p}.norm1"), c);
        self.conv(&format!("{p}.attn.qkv"), 3 * c, c, 1, false);
        self.depthwise(&format!("{p}.attn.qkv_dw"), 3 * c);
        self.add(format!("{p}.attn.temperature"), &[heads], Init::Ones);
        self.conv(&format!("{p}.attn.proj"), c, c, 1, false);
        self.norm(&format!("{p}.norm2"), c);
        self.conv(&format!("{p}.ffn.in"), 2 * hidden, c, 1, false);
        self.depthwise(&format!("{p}.ffn.dw"), 2 * hidden);
        self.conv(&format!("{p}.ffn.out"), c, hidden, 1, false);
    }
}

pub(crate) fn ffn_hidden(c: usize) -> usize {
    2 * c
}

/// Names, shapes and initializers of every parameter, in canonical order.
pub(crate) fn layout(cfg: &Config) -> Vec<(String, Vec<usize>, Init)> {
    let [c1, c2, c3] = [cfg.channel_widths[0], cfg.channel_widths[1], cfg.channel_widths[2]];
    let mut l = Layout(Vec::new());
    l.conv("enc1.conv1", c1, 3, 3, true);
    l.conv("enc1.conv2", c1, c1, 3, true);
    l.conv("enc2.down", c2, c1, 3, true);
    l.transformer("enc2.block", c2, cfg.heads);
    l.conv("enc3.down", c3, c2, 3, true);
    l.transformer("enc3.block", c3, cfg.heads);

    let dt = cfg.embed_dim;
    for (lvl, &c) in cfg.channel_widths.iter().enumerate() {
        let p = format!("tgvm{}", lvl + 1);
        if cfg.text_native_dim != dt {
            l.add(format!("{p}.text_in.w"), &[1, dt, cfg.text_native_dim], Init::Fan(cfg.text_native_dim));
        }
        match cfg.tgvm_mode {
            TgvmMode::VisualQuery => {
                l.conv(&format!("{p}.q"), c, c, 1, true);
                l.linear(&format!("{p}.k"), c, dt);
                l.linear(&format!("{p}.v"), c, dt);
                l.conv(&format!("{p}.out"), c, c, 1, true);
            }
            TgvmMode::TextQuery => {
                l.linear(&format!("{p}.q"), c, dt);
                l.conv(&format!("{p}.k"), c, c, 1, true);
                l.conv(&format!("{p}.v"), c, c, 1, true);
                l.linear(&format!("{p}.scale"), c, c);
                l.linear(&format!("{p}.shift"), c, c);
            }
        }
        l.add(format!("{p}.gamma"), &[1], Init::Zeros);
    }

    l.conv("dec1.conv1", c1, 2 * c1, 3, true);
    l.conv("dec1.conv2", 3, c1, 3, true);
    l.conv("dec2.conv1", c2, 2 * c2, 3, true);
    l.conv("dec2.conv2", 3, c2, 3, true);
    l.conv("head.mix", c3, 2 * c3, 1, true);
    l.conv("head.up1", c2, c3, 3, true);
    l.conv("head.up2", c1, c2, 3, true);
    l.conv("head.out", 3, c1, 3, true);
    l.0
}
