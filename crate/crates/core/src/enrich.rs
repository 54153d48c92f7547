//! Saliency-driven visual enrichment.
//!
//! One source pair becomes `N` aligned crop pairs: the window with the largest
//! summed saliency, then windows pushed half a crop outward along the four
//! diagonals. A random-crop mode replaces the saliency geometry for ablations.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::gaussian_taps;
use crate::config::{Config, VeMode};
use crate::error::{contract, Result};
use crate::image::{ImagePair, Plane};

/// Working resolution of the spectral residual.
pub const SALIENCY_SIDE: usize = 64;
/// Smoothing applied to the squared residual reconstruction, in working pixels.
pub const SALIENCY_SIGMA: f64 = 2.5;
/// Amplitude floor as a fraction of the mean spectral amplitude.
pub const AMPLITUDE_FLOOR: f64 = 1e-2;

/// Dense `H x W` saliency in `[0, 1]`, peak 1 unless identically zero.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl SaliencyMap {
    /// Wraps a precomputed map, rescaling it so its peak is 1.
    pub fn from_external(plane: Plane, height: usize, width: usize) -> Result<Self> {
        if plane.height != height || plane.width != width {
            return Err(contract!(
                "saliency map is {}x{}, image is {height}x{width}",
                plane.height,
                plane.width
            ));
        }
        if plane.data.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(contract!("saliency map must be finite and non-negative"));
        }
        let peak = plane.max();
        let values = if peak > 0.0 {
            plane.data.iter().map(|v| v / peak).collect()
        } else {
            plane.data
        };
        Ok(Self { height, width, values })
    }

    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }
}

/// Square crop placed identically on both images of a pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropWindow {
    pub top: usize,
    pub left: usize,
    pub size: usize,
}

impl CropWindow {
    /// Overlap area with another window.
    pub fn overlap(&self, other: &CropWindow) -> usize {
        let span = |a: usize, la: usize, b: usize, lb: usize| (a + la).min(b + lb).saturating_sub(a.max(b));
        span(self.top, self.size, other.top, other.size) * span(self.left, self.size, other.left, other.size)
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        (self.top..self.top + self.size).contains(&y) && (self.left..self.left + self.size).contains(&x)
    }
}

/// Aligned training variants of one source pair.
#[derive(Debug, Clone, PartialEq)]
pub struct EnrichedPairSet {
    pub variants: Vec<ImagePair>,
    pub windows: Vec<CropWindow>,
}

impl EnrichedPairSet {
    pub fn len(&self) -> usize {
        self.variants.len()
    }

    pub fn is_empty(&self) -> bool {
        self.variants.is_empty()
    }
}

/// Independent generator for one `(epoch, pair)` slot of a seeded run.
pub fn stream_rng(seed: u64, epoch: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((epoch << 32) ^ index);
    rng
}

/// In-place complex DFT along rows of a square `n x n` grid, via a twiddle table.
fn dft_rows(re: &mut [f64], im: &mut [f64], n: usize, inverse: bool) {
    let sign = if inverse { 1.0 } else { -1.0 };
    let (cos, sin): (Vec<f64>, Vec<f64>) = (0..n)
        .map(|k| {
            let t = sign * 2.0 * core::f64::consts::PI * k as f64 / n as f64;
            (libm::cos(t), libm::sin(t))
        })
        .unzip();
    let mut out_re = vec![0.0; n];
    let mut out_im = vec![0.0; n];
    for r in 0..n {
        let row_re = &re[r * n..(r + 1) * n];
        let row_im = &im[r * n..(r + 1) * n];
        for k in 0..n {
            let (mut sr, mut si) = (0.0, 0.0);
            for j in 0..n {
                let t = (k * j) % n;
                sr += row_re[j] * cos[t] - row_im[j] * sin[t];
                si += row_re[j] * sin[t] + row_im[j] * cos[t];
            }
            out_re[k] = sr;
            out_im[k] = si;
        }
        re[r * n..(r + 1) * n].copy_from_slice(&out_re);
        im[r * n..(r + 1) * n].copy_from_slice(&out_im);
    }
}

fn transpose(m: &mut [f64], n: usize) {
    for y in 0..n {
        for x in y + 1..n {
            m.swap(y * n + x, x * n + y);
        }
    }
}

fn dft2(re: &mut [f64], im: &mut [f64], n: usize, inverse: bool) {
    dft_rows(re, im, n, inverse);
    transpose(re, n);
    transpose(im, n);
    dft_rows(re, im, n, inverse);
    transpose(re, n);
    transpose(im, n);
    if inverse {
        let s = 1.0 / (n * n) as f64;
        re.iter_mut().chain(im.iter_mut()).for_each(|v| *v *= s);
    }
}

/// Separable same-size filter with replicate borders.
fn smooth(p: &Plane, taps: &[f64]) -> Plane {
    let r = (taps.len() / 2) as isize;
    let mut tmp = Plane::zeros(p.height, p.width);
    for y in 0..p.height {
        for x in 0..p.width {
            tmp.data[y * p.width + x] = taps
                .iter()
                .enumerate()
                .map(|(i, t)| t * p.at_clamped(y as isize, x as isize + i as isize - r))
                .sum();
        }
    }
    let mut out = Plane::zeros(p.height, p.width);
    for y in 0..p.height {
        for x in 0..p.width {
            out.data[y * p.width + x] = taps
                .iter()
                .enumerate()
                .map(|(i, t)| t * tmp.at_clamped(y as isize + i as isize - r, x as isize))
                .sum();
        }
    }
    out
}

/// Spectral residual saliency of a luminance plane, min-max normalized.
pub fn spectral_residual(lum: &Plane) -> SaliencyMap {
    let (h, w) = (lum.height, lum.width);
    let zero = SaliencyMap {
        height: h,
        width: w,
        values: vec![0.0; h * w],
    };
    if lum.max() - lum.min() < 1e-12 {
        return zero;
    }
    let n = SALIENCY_SIDE;
    let small = lum.resize_bilinear(n, n);
    let mut re = small.data;
    let mut im = vec![0.0; n * n];
    dft2(&mut re, &mut im, n, false);

    // Exact spectral zeros (common in synthetic images) would otherwise dominate
    // the residual, so the amplitude is floored relative to its mean.
    let amp: Vec<f64> = (0..n * n).map(|i| libm::hypot(re[i], im[i])).collect();
    let floor = AMPLITUDE_FLOOR * amp.iter().sum::<f64>() / (n * n) as f64;
    let mut log_amp = Plane::zeros(n, n);
    let mut phase = vec![0.0; n * n];
    for i in 0..n * n {
        log_amp.data[i] = libm::log(amp[i] + floor);
        phase[i] = libm::atan2(im[i], re[i]);
    }
    let avg = smooth(&log_amp, &[1.0 / 3.0; 3]);
    for i in 0..n * n {
        let mag = libm::exp(log_amp.data[i] - avg.data[i]);
        re[i] = mag * libm::cos(phase[i]);
        im[i] = mag * libm::sin(phase[i]);
    }
    dft2(&mut re, &mut im, n, true);
    let energy = Plane::new(n, n, (0..n * n).map(|i| re[i] * re[i] + im[i] * im[i]).collect());
    let radius = libm::ceil(3.0 * SALIENCY_SIGMA) as usize;
    let blurred = smooth(&energy, &gaussian_taps(2 * radius + 1, SALIENCY_SIGMA));
    let full = blurred.resize_bilinear(h, w);
    let (lo, hi) = (full.min(), full.max());
    if hi - lo < 1e-300 {
        return zero;
    }
    SaliencyMap {
        height: h,
        width: w,
        values: full.data.iter().map(|v| (v - lo) / (hi - lo)).collect(),
    }
}

/// Default saliency of an image: spectral residual on its luminance.
pub fn compute_saliency(img: &crate::image::Image) -> SaliencyMap {
    spectral_residual(&img.to_grayscale().plane(0))
}

const TIE_TOLERANCE: f64 = 1e-12;

/// Window with the largest summed saliency; ties go to the smallest `(top, left)`.
pub fn select_center_window(map: &SaliencyMap, size: usize) -> Result<CropWindow> {
    let (h, w) = (map.height, map.width);
    if size == 0 || size > h.min(w) {
        return Err(contract!("crop size {size} does not fit a {h}x{w} map"));
    }
    // Summed-area table with a zero border row and column.
    let sw = w + 1;
    let mut sat = vec![0.0; (h + 1) * sw];
    for y in 0..h {
        let mut row = 0.0;
        for x in 0..w {
            row += map.at(y, x);
            sat[(y + 1) * sw + x + 1] = sat[y * sw + x + 1] + row;
        }
    }
    let sum = |top: usize, left: usize| {
        let (b, r) = (top + size, left + size);
        sat[b * sw + r] - sat[top * sw + r] - sat[b * sw + left] + sat[top * sw + left]
    };
    let mut best = (sum(0, 0), 0, 0);
    for top in 0..=h - size {
        for left in 0..=w - size {
            let s = sum(top, left);
            // Sums within rounding of the best count as ties.
            if s > best.0 + TIE_TOLERANCE * best.0.abs().max(1.0) {
                best = (s, top, left);
            }
        }
    }
    Ok(CropWindow {
        top: best.1,
        left: best.2,
        size,
    })
}

/// Center window followed by its clamped diagonal neighbors (TL, TR, BL, BR), first `n` of them.
pub fn periphery_windows(center: CropWindow, height: usize, width: usize, n: usize) -> Result<Vec<CropWindow>> {
    if n == 0 || n > 5 {
        return Err(contract!("saliency enrichment yields 1 to 5 variants, not {n}"));
    }
    let s = center.size;
    let half = (s / 2) as isize;
    let place = |v: usize, d: isize, len: usize| (v as isize + d).clamp(0, (len - s) as isize) as usize;
    let mut out = vec![center];
    for (dy, dx) in [(-half, -half), (-half, half), (half, -half), (half, half)] {
        out.push(CropWindow {
            top: place(center.top, dy, height),
            left: place(center.left, dx, width),
            size: s,
        });
    }
    out.truncate(n);
    Ok(out)
}

/// Uniformly placed windows.
pub fn random_windows(height: usize, width: usize, size: usize, n: usize, rng: &mut impl Rng) -> Result<Vec<CropWindow>> {
    if size == 0 || size > height.min(width) {
        return Err(contract!("crop size {size} does not fit a {height}x{width} image"));
    }
    Ok((0..n)
        .map(|_| CropWindow {
            top: rng.random_range(0..=height - size),
            left: rng.random_range(0..=width - size),
            size,
        })
        .collect())
}

/// Cuts every window out of both images.
pub fn apply_windows(pair: &ImagePair, windows: Vec<CropWindow>) -> Result<EnrichedPairSet> {
    let variants = windows
        .iter()
        .map(|w| pair.crop(w.top, w.left, w.size))
        .collect::<Result<Vec<_>>>()?;
    Ok(EnrichedPairSet { variants, windows })
}

/// Enrichment of one pair under `cfg`, with random placements drawn from `rng`.
pub fn partition_with_rng(pair: &ImagePair, map: &SaliencyMap, cfg: &Config, rng: &mut impl Rng) -> Result<EnrichedPairSet> {
    let (h, w, _) = pair.dims();
    if map.height != h || map.width != w {
        return Err(contract!(
            "saliency map is {}x{}, pair is {h}x{w}",
            map.height,
            map.width
        ));
    }
    let size = cfg.crop_size;
    let n = cfg.variants;
    let windows = match cfg.ablation.ve_mode {
        VeMode::Random => random_windows(h, w, size, n, rng)?,
        VeMode::Saliency => {
            if n > 1 && 2 * size > h.min(w) {
                return Err(contract!(
                    "peripheral windows need crop size {size} <= half of {h}x{w}"
                ));
            }
            let center = select_center_window(map, size)?;
            periphery_windows(center, h, w, n)?
        }
    };
    apply_windows(pair, windows)
}

/// Enrichment of one pair; random mode draws from the stream of pair 0 of epoch 0.
pub fn center_periphery_partition(pair: &ImagePair, map: &SaliencyMap, cfg: &Config) -> Result<EnrichedPairSet> {
    partition_with_rng(pair, map, cfg, &mut stream_rng(cfg.seed, 0, 0))
}
