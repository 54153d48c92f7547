//! Fusion quality metrics on the 0-255 luminance scale.
//!
//! EN and SD read the 8-bit quantized luminance, SF, AG, VIF and Qabf the
//! unquantized one.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autograd::gaussian_taps;
use crate::error::{contract, Result};
use crate::image::{Image, ImagePair, Plane};

/// Smallest side accepted by [`vif`].
pub const VIF_MIN_SIDE: usize = 32;
/// Additive noise variance of the visual channel model, 0-255 scale.
pub const VIF_NOISE_VAR: f64 = 2.0;
const VIF_EPS: f64 = 1e-10;

const QG: (f64, f64, f64) = (0.9994, -15.0, 0.5);
const QA: (f64, f64, f64) = (0.9879, -22.0, 0.8);

/// One row of a metrics table.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsReport {
    pub en: f64,
    pub sd: f64,
    pub sf: f64,
    pub ag: f64,
    pub vif: f64,
    pub qabf: f64,
}

impl MetricsReport {
    pub fn fields(&self) -> [f64; 6] {
        [self.en, self.sd, self.sf, self.ag, self.vif, self.qabf]
    }

    pub fn is_finite(&self) -> bool {
        self.fields().iter().all(|v| v.is_finite())
    }

    /// Column-wise mean; zero for an empty slice.
    pub fn mean(rows: &[MetricsReport]) -> MetricsReport {
        if rows.is_empty() {
            return MetricsReport::default();
        }
        let n = rows.len() as f64;
        let s = |f: fn(&MetricsReport) -> f64| rows.iter().map(f).sum::<f64>() / n;
        MetricsReport {
            en: s(|r| r.en),
            sd: s(|r| r.sd),
            sf: s(|r| r.sf),
            ag: s(|r| r.ag),
            vif: s(|r| r.vif),
            qabf: s(|r| r.qabf),
        }
    }
}

/// Luminance scaled to 0-255.
pub fn luminance255(img: &Image) -> Plane {
    img.to_grayscale().plane(0).scaled(255.0)
}

/// 8-bit levels of the luminance.
pub fn quantized_luminance(img: &Image) -> Vec<u8> {
    luminance255(img)
        .data
        .iter()
        .map(|v| libm::round(*v).clamp(0.0, 255.0) as u8)
        .collect()
}

/// Shannon entropy of the 256-bin luminance histogram, in bits.
pub fn entropy(img: &Image) -> f64 {
    let q = quantized_luminance(img);
    let mut hist = [0usize; 256];
    q.iter().for_each(|v| hist[*v as usize] += 1);
    let n = q.len() as f64;
    -hist
        .iter()
        .filter(|c| **c > 0)
        .map(|c| {
            let p = *c as f64 / n;
            p * libm::log2(p)
        })
        .sum::<f64>()
}

/// Population standard deviation of the 8-bit luminance.
pub fn std_dev(img: &Image) -> f64 {
    let q = quantized_luminance(img);
    let n = q.len() as f64;
    let mean = q.iter().map(|v| *v as f64).sum::<f64>() / n;
    let var = q.iter().map(|v| (*v as f64 - mean) * (*v as f64 - mean)).sum::<f64>() / n;
    libm::sqrt(var)
}

/// `sqrt(RF^2 + CF^2)` with RF from vertical and CF from horizontal neighbor differences.
pub fn spatial_frequency(img: &Image) -> f64 {
    let p = luminance255(img);
    let (h, w) = (p.height, p.width);
    let mut rf = 0.0;
    for y in 1..h {
        for x in 0..w {
            let d = p.at(y, x) - p.at(y - 1, x);
            rf += d * d;
        }
    }
    let mut cf = 0.0;
    for y in 0..h {
        for x in 1..w {
            let d = p.at(y, x) - p.at(y, x - 1);
            cf += d * d;
        }
    }
    let rf = rf / ((h - 1) * w) as f64;
    let cf = cf / (h * (w - 1)) as f64;
    libm::sqrt(rf + cf)
}

/// Mean of `sqrt((dx^2 + dy^2) / 2)` over pixels with both forward neighbors.
pub fn average_gradient(img: &Image) -> f64 {
    let p = luminance255(img);
    let (h, w) = (p.height, p.width);
    let mut s = 0.0;
    for y in 0..h - 1 {
        for x in 0..w - 1 {
            let dx = p.at(y, x + 1) - p.at(y, x);
            let dy = p.at(y + 1, x) - p.at(y, x);
            s += libm::sqrt((dx * dx + dy * dy) / 2.0);
        }
    }
    s / ((h - 1) * (w - 1)) as f64
}

/// Index into `0..len` with half-sample symmetric reflection.
fn reflect(i: isize, len: usize) -> usize {
    let n = len as isize;
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - 1 - m }) as usize
}

/// Separable same-size correlation with symmetric borders.
fn filter_same(p: &Plane, taps: &[f64]) -> Plane {
    let r = (taps.len() / 2) as isize;
    let (h, w) = (p.height, p.width);
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = taps
                .iter()
                .enumerate()
                .map(|(i, t)| t * p.at(y, reflect(x as isize + i as isize - r, w)))
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = taps
                .iter()
                .enumerate()
                .map(|(i, t)| t * tmp[reflect(y as isize + i as isize - r, h) * w + x])
                .sum();
        }
    }
    Plane::new(h, w, out)
}

fn decimate(p: &Plane) -> Plane {
    let (h, w) = (p.height.div_ceil(2), p.width.div_ceil(2));
    Plane::new(h, w, (0..h * w).map(|i| p.at(2 * (i / w), 2 * (i % w))).collect())
}

fn product(a: &Plane, b: &Plane) -> Plane {
    Plane::new(a.height, a.width, a.data.iter().zip(&b.data).map(|(x, y)| x * y).collect())
}

/// Pixel-domain VIF of `dist` against `reference` over four scales.
pub fn vif_single(reference: &Plane, dist: &Plane) -> f64 {
    let (mut r, mut d) = (reference.clone(), dist.clone());
    let (mut num, mut den) = (0.0, 0.0);
    for scale in 1..=4u32 {
        let n = (1usize << (5 - scale)) + 1;
        let taps = gaussian_taps(n, n as f64 / 5.0);
        if scale > 1 {
            r = decimate(&filter_same(&r, &taps));
            d = decimate(&filter_same(&d, &taps));
        }
        let mu1 = filter_same(&r, &taps);
        let mu2 = filter_same(&d, &taps);
        let e11 = filter_same(&product(&r, &r), &taps);
        let e22 = filter_same(&product(&d, &d), &taps);
        let e12 = filter_same(&product(&r, &d), &taps);
        for i in 0..r.data.len() {
            let (m1, m2) = (mu1.data[i], mu2.data[i]);
            let mut s1 = (e11.data[i] - m1 * m1).max(0.0);
            let s2 = (e22.data[i] - m2 * m2).max(0.0);
            let s12 = e12.data[i] - m1 * m2;
            let mut g = s12 / (s1 + VIF_EPS);
            let mut sv = s2 - g * s12;
            if s1 < VIF_EPS {
                g = 0.0;
                sv = s2;
                s1 = 0.0;
            }
            if s2 < VIF_EPS {
                g = 0.0;
                sv = 0.0;
            }
            if g < 0.0 {
                sv = s2;
                g = 0.0;
            }
            if sv <= VIF_EPS {
                sv = VIF_EPS;
            }
            num += libm::log10(1.0 + g * g * s1 / (sv + VIF_NOISE_VAR));
            den += libm::log10(1.0 + s1 / VIF_NOISE_VAR);
        }
    }
    if den == 0.0 { 0.0 } else { num / den }
}

fn check_shapes(fused: &Image, a: &Image, b: &Image) -> Result<()> {
    let d = |i: &Image| (i.height(), i.width());
    if d(fused) != d(a) || d(fused) != d(b) {
        return Err(contract!(
            "fused {:?} and sources {:?}, {:?} differ in size",
            d(fused),
            d(a),
            d(b)
        ));
    }
    Ok(())
}

/// VIF of the fused image against each source, summed.
pub fn vif(fused: &Image, a: &Image, b: &Image) -> Result<f64> {
    check_shapes(fused, a, b)?;
    if fused.height().min(fused.width()) < VIF_MIN_SIDE {
        return Err(contract!(
            "VIF needs at least {VIF_MIN_SIDE}x{VIF_MIN_SIDE}, got {}x{}",
            fused.height(),
            fused.width()
        ));
    }
    let f = luminance255(fused);
    Ok(vif_single(&luminance255(a), &f) + vif_single(&luminance255(b), &f))
}

/// Sobel edge strength and orientation with replicate borders.
fn edges(p: &Plane) -> (Vec<f64>, Vec<f64>) {
    let (h, w) = (p.height, p.width);
    let mut g = vec![0.0; h * w];
    let mut a = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let v = |dy: isize, dx: isize| p.at_clamped(y + dy, x + dx);
            let gx = (v(-1, 1) + 2.0 * v(0, 1) + v(1, 1)) - (v(-1, -1) + 2.0 * v(0, -1) + v(1, -1));
            let gy = (v(1, -1) + 2.0 * v(1, 0) + v(1, 1)) - (v(-1, -1) + 2.0 * v(-1, 0) + v(-1, 1));
            let i = y as usize * w + x as usize;
            g[i] = libm::sqrt(gx * gx + gy * gy);
            a[i] = if gx == 0.0 { core::f64::consts::FRAC_PI_2 } else { libm::atan(gy / gx) };
        }
    }
    (g, a)
}

fn sigmoid_model((gamma, kappa, sigma): (f64, f64, f64), v: f64) -> f64 {
    gamma / (1.0 + libm::exp(kappa * (v - sigma)))
}

/// Per-pixel edge preservation of `src` in `fused`.
fn preservation(src: &(Vec<f64>, Vec<f64>), fused: &(Vec<f64>, Vec<f64>)) -> Vec<f64> {
    (0..src.0.len())
        .map(|i| {
            let (gs, gf) = (src.0[i], fused.0[i]);
            let g = if gs == gf {
                1.0
            } else if gs > gf {
                gf / gs
            } else {
                gs / gf
            };
            let alpha = 1.0 - libm::fabs(src.1[i] - fused.1[i]) / core::f64::consts::FRAC_PI_2;
            sigmoid_model(QG, g) * sigmoid_model(QA, alpha)
        })
        .collect()
}

/// Edge-strength-weighted preservation of both sources' edges in the fused image.
pub fn qabf(fused: &Image, a: &Image, b: &Image) -> Result<f64> {
    check_shapes(fused, a, b)?;
    let ef = edges(&luminance255(fused));
    let ea = edges(&luminance255(a));
    let eb = edges(&luminance255(b));
    let qa = preservation(&ea, &ef);
    let qb = preservation(&eb, &ef);
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..qa.len() {
        num += qa[i] * ea.0[i] + qb[i] * eb.0[i];
        den += ea.0[i] + eb.0[i];
    }
    Ok(if den == 0.0 { 0.0 } else { num / den })
}

/// All six metrics of one fused image.
pub fn evaluate(fused: &Image, pair: &ImagePair) -> Result<MetricsReport> {
    check_shapes(fused, &pair.a, &pair.b)?;
    Ok(MetricsReport {
        en: entropy(fused),
        sd: std_dev(fused),
        sf: spatial_frequency(fused),
        ag: average_gradient(fused),
        vif: vif(fused, &pair.a, &pair.b)?,
        qabf: qabf(fused, &pair.a, &pair.b)?,
    })
}

/// Per-image rows followed by their mean.
pub fn evaluate_batch(items: &[(Image, ImagePair)]) -> Result<(Vec<MetricsReport>, MetricsReport)> {
    let rows = items
        .iter()
        .map(|(f, p)| evaluate(f, p))
        .collect::<Result<Vec<_>>>()?;
    let mean = MetricsReport::mean(&rows);
    Ok((rows, mean))
}
