//! The multi-grained training objective.
//!
//! Every term is assembled on an autodiff [`Graph`], so the same code serves
//! training (variables flow from the network) and plain evaluation on images
//! (all leaves constant, `f64`).

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autograd::{gaussian_taps, Graph, Tensor, Var};
use crate::config::Config;
use crate::error::{contract, shape_err, Result};
use crate::fusenet::FusionOutputs;
use crate::image::{Image, ImagePair, Plane};
use crate::real::Real;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// Per-term values of one loss evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub feat_grad: f64,
    pub feat_ssim: f64,
    pub base_pixel: f64,
    pub base_grad: f64,
    pub feat_total: f64,
    pub base_total: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [
            self.feat_grad,
            self.feat_ssim,
            self.base_pixel,
            self.base_grad,
            self.feat_total,
            self.base_total,
            self.total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }

    /// Element-wise mean of several breakdowns.
    pub fn mean(items: &[LossBreakdown]) -> LossBreakdown {
        let n = items.len().max(1) as f64;
        let mut m = LossBreakdown::default();
        for b in items {
            m.feat_grad += b.feat_grad / n;
            m.feat_ssim += b.feat_ssim / n;
            m.base_pixel += b.base_pixel / n;
            m.base_grad += b.base_grad / n;
            m.feat_total += b.feat_total / n;
            m.base_total += b.base_total / n;
            m.total += b.total / n;
        }
        m
    }
}

/// `mean |(|grad a| - |grad b|)|` over all channels and pixels.
pub fn gradient_loss_var<T: Real>(g: &mut Graph<T>, a: Var, b: Var) -> Var {
    let sa = g.sobel_magnitude(a);
    let sb = g.sobel_magnitude(b);
    let d = g.sub(sa, sb);
    let ad = g.abs(d);
    g.mean(ad)
}

/// `mean |a - b|` over all channels and pixels.
pub fn pixel_loss_var<T: Real>(g: &mut Graph<T>, a: Var, b: Var) -> Var {
    let d = g.sub(a, b);
    let ad = g.abs(d);
    g.mean(ad)
}

/// Mean SSIM over the 'valid' map of every channel, dynamic range 1.
pub fn ssim_var<T: Real>(g: &mut Graph<T>, a: Var, b: Var) -> Var {
    let taps: Vec<T> = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA).into_iter().map(T::lit).collect();
    let c1 = T::lit(SSIM_K1 * SSIM_K1);
    let c2 = T::lit(SSIM_K2 * SSIM_K2);
    let mu_a = g.filter_valid(a, &taps);
    let mu_b = g.filter_valid(b, &taps);
    let aa = g.mul(a, a);
    let bb = g.mul(b, b);
    let ab = g.mul(a, b);
    let e_aa = g.filter_valid(aa, &taps);
    let e_bb = g.filter_valid(bb, &taps);
    let e_ab = g.filter_valid(ab, &taps);
    let mu_aa = g.mul(mu_a, mu_a);
    let mu_bb = g.mul(mu_b, mu_b);
    let mu_ab = g.mul(mu_a, mu_b);
    let var_a = g.sub(e_aa, mu_aa);
    let var_b = g.sub(e_bb, mu_bb);
    let cov = g.sub(e_ab, mu_ab);

    let two = T::lit(2.0);
    let l_num = g.mul_scalar(mu_ab, two);
    let l_num = g.add_scalar(l_num, c1);
    let c_num = g.mul_scalar(cov, two);
    let c_num = g.add_scalar(c_num, c2);
    let num = g.mul(l_num, c_num);
    let l_den = g.add(mu_aa, mu_bb);
    let l_den = g.add_scalar(l_den, c1);
    let c_den = g.add(var_a, var_b);
    let c_den = g.add_scalar(c_den, c2);
    let den = g.mul(l_den, c_den);
    let map = g.div(num, den);
    g.mean(map)
}

fn check_pair(a: &Image, b: &Image) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(shape_err!("{:?} vs {:?}", a.dims(), b.dims()));
    }
    Ok(())
}

fn eval_pair(a: &Image, b: &Image, f: impl FnOnce(&mut Graph<f64>, Var, Var) -> Var) -> f64 {
    let mut g = Graph::<f64>::new();
    let va = g.constant(Tensor::from_image(a));
    let vb = g.constant(Tensor::from_image(b));
    let out = f(&mut g, va, vb);
    g.scalar(out)
}

/// `|Sobel_x * A| + |Sobel_y * A|` per channel, replicate padding.
pub fn sobel_gradient_magnitude(img: &Image) -> Vec<Plane> {
    let mut g = Graph::<f64>::new();
    let v = g.constant(Tensor::from_image(img));
    let s = g.sobel_magnitude(v);
    let (h, w) = (img.height(), img.width());
    g.value(s)
        .data()
        .chunks_exact(h * w)
        .map(|c| Plane::new(h, w, c.to_vec()))
        .collect()
}

pub fn gradient_loss(a: &Image, b: &Image) -> Result<f64> {
    check_pair(a, b)?;
    Ok(eval_pair(a, b, gradient_loss_var))
}

pub fn pixel_loss(a: &Image, b: &Image) -> Result<f64> {
    check_pair(a, b)?;
    Ok(eval_pair(a, b, pixel_loss_var))
}

pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    check_pair(a, b)?;
    if a.height().min(a.width()) < SSIM_WINDOW {
        return Err(contract!(
            "SSIM needs both sides >= {SSIM_WINDOW}, image is {}x{}",
            a.height(),
            a.width()
        ));
    }
    Ok(eval_pair(a, b, ssim_var))
}

/// `(feat_grad, feat_ssim, feat_total)` for the level-1 and level-2 reconstructions.
pub fn feature_loss(outputs: &FusionOutputs, pair: &ImagePair, alpha1: f64, alpha2: f64) -> Result<(f64, f64, f64)> {
    let target = pair.elementwise_max();
    let feat_grad = gradient_loss(&outputs.intermediate_l1, &target)?;
    let feat_ssim = 2.0 - ssim(&outputs.intermediate_l2, &pair.a)? - ssim(&outputs.intermediate_l2, &pair.b)?;
    Ok((feat_grad, feat_ssim, alpha1 * feat_grad + alpha2 * feat_ssim))
}

/// `(base_pixel, base_grad, base_total)` for the final fused image.
pub fn base_loss(fused: &Image, pair: &ImagePair, beta1: f64, beta2: f64) -> Result<(f64, f64, f64)> {
    let target = pair.elementwise_max();
    let base_pixel = pixel_loss(fused, &target)?;
    let base_grad = gradient_loss(fused, &target)?;
    Ok((base_pixel, base_grad, beta1 * base_pixel + beta2 * base_grad))
}

/// Full breakdown on plain images, honoring the `use_ml` ablation.
pub fn total_loss(outputs: &FusionOutputs, pair: &ImagePair, cfg: &Config) -> Result<LossBreakdown> {
    let w = &cfg.loss_weights;
    let (feat_grad, feat_ssim, feat_total) = if cfg.ablation.use_ml {
        feature_loss(outputs, pair, w.alpha1, w.alpha2)?
    } else {
        (0.0, 0.0, 0.0)
    };
    let (base_pixel, base_grad, base_total) = base_loss(&outputs.fused, pair, w.beta1, w.beta2)?;
    Ok(LossBreakdown {
        feat_grad,
        feat_ssim,
        base_pixel,
        base_grad,
        feat_total,
        base_total,
        total: feat_total + base_total,
    })
}

/// Network outputs living on a graph, each `C x H x W`.
#[derive(Debug, Clone, Copy)]
pub struct OutputVars {
    pub fused: Var,
    pub intermediate_l1: Var,
    pub intermediate_l2: Var,
}

/// Differentiable total loss; returns the scalar node and its breakdown.
pub fn total_loss_var<T: Real>(g: &mut Graph<T>, out: OutputVars, pair: &ImagePair, cfg: &Config) -> (Var, LossBreakdown) {
    let w = &cfg.loss_weights;
    let target = g.constant(Tensor::from_image(&pair.elementwise_max()));
    let base_pixel = pixel_loss_var(g, out.fused, target);
    let base_grad = gradient_loss_var(g, out.fused, target);
    let bp = g.mul_scalar(base_pixel, T::lit(w.beta1));
    let bg = g.mul_scalar(base_grad, T::lit(w.beta2));
    let base_total = g.add(bp, bg);

    let mut bd = LossBreakdown {
        base_pixel: g.scalar(base_pixel).to_f64_lossy(),
        base_grad: g.scalar(base_grad).to_f64_lossy(),
        base_total: g.scalar(base_total).to_f64_lossy(),
        ..LossBreakdown::default()
    };

    let total = if cfg.ablation.use_ml {
        let ia = g.constant(Tensor::from_image(&pair.a));
        let ib = g.constant(Tensor::from_image(&pair.b));
        let feat_grad = gradient_loss_var(g, out.intermediate_l1, target);
        let sa = ssim_var(g, out.intermediate_l2, ia);
        let sb = ssim_var(g, out.intermediate_l2, ib);
        let s = g.add(sa, sb);
        let neg = g.mul_scalar(s, -T::one());
        let feat_ssim = g.add_scalar(neg, T::lit(2.0));
        let fg = g.mul_scalar(feat_grad, T::lit(w.alpha1));
        let fs = g.mul_scalar(feat_ssim, T::lit(w.alpha2));
        let feat_total = g.add(fg, fs);
        bd.feat_grad = g.scalar(feat_grad).to_f64_lossy();
        bd.feat_ssim = g.scalar(feat_ssim).to_f64_lossy();
        bd.feat_total = g.scalar(feat_total).to_f64_lossy();
        g.add(feat_total, base_total)
    } else {
        base_total
    };
    bd.total = g.scalar(total).to_f64_lossy();
    (total, bd)
}
