//! One optimization step and the deterministic data schedule around it.

use alloc::vec::Vec;

use rand::seq::SliceRandom;

use crate::autograd::Tensor;
use crate::config::Config;
use crate::enrich::{partition_with_rng, spectral_residual, stream_rng, SaliencyMap};
use crate::error::{Error, Result};
use crate::fusenet::{Model, Session};
use crate::image::ImagePair;
use crate::losses::{total_loss_var, LossBreakdown};
use crate::optim::Adam;
use crate::text::TextFeatureSet;

/// Stream index reserved for the per-epoch shuffle.
const SHUFFLE_STREAM: u64 = 0xFFFF_FFFF;

/// Saliency of a pair, computed on the average of its two images.
pub fn pair_saliency(pair: &ImagePair) -> Result<SaliencyMap> {
    let avg = pair.a.to_grayscale().blend(&pair.b.to_grayscale(), 0.5)?;
    Ok(spectral_residual(&avg.plane(0)))
}

/// Training variants of source pair `index` in `epoch`.
///
/// Without enrichment the whole pair is resized to one `crop_size` square.
pub fn training_variants(pair: &ImagePair, saliency: Option<&SaliencyMap>, cfg: &Config, epoch: u64, index: u64) -> Result<Vec<ImagePair>> {
    let s = cfg.crop_size;
    if !cfg.ablation.use_ve {
        return Ok(alloc::vec![ImagePair::new(pair.a.resize_bilinear(s, s)?, pair.b.resize_bilinear(s, s)?)?]);
    }
    let computed;
    let map = match saliency {
        Some(m) => m,
        None => {
            computed = pair_saliency(pair)?;
            &computed
        }
    };
    let mut rng = stream_rng(cfg.seed, epoch, index);
    Ok(partition_with_rng(pair, map, cfg, &mut rng)?.variants)
}

/// Pair visiting order for one epoch.
pub fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream_rng(seed, epoch, SHUFFLE_STREAM));
    order
}

pub fn steps_per_epoch(n_pairs: usize, batch_pairs: usize) -> usize {
    n_pairs.div_ceil(batch_pairs.max(1))
}

/// Loss and parameter gradients of one training sample, gradients scaled by `weight`.
pub fn sample_gradients(model: &Model<f32>, pair: &ImagePair, texts: &TextFeatureSet, weight: f32) -> Result<(Vec<Tensor<f32>>, LossBreakdown)> {
    let mut s = Session::new(model, true);
    let out = s.forward(pair, texts)?;
    let (loss, breakdown) = total_loss_var(&mut s.graph, out, pair, &model.cfg);
    let mut grads = s.graph.backward_scaled(loss, weight);
    let g = s
        .param_vars()
        .iter()
        .zip(model.params.tensors())
        .map(|(v, p)| grads.take(*v).unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();
    Ok((g, breakdown))
}

/// Sums per-sample gradients and averages their breakdowns.
pub fn reduce(parts: Vec<(Vec<Tensor<f32>>, LossBreakdown)>) -> Result<(Vec<Tensor<f32>>, LossBreakdown)> {
    let mut iter = parts.into_iter();
    let (mut total, first) = iter.next().ok_or_else(|| Error::Contract("empty batch".into()))?;
    let mut breakdowns = alloc::vec![first];
    for (g, b) in iter {
        for (t, x) in total.iter_mut().zip(&g) {
            t.add_assign(x);
        }
        breakdowns.push(b);
    }
    Ok((total, LossBreakdown::mean(&breakdowns)))
}

/// Applies averaged gradients unless the loss or any gradient is non-finite.
pub fn apply(model: &mut Model<f32>, opt: &mut Adam<f32>, grads: &[Tensor<f32>], breakdown: &LossBreakdown, lr: f64) -> Result<()> {
    if !breakdown.is_finite() {
        return Err(Error::NonFinite(alloc::format!("loss {breakdown:?}")));
    }
    if let Some(i) = grads.iter().position(|g| !g.all_finite()) {
        return Err(Error::NonFinite(alloc::format!(
            "gradient of `{}`",
            model.params.names()[i]
        )));
    }
    opt.step(model.params.tensors_mut(), grads, lr)
}

/// Sequential step over `samples`, each weighted equally in the mean loss.
pub fn train_step(model: &mut Model<f32>, opt: &mut Adam<f32>, samples: &[(ImagePair, &TextFeatureSet)], lr: f64) -> Result<LossBreakdown> {
    let w = 1.0 / samples.len().max(1) as f32;
    let parts = samples
        .iter()
        .map(|(p, t)| sample_gradients(model, p, t, w))
        .collect::<Result<Vec<_>>>()?;
    let (grads, breakdown) = reduce(parts)?;
    apply(model, opt, &grads, &breakdown, lr)?;
    Ok(breakdown)
}
