//! Per-sequence clipping, Gaussian noise and the private update.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::DpConfig;
use super::optim::OptimizerState;
use super::StepStats;
use crate::error::{LabError, Result};
use crate::model::linalg::record;
use crate::model::{accumulate_sequence, GradSink, GradientSet, ModelState, Transformer};
use crate::tokenize::TokenBatch;

/// Scales `grad` by `1 / max(1, ||grad||_2 / threshold)`, the norm taken over
/// all arrays at once. An infinite threshold leaves the gradient untouched.
pub fn clip(grad: &GradientSet, threshold: f64) -> GradientSet {
    let mut out = grad.clone();
    clip_in_place(&mut out, threshold);
    out
}

pub(crate) fn clip_in_place(grad: &mut GradientSet, threshold: f64) {
    assert!(threshold > 0.0, "clip threshold must be positive");
    // norm (2 per value) and rescale (1 per value)
    record(3 * grad.len() as u64);
    let factor = (grad.global_norm() / threshold).max(1.0);
    if factor > 1.0 {
        grad.scale(1.0 / factor);
    }
}

/// Adds i.i.d. `N(0, (sigma * threshold)^2)` noise to every coordinate.
/// `sigma == 0` returns the input unchanged.
pub fn add_noise(grad: &GradientSet, sigma: f64, threshold: f64, rng: &mut ChaCha8Rng) -> Result<GradientSet> {
    if sigma < 0.0 || sigma.is_nan() {
        return Err(LabError::Config(format!("noise scale must be non-negative, got {sigma}")));
    }
    let mut out = grad.clone();
    if sigma == 0.0 {
        return Ok(out);
    }
    let std = sigma * threshold;
    let normal = Normal::new(0.0, std)
        .map_err(|e| LabError::Config(format!("noise std {std}: {e}")))?;
    // draw and add
    record(2 * out.len() as u64);
    for g in out.data.iter_mut() {
        *g += normal.sample(rng);
    }
    Ok(out)
}

/// `Noise((1/B) sum_i Clip(g_i))` over per-sample gradients in the given order.
/// The divisor is the configured batch size even for a short final batch.
pub fn privatize<I>(per_sample: I, batch_size: usize, dp: &DpConfig, rng: &mut ChaCha8Rng) -> Result<GradientSet>
where
    I: IntoIterator<Item = GradientSet>,
{
    let mut sum: Option<GradientSet> = None;
    for mut g in per_sample {
        clip_in_place(&mut g, dp.clip_threshold);
        match sum.as_mut() {
            Some(s) => s.add_scaled(1.0, &g),
            None => sum = Some(g),
        }
    }
    let mut mean = sum.ok_or_else(|| LabError::Config("private step over an empty batch".into()))?;
    mean.scale(1.0 / batch_size as f64);
    add_noise(&mean, dp.noise_scale, dp.clip_threshold, rng)
}

/// One private update: per-sequence gradients of the mean token loss, each
/// clipped, averaged over `batch_size`, noised once, then applied.
pub fn dp_step(
    state: &mut ModelState,
    batch: &[TokenBatch],
    dp: &DpConfig,
    batch_size: usize,
    opt: &mut OptimizerState,
    lr: f64,
    noise_seed: u64,
) -> Result<StepStats> {
    dp.validate()?;
    let model = Transformer::new(state);
    let mut loss_sum = 0.0;
    let mut tokens = 0;
    let mut grads = Vec::with_capacity(batch.len());
    for seq in batch {
        let n = seq.n_targets();
        if n == 0 {
            continue;
        }
        let mut g = GradientSet::zeros(state.n_params());
        let mut sink = GradSink {
            base: Some(&mut g.data),
            adapters: None,
        };
        loss_sum += accumulate_sequence(&model, &seq.token_ids, 1.0 / n as f64, &mut sink)?;
        tokens += n;
        grads.push(g);
    }
    if grads.is_empty() {
        return Err(LabError::NoTokens("target"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let update = privatize(grads, batch_size, dp, &mut rng)?;
    opt.update(&mut state.data, &update.data, lr);
    Ok(StepStats {
        mean_loss: loss_sum / tokens as f64,
        tokens,
    })
}
