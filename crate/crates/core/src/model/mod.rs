//! The tiny language model: parameters, forward/backward, losses, generation
//! and checkpoints. Everything runs in double precision.

pub mod checkpoint;
pub mod linalg;
mod params;
mod transformer;

pub use checkpoint::Checkpoint;
pub use params::{GradientSet, ModelConfig, ModelState, ParamLayout, ParamSpec, ATTN_NAMES, INIT_STD};
pub use transformer::{per_token_loss, softmax, ForwardCache, GradSink, Logits, Transformer};

use crate::error::{LabError, Result};
use crate::tokenize::TokenBatch;

/// Initializes a model (see [`ModelState::init`]).
pub fn init_params(config: ModelConfig, seed: u64) -> Result<ModelState> {
    ModelState::init(config, seed)
}

/// Teacher-forced per-token losses of one sequence: entry `i` scores the
/// prediction of token `i + 1`.
pub fn sequence_losses(model: &Transformer<'_>, tokens: &[u32]) -> Result<Vec<f64>> {
    if tokens.len() < 2 {
        return Ok(Vec::new());
    }
    let (logits, _) = model.forward_cached(tokens, tokens.len() - 1)?;
    per_token_loss(&logits, &tokens[1..])
}

/// Adds `weight * d(sum of token losses)/d(params)` of one sequence to `sink`
/// and returns the unweighted loss sum.
pub fn accumulate_sequence(model: &Transformer<'_>, tokens: &[u32], weight: f64, sink: &mut GradSink<'_>) -> Result<f64> {
    if tokens.len() < 2 {
        return Ok(0.0);
    }
    let rows = tokens.len() - 1;
    let (logits, cache) = model.forward_cached(tokens, rows)?;
    let vocab = logits.vocab;
    let mut dlogits = vec![0.0; rows * vocab];
    let mut total = 0.0;
    for (i, &target) in tokens[1..].iter().enumerate() {
        let row = logits.row(i);
        let drow = &mut dlogits[i * vocab..(i + 1) * vocab];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        for (g, &v) in drow.iter_mut().zip(row) {
            *g = v - max;
        }
        linalg::exp_in_place(drow);
        let sum: f64 = drow.iter().sum();
        total += max + sum.ln() - row[target as usize];
        let w = weight / sum;
        drow.iter_mut().for_each(|g| *g *= w);
        drow[target as usize] -= weight;
    }
    model.backward(&cache, &dlogits, sink);
    Ok(total)
}

/// Number of next-token predictions in a batch.
pub fn count_targets(batch: &[TokenBatch]) -> usize {
    batch.iter().map(TokenBatch::n_targets).sum()
}

/// Mean per-token loss over all non-BOS positions of the batch and its exact
/// gradient with respect to every base parameter.
pub fn loss_and_gradient(model: &Transformer<'_>, batch: &[TokenBatch]) -> Result<(f64, GradientSet)> {
    let n = count_targets(batch);
    if n == 0 {
        return Err(LabError::NoTokens("target"));
    }
    let mut grad = GradientSet::zeros(model.state.n_params());
    let mut sum = 0.0;
    for seq in batch {
        let mut sink = GradSink {
            base: Some(&mut grad.data),
            adapters: None,
        };
        sum += accumulate_sequence(model, &seq.token_ids, 1.0 / n as f64, &mut sink)?;
    }
    Ok((sum / n as f64, grad))
}

/// Gradient of the batch mean loss (see [`loss_and_gradient`]).
pub fn backward(state: &ModelState, batch: &[TokenBatch]) -> Result<GradientSet> {
    Ok(loss_and_gradient(&Transformer::new(state), batch)?.1)
}

/// Mean loss over the same positions [`backward`] differentiates.
pub fn batch_loss(model: &Transformer<'_>, batch: &[TokenBatch]) -> Result<f64> {
    let n = count_targets(batch);
    if n == 0 {
        return Err(LabError::NoTokens("target"));
    }
    let mut sum = 0.0;
    for seq in batch {
        sum += sequence_losses(model, &seq.token_ids)?.iter().sum::<f64>();
    }
    Ok(sum / n as f64)
}

pub fn forward(state: &ModelState, tokens: &[u32]) -> Result<Logits> {
    Transformer::new(state).forward(tokens)
}

pub fn greedy_generate(state: &ModelState, prefix: &[u32], n_new: usize) -> Result<Vec<u32>> {
    Transformer::new(state).greedy_generate(prefix, n_new)
}
