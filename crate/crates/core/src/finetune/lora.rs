//! Low-rank adapters on the attention projections.
//!
//! Every adapted projection `W0` (d_in x d_out, applied as `x W0`) gains a
//! trainable pair `B` (d_in x r) and `A` (r x d_out); the forward pass uses
//! `W0 + (alpha / r) B A`. `B` starts at zero so the adapted model is the base
//! model until the first update.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::LoraConfig;
use super::optim::OptimizerState;
use super::StepStats;
use crate::error::{LabError, Result};
use crate::model::linalg::gemm;
use crate::model::{accumulate_sequence, count_targets, Checkpoint, GradSink, ModelState, Transformer, ATTN_NAMES, INIT_STD};
use crate::tokenize::TokenBatch;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LoraTarget {
    pub layer: usize,
    /// Index into `q`, `k`, `v`, `o`.
    pub proj: usize,
    pub d_in: usize,
    pub d_out: usize,
    pub b_offset: usize,
    pub a_offset: usize,
}

impl LoraTarget {
    pub fn name(&self) -> String {
        format!("layers.{}.attn.{}", self.layer, ATTN_NAMES[self.proj])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapters {
    pub rank: usize,
    pub alpha: f64,
    pub targets: Vec<LoraTarget>,
    /// Every factor, flattened target by target (`B` then `A`).
    pub data: Vec<f64>,
    lookup: Vec<Option<usize>>,
}

impl LoraAdapters {
    fn layout(base: &ModelState, config: &LoraConfig) -> Result<(Vec<LoraTarget>, Vec<Option<usize>>, usize)> {
        let d = base.config.d_model;
        let r = config.rank;
        if r == 0 || r > d {
            return Err(LabError::Config(format!(
                "LoRA rank {r} must lie in 1..={d} for {d}x{d} projections"
            )));
        }
        if !(config.alpha > 0.0) {
            return Err(LabError::Config("LoRA alpha must be positive".into()));
        }
        let mut procs = Vec::new();
        for name in &config.targets {
            let p = ATTN_NAMES
                .iter()
                .position(|n| n == name)
                .ok_or_else(|| LabError::Config(format!("unknown LoRA target `{name}`")))?;
            if !procs.contains(&p) {
                procs.push(p);
            }
        }
        if procs.is_empty() {
            return Err(LabError::Config("LoRA needs at least one target".into()));
        }
        procs.sort_unstable();
        let n_layers = base.config.n_layers;
        let mut targets = Vec::new();
        let mut lookup = vec![None; n_layers * ATTN_NAMES.len()];
        let mut offset = 0;
        for layer in 0..n_layers {
            for &proj in &procs {
                lookup[layer * ATTN_NAMES.len() + proj] = Some(targets.len());
                targets.push(LoraTarget {
                    layer,
                    proj,
                    d_in: d,
                    d_out: d,
                    b_offset: offset,
                    a_offset: offset + d * r,
                });
                offset += d * r + r * d;
            }
        }
        Ok((targets, lookup, offset))
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn n_params(&self) -> usize {
        self.data.len()
    }

    pub fn target(&self, layer: usize, proj: usize) -> Option<&LoraTarget> {
        self.lookup
            .get(layer * ATTN_NAMES.len() + proj)
            .copied()
            .flatten()
            .map(|i| &self.targets[i])
    }

    pub fn factor_b(&self, t: &LoraTarget) -> &[f64] {
        &self.data[t.b_offset..t.b_offset + t.d_in * self.rank]
    }

    pub fn factor_a(&self, t: &LoraTarget) -> &[f64] {
        &self.data[t.a_offset..t.a_offset + self.rank * t.d_out]
    }

    /// The unscaled update `B A` of one target, d_in x d_out row-major.
    pub fn delta(&self, t: &LoraTarget) -> Vec<f64> {
        let mut out = vec![0.0; t.d_in * t.d_out];
        gemm(t.d_in, self.rank, t.d_out, 1.0, self.factor_b(t), false, self.factor_a(t), false, 0.0, &mut out);
        out
    }

    pub fn config(&self) -> LoraConfig {
        let mut names: Vec<String> = Vec::new();
        for t in &self.targets {
            let n = ATTN_NAMES[t.proj].to_string();
            if !names.contains(&n) {
                names.push(n);
            }
        }
        LoraConfig {
            rank: self.rank,
            alpha: self.alpha,
            targets: names,
        }
    }

    /// Appends the factors as `lora/<target>.B` and `lora/<target>.A`.
    pub fn add_to_checkpoint(&self, ck: &mut Checkpoint) {
        for t in &self.targets {
            ck.push(format!("lora/{}.B", t.name()), vec![t.d_in, self.rank], self.factor_b(t));
            ck.push(format!("lora/{}.A", t.name()), vec![self.rank, t.d_out], self.factor_a(t));
        }
    }

    pub fn from_checkpoint(base: &ModelState, config: &LoraConfig, ck: &Checkpoint) -> Result<Self> {
        let (targets, lookup, total) = Self::layout(base, config)?;
        let mut data = vec![0.0; total];
        for t in &targets {
            for (suffix, offset, len) in [("B", t.b_offset, t.d_in * config.rank), ("A", t.a_offset, config.rank * t.d_out)] {
                let name = format!("lora/{}.{suffix}", t.name());
                let values = ck.tensor(&name).ok_or_else(|| LabError::CorruptCheckpoint {
                    path: std::path::PathBuf::new(),
                    reason: format!("missing tensor {name}"),
                })?;
                if values.len() != len {
                    return Err(LabError::CorruptCheckpoint {
                        path: std::path::PathBuf::new(),
                        reason: format!("tensor {name} has {} values, expected {len}", values.len()),
                    });
                }
                data[offset..offset + len].copy_from_slice(values);
            }
        }
        Ok(LoraAdapters {
            rank: config.rank,
            alpha: config.alpha,
            targets,
            data,
            lookup,
        })
    }
}

/// `A ~ N(0, 0.02^2)` from `seed`, `B = 0`.
pub fn lora_init(base: &ModelState, config: &LoraConfig, seed: u64) -> Result<LoraAdapters> {
    let (targets, lookup, total) = LoraAdapters::layout(base, config)?;
    let mut data = vec![0.0; total];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    for t in &targets {
        for v in &mut data[t.a_offset..t.a_offset + config.rank * t.d_out] {
            *v = normal.sample(&mut rng);
        }
    }
    Ok(LoraAdapters {
        rank: config.rank,
        alpha: config.alpha,
        targets,
        data,
        lookup,
    })
}

/// Mean batch loss and its gradient with respect to the adapter factors only.
pub fn adapter_loss_and_gradient(base: &ModelState, adapters: &LoraAdapters, batch: &[TokenBatch]) -> Result<(f64, Vec<f64>)> {
    let n = count_targets(batch);
    if n == 0 {
        return Err(LabError::NoTokens("target"));
    }
    let model = Transformer::with_adapters(base, adapters);
    let mut grad = vec![0.0; adapters.n_params()];
    let mut sum = 0.0;
    for seq in batch {
        let mut sink = GradSink {
            base: None,
            adapters: Some(&mut grad),
        };
        sum += accumulate_sequence(&model, &seq.token_ids, 1.0 / n as f64, &mut sink)?;
    }
    Ok((sum / n as f64, grad))
}

/// One adapter update. The base weights are only read.
pub fn lora_step(
    base: &ModelState,
    adapters: &mut LoraAdapters,
    batch: &[TokenBatch],
    opt: &mut OptimizerState,
    lr: f64,
) -> Result<StepStats> {
    let (mean_loss, grad) = adapter_loss_and_gradient(base, adapters, batch)?;
    opt.update(&mut adapters.data, &grad, lr);
    Ok(StepStats {
        mean_loss,
        tokens: count_targets(batch),
    })
}
