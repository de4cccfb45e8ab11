//! Analytic compute and memory accounting per fine-tuning method.
//!
//! Costs are in floating-point operations with one multiply-add counted as
//! two. `tokens` is the number of predicted positions a step trains on, `n`
//! the base parameter count, `n_adapter` the trainable adapter count.
//! Attention score arithmetic is left out, as in the usual `6DN` rule; the
//! measured counter includes it.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::finetune::Method;

/// Relative compute of private over full fine-tuning as profiled on large models.
pub const REFERENCE_DP_RATIO: f64 = 1.33;
/// Relative compute of LoRA over full fine-tuning as profiled on large models.
pub const REFERENCE_LORA_RATIO: f64 = 0.65;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostEstimate {
    pub flops_per_step: f64,
    pub flops_per_epoch: f64,
    pub flops_cumulative: f64,
    pub memory_values: f64,
    pub relative_to_fft: f64,
}

impl CostEstimate {
    /// Extends a single-step estimate over a run.
    pub fn over(mut self, steps_per_epoch: u64, epochs: u64) -> Self {
        self.flops_per_epoch = self.flops_per_step * steps_per_epoch as f64;
        self.flops_cumulative = self.flops_per_epoch * epochs as f64;
        self
    }
}

/// `6 * tokens * n`: a forward pass of `2DN` plus a backward pass of `4DN`.
pub fn flops_fft(tokens: f64, n: f64) -> f64 {
    forward_flops(tokens, n) + backward_flops(tokens, n)
}

fn forward_flops(tokens: f64, n: f64) -> f64 {
    2.0 * tokens * n
}

fn backward_flops(tokens: f64, n: f64) -> f64 {
    4.0 * tokens * n
}

/// Per-step FLOPs of `method`. `batch` is the number of sequences in the step.
pub fn step_flops(method: Method, tokens: f64, n: f64, n_adapter: f64, batch: usize) -> f64 {
    match method {
        Method::Fft => flops_fft(tokens, n),
        // forward through the adapted weights, activation gradients through
        // the frozen ones, weight gradients only for the factors
        Method::Lora => 2.0 * tokens * (n + n_adapter) + 2.0 * tokens * n + 4.0 * tokens * n_adapter,
        // per-sample norm (2N) and rescale (N), then one noise draw and add (2N)
        Method::Dp => flops_fft(tokens, n) + 3.0 * n * batch as f64 + 2.0 * n,
    }
}

/// Resident numeric values: weights, gradients and optimizer moments.
pub fn memory_estimate(method: Method, n: f64, n_adapter: f64, batch: usize) -> f64 {
    match method {
        Method::Fft => 4.0 * n,
        Method::Dp => 4.0 * n + batch as f64 * n,
        Method::Lora => n + 4.0 * n_adapter,
    }
}

/// Single-step estimate for `method`, with its ratio to full fine-tuning on
/// the same step.
pub fn flops_per_method(method: Method, tokens: f64, n: f64, n_adapter: f64, batch: usize) -> CostEstimate {
    let per_step = step_flops(method, tokens, n, n_adapter, batch);
    let fft = flops_fft(tokens, n);
    CostEstimate {
        flops_per_step: per_step,
        flops_per_epoch: per_step,
        flops_cumulative: per_step,
        memory_values: memory_estimate(method, n, n_adapter, batch),
        relative_to_fft: if method == Method::Fft { 1.0 } else { per_step / fft },
    }
}

/// The `flops.json` record of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub method: Method,
    pub analytic_per_step: f64,
    pub measured_per_step: Option<f64>,
    pub ratio_to_fft: f64,
    pub memory_values: f64,
}

impl FlopsReport {
    pub fn new(method: Method, estimate: &CostEstimate, measured: Option<u64>) -> Self {
        FlopsReport {
            method,
            analytic_per_step: estimate.flops_per_step,
            measured_per_step: measured.map(|m| m as f64),
            ratio_to_fft: estimate.relative_to_fft,
            memory_values: estimate.memory_values,
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| LabError::json("flops report", e))?;
        std::fs::write(path, text + "\n").map_err(|e| LabError::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| LabError::json(&path.display().to_string(), e))
    }
}
