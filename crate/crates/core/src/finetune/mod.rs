//! Full fine-tuning, differentially private fine-tuning and LoRA, plus the
//! optimizer, the learning-rate schedule and the epoch loop they share.

mod config;
pub mod dp;
pub mod lora;
mod optim;
mod schedule;
mod trainer;

pub use config::{DpConfig, LoraConfig, Method, TrainConfig};
pub use dp::{add_noise, clip, dp_step, privatize};
pub use lora::{adapter_loss_and_gradient, lora_init, lora_step, LoraAdapters, LoraTarget};
pub use optim::{OptimizerKind, OptimizerState};
pub use schedule::lr_schedule;
pub use trainer::{EpochOutcome, Trainer};

use crate::error::Result;
use crate::model::{loss_and_gradient, ModelState, Transformer};
use crate::tokenize::TokenBatch;

/// What a single update saw.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub mean_loss: f64,
    pub tokens: usize,
}

/// One update of every parameter against the batch mean loss.
pub fn fft_step(state: &mut ModelState, batch: &[TokenBatch], opt: &mut OptimizerState, lr: f64) -> Result<StepStats> {
    let (mean_loss, grad) = loss_and_gradient(&Transformer::new(state), batch)?;
    opt.update(&mut state.data, &grad.data, lr);
    Ok(StepStats {
        mean_loss,
        tokens: crate::model::count_targets(batch),
    })
}

/// Independent seed for sub-stream `stream` of `seed` (splitmix64 finalizer).
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
