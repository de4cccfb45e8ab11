//! The epoch loop shared by the three methods.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use super::config::{Method, TrainConfig};
use super::dp::dp_step;
use super::lora::{lora_init, lora_step, LoraAdapters};
use super::optim::OptimizerState;
use super::schedule::lr_schedule;
use super::{derive_seed, fft_step, StepStats};
use crate::efficiency::{flops_per_method, CostEstimate};
use crate::error::{LabError, Result};
use crate::model::linalg::{start_instrumentation, stop_instrumentation};
use crate::model::{Checkpoint, ModelState, Transformer};
use crate::tokenize::TokenBatch;

const STREAM_SHUFFLE: u64 = 1;
const STREAM_NOISE: u64 = 2;
const STREAM_ADAPTERS: u64 = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct EpochOutcome {
    /// 1-based index of the epoch just finished.
    pub epoch: usize,
    pub steps: u64,
    pub tokens: usize,
    /// Token-weighted mean of the batch losses seen while training.
    pub mean_loss: f64,
    /// Learning rate of the last update taken.
    pub final_lr: f64,
    pub flops: f64,
}

/// Owns the trainable state of one run.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: TrainConfig,
    pub state: ModelState,
    pub adapters: Option<LoraAdapters>,
    pub opt: OptimizerState,
    pub epochs_done: usize,
    pub global_step: u64,
    pub flops_cumulative: f64,
    instrumented: bool,
}

impl Trainer {
    /// Starts a run from `base`. LoRA runs draw fresh adapters; the others
    /// train `base` itself.
    pub fn new(config: TrainConfig, base: ModelState) -> Result<Self> {
        config.validate()?;
        let adapters = match config.method {
            Method::Lora => Some(lora_init(&base, &config.lora, derive_seed(config.seed, STREAM_ADAPTERS))?),
            _ => None,
        };
        let n = adapters.as_ref().map_or(base.n_params(), LoraAdapters::n_params);
        Ok(Trainer {
            opt: OptimizerState::new(config.optimizer, n),
            config,
            state: base,
            adapters,
            epochs_done: 0,
            global_step: 0,
            flops_cumulative: 0.0,
            instrumented: false,
        })
    }

    pub fn set_instrumented(&mut self, on: bool) {
        self.instrumented = on;
    }

    pub fn model(&self) -> Transformer<'_> {
        match &self.adapters {
            Some(ad) => Transformer::with_adapters(&self.state, ad),
            None => Transformer::new(&self.state),
        }
    }

    pub fn n_trainable(&self) -> usize {
        self.adapters.as_ref().map_or(self.state.n_params(), LoraAdapters::n_params)
    }

    pub fn steps_per_epoch(&self, n_sequences: usize) -> u64 {
        n_sequences.div_ceil(self.config.batch_size) as u64
    }

    /// Analytic cost of one step over `batch`.
    pub fn step_cost(&self, batch: &[TokenBatch]) -> CostEstimate {
        let tokens = crate::model::count_targets(batch) as f64;
        let n_adapter = self.adapters.as_ref().map_or(0, LoraAdapters::n_params);
        flops_per_method(self.config.method, tokens, self.state.n_params() as f64, n_adapter as f64, batch.len())
    }

    fn step(&mut self, batch: &[TokenBatch], lr: f64) -> Result<StepStats> {
        match self.config.method {
            Method::Fft => fft_step(&mut self.state, batch, &mut self.opt, lr),
            Method::Dp => {
                let seed = derive_seed(derive_seed(self.config.seed, STREAM_NOISE), self.global_step);
                dp_step(
                    &mut self.state,
                    batch,
                    &self.config.dp,
                    self.config.batch_size,
                    &mut self.opt,
                    lr,
                    seed,
                )
            }
            Method::Lora => {
                let adapters = self.adapters.as_mut().expect("LoRA run carries adapters");
                lora_step(&self.state, adapters, batch, &mut self.opt, lr)
            }
        }
    }

    /// Operations executed by one step over `batch`, counted on a scratch copy
    /// so the run itself is not advanced.
    pub fn measured_step_cost(&self, batch: &[TokenBatch]) -> Result<u64> {
        if !self.instrumented {
            return Err(LabError::InstrumentationDisabled);
        }
        let mut scratch = self.clone();
        let lr = scratch.config.learning_rate;
        start_instrumentation();
        let out = scratch.step(batch, lr);
        let count = stop_instrumentation().expect("counter was started");
        out.map(|_| count)
    }

    /// Order in which sequences are visited during `epoch` (0-based).
    pub fn epoch_order(&self, n: usize, epoch: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).collect();
        let seed = derive_seed(derive_seed(self.config.seed, STREAM_SHUFFLE), epoch as u64);
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        order
    }

    /// One pass over `dataset` in seeded order, the last batch possibly short.
    pub fn train_epoch(&mut self, dataset: &[TokenBatch]) -> Result<EpochOutcome> {
        if dataset.is_empty() {
            return Err(LabError::Config("cannot train on an empty dataset".into()));
        }
        let per_epoch = self.steps_per_epoch(dataset.len());
        let total = per_epoch * self.config.epochs as u64;
        let order = self.epoch_order(dataset.len(), self.epochs_done);
        let mut loss_sum = 0.0;
        let mut tokens = 0;
        let mut final_lr = 0.0;
        let mut flops = 0.0;
        for chunk in order.chunks(self.config.batch_size) {
            let batch: Vec<TokenBatch> = chunk.iter().map(|&i| dataset[i].clone()).collect();
            let lr = lr_schedule(self.global_step.min(total), total, self.config.learning_rate, self.config.warmup_steps);
            let stats = self.step(&batch, lr)?;
            flops += self.step_cost(&batch).flops_per_step;
            loss_sum += stats.mean_loss * stats.tokens as f64;
            tokens += stats.tokens;
            final_lr = lr;
            self.global_step += 1;
        }
        self.epochs_done += 1;
        self.flops_cumulative += flops;
        Ok(EpochOutcome {
            epoch: self.epochs_done,
            steps: per_epoch,
            tokens,
            mean_loss: if tokens > 0 { loss_sum / tokens as f64 } else { 0.0 },
            final_lr,
            flops,
        })
    }

    /// Trained values only: every weight for full and private runs, the
    /// adapter factors for LoRA.
    pub fn weights_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(json!({
            "epoch": self.epochs_done,
            "method": self.config.method,
            "label": self.config.label(),
        }));
        match &self.adapters {
            Some(ad) => ad.add_to_checkpoint(&mut ck),
            None => ck.add_model(&self.state),
        }
        ck
    }

    /// Everything needed to continue the run after a restart.
    pub fn resume_checkpoint(&self) -> Checkpoint {
        let mut ck = self.weights_checkpoint();
        ck.meta = json!({
            "epoch": self.epochs_done,
            "global_step": self.global_step,
            "flops_cumulative": self.flops_cumulative,
            "optimizer_t": self.opt.t,
            "label": self.config.label(),
        });
        if !self.opt.m.is_empty() {
            ck.push("opt/m", vec![self.opt.m.len()], &self.opt.m);
            ck.push("opt/v", vec![self.opt.v.len()], &self.opt.v);
        }
        ck
    }

    /// Rebuilds a run from [`Trainer::resume_checkpoint`] output. `base` is the
    /// starting model (ignored for full and private runs, whose weights are
    /// stored in the checkpoint).
    pub fn resume(config: TrainConfig, base: ModelState, ck: &Checkpoint) -> Result<Self> {
        let corrupt = |reason: String| LabError::CorruptCheckpoint {
            path: std::path::PathBuf::new(),
            reason,
        };
        let mut trainer = Trainer::new(config, base)?;
        let meta = |key: &str| ck.meta.get(key).ok_or_else(|| corrupt(format!("missing `{key}`")));
        if meta("label")?.as_str() != Some(trainer.config.label().as_str()) {
            return Err(corrupt("checkpoint belongs to a different configuration".into()));
        }
        let as_u64 = |key: &str| meta(key).and_then(|v| v.as_u64().ok_or_else(|| corrupt(format!("`{key}` is not an integer"))));
        trainer.epochs_done = as_u64("epoch")? as usize;
        trainer.global_step = as_u64("global_step")?;
        trainer.opt.t = as_u64("optimizer_t")?;
        trainer.flops_cumulative = meta("flops_cumulative")?
            .as_f64()
            .ok_or_else(|| corrupt("`flops_cumulative` is not a number".into()))?;
        match trainer.config.method {
            Method::Lora => {
                let lora = trainer.config.lora.clone();
                trainer.adapters = Some(LoraAdapters::from_checkpoint(&trainer.state, &lora, ck)?);
            }
            _ => trainer.state = ck.model(trainer.state.config)?,
        }
        if !trainer.opt.m.is_empty() {
            let (m, v) = (ck.gather("opt/m"), ck.gather("opt/v"));
            if m.len() != trainer.opt.m.len() || v.len() != trainer.opt.v.len() {
                return Err(corrupt("optimizer moments do not match the trainable set".into()));
            }
            trainer.opt.m = m;
            trainer.opt.v = v;
        }
        Ok(trainer)
    }
}
