//! Experiment orchestration. One output directory holds the shared data, the
//! pretrained base model and one run directory per fine-tuning configuration:
//!
//! ```text
//! <out>/plan.json
//! <out>/data/{train,test}.jsonl
//! <out>/base/{model.ckpt,pretrain.csv,eval.json}
//! <out>/runs/<label>/{config.json,flops.json,metrics.csv,resume.ckpt,epoch_<k>.ckpt}
//! <out>/tradeoff.{svg,csv}
//! ```
//!
//! Everything in it is a pure function of the plan. An interrupted run picks
//! up from its last complete epoch.

mod pareto;
mod plot;
mod probe;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;

pub use pareto::{pareto_front, pareto_select, TradeoffPoint};
pub use plot::{emit_tradeoff_plot, method_palette, SIDECAR_HEADER};
pub use probe::{recollection_probe, ProbeReport};

use crate::corpus::{generate_corpus, generate_pretrain_corpus, split_train_test, write_jsonl, AnnotatedDocument, DatasetTag};
use crate::efficiency::FlopsReport;
use crate::error::{LabError, Result};
use crate::finetune::{derive_seed, LoraAdapters, Method, OptimizerKind, TrainConfig, Trainer};
use crate::metrics::{append_metrics_row, epoch_report, evaluate_split, read_metrics_csv, write_metrics_csv, EpochReport, RunTag, SplitLosses};
use crate::model::{Checkpoint, ModelConfig, ModelState, Transformer};
use crate::tokenize::{encode_corpus, SplitTag, TokenBatch};

const STREAM_CORPUS: u64 = 10;
const STREAM_SPLIT: u64 = 11;
const STREAM_PRETRAIN_CORPUS: u64 = 12;
const STREAM_INIT: u64 = 13;
const STREAM_PRETRAIN: u64 = 14;

/// How the base model is produced from the PII-free corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub n_docs: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub warmup_steps: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            n_docs: 2000,
            epochs: 3,
            learning_rate: 1e-3,
            batch_size: 16,
            warmup_steps: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentPlan {
    /// Fine-tuning corpus: dialog or bio.
    pub corpus: DatasetTag,
    pub n_docs: usize,
    pub test_fraction: f64,
    pub pretrain: PretrainConfig,
    pub model: ModelConfig,
    /// The sweep. Every run is seeded with the master seed, whatever its own
    /// `seed` field says.
    pub sweep: Vec<TrainConfig>,
    pub out_dir: PathBuf,
    pub seed: u64,
}

impl Default for ExperimentPlan {
    fn default() -> Self {
        ExperimentPlan {
            corpus: DatasetTag::Dialog,
            n_docs: 200,
            test_fraction: 0.2,
            pretrain: PretrainConfig::default(),
            model: ModelConfig::default(),
            sweep: vec![TrainConfig::fft(), TrainConfig::dp(0.1), TrainConfig::lora(16, 16.0)],
            out_dir: PathBuf::from("puelab-out"),
            seed: 0,
        }
    }
}

impl ExperimentPlan {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| LabError::json(path.display().to_string(), e))
    }

    pub fn validate(&self) -> Result<()> {
        if self.corpus == DatasetTag::Pretrain {
            return Err(LabError::Config("the fine-tuning corpus must be dialog or bio".into()));
        }
        if self.n_docs < 2 {
            return Err(LabError::Config("need at least two documents to split".into()));
        }
        let p = &self.pretrain;
        if p.n_docs == 0 || p.batch_size == 0 || !(p.learning_rate > 0.0) {
            return Err(LabError::Config("pretraining needs documents, a batch size and a positive learning rate".into()));
        }
        self.model.validate()?;
        if self.sweep.is_empty() {
            return Err(LabError::Config("the sweep is empty".into()));
        }
        let mut labels = std::collections::HashSet::new();
        for cfg in &self.sweep {
            cfg.validate()?;
            if !labels.insert(cfg.label()) {
                return Err(LabError::Config(format!("duplicate run `{}` in the sweep", cfg.label())));
            }
        }
        Ok(())
    }

    /// The `i`-th sweep entry with the master seed applied.
    pub fn run_config(&self, i: usize) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.sweep[i].clone()
        }
    }

    pub fn run_dir(&self, label: &str) -> PathBuf {
        self.out_dir.join("runs").join(label)
    }

    pub fn base_dir(&self) -> PathBuf {
        self.out_dir.join("base")
    }
}

/// Fine-tuning documents and their token sequences.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub train_docs: Vec<AnnotatedDocument>,
    pub test_docs: Vec<AnnotatedDocument>,
    pub train: Vec<TokenBatch>,
    pub test: Vec<TokenBatch>,
}

/// Generates, splits and encodes the fine-tuning corpus, and writes the
/// split to `<out>/data`.
pub fn prepare_data(plan: &ExperimentPlan) -> Result<PreparedData> {
    let docs = generate_corpus(plan.corpus, derive_seed(plan.seed, STREAM_CORPUS), plan.n_docs)?;
    let (train_docs, test_docs) = split_train_test(&docs, plan.test_fraction, derive_seed(plan.seed, STREAM_SPLIT))?;
    let dir = plan.out_dir.join("data");
    create_dir(&dir)?;
    write_jsonl(&dir.join("train.jsonl"), &train_docs)?;
    write_jsonl(&dir.join("test.jsonl"), &test_docs)?;
    let ctx = plan.model.context_len;
    Ok(PreparedData {
        train: encode_corpus(&train_docs, SplitTag::Train, ctx)?,
        test: encode_corpus(&test_docs, SplitTag::Test, ctx)?,
        train_docs,
        test_docs,
    })
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| LabError::io(dir, e))
}

fn with_path(err: LabError, path: &Path) -> LabError {
    match err {
        LabError::CorruptCheckpoint { reason, .. } => LabError::CorruptCheckpoint {
            path: path.to_path_buf(),
            reason,
        },
        other => other,
    }
}

fn base_meta(plan: &ExperimentPlan) -> serde_json::Value {
    json!({
        "seed": plan.seed,
        "model": plan.model,
        "pretrain": plan.pretrain,
    })
}

/// Loads `<out>/base/model.ckpt`, or pretrains and writes it. A cached base
/// built from different settings is rejected; an unreadable one aborts.
pub fn pretrain_base(plan: &ExperimentPlan) -> Result<ModelState> {
    let dir = plan.base_dir();
    let path = dir.join("model.ckpt");
    if path.exists() {
        let ck = Checkpoint::read(&path)?;
        if ck.meta != base_meta(plan) {
            return Err(LabError::Config(format!(
                "{} was produced by a different plan; remove it or use another output directory",
                path.display()
            )));
        }
        return ck.model(plan.model).map_err(|e| with_path(e, &path));
    }
    create_dir(&dir)?;
    let p = &plan.pretrain;
    let docs = generate_pretrain_corpus(derive_seed(plan.seed, STREAM_PRETRAIN_CORPUS), p.n_docs)?;
    let data = encode_corpus(&docs, SplitTag::Train, plan.model.context_len)?;
    let config = TrainConfig {
        method: Method::Fft,
        learning_rate: p.learning_rate,
        batch_size: p.batch_size,
        epochs: p.epochs,
        warmup_steps: p.warmup_steps,
        seed: derive_seed(plan.seed, STREAM_PRETRAIN),
        optimizer: OptimizerKind::default(),
        ..TrainConfig::fft()
    };
    let init = ModelState::init(plan.model, derive_seed(plan.seed, STREAM_INIT))?;
    let mut trainer = Trainer::new(config, init)?;
    let mut log = String::from("epoch,mean_train_loss,steps\n");
    for _ in 0..p.epochs {
        let out = trainer.train_epoch(&data)?;
        log.push_str(&format!("{},{},{}\n", out.epoch, out.mean_loss, trainer.global_step));
    }
    let log_path = dir.join("pretrain.csv");
    std::fs::write(&log_path, log).map_err(|e| LabError::io(&log_path, e))?;
    let mut ck = Checkpoint::new(base_meta(plan));
    ck.add_model(&trainer.state);
    ck.write(&path)?;
    Ok(trainer.state)
}

/// Masked losses of a model on both splits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitEval {
    pub train: SplitLosses,
    pub test: SplitLosses,
}

pub fn evaluate_model(model: &Transformer<'_>, data: &PreparedData) -> Result<SplitEval> {
    Ok(SplitEval {
        train: SplitLosses::from_tally(&evaluate_split(model, &data.train)?)?,
        test: SplitLosses::from_tally(&evaluate_split(model, &data.test)?)?,
    })
}

/// Trains one configuration into `dir`, one epoch at a time, resuming from
/// `resume.ckpt` when present. Returns every epoch report of the run.
pub fn run_config(dir: &Path, config: &TrainConfig, base: &ModelState, data: &PreparedData) -> Result<Vec<EpochReport>> {
    config.validate()?;
    create_dir(dir)?;
    let config_path = dir.join("config.json");
    let config_json = serde_json::to_string_pretty(config).map_err(|e| LabError::json("run config", e))? + "\n";
    if config_path.exists() {
        let on_disk = std::fs::read_to_string(&config_path).map_err(|e| LabError::io(&config_path, e))?;
        if on_disk != config_json {
            return Err(LabError::Config(format!(
                "{} holds a different configuration",
                dir.display()
            )));
        }
    } else {
        std::fs::write(&config_path, &config_json).map_err(|e| LabError::io(&config_path, e))?;
    }

    let metrics_path = dir.join("metrics.csv");
    let resume_path = dir.join("resume.ckpt");
    let (mut trainer, mut reports) = if resume_path.exists() {
        let ck = Checkpoint::read(&resume_path)?;
        let trainer = Trainer::resume(config.clone(), base.clone(), &ck).map_err(|e| with_path(e, &resume_path))?;
        let mut reports = if metrics_path.exists() { read_metrics_csv(&metrics_path)? } else { Vec::new() };
        if reports.len() < trainer.epochs_done {
            return Err(LabError::CorruptCheckpoint {
                path: resume_path,
                reason: format!(
                    "checkpoint is at epoch {} but metrics.csv has only {} rows",
                    trainer.epochs_done,
                    reports.len()
                ),
            });
        }
        // rows past the checkpoint belong to an epoch that will be redone
        reports.truncate(trainer.epochs_done);
        write_metrics_csv(&metrics_path, &reports)?;
        (trainer, reports)
    } else {
        write_metrics_csv(&metrics_path, &[])?;
        (Trainer::new(config.clone(), base.clone())?, Vec::new())
    };

    let flops_path = dir.join("flops.json");
    if !flops_path.exists() {
        let scratch = {
            let mut t = Trainer::new(config.clone(), base.clone())?;
            t.set_instrumented(true);
            t
        };
        let first: Vec<TokenBatch> = scratch
            .epoch_order(data.train.len(), 0)
            .into_iter()
            .take(config.batch_size)
            .map(|i| data.train[i].clone())
            .collect();
        let measured = scratch.measured_step_cost(&first)?;
        FlopsReport::new(config.method, &scratch.step_cost(&first), Some(measured)).write(&flops_path)?;
    }

    let tag = RunTag::from_config(config);
    while trainer.epochs_done < config.epochs {
        let outcome = trainer.train_epoch(&data.train)?;
        let report = epoch_report(
            &trainer.model(),
            &data.train,
            &data.test,
            tag,
            outcome.epoch,
            trainer.flops_cumulative,
            trainer.global_step,
            outcome.final_lr,
        )?;
        trainer
            .weights_checkpoint()
            .write(&dir.join(format!("epoch_{}.ckpt", outcome.epoch)))?;
        append_metrics_row(&metrics_path, &report)?;
        trainer.resume_checkpoint().write(&resume_path)?;
        reports.push(report);
    }
    Ok(reports)
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub config: TrainConfig,
    pub dir: PathBuf,
    pub reports: Vec<EpochReport>,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub out_dir: PathBuf,
    /// The base model scored on the fine-tuning splits before any fine-tuning.
    pub base_eval: SplitEval,
    pub runs: Vec<RunOutcome>,
}

/// Data, base model, every sweep entry, then the trade-off plot.
pub fn run_experiment(plan: &ExperimentPlan) -> Result<ExperimentOutcome> {
    plan.validate()?;
    create_dir(&plan.out_dir)?;
    let plan_path = plan.out_dir.join("plan.json");
    let plan_json = serde_json::to_string_pretty(plan).map_err(|e| LabError::json("plan", e))? + "\n";
    std::fs::write(&plan_path, plan_json).map_err(|e| LabError::io(&plan_path, e))?;

    let data = prepare_data(plan)?;
    let base = pretrain_base(plan)?;
    let base_eval = evaluate_model(&Transformer::new(&base), &data)?;
    let eval_path = plan.base_dir().join("eval.json");
    let eval_json = serde_json::to_string_pretty(&base_eval).map_err(|e| LabError::json("base evaluation", e))? + "\n";
    std::fs::write(&eval_path, eval_json).map_err(|e| LabError::io(&eval_path, e))?;

    let mut runs = Vec::with_capacity(plan.sweep.len());
    for i in 0..plan.sweep.len() {
        let config = plan.run_config(i);
        let dir = plan.run_dir(&config.label());
        let reports = run_config(&dir, &config, &base, &data)?;
        runs.push(RunOutcome { config, dir, reports });
    }

    let points = runs
        .iter()
        .flat_map(|r| &r.reports)
        .map(TradeoffPoint::from_report)
        .collect::<Result<Vec<_>>>()?;
    emit_tradeoff_plot(&points, &plan.out_dir.join("tradeoff.svg"))?;
    Ok(ExperimentOutcome {
        out_dir: plan.out_dir.clone(),
        base_eval,
        runs,
    })
}

/// Reads `metrics.csv` of every run under `<out>/runs`, in label order.
pub fn collect_reports(out_dir: &Path) -> Result<Vec<(String, Vec<EpochReport>)>> {
    let runs = out_dir.join("runs");
    let entries = std::fs::read_dir(&runs).map_err(|e| LabError::io(&runs, e))?;
    let mut labels = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| LabError::io(&runs, e))?;
        if entry.path().join("metrics.csv").is_file() {
            labels.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    labels.sort();
    labels
        .into_iter()
        .map(|label| {
            let reports = read_metrics_csv(&runs.join(&label).join("metrics.csv"))?;
            Ok((label, reports))
        })
        .collect()
}

/// A fine-tuned model restored from a run directory.
#[derive(Debug, Clone)]
pub struct LoadedModel {
    pub state: ModelState,
    pub adapters: Option<LoraAdapters>,
}

impl LoadedModel {
    pub fn model(&self) -> Transformer<'_> {
        match &self.adapters {
            Some(ad) => Transformer::with_adapters(&self.state, ad),
            None => Transformer::new(&self.state),
        }
    }
}

/// Loads `epoch_<epoch>.ckpt` of the run in `dir`. LoRA checkpoints hold
/// only the factors and are applied on top of `base`.
pub fn load_epoch(dir: &Path, epoch: usize, base: &ModelState) -> Result<(TrainConfig, LoadedModel)> {
    let config_path = dir.join("config.json");
    let text = std::fs::read_to_string(&config_path).map_err(|e| LabError::io(&config_path, e))?;
    let config: TrainConfig = serde_json::from_str(&text).map_err(|e| LabError::json(config_path.display().to_string(), e))?;
    let path = dir.join(format!("epoch_{epoch}.ckpt"));
    let ck = Checkpoint::read(&path)?;
    let loaded = match config.method {
        Method::Lora => LoadedModel {
            state: base.clone(),
            adapters: Some(LoraAdapters::from_checkpoint(base, &config.lora, &ck).map_err(|e| with_path(e, &path))?),
        },
        _ => LoadedModel {
            state: ck.model(base.config).map_err(|e| with_path(e, &path))?,
            adapters: None,
        },
    };
    Ok((config, loaded))
}
