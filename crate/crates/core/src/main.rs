//! `puelab` command line: corpus synthesis, pretraining, fine-tuning runs,
//! evaluation, the extraction probe and trade-off reports.
//!
//! Exit codes: 0 success, 2 invalid configuration, 3 no feasible checkpoint
//! (with `report --require-feasible`), 4 I/O or checkpoint failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use puelab::corpus::{generate_corpus, read_jsonl, write_jsonl, DatasetTag, EntityKind};
use puelab::finetune::{Method, TrainConfig};
use puelab::lab::{
    collect_reports, emit_tradeoff_plot, evaluate_model, load_epoch, pareto_front, pareto_select, prepare_data, pretrain_base,
    recollection_probe, run_config, run_experiment, ExperimentPlan, TradeoffPoint,
};
use puelab::model::Transformer;
use puelab::{LabError, Result};

#[derive(Parser)]
#[command(name = "puelab", version, about = "Privacy, utility and efficiency of fine-tuning a tiny language model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate an annotated corpus as JSON Lines.
    Synth {
        #[arg(long, default_value = "dialog")]
        corpus: DatasetTag,
        #[arg(long, default_value_t = 200)]
        n_docs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Prepare the data split and pretrain (or load) the base model.
    Pretrain(PlanArgs),
    /// Fine-tune one configuration.
    Train {
        #[command(flatten)]
        plan: PlanArgs,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Run every configuration of the sweep and draw the trade-off plot.
    Experiment(PlanArgs),
    /// Score a checkpoint (or the base model) on both splits.
    Eval {
        #[command(flatten)]
        plan: PlanArgs,
        #[command(flatten)]
        pick: CheckpointArgs,
    },
    /// Prefix-prompt extraction check on the training split.
    Probe {
        #[command(flatten)]
        plan: PlanArgs,
        #[command(flatten)]
        pick: CheckpointArgs,
        /// Bytes of preceding text in each prompt. Positions are absolute, so
        /// prompts cut mid-document are out of distribution; the default takes
        /// everything that fits the context window.
        #[arg(long, default_value_t = 256)]
        prefix_len: usize,
        /// Comma-separated entity kinds; all kinds when omitted.
        #[arg(long, value_delimiter = ',')]
        kinds: Vec<EntityKind>,
    },
    /// Trade-off plot and checkpoint selection over every run in `--out`.
    Report {
        #[arg(long)]
        out: PathBuf,
        /// Privacy floor for checkpoint selection.
        #[arg(long, default_value_t = 0.0)]
        min_privacy: f64,
        /// Exit with code 3 when no checkpoint meets the floor.
        #[arg(long)]
        require_feasible: bool,
    },
}

#[derive(Args)]
struct PlanArgs {
    /// Experiment plan as JSON; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    corpus: Option<DatasetTag>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl PlanArgs {
    fn load(&self) -> Result<ExperimentPlan> {
        let mut plan = match &self.config {
            Some(path) => ExperimentPlan::from_json_file(path)?,
            None => ExperimentPlan::default(),
        };
        if let Some(seed) = self.seed {
            plan.seed = seed;
        }
        if let Some(corpus) = self.corpus {
            plan.corpus = corpus;
        }
        if let Some(out) = &self.out {
            plan.out_dir = out.clone();
        }
        plan.validate()?;
        Ok(plan)
    }
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    method: Option<Method>,
    /// DP noise scale.
    #[arg(long)]
    sigma: Option<f64>,
    /// DP clipping threshold.
    #[arg(long)]
    clip: Option<f64>,
    #[arg(long)]
    rank: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
}

impl RunArgs {
    /// The sweep entry for `--method` (or the first entry), else the method
    /// defaults, with the flags applied.
    fn resolve(&self, plan: &ExperimentPlan) -> Result<TrainConfig> {
        let index = match self.method {
            Some(m) => plan.sweep.iter().position(|c| c.method == m),
            None => Some(0),
        };
        let mut cfg = match index {
            Some(i) => plan.run_config(i),
            None => TrainConfig {
                seed: plan.seed,
                ..TrainConfig::for_method(self.method.expect("method given"))
            },
        };
        if let Some(v) = self.sigma {
            cfg.dp.noise_scale = v;
        }
        if let Some(v) = self.clip {
            cfg.dp.clip_threshold = v;
        }
        if let Some(v) = self.rank {
            cfg.lora.rank = v;
        }
        if let Some(v) = self.alpha {
            cfg.lora.alpha = v;
        }
        if let Some(v) = self.lr {
            cfg.learning_rate = v;
        }
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct CheckpointArgs {
    /// Run label, e.g. `fft` or `lora_r16_a16`; the base model when omitted.
    #[arg(long)]
    label: Option<String>,
    /// Epoch to load; the last complete epoch when omitted.
    #[arg(long)]
    epoch: Option<usize>,
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| LabError::json("output", e))?;
    println!("{text}");
    Ok(())
}

fn last_epoch(dir: &Path) -> Result<usize> {
    let rows = puelab::metrics::read_metrics_csv(&dir.join("metrics.csv"))?;
    rows.last()
        .map(|r| r.epoch)
        .ok_or_else(|| LabError::Config(format!("{} has no completed epoch", dir.display())))
}

/// Runs `f` on the model selected by `pick`.
fn with_model<T>(plan: &ExperimentPlan, pick: &CheckpointArgs, f: impl FnOnce(&Transformer<'_>) -> Result<T>) -> Result<T> {
    let base = pretrain_base(plan)?;
    match &pick.label {
        None => f(&Transformer::new(&base)),
        Some(label) => {
            let dir = plan.run_dir(label);
            let epoch = match pick.epoch {
                Some(e) => e,
                None => last_epoch(&dir)?,
            };
            let (_, loaded) = load_epoch(&dir, epoch, &base)?;
            f(&loaded.model())
        }
    }
}

fn report(out: &Path, min_privacy: f64, require_feasible: bool) -> Result<()> {
    let mut points = Vec::new();
    for (_, reports) in collect_reports(out)? {
        for r in &reports {
            points.push(TradeoffPoint::from_report(r)?);
        }
    }
    let svg = out.join("tradeoff.svg");
    emit_tradeoff_plot(&points, &svg)?;
    eprintln!("wrote {} and {}", svg.display(), svg.with_extension("csv").display());
    let front = pareto_front(&points);
    let selected = match pareto_select(&points, min_privacy) {
        Ok(p) => Some(p),
        Err(LabError::NoFeasibleCheckpoint(t)) if !require_feasible => {
            eprintln!("no checkpoint reaches privacy {t}");
            None
        }
        Err(e) => return Err(e),
    };
    print_json(&serde_json::json!({ "selected": selected, "front": front }))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { corpus, n_docs, seed, out } => {
            let docs = generate_corpus(corpus, seed, n_docs)?;
            write_jsonl(&out, &docs)?;
            // round-trip through the validating reader
            let back = read_jsonl(&out)?;
            eprintln!("wrote {} documents to {}", back.len(), out.display());
            Ok(())
        }
        Command::Pretrain(args) => {
            let plan = args.load()?;
            let data = prepare_data(&plan)?;
            let base = pretrain_base(&plan)?;
            print_json(&evaluate_model(&Transformer::new(&base), &data)?)
        }
        Command::Train { plan, run } => {
            let plan = plan.load()?;
            let cfg = run.resolve(&plan)?;
            let data = prepare_data(&plan)?;
            let base = pretrain_base(&plan)?;
            let dir = plan.run_dir(&cfg.label());
            let reports = run_config(&dir, &cfg, &base, &data)?;
            for r in &reports {
                println!("{}", r.csv_row());
            }
            eprintln!("run directory {}", dir.display());
            Ok(())
        }
        Command::Experiment(args) => {
            let plan = args.load()?;
            let outcome = run_experiment(&plan)?;
            for run in &outcome.runs {
                if let Some(last) = run.reports.last() {
                    println!("{}", last.csv_row());
                }
            }
            eprintln!("results in {}", outcome.out_dir.display());
            Ok(())
        }
        Command::Eval { plan, pick } => {
            let plan = plan.load()?;
            let data = prepare_data(&plan)?;
            let eval = with_model(&plan, &pick, |m| evaluate_model(m, &data))?;
            print_json(&eval)
        }
        Command::Probe { plan, pick, prefix_len, kinds } => {
            let plan = plan.load()?;
            let data = prepare_data(&plan)?;
            let report = with_model(&plan, &pick, |m| recollection_probe(m, &data.train_docs, prefix_len, &kinds))?;
            print_json(&report)
        }
        Command::Report { out, min_privacy, require_feasible } => report(&out, min_privacy, require_feasible),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
