//! End-to-end runs of the lab on a tiny plan: output layout, resume after an
//! interruption, corrupt checkpoints and the plot sidecar.

use std::path::Path;

use puelab::finetune::TrainConfig;
use puelab::lab::{collect_reports, load_epoch, pretrain_base, run_experiment, ExperimentPlan, PretrainConfig, SIDECAR_HEADER};
use puelab::metrics::evaluate_split;
use puelab::model::ModelConfig;
use puelab::LabError;

const EPOCHS: usize = 3;

fn tiny_plan(out: &Path) -> ExperimentPlan {
    let short = |cfg: TrainConfig| TrainConfig {
        epochs: EPOCHS,
        batch_size: 4,
        warmup_steps: 2,
        ..cfg
    };
    ExperimentPlan {
        n_docs: 12,
        pretrain: PretrainConfig {
            n_docs: 16,
            epochs: 1,
            ..PretrainConfig::default()
        },
        model: ModelConfig {
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            d_ff: 32,
            ..ModelConfig::default()
        },
        sweep: vec![
            short(TrainConfig::fft()),
            short(TrainConfig::dp(0.1)),
            short(TrainConfig::lora(4, 4.0)),
        ],
        out_dir: out.to_path_buf(),
        seed: 5,
        ..ExperimentPlan::default()
    }
}

fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

#[test]
fn layout_plot_and_sidecar() {
    let dir = tempfile::tempdir().unwrap();
    let plan = tiny_plan(dir.path());
    let outcome = run_experiment(&plan).unwrap();
    assert_eq!(outcome.runs.len(), 3);

    for name in ["plan.json", "data/train.jsonl", "data/test.jsonl", "base/model.ckpt", "base/pretrain.csv", "base/eval.json"] {
        assert!(dir.path().join(name).is_file(), "{name} missing");
    }
    for run in &outcome.runs {
        for name in ["config.json", "flops.json", "metrics.csv", "resume.ckpt"] {
            assert!(run.dir.join(name).is_file(), "{name} missing in {}", run.dir.display());
        }
        for k in 1..=EPOCHS {
            assert!(run.dir.join(format!("epoch_{k}.ckpt")).is_file());
        }
        let csv = String::from_utf8(read(&run.dir.join("metrics.csv"))).unwrap();
        assert_eq!(csv.lines().count(), EPOCHS + 1);
    }

    // the sidecar repeats the metrics values verbatim
    let sidecar = String::from_utf8(read(&dir.path().join("tradeoff.csv"))).unwrap();
    let mut lines = sidecar.lines();
    assert_eq!(lines.next(), Some(SIDECAR_HEADER));
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 3 * EPOCHS);
    for run in &outcome.runs {
        let label = run.config.label();
        let metrics = String::from_utf8(read(&run.dir.join("metrics.csv"))).unwrap();
        for line in metrics.lines().skip(1) {
            let m: Vec<&str> = line.split(',').collect();
            let row = rows
                .iter()
                .find(|r| r[0] == label && r[2] == m[0])
                .unwrap_or_else(|| panic!("no sidecar row for {label} epoch {}", m[0]));
            assert_eq!(row[1], m[1]);
            assert_eq!(row[3], m[6], "privacy is the sensitive train loss");
            assert_eq!(row[4], m[10], "utility loss is the non-sensitive test loss");
            assert_eq!(row[5], m[16]);
        }
    }

    let svg = String::from_utf8(read(&dir.path().join("tradeoff.svg"))).unwrap();
    let doc = roxmltree::Document::parse(&svg).unwrap();
    let count = |tag: &str| doc.descendants().filter(|n| n.has_tag_name(tag)).count();
    assert_eq!(count("polyline"), 3);
    assert_eq!(count("circle"), 3 * EPOCHS);

    let collected = collect_reports(dir.path()).unwrap();
    let labels: Vec<&str> = collected.iter().map(|(l, _)| l.as_str()).collect();
    assert_eq!(labels, ["dp_sigma0.1", "fft", "lora_r4_a4"]);
}

#[test]
fn checkpoints_reproduce_reported_losses() {
    let dir = tempfile::tempdir().unwrap();
    let plan = tiny_plan(dir.path());
    let outcome = run_experiment(&plan).unwrap();
    let base = pretrain_base(&plan).unwrap();
    let data = puelab::lab::prepare_data(&plan).unwrap();
    for run in &outcome.runs {
        let (cfg, loaded) = load_epoch(&run.dir, 2, &base).unwrap();
        assert_eq!(cfg, run.config);
        let tally = evaluate_split(&loaded.model(), &data.train).unwrap();
        assert_eq!(tally.sensitive(), Some(run.reports[1].train.sensitive.unwrap()));
    }
}

#[test]
fn interrupted_run_resumes_to_identical_output() {
    let straight = tempfile::tempdir().unwrap();
    run_experiment(&tiny_plan(straight.path())).unwrap();

    let resumed = tempfile::tempdir().unwrap();
    let plan = tiny_plan(resumed.path());
    // a directory in place of the epoch-2 temp file makes the fft run die
    // after training epoch 2, before its report is written
    let blocker = plan.run_dir("fft").join("epoch_2.tmp");
    std::fs::create_dir_all(&blocker).unwrap();
    let err = run_experiment(&plan).unwrap_err();
    assert_eq!(err.exit_code(), 4, "{err}");
    let partial = String::from_utf8(read(&plan.run_dir("fft").join("metrics.csv"))).unwrap();
    assert_eq!(partial.lines().count(), 2);
    std::fs::remove_dir(&blocker).unwrap();
    run_experiment(&plan).unwrap();

    for label in ["fft", "dp_sigma0.1", "lora_r4_a4"] {
        let a = straight.path().join("runs").join(label);
        let b = resumed.path().join("runs").join(label);
        assert_eq!(read(&a.join("metrics.csv")), read(&b.join("metrics.csv")), "{label}");
        assert_eq!(
            read(&a.join(format!("epoch_{EPOCHS}.ckpt"))),
            read(&b.join(format!("epoch_{EPOCHS}.ckpt"))),
            "{label}"
        );
    }
    assert_eq!(read(&straight.path().join("tradeoff.csv")), read(&resumed.path().join("tradeoff.csv")));
}

#[test]
fn rows_past_the_checkpoint_are_dropped() {
    let dir = tempfile::tempdir().unwrap();
    let plan = tiny_plan(dir.path());
    run_experiment(&plan).unwrap();
    let metrics = plan.run_dir("lora_r4_a4").join("metrics.csv");
    let original = read(&metrics);
    let last = String::from_utf8(original.clone()).unwrap().lines().last().unwrap().to_string();
    let mut extended = original.clone();
    extended.extend_from_slice(format!("{last}\n").as_bytes());
    std::fs::write(&metrics, extended).unwrap();
    run_experiment(&plan).unwrap();
    assert_eq!(read(&metrics), original);

    // fewer rows than the checkpoint claims is corruption
    let short: Vec<&str> = std::str::from_utf8(&original).unwrap().lines().take(2).collect();
    std::fs::write(&metrics, short.join("\n") + "\n").unwrap();
    let err = run_experiment(&plan).unwrap_err();
    assert!(matches!(err, LabError::CorruptCheckpoint { .. }), "{err}");
}

#[test]
fn corrupt_checkpoints_abort() {
    let dir = tempfile::tempdir().unwrap();
    let plan = tiny_plan(dir.path());
    run_experiment(&plan).unwrap();

    let resume = plan.run_dir("fft").join("resume.ckpt");
    let mut bytes = read(&resume);
    bytes.truncate(bytes.len() / 2);
    std::fs::write(&resume, &bytes).unwrap();
    let err = run_experiment(&plan).unwrap_err();
    assert!(matches!(err, LabError::CorruptCheckpoint { .. }), "{err}");
    assert_eq!(err.exit_code(), 4);

    let base = plan.base_dir().join("model.ckpt");
    std::fs::write(&base, b"not a checkpoint").unwrap();
    let err = pretrain_base(&plan).unwrap_err();
    assert_eq!(err.exit_code(), 4, "{err}");
}

#[test]
fn foreign_base_model_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let plan = tiny_plan(dir.path());
    pretrain_base(&plan).unwrap();
    let other = ExperimentPlan { seed: 6, ..plan };
    assert!(matches!(pretrain_base(&other), Err(LabError::Config(_))));
}
