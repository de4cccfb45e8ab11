//! Sensitivity-aware losses: privacy on the sensitive training tokens,
//! utility on the non-sensitive test tokens, and the undifferentiated
//! all-token losses for comparison.

use std::io::Write;
use std::path::Path;

use crate::error::{LabError, Result};
use crate::finetune::{Method, TrainConfig};
use crate::model::{sequence_losses, Transformer};
use crate::tokenize::TokenBatch;

/// Relative tolerance of the all-token decomposition check.
pub const DECOMPOSITION_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenClass {
    Sensitive,
    Nonsensitive,
}

/// A mean over a selection that may be empty. `mean` is `None` rather than NaN
/// when nothing was selected.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskedMean {
    pub mean: Option<f64>,
    pub count: usize,
}

pub fn masked_mean_loss(losses: &[f64], mask: &[bool], select: TokenClass) -> Result<MaskedMean> {
    if losses.len() != mask.len() {
        return Err(LabError::Config(format!(
            "{} losses but {} mask entries",
            losses.len(),
            mask.len()
        )));
    }
    let want = select == TokenClass::Sensitive;
    let (sum, count) = losses
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m == want)
        .fold((0.0, 0), |(s, n), (l, _)| (s + l, n + 1));
    Ok(MaskedMean {
        mean: (count > 0).then(|| sum / count as f64),
        count,
    })
}

/// Loss sums and counts of one split, per token class.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossTally {
    pub sum_sensitive: f64,
    pub n_sensitive: usize,
    pub sum_nonsensitive: f64,
    pub n_nonsensitive: usize,
    /// Accumulated separately over every position, for the decomposition check.
    pub sum_all: f64,
}

impl LossTally {
    fn add(&mut self, other: &LossTally) {
        self.sum_sensitive += other.sum_sensitive;
        self.n_sensitive += other.n_sensitive;
        self.sum_nonsensitive += other.sum_nonsensitive;
        self.n_nonsensitive += other.n_nonsensitive;
        self.sum_all += other.sum_all;
    }

    pub fn n_all(&self) -> usize {
        self.n_sensitive + self.n_nonsensitive
    }

    pub fn sensitive(&self) -> Option<f64> {
        (self.n_sensitive > 0).then(|| self.sum_sensitive / self.n_sensitive as f64)
    }

    pub fn nonsensitive(&self) -> Option<f64> {
        (self.n_nonsensitive > 0).then(|| self.sum_nonsensitive / self.n_nonsensitive as f64)
    }

    pub fn all(&self) -> Option<f64> {
        (self.n_all() > 0).then(|| self.sum_all / self.n_all() as f64)
    }
}

fn tally_one(model: &Transformer<'_>, seq: &TokenBatch) -> Result<LossTally> {
    let losses = sequence_losses(model, &seq.token_ids)?;
    let mut t = LossTally::default();
    for (&l, &sensitive) in losses.iter().zip(seq.target_mask()) {
        if sensitive {
            t.sum_sensitive += l;
            t.n_sensitive += 1;
        } else {
            t.sum_nonsensitive += l;
            t.n_nonsensitive += 1;
        }
        t.sum_all += l;
    }
    Ok(t)
}

/// Worker count for evaluation: `PUELAB_THREADS` if set, else the number of cores.
pub fn eval_threads() -> usize {
    std::env::var("PUELAB_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Teacher-forced loss tally over a split. Documents may be scored in
/// parallel; their tallies are summed in document order either way.
pub fn evaluate_split(model: &Transformer<'_>, split: &[TokenBatch]) -> Result<LossTally> {
    let threads = eval_threads().min(split.len()).max(1);
    let per_doc: Vec<LossTally> = if threads == 1 {
        split.iter().map(|s| tally_one(model, s)).collect::<Result<_>>()?
    } else {
        let chunk = split.len().div_ceil(threads);
        std::thread::scope(|scope| {
            let handles: Vec<_> = split
                .chunks(chunk)
                .map(|part| scope.spawn(move || part.iter().map(|s| tally_one(model, s)).collect::<Result<Vec<_>>>()))
                .collect();
            let mut out = Vec::with_capacity(split.len());
            for h in handles {
                out.extend(h.join().expect("evaluation worker panicked")?);
            }
            Ok::<_, LabError>(out)
        })?
    };
    let mut total = LossTally::default();
    for t in &per_doc {
        total.add(t);
    }
    Ok(total)
}

/// Mean loss on the sensitive tokens of the training split. Higher is more private.
pub fn privacy_score(model: &Transformer<'_>, train: &[TokenBatch]) -> Result<f64> {
    evaluate_split(model, train)?.sensitive().ok_or(LabError::NoTokens("sensitive"))
}

/// Mean loss on the non-sensitive tokens of the test split. Lower is more useful.
pub fn utility_score(model: &Transformer<'_>, test: &[TokenBatch]) -> Result<f64> {
    evaluate_split(model, test)?.nonsensitive().ok_or(LabError::NoTokens("non-sensitive"))
}

/// Unmasked mean losses of the train and test splits.
pub fn legacy_scores(model: &Transformer<'_>, train: &[TokenBatch], test: &[TokenBatch]) -> Result<(f64, f64)> {
    let all = |split| evaluate_split(model, split)?.all().ok_or(LabError::NoTokens("target"));
    Ok((all(train)?, all(test)?))
}

/// Losses of one split as reported.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SplitLosses {
    pub sensitive: Option<f64>,
    pub nonsensitive: Option<f64>,
    pub all: f64,
    pub n_sensitive: usize,
    pub n_nonsensitive: usize,
}

impl SplitLosses {
    /// Checks `all == (n_s L_s + n_n L_n) / (n_s + n_n)` within [`DECOMPOSITION_TOL`].
    pub fn from_tally(t: &LossTally) -> Result<Self> {
        let all = t.all().ok_or(LabError::NoTokens("target"))?;
        let weighted = (t.sensitive().unwrap_or(0.0) * t.n_sensitive as f64
            + t.nonsensitive().unwrap_or(0.0) * t.n_nonsensitive as f64)
            / t.n_all() as f64;
        check_decomposition(all, weighted)?;
        Ok(SplitLosses {
            sensitive: t.sensitive(),
            nonsensitive: t.nonsensitive(),
            all,
            n_sensitive: t.n_sensitive,
            n_nonsensitive: t.n_nonsensitive,
        })
    }

    /// Recomputes the count-weighted mean of the two masked losses.
    pub fn weighted_mean(&self) -> f64 {
        let n = (self.n_sensitive + self.n_nonsensitive) as f64;
        (self.sensitive.unwrap_or(0.0) * self.n_sensitive as f64
            + self.nonsensitive.unwrap_or(0.0) * self.n_nonsensitive as f64)
            / n
    }
}

fn check_decomposition(all: f64, weighted: f64) -> Result<()> {
    if (all - weighted).abs() > DECOMPOSITION_TOL * all.abs().max(weighted.abs()) {
        return Err(LabError::Inconsistent { all, weighted });
    }
    Ok(())
}

/// Run-level fields of a report row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunTag {
    pub method: Method,
    pub sigma: Option<f64>,
    pub rank: Option<usize>,
    pub alpha: Option<f64>,
    /// The configured base learning rate.
    pub lr: f64,
}

impl RunTag {
    pub fn from_config(cfg: &TrainConfig) -> Self {
        let lora = cfg.method == Method::Lora;
        RunTag {
            method: cfg.method,
            sigma: (cfg.method == Method::Dp).then_some(cfg.dp.noise_scale),
            rank: lora.then_some(cfg.lora.rank),
            alpha: lora.then_some(cfg.lora.alpha),
            lr: cfg.learning_rate,
        }
    }

    /// Same text as [`TrainConfig::label`] of the originating config.
    pub fn label(&self) -> String {
        match self.method {
            Method::Fft => "fft".into(),
            Method::Dp => format!("dp_sigma{}", self.sigma.unwrap_or(0.0)),
            Method::Lora => format!("lora_r{}_a{}", self.rank.unwrap_or(0), self.alpha.unwrap_or(0.0)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochReport {
    pub epoch: usize,
    pub tag: RunTag,
    pub train: SplitLosses,
    pub test: SplitLosses,
    pub flops_cumulative: f64,
    pub steps_cumulative: u64,
    /// Not written to the CSV.
    pub final_lr: f64,
}

pub const CSV_HEADER: [&str; 18] = [
    "epoch",
    "method",
    "sigma",
    "rank",
    "alpha",
    "lr",
    "loss_train_sensitive",
    "loss_train_nonsensitive",
    "loss_train_all",
    "loss_test_sensitive",
    "loss_test_nonsensitive",
    "loss_test_all",
    "n_train_sensitive",
    "n_train_nonsensitive",
    "n_test_sensitive",
    "n_test_nonsensitive",
    "flops_cumulative",
    "steps_cumulative",
];

/// Scores both splits and assembles the row for `epoch`.
pub fn epoch_report(
    model: &Transformer<'_>,
    train: &[TokenBatch],
    test: &[TokenBatch],
    tag: RunTag,
    epoch: usize,
    flops_cumulative: f64,
    steps_cumulative: u64,
    final_lr: f64,
) -> Result<EpochReport> {
    if train.is_empty() || test.is_empty() {
        return Err(LabError::Config("both splits must be non-empty".into()));
    }
    Ok(EpochReport {
        epoch,
        tag,
        train: SplitLosses::from_tally(&evaluate_split(model, train)?)?,
        test: SplitLosses::from_tally(&evaluate_split(model, test)?)?,
        flops_cumulative,
        steps_cumulative,
        final_lr,
    })
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

fn parse_opt<T: std::str::FromStr>(field: &str, name: &str) -> Result<Option<T>> {
    if field.is_empty() {
        return Ok(None);
    }
    field
        .parse()
        .map(Some)
        .map_err(|_| LabError::Config(format!("bad value `{field}` in column {name}")))
}

fn parse<T: std::str::FromStr>(field: &str, name: &str) -> Result<T> {
    parse_opt(field, name)?.ok_or_else(|| LabError::Config(format!("empty column {name}")))
}

impl EpochReport {
    /// One CSV line (no newline). Floats use the shortest exact decimal form,
    /// so parsing the line back gives bit-identical values; absent losses are empty.
    pub fn csv_row(&self) -> String {
        [
            self.epoch.to_string(),
            self.tag.method.to_string(),
            opt(self.tag.sigma),
            opt(self.tag.rank),
            opt(self.tag.alpha),
            self.tag.lr.to_string(),
            opt(self.train.sensitive),
            opt(self.train.nonsensitive),
            self.train.all.to_string(),
            opt(self.test.sensitive),
            opt(self.test.nonsensitive),
            self.test.all.to_string(),
            self.train.n_sensitive.to_string(),
            self.train.n_nonsensitive.to_string(),
            self.test.n_sensitive.to_string(),
            self.test.n_nonsensitive.to_string(),
            self.flops_cumulative.to_string(),
            self.steps_cumulative.to_string(),
        ]
        .join(",")
    }

    /// Inverse of [`EpochReport::csv_row`]; `final_lr` is not stored and comes back as 0.
    pub fn parse_csv_row(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim_end_matches(['\r', '\n']).split(',').collect();
        if f.len() != CSV_HEADER.len() {
            return Err(LabError::Config(format!(
                "metrics row has {} fields, expected {}",
                f.len(),
                CSV_HEADER.len()
            )));
        }
        let h = CSV_HEADER;
        let split = |o: usize, n: usize| -> Result<SplitLosses> {
            Ok(SplitLosses {
                sensitive: parse_opt(f[o], h[o])?,
                nonsensitive: parse_opt(f[o + 1], h[o + 1])?,
                all: parse(f[o + 2], h[o + 2])?,
                n_sensitive: parse(f[n], h[n])?,
                n_nonsensitive: parse(f[n + 1], h[n + 1])?,
            })
        };
        Ok(EpochReport {
            epoch: parse(f[0], h[0])?,
            tag: RunTag {
                method: f[1].parse()?,
                sigma: parse_opt(f[2], h[2])?,
                rank: parse_opt(f[3], h[3])?,
                alpha: parse_opt(f[4], h[4])?,
                lr: parse(f[5], h[5])?,
            },
            train: split(6, 12)?,
            test: split(9, 14)?,
            flops_cumulative: parse(f[16], h[16])?,
            steps_cumulative: parse(f[17], h[17])?,
            final_lr: 0.0,
        })
    }
}

pub fn write_metrics_csv(path: &Path, reports: &[EpochReport]) -> Result<()> {
    let mut out = CSV_HEADER.join(",");
    out.push('\n');
    for r in reports {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| LabError::io(path, e))
}

pub fn append_metrics_row(path: &Path, report: &EpochReport) -> Result<()> {
    let mut file = std::fs::OpenOptions::new()
        .append(true)
        .open(path)
        .map_err(|e| LabError::io(path, e))?;
    writeln!(file, "{}", report.csv_row()).map_err(|e| LabError::io(path, e))
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<EpochReport>> {
    let text = std::fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(CSV_HEADER.join(",").as_str()) {
        return Err(LabError::Config(format!("{}: unexpected metrics header", path.display())));
    }
    lines.filter(|l| !l.is_empty()).map(EpochReport::parse_csv_row).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::testutil::{perturbed_state, random_batch, small_config};
    use crate::model::ModelState;

    #[test]
    fn masked_means() {
        let losses = [1.0, 2.0, 3.0, 4.0];
        let mask = [true, false, true, false];
        let s = masked_mean_loss(&losses, &mask, TokenClass::Sensitive).unwrap();
        assert_eq!((s.mean, s.count), (Some(2.0), 2));
        let n = masked_mean_loss(&losses, &mask, TokenClass::Nonsensitive).unwrap();
        assert_eq!((n.mean, n.count), (Some(3.0), 2));
        let none = masked_mean_loss(&losses, &[false; 4], TokenClass::Sensitive).unwrap();
        assert_eq!((none.mean, none.count), (None, 0));
        assert!(masked_mean_loss(&losses, &mask[..3], TokenClass::Sensitive).is_err());
    }

    #[test]
    fn decomposition_by_hand() {
        let t = LossTally {
            sum_sensitive: 4.0,
            n_sensitive: 2,
            sum_nonsensitive: 6.0,
            n_nonsensitive: 2,
            sum_all: 10.0,
        };
        let s = SplitLosses::from_tally(&t).unwrap();
        assert_eq!(s.all, 2.5);
        assert!(s.sensitive.unwrap() <= s.all && s.all <= s.nonsensitive.unwrap());
        let broken = LossTally { sum_all: 10.1, ..t };
        assert!(matches!(SplitLosses::from_tally(&broken), Err(LabError::Inconsistent { .. })));
    }

    #[test]
    fn untrained_model_is_near_uniform() {
        let state = ModelState::init(small_config(), 0).unwrap();
        let model = Transformer::new(&state);
        let data = random_batch(1, 6, 8..16);
        let (train, test) = legacy_scores(&model, &data, &data).unwrap();
        assert_eq!(train, test);
        assert!((train - 257f64.ln()).abs() < 0.05, "{train}");
    }

    #[test]
    fn duplication_does_not_move_scores() {
        let state = perturbed_state(small_config(), 3);
        let model = Transformer::new(&state);
        let data = random_batch(2, 5, 8..16);
        let doubled: Vec<_> = data.iter().chain(&data).cloned().collect();
        let a = privacy_score(&model, &data).unwrap();
        let b = privacy_score(&model, &doubled).unwrap();
        assert!((a - b).abs() <= 1e-12 * a);
    }

    #[test]
    fn utility_ignores_sensitive_positions() {
        let state = perturbed_state(small_config(), 3);
        let model = Transformer::new(&state);
        let data = random_batch(3, 5, 8..14);
        // appended sensitive tokens sit after every scored position
        let mut extended = data.clone();
        for seq in &mut extended {
            seq.token_ids.extend([48, 49]);
            seq.sensitivity_mask.extend([true, true]);
        }
        assert_eq!(utility_score(&model, &data).unwrap(), utility_score(&model, &extended).unwrap());
        let no_sensitive: Vec<_> = data
            .iter()
            .cloned()
            .map(|mut s| {
                s.sensitivity_mask.fill(false);
                s
            })
            .collect();
        assert!(matches!(privacy_score(&model, &no_sensitive), Err(LabError::NoTokens(_))));
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let state = perturbed_state(small_config(), 5);
        let model = Transformer::new(&state);
        let data = random_batch(4, 6, 6..16);
        let mut cfg = TrainConfig::dp(0.1);
        cfg.learning_rate = 0.1 + 0.2;
        let report = epoch_report(&model, &data[..4], &data[4..], RunTag::from_config(&cfg), 3, 1.234e12 / 7.0, 21, 0.0).unwrap();
        let back = EpochReport::parse_csv_row(&report.csv_row()).unwrap();
        assert_eq!(back, report);
        assert_eq!(report.csv_row().split(',').nth(3), Some(""));
        let counts = data[..4].iter().map(|s| s.n_targets()).sum::<usize>();
        assert_eq!(report.train.n_sensitive + report.train.n_nonsensitive, counts);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.csv");
        write_metrics_csv(&path, &[report]).unwrap();
        append_metrics_row(&path, &EpochReport { epoch: 4, ..report }).unwrap();
        let rows = read_metrics_csv(&path).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[1].epoch, 4);
        let header = std::fs::read_to_string(&path).unwrap().lines().next().unwrap().to_string();
        assert!(header.starts_with("epoch,method,sigma,rank,alpha,lr,loss_train_sensitive"));
    }

    #[test]
    fn thread_count_does_not_change_tallies() {
        let state = perturbed_state(small_config(), 5);
        let model = Transformer::new(&state);
        let data = random_batch(5, 13, 4..16);
        let serial: Vec<LossTally> = data.iter().map(|s| tally_one(&model, s).unwrap()).collect();
        let mut expected = LossTally::default();
        for t in &serial {
            expected.add(t);
        }
        assert_eq!(evaluate_split(&model, &data).unwrap(), expected);
    }

    #[test]
    fn tag_label_matches_config_label() {
        for cfg in [TrainConfig::fft(), TrainConfig::dp(0.1), TrainConfig::dp(1.5), TrainConfig::lora(4, 8.0), TrainConfig::lora(16, 16.0)] {
            assert_eq!(RunTag::from_config(&cfg).label(), cfg.label());
        }
    }
}
