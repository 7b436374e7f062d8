//! End-to-end experiment runs and the metrics summarizer.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::config::{DatasetSource, ExperimentConfig};
use crate::data::{dirichlet_partition, gen_toy_with_stream, load_csv_dataset, Dataset, PartitionAudit};
use crate::error::{Error, Result};
use crate::federation::{RoundRecord, Simulation};
use crate::rng::{stream_rng, Stream};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const TIMING_FILE: &str = "timing.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.fgkd";
pub const AUDIT_FILE: &str = "partition_audit.json";
pub const CONFIG_DUMP_FILE: &str = "resolved_config.toml";
pub const CURVE_FILE: &str = "accuracy.csv";

/// Training and test data for a run.
pub fn load_data(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    let seed = cfg.federation.seed;
    match &cfg.dataset {
        DatasetSource::Toy {
            train_size,
            test_size,
        } => Ok((
            gen_toy_with_stream(*train_size, seed, Stream::ToyTrain)?,
            gen_toy_with_stream(*test_size, seed, Stream::ToyTest)?,
        )),
        DatasetSource::Csv {
            path,
            num_classes,
            test_path: Some(test_path),
            ..
        } => Ok((
            load_csv_dataset(path, *num_classes)?,
            load_csv_dataset(test_path, *num_classes)?,
        )),
        DatasetSource::Csv {
            path,
            num_classes,
            test_path: None,
            test_fraction,
        } => {
            let all = load_csv_dataset(path, *num_classes)?;
            if all.len() < 2 {
                return Err(Error::Dataset("need at least 2 rows to hold out a test set".into()));
            }
            let mut order: Vec<usize> = (0..all.len()).collect();
            order.shuffle(&mut stream_rng(seed, Stream::TestHoldout, &[]));
            let n_test = ((all.len() as f64 * test_fraction).round() as usize).clamp(1, all.len() - 1);
            let (test_idx, train_idx) = order.split_at(n_test);
            let mut train_idx = train_idx.to_vec();
            let mut test_idx = test_idx.to_vec();
            train_idx.sort_unstable();
            test_idx.sort_unstable();
            Ok((all.select(&train_idx), all.select(&test_idx)))
        }
    }
}

/// Partitions the data and builds the simulation, without touching disk.
pub fn build_simulation(cfg: &ExperimentConfig) -> Result<(Simulation, PartitionAudit)> {
    let (train, test) = load_data(cfg)?;
    if train.feature_dim() != cfg.model.input_width() {
        return Err(Error::config(
            "model.layer_widths",
            format!(
                "input width {} but the dataset has {} features",
                cfg.model.input_width(),
                train.feature_dim()
            ),
        ));
    }
    let shards = dirichlet_partition(&train, &cfg.partition)?;
    let audit = PartitionAudit::new(&train, &cfg.partition, &shards);
    let sim = Simulation::new(
        cfg.federation.clone(),
        cfg.model.clone(),
        shards,
        test,
        cfg.diagnostics,
    )?;
    Ok((sim, audit))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub strategy: Option<String>,
    pub rounds: usize,
    pub best_accuracy: f64,
    pub best_round: usize,
    pub final_accuracy: f64,
    pub final_test_loss: f64,
}

impl RunSummary {
    /// Best is the maximum over all rounds (earliest on ties); final is the
    /// last round.
    pub fn from_records(records: &[RoundRecord], strategy: Option<String>) -> Option<Self> {
        let last = records.last()?;
        let best = records
            .iter()
            .fold(&records[0], |b, r| if r.test_accuracy > b.test_accuracy { r } else { b });
        Some(RunSummary {
            strategy,
            rounds: records.len(),
            best_accuracy: best.test_accuracy,
            best_round: best.round,
            final_accuracy: last.test_accuracy,
            final_test_loss: last.test_loss,
        })
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Serialize)]
struct Timing {
    round: usize,
    wall_time_s: f64,
}

/// Runs every configured round and writes the run directory:
/// metrics, timings, plot-ready accuracy CSV, final checkpoint, partition
/// audit, resolved config and summary. Metrics for completed rounds are on
/// disk even when a later round fails.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunSummary> {
    let out = &cfg.output_dir;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    fs::write(out.join(CONFIG_DUMP_FILE), cfg.to_toml()?)
        .map_err(|e| Error::io(out.join(CONFIG_DUMP_FILE), e))?;

    let (mut sim, audit) = build_simulation(cfg)?;
    write_json(&out.join(AUDIT_FILE), &audit)?;

    let metrics_path = out.join(METRICS_FILE);
    let timing_path = out.join(TIMING_FILE);
    let curve_path = out.join(CURVE_FILE);
    let mut metrics = create(&metrics_path)?;
    let mut timing = create(&timing_path)?;
    let mut curve = create(&curve_path)?;
    let strategy = cfg.federation.strategy.name();
    writeln!(curve, "round,strategy,test_accuracy").map_err(|e| Error::io(&curve_path, e))?;

    let mut records = Vec::with_capacity(cfg.federation.rounds);
    let outcome = sim.run(|record| {
        let line = serde_json::to_string(record)?;
        writeln!(metrics, "{line}")
            .and_then(|_| metrics.flush())
            .map_err(|e| Error::io(&metrics_path, e))?;
        let t = serde_json::to_string(&Timing {
            round: record.round,
            wall_time_s: record.wall_time_s,
        })?;
        writeln!(timing, "{t}").map_err(|e| Error::io(&timing_path, e))?;
        writeln!(curve, "{},{strategy},{}", record.round, record.test_accuracy)
            .map_err(|e| Error::io(&curve_path, e))?;
        records.push(record.clone());
        Ok(())
    });
    timing.flush().map_err(|e| Error::io(&timing_path, e))?;
    curve.flush().map_err(|e| Error::io(&curve_path, e))?;
    outcome?;

    checkpoint::save(&out.join(CHECKPOINT_FILE), sim.spec(), sim.global())?;
    let summary = RunSummary::from_records(&records, Some(strategy.to_string())).unwrap_or(RunSummary {
        strategy: Some(strategy.to_string()),
        rounds: 0,
        best_accuracy: 0.0,
        best_round: 0,
        final_accuracy: 0.0,
        final_test_loss: f64::NAN,
    });
    write_json(&out.join(SUMMARY_FILE), &summary)?;
    Ok(summary)
}

/// Parses a metrics stream, checking that rounds strictly increase and
/// accuracies lie in `[0, 1]`.
pub fn read_metrics(path: &Path) -> Result<Vec<RoundRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records: Vec<RoundRecord> = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let record: RoundRecord = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        if let Some(prev) = records.last() {
            if record.round <= prev.round {
                return Err(parse_err(format!("round {} does not follow {}", record.round, prev.round)));
            }
        }
        if !(0.0..=1.0).contains(&record.test_accuracy) {
            return Err(parse_err(format!("accuracy {} outside [0, 1]", record.test_accuracy)));
        }
        records.push(record);
    }
    Ok(records)
}

fn strategy_of(run_dir: &Path) -> Option<String> {
    let text = fs::read_to_string(run_dir.join(CONFIG_DUMP_FILE)).ok()?;
    let cfg = crate::config::parse_config_str(&text, run_dir, &Default::default()).ok()?;
    Some(cfg.federation.strategy.name().to_string())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedSummary {
    pub run: String,
    #[serde(flatten)]
    pub summary: RunSummary,
}

/// Summarizes every run directory under `dir` (including `dir` itself).
/// Writes `summaries.json` and a long-format `curves.csv`
/// (`run,strategy,round,test_accuracy`) into `dir`.
pub fn summarize(dir: &Path) -> Result<Vec<NamedSummary>> {
    let mut runs: Vec<PathBuf> = walkdir::WalkDir::new(dir)
        .max_depth(3)
        .sort_by_file_name()
        .into_iter()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_type().is_file() && e.file_name() == METRICS_FILE)
        .filter_map(|e| e.path().parent().map(Path::to_path_buf))
        .collect();
    runs.sort();
    if runs.is_empty() {
        return Err(Error::Dataset(format!("no {METRICS_FILE} under {}", dir.display())));
    }
    let curves_path = dir.join("curves.csv");
    let mut curves = create(&curves_path)?;
    writeln!(curves, "run,strategy,round,test_accuracy").map_err(|e| Error::io(&curves_path, e))?;
    let mut out = Vec::new();
    for run_dir in runs {
        let records = read_metrics(&run_dir.join(METRICS_FILE))?;
        let name = run_dir
            .strip_prefix(dir)
            .ok()
            .map(|p| p.display().to_string())
            .filter(|s| !s.is_empty())
            .unwrap_or_else(|| ".".to_string());
        let strategy = strategy_of(&run_dir);
        for r in &records {
            writeln!(
                curves,
                "{name},{},{},{}",
                strategy.as_deref().unwrap_or(""),
                r.round,
                r.test_accuracy
            )
            .map_err(|e| Error::io(&curves_path, e))?;
        }
        if let Some(summary) = RunSummary::from_records(&records, strategy) {
            out.push(NamedSummary { run: name, summary });
        }
    }
    curves.flush().map_err(|e| Error::io(&curves_path, e))?;
    write_json(&dir.join("summaries.json"), &out)?;
    Ok(out)
}
