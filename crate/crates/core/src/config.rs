//! Experiment configuration: a TOML file with every unset field filled from
//! the defaults, then validated as a whole.
//!
//! ```toml
//! strategy = "fedgkd"          # fedavg | fedprox | fedgkd | fedgkd_vote
//! dataset = "toy"              # or { kind = "csv", path = "train.csv", num_classes = 3 }
//! seed = 1
//!
//! [federation]
//! num_clients = 20
//! participation = 0.2
//!
//! [distill]
//! gamma = 0.2
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::PartitionSpec;
use crate::diagnostics::InexactnessProbe;
use crate::error::{Error, Result};
use crate::federation::FedConfig;
use crate::losses::{DistillConfig, ProxConfig, RegularizerKind, Strategy};
use crate::nn::{Activation, MlpSpec, SgdHyper};

pub const DEFAULT_TOY_WIDTHS: [usize; 4] = [2, 32, 32, 4];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DatasetSource {
    Toy {
        train_size: usize,
        test_size: usize,
    },
    Csv {
        path: PathBuf,
        num_classes: usize,
        /// Separate test file; without one, `test_fraction` of the rows are
        /// held out.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        test_path: Option<PathBuf>,
        test_fraction: f64,
    },
}

impl DatasetSource {
    pub fn num_classes(&self) -> usize {
        match self {
            DatasetSource::Toy { .. } => 4,
            DatasetSource::Csv { num_classes, .. } => *num_classes,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub output_dir: PathBuf,
    pub dataset: DatasetSource,
    pub federation: FedConfig,
    pub partition: PartitionSpec,
    pub model: MlpSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostics: Option<InexactnessProbe>,
}

/// Command-line overrides applied before validation.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub diagnostics: bool,
    pub workers: Option<usize>,
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    strategy: Option<Strategy>,
    dataset: Option<toml::Value>,
    seed: Option<u64>,
    workers: Option<usize>,
    output_dir: Option<PathBuf>,
    #[serde(default)]
    federation: FederationFile,
    #[serde(default)]
    distill: DistillFile,
    #[serde(default)]
    prox: ProxFile,
    #[serde(default)]
    sgd: SgdFile,
    #[serde(default)]
    partition: PartitionFile,
    model: Option<ModelFile>,
    #[serde(default)]
    diagnostics: DiagnosticsFile,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FederationFile {
    num_clients: Option<usize>,
    participation: Option<f64>,
    rounds: Option<usize>,
    local_epochs: Option<usize>,
    batch_size: Option<usize>,
    buffer_size: Option<usize>,
    vote_lambda: Option<f64>,
    vote_beta: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct DistillFile {
    gamma: Option<f64>,
    temperature: Option<f64>,
    kind: Option<RegularizerKind>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProxFile {
    mu: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct SgdFile {
    learning_rate: Option<f64>,
    momentum: Option<f64>,
    weight_decay: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct PartitionFile {
    alpha: Option<f64>,
    seed: Option<u64>,
    val_fraction: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    layer_widths: Vec<usize>,
    #[serde(default)]
    activation: Activation,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct DiagnosticsFile {
    #[serde(default)]
    enabled: bool,
    inexactness_c: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetTable {
    kind: String,
    path: Option<PathBuf>,
    num_classes: Option<usize>,
    test_path: Option<PathBuf>,
    test_fraction: Option<f64>,
    train_size: Option<usize>,
    test_size: Option<usize>,
}

fn toml_error(source: &str, e: toml::de::Error) -> Error {
    Error::config(source, e.message().to_string())
}

fn resolve_dataset(value: Option<toml::Value>, base_dir: &Path) -> Result<DatasetSource> {
    let table = match value {
        None => return Err(Error::config("dataset", "missing; use \"toy\" or a csv table")),
        Some(toml::Value::String(kind)) => DatasetTable {
            kind,
            path: None,
            num_classes: None,
            test_path: None,
            test_fraction: None,
            train_size: None,
            test_size: None,
        },
        Some(v @ toml::Value::Table(_)) => {
            DatasetTable::deserialize(v).map_err(|e| toml_error("dataset", e))?
        }
        Some(other) => {
            return Err(Error::config(
                "dataset",
                format!("expected a string or table, found {}", other.type_str()),
            ))
        }
    };
    let rebase = |p: PathBuf| if p.is_absolute() { p } else { base_dir.join(p) };
    match table.kind.as_str() {
        "toy" => {
            if table.path.is_some() || table.num_classes.is_some() || table.test_path.is_some() {
                return Err(Error::config("dataset", "toy dataset takes only train_size and test_size"));
            }
            Ok(DatasetSource::Toy {
                train_size: table.train_size.unwrap_or(2000),
                test_size: table.test_size.unwrap_or(1000),
            })
        }
        "csv" => {
            if table.train_size.is_some() || table.test_size.is_some() {
                return Err(Error::config("dataset", "csv dataset does not take train_size/test_size"));
            }
            let path = table
                .path
                .ok_or_else(|| Error::config("dataset.path", "required for csv datasets"))?;
            let num_classes = table
                .num_classes
                .ok_or_else(|| Error::config("dataset.num_classes", "required for csv datasets"))?;
            let test_fraction = table.test_fraction.unwrap_or(0.2);
            if !(test_fraction > 0.0 && test_fraction < 1.0) {
                return Err(Error::config("dataset.test_fraction", "must lie in (0, 1)"));
            }
            Ok(DatasetSource::Csv {
                path: rebase(path),
                num_classes,
                test_path: table.test_path.map(rebase),
                test_fraction,
            })
        }
        other => Err(Error::config("dataset.kind", format!("unknown dataset `{other}`"))),
    }
}

/// Parses and validates a configuration held in memory. Relative paths are
/// resolved against `base_dir`.
pub fn parse_config_str(text: &str, base_dir: &Path, overrides: &Overrides) -> Result<ExperimentConfig> {
    let file: FileConfig = toml::from_str(text).map_err(|e| toml_error("config", e))?;
    let strategy = file
        .strategy
        .ok_or_else(|| Error::config("strategy", "missing"))?;
    let dataset = resolve_dataset(file.dataset, base_dir)?;
    let seed = overrides.seed.or(file.seed).unwrap_or(0);

    let f = file.federation;
    let defaults = FedConfig::default();
    let buffer_size = f.buffer_size.unwrap_or(defaults.buffer_size);
    if buffer_size == 0 {
        return Err(Error::config("federation.buffer_size", "must be at least 1"));
    }
    let federation = FedConfig {
        strategy,
        num_clients: f.num_clients.unwrap_or(defaults.num_clients),
        participation: f.participation.unwrap_or(defaults.participation),
        rounds: f.rounds.unwrap_or(defaults.rounds),
        local_epochs: f.local_epochs.unwrap_or(defaults.local_epochs),
        batch_size: f.batch_size.unwrap_or(defaults.batch_size),
        buffer_size,
        distill: DistillConfig {
            gamma: file.distill.gamma.unwrap_or(defaults.distill.gamma),
            temperature: file.distill.temperature.unwrap_or(defaults.distill.temperature),
            kind: file.distill.kind.unwrap_or_default(),
        },
        prox: ProxConfig {
            mu: file.prox.mu.unwrap_or(defaults.prox.mu),
        },
        sgd: SgdHyper {
            learning_rate: file.sgd.learning_rate.unwrap_or(defaults.sgd.learning_rate),
            momentum: file.sgd.momentum.unwrap_or(defaults.sgd.momentum),
            weight_decay: file.sgd.weight_decay.unwrap_or(defaults.sgd.weight_decay),
        },
        vote_lambda: f.vote_lambda.unwrap_or(defaults.vote_lambda),
        vote_beta: f.vote_beta.unwrap_or(1.0 / buffer_size as f64),
        seed,
        workers: overrides.workers.or(file.workers).unwrap_or(1).max(1),
    };
    federation.validate()?;

    let partition = PartitionSpec {
        alpha: file.partition.alpha.unwrap_or(0.1),
        num_clients: federation.num_clients,
        seed: file.partition.seed.unwrap_or(seed),
        val_fraction: file.partition.val_fraction.unwrap_or(match strategy {
            Strategy::FedGkdVote => 0.1,
            _ => 0.0,
        }),
    };
    partition.validate()?;
    if strategy == Strategy::FedGkdVote && partition.val_fraction == 0.0 {
        return Err(Error::config(
            "partition.val_fraction",
            "fedgkd_vote needs a client validation split",
        ));
    }

    let model = match (file.model, &dataset) {
        (Some(m), _) => MlpSpec {
            layer_widths: m.layer_widths,
            activation: m.activation,
        },
        (None, DatasetSource::Toy { .. }) => MlpSpec {
            layer_widths: DEFAULT_TOY_WIDTHS.to_vec(),
            activation: Activation::Relu,
        },
        (None, DatasetSource::Csv { .. }) => {
            return Err(Error::config("model.layer_widths", "required for csv datasets"))
        }
    };
    model
        .validate()
        .map_err(|e| Error::config("model.layer_widths", e.to_string()))?;
    if model.num_classes() != dataset.num_classes() {
        return Err(Error::config(
            "model.layer_widths",
            format!(
                "output width {} does not match the dataset's {} classes",
                model.num_classes(),
                dataset.num_classes()
            ),
        ));
    }
    if let DatasetSource::Toy { train_size, test_size } = dataset {
        if model.input_width() != 2 {
            return Err(Error::config("model.layer_widths", "the toy dataset has 2 input features"));
        }
        if train_size < 4 || test_size < 4 {
            return Err(Error::config("dataset", "toy train_size and test_size must be at least 4"));
        }
        if federation.num_clients > train_size {
            return Err(Error::config("federation.num_clients", "more clients than training examples"));
        }
    }

    let diagnostics = if file.diagnostics.enabled || overrides.diagnostics {
        let coefficient = file.diagnostics.inexactness_c.unwrap_or(0.0);
        if !(coefficient >= 0.0 && coefficient.is_finite()) {
            return Err(Error::config("diagnostics.inexactness_c", "must be nonnegative"));
        }
        Some(InexactnessProbe { coefficient })
    } else {
        None
    };

    let output_dir = overrides
        .output_dir
        .clone()
        .or(file.output_dir.map(|p| if p.is_absolute() { p } else { base_dir.join(p) }))
        .unwrap_or_else(|| base_dir.join("runs").join(strategy.name()));

    Ok(ExperimentConfig {
        output_dir,
        dataset,
        federation,
        partition,
        model,
        diagnostics,
    })
}

pub fn parse_config(path: &Path, overrides: &Overrides) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    parse_config_str(&text, base, overrides)
}

// Mirrors the file layout with every default filled in.
#[derive(Serialize)]
struct Resolved<'a> {
    strategy: Strategy,
    seed: u64,
    workers: usize,
    output_dir: &'a Path,
    dataset: &'a DatasetSource,
    federation: ResolvedFederation,
    distill: &'a DistillConfig,
    prox: &'a ProxConfig,
    sgd: &'a SgdHyper,
    partition: ResolvedPartition,
    model: &'a MlpSpec,
    diagnostics: ResolvedDiagnostics,
}

#[derive(Serialize)]
struct ResolvedFederation {
    num_clients: usize,
    participation: f64,
    rounds: usize,
    local_epochs: usize,
    batch_size: usize,
    buffer_size: usize,
    vote_lambda: f64,
    vote_beta: f64,
}

#[derive(Serialize)]
struct ResolvedPartition {
    alpha: f64,
    seed: u64,
    val_fraction: f64,
}

#[derive(Serialize)]
struct ResolvedDiagnostics {
    enabled: bool,
    inexactness_c: f64,
}

impl ExperimentConfig {
    /// Fully resolved configuration in the input file format; parsing it
    /// back yields the same configuration.
    pub fn to_toml(&self) -> Result<String> {
        let f = &self.federation;
        let resolved = Resolved {
            strategy: f.strategy,
            seed: f.seed,
            workers: f.workers,
            output_dir: &self.output_dir,
            dataset: &self.dataset,
            federation: ResolvedFederation {
                num_clients: f.num_clients,
                participation: f.participation,
                rounds: f.rounds,
                local_epochs: f.local_epochs,
                batch_size: f.batch_size,
                buffer_size: f.buffer_size,
                vote_lambda: f.vote_lambda,
                vote_beta: f.vote_beta,
            },
            distill: &f.distill,
            prox: &f.prox,
            sgd: &f.sgd,
            partition: ResolvedPartition {
                alpha: self.partition.alpha,
                seed: self.partition.seed,
                val_fraction: self.partition.val_fraction,
            },
            model: &self.model,
            diagnostics: ResolvedDiagnostics {
                enabled: self.diagnostics.is_some(),
                inexactness_c: self.diagnostics.map_or(0.0, |d| d.coefficient),
            },
        };
        toml::to_string_pretty(&resolved).map_err(|e| Error::config("config", e.to_string()))
    }
}

/// Default configuration for the quadrant toy task, as if parsed from a
/// file holding only `strategy`, `dataset = "toy"` and `seed`.
pub fn toy_config(strategy: Strategy, seed: u64) -> ExperimentConfig {
    let text = format!("strategy = \"{}\"\ndataset = \"toy\"\nseed = {seed}\n", strategy.name());
    parse_config_str(&text, Path::new("."), &Overrides::default()).expect("defaults are valid")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<ExperimentConfig> {
        parse_config_str(text, Path::new("/tmp/x"), &Overrides::default())
    }

    #[test]
    fn minimal_config_gets_defaults() {
        let cfg = parse("strategy = \"fedavg\"\ndataset = \"toy\"\n").unwrap();
        let f = &cfg.federation;
        assert_eq!(f.strategy, Strategy::FedAvg);
        assert_eq!((f.buffer_size, f.local_epochs, f.batch_size, f.rounds), (5, 20, 64, 100));
        assert_eq!(f.participation, 0.2);
        assert_eq!(f.vote_lambda, 0.1);
        assert_eq!(f.vote_beta, 0.2);
        assert_eq!(f.distill.gamma, 0.2);
        assert_eq!(f.sgd, SgdHyper { learning_rate: 0.05, momentum: 0.9, weight_decay: 1e-5 });
        assert_eq!(cfg.model.layer_widths, DEFAULT_TOY_WIDTHS.to_vec());
        assert_eq!(cfg.partition.val_fraction, 0.0);
        assert!(cfg.diagnostics.is_none());
    }

    #[test]
    fn vote_defaults_and_rejections() {
        let cfg = parse("strategy = \"fedgkd_vote\"\ndataset = \"toy\"\n[federation]\nbuffer_size = 4\n").unwrap();
        assert_eq!(cfg.partition.val_fraction, 0.1);
        assert_eq!(cfg.federation.vote_beta, 0.25);
        let err = parse("strategy = \"fedgkd_vote\"\ndataset = \"toy\"\n[federation]\nbuffer_size = 0\n").unwrap_err();
        assert!(err.to_string().contains("buffer_size"), "{err}");
    }

    #[test]
    fn inconsistent_widths_rejected() {
        let err = parse("strategy = \"fedavg\"\ndataset = \"toy\"\n[model]\nlayer_widths = [2, 8, 3]\n").unwrap_err();
        assert!(err.to_string().contains("model.layer_widths"), "{err}");
    }

    #[test]
    fn unknown_keys_named() {
        let err = parse("strategy = \"fedavg\"\ndataset = \"toy\"\nbogus = 1\n").unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");
        let err = parse("strategy = \"fedavg\"\ndataset = \"toy\"\n[sgd]\nlr = 0.1\n").unwrap_err();
        assert!(err.to_string().contains("lr"), "{err}");
        let err = parse("strategy = \"fedavg\"\ndataset = { kind = \"csv\", path = \"a\", num_classes = 2, extra = 1 }\n").unwrap_err();
        assert!(err.to_string().contains("extra"), "{err}");
    }

    #[test]
    fn participation_below_one_client_rejected() {
        let err = parse("strategy = \"fedavg\"\ndataset = \"toy\"\n[federation]\nparticipation = 0.0\n").unwrap_err();
        assert!(err.to_string().contains("participation"), "{err}");
    }

    #[test]
    fn csv_source_paths_are_rebased() {
        let cfg = parse(
            "strategy = \"fedprox\"\ndataset = { kind = \"csv\", path = \"d.csv\", num_classes = 3 }\n[model]\nlayer_widths = [5, 3]\n",
        )
        .unwrap();
        match cfg.dataset {
            DatasetSource::Csv { path, num_classes, test_fraction, .. } => {
                assert_eq!(path, Path::new("/tmp/x/d.csv"));
                assert_eq!(num_classes, 3);
                assert_eq!(test_fraction, 0.2);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn overrides_and_resolved_dump_roundtrip() {
        let o = Overrides { seed: Some(42), diagnostics: true, workers: Some(3), output_dir: None };
        let cfg = parse_config_str("strategy = \"fedgkd\"\ndataset = \"toy\"\nseed = 1\n", Path::new("/tmp"), &o).unwrap();
        assert_eq!(cfg.federation.seed, 42);
        assert_eq!(cfg.partition.seed, 42);
        assert_eq!(cfg.federation.workers, 3);
        assert!(cfg.diagnostics.is_some());
        let dumped = cfg.to_toml().unwrap();
        let back = parse_config_str(&dumped, Path::new("/elsewhere"), &Overrides::default()).unwrap();
        assert_eq!(back, cfg);
    }
}
