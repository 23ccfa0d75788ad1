//! Run configuration file and command-line overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::aggregation::AggregationMethod;
use crate::dataio::GroundTruth;
use crate::error::{Error, Result};
use crate::orchestrator::FedConfig;

/// How sequences are divided into training and test parts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitKind {
    /// Normalise to `[0, 100]`; train on `[0, 60]`, test on `(80, 100]`.
    Time,
    /// Hold out whole sequences; train and test on the full horizon.
    Sequence,
}

/// How sequences are assigned to clients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PartitionKind {
    /// `given` when every record names its client, otherwise `homogeneous`.
    Auto,
    Given,
    Homogeneous,
    Heterogeneous,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub path: Option<PathBuf>,
    pub split: SplitKind,
    /// Fraction of each client's sequences held out by the `sequence` split.
    pub test_fraction: f64,
    pub partition: PartitionKind,
    /// Number of event types `K` (heterogeneous partition).
    pub num_types: Option<usize>,
    /// Event types per client `k` (heterogeneous partition).
    pub types_per_client: Option<usize>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            path: None,
            split: SplitKind::Time,
            test_fraction: 0.5,
            partition: PartitionKind::Auto,
            num_types: None,
            types_per_client: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { dir: PathBuf::from("fedpp-out") }
    }
}

/// Synthetic data settings. Each entry of `clients` is one client's latent
/// covariance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerateConfig {
    pub m: f64,
    pub horizon: f64,
    pub sequences_per_client: usize,
    pub clients: Vec<GroundTruth>,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self {
            m: 50.0,
            horizon: 1.0,
            sequences_per_client: 40,
            clients: vec![
                GroundTruth::Rbf { variance: 1.5, length_scale: 0.1 },
                GroundTruth::Rbf { variance: 2.0, length_scale: 0.125 },
            ],
        }
    }
}

impl GenerateConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.m > 0.0 && self.m.is_finite()) {
            return Err(Error::Config(format!("generate.m = {} must be positive", self.m)));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(Error::Config(format!("generate.horizon = {} must be positive", self.horizon)));
        }
        if self.sequences_per_client == 0 || self.clients.is_empty() {
            return Err(Error::Config("generate needs at least one client and one sequence".into()));
        }
        Ok(())
    }
}

/// The TOML document accepted by `--config`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfigFile {
    pub seed: Option<u64>,
    pub data: DataConfig,
    pub output: OutputConfig,
    pub train: FedConfig,
    pub generate: GenerateConfig,
}

impl Default for RunConfigFile {
    fn default() -> Self {
        Self {
            seed: None,
            data: DataConfig::default(),
            output: OutputConfig::default(),
            train: FedConfig::default(),
            generate: GenerateConfig::default(),
        }
    }
}

impl RunConfigFile {
    /// Parses a config file. Relative paths inside it are taken relative to
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::Config(format!("config file {} not found", path.display())));
        }
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        if let Some(p) = cfg.data.path.take() {
            cfg.data.path = Some(base.join(p));
        }
        cfg.output.dir = base.join(&cfg.output.dir);
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        if table.get("train").and_then(|t| t.get("seed")).is_some() {
            return Err(Error::Config("set `seed` at the top level, not under [train]".into()));
        }
        table.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))
    }

    /// Applies overrides, resolves the seed and validates everything.
    pub fn resolve(mut self, o: &Overrides) -> Result<Self> {
        let seed = o.seed.or(self.seed).unwrap_or(0);
        self.seed = Some(seed);
        self.train.seed = seed;
        if let Some(v) = o.rounds {
            self.train.rounds = v;
        }
        if let Some(v) = o.clients {
            self.train.n_clients = v;
        }
        if let Some(v) = o.participants {
            self.train.participants_per_round = v;
        }
        if let Some(v) = o.local_epochs {
            self.train.local_epochs = v;
        }
        if let Some(v) = o.straggle_period {
            self.train.straggle_period = v;
        }
        if let Some(name) = &o.aggregation {
            self.train.aggregation = AggregationMethod::from_name(name)?;
        }
        if o.no_timing {
            self.train.record_time = false;
        }
        if let Some(p) = &o.data {
            self.data.path = Some(p.clone());
        }
        if let Some(p) = &o.out {
            self.output.dir = p.clone();
        }
        self.validate()?;
        Ok(self)
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if !(self.train.step_size > 0.0) {
            return Err(Error::Config(format!("train.step_size = {} must be positive", self.train.step_size)));
        }
        let d = &self.data;
        if !(d.test_fraction > 0.0 && d.test_fraction < 1.0) {
            return Err(Error::Config(format!("data.test_fraction = {} must lie in (0, 1)", d.test_fraction)));
        }
        if d.partition == PartitionKind::Heterogeneous {
            match (d.num_types, d.types_per_client) {
                (Some(big_k), Some(k)) if k >= 1 && k < big_k => {}
                (Some(big_k), Some(k)) => {
                    return Err(Error::Config(format!(
                        "types_per_client = {k} must satisfy 1 <= k < num_types = {big_k}"
                    )))
                }
                _ => {
                    return Err(Error::Config(
                        "heterogeneous partition needs data.num_types and data.types_per_client".into(),
                    ))
                }
            }
        }
        self.generate.validate()
    }
}

/// Values given on the command line or through the environment.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub aggregation: Option<String>,
    pub rounds: Option<usize>,
    pub clients: Option<usize>,
    pub participants: Option<usize>,
    pub local_epochs: Option<usize>,
    pub straggle_period: Option<usize>,
    pub no_timing: bool,
}
