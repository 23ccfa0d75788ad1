//! The `fedpp` command line: `generate`, `train`, `eval` and `aggregate`.
//!
//! Exit status is 0 on success, 1 on runtime failure and 2 when inputs fail
//! validation. The seed comes from `--seed`, then `FEDPP_SEED`, then the
//! config file.

mod config;
mod data;
mod files;

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::Serialize;

use crate::aggregation::{aggregate, AggregationMethod};
use crate::client::test_loglik;
use crate::dataio::{load_records, write_intensity_csv, write_jsonl, GroundTruth, SequenceRecord, Simulator};
use crate::error::{Error, Result};
use crate::orchestrator::run_training_with;
use crate::seed::derive_seed;

pub use config::{DataConfig, GenerateConfig, OutputConfig, Overrides, PartitionKind, RunConfigFile, SplitKind};
pub use data::prepare;
pub use files::{MetricsWriter, ModelFile, ParamRecordFile, METRICS_HEADER, MODEL_VERSION};

const GENERATE_STREAM: u64 = 0x6765_6e65;

#[derive(Debug, Parser)]
#[command(name = "fedpp", version, about = "Federated sigmoidal Gaussian Cox process training")]
pub struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, env = "FEDPP_SEED")]
    pub seed: Option<u64>,
    /// Output directory (generate, train) or file (aggregate).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// fedavg, kl, w2 or mmd.
    #[arg(long, global = true)]
    pub aggregation: Option<String>,
    #[arg(long, global = true)]
    pub rounds: Option<usize>,
    #[arg(long, global = true)]
    pub clients: Option<usize>,
    #[arg(long, global = true)]
    pub participants: Option<usize>,
    #[arg(long, global = true)]
    pub local_epochs: Option<usize>,
    #[arg(long, global = true)]
    pub straggle_period: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate synthetic per-client sequences with known intensities.
    Generate,
    /// Run federated training.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
        /// Metrics CSV (default: <out>/metrics.csv).
        #[arg(long)]
        metrics: Option<PathBuf>,
        /// Model file (default: <out>/model.json).
        #[arg(long)]
        model: Option<PathBuf>,
        /// Write 0 for wall time so reruns give identical metrics.
        #[arg(long)]
        no_timing: bool,
    },
    /// Test log-likelihood of a trained model.
    Eval {
        #[arg(long)]
        model: PathBuf,
        /// Data file (default: the one used for training).
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Aggregate parameter records into one prior.
    Aggregate {
        /// fedavg, kl, w2 or mmd (same as --aggregation).
        #[arg(long)]
        method: Option<String>,
        #[arg(long)]
        input: PathBuf,
    },
}

impl Cli {
    fn overrides(&self) -> Overrides {
        let (data, no_timing) = match &self.command {
            Command::Train { data, no_timing, .. } => (data.clone(), *no_timing),
            _ => (None, false),
        };
        Overrides {
            seed: self.seed,
            out: self.out.clone(),
            data,
            aggregation: self.aggregation.clone(),
            rounds: self.rounds,
            clients: self.clients,
            participants: self.participants,
            local_epochs: self.local_epochs,
            straggle_period: self.straggle_period,
            no_timing,
        }
    }

    fn load_config(&self) -> Result<RunConfigFile> {
        let file = match &self.config {
            Some(p) => RunConfigFile::load(p)?,
            None => RunConfigFile::default(),
        };
        file.resolve(&self.overrides())
    }
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn run_from_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                2
            } else {
                1
            }
        }
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Generate => cmd_generate(&cli.load_config()?),
        Command::Train { metrics, model, .. } => {
            let cfg = cli.load_config()?;
            let metrics = metrics.clone().unwrap_or_else(|| cfg.output.dir.join("metrics.csv"));
            let model = model.clone().unwrap_or_else(|| cfg.output.dir.join("model.json"));
            cmd_train(&cfg, &metrics, &model)
        }
        Command::Eval { model, data } => cmd_eval(model, data.as_deref()),
        Command::Aggregate { method, input } => {
            let name = method
                .as_deref()
                .or(cli.aggregation.as_deref())
                .ok_or_else(|| Error::invalid("aggregate needs --method"))?;
            let out = cli.out.as_deref().ok_or_else(|| Error::invalid("aggregate needs --out"))?;
            cmd_aggregate(&AggregationMethod::from_name(name)?, input, out)
        }
    }
}

#[derive(Serialize)]
struct GenerateMetadata<'a> {
    seed: u64,
    m: f64,
    horizon: f64,
    sequences_per_client: usize,
    clients: &'a [GroundTruth],
    interpretation: &'static str,
    sequences: &'static str,
    truth: Vec<String>,
}

/// Writes `sequences.jsonl`, `metadata.json` and one `truth_client<c>.csv`
/// per client into the output directory.
pub fn cmd_generate(cfg: &RunConfigFile) -> Result<()> {
    let g = &cfg.generate;
    let dir = &cfg.output.dir;
    std::fs::create_dir_all(dir)?;
    let mut records = Vec::new();
    let mut truth = Vec::new();
    for (c, kernel) in g.clients.iter().enumerate() {
        let sim = Simulator::gp(g.m, kernel.clone(), g.horizon)?
            .simulate(g.sequences_per_client, derive_seed(&[cfg.seed(), GENERATE_STREAM, c as u64]))?;
        let events: usize = sim.sequences.iter().map(|s| s.len()).sum();
        println!("client {c}: {} sequences, {events} events", sim.sequences.len());
        records.extend(sim.sequences.iter().map(|s| SequenceRecord::from_sequence(s, Some(c))));
        let name = format!("truth_client{c}.csv");
        write_intensity_csv(&dir.join(&name), &sim.grid, &sim.lambda)?;
        truth.push(name);
    }
    write_jsonl(&dir.join("sequences.jsonl"), &records)?;
    let meta = GenerateMetadata {
        seed: cfg.seed(),
        m: g.m,
        horizon: g.horizon,
        sequences_per_client: g.sequences_per_client,
        clients: &g.clients,
        interpretation: "intensity m * sigmoid(f(t)); rbf kernel variance * exp(-(s - t)^2 / (2 length_scale^2)) \
                         on raw time; the settings (1.5, 10) and (2, 8) are read as variance and inverse length scale",
        sequences: "sequences.jsonl",
        truth,
    };
    let mut text = serde_json::to_string_pretty(&meta)?;
    text.push('\n');
    std::fs::write(dir.join("metadata.json"), text)?;
    println!("wrote {} sequences to {}", records.len(), dir.display());
    Ok(())
}

fn data_path(cfg: &DataConfig) -> Result<&Path> {
    cfg.path
        .as_deref()
        .ok_or_else(|| Error::Config("no data file: pass --data or set data.path".into()))
}

fn load_data(path: &Path) -> Result<Vec<(SequenceRecord, crate::dataio::EventSequence)>> {
    if !path.is_file() {
        return Err(Error::invalid(format!("data file {} not found", path.display())));
    }
    load_records(path)
}

pub fn cmd_train(cfg: &RunConfigFile, metrics_path: &Path, model_path: &Path) -> Result<()> {
    let path = data_path(&cfg.data)?;
    let records = load_data(path)?;
    let data = prepare(&records, &cfg.data, cfg.train.n_clients, cfg.seed())?;
    for p in [metrics_path, model_path] {
        if let Some(d) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(d)?;
        }
    }
    let mut writer = MetricsWriter::create(metrics_path)?;
    let out = run_training_with(&cfg.train, &data, |m| writer.write(m))?;
    let final_evaluated = out
        .metrics
        .last()
        .map(|m| m.per_client_loglik.iter().map(|p| p.0).collect())
        .unwrap_or_default();
    let mut data_cfg = cfg.data.clone();
    data_cfg.path = Some(std::fs::canonicalize(path)?);
    let model = ModelFile {
        version: MODEL_VERSION.into(),
        packing: crate::kernel::PACKING_VERSION.into(),
        seed: cfg.seed(),
        data: data_cfg,
        config: cfg.train.clone(),
        server: out.server,
        final_evaluated,
        clients: out.clients,
    };
    model.save(model_path)?;
    match out.metrics.last() {
        Some(m) => println!(
            "trained {} rounds; final mean test log-likelihood {}",
            out.metrics.len(),
            m.mean_test_loglik
        ),
        None => println!("no rounds run"),
    }
    println!("metrics: {}\nmodel: {}", metrics_path.display(), model_path.display());
    Ok(())
}

/// Per-client test log-likelihood of a saved model.
pub fn evaluate_model(model: &ModelFile, data_override: Option<&Path>) -> Result<Vec<f64>> {
    let path = match data_override {
        Some(p) => p,
        None => data_path(&model.data)?,
    };
    let records = load_data(path)?;
    let data = prepare(&records, &model.data, model.config.n_clients, model.seed)?;
    if data.len() != model.clients.len() {
        return Err(Error::Config(format!(
            "data gives {} clients, model has {}",
            data.len(),
            model.clients.len()
        )));
    }
    model
        .clients
        .iter()
        .zip(&data)
        .enumerate()
        .map(|(c, (state, d))| {
            test_loglik(state, &d.test, d.test_interval, model.config.test_quad_nodes)
                .map_err(|e| Error::Client { client: c, source: Box::new(e) })
        })
        .collect()
}

pub fn cmd_eval(model_path: &Path, data: Option<&Path>) -> Result<()> {
    let model = ModelFile::load(model_path)?;
    let ll = evaluate_model(&model, data)?;
    for (c, v) in ll.iter().enumerate() {
        println!("client {c}: {v}");
    }
    println!("mean (all clients): {}", ll.iter().sum::<f64>() / ll.len() as f64);
    if !model.final_evaluated.is_empty() {
        let sel: f64 = model.final_evaluated.iter().map(|&c| ll[c]).sum();
        println!("mean (last round): {}", sel / model.final_evaluated.len() as f64);
    }
    Ok(())
}

pub fn cmd_aggregate(method: &AggregationMethod, input: &Path, out: &Path) -> Result<()> {
    let file = ParamRecordFile::load(input)?;
    let theta = aggregate(&file.records, method)?;
    println!("{} over {} records: mean {:?} var {:?}", method.name(), file.records.len(), theta.mean(), theta.var());
    ParamRecordFile::new(vec![theta])?.save(out)
}
