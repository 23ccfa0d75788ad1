//! Federated round loop: client sampling with straggling, parallel local
//! updates behind a barrier, aggregation and per-round metrics.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregation::{aggregate, AggregationMethod};
use crate::client::{client_update, elbo, test_loglik, ClientState, LocalTraining, ModelConfig};
use crate::dataio::EventSequence;
use crate::error::{Error, Result};
use crate::kernel::KernelParams;
use crate::numeric::DiagGaussian;
use crate::seed::derive_seed;

const THETA_STREAM: u64 = 0x7468_6574;
const PARTICIPANT_STREAM: u64 = 0x7061_7274;

/// Protocol and model settings for one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FedConfig {
    pub n_clients: usize,
    pub participants_per_round: usize,
    pub rounds: usize,
    pub local_epochs: usize,
    /// Sequences per mini-batch.
    pub batch_size: usize,
    pub step_size: f64,
    /// Rounds during which the participant set stays fixed.
    pub straggle_period: usize,
    pub aggregation: AggregationMethod,
    pub seed: u64,
    /// Evaluate every client each round instead of only participants.
    pub eval_all: bool,
    /// Trapezoid nodes for the test-interval integral.
    pub test_quad_nodes: usize,
    /// Record elapsed time per round; off makes metrics reproducible.
    pub record_time: bool,
    pub model: ModelConfig,
}

impl Default for FedConfig {
    fn default() -> Self {
        Self {
            n_clients: 20,
            participants_per_round: 10,
            rounds: 100,
            local_epochs: 5,
            batch_size: 8,
            step_size: 1e-3,
            straggle_period: 1,
            aggregation: AggregationMethod::Kl,
            seed: 0,
            eval_all: false,
            test_quad_nodes: 200,
            record_time: true,
            model: ModelConfig::default(),
        }
    }
}

impl FedConfig {
    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        if self.n_clients == 0 {
            return cfg("n_clients must be at least 1".into());
        }
        if self.participants_per_round == 0 || self.participants_per_round > self.n_clients {
            return cfg(format!(
                "participants_per_round = {} must lie in 1..={}",
                self.participants_per_round, self.n_clients
            ));
        }
        if self.local_epochs == 0 || self.batch_size == 0 || self.straggle_period == 0 {
            return cfg("local_epochs, batch_size and straggle_period must be at least 1".into());
        }
        if !(self.step_size >= 0.0 && self.step_size.is_finite()) {
            return cfg(format!("step_size must be non-negative, got {}", self.step_size));
        }
        if self.test_quad_nodes < 2 {
            return cfg("test_quad_nodes must be at least 2".into());
        }
        self.aggregation.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.model.validate()
    }

    pub fn local_training(&self) -> LocalTraining {
        LocalTraining {
            epochs: self.local_epochs,
            batch_size: self.batch_size,
            step_size: self.step_size,
            n_w_samples: self.model.n_w_samples,
            optimizer: self.model.optimizer,
        }
    }
}

/// One client's data: training sequences observed on `[0, window]` and
/// held-out sequences scored on `test_interval`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientData {
    pub train: Vec<EventSequence>,
    pub test: Vec<EventSequence>,
    pub horizon: f64,
    pub window: f64,
    pub test_interval: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServerState {
    pub theta: DiagGaussian,
    pub round: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: usize,
    pub participant_ids: Vec<usize>,
    pub mean_test_loglik: f64,
    /// `(client, loglik)` for every evaluated client.
    pub per_client_loglik: Vec<(usize, f64)>,
    pub mean_elbo: f64,
    pub wall_time_ms: u64,
}

/// The only thing a client sends to the server.
#[derive(Debug, Clone, PartialEq)]
pub struct Upload {
    pub client: usize,
    pub phi: DiagGaussian,
}

/// Initial prior: kernel-parameter initialisation as the mean, unit variance.
pub fn init_theta(config: &FedConfig) -> DiagGaussian {
    let w = KernelParams::init(&config.model.encoder, derive_seed(&[config.seed, THETA_STREAM]));
    let d = w.len();
    DiagGaussian::new(w.into_packed(), vec![1.0; d]).expect("initial prior is valid")
}

/// Participants of round `round`: a uniform sample of size `S` keyed by
/// `(seed, round / G)`, sorted.
pub fn sample_participants(round: usize, config: &FedConfig) -> Vec<usize> {
    let period = (round / config.straggle_period.max(1)) as u64;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[config.seed, PARTICIPANT_STREAM, period]));
    let mut ids =
        rand::seq::index::sample(&mut rng, config.n_clients, config.participants_per_round).into_vec();
    ids.sort_unstable();
    ids
}

/// Builds one client per dataset entry with `phi = theta`.
pub fn init_clients(data: &[ClientData], theta: &DiagGaussian, config: &FedConfig) -> Result<Vec<ClientState>> {
    if data.len() != config.n_clients {
        return Err(Error::Config(format!(
            "dataset has {} clients but n_clients = {}",
            data.len(),
            config.n_clients
        )));
    }
    data.iter()
        .enumerate()
        .map(|(id, d)| {
            ClientState::new(id, d.train.clone(), d.horizon, d.window, theta, &config.model)
                .map_err(|e| Error::Client { client: id, source: Box::new(e) })
        })
        .collect()
}

fn evaluate(state: &ClientState, data: &ClientData, config: &FedConfig) -> Result<f64> {
    test_loglik(state, &data.test, data.test_interval, config.test_quad_nodes)
}

/// One round. On any client failure nothing is committed: the returned
/// error names the client and `clients` is unchanged.
pub fn run_round(
    server: &ServerState,
    clients: &mut [ClientState],
    data: &[ClientData],
    config: &FedConfig,
) -> Result<(ServerState, RoundMetrics)> {
    let start = Instant::now();
    let round = server.round;
    let ids = sample_participants(round, config);
    let theta = &server.theta;
    let local = config.local_training();

    let updated: Vec<(ClientState, Upload, f64)> = ids
        .par_iter()
        .map(|&id| {
            let wrap = |e| Error::Client { client: id, source: Box::new(e) };
            let mut state = clients[id].clone();
            let seed = derive_seed(&[config.seed, id as u64, round as u64]);
            let phi = client_update(&mut state, theta, &local, seed).map_err(wrap)?;
            let e = elbo(&state, theta, 0, seed).map_err(wrap)?.total;
            Ok((state, Upload { client: id, phi }, e))
        })
        .collect::<Result<_>>()?;

    // barrier: exactly this round's uploads
    let uploads: Vec<DiagGaussian> = updated.iter().map(|(_, u, _)| u.phi.clone()).collect();
    let new_theta = aggregate(&uploads, &config.aggregation)?;
    let mean_elbo = updated.iter().map(|u| u.2).sum::<f64>() / updated.len() as f64;

    let mut next = clients.to_vec();
    for (state, upload, _) in updated {
        next[upload.client] = state;
    }
    let eval_ids: Vec<usize> = if config.eval_all { (0..clients.len()).collect() } else { ids.clone() };
    let per_client = eval_ids
        .par_iter()
        .map(|&id| {
            evaluate(&next[id], &data[id], config)
                .map(|ll| (id, ll))
                .map_err(|e| Error::Client { client: id, source: Box::new(e) })
        })
        .collect::<Result<Vec<_>>>()?;
    let mean_test_loglik = per_client.iter().map(|p| p.1).sum::<f64>() / per_client.len() as f64;

    clients.clone_from_slice(&next);
    let metrics = RoundMetrics {
        round,
        participant_ids: ids,
        mean_test_loglik,
        per_client_loglik: per_client,
        mean_elbo,
        wall_time_ms: if config.record_time { start.elapsed().as_millis() as u64 } else { 0 },
    };
    Ok((ServerState { theta: new_theta, round: round + 1 }, metrics))
}

#[derive(Debug, Clone)]
pub struct TrainingOutcome {
    pub server: ServerState,
    pub clients: Vec<ClientState>,
    pub metrics: Vec<RoundMetrics>,
}

/// Runs all rounds, handing each round's metrics to `sink` as soon as the
/// round completes.
pub fn run_training_with(
    config: &FedConfig,
    data: &[ClientData],
    mut sink: impl FnMut(&RoundMetrics) -> Result<()>,
) -> Result<TrainingOutcome> {
    config.validate()?;
    let theta = init_theta(config);
    let mut clients = init_clients(data, &theta, config)?;
    let mut server = ServerState { theta, round: 0 };
    let mut metrics = Vec::with_capacity(config.rounds);
    for j in 0..config.rounds {
        let (next, m) = run_round(&server, &mut clients, data, config)
            .map_err(|e| Error::Round { round: j, source: Box::new(e) })?;
        log::info!(
            "round {j}: participants {:?}, test loglik {:.4}, elbo {:.4}",
            m.participant_ids,
            m.mean_test_loglik,
            m.mean_elbo
        );
        sink(&m)?;
        metrics.push(m);
        server = next;
    }
    Ok(TrainingOutcome { server, clients, metrics })
}

pub fn run_training(config: &FedConfig, data: &[ClientData]) -> Result<TrainingOutcome> {
    run_training_with(config, data, |_| Ok(()))
}
