//! One federated client: a sparse-GP sigmoidal Cox process whose kernel
//! parameters carry a diagonal Gaussian `q(w)`.
//!
//! The client keeps four variational blocks besides `q(w)`:
//! the inducing posterior `q(u)`, the Pólya-Gamma tilts at observed events,
//! the latent marked Poisson process rate `Lambda(t)` with its tilt `c(t)`
//! on a quadrature grid, and the intensity bound `m`. The first three have
//! closed-form coordinate updates ([`update_pg`], [`update_latent_pp`],
//! [`update_inducing`]); `m` has a fixed-point update ([`update_scale`]).
//! `q(w)` is trained with reparameterised gradients of the local objective.

mod mfvi;
mod objective;
mod predict;
mod train;
mod view;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dataio::EventSequence;
use crate::error::{Error, Result};
use crate::kernel::{DeepKernel, EncoderSpec, KernelParams};
use crate::numeric::{DiagGaussian, QuadratureGrid};

pub use mfvi::{mfvi_sweep, update_inducing, update_latent_pp, update_pg, update_scale};
pub use objective::{
    elbo, elbo_at, local_objective, local_objective_grad, ElboTerms, ObjectiveValue, PhiGradient,
    WeightSamples,
};
pub use predict::{intensity, test_loglik, IntensityEstimate, GH_ORDER};
pub use train::{client_update, LocalTraining, Optimizer};
pub use view::posterior_f_moments;

/// Exponent bound applied when evaluating the latent process rate.
pub const LATENT_EXP_CLAMP: f64 = 60.0;
/// Floor applied to posterior variances of `f`.
pub const VARIANCE_FLOOR: f64 = 1e-12;

/// Model hyperparameters shared by every client.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Number of inducing points, equally spaced over the horizon.
    pub num_inducing: usize,
    /// Trapezoid nodes over the training window.
    pub quad_nodes: usize,
    /// Reparameterised samples of `w` per gradient evaluation.
    pub n_w_samples: usize,
    pub encoder: EncoderSpec,
    pub optimizer: Optimizer,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_inducing: 50,
            quad_nodes: 200,
            n_w_samples: 4,
            encoder: EncoderSpec::default(),
            optimizer: Optimizer::Adam,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.num_inducing == 0 {
            return Err(Error::Config("num_inducing must be at least 1".into()));
        }
        if self.quad_nodes < 2 {
            return Err(Error::Config("quad_nodes must be at least 2".into()));
        }
        Ok(())
    }
}

/// Variational posterior over inducing values at fixed locations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InducingPosterior {
    pub locations: Vec<f64>,
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl InducingPosterior {
    pub fn len(&self) -> usize {
        self.locations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.locations.is_empty()
    }
}

/// `M` equally spaced inducing locations on `[0, horizon]`.
pub fn inducing_locations(horizon: f64, m: usize) -> Vec<f64> {
    if m == 1 {
        return vec![0.5 * horizon];
    }
    (0..m).map(|i| horizon * i as f64 / (m - 1) as f64).collect()
}

/// Counters for numerical safeguards that fired during updates.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    /// Jitter used by the last factorisation of the inducing Gram matrix.
    pub last_jitter: f64,
    /// Grid nodes whose latent-rate exponent hit the clamp.
    pub clamped_exponents: usize,
}

/// Everything one client owns. None of it leaves the client except `phi`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientState {
    pub id: usize,
    pub train_seqs: Vec<EventSequence>,
    pub kernel: DeepKernel,
    /// Intensity upper bound (events per unit time).
    pub m: f64,
    /// Constant GP prior mean.
    pub nu: f64,
    pub phi: DiagGaussian,
    pub q_u: InducingPosterior,
    /// Pólya-Gamma tilts at every training event, in sequence order.
    pub pg: Vec<f64>,
    /// Latent marked process rate on the grid nodes.
    pub latent_rate: Vec<f64>,
    /// Pólya-Gamma tilt of the latent marks on the grid nodes.
    pub latent_tilt: Vec<f64>,
    /// Quadrature over the training window.
    pub grid: QuadratureGrid,
    pub diagnostics: Diagnostics,
}

impl ClientState {
    /// Fresh client: `phi` copies the broadcast prior, `q(u)` is the GP prior
    /// at `w = mean(phi)`, tilts are 1, `m` is twice the empirical rate and
    /// the latent rate is `m / 2`.
    ///
    /// `horizon` is the full timeline (encoder normalisation and inducing
    /// locations); `window` is the span the training sequences were observed
    /// over.
    pub fn new(
        id: usize,
        train_seqs: Vec<EventSequence>,
        horizon: f64,
        window: f64,
        theta: &DiagGaussian,
        config: &ModelConfig,
    ) -> Result<Self> {
        config.validate()?;
        if train_seqs.is_empty() {
            return Err(Error::invalid(format!("client {id} has no training sequences")));
        }
        if !(window > 0.0 && window <= horizon * (1.0 + 1e-12)) {
            return Err(Error::invalid(format!(
                "training window {window} must lie in (0, {horizon}]"
            )));
        }
        for s in &train_seqs {
            if let Some(t) = s.times().iter().find(|t| **t > window) {
                return Err(Error::invalid(format!(
                    "client {id}: training event {t} beyond window {window}"
                )));
            }
        }
        let kernel = DeepKernel::new(config.encoder, horizon)?;
        if theta.dim() != config.encoder.packed_len() {
            return Err(Error::DimensionMismatch {
                expected: config.encoder.packed_len(),
                actual: theta.dim(),
            });
        }
        let grid = QuadratureGrid::on_interval(0.0, window, config.quad_nodes)?;
        let n_events: usize = train_seqs.iter().map(|s| s.len()).sum();
        let rate = n_events.max(1) as f64 / (train_seqs.len() as f64 * window);
        let m = 2.0 * rate;
        let nu = 0.0;

        let locations = inducing_locations(horizon, config.num_inducing);
        let w = KernelParams::from_packed(theta.mean().to_vec(), &config.encoder)?;
        let kzz = kernel.matrix(&locations, &locations, &w)?;
        let factor = crate::numeric::SpdMatrix::new(kzz.clone())?.factor("Kzz")?;
        let mut cov = kzz;
        for i in 0..cov.nrows() {
            cov[(i, i)] += factor.jitter();
        }
        let q_u = InducingPosterior {
            mean: DVector::from_element(locations.len(), nu),
            cov,
            locations,
        };
        let q = grid.len();
        Ok(Self {
            id,
            train_seqs,
            kernel,
            m,
            nu,
            phi: theta.clone(),
            q_u,
            pg: vec![1.0; n_events],
            latent_rate: vec![0.5 * m; q],
            latent_tilt: vec![1.0; q],
            grid,
            diagnostics: Diagnostics {
                last_jitter: factor.jitter(),
                clamped_exponents: 0,
            },
        })
    }

    pub fn num_sequences(&self) -> usize {
        self.train_seqs.len()
    }

    pub fn num_events(&self) -> usize {
        self.pg.len()
    }

    pub fn window(&self) -> f64 {
        self.grid.length()
    }

    /// All training events, concatenated in sequence order.
    pub fn events(&self) -> Vec<f64> {
        self.train_seqs.iter().flat_map(|s| s.times().iter().copied()).collect()
    }

    /// Index range of each sequence inside [`ClientState::events`].
    pub(crate) fn sequence_offsets(&self) -> Vec<std::ops::Range<usize>> {
        let mut start = 0;
        self.train_seqs
            .iter()
            .map(|s| {
                let r = start..start + s.len();
                start += s.len();
                r
            })
            .collect()
    }

    /// Kernel parameters at the variational mean.
    pub fn mean_params(&self) -> Result<KernelParams> {
        KernelParams::from_packed(self.phi.mean().to_vec(), &self.kernel.spec)
    }

    pub(crate) fn check_invariants(&self) -> Result<()> {
        if self.pg.len() != self.train_seqs.iter().map(|s| s.len()).sum::<usize>() {
            return Err(Error::invalid("pg length does not match event count"));
        }
        if !(self.m > 0.0 && self.m.is_finite()) {
            return Err(Error::NonFinite { term: "scale m".into() });
        }
        if self.latent_rate.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::NonFinite { term: "latent rate".into() });
        }
        Ok(())
    }
}
