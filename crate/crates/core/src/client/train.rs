//! Local training loop: mean-field sweeps interleaved with stochastic
//! gradient steps on `q(w)`.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::mfvi::mfvi_sweep;
use super::objective::local_objective_grad;
use super::ClientState;
use crate::error::{Error, Result};
use crate::numeric::DiagGaussian;
use crate::seed::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Sgd,
    Adam,
}

/// Hyperparameters of one local update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalTraining {
    pub epochs: usize,
    /// Sequences per mini-batch.
    pub batch_size: usize,
    pub step_size: f64,
    pub n_w_samples: usize,
    pub optimizer: Optimizer,
}

impl LocalTraining {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::invalid("local epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        if !(self.step_size >= 0.0 && self.step_size.is_finite()) {
            return Err(Error::invalid(format!("step size {} must be >= 0", self.step_size)));
        }
        Ok(())
    }
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(d: usize) -> Self {
        Self { m: vec![0.0; d], v: vec![0.0; d], t: 0 }
    }

    fn direction(&mut self, g: &[f64]) -> Vec<f64> {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        g.iter()
            .enumerate()
            .map(|(i, &gi)| {
                self.m[i] = Self::B1 * self.m[i] + (1.0 - Self::B1) * gi;
                self.v[i] = Self::B2 * self.v[i] + (1.0 - Self::B2) * gi * gi;
                (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + Self::EPS)
            })
            .collect()
    }
}

/// Runs `epochs` rounds of one mean-field sweep at `w = mean(phi)` followed
/// by one shuffled pass of mini-batch steps on `(mean, log_var)` of `phi`.
/// Returns the final `phi`. Deterministic in `seed`.
pub fn client_update(
    state: &mut ClientState,
    theta: &DiagGaussian,
    cfg: &LocalTraining,
    seed: u64,
) -> Result<DiagGaussian> {
    cfg.validate()?;
    state.phi.check_same_dim(theta)?;
    let d = state.phi.dim();
    let n_seq = state.num_sequences();
    let mut mean = state.phi.mean().to_vec();
    let mut log_var = state.phi.log_var();
    let mut adam = (Adam::new(d), Adam::new(d));
    let mut order: Vec<usize> = (0..n_seq).collect();

    for epoch in 0..cfg.epochs {
        let w = state.mean_params()?;
        mfvi_sweep(state, &w)?;

        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, epoch as u64]));
        order.sort_unstable();
        order.shuffle(&mut rng);
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            let noise = derive_seed(&[seed, epoch as u64, step as u64, 1]);
            let (value, grad) = local_objective_grad(state, theta, Some(batch), cfg.n_w_samples, noise)?;
            if let Some(term) = value.terms.non_finite() {
                return Err(Error::NonFinite {
                    term: format!("{term} (epoch {epoch}, step {step})"),
                });
            }
            if grad.mean.iter().chain(&grad.log_var).any(|g| !g.is_finite()) {
                return Err(Error::NonFinite {
                    term: format!("objective gradient (epoch {epoch}, step {step})"),
                });
            }
            if cfg.step_size == 0.0 {
                continue;
            }
            let (dm, dv) = match cfg.optimizer {
                Optimizer::Sgd => (grad.mean, grad.log_var),
                Optimizer::Adam => (adam.0.direction(&grad.mean), adam.1.direction(&grad.log_var)),
            };
            for i in 0..d {
                mean[i] -= cfg.step_size * dm[i];
                log_var[i] -= cfg.step_size * dv[i];
            }
            let phi = DiagGaussian::from_log_var(mean.clone(), &log_var).map_err(|e| {
                Error::NonFinite { term: format!("variational parameters after step {step}: {e}") }
            })?;
            debug_assert!(phi.var().iter().all(|v| *v > 0.0));
            state.phi = phi;
        }
    }
    Ok(state.phi.clone())
}
