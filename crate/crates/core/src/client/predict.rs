//! Posterior predictive intensity and held-out log-likelihood.

use super::view::View;
use super::ClientState;
use crate::dataio::EventSequence;
use crate::error::{Error, Result};
use crate::numeric::{sigmoid, GaussHermite, QuadratureGrid};

/// Gauss-Hermite nodes used for `E[sigmoid(f)]`.
pub const GH_ORDER: usize = 20;

#[derive(Debug, Clone, PartialEq)]
pub struct IntensityEstimate {
    pub times: Vec<f64>,
    /// `m * E[sigmoid(f(t))]`.
    pub lambda: Vec<f64>,
    pub f_mean: Vec<f64>,
    pub f_var: Vec<f64>,
}

/// Predictive intensity at `times` with `w` at the variational mean.
pub fn intensity(state: &ClientState, times: &[f64]) -> Result<IntensityEstimate> {
    let w = state.mean_params()?;
    let view = View::new(&state.kernel, &w, &state.q_u.locations, times)?;
    let (f_mean, f_var) = view.moments(&state.q_u, state.nu);
    let gh = GaussHermite::new(GH_ORDER);
    let lambda = f_mean
        .iter()
        .zip(&f_var)
        .map(|(&mu, &v)| state.m * gh.expect(mu, v, sigmoid))
        .collect();
    Ok(IntensityEstimate { times: times.to_vec(), lambda, f_mean, f_var })
}

/// Mean over sequences of `sum_i log lambda(t_i) - int_a^b lambda dt`, the
/// integral by the trapezoid rule on `n_quad` nodes.
pub fn test_loglik(
    state: &ClientState,
    seqs: &[EventSequence],
    interval: (f64, f64),
    n_quad: usize,
) -> Result<f64> {
    let (a, b) = interval;
    if !(a < b) {
        return Err(Error::invalid(format!("empty test interval [{a}, {b}]")));
    }
    if seqs.is_empty() {
        return Err(Error::invalid("no test sequences"));
    }
    let grid = QuadratureGrid::on_interval(a, b, n_quad)?;
    let integral = grid.integrate(&intensity(state, grid.nodes())?.lambda);
    let mut total = 0.0;
    for (k, s) in seqs.iter().enumerate() {
        if let Some(t) = s.times().iter().find(|t| **t < a || **t > b) {
            return Err(Error::invalid(format!(
                "test sequence {k}: event {t} outside [{a}, {b}]"
            )));
        }
        let lam = intensity(state, s.times())?.lambda;
        total += lam.iter().map(|l| l.ln()).sum::<f64>() - integral;
    }
    Ok(total / seqs.len() as f64)
}
