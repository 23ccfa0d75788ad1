//! Closed-form mean-field coordinate updates. Each one is the exact
//! maximiser of the ELBO conditional on kernel parameters `w` with every
//! other block held fixed.

use nalgebra::{DMatrix, DVector};

use super::view::View;
use super::{ClientState, LATENT_EXP_CLAMP};
use crate::error::{Error, Result};
use crate::kernel::KernelParams;
use crate::numeric::linalg::symmetrize;
use crate::numeric::pg::pg_mean_unchecked;
use crate::numeric::{log_cosh, SpdMatrix};

/// Pólya-Gamma tilts at the events: `c_m = sqrt(E[f(t_m)^2])`.
pub fn update_pg(state: &mut ClientState, w: &KernelParams) -> Result<()> {
    let events = state.events();
    let view = View::new(&state.kernel, w, &state.q_u.locations, &events)?;
    let (mean, var) = view.moments(&state.q_u, state.nu);
    for (c, (m, v)) in state.pg.iter_mut().zip(mean.iter().zip(&var)) {
        *c = (m * m + v).sqrt();
    }
    state.diagnostics.last_jitter = view.factor.jitter();
    Ok(())
}

/// Latent marked process on the grid:
/// `Lambda(t) = m exp(-E[f]/2) / (2 cosh(c(t)/2))` with `c(t) = sqrt(E[f^2])`.
pub fn update_latent_pp(state: &mut ClientState, w: &KernelParams) -> Result<()> {
    let view = View::new(&state.kernel, w, &state.q_u.locations, state.grid.nodes())?;
    let (mean, var) = view.moments(&state.q_u, state.nu);
    let log_m = state.m.ln();
    let mut clamped = 0;
    for q in 0..mean.len() {
        let c = (mean[q] * mean[q] + var[q]).sqrt();
        let mut e = log_m - 0.5 * mean[q] - std::f64::consts::LN_2 - log_cosh(0.5 * c);
        if e.abs() > LATENT_EXP_CLAMP {
            e = e.clamp(-LATENT_EXP_CLAMP, LATENT_EXP_CLAMP);
            clamped += 1;
        }
        state.latent_rate[q] = e.exp();
        state.latent_tilt[q] = c;
    }
    if clamped > 0 {
        log::debug!("client {}: {clamped} latent-rate exponents clamped", state.id);
    }
    state.diagnostics.clamped_exponents = clamped;
    state.diagnostics.last_jitter = view.factor.jitter();
    Ok(())
}

/// Gaussian `q(u)`:
/// `Sigma = K (K + Phi)^{-1} K`, `mu = K (K + Phi)^{-1} (beta + nu 1)` where
/// `Phi = sum_t A(t) k_t k_t^T` and `beta = sum_t B~(t) k_t`. Event terms
/// are exact sums; latent-process terms use the grid.
pub fn update_inducing(state: &mut ClientState, w: &KernelParams) -> Result<()> {
    let events = state.events();
    let n_ev = events.len();
    let points: Vec<f64> = events.iter().chain(state.grid.nodes()).copied().collect();
    let view = View::new(&state.kernel, w, &state.q_u.locations, &points)?;
    let n_seq = state.num_sequences() as f64;
    let nu = state.nu;
    let m = view.m_ind;

    // A(t) and B(t) per point
    let mut a_coef = Vec::with_capacity(points.len());
    let mut b_coef = Vec::with_capacity(points.len());
    for &c in &state.pg {
        a_coef.push(pg_mean_unchecked(c));
        b_coef.push(0.5);
    }
    for (q, &wq) in state.grid.weights().iter().enumerate() {
        let lam = state.latent_rate[q];
        a_coef.push(n_seq * wq * lam * pg_mean_unchecked(state.latent_tilt[q]));
        b_coef.push(-0.5 * n_seq * wq * lam);
    }
    debug_assert_eq!(a_coef.len(), n_ev + state.grid.len());

    // b(t) = nu (1 - k_t^T K^{-1} 1)
    let col_sums: Vec<f64> = (0..points.len()).map(|t| view.a.column(t).sum()).collect();

    let mut phi = DMatrix::<f64>::zeros(m, m);
    let mut beta = DVector::<f64>::zeros(m);
    let mut scaled = view.kzx.clone();
    for t in 0..points.len() {
        let b_t = nu * (1.0 - col_sums[t]);
        let btilde = b_coef[t] - a_coef[t] * b_t;
        beta.axpy(btilde, &view.kzx.column(t), 1.0);
        scaled.column_mut(t).scale_mut(a_coef[t]);
    }
    phi.gemm(1.0, &scaled, &view.kzx.transpose(), 0.0);

    let k = &view.kzz_jittered;
    let mut outer = k + &phi;
    symmetrize(&mut outer);
    let outer_factor = SpdMatrix::new(outer)?.factor_exact_first("Kzz + Phi")?;
    let rhs = beta.map(|v| v + nu);
    let mean = k * outer_factor.solve_vec(&rhs);
    let mut cov = k * outer_factor.solve_mat(k);
    symmetrize(&mut cov);
    if mean.iter().chain(cov.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { term: "inducing posterior".into() });
    }
    state.q_u.mean = mean;
    state.q_u.cov = cov;
    state.diagnostics.last_jitter = view.factor.jitter();
    Ok(())
}

/// Fixed point for the intensity bound:
/// `m = (N + n_seq * int Lambda) / (n_seq * window)`.
pub fn update_scale(state: &mut ClientState) -> Result<()> {
    let n_seq = state.num_sequences() as f64;
    let n_events = state.num_events() as f64;
    let latent_mass = state.grid.integrate(&state.latent_rate);
    let m = (n_events + n_seq * latent_mass) / (n_seq * state.window());
    if !(m > 0.0 && m.is_finite()) {
        return Err(Error::NonFinite { term: format!("scale update (m = {m})") });
    }
    state.m = m;
    Ok(())
}

/// One sweep in the order pg, latent process, inducing posterior, scale.
pub fn mfvi_sweep(state: &mut ClientState, w: &KernelParams) -> Result<()> {
    update_pg(state, w)?;
    update_latent_pp(state, w)?;
    update_inducing(state, w)?;
    update_scale(state)?;
    state.check_invariants()
}
