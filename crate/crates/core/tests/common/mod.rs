#![allow(dead_code)]

use std::ops::Range;

use fedpp::client::{
    elbo_at, local_objective, local_objective_grad, mfvi_sweep, update_inducing, update_latent_pp,
    update_pg, update_scale, ClientState, ModelConfig,
};
use fedpp::dataio::EventSequence;
use fedpp::kernel::{EncoderSpec, KernelParams};
use fedpp::numeric::DiagGaussian;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn small_spec() -> EncoderSpec {
    EncoderSpec::new(3, 2).unwrap()
}

/// A client with n <= 20 events, M <= 8 inducing points and Q <= 50 grid
/// nodes whose variational blocks are all randomised.
pub fn micro_instance(seed: u64) -> (ClientState, DiagGaussian) {
    let mut r = rng(seed);
    let spec = small_spec();
    let horizon = r.random_range(0.5..3.0);
    let n_seq = r.random_range(1..=3);
    let mut budget = r.random_range(1..=20usize);
    let mut seqs = Vec::new();
    for k in 0..n_seq {
        let n = if k + 1 == n_seq { budget } else { r.random_range(0..=budget) };
        budget -= n;
        let mut t: Vec<f64> = (0..n).map(|_| r.random_range(0.0..horizon)).collect();
        t.sort_by(f64::total_cmp);
        seqs.push(EventSequence::unmarked(t, horizon).unwrap());
    }
    let d = spec.packed_len();
    let mut theta_mean: Vec<f64> = (0..d).map(|_| r.random_range(-1.0..1.0)).collect();
    theta_mean[d - 2] = r.random_range(-0.5..0.5);
    theta_mean[d - 1] = r.random_range(-1.0..0.0);
    let theta_var: Vec<f64> = (0..d).map(|_| r.random_range(0.5..2.0)).collect();
    let theta = DiagGaussian::new(theta_mean.clone(), theta_var).unwrap();
    let config = ModelConfig {
        num_inducing: r.random_range(2..=8),
        quad_nodes: r.random_range(5..=50),
        n_w_samples: 2,
        encoder: spec,
        ..ModelConfig::default()
    };
    let mut state = ClientState::new(0, seqs, horizon, horizon, &theta, &config).unwrap();

    let phi_mean: Vec<f64> = theta_mean.iter().map(|m| m + r.random_range(-0.2..0.2)).collect();
    let phi_var: Vec<f64> = (0..d).map(|_| r.random_range(0.001..0.02)).collect();
    state.phi = DiagGaussian::new(phi_mean, phi_var).unwrap();
    state.m = r.random_range(2.0..30.0);
    let m_ind = state.q_u.len();
    for v in state.q_u.mean.iter_mut() {
        *v = r.random_range(-1.5..1.5);
    }
    let b = DMatrix::from_fn(m_ind, m_ind, |_, _| r.random_range(-0.4..0.4));
    state.q_u.cov = &b * b.transpose() + DMatrix::identity(m_ind, m_ind) * 0.05;
    for c in state.pg.iter_mut() {
        *c = r.random_range(0.1..3.0);
    }
    let m = state.m;
    for (l, c) in state.latent_rate.iter_mut().zip(state.latent_tilt.iter_mut()) {
        *l = r.random_range(0.0..m);
        *c = r.random_range(0.1..3.0);
    }
    (state, theta)
}

type Update = fn(&mut ClientState, &KernelParams) -> fedpp::Result<()>;

fn not_decreasing(before: f64, after: f64, what: &str, seed: u64) -> Result<f64, String> {
    let rel = (before - after) / before.abs().max(1.0);
    if rel > 1e-4 {
        return Err(format!("{what} decreased the ELBO on instance {seed}: {before} -> {after}"));
    }
    Ok(rel)
}

/// Applies each coordinate update once per instance; returns the largest
/// relative decrease seen.
pub fn coordinate_updates_monotone(seeds: Range<u64>) -> Result<f64, String> {
    let updates: [(&str, Update); 4] = [
        ("pg", update_pg),
        ("latent", update_latent_pp),
        ("inducing", update_inducing),
        ("scale", |s, _| update_scale(s)),
    ];
    let mut worst = f64::MIN;
    for seed in seeds {
        for (name, upd) in updates {
            let (mut state, theta) = micro_instance(seed);
            let w = state.mean_params().unwrap();
            let before = elbo_at(&state, &theta, &[w.clone()]).unwrap().total;
            upd(&mut state, &w).map_err(|e| e.to_string())?;
            let after = elbo_at(&state, &theta, &[w]).unwrap().total;
            worst = worst.max(not_decreasing(before, after, name, seed)?);
        }
    }
    Ok(worst)
}

pub fn sweeps_monotone(seeds: Range<u64>, sweeps: usize) -> Result<f64, String> {
    let mut worst = f64::MIN;
    for seed in seeds {
        let (mut state, theta) = micro_instance(seed);
        let w = state.mean_params().unwrap();
        let mut prev = elbo_at(&state, &theta, &[w.clone()]).unwrap().total;
        for _ in 0..sweeps {
            mfvi_sweep(&mut state, &w).map_err(|e| e.to_string())?;
            let cur = elbo_at(&state, &theta, &[w.clone()]).unwrap().total;
            worst = worst.max(not_decreasing(prev, cur, "sweep", seed)?);
            prev = cur;
        }
    }
    Ok(worst)
}

fn objective_at(
    state: &ClientState,
    theta: &DiagGaussian,
    batch: Option<&[usize]>,
    mean: Vec<f64>,
    log_var: &[f64],
) -> f64 {
    let mut s = state.clone();
    s.phi = DiagGaussian::from_log_var(mean, log_var).unwrap();
    local_objective(&s, theta, batch, 2, 99).unwrap().value
}

/// Five-point central difference of `f` along coordinate `i` of `x`.
fn central(f: &dyn Fn(Vec<f64>) -> f64, x: &[f64], i: usize, h: f64) -> f64 {
    let at = |k: f64| {
        let mut y = x.to_vec();
        y[i] += k * h;
        f(y)
    };
    (at(-2.0) - 8.0 * at(-1.0) + 8.0 * at(1.0) - at(2.0)) / (12.0 * h)
}

/// Compares the analytic gradient in `(mean, log_var)` with finite
/// differences of the same fixed-noise objective; returns the worst
/// max-norm relative error.
pub fn gradient_check(seeds: Range<u64>, tol: f64) -> Result<f64, String> {
    let h = 1e-3;
    let mut worst = 0.0f64;
    for seed in seeds {
        let (mut state, theta) = micro_instance(seed);
        let w = state.mean_params().unwrap();
        mfvi_sweep(&mut state, &w).unwrap();
        let batch: Vec<usize> = (0..state.num_sequences()).step_by(2).collect();
        let batch = if seed % 2 == 0 { Some(batch.as_slice()) } else { None };
        let (_, g) = local_objective_grad(&state, &theta, batch, 2, 99).map_err(|e| e.to_string())?;
        let mean = state.phi.mean().to_vec();
        let lv = state.phi.log_var();
        let f_mean = |m: Vec<f64>| objective_at(&state, &theta, batch, m, &lv);
        let f_lv = |v: Vec<f64>| objective_at(&state, &theta, batch, mean.clone(), &v);
        let mut fd: Vec<f64> = (0..mean.len()).map(|i| central(&f_mean, &mean, i, h)).collect();
        fd.extend((0..lv.len()).map(|i| central(&f_lv, &lv, i, h)));
        let analytic: Vec<f64> = g.mean.iter().chain(&g.log_var).copied().collect();
        let norm = fd.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let diff = analytic.iter().zip(&fd).fold(0.0f64, |a, (x, y)| a.max((x - y).abs()));
        let rel = diff / norm;
        worst = worst.max(rel);
        if rel > tol {
            return Err(format!("instance {seed}: relative gradient error {rel:.3e}"));
        }
    }
    Ok(worst)
}
