//! Evidence lower bound and the local objective over `q(w)`.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::view::View;
use super::ClientState;
use crate::error::{Error, Result};
use crate::kernel::{EncoderSpec, KernelParams};
use crate::numeric::pg::pg_mean_unchecked;
use crate::numeric::{kl_diag, log_cosh, DiagGaussian, SpdMatrix};

const LN_2: f64 = std::f64::consts::LN_2;

/// Common random numbers for reparameterised draws `w = r + delta * eps`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightSamples {
    pub eps: Vec<Vec<f64>>,
    pub params: Vec<KernelParams>,
}

impl WeightSamples {
    /// `n` standard-normal draws from `seed`. `n = 0` yields the single
    /// deterministic point `w = r`.
    pub fn draw(phi: &DiagGaussian, spec: &EncoderSpec, n: usize, seed: u64) -> Result<Self> {
        let d = phi.dim();
        let eps = if n == 0 {
            vec![vec![0.0; d]]
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..n)
                .map(|_| (0..d).map(|_| StandardNormal.sample(&mut rng)).collect())
                .collect()
        };
        Self::from_noise(phi, spec, eps)
    }

    pub fn from_noise(phi: &DiagGaussian, spec: &EncoderSpec, eps: Vec<Vec<f64>>) -> Result<Self> {
        let params = eps
            .iter()
            .map(|e| {
                if e.len() != phi.dim() {
                    return Err(Error::DimensionMismatch { expected: phi.dim(), actual: e.len() });
                }
                KernelParams::from_packed(phi.reparam(e), spec)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { eps, params })
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }
}

/// ELBO broken into its parts. `events`, `latent` and `kl_u` are averaged
/// over the `w` samples.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ElboTerms {
    /// Augmented log-likelihood of the observed events, including the
    /// Pólya-Gamma divergence at each event.
    pub events: f64,
    /// Latent marked process: augmented log-likelihood minus its divergence.
    pub latent: f64,
    /// KL between `q(u)` and the GP prior at the inducing locations.
    pub kl_u: f64,
    /// KL between `q(w)` and the broadcast prior.
    pub kl_w: f64,
    pub total: f64,
}

impl ElboTerms {
    /// Name of the first non-finite term, if any.
    pub fn non_finite(&self) -> Option<&'static str> {
        [
            ("events", self.events),
            ("latent", self.latent),
            ("kl_u", self.kl_u),
            ("kl_w", self.kl_w),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }
}

/// Local objective `-L` (minimised) with the ELBO terms it was built from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveValue {
    pub value: f64,
    pub terms: ElboTerms,
}

/// Gradient of `-L` with respect to the mean and log-variance of `q(w)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PhiGradient {
    pub mean: Vec<f64>,
    pub log_var: Vec<f64>,
}

/// Which sequences contribute event terms and with what weight.
struct Batch {
    events: Vec<usize>,
    scale: f64,
}

fn make_batch(state: &ClientState, batch: Option<&[usize]>) -> Result<Batch> {
    let n_seq = state.num_sequences();
    match batch {
        None => Ok(Batch { events: (0..state.num_events()).collect(), scale: 1.0 }),
        Some(ids) => {
            if ids.is_empty() {
                return Err(Error::invalid("mini-batch is empty"));
            }
            let offsets = state.sequence_offsets();
            let mut events = Vec::new();
            for &s in ids {
                let r = offsets.get(s).ok_or_else(|| {
                    Error::invalid(format!("sequence {s} out of range ({n_seq} sequences)"))
                })?;
                events.extend(r.clone());
            }
            Ok(Batch { events, scale: n_seq as f64 / ids.len() as f64 })
        }
    }
}

/// Terms of the ELBO that depend on `w`, for one draw.
struct Conditional {
    events: f64,
    latent: f64,
    kl_u: f64,
}

fn conditional(
    state: &ClientState,
    w: &KernelParams,
    batch: &Batch,
    sigma_logdet: f64,
    grad: Option<&mut [f64]>,
) -> Result<Conditional> {
    let all_events = state.events();
    let n_ev = batch.events.len();
    let points: Vec<f64> = batch
        .events
        .iter()
        .map(|&i| all_events[i])
        .chain(state.grid.nodes().iter().copied())
        .collect();
    let view = View::new(&state.kernel, w, &state.q_u.locations, &points)?;
    let (mean, var) = view.moments(&state.q_u, state.nu);
    let n_seq = state.num_sequences() as f64;
    let log_m = state.m.ln();
    let s = batch.scale;

    // per-point coefficients of E[f] (beta) and E[f^2] (gamma)
    let n_pts = points.len();
    let mut beta = vec![0.0; n_pts];
    let mut gamma = vec![0.0; n_pts];

    let mut events = 0.0;
    for (k, &i) in batch.events.iter().enumerate() {
        let c = state.pg[i];
        let om = pg_mean_unchecked(c);
        let ef2 = mean[k] * mean[k] + var[k];
        events += log_m + 0.5 * mean[k] - 0.5 * om * ef2 - LN_2 - log_cosh(0.5 * c)
            + 0.5 * c * c * om;
        beta[k] = 0.5 * s;
        gamma[k] = 0.5 * om * s;
    }
    events *= s;

    let mut integral = 0.0;
    for (q, &wq) in state.grid.weights().iter().enumerate() {
        let lam = state.latent_rate[q];
        if lam <= 0.0 {
            continue;
        }
        let k = n_ev + q;
        let c = state.latent_tilt[q];
        let om = pg_mean_unchecked(c);
        let ef2 = mean[k] * mean[k] + var[k];
        let integrand = -0.5 * mean[k] - 0.5 * om * ef2 - LN_2 - (lam.ln() - log_m)
            - log_cosh(0.5 * c)
            + 0.5 * c * c * om
            + 1.0;
        integral += wq * lam * integrand;
        beta[k] = -0.5 * n_seq * wq * lam;
        gamma[k] = 0.5 * n_seq * wq * lam * om;
    }
    let latent = n_seq * (integral - state.m * state.window());

    let m_ind = view.m_ind;
    let alpha = view.alpha(&state.q_u, state.nu);
    let kinv_sigma = view.factor.solve_mat(&state.q_u.cov);
    let trace: f64 = (0..m_ind).map(|i| kinv_sigma[(i, i)]).sum();
    let d = state.q_u.mean.map(|v| v - state.nu);
    let kl_u = 0.5
        * (trace + d.dot(&alpha) - m_ind as f64 + view.factor.log_det() - sigma_logdet);

    if let Some(grad) = grad {
        let a = &view.a;
        let s_mat = &kinv_sigma * a;
        let g: Vec<f64> = (0..n_pts).map(|t| beta[t] - 2.0 * gamma[t] * mean[t]).collect();
        let g_vec = DVector::from_vec(g.clone());

        let mut g_kx = DMatrix::<f64>::zeros(m_ind, n_pts);
        for t in 0..n_pts {
            let mut col = g_kx.column_mut(t);
            col.axpy(g[t], &alpha, 0.0);
            col.axpy(2.0 * gamma[t], &a.column(t), 1.0);
            col.axpy(-2.0 * gamma[t], &s_mat.column(t), 1.0);
        }

        let mut a_gamma = a.clone();
        for t in 0..n_pts {
            a_gamma.column_mut(t).scale_mut(gamma[t]);
        }
        let ag = a * &g_vec;
        let mut g_k = -(&ag * alpha.transpose());
        g_k.gemm(-1.0, &a_gamma, &a.transpose(), 1.0);
        g_k.gemm(2.0, &s_mat, &a_gamma.transpose(), 1.0);
        let kinv_sigma_kinv = view.factor.solve_mat(&kinv_sigma.transpose());
        let kinv = view.factor.inverse();
        g_k += 0.5 * (kinv_sigma_kinv + &alpha * alpha.transpose() - kinv);

        let g_r = -gamma.iter().sum::<f64>();
        view.backprop(&g_k, &g_kx, g_r, grad);
    }

    Ok(Conditional { events, latent, kl_u })
}

fn sigma_logdet(state: &ClientState) -> Result<f64> {
    Ok(SpdMatrix::new(state.q_u.cov.clone())?
        .factor_exact_first("Sigma_u")?
        .log_det())
}

fn assemble(parts: &[Conditional], kl_w: f64) -> ElboTerms {
    let n = parts.len() as f64;
    let events = parts.iter().map(|p| p.events).sum::<f64>() / n;
    let latent = parts.iter().map(|p| p.latent).sum::<f64>() / n;
    let kl_u = parts.iter().map(|p| p.kl_u).sum::<f64>() / n;
    ElboTerms { events, latent, kl_u, kl_w, total: events + latent - kl_u - kl_w }
}

/// ELBO averaged over the given kernel-parameter draws, on all training
/// sequences.
pub fn elbo_at(state: &ClientState, theta: &DiagGaussian, ws: &[KernelParams]) -> Result<ElboTerms> {
    if ws.is_empty() {
        return Err(Error::invalid("at least one kernel-parameter draw is required"));
    }
    let batch = make_batch(state, None)?;
    let ld = sigma_logdet(state)?;
    let parts = ws
        .iter()
        .map(|w| conditional(state, w, &batch, ld, None))
        .collect::<Result<Vec<_>>>()?;
    Ok(assemble(&parts, kl_diag(&state.phi, theta)?))
}

/// ELBO with `n_w_samples` reparameterised draws of `w` from `seed`
/// (`0` evaluates at the variational mean).
pub fn elbo(
    state: &ClientState,
    theta: &DiagGaussian,
    n_w_samples: usize,
    seed: u64,
) -> Result<ElboTerms> {
    let samples = WeightSamples::draw(&state.phi, &state.kernel.spec, n_w_samples, seed)?;
    elbo_at(state, theta, &samples.params)
}

/// `-L` on the sequences in `batch` (all sequences when `None`). Event terms
/// are rescaled by `n_seq / |batch|`.
pub fn local_objective(
    state: &ClientState,
    theta: &DiagGaussian,
    batch: Option<&[usize]>,
    n_w_samples: usize,
    seed: u64,
) -> Result<ObjectiveValue> {
    let b = make_batch(state, batch)?;
    let samples = WeightSamples::draw(&state.phi, &state.kernel.spec, n_w_samples, seed)?;
    let ld = sigma_logdet(state)?;
    let parts = samples
        .params
        .iter()
        .map(|w| conditional(state, w, &b, ld, None))
        .collect::<Result<Vec<_>>>()?;
    let terms = assemble(&parts, kl_diag(&state.phi, theta)?);
    Ok(ObjectiveValue { value: -terms.total, terms })
}

/// `-L` and its reparameterised gradient in `(mean, log_var)` of `q(w)`.
/// The divergence to `theta` is KL.
pub fn local_objective_grad(
    state: &ClientState,
    theta: &DiagGaussian,
    batch: Option<&[usize]>,
    n_w_samples: usize,
    seed: u64,
) -> Result<(ObjectiveValue, PhiGradient)> {
    state.phi.check_same_dim(theta)?;
    let b = make_batch(state, batch)?;
    let samples = WeightSamples::draw(&state.phi, &state.kernel.spec, n_w_samples, seed)?;
    let ld = sigma_logdet(state)?;
    let d = state.phi.dim();
    let n = samples.len() as f64;
    let std = state.phi.std();

    let mut g_mean = vec![0.0; d];
    let mut g_logvar = vec![0.0; d];
    let mut parts = Vec::with_capacity(samples.len());
    let mut gw = vec![0.0; d];
    for (w, eps) in samples.params.iter().zip(&samples.eps) {
        gw.iter_mut().for_each(|v| *v = 0.0);
        parts.push(conditional(state, w, &b, ld, Some(&mut gw))?);
        for i in 0..d {
            g_mean[i] -= gw[i] / n;
            g_logvar[i] -= gw[i] * eps[i] * 0.5 * std[i] / n;
        }
    }
    let (r, dv) = (state.phi.mean(), state.phi.var());
    let (mu, sv) = (theta.mean(), theta.var());
    for i in 0..d {
        g_mean[i] += (r[i] - mu[i]) / sv[i];
        g_logvar[i] += 0.5 * (dv[i] / sv[i] - 1.0);
    }
    let terms = assemble(&parts, kl_diag(&state.phi, theta)?);
    Ok((ObjectiveValue { value: -terms.total, terms }, PhiGradient { mean: g_mean, log_var: g_logvar }))
}
