//! Server-side aggregation of client Gaussians into a new prior.
//!
//! Every method works coordinate by coordinate. Client values are sorted
//! per coordinate before averaging so the result does not depend on the
//! order clients are listed in.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::DiagGaussian;

/// Lower bound applied to aggregated variances.
pub const VARIANCE_CLAMP: f64 = 1e-10;
/// Step multiplier after an accepted MMD descent step.
pub const STEP_GROWTH: f64 = 1.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum AggregationMethod {
    FedAvg,
    Kl,
    W2,
    Mmd {
        /// RBF bandwidth in parameter space.
        #[serde(default = "default_delta")]
        delta: f64,
        #[serde(default = "default_steps")]
        steps: usize,
        #[serde(default = "default_eta")]
        eta: f64,
    },
}

fn default_delta() -> f64 {
    1.0
}
fn default_steps() -> usize {
    500
}
fn default_eta() -> f64 {
    1e-2
}

impl AggregationMethod {
    pub const NAMES: [&'static str; 4] = ["fedavg", "kl", "w2", "mmd"];

    /// Parses a method name, using default MMD settings.
    pub fn from_name(name: &str) -> Result<Self> {
        match name.to_ascii_lowercase().as_str() {
            "fedavg" => Ok(Self::FedAvg),
            "kl" => Ok(Self::Kl),
            "w2" => Ok(Self::W2),
            "mmd" => Ok(Self::mmd_default()),
            other => Err(Error::invalid(format!(
                "unknown aggregation method `{other}` (expected one of {})",
                Self::NAMES.join(", ")
            ))),
        }
    }

    pub fn mmd_default() -> Self {
        Self::Mmd { delta: default_delta(), steps: default_steps(), eta: default_eta() }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::FedAvg => "fedavg",
            Self::Kl => "kl",
            Self::W2 => "w2",
            Self::Mmd { .. } => "mmd",
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Self::Mmd { delta, steps, eta } = *self {
            if !(delta > 0.0 && delta.is_finite()) {
                return Err(Error::invalid(format!("mmd delta must be positive, got {delta}")));
            }
            if steps == 0 || !(eta > 0.0 && eta.is_finite()) {
                return Err(Error::invalid("mmd needs at least one step and a positive step size"));
            }
        }
        Ok(())
    }
}

/// Applies `method` over the participating clients.
pub fn aggregate(phis: &[DiagGaussian], method: &AggregationMethod) -> Result<DiagGaussian> {
    method.validate()?;
    match *method {
        AggregationMethod::FedAvg => aggregate_fedavg(phis),
        AggregationMethod::Kl => aggregate_kl(phis),
        AggregationMethod::W2 => aggregate_w2(phis),
        AggregationMethod::Mmd { delta, steps, eta } => aggregate_mmd(phis, delta, steps, eta),
    }
}

fn check(phis: &[DiagGaussian]) -> Result<usize> {
    let first = phis.first().ok_or_else(|| Error::invalid("no client distributions to aggregate"))?;
    for p in &phis[1..] {
        first.check_same_dim(p)?;
    }
    Ok(first.dim())
}

/// `(mean_c, var_c)` at coordinate `d`, sorted.
fn column(phis: &[DiagGaussian], d: usize) -> Vec<(f64, f64)> {
    let mut col: Vec<(f64, f64)> = phis.iter().map(|p| (p.mean()[d], p.var()[d])).collect();
    col.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    col
}

/// Mean that is exact when all values are equal.
fn shifted_mean(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let mut it = values.clone();
    let first = it.next().unwrap_or(0.0);
    let n = values.count() as f64;
    first + it.map(|v| v - first).sum::<f64>() / n
}

fn clamp_var(v: f64, what: &str, d: usize) -> f64 {
    if v < VARIANCE_CLAMP {
        log::warn!("{what}: variance {v:e} at coordinate {d} clamped to {VARIANCE_CLAMP:e}");
        VARIANCE_CLAMP
    } else {
        v
    }
}

/// Averages means and variances.
pub fn aggregate_fedavg(phis: &[DiagGaussian]) -> Result<DiagGaussian> {
    let dim = check(phis)?;
    let (mut mean, mut var) = (Vec::with_capacity(dim), Vec::with_capacity(dim));
    for d in 0..dim {
        let col = column(phis, d);
        mean.push(shifted_mean(col.iter().map(|c| c.0)));
        let mut vars: Vec<f64> = col.iter().map(|c| c.1).collect();
        vars.sort_by(f64::total_cmp);
        var.push(shifted_mean(vars.iter().copied()));
    }
    DiagGaussian::new(mean, var)
}

/// Minimiser of `sum_c KL(q_c || p)`: `mu = mean(r)`,
/// `sigma^2 = mean(delta^2 + r^2 - mu^2) = mean(delta^2) + var(r)`.
pub fn aggregate_kl(phis: &[DiagGaussian]) -> Result<DiagGaussian> {
    let dim = check(phis)?;
    let n = phis.len() as f64;
    let (mut mean, mut var) = (Vec::with_capacity(dim), Vec::with_capacity(dim));
    for d in 0..dim {
        let col = column(phis, d);
        let mu = shifted_mean(col.iter().map(|c| c.0));
        let mut vars: Vec<f64> = col.iter().map(|c| c.1).collect();
        vars.sort_by(f64::total_cmp);
        let mean_var = shifted_mean(vars.iter().copied());
        let spread = col.iter().map(|c| (c.0 - mu).powi(2)).sum::<f64>() / n;
        let v = mean_var + spread;
        let direct = col.iter().map(|c| c.1 + c.0 * c.0 - mu * mu).sum::<f64>() / n;
        let scale = col.iter().map(|c| c.1 + c.0 * c.0).fold(1.0f64, f64::max);
        if (v - direct).abs() > 1e-12 * scale {
            return Err(Error::NonFinite {
                term: format!("kl aggregation forms disagree at coordinate {d}: {v} vs {direct}"),
            });
        }
        mean.push(mu);
        var.push(clamp_var(v, "kl aggregation", d));
    }
    DiagGaussian::new(mean, var)
}

/// Minimiser of `sum_c W2(q_c, p)^2`: `mu = mean(r)`, `sigma = mean(delta)`.
pub fn aggregate_w2(phis: &[DiagGaussian]) -> Result<DiagGaussian> {
    let dim = check(phis)?;
    let (mut mean, mut var) = (Vec::with_capacity(dim), Vec::with_capacity(dim));
    for d in 0..dim {
        let col = column(phis, d);
        mean.push(shifted_mean(col.iter().map(|c| c.0)));
        let mut sds: Vec<f64> = col.iter().map(|c| c.1.sqrt()).collect();
        sds.sort_by(f64::total_cmp);
        let identical = col.iter().all(|c| c.1 == col[0].1);
        let v = if identical { col[0].1 } else { shifted_mean(sds.iter().copied()).powi(2) };
        var.push(clamp_var(v, "w2 aggregation", d));
    }
    DiagGaussian::new(mean, var)
}

/// Per-coordinate MMD objective with the `theta`-free terms dropped:
/// `sum_c [ delta / sqrt(delta^2 + 4 s) - 2 delta exp(-(r_c - mu)^2 / a_c) / sqrt(a_c) ]`
/// with `a_c = delta^2 + 2 v_c + 2 s`, and its gradient in `(mu, log s)`.
pub fn mmd_objective(clients: &[(f64, f64)], mu: f64, log_s: f64, delta: f64) -> (f64, f64, f64) {
    let s = log_s.exp();
    let d2 = delta * delta;
    let mut f = 0.0;
    let (mut g_mu, mut g_s) = (0.0, 0.0);
    for &(r, v) in clients {
        let b = d2 + 4.0 * s;
        f += delta / b.sqrt();
        g_s += -2.0 * delta * b.powf(-1.5);
        let a = d2 + 2.0 * v + 2.0 * s;
        let diff = r - mu;
        let e = (-diff * diff / a).exp();
        let term = -2.0 * delta * e / a.sqrt();
        f += term;
        g_mu += term * 2.0 * diff / a;
        // d/ds of exp(-x^2/a)/sqrt(a) with da/ds = 2
        g_s += term * (2.0 * diff * diff / (a * a) - 1.0 / a);
    }
    (f, g_mu, g_s * s)
}

/// Gradient descent on `(mu, log sigma^2)` per coordinate from the KL
/// solution; a step that increases the objective is rejected and the step
/// size halved, an accepted step grows it by [`STEP_GROWTH`]. Returns the
/// best iterate.
pub fn aggregate_mmd(phis: &[DiagGaussian], delta: f64, steps: usize, eta: f64) -> Result<DiagGaussian> {
    AggregationMethod::Mmd { delta, steps, eta }.validate()?;
    let warm = aggregate_kl(phis)?;
    let dim = warm.dim();
    let (mut mean, mut var) = (Vec::with_capacity(dim), Vec::with_capacity(dim));
    for d in 0..dim {
        let col = column(phis, d);
        let (mut mu, mut ls) = (warm.mean()[d], warm.var()[d].ln());
        let (mut f, mut g_mu, mut g_ls) = mmd_objective(&col, mu, ls, delta);
        let mut step = eta;
        for _ in 0..steps {
            let (nm, nl) = (mu - step * g_mu, ls - step * g_ls);
            let (nf, ngm, ngl) = mmd_objective(&col, nm, nl, delta);
            if !nf.is_finite() {
                return Err(Error::NonFinite { term: format!("mmd objective at coordinate {d}") });
            }
            if nf <= f {
                (mu, ls, f, g_mu, g_ls) = (nm, nl, nf, ngm, ngl);
                step *= STEP_GROWTH;
            } else {
                step *= 0.5;
            }
        }
        mean.push(mu);
        var.push(clamp_var(ls.exp(), "mmd aggregation", d));
    }
    DiagGaussian::new(mean, var)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn g(m: &[f64], v: &[f64]) -> DiagGaussian {
        DiagGaussian::new(m.to_vec(), v.to_vec()).unwrap()
    }

    #[test]
    fn two_client_fixtures() {
        let a = [g(&[0.0], &[1.0]), g(&[2.0], &[1.0])];
        let f = aggregate_fedavg(&a).unwrap();
        assert_eq!((f.mean()[0], f.var()[0]), (1.0, 1.0));
        let k = aggregate_kl(&a).unwrap();
        assert_eq!((k.mean()[0], k.var()[0]), (1.0, 2.0));
        let b = [g(&[0.0], &[1.0]), g(&[0.0], &[9.0])];
        let w = aggregate_w2(&b).unwrap();
        assert_eq!((w.mean()[0], w.var()[0]), (0.0, 4.0));
        assert_eq!(aggregate_kl(&b).unwrap().var()[0], 5.0);
    }

    #[test]
    fn identity_and_errors() {
        let p = g(&[0.3, -1.7, 2.2], &[0.1, 0.7, 3.3]);
        let same = vec![p.clone(); 3];
        for m in [AggregationMethod::FedAvg, AggregationMethod::Kl, AggregationMethod::W2] {
            assert_eq!(aggregate(&same, &m).unwrap(), p);
            assert_eq!(aggregate(&[p.clone()], &m).unwrap(), p);
        }
        assert!(aggregate_kl(&[]).is_err());
        assert!(aggregate_kl(&[p.clone(), g(&[0.0], &[1.0])]).is_err());
        assert!(AggregationMethod::from_name("median").unwrap_err().to_string().contains("fedavg"));
    }

    #[test]
    fn mmd_gradient_matches_differences() {
        let clients = [(-1.0, 1.0), (0.5, 0.3), (2.0, 2.0)];
        let (_, gm, gs) = mmd_objective(&clients, 0.2, 0.1, 0.8);
        let h = 1e-6;
        let fm = (mmd_objective(&clients, 0.2 + h, 0.1, 0.8).0 - mmd_objective(&clients, 0.2 - h, 0.1, 0.8).0) / (2.0 * h);
        let fs = (mmd_objective(&clients, 0.2, 0.1 + h, 0.8).0 - mmd_objective(&clients, 0.2, 0.1 - h, 0.8).0) / (2.0 * h);
        assert!((gm - fm).abs() < 1e-7 && (gs - fs).abs() < 1e-7, "{gm} {fm} {gs} {fs}");
    }

    #[test]
    fn mmd_symmetric_inputs_centre() {
        let a = [g(&[-1.0], &[1.0]), g(&[1.0], &[1.0])];
        let m = aggregate_mmd(&a, 1.0, 500, 1e-2).unwrap();
        assert!(m.mean()[0].abs() < 1e-6);
    }

    #[test]
    fn method_names_round_trip() {
        for n in AggregationMethod::NAMES {
            assert_eq!(AggregationMethod::from_name(n).unwrap().name(), n);
        }
        let t: AggregationMethod = toml::from_str("kind = \"mmd\"\ndelta = 2.0").unwrap();
        assert_eq!(t, AggregationMethod::Mmd { delta: 2.0, steps: 500, eta: 1e-2 });
    }
}
