//! Diagonal Gaussians over a flat parameter vector and closed-form
//! divergences between them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A Gaussian with diagonal covariance. Holds both the server prior and the
/// per-client variational distribution over kernel parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawGaussian")]
pub struct DiagGaussian {
    mean: Vec<f64>,
    var: Vec<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGaussian {
    mean: Vec<f64>,
    var: Vec<f64>,
}

impl TryFrom<RawGaussian> for DiagGaussian {
    type Error = Error;

    fn try_from(raw: RawGaussian) -> Result<Self> {
        Self::new(raw.mean, raw.var)
    }
}

impl DiagGaussian {
    pub fn new(mean: Vec<f64>, var: Vec<f64>) -> Result<Self> {
        if mean.is_empty() {
            return Err(Error::invalid("gaussian dimension must be at least 1"));
        }
        if mean.len() != var.len() {
            return Err(Error::DimensionMismatch {
                expected: mean.len(),
                actual: var.len(),
            });
        }
        if let Some(i) = mean.iter().position(|m| !m.is_finite()) {
            return Err(Error::invalid(format!("mean[{i}] is not finite")));
        }
        if let Some(i) = var.iter().position(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::invalid(format!(
                "var[{i}] = {} must be positive and finite",
                var[i]
            )));
        }
        Ok(Self { mean, var })
    }

    /// Same mean, every variance set to `var`.
    pub fn isotropic(mean: Vec<f64>, var: f64) -> Result<Self> {
        let n = mean.len();
        Self::new(mean, vec![var; n])
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn var(&self) -> &[f64] {
        &self.var
    }

    pub fn std(&self) -> Vec<f64> {
        self.var.iter().map(|v| v.sqrt()).collect()
    }

    pub fn log_var(&self) -> Vec<f64> {
        self.var.iter().map(|v| v.ln()).collect()
    }

    /// Builds from mean and log-variance, the parameterisation used by the
    /// client optimiser.
    pub fn from_log_var(mean: Vec<f64>, log_var: &[f64]) -> Result<Self> {
        Self::new(mean, log_var.iter().map(|l| l.exp()).collect())
    }

    /// Reparameterised draw `mean + std * eps`.
    pub fn reparam(&self, eps: &[f64]) -> Vec<f64> {
        debug_assert_eq!(eps.len(), self.dim());
        self.mean
            .iter()
            .zip(&self.var)
            .zip(eps)
            .map(|((m, v), e)| m + v.sqrt() * e)
            .collect()
    }

    pub(crate) fn check_same_dim(&self, other: &Self) -> Result<()> {
        if self.dim() != other.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                actual: other.dim(),
            });
        }
        Ok(())
    }
}

/// KL(q || p) between diagonal Gaussians.
pub fn kl_diag(q: &DiagGaussian, p: &DiagGaussian) -> Result<f64> {
    q.check_same_dim(p)?;
    let kl = q
        .mean
        .iter()
        .zip(&q.var)
        .zip(p.mean.iter().zip(&p.var))
        .map(|((qm, qv), (pm, pv))| {
            let d = qm - pm;
            0.5 * ((qv + d * d) / pv - 1.0 + (pv / qv).ln())
        })
        .sum::<f64>();
    Ok(kl.max(0.0))
}

/// 2-Wasserstein distance between diagonal Gaussians.
pub fn w2_diag(q: &DiagGaussian, p: &DiagGaussian) -> Result<f64> {
    q.check_same_dim(p)?;
    let sq = q
        .mean
        .iter()
        .zip(&q.var)
        .zip(p.mean.iter().zip(&p.var))
        .map(|((qm, qv), (pm, pv))| {
            let dm = qm - pm;
            let ds = qv.sqrt() - pv.sqrt();
            dm * dm + ds * ds
        })
        .sum::<f64>();
    Ok(sq.sqrt())
}

/// `E[exp(-(x1 - x2)^2 / delta^2)]` for independent 1-D Gaussians.
pub fn rbf_cross_expectation(mu1: f64, var1: f64, mu2: f64, var2: f64, delta: f64) -> f64 {
    let s = delta * delta + 2.0 * var1 + 2.0 * var2;
    let d = mu1 - mu2;
    delta * (-d * d / s).exp() / s.sqrt()
}

/// Squared MMD under the RBF kernel `exp(-(x - y)^2 / delta^2)`, summed over
/// dimensions.
pub fn mmd_rbf(q: &DiagGaussian, p: &DiagGaussian, delta: f64) -> Result<f64> {
    if !(delta > 0.0 && delta.is_finite()) {
        return Err(Error::invalid(format!("mmd bandwidth must be positive, got {delta}")));
    }
    q.check_same_dim(p)?;
    let total = q
        .mean
        .iter()
        .zip(&q.var)
        .zip(p.mean.iter().zip(&p.var))
        .map(|((&qm, &qv), (&pm, &pv))| {
            rbf_cross_expectation(qm, qv, qm, qv, delta) + rbf_cross_expectation(pm, pv, pm, pv, delta)
                - 2.0 * rbf_cross_expectation(qm, qv, pm, pv, delta)
        })
        .sum();
    Ok(total)
}
