//! Moments of the Pólya-Gamma distribution PG(1, c).

use crate::error::{Error, Result};

/// Below this `c` the closed form loses precision to 0/0 and the Taylor
/// series is used instead.
pub const PG_SERIES_THRESHOLD: f64 = 1e-4;

/// `E[xi]` for `xi ~ PG(1, c)`, i.e. `tanh(c/2) / (2c)`.
pub fn pg_mean(c: f64) -> Result<f64> {
    if c.is_nan() || c < 0.0 {
        return Err(Error::invalid(format!("Pólya-Gamma tilt must be nonnegative, got {c}")));
    }
    Ok(pg_mean_unchecked(c))
}

#[inline]
pub(crate) fn pg_mean_unchecked(c: f64) -> f64 {
    if c < PG_SERIES_THRESHOLD {
        let c2 = c * c;
        0.25 - c2 / 48.0 + c2 * c2 / 480.0
    } else {
        (0.5 * c).tanh() / (2.0 * c)
    }
}

/// `ln cosh(x)` without overflow for large `|x|`.
#[inline]
pub fn log_cosh(x: f64) -> f64 {
    let a = x.abs();
    a + (-2.0 * a).exp().ln_1p() - std::f64::consts::LN_2
}

/// Logistic sigmoid.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
