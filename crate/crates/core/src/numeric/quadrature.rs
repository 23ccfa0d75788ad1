//! Quadrature rules: trapezoid grids on an interval and Gauss-Hermite nodes
//! for Gaussian expectations.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Uniform trapezoid rule on `[start, end]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadratureGrid {
    nodes: Vec<f64>,
    weights: Vec<f64>,
    start: f64,
    end: f64,
}

impl QuadratureGrid {
    pub fn on_interval(start: f64, end: f64, q: usize) -> Result<Self> {
        if !(start.is_finite() && end.is_finite() && end > start) {
            return Err(Error::invalid(format!("empty quadrature interval [{start}, {end}]")));
        }
        if q < 2 {
            return Err(Error::invalid(format!("quadrature needs at least 2 nodes, got {q}")));
        }
        let h = (end - start) / (q - 1) as f64;
        let nodes = (0..q)
            .map(|i| if i == q - 1 { end } else { start + h * i as f64 })
            .collect();
        let mut weights = vec![h; q];
        weights[0] = 0.5 * h;
        weights[q - 1] = 0.5 * h;
        Ok(Self { nodes, weights, start, end })
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn start(&self) -> f64 {
        self.start
    }

    pub fn end(&self) -> f64 {
        self.end
    }

    pub fn length(&self) -> f64 {
        self.end - self.start
    }

    /// Integrates values given at the nodes.
    pub fn integrate(&self, values: &[f64]) -> f64 {
        debug_assert_eq!(values.len(), self.nodes.len());
        self.weights.iter().zip(values).map(|(w, v)| w * v).sum()
    }
}

/// Trapezoid grid on `[0, horizon]` with `q` nodes.
pub fn trapezoid_grid(horizon: f64, q: usize) -> Result<QuadratureGrid> {
    QuadratureGrid::on_interval(0.0, horizon, q)
}

/// Gauss-Hermite rule for the weight `exp(-x^2)`.
#[derive(Debug, Clone)]
pub struct GaussHermite {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl GaussHermite {
    /// Nodes by Newton iteration on the orthonormal Hermite recurrence.
    pub fn new(n: usize) -> Self {
        assert!(n >= 1, "Gauss-Hermite order must be positive");
        let pim4 = std::f64::consts::PI.powf(-0.25);
        let mut x = vec![0.0; n];
        let mut w = vec![0.0; n];
        let m = n.div_ceil(2);
        let nf = n as f64;
        let mut z = 0.0f64;
        for i in 0..m {
            z = match i {
                0 => (2.0 * nf + 1.0).sqrt() - 1.85575 * (2.0 * nf + 1.0).powf(-1.0 / 6.0),
                1 => z - 1.14 * nf.powf(0.426) / z,
                2 => 1.86 * z - 0.86 * x[0],
                3 => 1.91 * z - 0.91 * x[1],
                _ => 2.0 * z - x[i - 2],
            };
            let mut pp = 0.0;
            for _ in 0..100 {
                let mut p1 = pim4;
                let mut p2 = 0.0;
                for j in 0..n {
                    let p3 = p2;
                    p2 = p1;
                    let jf = j as f64;
                    p1 = z * (2.0 / (jf + 1.0)).sqrt() * p2 - (jf / (jf + 1.0)).sqrt() * p3;
                }
                pp = (2.0 * nf).sqrt() * p2;
                let z1 = z;
                z = z1 - p1 / pp;
                if (z - z1).abs() <= 1e-15 {
                    break;
                }
            }
            x[i] = z;
            x[n - 1 - i] = -z;
            w[i] = 2.0 / (pp * pp);
            w[n - 1 - i] = w[i];
        }
        // ascending order
        x.reverse();
        w.reverse();
        Self { nodes: x, weights: w }
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// `E[g(f)]` for `f ~ N(mean, var)`.
    pub fn expect<F: Fn(f64) -> f64>(&self, mean: f64, var: f64, g: F) -> f64 {
        let s = (2.0 * var.max(0.0)).sqrt();
        let norm = std::f64::consts::PI.sqrt().recip();
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(x, w)| w * g(mean + s * x))
            .sum::<f64>()
            * norm
    }
}
