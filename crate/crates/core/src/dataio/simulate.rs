//! Sigmoidal Gaussian Cox process sampling by thinning.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use super::EventSequence;
use crate::error::{Error, Result};
use crate::kernel::{DeepKernel, KernelParams};
use crate::numeric::linalg::symmetrize;
use crate::numeric::{sigmoid, SpdFactor, SpdMatrix};

/// Nodes of the ground-truth intensity grid.
pub const TRUTH_GRID: usize = 512;
/// Candidates drawn jointly given the grid; larger sets are split.
pub const CANDIDATE_BLOCK: usize = 4096;

/// Covariance of the latent function.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum GroundTruth {
    /// `variance * exp(-(s - t)^2 / (2 length_scale^2))` on raw time.
    Rbf { variance: f64, length_scale: f64 },
    Deep { kernel: DeepKernel, params: KernelParams },
}

impl GroundTruth {
    fn validate(&self) -> Result<()> {
        match self {
            GroundTruth::Rbf { variance, length_scale } => {
                if !(*variance > 0.0 && *length_scale > 0.0) {
                    return Err(Error::invalid(format!(
                        "RBF variance {variance} and length scale {length_scale} must be positive"
                    )));
                }
            }
            GroundTruth::Deep { kernel, params } => {
                KernelParams::from_packed(params.packed().to_vec(), &kernel.spec)?;
            }
        }
        Ok(())
    }

    fn matrix(&self, a: &[f64], b: &[f64]) -> Result<DMatrix<f64>> {
        match self {
            GroundTruth::Rbf { variance, length_scale } => {
                let inv = 0.5 / (length_scale * length_scale);
                Ok(DMatrix::from_fn(a.len(), b.len(), |i, j| {
                    variance * (-(a[i] - b[j]).powi(2) * inv).exp()
                }))
            }
            GroundTruth::Deep { kernel, params } => kernel.matrix(a, b, params),
        }
    }
}

/// One simulated dataset: sequences sharing a single draw of `f`, with the
/// intensity that generated them.
#[derive(Debug, Clone, PartialEq)]
pub struct Simulation {
    pub sequences: Vec<EventSequence>,
    pub grid: Vec<f64>,
    pub lambda: Vec<f64>,
}

impl Simulation {
    /// Trapezoid integral of the true intensity over the horizon.
    pub fn integrated_intensity(&self) -> f64 {
        self.grid
            .windows(2)
            .zip(self.lambda.windows(2))
            .map(|(t, l)| 0.5 * (t[1] - t[0]) * (l[0] + l[1]))
            .sum()
    }
}

enum Latent<'a> {
    Gp { truth: GroundTruth, grid_factor: SpdFactor },
    Fixed(Box<dyn Fn(f64) -> f64 + Send + Sync + 'a>),
}

/// Thinning sampler for `lambda(t) = m sigmoid(f(t))` on `[0, horizon]`.
///
/// Candidates come from a homogeneous Poisson process of rate `m`; each is
/// kept with probability `sigmoid(f)`. For a GP latent, `f` is drawn jointly
/// at the ground-truth grid and every candidate of every sequence.
pub struct Simulator<'a> {
    m: f64,
    horizon: f64,
    grid: Vec<f64>,
    latent: Latent<'a>,
}

impl<'a> Simulator<'a> {
    pub fn gp(m: f64, truth: GroundTruth, horizon: f64) -> Result<Self> {
        check_rate(m, horizon)?;
        truth.validate()?;
        let grid = truth_grid(horizon);
        let mut k = truth.matrix(&grid, &grid)?;
        symmetrize(&mut k);
        let grid_factor = SpdMatrix::new(k)?.factor("ground-truth grid covariance")?;
        Ok(Self { m, horizon, grid, latent: Latent::Gp { truth, grid_factor } })
    }

    pub fn fixed(m: f64, horizon: f64, f: impl Fn(f64) -> f64 + Send + Sync + 'a) -> Result<Self> {
        check_rate(m, horizon)?;
        Ok(Self { m, horizon, grid: truth_grid(horizon), latent: Latent::Fixed(Box::new(f)) })
    }

    /// Draws `n_seqs` sequences sharing one latent function.
    pub fn simulate(&self, n_seqs: usize, seed: u64) -> Result<Simulation> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let poisson = Poisson::new(self.m * self.horizon)
            .map_err(|e| Error::invalid(format!("candidate rate: {e}")))?;
        let candidates: Vec<Vec<f64>> = (0..n_seqs)
            .map(|_| {
                let n = poisson.sample(&mut rng) as usize;
                let mut t: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * self.horizon).collect();
                t.sort_by(f64::total_cmp);
                t
            })
            .collect();
        let flat: Vec<f64> = candidates.iter().flatten().copied().collect();
        let (f_grid, f_cand) = match &self.latent {
            Latent::Fixed(f) => (
                self.grid.iter().map(|t| f(*t)).collect::<Vec<_>>(),
                flat.iter().map(|t| f(*t)).collect::<Vec<_>>(),
            ),
            Latent::Gp { truth, grid_factor } => {
                self.draw_gp(truth, grid_factor, &flat, &mut rng)?
            }
        };
        let mut sequences = Vec::with_capacity(n_seqs);
        let mut k = 0;
        for cand in &candidates {
            let mut kept = Vec::new();
            for &t in cand {
                let u: f64 = rng.random();
                if u < sigmoid(f_cand[k]) {
                    kept.push(t);
                }
                k += 1;
            }
            sequences.push(EventSequence::unmarked(kept, self.horizon)?);
        }
        let lambda = f_grid.iter().map(|f| self.m * sigmoid(*f)).collect();
        Ok(Simulation { sequences, grid: self.grid.clone(), lambda })
    }

    fn draw_gp(
        &self,
        truth: &GroundTruth,
        grid_factor: &SpdFactor,
        cand: &[f64],
        rng: &mut ChaCha8Rng,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        let g = self.grid.len();
        let z = DVector::from_fn(g, |_, _| StandardNormal.sample(&mut *rng));
        let f_grid = grid_factor.l() * z;
        if cand.is_empty() {
            return Ok((f_grid.as_slice().to_vec(), Vec::new()));
        }
        // candidates | grid, in blocks so memory stays bounded
        let mut f_cand = Vec::with_capacity(cand.len());
        for block in cand.chunks(CANDIDATE_BLOCK) {
            let k_gc = truth.matrix(&self.grid, block)?;
            let a = grid_factor.solve_mat(&k_gc);
            let mean = a.tr_mul(&f_grid);
            let mut cov = truth.matrix(block, block)? - k_gc.tr_mul(&a);
            symmetrize(&mut cov);
            let n = block.len();
            let zc = DVector::from_fn(n, |_, _| StandardNormal.sample(&mut *rng));
            let noise = match SpdMatrix::new(cov.clone())?.factor("conditional candidate covariance") {
                Ok(f) => f.l() * zc,
                // numerically zero: the grid pins the candidates down
                Err(_) => DVector::from_fn(n, |i, _| cov[(i, i)].max(0.0).sqrt() * zc[i]),
            };
            f_cand.extend((mean + noise).iter());
        }
        Ok((f_grid.as_slice().to_vec(), f_cand))
    }
}

fn check_rate(m: f64, horizon: f64) -> Result<()> {
    if !(m > 0.0 && m.is_finite()) {
        return Err(Error::invalid(format!("intensity bound m must be positive, got {m}")));
    }
    if !(horizon > 0.0 && horizon.is_finite()) {
        return Err(Error::invalid(format!("horizon must be positive, got {horizon}")));
    }
    Ok(())
}

fn truth_grid(horizon: f64) -> Vec<f64> {
    (0..TRUTH_GRID)
        .map(|i| horizon * i as f64 / (TRUTH_GRID - 1) as f64)
        .collect()
}

/// One sequence from a GP latent. See [`Simulator`].
pub fn simulate_sgcp(m: f64, truth: GroundTruth, horizon: f64, seed: u64) -> Result<Simulation> {
    Simulator::gp(m, truth, horizon)?.simulate(1, seed)
}

/// Merges two sequences on the same horizon.
pub fn superpose(a: &EventSequence, b: &EventSequence) -> Result<EventSequence> {
    if a.horizon() != b.horizon() {
        return Err(Error::invalid(format!(
            "cannot superpose horizons {} and {}",
            a.horizon(),
            b.horizon()
        )));
    }
    let marks = match (a.marks(), b.marks()) {
        (Some(x), Some(y)) => Some((x, y)),
        (None, None) => None,
        _ => return Err(Error::invalid("cannot superpose marked and unmarked sequences")),
    };
    let mut idx: Vec<(f64, Option<u32>)> = Vec::with_capacity(a.len() + b.len());
    for (s, m) in [(a, marks.map(|m| m.0)), (b, marks.map(|m| m.1))] {
        idx.extend(s.times().iter().enumerate().map(|(i, &t)| (t, m.map(|m| m[i]))));
    }
    idx.sort_by(|x, y| x.0.total_cmp(&y.0));
    let times = idx.iter().map(|p| p.0).collect();
    let marks = marks.map(|_| idx.iter().map(|p| p.1.unwrap_or(0)).collect());
    EventSequence::new(times, marks, a.horizon())
}
