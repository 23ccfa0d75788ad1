//! Quantities derived from one draw of kernel parameters: Gram matrices
//! against the inducing locations, interpolation weights and the marginal
//! moments of `f` at a set of points.

use nalgebra::{DMatrix, DVector};

use super::{ClientState, InducingPosterior, VARIANCE_FLOOR};
use crate::error::Result;
use crate::kernel::{DeepKernel, Embedded, KernelGradAccumulator, KernelParams};
use crate::numeric::{SpdFactor, SpdMatrix};

pub(crate) struct View<'a> {
    kernel: &'a DeepKernel,
    pub(crate) w: &'a KernelParams,
    /// Inducing locations followed by the query points.
    emb: Embedded,
    pub(crate) m_ind: usize,
    /// Jittered inducing Gram matrix factor.
    pub(crate) factor: SpdFactor,
    pub(crate) kzz_jittered: DMatrix<f64>,
    /// `K(z, x)`, `M x N`.
    pub(crate) kzx: DMatrix<f64>,
    /// `Kzz^{-1} K(z, x)`.
    pub(crate) a: DMatrix<f64>,
    /// Prior variance `k(t, t) = r`.
    pub(crate) r: f64,
}

impl<'a> View<'a> {
    pub(crate) fn new(
        kernel: &'a DeepKernel,
        w: &'a KernelParams,
        locations: &[f64],
        points: &[f64],
    ) -> Result<Self> {
        let m_ind = locations.len();
        let all: Vec<f64> = locations.iter().chain(points).copied().collect();
        let emb = kernel.embed_many(&all, w);
        let mut kzz = kernel.block(&emb, 0..m_ind, 0..m_ind, w);
        crate::numeric::linalg::symmetrize(&mut kzz);
        let kzx = kernel.block(&emb, 0..m_ind, m_ind..all.len(), w);
        let factor = SpdMatrix::new(kzz.clone())?.factor("Kzz")?;
        let mut kzz_jittered = kzz;
        for i in 0..m_ind {
            kzz_jittered[(i, i)] += factor.jitter();
        }
        let a = factor.solve_mat(&kzx);
        Ok(Self {
            kernel,
            w,
            emb,
            m_ind,
            factor,
            kzz_jittered,
            kzx,
            a,
            r: w.scale(),
        })
    }

    pub(crate) fn n_points(&self) -> usize {
        self.kzx.ncols()
    }

    /// `Kzz^{-1} (mu_s - nu 1)`.
    pub(crate) fn alpha(&self, q_u: &InducingPosterior, nu: f64) -> DVector<f64> {
        let d = q_u.mean.map(|v| v - nu);
        self.factor.solve_vec(&d)
    }

    /// Marginal mean and (unclamped) variance of `f` at the query points.
    pub(crate) fn moments_raw(&self, q_u: &InducingPosterior, nu: f64) -> (Vec<f64>, Vec<f64>) {
        let alpha = self.alpha(q_u, nu);
        let mean = self.kzx.tr_mul(&alpha).map(|v| v + nu);
        let sa = &q_u.cov * &self.a;
        let n = self.n_points();
        let var = (0..n)
            .map(|t| {
                let at = self.a.column(t);
                self.r - self.kzx.column(t).dot(&at) + at.dot(&sa.column(t))
            })
            .collect();
        (mean.as_slice().to_vec(), var)
    }

    pub(crate) fn moments(&self, q_u: &InducingPosterior, nu: f64) -> (Vec<f64>, Vec<f64>) {
        let (mean, mut var) = self.moments_raw(q_u, nu);
        var.iter_mut().for_each(|v| *v = v.max(VARIANCE_FLOOR));
        (mean, var)
    }

    /// Backpropagates `dL/dKzz` (jittered, entries treated independently),
    /// `dL/dK(z, x)` and `dL/dr` (for `k(t, t)`) into a packed gradient.
    pub(crate) fn backprop(
        &self,
        g_kzz: &DMatrix<f64>,
        g_kzx: &DMatrix<f64>,
        g_r: f64,
        grad: &mut [f64],
    ) {
        let m = self.m_ind;
        let full = &self.kzz_jittered;
        let mut acc = KernelGradAccumulator::new(self.kernel, &self.emb);
        // diagonal: r + jitter, and the jitter is proportional to r
        let diag: f64 = (0..m).map(|i| g_kzz[(i, i)]).sum();
        acc.add_log_r(diag * full[(0, 0)].max(0.0) + g_r * self.r);
        for i in 0..m {
            for j in 0..i {
                let g = g_kzz[(i, j)] + g_kzz[(j, i)];
                acc.add_pair(i, j, g, full[(i, j)], self.w);
            }
        }
        for t in 0..self.n_points() {
            for i in 0..m {
                acc.add_pair(i, m + t, g_kzx[(i, t)], self.kzx[(i, t)], self.w);
            }
        }
        acc.finish(self.w, grad);
    }
}

/// Posterior mean and variance of `f` at `times` under `q(u)` with kernel
/// parameters `w`. Variances are floored at [`VARIANCE_FLOOR`].
pub fn posterior_f_moments(
    state: &ClientState,
    w: &KernelParams,
    times: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let view = View::new(&state.kernel, w, &state.q_u.locations, times)?;
    Ok(view.moments(&state.q_u, state.nu))
}
