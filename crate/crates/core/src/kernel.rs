//! Deep RBF kernel: a small neural feature map applied to (normalised) time,
//! followed by `r * exp(-|h_i - h_j|^2 / (2 l^2))`.
//!
//! Parameters are packed into one flat vector so the variational
//! distribution over them is a single diagonal Gaussian. The layout is
//! fixed (see [`PACKING_VERSION`]): row-major `W1`, `b1`, row-major `W2`,
//! `b2`, `log_r`, `log_l`.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Version tag written next to serialised parameter vectors.
pub const PACKING_VERSION: &str = "dk-tanh-v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderKind {
    /// Feeds `t / horizon` straight into the network.
    TimeFeature,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Tanh,
}

/// Shape of the feature network: `1 -> hidden_dim -> output_dim`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderSpec {
    pub kind: EncoderKind,
    pub hidden_dim: usize,
    pub output_dim: usize,
    pub activation: Activation,
}

impl Default for EncoderSpec {
    fn default() -> Self {
        Self {
            kind: EncoderKind::TimeFeature,
            hidden_dim: 32,
            output_dim: 8,
            activation: Activation::Tanh,
        }
    }
}

impl EncoderSpec {
    pub fn new(hidden_dim: usize, output_dim: usize) -> Result<Self> {
        let spec = Self {
            hidden_dim,
            output_dim,
            ..Self::default()
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 || self.output_dim == 0 {
            return Err(Error::invalid("encoder dimensions must be at least 1"));
        }
        Ok(())
    }

    /// Number of network weights and biases (excludes `log_r`, `log_l`).
    pub fn network_params(&self) -> usize {
        2 * self.hidden_dim + self.output_dim * self.hidden_dim + self.output_dim
    }

    /// Total packed length.
    pub fn packed_len(&self) -> usize {
        self.network_params() + 2
    }

    fn offsets(&self) -> Offsets {
        let h = self.hidden_dim;
        let o = self.output_dim;
        let w1 = 0;
        let b1 = w1 + h;
        let w2 = b1 + h;
        let b2 = w2 + o * h;
        let log_r = b2 + o;
        Offsets { w1, b1, w2, b2, log_r, log_l: log_r + 1 }
    }
}

#[derive(Debug, Clone, Copy)]
struct Offsets {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    log_r: usize,
    log_l: usize,
}

/// Flat kernel parameter vector `[network; log_r; log_l]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    packed: Vec<f64>,
}

impl KernelParams {
    pub fn from_packed(packed: Vec<f64>, spec: &EncoderSpec) -> Result<Self> {
        if packed.len() != spec.packed_len() {
            return Err(Error::DimensionMismatch {
                expected: spec.packed_len(),
                actual: packed.len(),
            });
        }
        if let Some(i) = packed.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("kernel parameter {i} is not finite")));
        }
        Ok(Self { packed })
    }

    /// Assembles from unpacked pieces.
    pub fn pack(
        spec: &EncoderSpec,
        w1: &[f64],
        b1: &[f64],
        w2: &[f64],
        b2: &[f64],
        log_r: f64,
        log_l: f64,
    ) -> Result<Self> {
        let mut packed = Vec::with_capacity(spec.packed_len());
        packed.extend_from_slice(w1);
        packed.extend_from_slice(b1);
        packed.extend_from_slice(w2);
        packed.extend_from_slice(b2);
        packed.push(log_r);
        packed.push(log_l);
        Self::from_packed(packed, spec)
    }

    /// Deterministic initialisation: network weights and biases drawn from
    /// `N(0, 1/fan_in)`, `log_r = log_l = 0`.
    pub fn init(spec: &EncoderSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let off = spec.offsets();
        let mut packed = vec![0.0; spec.packed_len()];
        let hidden_scale = (1.0 / spec.hidden_dim as f64).sqrt();
        for (i, v) in packed[..off.log_r].iter_mut().enumerate() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v = if i < off.w2 { z } else { z * hidden_scale };
        }
        Self { packed }
    }

    pub fn packed(&self) -> &[f64] {
        &self.packed
    }

    pub fn into_packed(self) -> Vec<f64> {
        self.packed
    }

    pub fn len(&self) -> usize {
        self.packed.len()
    }

    pub fn is_empty(&self) -> bool {
        self.packed.is_empty()
    }

    pub fn log_r(&self) -> f64 {
        self.packed[self.packed.len() - 2]
    }

    pub fn log_l(&self) -> f64 {
        self.packed[self.packed.len() - 1]
    }

    pub fn scale(&self) -> f64 {
        self.log_r().exp()
    }

    pub fn length_scale(&self) -> f64 {
        self.log_l().exp()
    }
}

/// Embeddings of a set of times plus what backprop needs.
#[derive(Debug, Clone)]
pub struct Embedded {
    inputs: Vec<f64>,
    hidden: Vec<f64>,
    out: Vec<f64>,
    out_dim: usize,
    hidden_dim: usize,
}

impl Embedded {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn embedding(&self, i: usize) -> &[f64] {
        &self.out[i * self.out_dim..(i + 1) * self.out_dim]
    }

    fn hidden(&self, i: usize) -> &[f64] {
        &self.hidden[i * self.hidden_dim..(i + 1) * self.hidden_dim]
    }
}

/// Deep kernel over times on `[0, horizon]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeepKernel {
    pub spec: EncoderSpec,
    pub horizon: f64,
}

impl DeepKernel {
    pub fn new(spec: EncoderSpec, horizon: f64) -> Result<Self> {
        spec.validate()?;
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::invalid(format!("kernel horizon must be positive, got {horizon}")));
        }
        Ok(Self { spec, horizon })
    }

    fn check(&self, w: &KernelParams) -> Result<()> {
        if w.len() != self.spec.packed_len() {
            return Err(Error::DimensionMismatch {
                expected: self.spec.packed_len(),
                actual: w.len(),
            });
        }
        Ok(())
    }

    /// Feature map `W2 tanh(W1 [t / horizon] + b1) + b2`.
    pub fn embed(&self, t: f64, w: &KernelParams) -> Result<Vec<f64>> {
        self.check(w)?;
        if !t.is_finite() {
            return Err(Error::invalid("embedding input must be finite"));
        }
        Ok(self.embed_many(&[t], w).out)
    }

    pub fn embed_many(&self, times: &[f64], w: &KernelParams) -> Embedded {
        let h = self.spec.hidden_dim;
        let o = self.spec.output_dim;
        let off = self.spec.offsets();
        let p = &w.packed;
        let mut hidden = Vec::with_capacity(times.len() * h);
        let mut out = Vec::with_capacity(times.len() * o);
        let inputs: Vec<f64> = times.iter().map(|t| t / self.horizon).collect();
        for &x in &inputs {
            let start = hidden.len();
            for k in 0..h {
                hidden.push((p[off.w1 + k] * x + p[off.b1 + k]).tanh());
            }
            let a = &hidden[start..];
            for j in 0..o {
                let row = &p[off.w2 + j * h..off.w2 + (j + 1) * h];
                let dot: f64 = row.iter().zip(a).map(|(w, a)| w * a).sum();
                out.push(dot + p[off.b2 + j]);
            }
        }
        Embedded {
            inputs,
            hidden,
            out,
            out_dim: o,
            hidden_dim: h,
        }
    }

    /// Kernel value between two embedded points.
    #[inline]
    fn k_embedded(&self, a: &[f64], b: &[f64], scale: f64, inv_two_l2: f64) -> f64 {
        let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
        scale * (-d2 * inv_two_l2).exp()
    }

    pub fn eval(&self, ti: f64, tj: f64, w: &KernelParams) -> Result<f64> {
        self.check(w)?;
        let e = self.embed_many(&[ti, tj], w);
        let l = w.length_scale();
        Ok(self.k_embedded(e.embedding(0), e.embedding(1), w.scale(), 0.5 / (l * l)))
    }

    pub fn matrix(&self, a: &[f64], b: &[f64], w: &KernelParams) -> Result<DMatrix<f64>> {
        self.check(w)?;
        let ea = self.embed_many(a, w);
        let eb = self.embed_many(b, w);
        Ok(self.cross(&ea, &eb, w))
    }

    /// Cross-covariance between two embedded sets.
    pub fn cross(&self, a: &Embedded, b: &Embedded, w: &KernelParams) -> DMatrix<f64> {
        let l = w.length_scale();
        let inv = 0.5 / (l * l);
        let s = w.scale();
        DMatrix::from_fn(a.len(), b.len(), |i, j| {
            self.k_embedded(a.embedding(i), b.embedding(j), s, inv)
        })
    }

    /// Square Gram matrix of one embedded set; symmetric by construction.
    pub fn gram(&self, a: &Embedded, w: &KernelParams) -> DMatrix<f64> {
        let l = w.length_scale();
        let inv = 0.5 / (l * l);
        let s = w.scale();
        let n = a.len();
        let mut m = DMatrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = s;
            for j in 0..i {
                let v = self.k_embedded(a.embedding(i), a.embedding(j), s, inv);
                m[(i, j)] = v;
                m[(j, i)] = v;
            }
        }
        m
    }

    /// Sub-block `rows x cols` of the Gram matrix of one embedded set.
    pub(crate) fn block(
        &self,
        e: &Embedded,
        rows: std::ops::Range<usize>,
        cols: std::ops::Range<usize>,
        w: &KernelParams,
    ) -> DMatrix<f64> {
        let l = w.length_scale();
        let inv = 0.5 / (l * l);
        let s = w.scale();
        DMatrix::from_fn(rows.len(), cols.len(), |i, j| {
            self.k_embedded(e.embedding(rows.start + i), e.embedding(cols.start + j), s, inv)
        })
    }

    /// Gradient of `kernel(ti, tj)` with respect to every packed parameter.
    pub fn grad(&self, ti: f64, tj: f64, w: &KernelParams) -> Result<Vec<f64>> {
        self.check(w)?;
        let e = self.embed_many(&[ti, tj], w);
        let k = self.cross(&e, &e, w)[(0, 1)];
        let mut acc = KernelGradAccumulator::new(self, &e);
        acc.add_pair(0, 1, 1.0, k, w);
        let mut g = vec![0.0; w.len()];
        acc.finish(w, &mut g);
        Ok(g)
    }
}

/// Accumulates `sum_pairs G_ij * d k(x_i, y_j) / d params` by collecting
/// gradients at the embeddings first and backpropagating through the
/// network once per point.
pub(crate) struct KernelGradAccumulator<'a> {
    kernel: &'a DeepKernel,
    points: &'a Embedded,
    d_emb: Vec<f64>,
    d_log_r: f64,
    d_log_l: f64,
}

impl<'a> KernelGradAccumulator<'a> {
    pub(crate) fn new(kernel: &'a DeepKernel, points: &'a Embedded) -> Self {
        Self {
            kernel,
            d_emb: vec![0.0; points.out.len()],
            points,
            d_log_r: 0.0,
            d_log_l: 0.0,
        }
    }

    /// Adds `g * d k(p_i, p_j)`; `k` is the kernel value at the pair.
    pub(crate) fn add_pair(&mut self, i: usize, j: usize, g: f64, k: f64, w: &KernelParams) {
        if g == 0.0 {
            return;
        }
        let l = w.length_scale();
        let inv_l2 = 1.0 / (l * l);
        let o = self.points.out_dim;
        let gk = g * k;
        self.d_log_r += gk;
        let mut d2 = 0.0;
        for c in 0..o {
            let diff = self.points.out[i * o + c] - self.points.out[j * o + c];
            d2 += diff * diff;
            let t = gk * diff * inv_l2;
            self.d_emb[i * o + c] -= t;
            self.d_emb[j * o + c] += t;
        }
        self.d_log_l += gk * d2 * inv_l2;
    }

    /// Adds a gradient on `log_r` alone (diagonal terms `k(t, t) = r`).
    pub(crate) fn add_log_r(&mut self, g: f64) {
        self.d_log_r += g;
    }

    /// Backpropagates through the feature network and adds into `grad`.
    pub(crate) fn finish(self, w: &KernelParams, grad: &mut [f64]) {
        let spec = &self.kernel.spec;
        let off = spec.offsets();
        let h = spec.hidden_dim;
        let o = spec.output_dim;
        let p = &w.packed;
        let mut d_hidden = vec![0.0; h];
        for n in 0..self.points.len() {
            let de = &self.d_emb[n * o..(n + 1) * o];
            if de.iter().all(|v| *v == 0.0) {
                continue;
            }
            let a = self.points.hidden(n);
            let x = self.points.inputs[n];
            d_hidden.iter_mut().for_each(|v| *v = 0.0);
            for j in 0..o {
                let dj = de[j];
                grad[off.b2 + j] += dj;
                let row = off.w2 + j * h;
                for k in 0..h {
                    grad[row + k] += dj * a[k];
                    d_hidden[k] += dj * p[row + k];
                }
            }
            for k in 0..h {
                let dpre = d_hidden[k] * (1.0 - a[k] * a[k]);
                grad[off.w1 + k] += dpre * x;
                grad[off.b1 + k] += dpre;
            }
        }
        grad[off.log_r] += self.d_log_r;
        grad[off.log_l] += self.d_log_l;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn small() -> (DeepKernel, KernelParams) {
        let spec = EncoderSpec::new(5, 3).unwrap();
        let k = DeepKernel::new(spec, 10.0).unwrap();
        let mut w = KernelParams::init(&spec, 3).into_packed();
        let n = w.len();
        w[n - 2] = 0.4;
        w[n - 1] = -0.3;
        (k, KernelParams::from_packed(w, &spec).unwrap())
    }

    /// Straight-line two-layer network, independent of `embed_many`.
    fn embed_oracle(spec: &EncoderSpec, packed: &[f64], x: f64) -> Vec<f64> {
        let (h, o) = (spec.hidden_dim, spec.output_dim);
        let w1 = &packed[0..h];
        let b1 = &packed[h..2 * h];
        let w2 = &packed[2 * h..2 * h + o * h];
        let b2 = &packed[2 * h + o * h..2 * h + o * h + o];
        let mut hid = vec![0.0; h];
        for k in 0..h {
            hid[k] = (w1[k] * x + b1[k]).tanh();
        }
        let mut out = vec![0.0; o];
        for j in 0..o {
            let mut s = b2[j];
            for k in 0..h {
                s += w2[j * h + k] * hid[k];
            }
            out[j] = s;
        }
        out
    }

    fn kernel_oracle(spec: &EncoderSpec, packed: &[f64], horizon: f64, a: f64, b: f64) -> f64 {
        let ea = embed_oracle(spec, packed, a / horizon);
        let eb = embed_oracle(spec, packed, b / horizon);
        let d2: f64 = ea.iter().zip(&eb).map(|(x, y)| (x - y).powi(2)).sum();
        let n = packed.len();
        let r = packed[n - 2].exp();
        let l = packed[n - 1].exp();
        r * (-d2 / (2.0 * l * l)).exp()
    }

    #[test]
    fn zero_weights_embed_to_zero() {
        let spec = EncoderSpec::new(4, 2).unwrap();
        let k = DeepKernel::new(spec, 1.0).unwrap();
        let w = KernelParams::from_packed(vec![0.0; spec.packed_len()], &spec).unwrap();
        for t in [0.0, 0.3, 1.0, 7.0] {
            assert_eq!(k.embed(t, &w).unwrap(), vec![0.0, 0.0]);
        }
    }

    #[test]
    fn identity_like_net() {
        let spec = EncoderSpec::new(1, 1).unwrap();
        let k = DeepKernel::new(spec, 1.0).unwrap();
        let w = KernelParams::pack(&spec, &[1.0], &[0.0], &[1.0], &[0.0], 0.0, 0.0).unwrap();
        assert_eq!(k.embed(0.0, &w).unwrap(), vec![0.0]);
        assert!((k.embed(0.5, &w).unwrap()[0] - 0.5f64.tanh()).abs() < 1e-15);
    }

    #[test]
    fn embed_matches_oracle() {
        let (k, w) = small();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let t = rng.random_range(0.0..10.0);
            let got = k.embed(t, &w).unwrap();
            let want = embed_oracle(&k.spec, w.packed(), t / 10.0);
            for (g, e) in got.iter().zip(&want) {
                assert!((g - e).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn embed_rejects_wrong_length() {
        let (k, _) = small();
        let spec = EncoderSpec::new(2, 2).unwrap();
        let w = KernelParams::init(&spec, 0);
        assert!(k.embed(0.1, &w).is_err());
    }

    #[test]
    fn eval_properties() {
        let (k, w) = small();
        assert_eq!(k.eval(3.0, 3.0, &w).unwrap(), w.scale());
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let a = rng.random_range(0.0..10.0);
            let b = rng.random_range(0.0..10.0);
            let v = k.eval(a, b, &w).unwrap();
            assert_eq!(v, k.eval(b, a, &w).unwrap());
            assert!(v > 0.0 && v <= w.scale());
            assert!((v - kernel_oracle(&k.spec, w.packed(), 10.0, a, b)).abs() < 1e-13);
        }
    }

    #[test]
    fn long_length_scale_saturates() {
        let (k, w) = small();
        let mut p = w.into_packed();
        let n = p.len();
        p[n - 1] = 30.0;
        let w = KernelParams::from_packed(p, &k.spec).unwrap();
        assert!((k.eval(0.0, 9.0, &w).unwrap() - w.scale()).abs() < 1e-12);
    }

    #[test]
    fn matrix_shapes_and_symmetry() {
        let (k, w) = small();
        let one = k.matrix(&[2.0], &[2.0], &w).unwrap();
        assert_eq!(one.shape(), (1, 1));
        assert_eq!(one[(0, 0)], w.scale());
        let a = [0.5, 1.0, 2.5, 4.0, 9.0];
        let b = [0.1, 3.3, 7.7];
        let ab = k.matrix(&a, &b, &w).unwrap();
        let ba = k.matrix(&b, &a, &w).unwrap();
        assert_eq!(ab, ba.transpose());
        let sq = k.matrix(&b, &b, &w).unwrap();
        let eig = nalgebra::SymmetricEigen::new(sq).eigenvalues;
        assert!(eig.min() >= -1e-8);
    }

    #[test]
    fn grad_log_r_equals_value() {
        let (k, w) = small();
        let g = k.grad(1.0, 6.0, &w).unwrap();
        let v = k.eval(1.0, 6.0, &w).unwrap();
        assert!((g[g.len() - 2] - v).abs() < 1e-14);
    }

    #[test]
    fn grad_at_coincident_points() {
        let (k, w) = small();
        let g = k.grad(4.0, 4.0, &w).unwrap();
        let n = g.len();
        assert!((g[n - 2] - w.scale()).abs() < 1e-14);
        assert!(g[..n - 2].iter().chain(&g[n - 1..]).all(|v| *v == 0.0));
    }

    #[test]
    fn grad_matches_finite_differences() {
        let spec = EncoderSpec::new(6, 4).unwrap();
        let k = DeepKernel::new(spec, 5.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for trial in 0..100 {
            let mut p = KernelParams::init(&spec, trial).into_packed();
            let n = p.len();
            p[n - 2] = rng.random_range(-1.0..1.0);
            p[n - 1] = rng.random_range(-1.5..0.5);
            let w = KernelParams::from_packed(p.clone(), &spec).unwrap();
            let (a, b) = (rng.random_range(0.0..5.0), rng.random_range(0.0..5.0));
            let g = k.grad(a, b, &w).unwrap();
            let h = 1e-5;
            for i in 0..n {
                let mut hi = p.clone();
                let mut lo = p.clone();
                hi[i] += h;
                lo[i] -= h;
                let fd = (kernel_oracle(&spec, &hi, 5.0, a, b) - kernel_oracle(&spec, &lo, 5.0, a, b))
                    / (2.0 * h);
                let err = (g[i] - fd).abs();
                assert!(
                    err <= 1e-4 * fd.abs().max(g[i].abs()) || err <= 1e-8,
                    "trial {trial} param {i}: analytic {} fd {}",
                    g[i],
                    fd
                );
            }
        }
    }

    #[test]
    fn non_stationary() {
        let spec = EncoderSpec::default();
        let k = DeepKernel::new(spec, 1.0).unwrap();
        let w = KernelParams::init(&spec, 42);
        let v1 = k.eval(0.1, 0.2, &w).unwrap();
        let v2 = k.eval(0.6, 0.7, &w).unwrap();
        assert!((v1 - v2).abs() > 1e-9);
    }

    #[test]
    fn pack_round_trip() {
        let spec = EncoderSpec::new(3, 2).unwrap();
        let w = KernelParams::init(&spec, 1);
        let again = KernelParams::from_packed(w.packed().to_vec(), &spec).unwrap();
        assert_eq!(w, again);
        assert_eq!(spec.packed_len(), 3 + 3 + 6 + 2 + 2);
    }
}
