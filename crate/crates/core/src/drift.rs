//! Drift coefficients `b(t, y, μ)` with declared regularity metadata.
//!
//! A drift sees the law `μ` only through [`LawStatistics`]: the mean, the
//! first moment `K(μ, δ₀)`, and the means of any extra kernels the drift
//! declares. The statistics are computed once per measure (O(N)) and then
//! shared by every particle evaluated against it.
//!
//! Time enters as the left endpoint of the Euler step.
//!
//! [`MollifiedDrift`] smooths a bounded drift in the spatial variable only, so
//! a Lipschitz constant in the law carries over from the base drift unchanged
//! for every smoothing index.

use std::fmt::Debug;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::measure_flow::{kantorovich_exact, norm, EmpiricalMeasure};
use crate::stats::pairwise_sum;
use crate::{Error, Result};

/// Law statistics a drift may read.
#[derive(Debug, Clone, PartialEq)]
pub struct LawStatistics {
    pub mean: Vec<f64>,
    /// `K(μ, δ₀)`.
    pub first_moment: f64,
    /// Means of the drift's own kernels, in declaration order.
    pub kernels: Vec<f64>,
}

impl LawStatistics {
    /// Statistics of the Dirac mass at `point`.
    pub fn point_mass(point: &[f64]) -> Self {
        LawStatistics {
            mean: point.to_vec(),
            first_moment: norm(point),
            kernels: Vec::new(),
        }
    }
}

/// Declared regularity of a drift.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftMetadata {
    /// `sup ‖b‖`, or `None` if unbounded.
    pub bound: Option<f64>,
    /// `C` in `‖b(t,y,μ)‖ ≤ C(1 + ‖y‖ + K(μ, δ₀))`.
    pub linear_growth: f64,
    /// `L` in `‖b(t,y,μ) − b(t,y,ν)‖ ≤ L·K(μ, ν)`, or `None`.
    pub law_lipschitz: Option<f64>,
    /// Whether an analytic spatial Jacobian is available.
    pub spatially_smooth: bool,
    /// Modulus of continuity in the law, when one is known.
    pub modulus: Option<String>,
}

/// A drift coefficient. Implementations must be pure: evaluation is shared
/// read-only across worker threads.
pub trait Drift: Send + Sync + Debug {
    fn name(&self) -> String;

    fn metadata(&self) -> DriftMetadata;

    /// Fixed state dimension, if the drift has one.
    fn dim(&self) -> Option<usize> {
        None
    }

    /// Number of extra kernels `k` whose means `∫ k dμ` the drift reads.
    fn kernel_count(&self) -> usize {
        0
    }

    /// Writes the kernel values at `y` into `out` (length [`Drift::kernel_count`]).
    fn kernel(&self, _y: &[f64], _out: &mut [f64]) {}

    /// Writes `b(t, y, μ)` into `out`.
    fn eval(&self, t: f64, y: &[f64], law: &LawStatistics, out: &mut [f64]);

    /// Writes `∂bⁱ/∂yʲ` row-major into `out` and returns `true` if an analytic
    /// Jacobian exists; otherwise returns `false` and leaves `out` untouched.
    fn analytic_jacobian(
        &self,
        _t: f64,
        _y: &[f64],
        _law: &LawStatistics,
        _out: &mut [f64],
    ) -> bool {
        false
    }

    fn law_statistics(&self, mu: &EmpiricalMeasure) -> LawStatistics {
        let nk = self.kernel_count();
        let mut kernels = vec![0.0; nk];
        if nk > 0 {
            let mut vals = vec![0.0; nk * mu.len()];
            for (i, a) in mu.iter().enumerate() {
                self.kernel(a, &mut vals[i * nk..(i + 1) * nk]);
            }
            for (j, k) in kernels.iter_mut().enumerate() {
                let col: Vec<f64> = (0..mu.len()).map(|i| vals[i * nk + j]).collect();
                *k = pairwise_sum(&col) / mu.len() as f64;
            }
        }
        LawStatistics {
            mean: mu.mean(),
            first_moment: mu.first_moment(),
            kernels,
        }
    }
}

/// Evaluates `b(t, y, μ)`, rejecting non-finite output.
pub fn eval_drift(drift: &dyn Drift, t: f64, y: &[f64], mu: &EmpiricalMeasure) -> Result<Vec<f64>> {
    if y.len() != mu.dim() {
        return Err(Error::DimensionMismatch {
            expected: mu.dim(),
            found: y.len(),
        });
    }
    let law = drift.law_statistics(mu);
    let mut out = vec![0.0; y.len()];
    eval_checked(drift, t, y, &law, &mut out)?;
    Ok(out)
}

#[inline]
pub(crate) fn eval_checked(
    drift: &dyn Drift,
    t: f64,
    y: &[f64],
    law: &LawStatistics,
    out: &mut [f64],
) -> Result<()> {
    drift.eval(t, y, law, out);
    if out.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFiniteDrift {
            drift: drift.name(),
            t,
            y: y.to_vec(),
        })
    }
}

/// Spatial Jacobian `∇₂b(t, y, μ)`, `J[i][j] = ∂bⁱ/∂yʲ`.
pub fn spatial_jacobian(
    drift: &dyn Drift,
    t: f64,
    y: &[f64],
    mu: &EmpiricalMeasure,
) -> Result<DMatrix<f64>> {
    let d = y.len();
    let law = drift.law_statistics(mu);
    let mut out = vec![0.0; d * d];
    jacobian_into(drift, t, y, &law, &mut out)?;
    Ok(DMatrix::from_row_slice(d, d, &out))
}

/// Analytic Jacobian when available, else central differences with step
/// `1e-5·max(1, |yʲ|)`.
pub(crate) fn jacobian_into(
    drift: &dyn Drift,
    t: f64,
    y: &[f64],
    law: &LawStatistics,
    out: &mut [f64],
) -> Result<()> {
    if !drift.analytic_jacobian(t, y, law, out) {
        finite_difference_jacobian(drift, t, y, law, out)?;
    }
    if out.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFiniteDrift {
            drift: format!("{} (jacobian)", drift.name()),
            t,
            y: y.to_vec(),
        })
    }
}

pub(crate) fn finite_difference_jacobian(
    drift: &dyn Drift,
    t: f64,
    y: &[f64],
    law: &LawStatistics,
    out: &mut [f64],
) -> Result<()> {
    let d = y.len();
    let mut yp = y.to_vec();
    let mut plus = vec![0.0; d];
    let mut minus = vec![0.0; d];
    for j in 0..d {
        let h = 1e-5 * y[j].abs().max(1.0);
        yp[j] = y[j] + h;
        eval_checked(drift, t, &yp, law, &mut plus)?;
        yp[j] = y[j] - h;
        eval_checked(drift, t, &yp, law, &mut minus)?;
        yp[j] = y[j];
        for i in 0..d {
            out[i * d + j] = (plus[i] - minus[i]) / (2.0 * h);
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Built-in drifts
// ---------------------------------------------------------------------------

/// `b ≡ 0`.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroDrift;

impl Drift for ZeroDrift {
    fn name(&self) -> String {
        "zero".into()
    }

    fn metadata(&self) -> DriftMetadata {
        DriftMetadata {
            bound: Some(0.0),
            linear_growth: 0.0,
            law_lipschitz: Some(0.0),
            spatially_smooth: true,
            modulus: None,
        }
    }

    fn eval(&self, _t: f64, _y: &[f64], _law: &LawStatistics, out: &mut [f64]) {
        out.fill(0.0);
    }

    fn analytic_jacobian(
        &self,
        _t: f64,
        _y: &[f64],
        _law: &LawStatistics,
        out: &mut [f64],
    ) -> bool {
        out.fill(0.0);
        true
    }
}

/// `b ≡ c`.
#[derive(Debug, Clone)]
pub struct ConstantDrift {
    pub value: Vec<f64>,
}

impl Drift for ConstantDrift {
    fn name(&self) -> String {
        "constant".into()
    }

    fn metadata(&self) -> DriftMetadata {
        let c = norm(&self.value);
        DriftMetadata {
            bound: Some(c),
            linear_growth: c,
            law_lipschitz: Some(0.0),
            spatially_smooth: true,
            modulus: None,
        }
    }

    fn dim(&self) -> Option<usize> {
        Some(self.value.len())
    }

    fn eval(&self, _t: f64, _y: &[f64], _law: &LawStatistics, out: &mut [f64]) {
        out.copy_from_slice(&self.value);
    }

    fn analytic_jacobian(
        &self,
        _t: f64,
        _y: &[f64],
        _law: &LawStatistics,
        out: &mut [f64],
    ) -> bool {
        out.fill(0.0);
        true
    }
}

/// `b(y) = A·y`, no law dependence.
#[derive(Debug, Clone)]
pub struct LinearDrift {
    dim: usize,
    matrix: Vec<f64>,
}

impl LinearDrift {
    /// `matrix` is row-major `d×d`.
    pub fn new(dim: usize, matrix: Vec<f64>) -> Result<Self> {
        if dim == 0 || matrix.len() != dim * dim {
            return Err(Error::param(
                "matrix",
                format!("expected {dim}×{dim} entries"),
            ));
        }
        Ok(LinearDrift { dim, matrix })
    }

    pub fn matrix(&self) -> &[f64] {
        &self.matrix
    }
}

impl Drift for LinearDrift {
    fn name(&self) -> String {
        "linear".into()
    }

    fn metadata(&self) -> DriftMetadata {
        DriftMetadata {
            bound: None,
            linear_growth: norm(&self.matrix),
            law_lipschitz: Some(0.0),
            spatially_smooth: true,
            modulus: None,
        }
    }

    fn dim(&self) -> Option<usize> {
        Some(self.dim)
    }

    fn eval(&self, _t: f64, y: &[f64], _law: &LawStatistics, out: &mut [f64]) {
        let d = self.dim;
        for (i, o) in out.iter_mut().enumerate() {
            *o = (0..d).map(|j| self.matrix[i * d + j] * y[j]).sum();
        }
    }

    fn analytic_jacobian(
        &self,
        _t: f64,
        _y: &[f64],
        _law: &LawStatistics,
        out: &mut [f64],
    ) -> bool {
        out.copy_from_slice(&self.matrix);
        true
    }
}

/// Mean-field Ornstein–Uhlenbeck drift `bⁱ = −α·yⁱ + β·mean(μ)ⁱ`, optionally
/// clipped componentwise to `[−clip, clip]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanFieldOu {
    pub alpha: f64,
    pub beta: f64,
    clip: Option<(f64, usize)>,
}

impl MeanFieldOu {
    pub fn new(alpha: f64, beta: f64) -> Self {
        MeanFieldOu {
            alpha,
            beta,
            clip: None,
        }
    }

    /// Componentwise clip at `level` in dimension `dim`; bounded by `level·√dim`.
    pub fn clipped(alpha: f64, beta: f64, level: f64, dim: usize) -> Self {
        MeanFieldOu {
            alpha,
            beta,
            clip: Some((level, dim)),
        }
    }

    /// Clip level `10·(1 + ‖x0‖)`, far outside the bulk of paths started at `x0`.
    pub fn clipped_for(alpha: f64, beta: f64, x0: &[f64]) -> Self {
        Self::clipped(alpha, beta, 10.0 * (1.0 + norm(x0)), x0.len())
    }

    pub fn clip_level(&self) -> Option<f64> {
        self.clip.map(|(c, _)| c)
    }

    #[inline]
    fn raw(&self, i: usize, y: &[f64], law: &LawStatistics) -> f64 {
        -self.alpha * y[i] + self.beta * law.mean[i]
    }

    /// Whether any component of `b(t, y, μ)` is clipped.
    pub fn clip_active(&self, y: &[f64], law: &LawStatistics) -> bool {
        match self.clip {
            Some((c, _)) => (0..y.len()).any(|i| self.raw(i, y, law).abs() > c),
            None => false,
        }
    }
}

impl Drift for MeanFieldOu {
    fn name(&self) -> String {
        match self.clip {
            Some((c, _)) => format!(
                "mean_field_ou(alpha={}, beta={}, clip={c})",
                self.alpha, self.beta
            ),
            None => format!("mean_field_ou(alpha={}, beta={})", self.alpha, self.beta),
        }
    }

    fn metadata(&self) -> DriftMetadata {
        DriftMetadata {
            bound: self.clip.map(|(c, d)| c * (d as f64).sqrt()),
            linear_growth: self.alpha.abs().max(self.beta.abs()),
            law_lipschitz: Some(self.beta.abs()),
            spatially_smooth: true,
            modulus: Some("lipschitz".into()),
        }
    }

    fn dim(&self) -> Option<usize> {
        self.clip.map(|(_, d)| d)
    }

    fn eval(&self, _t: f64, y: &[f64], law: &LawStatistics, out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            let v = self.raw(i, y, law);
            *o = match self.clip {
                Some((c, _)) => v.clamp(-c, c),
                None => v,
            };
        }
    }

    fn analytic_jacobian(&self, _t: f64, y: &[f64], law: &LawStatistics, out: &mut [f64]) -> bool {
        let d = y.len();
        out.fill(0.0);
        for i in 0..d {
            let active = self
                .clip
                .is_some_and(|(c, _)| self.raw(i, y, law).abs() > c);
            if !active {
                out[i * d + i] = -self.alpha;
            }
        }
        true
    }
}

/// Discontinuous attractor acting on the first coordinate:
/// `b(t, y, μ) = (−pull·sign(y¹) + min(K(μ, δ₀), cap))·e₁`, with `sign(0) = 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SignAttractor {
    pub pull: f64,
    pub cap: f64,
}

impl Default for SignAttractor {
    fn default() -> Self {
        SignAttractor {
            pull: 1.0,
            cap: 1.0,
        }
    }
}

impl Drift for SignAttractor {
    fn name(&self) -> String {
        format!("sign_attractor(pull={}, cap={})", self.pull, self.cap)
    }

    fn metadata(&self) -> DriftMetadata {
        let c = self.pull.abs() + self.cap.abs();
        DriftMetadata {
            bound: Some(c),
            linear_growth: c,
            law_lipschitz: Some(1.0),
            spatially_smooth: false,
            modulus: Some("lipschitz".into()),
        }
    }

    fn eval(&self, _t: f64, y: &[f64], law: &LawStatistics, out: &mut [f64]) {
        out.fill(0.0);
        let s = if y[0] > 0.0 {
            1.0
        } else if y[0] < 0.0 {
            -1.0
        } else {
            0.0
        };
        out[0] = -self.pull * s + law.first_moment.min(self.cap);
    }
}

/// Bounded smooth drift `bⁱ = κ·tanh(yⁱ) + β·tanh(mean(μ)ⁱ)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TanhMeanField {
    pub kappa: f64,
    pub beta: f64,
}

impl Drift for TanhMeanField {
    fn name(&self) -> String {
        format!("tanh_mean_field(kappa={}, beta={})", self.kappa, self.beta)
    }

    fn metadata(&self) -> DriftMetadata {
        // per component |b| ≤ |κ| + |β|; the Euclidean bound scales with √d and
        // is filled in by the registry, which knows d
        let c = self.kappa.abs() + self.beta.abs();
        DriftMetadata {
            bound: Some(c),
            linear_growth: c,
            law_lipschitz: Some(self.beta.abs()),
            spatially_smooth: true,
            modulus: Some("lipschitz".into()),
        }
    }

    fn eval(&self, _t: f64, y: &[f64], law: &LawStatistics, out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            *o = self.kappa * y[i].tanh() + self.beta * law.mean[i].tanh();
        }
    }

    fn analytic_jacobian(&self, _t: f64, y: &[f64], _law: &LawStatistics, out: &mut [f64]) -> bool {
        let d = y.len();
        out.fill(0.0);
        for i in 0..d {
            let c = y[i].cosh();
            out[i * d + i] = self.kappa / (c * c);
        }
        true
    }
}

/// Wraps a drift with a metadata override (used where bounds depend on `d`).
#[derive(Debug)]
struct WithMetadata {
    inner: Arc<dyn Drift>,
    metadata: DriftMetadata,
    dim: usize,
}

impl Drift for WithMetadata {
    fn name(&self) -> String {
        self.inner.name()
    }
    fn metadata(&self) -> DriftMetadata {
        self.metadata.clone()
    }
    fn dim(&self) -> Option<usize> {
        Some(self.dim)
    }
    fn kernel_count(&self) -> usize {
        self.inner.kernel_count()
    }
    fn kernel(&self, y: &[f64], out: &mut [f64]) {
        self.inner.kernel(y, out)
    }
    fn eval(&self, t: f64, y: &[f64], law: &LawStatistics, out: &mut [f64]) {
        self.inner.eval(t, y, law, out)
    }
    fn analytic_jacobian(&self, t: f64, y: &[f64], law: &LawStatistics, out: &mut [f64]) -> bool {
        self.inner.analytic_jacobian(t, y, law, out)
    }
    fn law_statistics(&self, mu: &EmpiricalMeasure) -> LawStatistics {
        self.inner.law_statistics(mu)
    }
}

// ---------------------------------------------------------------------------
// Mollification
// ---------------------------------------------------------------------------

/// Number of Gaussian offsets per mollified evaluation.
pub const MOLLIFIER_NODES: usize = 32;
const MOLLIFIER_SEED: u64 = 0x6d6f_6c6c;

/// `b_n(t, y, μ) = (1/Q) Σ_q b(t, y + z_q/√n, μ)` over fixed offsets `z_q`.
///
/// The offsets are seeded standard normals taken in antithetic pairs and
/// whitened so that their empirical mean is `0` and second moment is `I`
/// exactly. `b_n` is then a deterministic function that reproduces affine
/// drifts exactly. The Jacobian uses the Gaussian score identity
/// `∇_y E[b(y + Z/√n)] = √n·E[b(y + Z/√n) Zᵀ]` on the same offsets.
#[derive(Debug, Clone)]
pub struct MollifiedDrift {
    base: Arc<dyn Drift>,
    n: usize,
    dim: usize,
    scaled_nodes: Vec<f64>,
    nodes: Vec<f64>,
}

impl MollifiedDrift {
    pub fn base(&self) -> &Arc<dyn Drift> {
        &self.base
    }

    pub fn index(&self) -> usize {
        self.n
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len() / self.dim
    }
}

/// Builds `b_n` for a bounded drift in dimension `dim`.
pub fn mollify(base: Arc<dyn Drift>, dim: usize, n: usize) -> Result<MollifiedDrift> {
    if n == 0 {
        return Err(Error::param("n", "smoothing index must be ≥ 1"));
    }
    if base.metadata().bound.is_none() {
        return Err(Error::UnboundedDrift(base.name()));
    }
    let nodes = gaussian_nodes(dim, MOLLIFIER_NODES)?;
    let h = 1.0 / (n as f64).sqrt();
    let scaled_nodes = nodes.iter().map(|z| z * h).collect();
    Ok(MollifiedDrift {
        base,
        n,
        dim,
        scaled_nodes,
        nodes,
    })
}

/// `q` antithetic, whitened standard-normal offsets in `ℝ^dim`, row-major.
pub fn gaussian_nodes(dim: usize, q: usize) -> Result<Vec<f64>> {
    if !q.is_multiple_of(2) || q / 2 < dim {
        return Err(Error::param(
            "nodes",
            format!("{q} nodes cannot be whitened in dimension {dim}"),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(MOLLIFIER_SEED ^ dim as u64);
    let half: Vec<DVector<f64>> = (0..q / 2)
        .map(|_| DVector::from_fn(dim, |_, _| StandardNormal.sample(&mut rng)))
        .collect();
    // the antithetic partner contributes the same outer product
    let mut second = DMatrix::<f64>::zeros(dim, dim);
    for z in &half {
        second += z * z.transpose();
    }
    second /= (q / 2) as f64;
    let chol = second
        .cholesky()
        .ok_or_else(|| Error::param("nodes", "degenerate node sample"))?;
    let l_inv = chol
        .l()
        .try_inverse()
        .ok_or_else(|| Error::param("nodes", "degenerate node sample"))?;
    let mut out = Vec::with_capacity(q * dim);
    for z in &half {
        let w = &l_inv * z;
        out.extend(w.iter().copied());
        out.extend(w.iter().map(|v| -v));
    }
    Ok(out)
}

impl Drift for MollifiedDrift {
    fn name(&self) -> String {
        format!("mollified[n={}]({})", self.n, self.base.name())
    }

    fn metadata(&self) -> DriftMetadata {
        let mut m = self.base.metadata();
        m.spatially_smooth = true;
        m
    }

    fn dim(&self) -> Option<usize> {
        Some(self.dim)
    }

    fn kernel_count(&self) -> usize {
        self.base.kernel_count()
    }

    fn kernel(&self, y: &[f64], out: &mut [f64]) {
        self.base.kernel(y, out)
    }

    fn law_statistics(&self, mu: &EmpiricalMeasure) -> LawStatistics {
        self.base.law_statistics(mu)
    }

    fn eval(&self, t: f64, y: &[f64], law: &LawStatistics, out: &mut [f64]) {
        let d = self.dim;
        let q = self.node_count();
        let mut shifted = vec![0.0; d];
        let mut val = vec![0.0; d];
        out.fill(0.0);
        for z in self.scaled_nodes.chunks_exact(d) {
            for c in 0..d {
                shifted[c] = y[c] + z[c];
            }
            self.base.eval(t, &shifted, law, &mut val);
            for c in 0..d {
                out[c] += val[c];
            }
        }
        for o in out.iter_mut() {
            *o /= q as f64;
        }
    }

    fn analytic_jacobian(&self, t: f64, y: &[f64], law: &LawStatistics, out: &mut [f64]) -> bool {
        let d = self.dim;
        let q = self.node_count();
        let mut shifted = vec![0.0; d];
        let mut val = vec![0.0; d];
        out.fill(0.0);
        for (zs, z) in self
            .scaled_nodes
            .chunks_exact(d)
            .zip(self.nodes.chunks_exact(d))
        {
            for c in 0..d {
                shifted[c] = y[c] + zs[c];
            }
            self.base.eval(t, &shifted, law, &mut val);
            for i in 0..d {
                for j in 0..d {
                    out[i * d + j] += val[i] * z[j];
                }
            }
        }
        let scale = (self.n as f64).sqrt() / q as f64;
        for o in out.iter_mut() {
            *o *= scale;
        }
        true
    }
}

// ---------------------------------------------------------------------------
// Registry
// ---------------------------------------------------------------------------

/// Built-in drift addressable by name plus parameters, as in the CLI config:
/// `{"name": "mean_field_ou", "alpha": 1.0, "beta": 0.5}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum DriftSpec {
    Zero,
    Constant {
        value: Vec<f64>,
    },
    /// Row-major rows of `A` in `b(y) = A·y`.
    Linear {
        matrix: Vec<Vec<f64>>,
    },
    MeanFieldOu {
        alpha: f64,
        beta: f64,
        /// Componentwise clip level.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        clip: Option<f64>,
        /// Clip at `10·(1 + ‖x0‖)`.
        #[serde(default, skip_serializing_if = "std::ops::Not::not")]
        auto_clip: bool,
    },
    SignAttractor {
        #[serde(default = "one")]
        pull: f64,
        #[serde(default = "one")]
        cap: f64,
    },
    TanhMeanField {
        kappa: f64,
        beta: f64,
    },
    Mollified {
        base: Box<DriftSpec>,
        n: usize,
    },
}

fn one() -> f64 {
    1.0
}

impl DriftSpec {
    /// Instantiates the drift for state dimension `dim` and initial point `x0`.
    pub fn build(&self, dim: usize, x0: &[f64]) -> Result<Arc<dyn Drift>> {
        let finite = |field: &str, v: f64| {
            if v.is_finite() {
                Ok(())
            } else {
                Err(Error::param(field, "must be finite"))
            }
        };
        Ok(match self {
            DriftSpec::Zero => Arc::new(ZeroDrift),
            DriftSpec::Constant { value } => {
                if value.len() != dim {
                    return Err(Error::param(
                        "drift.value",
                        format!("expected {dim} entries"),
                    ));
                }
                for v in value {
                    finite("drift.value", *v)?;
                }
                Arc::new(ConstantDrift {
                    value: value.clone(),
                })
            }
            DriftSpec::Linear { matrix } => {
                if matrix.len() != dim || matrix.iter().any(|r| r.len() != dim) {
                    return Err(Error::param(
                        "drift.matrix",
                        format!("expected {dim}×{dim}"),
                    ));
                }
                Arc::new(LinearDrift::new(dim, matrix.concat())?)
            }
            DriftSpec::MeanFieldOu {
                alpha,
                beta,
                clip,
                auto_clip,
            } => {
                finite("drift.alpha", *alpha)?;
                finite("drift.beta", *beta)?;
                let clip = if *auto_clip {
                    Some(10.0 * (1.0 + norm(x0)))
                } else {
                    *clip
                };
                match clip {
                    Some(c) if !(c > 0.0) => {
                        return Err(Error::param("drift.clip", "must be positive"))
                    }
                    Some(c) => Arc::new(MeanFieldOu::clipped(*alpha, *beta, c, dim)),
                    None => Arc::new(MeanFieldOu::new(*alpha, *beta)),
                }
            }
            DriftSpec::SignAttractor { pull, cap } => {
                finite("drift.pull", *pull)?;
                finite("drift.cap", *cap)?;
                if *cap < 0.0 {
                    return Err(Error::param("drift.cap", "must be non-negative"));
                }
                Arc::new(SignAttractor {
                    pull: *pull,
                    cap: *cap,
                })
            }
            DriftSpec::TanhMeanField { kappa, beta } => {
                finite("drift.kappa", *kappa)?;
                finite("drift.beta", *beta)?;
                let inner = TanhMeanField {
                    kappa: *kappa,
                    beta: *beta,
                };
                let mut metadata = inner.metadata();
                let c = (kappa.abs() + beta.abs()) * (dim as f64).sqrt();
                metadata.bound = Some(c);
                metadata.linear_growth = c;
                Arc::new(WithMetadata {
                    inner: Arc::new(inner),
                    metadata,
                    dim,
                })
            }
            DriftSpec::Mollified { base, n } => Arc::new(mollify(base.build(dim, x0)?, dim, *n)?),
        })
    }

    /// Registry name.
    pub fn name(&self) -> &'static str {
        match self {
            DriftSpec::Zero => "zero",
            DriftSpec::Constant { .. } => "constant",
            DriftSpec::Linear { .. } => "linear",
            DriftSpec::MeanFieldOu { .. } => "mean_field_ou",
            DriftSpec::SignAttractor { .. } => "sign_attractor",
            DriftSpec::TanhMeanField { .. } => "tanh_mean_field",
            DriftSpec::Mollified { .. } => "mollified",
        }
    }
}

// ---------------------------------------------------------------------------
// Metadata probes
// ---------------------------------------------------------------------------

/// Outcome of checking declared metadata on random probes.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetadataProbe {
    pub probes: usize,
    pub bound_violations: usize,
    pub growth_violations: usize,
    pub lipschitz_violations: usize,
    /// Largest `‖b‖ / C_b` seen (0 when no bound is declared).
    pub max_bound_ratio: f64,
    /// Largest `‖b‖ / (C(1 + ‖y‖ + K(μ,δ₀)))` seen.
    pub max_growth_ratio: f64,
    /// Largest `‖b(μ) − b(ν)‖ / (L·K(μ,ν))` seen (0 when no constant is declared).
    pub max_lipschitz_ratio: f64,
}

impl MetadataProbe {
    pub fn passed(&self) -> bool {
        self.bound_violations == 0 && self.growth_violations == 0 && self.lipschitz_violations == 0
    }
}

/// Random probe triples `(t, y, μ)` in `[0, horizon] × ℝ^d × 𝒫₁` with
/// perturbed partners `ν` for the law-Lipschitz check.
pub fn probe_metadata(
    drift: &dyn Drift,
    dim: usize,
    horizon: f64,
    probes: usize,
    seed: u64,
) -> Result<MetadataProbe> {
    const ATOMS: usize = 8;
    const SLACK: f64 = 1e-9;
    let meta = drift.metadata();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = MetadataProbe {
        probes,
        ..Default::default()
    };
    let normal = |rng: &mut ChaCha8Rng| -> f64 { StandardNormal.sample(rng) };
    let mut b_mu = vec![0.0; dim];
    let mut b_nu = vec![0.0; dim];
    for _ in 0..probes {
        let t = rng.random::<f64>() * horizon;
        let scale = 3.0 * rng.random::<f64>() + 0.1;
        let y: Vec<f64> = (0..dim).map(|_| scale * normal(&mut rng)).collect();
        let center: Vec<f64> = (0..dim).map(|_| 2.0 * normal(&mut rng)).collect();
        let spread = 2.0 * rng.random::<f64>();
        let mu_atoms: Vec<f64> = (0..ATOMS * dim)
            .map(|i| center[i % dim] + spread * normal(&mut rng))
            .collect();
        let jitter = rng.random::<f64>();
        let nu_atoms: Vec<f64> = mu_atoms
            .iter()
            .map(|a| a + jitter * normal(&mut rng))
            .collect();
        let mu = EmpiricalMeasure::new(dim, mu_atoms)?;
        let nu = EmpiricalMeasure::new(dim, nu_atoms)?;
        let law_mu = drift.law_statistics(&mu);
        let law_nu = drift.law_statistics(&nu);
        eval_checked(drift, t, &y, &law_mu, &mut b_mu)?;
        eval_checked(drift, t, &y, &law_nu, &mut b_nu)?;
        let size = norm(&b_mu);
        if let Some(c) = meta.bound {
            if c > 0.0 {
                report.max_bound_ratio = report.max_bound_ratio.max(size / c);
            }
            if size > c * (1.0 + SLACK) + SLACK {
                report.bound_violations += 1;
            }
        }
        let growth = meta.linear_growth * (1.0 + norm(&y) + mu.first_moment());
        if growth > 0.0 {
            report.max_growth_ratio = report.max_growth_ratio.max(size / growth);
        }
        if size > growth * (1.0 + SLACK) + SLACK {
            report.growth_violations += 1;
        }
        if let Some(l) = meta.law_lipschitz {
            let gap: Vec<f64> = b_mu.iter().zip(&b_nu).map(|(a, b)| a - b).collect();
            let k = kantorovich_exact(&mu, &nu)?;
            let lhs = norm(&gap);
            if l * k > 0.0 {
                report.max_lipschitz_ratio = report.max_lipschitz_ratio.max(lhs / (l * k));
            }
            if lhs > l * k * (1.0 + SLACK) + SLACK {
                report.lipschitz_violations += 1;
            }
        }
    }
    Ok(report)
}
