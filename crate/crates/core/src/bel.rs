//! Gradient of `x ↦ E[Φ(X_T^x)]` by the Bismut–Elworthy–Li weight, the
//! Girsanov-weighted estimator of `E[Φ(X_T^x)]`, and the `ω_T`-integrability
//! check for observables.
//!
//! For a weight function `a` with `∫₀ᵀ a = 1` and `A(t) = ∫₀ᵗ a`,
//!
//! ```text
//! ∇ₓE[Φ(X_T)] = E[Φ(X_T) · ∫₀ᵀ (a(s)∇ₓX_s + ∇ₓb(s, X_s, ℙ_{X_s^x}) A(s))ᵀ dB_s]
//! ```
//!
//! discretized with left-point Itô sums on the simulation grid.

use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::drift::{eval_checked, jacobian_into, mollify, Drift};
use crate::noise::NoiseBuffer;
use crate::sde_solver::{
    driftless, picard_with_noise, LawFlow, PicardConfig, PicardOutcome, TimeGrid,
};
use crate::sensitivity::{default_fd_step, perturbed_laws, GradXbFlow, PerturbedLaws};
use crate::stats::MeanEstimate;
use crate::{Error, Result};

/// Default smoothing index for drifts without a spatial Jacobian.
pub const DEFAULT_MOLLIFIER: usize = 64;

// ---------------------------------------------------------------------------
// Weight functions
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum WeightKind {
    Uniform,
    /// Constant on `[0, τ)`, zero after.
    IndicatorFront {
        tau: f64,
    },
    /// Level `levels[i]` on `[breaks[i-1], breaks[i])`, with `breaks` the
    /// interior break points in increasing order.
    Piecewise {
        breaks: Vec<f64>,
        levels: Vec<f64>,
    },
}

/// `a(t_k)` on the grid, rescaled so that `Σ_k a(t_k)Δt = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightFunction {
    kind: WeightKind,
    dt: f64,
    values: Vec<f64>,
    cumulative: Vec<f64>,
}

impl WeightFunction {
    pub fn new(kind: WeightKind, grid: &TimeGrid) -> Result<Self> {
        let m = grid.steps();
        let raw: Vec<f64> = match &kind {
            WeightKind::Uniform => vec![1.0; m],
            WeightKind::IndicatorFront { tau } => {
                if !(*tau > 0.0 && tau.is_finite()) {
                    return Err(Error::param("tau", "must be positive"));
                }
                (0..m)
                    .map(|k| if grid.time(k) < *tau { 1.0 } else { 0.0 })
                    .collect()
            }
            WeightKind::Piecewise { breaks, levels } => {
                if levels.len() != breaks.len() + 1 {
                    return Err(Error::param(
                        "levels",
                        "need one more level than break points",
                    ));
                }
                if breaks.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(Error::param("breaks", "must be strictly increasing"));
                }
                if levels.iter().any(|v| !v.is_finite()) {
                    return Err(Error::param("levels", "must be finite"));
                }
                (0..m)
                    .map(|k| {
                        let t = grid.time(k);
                        levels[breaks.iter().take_while(|b| t >= **b).count()]
                    })
                    .collect()
            }
        };
        let dt = grid.dt();
        let total: f64 = raw.iter().sum::<f64>() * dt;
        if !(total.abs() > 1e-300) || !total.is_finite() {
            return Err(Error::param("a", "integral over the grid is zero"));
        }
        let values: Vec<f64> = raw.iter().map(|v| v / total).collect();
        let mut cumulative = Vec::with_capacity(m + 1);
        let mut acc = 0.0;
        cumulative.push(0.0);
        for v in &values {
            acc += v * dt;
            cumulative.push(acc);
        }
        Ok(WeightFunction {
            kind,
            dt,
            values,
            cumulative,
        })
    }

    pub fn uniform(grid: &TimeGrid) -> Self {
        Self::new(WeightKind::Uniform, grid).expect("uniform weight is always valid")
    }

    pub fn indicator_front(grid: &TimeGrid, tau: f64) -> Result<Self> {
        Self::new(WeightKind::IndicatorFront { tau }, grid)
    }

    pub fn kind(&self) -> &WeightKind {
        &self.kind
    }

    /// `a(t_k)` for `k = 0..M-1`.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn at(&self, k: usize) -> f64 {
        self.values[k]
    }

    /// `A(t_k) = Σ_{l<k} a(t_l)Δt`.
    pub fn cumulative(&self, k: usize) -> f64 {
        self.cumulative[k]
    }

    pub fn steps(&self) -> usize {
        self.values.len()
    }

    pub fn sup(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }
}

// ---------------------------------------------------------------------------
// Observables
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObservableClass {
    SmoothBounded,
    WeightedL2,
}

/// Scalar observable `Φ: ℝ^d → ℝ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum Observable {
    Constant {
        value: f64,
    },
    /// `y_index`.
    Coordinate {
        index: usize,
    },
    /// `1{y_index > threshold}`.
    Indicator {
        index: usize,
        #[serde(default)]
        threshold: f64,
    },
    /// `w·y`.
    Linear {
        weights: Vec<f64>,
    },
    NormSquared,
    /// `tanh(y_index)`.
    Tanh {
        index: usize,
    },
    /// `exp(rate·‖y‖²)`.
    ExpSquare {
        rate: f64,
    },
}

impl Observable {
    pub fn eval(&self, y: &[f64]) -> f64 {
        match self {
            Observable::Constant { value } => *value,
            Observable::Coordinate { index } => y[*index],
            Observable::Indicator { index, threshold } => {
                if y[*index] > *threshold {
                    1.0
                } else {
                    0.0
                }
            }
            Observable::Linear { weights } => weights.iter().zip(y).map(|(w, v)| w * v).sum(),
            Observable::NormSquared => y.iter().map(|v| v * v).sum(),
            Observable::Tanh { index } => y[*index].tanh(),
            Observable::ExpSquare { rate } => (rate * y.iter().map(|v| v * v).sum::<f64>()).exp(),
        }
    }

    pub fn class(&self) -> ObservableClass {
        match self {
            Observable::Constant { .. } | Observable::Tanh { .. } => ObservableClass::SmoothBounded,
            _ => ObservableClass::WeightedL2,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Observable::Constant { .. } => "constant",
            Observable::Coordinate { .. } => "coordinate",
            Observable::Indicator { .. } => "indicator",
            Observable::Linear { .. } => "linear",
            Observable::NormSquared => "norm_squared",
            Observable::Tanh { .. } => "tanh",
            Observable::ExpSquare { .. } => "exp_square",
        }
    }

    /// Checks indices and weight lengths against `dim`.
    pub fn validate(&self, dim: usize) -> Result<()> {
        let bad_index = |index: usize| {
            Err(Error::IndexOutOfRange {
                what: "observable coordinate",
                index,
                len: dim,
            })
        };
        match self {
            Observable::Coordinate { index }
            | Observable::Indicator { index, .. }
            | Observable::Tanh { index }
                if *index >= dim =>
            {
                bad_index(*index)
            }
            Observable::Linear { weights } if weights.len() != dim => {
                Err(Error::DimensionMismatch {
                    expected: dim,
                    found: weights.len(),
                })
            }
            _ => Ok(()),
        }
    }
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Bel,
    Fd,
    Girsanov,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorReport {
    pub estimate: Vec<f64>,
    pub std_error: Vec<f64>,
    pub n: usize,
    pub seed: u64,
    pub config_digest: Option<String>,
    pub method: Method,
    pub runtime_ms: u64,
}

impl EstimatorReport {
    /// Componentwise mean and standard error of `samples` (`n × dim`, row-major).
    pub fn from_samples(
        method: Method,
        samples: &[f64],
        dim: usize,
        seed: u64,
        started: Instant,
    ) -> Self {
        let est = component_estimates(samples, dim);
        EstimatorReport {
            estimate: est.iter().map(|e| e.mean).collect(),
            std_error: est.iter().map(|e| e.std_error).collect(),
            n: samples.len() / dim,
            seed,
            config_digest: None,
            method,
            runtime_ms: started.elapsed().as_millis() as u64,
        }
    }

    /// Whether every component is within `k` standard errors of `value`.
    pub fn within(&self, value: &[f64], k: f64) -> bool {
        self.estimate
            .iter()
            .zip(&self.std_error)
            .zip(value)
            .all(|((e, s), v)| (e - v).abs() <= k * s)
    }
}

/// Per-component [`MeanEstimate`]s of row-major `n × dim` samples.
pub fn component_estimates(samples: &[f64], dim: usize) -> Vec<MeanEstimate> {
    (0..dim)
        .map(|c| {
            let col: Vec<f64> = samples.iter().skip(c).step_by(dim).copied().collect();
            MeanEstimate::from_samples(&col)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// BEL weight
// ---------------------------------------------------------------------------

/// `W` for one path from its spatial generators `∇₂b_k`, `∇ₓb_k` and noise
/// increments (each concatenated over `k = 0..M-1`).
///
/// `W_j = Σ_k Σ_i M_k[i][j]·ΔBᵢ_k` with `M_k = a_k Z_k + ∇ₓb_k A_k`, where
/// `Z` is the first variation.
pub fn bel_weight_from_parts(
    a: &WeightFunction,
    generators: &[f64],
    gxb: &[f64],
    increments: &[f64],
    dim: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; dim];
    bel_weights_into(
        std::slice::from_ref(&a),
        generators,
        gxb,
        increments,
        dim,
        &mut out,
    );
    out
}

/// Weights for several `a` on one path; `out` holds `weights.len() × dim`.
fn bel_weights_into(
    weights: &[&WeightFunction],
    generators: &[f64],
    gxb: &[f64],
    increments: &[f64],
    d: usize,
    out: &mut [f64],
) {
    let dd = d * d;
    let steps = generators.len() / dd;
    let dt = weights[0].dt();
    out.fill(0.0);
    let mut z = crate::linalg::identity(d);
    let mut next = vec![0.0; dd];
    for k in 0..steps {
        let g = &generators[k * dd..(k + 1) * dd];
        let s = &gxb[k * dd..(k + 1) * dd];
        let db = &increments[k * d..(k + 1) * d];
        for (w, a) in out.chunks_exact_mut(d).zip(weights) {
            let (ak, cap) = (a.at(k), a.cumulative(k));
            for i in 0..d {
                let row = i * d;
                for (j, wj) in w.iter_mut().enumerate() {
                    *wj += (ak * z[row + j] + s[row + j] * cap) * db[i];
                }
            }
        }
        crate::linalg::matmul_into(d, g, &z, &mut next);
        for ((n, c), sk) in next.iter_mut().zip(&z).zip(s) {
            *n = c + (*n + sk) * dt;
        }
        std::mem::swap(&mut z, &mut next);
    }
}

/// `W` along one path, given its first-variation flow and `∇ₓb` along it.
pub fn bel_weight(
    a: &WeightFunction,
    fv: &crate::sensitivity::JacobianFlow,
    gxb_along: &[f64],
    path: &crate::sde_solver::SamplePath,
    grid: &TimeGrid,
) -> Result<Vec<f64>> {
    let d = path.dim();
    let m = grid.steps();
    if fv.dim() != d
        || fv.start() != 0
        || fv.end() != m
        || gxb_along.len() != m * d * d
        || path.steps() != m
        || a.steps() != m
    {
        return Err(Error::ShapeMismatch(
            "weight, first variation, ∇ₓb and path must share one grid and dimension".into(),
        ));
    }
    let mut w = vec![0.0; d];
    for k in 0..m {
        let z = fv.at(k).unwrap();
        let s = &gxb_along[k * d * d..(k + 1) * d * d];
        let db = path.increment(k);
        for i in 0..d {
            for j in 0..d {
                w[j] += (a.at(k) * z[i * d + j] + s[i * d + j] * a.cumulative(k)) * db[i];
            }
        }
    }
    Ok(w)
}

// ---------------------------------------------------------------------------
// Estimator
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BelConfig {
    pub picard: PicardConfig,
    /// FD step for `∇ₓb`; `None` for `1e-2·max(1, ‖x0‖)`.
    pub h: Option<f64>,
    /// Smoothing index used for `∇₂b` when the drift has no spatial Jacobian.
    pub mollifier: usize,
}

impl Default for BelConfig {
    fn default() -> Self {
        BelConfig {
            picard: PicardConfig::default(),
            h: None,
            mollifier: DEFAULT_MOLLIFIER,
        }
    }
}

/// Refuses drifts outside the estimator's hypotheses.
pub fn check_hypotheses(drift: &dyn Drift) -> Result<()> {
    let meta = drift.metadata();
    let mut missing = Vec::new();
    if meta.bound.is_none() {
        missing.push("it is not declared bounded (clip it, e.g. `auto_clip`)");
    }
    if meta.law_lipschitz.is_none() {
        missing.push("it declares no Lipschitz constant in the law");
    }
    if missing.is_empty() {
        Ok(())
    } else {
        Err(Error::HypothesisViolation(format!(
            "drift `{}`: {}",
            drift.name(),
            missing.join("; ")
        )))
    }
}

/// Everything the weight needs that does not depend on `a` or `Φ`: the
/// mean-field solution, `∇ₓb`, and the drift used for `∇₂b`.
#[derive(Debug)]
pub struct BelEngine {
    drift: Arc<dyn Drift>,
    jacobian_drift: Arc<dyn Drift>,
    x0: Vec<f64>,
    grid: TimeGrid,
    noise: Arc<NoiseBuffer>,
    outcome: PicardOutcome,
    gxb: GradXbFlow,
    perturbed: Option<PerturbedLaws>,
    h: f64,
    config: BelConfig,
}

impl BelEngine {
    pub fn prepare(
        drift: Arc<dyn Drift>,
        x0: &[f64],
        grid: &TimeGrid,
        n: usize,
        seed: u64,
        config: &BelConfig,
    ) -> Result<Self> {
        if n < 2 {
            return Err(Error::param("N", "need at least two paths"));
        }
        let noise = Arc::new(NoiseBuffer::generate(
            seed,
            n,
            grid.steps(),
            x0.len(),
            grid.dt(),
        ));
        Self::prepare_with_noise(drift, x0, grid, noise, config)
    }

    pub fn prepare_with_noise(
        drift: Arc<dyn Drift>,
        x0: &[f64],
        grid: &TimeGrid,
        noise: Arc<NoiseBuffer>,
        config: &BelConfig,
    ) -> Result<Self> {
        check_hypotheses(drift.as_ref())?;
        let d = x0.len();
        let jacobian_drift: Arc<dyn Drift> = if drift.metadata().spatially_smooth {
            drift.clone()
        } else {
            Arc::new(mollify(drift.clone(), d, config.mollifier)?)
        };
        let outcome = picard_with_noise(drift.as_ref(), x0, grid, &noise, None, &config.picard)?;
        let h = config.h.unwrap_or_else(|| default_fd_step(x0));
        let (gxb, perturbed) = if drift.metadata().law_lipschitz == Some(0.0) {
            (GradXbFlow::zero(drift.clone(), d, grid), None)
        } else {
            let p = perturbed_laws(drift.as_ref(), x0, grid, &noise, h, &config.picard)?;
            (GradXbFlow::from_perturbed(drift.clone(), grid, &p), Some(p))
        };
        Ok(BelEngine {
            drift,
            jacobian_drift,
            x0: x0.to_vec(),
            grid: *grid,
            noise,
            outcome,
            gxb,
            perturbed,
            h,
            config: config.clone(),
        })
    }

    pub fn drift(&self) -> &Arc<dyn Drift> {
        &self.drift
    }

    /// The drift whose spatial Jacobian enters the first variation.
    pub fn jacobian_drift(&self) -> &Arc<dyn Drift> {
        &self.jacobian_drift
    }

    pub fn outcome(&self) -> &PicardOutcome {
        &self.outcome
    }

    pub fn gxb(&self) -> &GradXbFlow {
        &self.gxb
    }

    pub fn noise(&self) -> &Arc<NoiseBuffer> {
        &self.noise
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn x0(&self) -> &[f64] {
        &self.x0
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    /// The `x0 ± h·e_j` solutions, solving them now if the drift did not
    /// need them for `∇ₓb`.
    pub fn perturbed(&mut self) -> Result<&PerturbedLaws> {
        if self.perturbed.is_none() {
            let p = perturbed_laws(
                self.drift.as_ref(),
                &self.x0,
                &self.grid,
                &self.noise,
                self.h,
                &self.config.picard,
            )?;
            self.perturbed = Some(p);
        }
        Ok(self.perturbed.as_ref().unwrap())
    }

    /// BEL weights for each `a`: one `N × d` row-major block per weight function.
    pub fn weights(&self, weights: &[&WeightFunction]) -> Result<Vec<Vec<f64>>> {
        let m = self.grid.steps();
        if weights.is_empty() {
            return Ok(Vec::new());
        }
        if weights.iter().any(|a| a.steps() != m) {
            return Err(Error::GridMismatch("weight function grid".into()));
        }
        let d = self.x0.len();
        let n = self.noise.n_paths();
        let nw = weights.len();
        let bundle = &self.outcome.bundle;
        let law = &self.outcome.law;
        let rows: Vec<Vec<f64>> = (0..n)
            .into_par_iter()
            .map_init(
                || (vec![0.0; m * d * d], vec![0.0; m * d * d], vec![0.0; m * d]),
                |(gens, gxb, inc), p| -> Result<Vec<f64>> {
                    let dd = d * d;
                    for k in 0..m {
                        let y = bundle.state(k, p);
                        let t = self.grid.time(k);
                        jacobian_into(
                            self.jacobian_drift.as_ref(),
                            t,
                            y,
                            law.at(k),
                            &mut gens[k * dd..(k + 1) * dd],
                        )?;
                        self.gxb.eval_into(k, y, &mut gxb[k * dd..(k + 1) * dd]);
                        inc[k * d..(k + 1) * d].copy_from_slice(self.noise.increment(k, p));
                    }
                    let mut out = vec![0.0; nw * d];
                    bel_weights_into(weights, gens, gxb, inc, d, &mut out);
                    Ok(out)
                },
            )
            .collect::<Result<_>>()?;
        let mut blocks = vec![Vec::with_capacity(n * d); nw];
        for row in rows {
            for (b, w) in blocks.iter_mut().zip(row.chunks_exact(d)) {
                b.extend_from_slice(w);
            }
        }
        Ok(blocks)
    }

    /// `Φ(X_T)` per path.
    pub fn terminal_values(&self, phi: &Observable) -> Vec<f64> {
        let b = &self.outcome.bundle;
        let m = self.grid.steps();
        (0..b.n_paths()).map(|p| phi.eval(b.state(m, p))).collect()
    }

    /// Per-path samples `Φ(X_T)·W` (`N × d`) for the weight block `w`.
    pub fn samples(&self, w: &[f64], phi: &Observable) -> Vec<f64> {
        let d = self.x0.len();
        self.terminal_values(phi)
            .iter()
            .zip(w.chunks_exact(d))
            .flat_map(|(f, wp)| wp.iter().map(move |v| f * v))
            .collect()
    }

    pub fn estimate(&self, a: &WeightFunction, phi: &Observable) -> Result<EstimatorReport> {
        let started = Instant::now();
        phi.validate(self.x0.len())?;
        let w = self.weights(&[a])?.pop().unwrap();
        let samples = self.samples(&w, phi);
        Ok(EstimatorReport::from_samples(
            Method::Bel,
            &samples,
            self.x0.len(),
            self.noise.seed(),
            started,
        ))
    }
}

/// BEL estimate of `∇ₓE[Φ(X_T^x)]`.
pub fn estimate_gradient(
    drift: Arc<dyn Drift>,
    x0: &[f64],
    grid: &TimeGrid,
    n: usize,
    a: &WeightFunction,
    phi: &Observable,
    seed: u64,
    config: &BelConfig,
) -> Result<EstimatorReport> {
    let started = Instant::now();
    phi.validate(x0.len())?;
    let engine = BelEngine::prepare(drift, x0, grid, n, seed, config)?;
    let mut report = engine.estimate(a, phi)?;
    report.runtime_ms = started.elapsed().as_millis() as u64;
    Ok(report)
}

// ---------------------------------------------------------------------------
// Girsanov
// ---------------------------------------------------------------------------

/// `𝓔_T` per driftless path `B^x`.
#[derive(Debug, Clone, PartialEq)]
pub struct GirsanovWeight {
    pub values: Vec<f64>,
}

impl GirsanovWeight {
    pub fn mean(&self) -> MeanEstimate {
        MeanEstimate::from_samples(&self.values)
    }
}

/// `log 𝓔_T = Σ_k b_k·ΔB_k − ½Σ_k ‖b_k‖²Δt` with `b_k = b(t_k, B^x_{t_k}, μ_k)`.
pub fn girsanov_weights(
    drift: &dyn Drift,
    law: &LawFlow,
    x0: &[f64],
    grid: &TimeGrid,
    noise: &Arc<NoiseBuffer>,
) -> Result<GirsanovWeight> {
    if law.len() != grid.steps() + 1 {
        return Err(Error::GridMismatch("law flow length".into()));
    }
    let d = x0.len();
    let dt = grid.dt();
    let values = (0..noise.n_paths())
        .into_par_iter()
        .map_init(
            || (vec![0.0; d], vec![0.0; d]),
            |(y, b), p| -> Result<f64> {
                y.copy_from_slice(x0);
                let mut log_e = 0.0;
                for k in 0..grid.steps() {
                    eval_checked(drift, grid.time(k), y, law.at(k), b)?;
                    let db = noise.increment(k, p);
                    let mut dot = 0.0;
                    let mut sq = 0.0;
                    for c in 0..d {
                        dot += b[c] * db[c];
                        sq += b[c] * b[c];
                        y[c] += db[c];
                    }
                    log_e += dot - 0.5 * sq * dt;
                }
                Ok(log_e.exp())
            },
        )
        .collect::<Result<Vec<f64>>>()?;
    Ok(GirsanovWeight { values })
}

/// Driftless terminal points `B^x_T`, `𝓔_T`, and the Picard trace of the law.
#[derive(Debug, Clone)]
pub struct GirsanovRun {
    pub terminal: Vec<f64>,
    pub weight: GirsanovWeight,
    pub trace: Vec<f64>,
    dim: usize,
    seed: u64,
}

impl GirsanovRun {
    /// `Φ(B_T^x)·𝓔_T` per path.
    pub fn samples(&self, phi: &Observable) -> Vec<f64> {
        self.terminal
            .chunks_exact(self.dim)
            .zip(&self.weight.values)
            .map(|(y, e)| phi.eval(y) * e)
            .collect()
    }

    pub fn report(&self, phi: &Observable, started: Instant) -> EstimatorReport {
        EstimatorReport::from_samples(Method::Girsanov, &self.samples(phi), 1, self.seed, started)
    }
}

/// Solves for the law by Picard, then weights driftless paths on the same noise.
pub fn girsanov_run(
    drift: &dyn Drift,
    x0: &[f64],
    grid: &TimeGrid,
    noise: &Arc<NoiseBuffer>,
    config: &PicardConfig,
) -> Result<GirsanovRun> {
    check_bounded(drift)?;
    let out = picard_with_noise(drift, x0, grid, noise, None, config)?;
    girsanov_from_law(drift, &out.law, out.trace, x0, grid, noise)
}

/// Weights driftless paths against an already solved law flow.
pub fn girsanov_from_law(
    drift: &dyn Drift,
    law: &LawFlow,
    trace: Vec<f64>,
    x0: &[f64],
    grid: &TimeGrid,
    noise: &Arc<NoiseBuffer>,
) -> Result<GirsanovRun> {
    check_bounded(drift)?;
    let weight = girsanov_weights(drift, law, x0, grid, noise)?;
    let free = driftless(x0, grid, noise);
    Ok(GirsanovRun {
        terminal: free.states_at(grid.steps()).to_vec(),
        weight,
        trace,
        dim: x0.len(),
        seed: noise.seed(),
    })
}

fn check_bounded(drift: &dyn Drift) -> Result<()> {
    if drift.metadata().bound.is_none() {
        return Err(Error::HypothesisViolation(format!(
            "drift `{}` is not declared bounded",
            drift.name()
        )));
    }
    Ok(())
}

/// `E[Φ(X_T^x)] = E[Φ(B_T^x)·𝓔_T]`.
pub fn girsanov_estimate(
    drift: &dyn Drift,
    x0: &[f64],
    grid: &TimeGrid,
    n: usize,
    phi: &Observable,
    seed: u64,
    config: &PicardConfig,
) -> Result<EstimatorReport> {
    let started = Instant::now();
    phi.validate(x0.len())?;
    if n < 2 {
        return Err(Error::param("N", "need at least two paths"));
    }
    let noise = Arc::new(NoiseBuffer::generate(
        seed,
        n,
        grid.steps(),
        x0.len(),
        grid.dt(),
    ));
    Ok(girsanov_run(drift, x0, grid, &noise, config)?.report(phi, started))
}

// ---------------------------------------------------------------------------
// Integrability
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntegrabilityCheck {
    pub pass: bool,
    /// `∫ Φ²ω_T` over the box.
    pub value: f64,
    /// Share of `value` from the outer shell `0.9R ≤ ‖y‖_∞ ≤ R`.
    pub tail_fraction: f64,
    pub reason: Option<String>,
}

/// Composite Simpson quadrature of `Φ²·ω_T`, `ω_T(y) = exp(−‖y‖²/(4T))`,
/// over `[−R, R]^d` with `R = 10√T`. Passes iff the value is finite and the
/// outer shell holds under 1% of it.
pub fn check_phi_integrability(phi: &Observable, d: usize, t: f64) -> Result<IntegrabilityCheck> {
    if !(1..=3).contains(&d) {
        return Err(Error::param("d", "quadrature supports 1 ≤ d ≤ 3"));
    }
    if !(t > 0.0 && t.is_finite()) {
        return Err(Error::param("T", "must be positive"));
    }
    phi.validate(d)?;
    let r = 10.0 * t.sqrt();
    // even interval counts so that 0.9R and 0 fall on nodes
    let intervals = match d {
        1 => 4000,
        2 => 800,
        _ => 160,
    };
    let h = 2.0 * r / intervals as f64;
    let nodes: Vec<(f64, f64)> = (0..=intervals)
        .map(|i| {
            let w = if i == 0 || i == intervals {
                1.0
            } else if i % 2 == 1 {
                4.0
            } else {
                2.0
            };
            (-r + i as f64 * h, w * h / 3.0)
        })
        .collect();
    let inner = 0.9 * r + 1e-9 * r;
    let total_points = nodes.len().pow(d as u32);
    let mut y = vec![0.0; d];
    let mut total = Vec::with_capacity(total_points);
    let mut shell = Vec::new();
    for flat in 0..total_points {
        let mut rem = flat;
        let mut w = 1.0;
        let mut outer = false;
        for c in y.iter_mut() {
            let (x, wx) = nodes[rem % nodes.len()];
            rem /= nodes.len();
            *c = x;
            w *= wx;
            outer |= x.abs() > inner;
        }
        let f = phi.eval(&y);
        if !f.is_finite() {
            return Ok(IntegrabilityCheck {
                pass: false,
                value: f64::NAN,
                tail_fraction: f64::NAN,
                reason: Some(format!("Φ is not finite at {y:?}")),
            });
        }
        let sq: f64 = y.iter().map(|v| v * v).sum();
        let v = w * f * f * (-sq / (4.0 * t)).exp();
        total.push(v);
        if outer {
            shell.push(v);
        }
    }
    let value = crate::stats::pairwise_sum(&total);
    let tail = crate::stats::pairwise_sum(&shell);
    let tail_fraction = if value > 0.0 { tail / value } else { 0.0 };
    let (pass, reason) = if !value.is_finite() {
        (false, Some("integral is not finite".to_string()))
    } else if tail_fraction >= 0.01 {
        (
            false,
            Some(format!(
                "outer shell holds {:.1}% of the integral; Φ²ω_T does not decay",
                100.0 * tail_fraction
            )),
        )
    } else {
        (true, None)
    };
    Ok(IntegrabilityCheck {
        pass,
        value,
        tail_fraction,
        reason,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::drift::{MeanFieldOu, SignAttractor, ZeroDrift};
    use crate::sde_solver::SamplePath;
    use crate::sensitivity::first_variation;

    fn grid(m: usize) -> TimeGrid {
        TimeGrid::new(1.0, m).unwrap()
    }

    #[test]
    fn weight_functions_are_normalized() {
        let g = TimeGrid::new(2.0, 37).unwrap();
        let kinds = [
            WeightKind::Uniform,
            WeightKind::IndicatorFront { tau: 1.0 },
            WeightKind::IndicatorFront { tau: 0.01 },
            WeightKind::Piecewise {
                breaks: vec![0.5, 1.5],
                levels: vec![1.0, 3.0, -0.5],
            },
        ];
        for kind in kinds {
            let a = WeightFunction::new(kind, &g).unwrap();
            let s: f64 = a.values().iter().sum::<f64>() * g.dt();
            assert!((s - 1.0).abs() < 1e-12);
            assert!((a.cumulative(37) - 1.0).abs() < 1e-12);
            assert_eq!(a.cumulative(0), 0.0);
        }
        let u = WeightFunction::uniform(&g);
        assert!((u.at(0) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn weight_function_validation() {
        let g = grid(10);
        assert!(WeightFunction::indicator_front(&g, 0.0).is_err());
        assert!(WeightFunction::new(
            WeightKind::Piecewise {
                breaks: vec![0.5],
                levels: vec![1.0]
            },
            &g
        )
        .is_err());
        assert!(WeightFunction::new(
            WeightKind::Piecewise {
                breaks: vec![0.5],
                levels: vec![1.0, -1.0]
            },
            &g
        )
        .is_err());
    }

    #[test]
    fn zero_drift_weight_is_scaled_brownian_endpoint() {
        let g = TimeGrid::new(2.0, 20).unwrap();
        let noise = Arc::new(NoiseBuffer::generate(9, 3, 20, 2, g.dt()));
        let bundle = driftless(&[0.0, 0.0], &g, &noise);
        let law = LawFlow::point_mass(&[0.0, 0.0], &g);
        let gxb = GradXbFlow::zero(Arc::new(ZeroDrift), 2, &g);
        let a = WeightFunction::uniform(&g);
        for p in 0..3 {
            let path: SamplePath = bundle.sample_path(p);
            let fv = first_variation(&ZeroDrift, &path, &law, &gxb, &g).unwrap();
            let w = bel_weight(&a, &fv, &gxb.along(&path), &path, &g).unwrap();
            let bt = bundle.terminal(p);
            for c in 0..2 {
                assert!((w[c] - bt[c] / 2.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn weight_from_parts_matches_flow_version() {
        let drift = MeanFieldOu::clipped(1.0, 0.5, 20.0, 1);
        let g = grid(30);
        let engine =
            BelEngine::prepare(Arc::new(drift), &[1.0], &g, 500, 3, &BelConfig::default()).unwrap();
        let a = WeightFunction::indicator_front(&g, 0.4).unwrap();
        let w = engine.weights(&[&a]).unwrap().pop().unwrap();
        for p in [0, 17, 499] {
            let path = engine.outcome().bundle.sample_path(p);
            let fv =
                first_variation(&drift, &path, &engine.outcome().law, engine.gxb(), &g).unwrap();
            let direct = bel_weight(&a, &fv, &engine.gxb().along(&path), &path, &g).unwrap();
            assert!((direct[0] - w[p]).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let g = grid(10);
        let noise = Arc::new(NoiseBuffer::generate(1, 1, 10, 1, g.dt()));
        let path = driftless(&[0.0], &g, &noise).sample_path(0);
        let law = LawFlow::point_mass(&[0.0], &g);
        let gxb = GradXbFlow::zero(Arc::new(ZeroDrift), 1, &g);
        let fv = first_variation(&ZeroDrift, &path, &law, &gxb, &g).unwrap();
        let a = WeightFunction::uniform(&grid(11));
        assert!(matches!(
            bel_weight(&a, &fv, &gxb.along(&path), &path, &g),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn unbounded_drift_is_refused() {
        let g = grid(10);
        let err = estimate_gradient(
            Arc::new(MeanFieldOu::new(1.0, 0.5)),
            &[1.0],
            &g,
            100,
            &WeightFunction::uniform(&g),
            &Observable::Coordinate { index: 0 },
            1,
            &BelConfig::default(),
        )
        .unwrap_err();
        match err {
            Error::HypothesisViolation(msg) => assert!(msg.contains("bounded")),
            e => panic!("{e}"),
        }
    }

    #[test]
    fn constant_observable_has_zero_gradient() {
        let g = grid(50);
        let r = estimate_gradient(
            Arc::new(SignAttractor::default()),
            &[0.3],
            &g,
            20_000,
            &WeightFunction::uniform(&g),
            &Observable::Constant { value: 2.0 },
            5,
            &BelConfig::default(),
        )
        .unwrap();
        assert!(r.within(&[0.0], 3.0), "{r:?}");
        assert_eq!(r.method, Method::Bel);
        assert_eq!(r.n, 20_000);
    }

    #[test]
    fn zero_drift_girsanov_weight_is_one() {
        let g = grid(20);
        let noise = Arc::new(NoiseBuffer::generate(2, 100, 20, 2, g.dt()));
        let run = girsanov_run(
            &ZeroDrift,
            &[0.5, 0.0],
            &g,
            &noise,
            &PicardConfig::default(),
        )
        .unwrap();
        assert!(run.weight.values.iter().all(|&e| e == 1.0));
        let phi = Observable::Coordinate { index: 0 };
        let plain: Vec<f64> = driftless(&[0.5, 0.0], &g, &noise)
            .states_at(20)
            .chunks(2)
            .map(|y| y[0])
            .collect();
        assert_eq!(run.samples(&phi), plain);
    }

    #[test]
    fn observables_evaluate() {
        let y = [0.5, -2.0];
        assert_eq!(Observable::Coordinate { index: 1 }.eval(&y), -2.0);
        assert_eq!(
            Observable::Indicator {
                index: 0,
                threshold: 0.0
            }
            .eval(&y),
            1.0
        );
        assert_eq!(
            Observable::Indicator {
                index: 1,
                threshold: 0.0
            }
            .eval(&y),
            0.0
        );
        assert_eq!(Observable::NormSquared.eval(&y), 4.25);
        assert_eq!(
            Observable::Linear {
                weights: vec![2.0, 1.0]
            }
            .eval(&y),
            -1.0
        );
        assert!(Observable::Coordinate { index: 2 }.validate(2).is_err());
        let parsed: Observable = serde_json::from_str(r#"{"name":"indicator","index":0}"#).unwrap();
        assert_eq!(
            parsed,
            Observable::Indicator {
                index: 0,
                threshold: 0.0
            }
        );
    }

    #[test]
    fn integrability_of_constant_is_gaussian_mass() {
        for (d, t) in [(1, 1.0), (2, 0.5), (3, 1.0)] {
            let c = check_phi_integrability(&Observable::Constant { value: 1.0 }, d, t).unwrap();
            let exact = (4.0 * std::f64::consts::PI * t).powf(d as f64 / 2.0);
            assert!(c.pass);
            assert!(
                (c.value - exact).abs() < 1e-3,
                "d={d}: {} vs {exact}",
                c.value
            );
        }
    }

    #[test]
    fn integrability_examples() {
        let c = check_phi_integrability(&Observable::Coordinate { index: 0 }, 1, 1.0).unwrap();
        assert!(c.pass);
        // ∫ y² e^{−y²/4} = 2√(4π)
        assert!((c.value - 2.0 * (4.0 * std::f64::consts::PI).sqrt()).abs() < 1e-3);
        let blow = Observable::ExpSquare { rate: 0.5 };
        for d in 1..=2 {
            let c = check_phi_integrability(&blow, d, 1.0).unwrap();
            assert!(!c.pass);
            assert!(c.reason.unwrap().contains("shell"));
        }
        let huge = Observable::ExpSquare { rate: 10.0 };
        let c = check_phi_integrability(&huge, 1, 1.0).unwrap();
        assert!(!c.pass);
        assert!(c.reason.unwrap().contains("not finite"));
        assert!(check_phi_integrability(&blow, 4, 1.0).is_err());
    }
}
