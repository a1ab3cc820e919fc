//! Pathwise derivatives along simulated paths.
//!
//! * Malliavin derivative `D_sX_t`: forward Euler product of `(I + ∇₂b_k Δt)`
//!   from `s` to `t`. This is a time-ordered product; when the generators
//!   `∇₂b(t_k, X_k, μ_k)` do not commute it differs from the matrix
//!   exponential of their integral.
//! * First variation `∇ₓX_t`: `Z_{k+1} = Z_k + (∇₂b_k Z_k + ∇ₓb_k) Δt`,
//!   `Z_0 = I`, where `∇ₓb_k = ∇ₓ b(t_k, y, law(X_{t_k}^x))|_{y = X_k}`.
//! * `∇ₓb` itself is obtained by central differences of the law flows
//!   started at `x0 ± h·e_j` (shared noise). Column `j` is the `x`-direction.

use std::path::Path;
use std::sync::Arc;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::drift::{jacobian_into, Drift};
use crate::linalg::{frobenius, identity, matmul, matmul_into, operator_norm};
use crate::noise::NoiseBuffer;
use crate::sde_solver::{picard_with_noise, LawFlow, PicardConfig, SamplePath, TimeGrid};
use crate::{Error, Result};

/// Which derivative a [`JacobianFlow`] holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum JacobianKind {
    FirstVariation,
    /// `D_{t_anchor} X_t`, defined for `t ≥ t_anchor`.
    Malliavin {
        anchor: usize,
    },
}

/// `d×d` matrices along one path, from the anchor step to `M`.
#[derive(Debug, Clone, PartialEq)]
pub struct JacobianFlow {
    dim: usize,
    kind: JacobianKind,
    start: usize,
    mats: Vec<f64>,
}

impl JacobianFlow {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn kind(&self) -> JacobianKind {
        self.kind
    }

    /// First step at which the flow is defined.
    pub fn start(&self) -> usize {
        self.start
    }

    /// Last step index `M`.
    pub fn end(&self) -> usize {
        self.start + self.mats.len() / (self.dim * self.dim) - 1
    }

    /// Row-major matrix at step `k`; `None` before the anchor.
    pub fn at(&self, k: usize) -> Option<&[f64]> {
        if k < self.start || k > self.end() {
            return None;
        }
        let dd = self.dim * self.dim;
        let i = k - self.start;
        Some(&self.mats[i * dd..(i + 1) * dd])
    }

    pub fn matrix(&self, k: usize) -> Option<DMatrix<f64>> {
        self.at(k)
            .map(|m| DMatrix::from_row_slice(self.dim, self.dim, m))
    }

    pub fn terminal(&self) -> &[f64] {
        self.at(self.end()).unwrap()
    }

    /// Largest spectral norm over the defined steps.
    pub fn max_operator_norm(&self) -> f64 {
        let dd = self.dim * self.dim;
        self.mats
            .chunks_exact(dd)
            .map(|m| operator_norm(self.dim, m))
            .fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.mats.iter().all(|v| v.is_finite())
    }

    /// One row per defined step: `t, m00, m01, …` (row-major entries).
    pub fn write_csv(&self, path: &Path, grid: &TimeGrid) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["t".to_string()];
        for i in 0..self.dim {
            for j in 0..self.dim {
                header.push(format!("m{i}{j}"));
            }
        }
        w.write_record(&header)?;
        for k in self.start..=self.end() {
            let mut row = vec![format!("{:e}", grid.time(k))];
            row.extend(self.at(k).unwrap().iter().map(|v| format!("{v:e}")));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// `∇₂b(t_k, X_k, μ_k)` for `k = 0..M-1`, row-major and concatenated.
pub fn spatial_generators(
    drift: &dyn Drift,
    path: &SamplePath,
    law: &LawFlow,
    grid: &TimeGrid,
) -> Result<Vec<f64>> {
    check_path(path, law, grid)?;
    let d = path.dim();
    let dd = d * d;
    let mut out = vec![0.0; grid.steps() * dd];
    for k in 0..grid.steps() {
        jacobian_into(
            drift,
            grid.time(k),
            path.state(k),
            law.at(k),
            &mut out[k * dd..(k + 1) * dd],
        )?;
    }
    Ok(out)
}

fn check_path(path: &SamplePath, law: &LawFlow, grid: &TimeGrid) -> Result<()> {
    if path.steps() != grid.steps() || law.len() != grid.steps() + 1 {
        return Err(Error::GridMismatch(format!(
            "path has {} steps, law {} points, grid {} steps",
            path.steps(),
            law.len(),
            grid.steps()
        )));
    }
    Ok(())
}

/// Malliavin flow anchored at `s_index` from precomputed generators.
pub fn malliavin_from_generators(
    generators: &[f64],
    dim: usize,
    dt: f64,
    s_index: usize,
) -> Result<JacobianFlow> {
    let dd = dim * dim;
    let steps = generators.len() / dd;
    if s_index > steps {
        return Err(Error::IndexOutOfRange {
            what: "anchor",
            index: s_index,
            len: steps + 1,
        });
    }
    let mut mats = Vec::with_capacity((steps - s_index + 1) * dd);
    mats.extend(identity(dim));
    let mut cur = identity(dim);
    let mut next = vec![0.0; dd];
    for k in s_index..steps {
        let g = &generators[k * dd..(k + 1) * dd];
        matmul_into(dim, g, &cur, &mut next);
        for (n, c) in next.iter_mut().zip(&cur) {
            *n = c + *n * dt;
        }
        std::mem::swap(&mut cur, &mut next);
        mats.extend_from_slice(&cur);
    }
    Ok(JacobianFlow {
        dim,
        kind: JacobianKind::Malliavin { anchor: s_index },
        start: s_index,
        mats,
    })
}

/// `D_{t_s} X_t` along `path` for `t_s ≤ t ≤ T`.
pub fn malliavin_derivative(
    drift: &dyn Drift,
    path: &SamplePath,
    law: &LawFlow,
    grid: &TimeGrid,
    s_index: usize,
) -> Result<JacobianFlow> {
    if s_index > grid.steps() {
        return Err(Error::IndexOutOfRange {
            what: "anchor",
            index: s_index,
            len: grid.steps() + 1,
        });
    }
    let gens = spatial_generators(drift, path, law, grid)?;
    malliavin_from_generators(&gens, path.dim(), grid.dt(), s_index)
}

/// Malliavin flows anchored at every step `from..=M`.
pub fn malliavin_family(
    drift: &dyn Drift,
    path: &SamplePath,
    law: &LawFlow,
    grid: &TimeGrid,
    from: usize,
) -> Result<Vec<JacobianFlow>> {
    let gens = spatial_generators(drift, path, law, grid)?;
    (from..=grid.steps())
        .map(|s| malliavin_from_generators(&gens, path.dim(), grid.dt(), s))
        .collect()
}

/// Default finite-difference step `1e-2·max(1, ‖x0‖)`.
pub fn default_fd_step(x0: &[f64]) -> f64 {
    1e-2 * crate::linalg::norm(x0).max(1.0)
}

/// Laws and terminal states of the Picard solutions started at `x0 ± h·e_j`,
/// all on one noise buffer.
#[derive(Debug, Clone)]
pub struct PerturbedLaws {
    pub h: f64,
    pub plus: Vec<Perturbed>,
    pub minus: Vec<Perturbed>,
}

#[derive(Debug, Clone)]
pub struct Perturbed {
    pub law: LawFlow,
    /// `X_T` of every path, `N × d`.
    pub terminal: Vec<f64>,
    pub trace: Vec<f64>,
}

/// Solves the `2d` perturbed mean-field equations with shared noise.
///
/// Every run performs the same number of Picard iterations from the same
/// kind of starting flow, so that their iteration errors largely cancel in
/// the differences; runs that met the tolerance early are repeated with the
/// common count.
pub fn perturbed_laws(
    drift: &dyn Drift,
    x0: &[f64],
    grid: &TimeGrid,
    noise: &Arc<NoiseBuffer>,
    h: f64,
    config: &PicardConfig,
) -> Result<PerturbedLaws> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::param("h", "finite-difference step must be positive"));
    }
    let d = x0.len();
    let start = |j: usize, sign: f64| {
        let mut s = x0.to_vec();
        s[j] += sign * h;
        s
    };
    let solve = |j: usize, sign: f64, cfg: &PicardConfig| -> Result<Perturbed> {
        let out = picard_with_noise(drift, &start(j, sign), grid, noise, None, cfg)?;
        Ok(Perturbed {
            terminal: out.bundle.states_at(grid.steps()).to_vec(),
            law: out.law,
            trace: out.trace,
        })
    };
    let mut runs = Vec::with_capacity(2 * d);
    for j in 0..d {
        for sign in [1.0, -1.0] {
            runs.push(solve(j, sign, config)?);
        }
    }
    let common = runs.iter().map(|r| r.trace.len()).max().unwrap_or(1);
    let fixed = PicardConfig {
        min_iter: common,
        max_iter: config.max_iter.max(common),
        ..*config
    };
    for (i, r) in runs.iter_mut().enumerate() {
        if r.trace.len() < common {
            let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
            *r = solve(i / 2, sign, &fixed)?;
        }
    }
    let mut plus = Vec::with_capacity(d);
    let mut minus = Vec::with_capacity(d);
    for (i, r) in runs.into_iter().enumerate() {
        if i % 2 == 0 {
            plus.push(r);
        } else {
            minus.push(r);
        }
    }
    Ok(PerturbedLaws { h, plus, minus })
}

/// `∇ₓ b(t_k, y, law(X_{t_k}^x))` as a function of `(k, y)`.
#[derive(Debug, Clone)]
pub struct GradXbFlow {
    drift: Arc<dyn Drift>,
    dim: usize,
    grid: TimeGrid,
    h: f64,
    laws: Option<(Vec<LawFlow>, Vec<LawFlow>)>,
}

impl GradXbFlow {
    /// Identically zero: the drift does not read the law.
    pub fn zero(drift: Arc<dyn Drift>, dim: usize, grid: &TimeGrid) -> Self {
        GradXbFlow {
            drift,
            dim,
            grid: *grid,
            h: 0.0,
            laws: None,
        }
    }

    pub fn from_perturbed(drift: Arc<dyn Drift>, grid: &TimeGrid, p: &PerturbedLaws) -> Self {
        GradXbFlow {
            drift,
            dim: p.plus.len(),
            grid: *grid,
            h: p.h,
            laws: Some((
                p.plus.iter().map(|x| x.law.clone()).collect(),
                p.minus.iter().map(|x| x.law.clone()).collect(),
            )),
        }
    }

    pub fn step(&self) -> f64 {
        self.h
    }

    pub fn is_zero(&self) -> bool {
        self.laws.is_none()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Writes the row-major `d×d` matrix at `(k, y)` into `out`.
    pub fn eval_into(&self, k: usize, y: &[f64], out: &mut [f64]) {
        let d = self.dim;
        let Some((plus, minus)) = &self.laws else {
            out.fill(0.0);
            return;
        };
        let t = self.grid.time(k);
        let mut bp = vec![0.0; d];
        let mut bm = vec![0.0; d];
        for j in 0..d {
            self.drift.eval(t, y, plus[j].at(k), &mut bp);
            self.drift.eval(t, y, minus[j].at(k), &mut bm);
            for i in 0..d {
                out[i * d + j] = (bp[i] - bm[i]) / (2.0 * self.h);
            }
        }
    }

    pub fn eval(&self, k: usize, y: &[f64]) -> DMatrix<f64> {
        let mut out = vec![0.0; self.dim * self.dim];
        self.eval_into(k, y, &mut out);
        DMatrix::from_row_slice(self.dim, self.dim, &out)
    }

    /// `∇ₓb` along a path, `k = 0..M-1`, concatenated.
    pub fn along(&self, path: &SamplePath) -> Vec<f64> {
        let dd = self.dim * self.dim;
        let mut out = vec![0.0; self.grid.steps() * dd];
        for k in 0..self.grid.steps() {
            self.eval_into(k, path.state(k), &mut out[k * dd..(k + 1) * dd]);
        }
        out
    }
}

/// Builds `∇ₓb` by differencing Picard law flows at `x0 ± h·e_j`.
///
/// Drifts that declare a zero law-Lipschitz constant do not read the law and
/// get [`GradXbFlow::zero`] without any extra solves.
pub fn grad_x_b(
    drift: Arc<dyn Drift>,
    x0: &[f64],
    grid: &TimeGrid,
    n: usize,
    h: f64,
    seed: u64,
    config: &PicardConfig,
) -> Result<GradXbFlow> {
    let noise = Arc::new(NoiseBuffer::generate(
        seed,
        n,
        grid.steps(),
        x0.len(),
        grid.dt(),
    ));
    grad_x_b_with_noise(drift, x0, grid, &noise, h, config)
}

pub fn grad_x_b_with_noise(
    drift: Arc<dyn Drift>,
    x0: &[f64],
    grid: &TimeGrid,
    noise: &Arc<NoiseBuffer>,
    h: f64,
    config: &PicardConfig,
) -> Result<GradXbFlow> {
    let meta = drift.metadata();
    match meta.law_lipschitz {
        None => Err(Error::HypothesisViolation(format!(
            "`{}` declares no Lipschitz constant in the law",
            drift.name()
        ))),
        Some(l) if l == 0.0 => Ok(GradXbFlow::zero(drift, x0.len(), grid)),
        Some(_) => {
            let p = perturbed_laws(drift.as_ref(), x0, grid, noise, h, config)?;
            Ok(GradXbFlow::from_perturbed(drift, grid, &p))
        }
    }
}

/// First variation from precomputed generators and `∇ₓb` along the path.
pub fn first_variation_from_parts(
    generators: &[f64],
    gxb: &[f64],
    dim: usize,
    dt: f64,
) -> JacobianFlow {
    let dd = dim * dim;
    let steps = generators.len() / dd;
    let mut mats = Vec::with_capacity((steps + 1) * dd);
    mats.extend(identity(dim));
    let mut cur = identity(dim);
    let mut next = vec![0.0; dd];
    for k in 0..steps {
        let g = &generators[k * dd..(k + 1) * dd];
        matmul_into(dim, g, &cur, &mut next);
        for ((n, c), s) in next.iter_mut().zip(&cur).zip(&gxb[k * dd..(k + 1) * dd]) {
            *n = c + (*n + s) * dt;
        }
        std::mem::swap(&mut cur, &mut next);
        mats.extend_from_slice(&cur);
    }
    JacobianFlow {
        dim,
        kind: JacobianKind::FirstVariation,
        start: 0,
        mats,
    }
}

/// `∇ₓX_t` along `path`.
pub fn first_variation(
    drift: &dyn Drift,
    path: &SamplePath,
    law: &LawFlow,
    gxb: &GradXbFlow,
    grid: &TimeGrid,
) -> Result<JacobianFlow> {
    if gxb.dim() != path.dim() {
        return Err(Error::DimensionMismatch {
            expected: path.dim(),
            found: gxb.dim(),
        });
    }
    let gens = spatial_generators(drift, path, law, grid)?;
    Ok(first_variation_from_parts(
        &gens,
        &gxb.along(path),
        path.dim(),
        grid.dt(),
    ))
}

/// Which Malliavin factor multiplies `∇ₓb(t_k)` in the representation sum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RepresentationRule {
    /// `D_{t_k} X_T`: the Riemann sum of the continuous-time identity;
    /// first-order in `Δt`.
    LeftPoint,
    /// `D_{t_{k+1}} X_T`: the identity satisfied exactly by the Euler
    /// recursions, so the residual is rounding only.
    RightPoint,
}

/// Frobenius residual of
/// `∇ₓX_T − [D_sX_T·∇ₓX_s + Σ_{k≥s} D_{·}X_T·∇ₓb(t_k, X_k)·Δt]`.
///
/// `family` must hold Malliavin flows anchored at every step `s..=M`.
pub fn check_representation(
    fv: &JacobianFlow,
    family: &[JacobianFlow],
    gxb: &GradXbFlow,
    path: &SamplePath,
    grid: &TimeGrid,
    s_index: usize,
    rule: RepresentationRule,
) -> Result<f64> {
    let d = fv.dim();
    let m = grid.steps();
    if s_index > m {
        return Err(Error::IndexOutOfRange {
            what: "s",
            index: s_index,
            len: m + 1,
        });
    }
    let anchored = |k: usize| -> Result<&[f64]> {
        family
            .iter()
            .find(|f| f.kind() == JacobianKind::Malliavin { anchor: k })
            .map(|f| f.terminal())
            .ok_or(Error::IndexOutOfRange {
                what: "Malliavin anchor",
                index: k,
                len: family.len(),
            })
    };
    let zs = fv.at(s_index).ok_or(Error::IndexOutOfRange {
        what: "first variation step",
        index: s_index,
        len: m + 1,
    })?;
    let mut rhs = matmul(d, anchored(s_index)?, zs);
    let mut g = vec![0.0; d * d];
    for k in s_index..m {
        gxb.eval_into(k, path.state(k), &mut g);
        let factor = match rule {
            RepresentationRule::LeftPoint => anchored(k)?,
            RepresentationRule::RightPoint => anchored(k + 1)?,
        };
        let term = matmul(d, factor, &g);
        for (r, t) in rhs.iter_mut().zip(&term) {
            *r += t * grid.dt();
        }
    }
    let diff: Vec<f64> = fv.terminal().iter().zip(&rhs).map(|(a, b)| a - b).collect();
    Ok(frobenius(&diff))
}

/// Samples of `‖∇ₓX_{t_k}‖_F^p` over all paths of a bundle, for moment checks.
pub fn first_variation_moments(
    drift: &dyn Drift,
    bundle: &crate::sde_solver::PathBundle,
    law: &LawFlow,
    gxb: &GradXbFlow,
    k: usize,
    p: f64,
) -> Result<Vec<f64>> {
    (0..bundle.n_paths())
        .into_par_iter()
        .map(|i| {
            let path = bundle.sample_path(i);
            let fv = first_variation(drift, &path, law, gxb, bundle.grid())?;
            Ok(frobenius(fv.at(k).unwrap()).powf(p))
        })
        .collect()
}
