//! Reference values: finite-difference gradients with common random numbers,
//! the mean-field Ornstein–Uhlenbeck closed form, and a matrix exponential.

use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::bel::{EstimatorReport, Method, Observable};
use crate::drift::Drift;
use crate::linalg::{identity, matmul};
use crate::noise::NoiseBuffer;
use crate::sde_solver::{PicardConfig, TimeGrid};
use crate::sensitivity::{perturbed_laws, PerturbedLaws};
use crate::{Error, Result};

/// Central-difference estimate of `∇ₓE[Φ(X_T^x)]` from already solved
/// `x0 ± h·e_j` runs; the standard error comes from per-path differences.
pub fn fd_from_perturbed(
    p: &PerturbedLaws,
    phi: &Observable,
    seed: u64,
    started: Instant,
) -> EstimatorReport {
    let d = p.plus.len();
    let n = p.plus[0].terminal.len() / d;
    let mut samples = vec![0.0; n * d];
    for j in 0..d {
        let plus = p.plus[j].terminal.chunks_exact(d);
        let minus = p.minus[j].terminal.chunks_exact(d);
        for (i, (yp, ym)) in plus.zip(minus).enumerate() {
            samples[i * d + j] = (phi.eval(yp) - phi.eval(ym)) / (2.0 * p.h);
        }
    }
    EstimatorReport::from_samples(Method::Fd, &samples, d, seed, started)
}

/// Finite-difference gradient with the same noise for all `2d` runs.
pub fn fd_gradient(
    drift: &dyn Drift,
    x0: &[f64],
    grid: &TimeGrid,
    n: usize,
    h: f64,
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
    let p = perturbed_laws(drift, x0, grid, &noise, h, config)?;
    Ok(fd_from_perturbed(&p, phi, seed, started))
}

/// Mean-field OU `b = −α·y + β·mean(μ)`, componentwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OUParams {
    pub alpha: f64,
    pub beta: f64,
    pub x0: Vec<f64>,
    pub t: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OUClosedForm {
    /// `m(T) = x0·e^{(β−α)T}`.
    pub mean: Vec<f64>,
    /// Variance of each coordinate of `X_T`.
    pub variance: f64,
    /// `dm/dx0 = e^{(β−α)T}` (the Jacobian is this times `I`).
    pub gradient: f64,
}

pub fn ou_closed_form(p: &OUParams) -> Result<OUClosedForm> {
    if !(p.alpha >= 0.0) || !p.beta.is_finite() || !(p.t >= 0.0) {
        return Err(Error::param("ou", "need α ≥ 0, finite β, T ≥ 0"));
    }
    let gradient = ((p.beta - p.alpha) * p.t).exp();
    let variance = if p.alpha > 0.0 {
        -(-2.0 * p.alpha * p.t).exp_m1() / (2.0 * p.alpha)
    } else {
        p.t
    };
    let out = OUClosedForm {
        mean: p.x0.iter().map(|x| x * gradient).collect(),
        variance,
        gradient,
    };
    if out.mean.iter().all(|m| m.is_finite()) && variance.is_finite() {
        Ok(out)
    } else {
        Err(Error::param("ou", "closed form overflows on [0, T]"))
    }
}

/// `exp(tA)` for a row-major `d×d` matrix by scaling and squaring of a
/// truncated Taylor series.
pub fn matrix_exp(d: usize, a: &[f64], t: f64) -> Result<Vec<f64>> {
    if a.len() != d * d {
        return Err(Error::DimensionMismatch {
            expected: d * d,
            found: a.len(),
        });
    }
    if d == 0 || d > 8 {
        return Err(Error::param("d", "matrix exponential supports 1 ≤ d ≤ 8"));
    }
    let scaled: Vec<f64> = a.iter().map(|v| v * t).collect();
    if scaled.iter().any(|v| !v.is_finite()) {
        return Err(Error::param("A", "entries must be finite"));
    }
    // infinity norm; bring it below 1/2
    let norm = (0..d)
        .map(|i| {
            scaled[i * d..(i + 1) * d]
                .iter()
                .map(|v| v.abs())
                .sum::<f64>()
        })
        .fold(0.0, f64::max);
    let squarings = if norm > 0.5 {
        (norm / 0.5).log2().ceil() as u32
    } else {
        0
    };
    let s = 0.5f64.powi(squarings as i32);
    let b: Vec<f64> = scaled.iter().map(|v| v * s).collect();
    let mut sum = identity(d);
    let mut term = identity(d);
    for k in 1..=20 {
        term = matmul(d, &term, &b);
        term.iter_mut().for_each(|v| *v /= k as f64);
        sum.iter_mut().zip(&term).for_each(|(s, t)| *s += t);
    }
    for _ in 0..squarings {
        sum = matmul(d, &sum, &sum);
    }
    Ok(sum)
}
