use std::sync::Arc;

use mfgrad::bel::{
    component_estimates, girsanov_estimate, BelConfig, BelEngine, Observable, WeightFunction,
};
use mfgrad::drift::{ConstantDrift, Drift, LinearDrift, MeanFieldOu, SignAttractor, ZeroDrift};
use mfgrad::oracle::fd_gradient;
use mfgrad::sde_solver::{picard_law_iteration, PicardConfig, TimeGrid};
use mfgrad::stats::MeanEstimate;

/// Composite Simpson rule on `[lo, hi]` with `n` (even) intervals.
fn simpson(f: impl Fn(f64) -> f64, lo: f64, hi: f64, n: usize) -> f64 {
    let h = (hi - lo) / n as f64;
    let inner: f64 = (1..n)
        .map(|i| f(lo + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 })
        .sum();
    (f(lo) + f(hi) + inner) * h / 3.0
}

fn gaussian(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

#[test]
fn weight_variance_matches_quadrature_without_drift() {
    // b = 0 and a uniform: the sample is tanh(x + B_T)·B_T / T
    let (x, t) = (0.3, 1.0);
    let g = TimeGrid::new(t, 20).unwrap();
    let drift: Arc<dyn Drift> = Arc::new(ZeroDrift);
    let engine = BelEngine::prepare(drift, &[x], &g, 60_000, 2, &BelConfig::default()).unwrap();
    let phi = Observable::Tanh { index: 0 };
    let w = engine.weights(&[&WeightFunction::uniform(&g)]).unwrap();
    let est = component_estimates(&engine.samples(&w[0], &phi), 1)[0];
    let sample = |z: f64| (x + z * t.sqrt()).tanh() * z / t.sqrt();
    let first = simpson(|z| sample(z) * gaussian(z), -10.0, 10.0, 4000);
    let second = simpson(|z| sample(z).powi(2) * gaussian(z), -10.0, 10.0, 4000);
    let variance = second - first * first;
    assert!(
        (est.variance - variance).abs() / variance < 0.05,
        "{} vs {variance}",
        est.variance
    );
    // and the mean is E[sech²(x + B_T)]
    let exact = simpson(
        |z| (1.0 - (x + z).tanh().powi(2)) * gaussian(z),
        -10.0,
        10.0,
        4000,
    );
    assert!(est.within(exact, 3.0), "{est:?} vs {exact}");
}

#[test]
fn weight_choice_does_not_move_the_estimate() {
    let g = TimeGrid::new(1.0, 50).unwrap();
    let drift: Arc<dyn Drift> = Arc::new(MeanFieldOu::clipped_for(1.0, 0.5, &[1.0]));
    let engine = BelEngine::prepare(drift, &[1.0], &g, 20_000, 3, &BelConfig::default()).unwrap();
    let phi = Observable::Coordinate { index: 0 };
    let u = WeightFunction::uniform(&g);
    let f = WeightFunction::indicator_front(&g, 0.3).unwrap();
    let w = engine.weights(&[&u, &f]).unwrap();
    let eu = component_estimates(&engine.samples(&w[0], &phi), 1)[0];
    let ef = component_estimates(&engine.samples(&w[1], &phi), 1)[0];
    assert!((eu.mean - ef.mean).abs() <= 3.0 * (eu.std_error + ef.std_error));
    // front-loaded weights are noisier
    assert!(ef.std_error > eu.std_error);
}

#[test]
fn girsanov_recovers_a_constant_shift() {
    let g = TimeGrid::new(1.0, 50).unwrap();
    let drift = ConstantDrift {
        value: vec![0.4, -0.3],
    };
    let phi = Observable::Coordinate { index: 1 };
    let r = girsanov_estimate(
        &drift,
        &[0.0, 1.0],
        &g,
        40_000,
        &phi,
        5,
        &PicardConfig::default(),
    )
    .unwrap();
    assert!(r.within(&[0.7], 3.0), "{r:?}");
}

#[test]
fn finite_differences_on_a_linear_drift() {
    // with shared noise X^{x+h} − X^{x−h} = 2h(1 − Δt)^M exactly
    let m = 100;
    let g = TimeGrid::new(1.0, m).unwrap();
    let drift = LinearDrift::new(1, vec![-1.0]).unwrap();
    let phi = Observable::Coordinate { index: 0 };
    let r = fd_gradient(
        &drift,
        &[0.5],
        &g,
        1000,
        0.01,
        &phi,
        6,
        &PicardConfig::default(),
    )
    .unwrap();
    let euler = (1.0 - g.dt()).powi(m as i32);
    assert!((r.estimate[0] - euler).abs() < 1e-10);
    assert!(r.std_error[0] < 1e-10);
    assert!((r.estimate[0] - (-1.0f64).exp()).abs() < 0.01);
}

#[test]
fn expectation_is_lipschitz_in_the_initial_point() {
    let g = TimeGrid::new(1.0, 50).unwrap();
    let phi = Observable::Tanh { index: 0 };
    let drift = SignAttractor::default();
    let cfg = PicardConfig::default();
    let value = |x: f64| {
        let out = picard_law_iteration(&drift, &[x], &g, 20_000, &cfg, 9).unwrap();
        let s: Vec<f64> = out
            .bundle
            .states_at(50)
            .iter()
            .map(|y| phi.eval(&[*y]))
            .collect();
        MeanEstimate::from_samples(&s)
    };
    let xs = [-0.4, 0.0, 0.4];
    let vals: Vec<MeanEstimate> = xs.iter().map(|&x| value(x)).collect();
    // |tanh'| ≤ 1 and the flow is non-expansive up to the law term: slope stays below 2
    for w in vals.windows(2) {
        let slope = (w[1].mean - w[0].mean).abs() / 0.4;
        assert!(slope < 2.0, "{slope}");
    }
}

#[test]
fn paths_of_a_bounded_drift_stay_within_their_pathwise_bound() {
    // |X_t| ≤ |x0| + C_b·t + |B_t|, so sup-moments are finite
    let g = TimeGrid::new(1.0, 100).unwrap();
    let drift = SignAttractor::default();
    let out = picard_law_iteration(&drift, &[0.5], &g, 2000, &PicardConfig::default(), 10).unwrap();
    let bound = drift.metadata().bound.unwrap();
    for i in 0..2000 {
        let b = out.bundle.noise().brownian_path(i);
        for k in 0..=100 {
            let x = out.bundle.state(k, i)[0];
            assert!(x.abs() <= 0.5 + bound * g.time(k) + b[k].abs() + 1e-12);
        }
    }
    for p in [1.0, 2.0, 4.0] {
        let m = MeanEstimate::from_samples(&out.bundle.sup_norm_powers(p));
        assert!(m.mean.is_finite() && m.mean < (0.5 + bound + 4.0f64).powf(p));
    }
}

#[test]
fn automatic_clip_is_essentially_inactive_for_the_ou_benchmark() {
    let g = TimeGrid::new(1.0, 200).unwrap();
    let drift = MeanFieldOu::clipped_for(1.0, 0.5, &[1.0]);
    let out = picard_law_iteration(&drift, &[1.0], &g, 5000, &PicardConfig::default(), 12).unwrap();
    let mut active = 0usize;
    for k in 0..200 {
        for i in 0..5000 {
            active += drift.clip_active(out.bundle.state(k, i), out.law.at(k)) as usize;
        }
    }
    assert!((active as f64) < 1e-3 * 200.0 * 5000.0, "{active}");
}
