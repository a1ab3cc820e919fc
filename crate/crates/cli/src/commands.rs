//! The five subcommands.

use std::sync::Arc;
use std::time::Instant;

use mfgrad::bel::{
    component_estimates, girsanov_from_law, BelConfig, BelEngine, EstimatorReport, Method,
    Observable, WeightFunction,
};
use mfgrad::drift::{probe_metadata, Drift};
use mfgrad::noise::NoiseBuffer;
use mfgrad::oracle::fd_from_perturbed;
use mfgrad::sde_solver::{picard_with_noise, PicardOutcome, TimeGrid};
use mfgrad::sensitivity::{default_fd_step, perturbed_laws};
use mfgrad::stats::{linear_fit, MeanEstimate};
use serde::Serialize;

use crate::config::{Command, ExperimentConfig, MethodChoice};
use crate::output::{num, Output};
use crate::{CliError, Overrides, RunManifest};

/// Validates `config` for `command`, applies overrides, and runs it.
pub fn run(
    command: Command,
    mut config: ExperimentConfig,
    overrides: &Overrides,
) -> Result<RunManifest, CliError> {
    if let Some(seed) = overrides.seed {
        config.seed = seed;
    }
    let dir = overrides
        .out
        .clone()
        .or_else(|| config.output.clone())
        .ok_or_else(|| CliError::Config("no output directory (`output` or --out)".into()))?;
    config.validate(command)?;
    let out = Output::create(&dir, &config.digest())?;
    match command {
        Command::Simulate => simulate(&config, out),
        Command::Gradient => gradient(&config, out),
        Command::HolderScan => holder_scan(&config, out),
        Command::ValidateDrift => validate_drift(&config, out),
        Command::PhiCheck => phi_check(&config, out),
    }
}

struct Setup {
    drift: Arc<dyn Drift>,
    grid: TimeGrid,
    noise: Arc<NoiseBuffer>,
}

fn setup(cfg: &ExperimentConfig, out: &mut Output) -> Result<Setup, CliError> {
    let drift = cfg.drift.build(cfg.d, &cfg.x0)?;
    let grid = cfg.grid()?;
    let noise = out.stage("noise", || {
        Arc::new(NoiseBuffer::generate(
            cfg.seed,
            cfg.n,
            cfg.m,
            cfg.d,
            grid.dt(),
        ))
    });
    Ok(Setup { drift, grid, noise })
}

fn trace_rows(trace: &[f64]) -> Vec<Vec<String>> {
    trace
        .iter()
        .enumerate()
        .map(|(i, d)| vec![(i + 1).to_string(), num(*d)])
        .collect()
}

/// Writes the trace even when the iteration failed, then passes the result on.
fn with_trace(
    out: &mut Output,
    result: mfgrad::Result<PicardOutcome>,
) -> Result<PicardOutcome, CliError> {
    let trace = match &result {
        Ok(o) => o.trace.clone(),
        Err(mfgrad::Error::PicardNotConverged { trace, .. }) => trace.clone(),
        Err(_) => Vec::new(),
    };
    if !trace.is_empty() {
        out.csv(
            "picard_trace.csv",
            &["iteration", "distance"],
            &trace_rows(&trace),
        )?;
    }
    Ok(result?)
}

fn simulate(cfg: &ExperimentConfig, mut out: Output) -> Result<RunManifest, CliError> {
    let s = setup(cfg, &mut out)?;
    let result = out.stage("picard", || {
        picard_with_noise(
            s.drift.as_ref(),
            &cfg.x0,
            &s.grid,
            &s.noise,
            None,
            &cfg.picard(),
        )
    });
    let outcome = with_trace(&mut out, result)?;
    let d = cfg.d;
    let mut header = vec!["t".to_string()];
    for prefix in ["mean", "std_error", "variance"] {
        header.extend((0..d).map(|c| format!("{prefix}_{c}")));
    }
    let rows: Vec<Vec<String>> = (0..=cfg.m)
        .map(|k| {
            let est: Vec<MeanEstimate> = (0..d).map(|c| outcome.bundle.mean_at(k, c)).collect();
            let mut row = vec![num(s.grid.time(k))];
            row.extend(est.iter().map(|e| num(e.mean)));
            row.extend(est.iter().map(|e| num(e.std_error)));
            row.extend(est.iter().map(|e| num(e.variance)));
            row
        })
        .collect();
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    out.csv("moments.csv", &header, &rows)?;
    if cfg.simulate.write_flow {
        let comment = format!("config_digest={}", out.digest());
        let dir = out.dir().join("flow");
        let files = out.stage("write_flow", || {
            outcome.flow().write_dir_annotated(&dir, Some(&comment))
        })?;
        out.record(files.into_iter().map(|f| format!("flow/{f}")));
    }
    if cfg.simulate.dump_paths {
        let dir = out.dir().join("paths");
        let drift_json = serde_json::to_value(&cfg.drift).map_err(mfgrad::Error::from)?;
        let files = out.stage("write_paths", || {
            outcome.bundle.write_dump(&dir, drift_json)
        })?;
        out.record(files.into_iter().map(|f| format!("paths/{f}")));
    }
    out.finish("simulate", cfg.seed, outcome.trace)
}

fn report_name(method: &str, phi: usize, weight: Option<usize>) -> String {
    match weight {
        Some(w) => format!("report_{method}_phi{phi}_a{w}.json"),
        None => format!("report_{method}_phi{phi}.json"),
    }
}

fn estimate_rows(
    rows: &mut Vec<Vec<String>>,
    method: &str,
    weight: &str,
    phi: usize,
    est: &[MeanEstimate],
) {
    for (c, e) in est.iter().enumerate() {
        rows.push(vec![
            method.into(),
            weight.into(),
            phi.to_string(),
            c.to_string(),
            num(e.mean),
            num(e.std_error),
            num(e.variance),
        ]);
    }
}

fn report(
    method: Method,
    est: &[MeanEstimate],
    cfg: &ExperimentConfig,
    digest: &str,
    runtime_ms: u64,
) -> EstimatorReport {
    EstimatorReport {
        estimate: est.iter().map(|e| e.mean).collect(),
        std_error: est.iter().map(|e| e.std_error).collect(),
        n: cfg.n,
        seed: cfg.seed,
        config_digest: Some(digest.to_string()),
        method,
        runtime_ms,
    }
}

fn gradient(cfg: &ExperimentConfig, mut out: Output) -> Result<RunManifest, CliError> {
    let s = setup(cfg, &mut out)?;
    let d = cfg.d;
    let phis = cfg.phis()?;
    let digest = out.digest().to_string();
    let methods = &cfg.estimator.methods;
    let bel_config = BelConfig {
        picard: cfg.picard(),
        h: cfg.estimator.h,
        mollifier: cfg.estimator.mollifier,
    };
    let mut rows = Vec::new();
    let mut trace = Vec::new();
    let mut engine: Option<BelEngine> = None;
    let mut bel_first: Vec<Vec<MeanEstimate>> = Vec::new();

    if methods.contains(&MethodChoice::Bel) {
        let started = Instant::now();
        let e = out.stage("bel_prepare", || {
            BelEngine::prepare_with_noise(
                s.drift.clone(),
                &cfg.x0,
                &s.grid,
                s.noise.clone(),
                &bel_config,
            )
        });
        let e = match e {
            Err(err @ mfgrad::Error::PicardNotConverged { .. }) => {
                with_trace(&mut out, Err(err))?;
                unreachable!()
            }
            other => other?,
        };
        trace = e.outcome().trace.clone();
        let weights = cfg
            .estimator
            .weights
            .iter()
            .map(|k| WeightFunction::new(k.clone(), &s.grid))
            .collect::<mfgrad::Result<Vec<_>>>()?;
        let refs: Vec<&WeightFunction> = weights.iter().collect();
        let blocks = out.stage("bel_weights", || e.weights(&refs))?;
        let runtime = started.elapsed().as_millis() as u64;
        let mut weight_rows = Vec::new();
        for (w, block) in blocks.iter().enumerate() {
            for (c, m) in component_estimates(block, d).iter().enumerate() {
                weight_rows.push(vec![
                    w.to_string(),
                    c.to_string(),
                    num(m.mean),
                    num(m.std_error),
                ]);
            }
            for (p, phi) in phis.iter().enumerate() {
                let est = component_estimates(&e.samples(block, phi), d);
                estimate_rows(&mut rows, "bel", &w.to_string(), p, &est);
                out.json(
                    &report_name("bel", p, Some(w)),
                    &report(Method::Bel, &est, cfg, &digest, runtime),
                )?;
                if w == 0 {
                    bel_first.push(est);
                }
            }
        }
        out.csv(
            "bel_weight.csv",
            &["weight", "component", "mean", "std_error"],
            &weight_rows,
        )?;
        engine = Some(e);
    }

    let mut fd_all: Vec<Vec<MeanEstimate>> = Vec::new();
    if methods.contains(&MethodChoice::Fd) {
        let started = Instant::now();
        let perturbed = match engine.as_mut() {
            Some(e) => out.stage("fd", || e.perturbed().cloned())?,
            None => out.stage("fd", || {
                let h = cfg.estimator.h.unwrap_or_else(|| default_fd_step(&cfg.x0));
                perturbed_laws(
                    s.drift.as_ref(),
                    &cfg.x0,
                    &s.grid,
                    &s.noise,
                    h,
                    &cfg.picard(),
                )
            })?,
        };
        let runtime = started.elapsed().as_millis() as u64;
        for (p, phi) in phis.iter().enumerate() {
            let r = fd_from_perturbed(&perturbed, phi, cfg.seed, started);
            let est: Vec<MeanEstimate> = r
                .estimate
                .iter()
                .zip(&r.std_error)
                .map(|(m, se)| MeanEstimate {
                    mean: *m,
                    std_error: *se,
                    variance: se * se * cfg.n as f64,
                    n: cfg.n,
                })
                .collect();
            estimate_rows(&mut rows, "fd", "-", p, &est);
            out.json(
                &report_name("fd", p, None),
                &report(Method::Fd, &est, cfg, &digest, runtime),
            )?;
            fd_all.push(est);
        }
    }

    if !bel_first.is_empty() && !fd_all.is_empty() {
        let mut cmp = Vec::new();
        for (p, (bel, fd)) in bel_first.iter().zip(&fd_all).enumerate() {
            for c in 0..d {
                let diff = (bel[c].mean - fd[c].mean).abs();
                let tol = 3.0 * (bel[c].std_error + fd[c].std_error);
                cmp.push(vec![
                    p.to_string(),
                    c.to_string(),
                    num(bel[c].mean),
                    num(bel[c].std_error),
                    num(fd[c].mean),
                    num(fd[c].std_error),
                    num(diff),
                    num(tol),
                    (diff <= tol).to_string(),
                ]);
            }
        }
        out.csv(
            "comparison.csv",
            &[
                "phi",
                "component",
                "bel",
                "bel_se",
                "fd",
                "fd_se",
                "abs_diff",
                "tolerance",
                "agree",
            ],
            &cmp,
        )?;
    }

    if methods.contains(&MethodChoice::GirsanovCheck) {
        let started = Instant::now();
        let (law, bundle_terminal, picard_trace) = match engine.as_ref() {
            Some(e) => (
                e.outcome().law.clone(),
                e.outcome().bundle.states_at(cfg.m).to_vec(),
                e.outcome().trace.clone(),
            ),
            None => {
                let result = out.stage("picard", || {
                    picard_with_noise(
                        s.drift.as_ref(),
                        &cfg.x0,
                        &s.grid,
                        &s.noise,
                        None,
                        &cfg.picard(),
                    )
                });
                let o = with_trace(&mut out, result)?;
                (
                    o.law.clone(),
                    o.bundle.states_at(cfg.m).to_vec(),
                    o.trace.clone(),
                )
            }
        };
        if trace.is_empty() {
            trace = picard_trace.clone();
        }
        let run = out.stage("girsanov", || {
            girsanov_from_law(
                s.drift.as_ref(),
                &law,
                picard_trace,
                &cfg.x0,
                &s.grid,
                &s.noise,
            )
        })?;
        let runtime = started.elapsed().as_millis() as u64;
        let w = run.weight.mean();
        let mut g_rows = Vec::new();
        for (p, phi) in phis.iter().enumerate() {
            let g = MeanEstimate::from_samples(&run.samples(phi));
            let direct: Vec<f64> = bundle_terminal
                .chunks_exact(d)
                .map(|y| phi.eval(y))
                .collect();
            let direct = MeanEstimate::from_samples(&direct);
            let diff = (g.mean - direct.mean).abs();
            let tol = 3.0 * (g.std_error + direct.std_error);
            g_rows.push(vec![
                p.to_string(),
                num(g.mean),
                num(g.std_error),
                num(direct.mean),
                num(direct.std_error),
                num(diff),
                num(tol),
                (diff <= tol).to_string(),
                num(w.mean),
                num(w.std_error),
            ]);
            estimate_rows(&mut rows, "girsanov", "-", p, &[g]);
            out.json(
                &report_name("girsanov", p, None),
                &report(Method::Girsanov, &[g], cfg, &digest, runtime),
            )?;
        }
        out.csv(
            "girsanov_check.csv",
            &[
                "phi",
                "girsanov",
                "girsanov_se",
                "particle",
                "particle_se",
                "abs_diff",
                "tolerance",
                "agree",
                "weight_mean",
                "weight_mean_se",
            ],
            &g_rows,
        )?;
    }

    if !trace.is_empty() && !out_has(&out, "picard_trace.csv") {
        out.csv(
            "picard_trace.csv",
            &["iteration", "distance"],
            &trace_rows(&trace),
        )?;
    }
    out.csv(
        "gradient.csv",
        &[
            "method",
            "weight",
            "phi",
            "component",
            "estimate",
            "std_error",
            "variance",
        ],
        &rows,
    )?;
    out.finish("gradient", cfg.seed, trace)
}

fn out_has(out: &Output, name: &str) -> bool {
    out.dir().join(name).exists()
}

#[derive(Debug, Serialize)]
struct HolderFit {
    time_exponent: f64,
    time_intercept: f64,
    space_exponent: f64,
    space_intercept: f64,
    time_points: usize,
    space_points: usize,
}

fn holder_scan(cfg: &ExperimentConfig, mut out: Output) -> Result<RunManifest, CliError> {
    let s = setup(cfg, &mut out)?;
    let h = cfg.holder_settings();
    let d = cfg.d;
    let m = cfg.m;
    let result = out.stage("picard", || {
        picard_with_noise(
            s.drift.as_ref(),
            &cfg.x0,
            &s.grid,
            &s.noise,
            None,
            &cfg.picard(),
        )
    });
    let base = with_trace(&mut out, result)?;

    let mut steps: Vec<usize> = h
        .lags
        .iter()
        .map(|l| ((l / s.grid.dt()).round() as usize).clamp(1, m))
        .collect();
    steps.sort_unstable();
    steps.dedup();
    if steps.len() < 3 {
        return Err(CliError::Config(
            "`holder.lags`: fewer than 3 distinct lags on this grid".into(),
        ));
    }
    let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    let terminal = base.bundle.states_at(m);
    let mut time_rows = Vec::new();
    let (mut lx, mut ly) = (Vec::new(), Vec::new());
    for &k in &steps {
        let start = base.bundle.states_at(m - k);
        let samples: Vec<f64> = terminal
            .chunks_exact(d)
            .zip(start.chunks_exact(d))
            .map(|(a, b)| sq(a, b))
            .collect();
        let e = MeanEstimate::from_samples(&samples);
        let lag = s.grid.time(m) - s.grid.time(m - k);
        time_rows.push(vec![
            num(lag),
            num(s.grid.time(m - k)),
            num(s.grid.time(m)),
            num(e.mean),
            num(e.std_error),
        ]);
        lx.push(lag.ln());
        ly.push(e.mean.ln());
    }
    out.csv(
        "holder_time.csv",
        &["lag", "s", "t", "mean_sq", "std_error"],
        &time_rows,
    )?;

    let dir = h.direction.clone().unwrap_or_else(|| {
        let mut e = vec![0.0; d];
        e[0] = 1.0;
        e
    });
    let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut space_rows = Vec::new();
    let (mut sx, mut sy) = (Vec::new(), Vec::new());
    for &delta in &h.offsets {
        let x: Vec<f64> = cfg
            .x0
            .iter()
            .zip(&dir)
            .map(|(a, u)| a + delta * u / norm)
            .collect();
        let result = out.stage("picard_shifted", || {
            picard_with_noise(s.drift.as_ref(), &x, &s.grid, &s.noise, None, &cfg.picard())
        });
        let shifted = result?;
        let samples: Vec<f64> = shifted
            .bundle
            .states_at(m)
            .chunks_exact(d)
            .zip(terminal.chunks_exact(d))
            .map(|(a, b)| sq(a, b))
            .collect();
        let e = MeanEstimate::from_samples(&samples);
        space_rows.push(vec![
            num(delta),
            num(delta * delta),
            num(e.mean),
            num(e.std_error),
        ]);
        sx.push((delta * delta).ln());
        sy.push(e.mean.ln());
    }
    out.csv(
        "holder_space.csv",
        &["offset", "offset_sq", "mean_sq", "std_error"],
        &space_rows,
    )?;
    let (time_exponent, time_intercept) = linear_fit(&lx, &ly);
    let (space_exponent, space_intercept) = linear_fit(&sx, &sy);
    if !(time_exponent.is_finite() && space_exponent.is_finite()) {
        return Err(CliError::Core(mfgrad::Error::HypothesisViolation(
            "log-log regression is degenerate (zero mean squared distance)".into(),
        )));
    }
    out.json(
        "holder_fit.json",
        &HolderFit {
            time_exponent,
            time_intercept,
            space_exponent,
            space_intercept,
            time_points: lx.len(),
            space_points: sx.len(),
        },
    )?;
    out.finish("holder-scan", cfg.seed, base.trace)
}

#[derive(Debug, Serialize)]
struct DriftValidation {
    drift: String,
    metadata: mfgrad::drift::DriftMetadata,
    probe: mfgrad::drift::MetadataProbe,
    passed: bool,
}

fn validate_drift(cfg: &ExperimentConfig, mut out: Output) -> Result<RunManifest, CliError> {
    let drift = cfg.drift.build(cfg.d, &cfg.x0)?;
    let probe = out.stage("probe", || {
        probe_metadata(drift.as_ref(), cfg.d, cfg.t, cfg.probes, cfg.seed)
    })?;
    let passed = probe.passed();
    out.json(
        "validate_drift.json",
        &DriftValidation {
            drift: drift.name(),
            metadata: drift.metadata(),
            probe,
            passed,
        },
    )?;
    let manifest = out.finish("validate-drift", cfg.seed, Vec::new())?;
    if passed {
        Ok(manifest)
    } else {
        Err(CliError::Config(format!(
            "drift `{}` violates its declared metadata (see validate_drift.json)",
            drift.name()
        )))
    }
}

#[derive(Debug, Serialize)]
struct PhiResult {
    phi: Observable,
    #[serde(flatten)]
    check: mfgrad::bel::IntegrabilityCheck,
}

fn phi_check(cfg: &ExperimentConfig, mut out: Output) -> Result<RunManifest, CliError> {
    let phis = cfg.phis()?;
    let results = out.stage("quadrature", || {
        phis.iter()
            .map(|p| {
                mfgrad::bel::check_phi_integrability(p, cfg.d, cfg.t).map(|check| PhiResult {
                    phi: p.clone(),
                    check,
                })
            })
            .collect::<mfgrad::Result<Vec<_>>>()
    })?;
    out.json("phi_check.json", &results)?;
    let failed: Vec<String> = results
        .iter()
        .enumerate()
        .filter(|(_, r)| !r.check.pass)
        .map(|(i, r)| {
            format!(
                "phi[{i}] ({}): {}",
                r.phi.name(),
                r.check.reason.clone().unwrap_or_default()
            )
        })
        .collect();
    let manifest = out.finish("phi-check", cfg.seed, Vec::new())?;
    if failed.is_empty() {
        Ok(manifest)
    } else {
        Err(CliError::Config(format!("`phi`: {}", failed.join("; "))))
    }
}
