//! Experiment configuration: one JSON file with a versioned schema.

use std::path::{Path, PathBuf};

use mfgrad::bel::{Observable, WeightKind};
use mfgrad::drift::DriftSpec;
use mfgrad::sde_solver::{PicardConfig, TimeGrid};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    Simulate,
    Gradient,
    HolderScan,
    ValidateDrift,
    PhiCheck,
}

impl Command {
    pub fn as_str(&self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Gradient => "gradient",
            Command::HolderScan => "holder-scan",
            Command::ValidateDrift => "validate-drift",
            Command::PhiCheck => "phi-check",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodChoice {
    Bel,
    Fd,
    GirsanovCheck,
}

/// One observable or a list, evaluated component by component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PhiSpec {
    One(Observable),
    Many(Vec<Observable>),
}

impl PhiSpec {
    pub fn list(&self) -> Vec<Observable> {
        match self {
            PhiSpec::One(o) => vec![o.clone()],
            PhiSpec::Many(v) => v.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimatorSettings {
    #[serde(default = "default_methods")]
    pub methods: Vec<MethodChoice>,
    /// Weight functions `a`; the first is used for the comparison table.
    #[serde(default = "default_weights")]
    pub weights: Vec<WeightKind>,
    /// FD step; defaults to `1e-2·max(1, ‖x0‖)`.
    #[serde(default)]
    pub h: Option<f64>,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    #[serde(default = "default_mollifier")]
    pub mollifier: usize,
}

fn default_methods() -> Vec<MethodChoice> {
    vec![MethodChoice::Bel]
}
fn default_weights() -> Vec<WeightKind> {
    vec![WeightKind::Uniform]
}
fn default_tol() -> f64 {
    PicardConfig::default().tol
}
fn default_max_iter() -> usize {
    PicardConfig::default().max_iter
}
fn default_mollifier() -> usize {
    mfgrad::bel::DEFAULT_MOLLIFIER
}

impl Default for EstimatorSettings {
    fn default() -> Self {
        EstimatorSettings {
            methods: default_methods(),
            weights: default_weights(),
            h: None,
            tol: default_tol(),
            max_iter: default_max_iter(),
            mollifier: default_mollifier(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateSettings {
    #[serde(default = "yes")]
    pub write_flow: bool,
    #[serde(default)]
    pub dump_paths: bool,
}

fn yes() -> bool {
    true
}

impl Default for SimulateSettings {
    fn default() -> Self {
        SimulateSettings {
            write_flow: true,
            dump_paths: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HolderSettings {
    /// Time lags `t − s`, snapped to the grid; pairs end at `T`.
    pub lags: Vec<f64>,
    /// Distances `‖x − y‖` of the shifted initial points.
    pub offsets: Vec<f64>,
    /// Shift direction (normalized); defaults to `e₁`.
    #[serde(default)]
    pub direction: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub command: Option<Command>,
    pub drift: DriftSpec,
    pub d: usize,
    pub x0: Vec<f64>,
    #[serde(rename = "T")]
    pub t: f64,
    #[serde(rename = "M")]
    pub m: usize,
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(default)]
    pub estimator: EstimatorSettings,
    #[serde(default)]
    pub phi: Option<PhiSpec>,
    pub seed: u64,
    #[serde(default)]
    pub output: Option<PathBuf>,
    #[serde(default)]
    pub simulate: SimulateSettings,
    #[serde(default)]
    pub holder: Option<HolderSettings>,
    /// Random probes for `validate-drift`.
    #[serde(default = "default_probes")]
    pub probes: usize,
}

fn default_probes() -> usize {
    200
}

fn invalid(field: &str, reason: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("`{field}`: {reason}"))
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|source| CliError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| CliError::Config(format!("config: {e}")))
    }

    /// Checks every field the selected command reads.
    pub fn validate(&self, command: Command) -> Result<(), CliError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(invalid(
                "schema_version",
                format!("expected {SCHEMA_VERSION}, found {}", self.schema_version),
            ));
        }
        if let Some(c) = self.command {
            if c != command {
                return Err(invalid(
                    "command",
                    format!(
                        "config is for `{}`, invoked as `{}`",
                        c.as_str(),
                        command.as_str()
                    ),
                ));
            }
        }
        if self.d == 0 {
            return Err(invalid("d", "must be ≥ 1"));
        }
        if self.x0.len() != self.d {
            return Err(invalid(
                "x0",
                format!("has {} entries, d = {}", self.x0.len(), self.d),
            ));
        }
        if self.x0.iter().any(|v| !v.is_finite()) {
            return Err(invalid("x0", "entries must be finite"));
        }
        if !(self.t > 0.0 && self.t.is_finite()) {
            return Err(invalid("T", "must be positive and finite"));
        }
        if self.m == 0 {
            return Err(invalid("M", "must be ≥ 1"));
        }
        if self.n < 2 {
            return Err(invalid("N", "must be ≥ 2"));
        }
        let e = &self.estimator;
        if !(e.tol > 0.0 && e.tol.is_finite()) {
            return Err(invalid("estimator.tol", "must be positive"));
        }
        if e.max_iter == 0 {
            return Err(invalid("estimator.max_iter", "must be ≥ 1"));
        }
        if e.mollifier == 0 {
            return Err(invalid("estimator.mollifier", "must be ≥ 1"));
        }
        if let Some(h) = e.h {
            if !(h > 0.0 && h.is_finite()) {
                return Err(invalid("estimator.h", "must be positive"));
            }
        }
        if command == Command::Gradient {
            if e.methods.is_empty() {
                return Err(invalid("estimator.methods", "empty"));
            }
            if e.weights.is_empty() {
                return Err(invalid("estimator.weights", "empty"));
            }
            for w in &e.weights {
                mfgrad::bel::WeightFunction::new(w.clone(), &self.grid()?)
                    .map_err(|err| invalid("estimator.weights", err))?;
            }
        }
        if matches!(command, Command::Gradient | Command::PhiCheck) {
            let phis = self.phis()?;
            for p in &phis {
                p.validate(self.d).map_err(|err| invalid("phi", err))?;
            }
        }
        if command == Command::PhiCheck && self.d > 3 {
            return Err(invalid("d", "phi-check supports d ≤ 3"));
        }
        if command == Command::ValidateDrift && self.probes == 0 {
            return Err(invalid("probes", "must be ≥ 1"));
        }
        if command == Command::HolderScan {
            let h = self.holder_settings();
            if h.lags.len() < 3 {
                return Err(invalid("holder.lags", "regression needs ≥ 3 points"));
            }
            if h.offsets.len() < 3 {
                return Err(invalid("holder.offsets", "regression needs ≥ 3 points"));
            }
            if h.lags.iter().any(|l| !(*l > 0.0 && *l <= self.t)) {
                return Err(invalid("holder.lags", "each lag must lie in (0, T]"));
            }
            if h.offsets.iter().any(|o| !(*o > 0.0 && o.is_finite())) {
                return Err(invalid("holder.offsets", "must be positive"));
            }
            if let Some(dir) = &h.direction {
                if dir.len() != self.d || !(dir.iter().map(|v| v * v).sum::<f64>() > 0.0) {
                    return Err(invalid("holder.direction", "must be a non-zero d-vector"));
                }
            }
        }
        self.drift
            .build(self.d, &self.x0)
            .map_err(|err| invalid("drift", err))?;
        Ok(())
    }

    pub fn grid(&self) -> Result<TimeGrid, CliError> {
        TimeGrid::new(self.t, self.m).map_err(|e| invalid("T/M", e))
    }

    pub fn picard(&self) -> PicardConfig {
        PicardConfig {
            tol: self.estimator.tol,
            max_iter: self.estimator.max_iter,
            min_iter: 1,
        }
    }

    pub fn phis(&self) -> Result<Vec<Observable>, CliError> {
        match &self.phi {
            Some(p) => {
                let list = p.list();
                if list.is_empty() {
                    Err(invalid("phi", "empty list"))
                } else {
                    Ok(list)
                }
            }
            None => Err(invalid("phi", "required by this command")),
        }
    }

    pub fn holder_settings(&self) -> HolderSettings {
        self.holder.clone().unwrap_or_else(|| HolderSettings {
            lags: [128.0, 64.0, 32.0, 16.0, 8.0]
                .iter()
                .map(|k| self.t / k)
                .collect(),
            offsets: vec![0.4, 0.2, 0.1, 0.05, 0.025],
            direction: None,
        })
    }

    /// SHA-256 of the canonical JSON form (sorted keys, output path removed).
    pub fn digest(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(map) = v.as_object_mut() {
            map.remove("output");
        }
        let canonical = serde_json::to_string(&v).expect("value serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const OU: &str = r#"{
        "schema_version": 1,
        "drift": {"name": "mean_field_ou", "alpha": 1.0, "beta": 0.5, "auto_clip": true},
        "d": 1, "x0": [1.0], "T": 1.0, "M": 20, "N": 100,
        "phi": {"name": "coordinate", "index": 0},
        "seed": 7
    }"#;

    #[test]
    fn parses_with_defaults() {
        let c = ExperimentConfig::parse(OU).unwrap();
        assert_eq!(c.estimator.methods, vec![MethodChoice::Bel]);
        assert_eq!(c.estimator.weights, vec![WeightKind::Uniform]);
        assert_eq!(c.phis().unwrap().len(), 1);
        c.validate(Command::Gradient).unwrap();
    }

    #[test]
    fn digest_ignores_output_and_key_order() {
        let a = ExperimentConfig::parse(OU).unwrap();
        let mut b = a.clone();
        b.output = Some("/elsewhere".into());
        assert_eq!(a.digest(), b.digest());
        b.seed = 8;
        assert_ne!(a.digest(), b.digest());
        let reordered = r#"{
            "seed": 7, "N": 100, "M": 20, "T": 1.0, "x0": [1.0], "d": 1,
            "phi": {"index": 0, "name": "coordinate"},
            "drift": {"beta": 0.5, "alpha": 1.0, "name": "mean_field_ou", "auto_clip": true},
            "schema_version": 1
        }"#;
        assert_eq!(
            ExperimentConfig::parse(reordered).unwrap().digest(),
            a.digest()
        );
        assert_eq!(a.digest().len(), 64);
    }

    #[test]
    fn validation_names_the_field() {
        let mut c = ExperimentConfig::parse(OU).unwrap();
        c.m = 0;
        let msg = c.validate(Command::Simulate).unwrap_err().to_string();
        assert!(msg.contains("`M`"), "{msg}");
        let mut c = ExperimentConfig::parse(OU).unwrap();
        c.x0 = vec![1.0, 2.0];
        assert!(c
            .validate(Command::Simulate)
            .unwrap_err()
            .to_string()
            .contains("x0"));
        let mut c = ExperimentConfig::parse(OU).unwrap();
        c.command = Some(Command::Simulate);
        assert!(c
            .validate(Command::Gradient)
            .unwrap_err()
            .to_string()
            .contains("command"));
        let mut c = ExperimentConfig::parse(OU).unwrap();
        c.holder = Some(HolderSettings {
            lags: vec![0.5],
            offsets: vec![0.1, 0.2, 0.3],
            direction: None,
        });
        assert!(c
            .validate(Command::HolderScan)
            .unwrap_err()
            .to_string()
            .contains("lags"));
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let text = OU.replace("\"seed\": 7", "\"seed\": 7, \"sed\": 1");
        assert!(ExperimentConfig::parse(&text).is_err());
    }

    #[test]
    fn phi_may_be_a_list() {
        let text = OU.replace(
            r#""phi": {"name": "coordinate", "index": 0}"#,
            r#""phi": [{"name": "coordinate", "index": 0}, {"name": "constant", "value": 1.0}]"#,
        );
        assert_eq!(
            ExperimentConfig::parse(&text)
                .unwrap()
                .phis()
                .unwrap()
                .len(),
            2
        );
    }
}
