//! Composed Monte Carlo studies.
//!
//! Each experiment is a pure function of a parameter map and a master seed:
//! replica r draws every random object from the stream fork (seed, replica),
//! replicas run in parallel, and all reductions walk the collected
//! per-replica values in replica order. Records are therefore byte-stable
//! across runs and worker counts.
//!
//! Estimators whose integrand is a lognormal stochastic exponential refuse
//! to run when `c t (k-1)^2 / eps^2` is large: the weight's tails then
//! dominate the mean and a naive Monte Carlo average is meaningless. The
//! frozen-field experiments tolerate a higher load since every atom shares
//! the unit-mean exponential as a control variate.

mod discretization;
mod dispersion;
mod hitting;
mod martingale;
mod scaling;

pub use discretization::{discretization_convergence, DiscretizationResult};
pub use dispersion::{dispersion_baseline_quadrature, dispersion_limit, DispersionResult};
pub use hitting::{hitting_probability, HittingResult};
pub use martingale::{martingale_path, martingale_run, MartingalePath, MartingaleResult};
pub use scaling::{
    ensemble_silt, eps_scaling, expected_silt, time_scaling, FrozenField, ScalingResult,
};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SiltError};

/// Variance-guard caps on `c t (k-1)^2 / eps^2`.
pub const GUARD_CAP: f64 = 4.0;
pub const GUARD_CAP_FROZEN: f64 = 8.0;

/// Refuse lognormal-tailed Monte Carlo settings. Frozen-field runs reuse one
/// field across noise replicas and carry the per-atom unit-mean stochastic
/// exponential as a control variate, so they get the looser cap.
pub fn variance_guard(c: f64, t: f64, k: usize, eps: f64, frozen: bool) -> Result<()> {
    let load = c * t * ((k as f64) - 1.0).powi(2) / (eps * eps);
    let cap = if frozen { GUARD_CAP_FROZEN } else { GUARD_CAP };
    if load > cap {
        return Err(SiltError::budget(format!(
            "lognormal variance load c*t*(k-1)^2/eps^2 = {load:.2} exceeds {cap}; the weight's \
             tails would dominate the mean and the naive Monte Carlo average is meaningless. \
             Reduce t, raise eps, or use the frozen-field mode (antithetic draws and the \
             unit-mean exponential control variate are the documented alternatives)"
        )));
    }
    Ok(())
}

/// One row of an experiment table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub experiment: String,
    /// Row label within the experiment's sweep (an eps, a t, an n).
    pub label: String,
    pub estimate: f64,
    pub stderr: f64,
    pub seed: u64,
    pub replicas: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mode: Option<String>,
    /// Companion columns (baselines, fitted constants, diagnostics).
    pub extra: BTreeMap<String, f64>,
    /// Full parameter map echoed for provenance.
    pub params: BTreeMap<String, ParamValue>,
}

impl ExperimentRecord {
    pub fn new(experiment: &str, label: String, estimate: f64, stderr: f64) -> Self {
        ExperimentRecord {
            experiment: experiment.to_string(),
            label,
            estimate,
            stderr,
            seed: 0,
            replicas: 1,
            mode: None,
            extra: BTreeMap::new(),
            params: BTreeMap::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.stderr >= 0.0) {
            return Err(SiltError::input(format!("record stderr {} negative", self.stderr)));
        }
        if self.replicas < 1 {
            return Err(SiltError::input("record replicas must be >= 1"));
        }
        Ok(())
    }
}

/// A parameter value in a config file, CLI override, or record echo.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ParamValue {
    Int(i64),
    Float(f64),
    Str(String),
    IntList(Vec<i64>),
    FloatList(Vec<f64>),
}

impl ParamValue {
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            ParamValue::Float(v) => Some(*v),
            ParamValue::Int(v) => Some(*v as f64),
            _ => None,
        }
    }

    pub fn as_i64(&self) -> Option<i64> {
        match self {
            ParamValue::Int(v) => Some(*v),
            _ => None,
        }
    }

    pub fn as_f64_list(&self) -> Option<Vec<f64>> {
        match self {
            ParamValue::FloatList(v) => Some(v.clone()),
            ParamValue::IntList(v) => Some(v.iter().map(|&x| x as f64).collect()),
            ParamValue::Float(v) => Some(vec![*v]),
            ParamValue::Int(v) => Some(vec![*v as f64]),
            _ => None,
        }
    }
}

/// Typed parameter map with schema-checked access.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Params(pub BTreeMap<String, ParamValue>);

impl Params {
    pub fn get_f64(&self, key: &str) -> Result<f64> {
        self.0
            .get(key)
            .and_then(ParamValue::as_f64)
            .ok_or_else(|| SiltError::input(format!("parameter '{key}' missing or not a number")))
    }

    pub fn get_usize(&self, key: &str) -> Result<usize> {
        let v = self
            .0
            .get(key)
            .and_then(ParamValue::as_i64)
            .ok_or_else(|| SiltError::input(format!("parameter '{key}' missing or not an integer")))?;
        usize::try_from(v).map_err(|_| SiltError::input(format!("parameter '{key}' negative")))
    }

    pub fn get_str(&self, key: &str) -> Result<&str> {
        match self.0.get(key) {
            Some(ParamValue::Str(s)) => Ok(s),
            _ => Err(SiltError::input(format!("parameter '{key}' missing or not a string"))),
        }
    }

    pub fn get_f64_list(&self, key: &str) -> Result<Vec<f64>> {
        self.0
            .get(key)
            .and_then(ParamValue::as_f64_list)
            .ok_or_else(|| SiltError::input(format!("parameter '{key}' missing or not a list")))
    }
}

/// Declared type of a parameter in an experiment schema.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Float,
    Int,
    Str,
    FloatList,
}

/// One parameter of an experiment: name, type, default, admissible range.
#[derive(Clone, Debug, Serialize)]
pub struct ParamSpec {
    pub name: &'static str,
    pub kind: ParamKind,
    pub default: ParamValue,
    pub doc: &'static str,
    /// Inclusive numeric range for Float/Int scalars and list elements.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub range: Option<(f64, f64)>,
}

impl ParamSpec {
    fn check(&self, value: &ParamValue) -> Result<()> {
        let type_err = || {
            SiltError::input(format!(
                "parameter '{}' has the wrong type (expected {:?})",
                self.name, self.kind
            ))
        };
        let scalars: Vec<f64> = match (self.kind, value) {
            (ParamKind::Float, v) => vec![v.as_f64().ok_or_else(type_err)?],
            (ParamKind::Int, ParamValue::Int(v)) => vec![*v as f64],
            (ParamKind::Int, _) => return Err(type_err()),
            (ParamKind::Str, ParamValue::Str(_)) => vec![],
            (ParamKind::Str, _) => return Err(type_err()),
            (ParamKind::FloatList, v) => v.as_f64_list().ok_or_else(type_err)?,
        };
        if let Some((lo, hi)) = self.range {
            for s in scalars {
                if s < lo || s > hi {
                    return Err(SiltError::input(format!(
                        "parameter '{}' value {s} outside [{lo}, {hi}]",
                        self.name
                    )));
                }
            }
        }
        Ok(())
    }
}

/// An entry of the experiment registry.
pub struct ExperimentDef {
    pub name: &'static str,
    pub doc: &'static str,
    pub params: Vec<ParamSpec>,
    pub run: fn(&Params, u64) -> Result<Vec<ExperimentRecord>>,
}

impl ExperimentDef {
    /// Fill defaults, reject unknown keys, check types and ranges.
    pub fn resolve(&self, given: &Params) -> Result<Params> {
        for key in given.0.keys() {
            if !self.params.iter().any(|p| p.name == key) {
                return Err(SiltError::input(format!(
                    "unknown parameter '{key}' for experiment '{}'",
                    self.name
                )));
            }
        }
        let mut resolved = BTreeMap::new();
        for spec in &self.params {
            let value = given.0.get(spec.name).cloned().unwrap_or_else(|| spec.default.clone());
            spec.check(&value)?;
            resolved.insert(spec.name.to_string(), value);
        }
        Ok(Params(resolved))
    }
}

/// All experiments, in stable order.
pub fn registry() -> Vec<ExperimentDef> {
    vec![
        scaling::expected_silt_def(),
        scaling::eps_scaling_def(),
        scaling::time_scaling_def(),
        dispersion::dispersion_limit_def(),
        martingale::martingale_run_def(),
        hitting::hitting_probability_def(),
        discretization::discretization_convergence_def(),
    ]
}

pub fn find_experiment(name: &str) -> Result<ExperimentDef> {
    registry().into_iter().find(|d| d.name == name).ok_or_else(|| {
        let names: Vec<&str> = registry().iter().map(|d| d.name).collect();
        SiltError::input(format!(
            "unknown experiment '{name}'; valid names: {}",
            names.join(", ")
        ))
    })
}

/// Attach provenance shared by every record of a run.
pub(crate) fn stamp(
    records: &mut [ExperimentRecord],
    params: &Params,
    seed: u64,
    mode: Option<String>,
) {
    for r in records.iter_mut() {
        r.params = params.0.clone();
        r.seed = seed;
        r.mode = mode.clone();
    }
}

/// Mean and standard error of a sample, walked in order.
pub(crate) fn mean_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
    (mean, (var / n as f64).sqrt())
}

/// Least-squares slope of y against x.
pub(crate) fn regression_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry_names() {
        let names: Vec<&str> = registry().iter().map(|d| d.name).collect();
        for expected in [
            "eps_scaling",
            "time_scaling",
            "dispersion_limit",
            "martingale_run",
            "hitting_probability",
            "discretization_convergence",
        ] {
            assert!(names.contains(&expected), "missing {expected}");
        }
        assert!(find_experiment("no_such_thing").is_err());
    }

    #[test]
    fn schema_defaults_validate() {
        for def in registry() {
            let resolved = def.resolve(&Params::default()).unwrap();
            // resolving the resolved map is idempotent
            assert_eq!(def.resolve(&resolved).unwrap(), resolved);
        }
    }

    #[test]
    fn resolve_rejects_unknown_and_out_of_range() {
        let def = find_experiment("eps_scaling").unwrap();
        let mut p = Params::default();
        p.0.insert("bogus".into(), ParamValue::Int(1));
        assert!(def.resolve(&p).is_err());

        let mut p = Params::default();
        p.0.insert("k".into(), ParamValue::Int(1));
        assert!(def.resolve(&p).is_err(), "k = 1 must be rejected");
    }

    #[test]
    fn guard_trips_on_heavy_tails() {
        assert!(variance_guard(7.2, 0.1, 2, 0.7, false).is_ok());
        let err = variance_guard(7.2, 2.0, 2, 0.5, false).unwrap_err();
        assert!(err.to_string().contains("variance load"), "{err}");
        // frozen mode admits the long-time scaling run
        assert!(variance_guard(7.2, 0.75, 2, 1.0, true).is_ok());
        assert!(variance_guard(7.2, 2.0, 2, 1.0, true).is_err());
    }

    #[test]
    fn record_validation() {
        let mut r = ExperimentRecord::new("x", "row".into(), 1.0, 0.1);
        assert!(r.validate().is_ok());
        r.stderr = -1.0;
        assert!(r.validate().is_err());
    }
}
