//! SILT expectations and their scaling in the interaction radius and time.
//!
//! The frozen-field decomposition splits the double expectation: one field
//! sample fixes the self-intersection measure `nu_k`, then noise replicas
//! flow the atoms and average the Jacobian weight. Conditional on the field,
//!
//! ```text
//! E[rho(eta(u))] = e^{c k (k-1) t / (2 eps^2)}           (a = 0)
//! E[rho(eta(u))] = e^{(c k / 2 - T_a) (k-1) t}           (a > 0, eps = 1)
//! ```
//!
//! per starting point u, so the scaled weighted SILT must reproduce the
//! unweighted baseline and the log of the unscaled mean must grow with the
//! corresponding slope. `T_a` is the drift-trace of the selected mode; the
//! exponent is the one consistent with the tracked log-Jacobian.

use nalgebra::Vector2;
use rayon::prelude::*;

use super::{
    mean_stderr, regression_slope, stamp, variance_guard, ExperimentDef, ExperimentRecord,
    ParamKind, ParamSpec, ParamValue,
};
use crate::error::{Result, SiltError};
use crate::field::{
    covariance_matrix, factorize_with_jitter, sample_field_with_factor, CovarianceSpec,
    FieldSample, GridLayout, GridSpec,
};
use crate::flow_iso::{flow_step_grid, sample_step_noise, DriftTraceMode, ParticleSystem};
use crate::localtime::{self_intersection_measure, silt_estimate, BinGrid, SiltConfig, Weight};
use crate::measure::EmpiricalMeasure;
use crate::mollifier::Mollifier;
use crate::stream::Stream;

/// Ensemble mean and standard error of the SILT estimator over given fields.
pub fn ensemble_silt(
    fields: &[FieldSample],
    cfg: &SiltConfig,
    weight: &Weight,
) -> Result<(f64, f64)> {
    if fields.len() < 2 {
        return Err(SiltError::input("need at least 2 replicas"));
    }
    let values: Vec<f64> = fields
        .iter()
        .map(|f| silt_estimate(f, cfg, weight, None).map(|e| e.value))
        .collect::<Result<_>>()?;
    Ok(mean_stderr(&values))
}

/// Monte Carlo over independent field samples of the plain SILT estimator.
pub fn expected_silt(
    alpha: f64,
    ny: usize,
    nt: usize,
    cfg: &SiltConfig,
    weight: &Weight,
    replicas: usize,
    stream: Stream,
) -> Result<(f64, f64)> {
    let grid = GridSpec::new(ny, nt, GridLayout::Midpoint)?;
    let spec = CovarianceSpec::new(alpha)?;
    let cov = covariance_matrix(&grid, &spec);
    let (factor, jitter) = factorize_with_jitter(&cov)?;
    let fields: Vec<FieldSample> = (0..replicas as u64)
        .into_par_iter()
        .map(|r| sample_field_with_factor(&grid, &spec, &factor, jitter, stream.fork(r)))
        .collect();
    ensemble_silt(&fields, cfg, weight)
}

/// One field sample frozen across noise replicas, with its
/// self-intersection measure and unweighted SILT baseline.
#[derive(Clone, Debug)]
pub struct FrozenField {
    pub field: FieldSample,
    pub nu: EmpiricalMeasure,
    pub k: usize,
    /// nu total mass = the unweighted SILT of the frozen field.
    pub baseline: f64,
}

pub fn prepare_frozen(
    alpha: f64,
    ny: usize,
    nt: usize,
    k: usize,
    eps_kernel: f64,
    bins_per_axis: usize,
    stream: Stream,
) -> Result<FrozenField> {
    let grid = GridSpec::new(ny, nt, GridLayout::Midpoint)?;
    let spec = CovarianceSpec::new(alpha)?;
    let field = crate::field::sample_field(&grid, &spec, stream)?;
    let cfg = SiltConfig::new(k, eps_kernel, crate::localtime::Scheme::FullGrid)?;
    let values: Vec<Vector2<f64>> = (0..grid.len())
        .map(|i| Vector2::new(field.values1[i], field.values2[i]))
        .collect();
    let bins = BinGrid::covering(&values, bins_per_axis, bins_per_axis)?;
    let nu = self_intersection_measure(&field, &cfg, &bins)?;
    let baseline = nu.total_mass();
    Ok(FrozenField { field, nu, k, baseline })
}

/// Flow the frozen measure's atoms through one noise realization and return
/// the Jacobian-weighted SILT at each recorded step.
fn frozen_replica(
    nu: &EmpiricalMeasure,
    k: usize,
    eps: f64,
    a: f64,
    mode: DriftTraceMode,
    dt: f64,
    record_steps: &[usize],
    stream: Stream,
) -> Result<Vec<f64>> {
    let mol = Mollifier::standard();
    let mut sys = ParticleSystem::from_measure(nu, eps, a)?;
    let mut rng = stream.rng();
    let weighted = |sys: &ParticleSystem| -> f64 {
        sys.weights
            .iter()
            .zip(&sys.logdets)
            .map(|(w, l)| w * (-((k as f64) - 1.0) * l).exp())
            .sum()
    };
    let mut out = Vec::with_capacity(record_steps.len());
    let mut next = 0;
    while next < record_steps.len() && record_steps[next] == 0 {
        out.push(weighted(&sys));
        next += 1;
    }
    let max_step = *record_steps.last().unwrap_or(&0);
    for step in 1..=max_step {
        let noise = sample_step_noise(&sys, dt, &mut rng);
        flow_step_grid(&mut sys, mol, &noise, dt, mode, None)?;
        while next < record_steps.len() && record_steps[next] == step {
            out.push(weighted(&sys));
            next += 1;
        }
    }
    Ok(out)
}

/// A row of a scaling table.
#[derive(Clone, Debug)]
pub struct ScalingRow {
    /// Sweep coordinate: the interaction radius (eps sweep) or the time.
    pub at: f64,
    /// Scaled estimate `e^{-theta} * mean(T_hat)`; should match `baseline`.
    pub scaled: f64,
    pub scaled_stderr: f64,
    /// Unscaled ensemble mean of the weighted SILT.
    pub raw: f64,
    /// Per-u weight-mean identity: scaled estimate / baseline, -> 1.
    pub weight_mean: f64,
    pub weight_mean_stderr: f64,
}

#[derive(Clone, Debug)]
pub struct ScalingResult {
    pub rows: Vec<ScalingRow>,
    pub baseline: f64,
    /// Fitted slope of `ln mean(T_hat)` against t (time sweep only).
    pub log_slope: Option<f64>,
    pub records: Vec<ExperimentRecord>,
}

/// Lemma 5.5 sweep: scaled weighted SILT across interaction radii at fixed t.
#[allow(clippy::too_many_arguments)]
pub fn eps_scaling(
    frozen: &FrozenField,
    t: f64,
    eps_list: &[f64],
    replicas: usize,
    dt: f64,
    stream: Stream,
) -> Result<ScalingResult> {
    let c = Mollifier::standard().grad_energy;
    let k = frozen.k;
    for &eps in eps_list {
        variance_guard(c, t, k, eps, true)?;
    }
    let steps = (t / dt).round() as usize;
    let record = vec![steps];
    let mut rows = Vec::new();
    let mut records = Vec::new();
    for (ei, &eps) in eps_list.iter().enumerate() {
        let eps_stream = stream.fork(ei as u64);
        let per_replica: Vec<f64> = (0..replicas as u64)
            .into_par_iter()
            .map(|r| frozen_replica(&frozen.nu, k, eps, 0.0, DriftTraceMode::Paper, dt, &record, eps_stream.fork(r)))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .map(|v| v[0])
            .collect();
        let (raw, raw_se) = mean_stderr(&per_replica);
        let theta = c * (k * (k - 1)) as f64 * steps as f64 * dt / (2.0 * eps * eps);
        let scale = (-theta).exp();
        let row = ScalingRow {
            at: eps,
            scaled: scale * raw,
            scaled_stderr: scale * raw_se,
            raw,
            weight_mean: scale * raw / frozen.baseline,
            weight_mean_stderr: scale * raw_se / frozen.baseline,
        };
        let mut rec = ExperimentRecord::new("eps_scaling", format!("eps={eps}"), row.scaled, row.scaled_stderr);
        rec.replicas = replicas;
        rec.extra.insert("raw_mean".into(), row.raw);
        rec.extra.insert("baseline".into(), frozen.baseline);
        rec.extra.insert("weight_mean".into(), row.weight_mean);
        rec.extra.insert("weight_mean_stderr".into(), row.weight_mean_stderr);
        records.push(rec);
        rows.push(row);
    }
    Ok(ScalingResult { rows, baseline: frozen.baseline, log_slope: None, records })
}

/// Lemma 5.7 / drifted-regime sweep: scaled weighted SILT across times at a
/// fixed radius, plus the fitted log-slope of the unscaled mean.
#[allow(clippy::too_many_arguments)]
pub fn time_scaling(
    frozen: &FrozenField,
    eps: f64,
    t_list: &[f64],
    a: f64,
    mode: DriftTraceMode,
    replicas: usize,
    dt: f64,
    stream: Stream,
) -> Result<ScalingResult> {
    if t_list.is_empty() {
        return Err(SiltError::input("t_list must be nonempty"));
    }
    let mut sorted = t_list.to_vec();
    sorted.sort_by(|x, y| x.partial_cmp(y).unwrap());
    if a > 0.0 && (eps - 1.0).abs() > 1e-12 {
        return Err(SiltError::input("the drifted regime is defined at eps = 1"));
    }
    let c = Mollifier::standard().grad_energy;
    let k = frozen.k;
    let t_max = *sorted.last().unwrap();
    variance_guard(c, t_max, k, eps, true)?;

    let record_steps: Vec<usize> = sorted.iter().map(|&t| (t / dt).round() as usize).collect();
    let per_replica: Vec<Vec<f64>> = (0..replicas as u64)
        .into_par_iter()
        .map(|r| {
            frozen_replica(&frozen.nu, k, eps, a, mode, dt, &record_steps, stream.fork(r))
        })
        .collect::<Result<Vec<_>>>()?;

    let km1 = (k as f64) - 1.0;
    let mut rows = Vec::new();
    let mut records = Vec::new();
    let mut log_means = Vec::new();
    for (j, (&t, &steps)) in sorted.iter().zip(&record_steps).enumerate() {
        let values: Vec<f64> = per_replica.iter().map(|v| v[j]).collect();
        let (raw, raw_se) = mean_stderr(&values);
        let t_snap = steps as f64 * dt;
        let theta = if a > 0.0 {
            (c * k as f64 / 2.0 - mode.trace(a)) * km1 * t_snap
        } else {
            c * (k * (k - 1)) as f64 * t_snap / (2.0 * eps * eps)
        };
        let scale = (-theta).exp();
        log_means.push(raw.max(f64::MIN_POSITIVE).ln());
        let row = ScalingRow {
            at: t,
            scaled: scale * raw,
            scaled_stderr: scale * raw_se,
            raw,
            weight_mean: scale * raw / frozen.baseline,
            weight_mean_stderr: scale * raw_se / frozen.baseline,
        };
        let mut rec =
            ExperimentRecord::new("time_scaling", format!("t={t}"), row.scaled, row.scaled_stderr);
        rec.replicas = replicas;
        rec.extra.insert("raw_mean".into(), raw);
        rec.extra.insert("baseline".into(), frozen.baseline);
        rec.extra.insert("weight_mean".into(), row.weight_mean);
        rec.extra.insert("weight_mean_stderr".into(), row.weight_mean_stderr);
        records.push(rec);
        rows.push(row);
    }
    let snapped: Vec<f64> = record_steps.iter().map(|&s| s as f64 * dt).collect();
    let log_slope =
        if sorted.len() >= 2 { Some(regression_slope(&snapped, &log_means)) } else { None };
    if let Some(slope) = log_slope {
        for rec in records.iter_mut() {
            rec.extra.insert("log_slope".into(), slope);
        }
    }
    Ok(ScalingResult { rows, baseline: frozen.baseline, log_slope, records })
}

// --- registry adapters -------------------------------------------------------

fn common_field_params() -> Vec<ParamSpec> {
    vec![
        ParamSpec {
            name: "alpha",
            kind: ParamKind::Float,
            default: ParamValue::Float(1.0),
            doc: "covariance exponent in (0, 2]",
            range: Some((1e-6, 2.0)),
        },
        ParamSpec {
            name: "grid",
            kind: ParamKind::Int,
            default: ParamValue::Int(20),
            doc: "field grid nodes per axis",
            range: Some((2.0, 64.0)),
        },
        ParamSpec {
            name: "k",
            kind: ParamKind::Int,
            default: ParamValue::Int(2),
            doc: "SILT multiplicity",
            range: Some((2.0, 6.0)),
        },
        ParamSpec {
            name: "eps_kernel",
            kind: ParamKind::Float,
            default: ParamValue::Float(0.05),
            doc: "delta-family bandwidth (distinct from the interaction radius)",
            range: Some((1e-9, 10.0)),
        },
        ParamSpec {
            name: "replicas",
            kind: ParamKind::Int,
            default: ParamValue::Int(400),
            doc: "Monte Carlo replicas",
            range: Some((1.0, 1e9)),
        },
    ]
}

fn bins_param() -> ParamSpec {
    ParamSpec {
        name: "bins",
        kind: ParamKind::Int,
        default: ParamValue::Int(6),
        doc: "bins per axis for the self-intersection measure",
        range: Some((1.0, 64.0)),
    }
}

fn dt_param(default: f64) -> ParamSpec {
    ParamSpec {
        name: "dt",
        kind: ParamKind::Float,
        default: ParamValue::Float(default),
        doc: "Euler time step",
        range: Some((1e-9, 1.0)),
    }
}

pub(super) fn expected_silt_def() -> ExperimentDef {
    let mut params = common_field_params();
    params.push(ParamSpec {
        name: "eps_kernel_alt",
        kind: ParamKind::Float,
        default: ParamValue::Float(0.0),
        doc: "second bandwidth for the stability column (0 disables)",
        range: Some((0.0, 10.0)),
    });
    ExperimentDef {
        name: "expected_silt",
        doc: "Monte Carlo mean of the plain SILT estimator over field samples",
        params,
        run: |p, seed| {
            let replicas = p.get_usize("replicas")?;
            let grid = p.get_usize("grid")?;
            let k = p.get_usize("k")?;
            let cfg = SiltConfig::new(k, p.get_f64("eps_kernel")?, crate::localtime::Scheme::FullGrid)?;
            let stream = Stream::from_seed(seed).fork_str("expected_silt");
            let (mean, se) =
                expected_silt(p.get_f64("alpha")?, grid, grid, &cfg, &Weight::one(), replicas, stream)?;
            let mut rec = ExperimentRecord::new(
                "expected_silt",
                format!("eps_kernel={}", p.get_f64("eps_kernel")?),
                mean,
                se,
            );
            rec.replicas = replicas;
            let mut records = vec![rec];
            let alt = p.get_f64("eps_kernel_alt")?;
            if alt > 0.0 {
                let cfg2 = SiltConfig::new(k, alt, crate::localtime::Scheme::FullGrid)?;
                let (m2, se2) = expected_silt(
                    p.get_f64("alpha")?,
                    grid,
                    grid,
                    &cfg2,
                    &Weight::one(),
                    replicas,
                    stream,
                )?;
                let mut rec2 =
                    ExperimentRecord::new("expected_silt", format!("eps_kernel={alt}"), m2, se2);
                rec2.replicas = replicas;
                rec2.extra.insert("relative_change".into(), (m2 - mean).abs() / mean.abs());
                records.push(rec2);
            }
            stamp(&mut records, p, seed, None);
            Ok(records)
        },
    }
}

pub(super) fn eps_scaling_def() -> ExperimentDef {
    let mut params = common_field_params();
    params.push(bins_param());
    params.push(dt_param(2.5e-3));
    params.push(ParamSpec {
        name: "t",
        kind: ParamKind::Float,
        default: ParamValue::Float(0.1),
        doc: "flow horizon",
        range: Some((0.0, 10.0)),
    });
    params.push(ParamSpec {
        name: "eps_list",
        kind: ParamKind::FloatList,
        default: ParamValue::FloatList(vec![0.7, 0.5, 0.45]),
        doc: "interaction radii to sweep",
        range: Some((1e-3, 100.0)),
    });
    ExperimentDef {
        name: "eps_scaling",
        doc: "scaled weighted SILT against the interaction radius (frozen field)",
        params,
        run: |p, seed| {
            let grid = p.get_usize("grid")?;
            let stream = Stream::from_seed(seed).fork_str("eps_scaling");
            let frozen = prepare_frozen(
                p.get_f64("alpha")?,
                grid,
                grid,
                p.get_usize("k")?,
                p.get_f64("eps_kernel")?,
                p.get_usize("bins")?,
                stream.fork_str("field"),
            )?;
            let result = eps_scaling(
                &frozen,
                p.get_f64("t")?,
                &p.get_f64_list("eps_list")?,
                p.get_usize("replicas")?,
                p.get_f64("dt")?,
                stream.fork_str("noise"),
            )?;
            let mut records = result.records;
            stamp(&mut records, p, seed, None);
            Ok(records)
        },
    }
}

pub(super) fn time_scaling_def() -> ExperimentDef {
    let mut params = common_field_params();
    params.push(bins_param());
    params.push(dt_param(2.5e-3));
    params.push(ParamSpec {
        name: "eps",
        kind: ParamKind::Float,
        default: ParamValue::Float(1.0),
        doc: "interaction radius (must be 1 in the drifted regime)",
        range: Some((1e-3, 100.0)),
    });
    params.push(ParamSpec {
        name: "a",
        kind: ParamKind::Float,
        default: ParamValue::Float(0.0),
        doc: "repulsion rate from the mass center",
        range: Some((0.0, 100.0)),
    });
    params.push(ParamSpec {
        name: "t_list",
        kind: ParamKind::FloatList,
        default: ParamValue::FloatList(vec![0.25, 0.5, 0.75]),
        doc: "record times",
        range: Some((0.0, 10.0)),
    });
    params.push(ParamSpec {
        name: "mode",
        kind: ParamKind::Str,
        default: ParamValue::Str("paper".into()),
        doc: "drift-trace mode: paper or liouville",
        range: None,
    });
    ExperimentDef {
        name: "time_scaling",
        doc: "scaled weighted SILT against time (frozen field)",
        params,
        run: |p, seed| {
            let grid = p.get_usize("grid")?;
            let mode: DriftTraceMode = p.get_str("mode")?.parse()?;
            let stream = Stream::from_seed(seed).fork_str("time_scaling");
            let frozen = prepare_frozen(
                p.get_f64("alpha")?,
                grid,
                grid,
                p.get_usize("k")?,
                p.get_f64("eps_kernel")?,
                p.get_usize("bins")?,
                stream.fork_str("field"),
            )?;
            let result = time_scaling(
                &frozen,
                p.get_f64("eps")?,
                &p.get_f64_list("t_list")?,
                p.get_f64("a")?,
                mode,
                p.get_usize("replicas")?,
                p.get_f64("dt")?,
                stream.fork_str("noise"),
            )?;
            let mut records = result.records;
            stamp(&mut records, p, seed, Some(mode.to_string()));
            Ok(records)
        },
    }
}
