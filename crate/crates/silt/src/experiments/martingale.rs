//! The renormalized SILT martingale.
//!
//! For a fixed field with self-intersection measure `nu_k`, the flowed
//! weighted SILT rescales to
//!
//! ```text
//! m_k(t) = int exp{ -(k-1) beta(u,t) - c (k-1)^2 t / (2 eps^2) } nu_k(du),
//! ```
//!
//! a positive square-integrable martingale in t whose quadratic
//! characteristic has the explicit form
//!
//! ```text
//! <m_k>(t) = (k-1)^2 int int int_0^t E(u,s) E(v,s)
//!            (grad phi_eps * grad phi_eps)(x(u,s) - x(v,s)) ds nu(du) nu(dv).
//! ```
//!
//! A path realizes both sides at once: the value process on a coarse grid
//! (whose squared increments estimate `<m_k>` unbiasedly at any grid
//! resolution) and the formula accumulated along the fine steps. The
//! ensemble checks are flatness of the mean, orthogonality of increments to
//! the past, and the realized/formula ratio.

use rayon::prelude::*;

use super::{mean_stderr, stamp, ExperimentDef, ExperimentRecord, ParamKind, ParamSpec, ParamValue};
use crate::error::{Result, SiltError};
use crate::field::{covariance_matrix, factorize_with_jitter, CovarianceSpec, GridLayout, GridSpec};
use crate::flow_iso::{flow_step_grid, sample_step_noise, DriftTraceMode, ParticleSystem};
use crate::localtime::{self_intersection_measure, BinGrid, Scheme, SiltConfig};
use crate::measure::EmpiricalMeasure;
use crate::mollifier::Mollifier;
use crate::stream::Stream;

/// One noise realization of the renormalized martingale.
#[derive(Clone, Debug)]
pub struct MartingalePath {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
    /// Grid increments `m(t_{j+1}) - m(t_j)`.
    pub increments: Vec<f64>,
    /// Sum of squared grid increments.
    pub qv_realized: f64,
    /// The quadratic-characteristic integral accumulated along the steps.
    pub qv_formula: f64,
}

impl MartingalePath {
    fn validate(&self) -> Result<()> {
        if self.values.iter().any(|&v| !(v > 0.0)) {
            return Err(SiltError::numerical("martingale path lost positivity"));
        }
        if self.times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(SiltError::input("record times must be strictly increasing"));
        }
        Ok(())
    }
}

/// Evolve the atoms of `nu` through one noise realization, returning the
/// martingale values on the requested grid together with both estimates of
/// the quadratic characteristic.
#[allow(clippy::too_many_arguments)]
pub fn martingale_path(
    nu: &EmpiricalMeasure,
    k: usize,
    a: f64,
    eps: f64,
    dt: f64,
    t_grid: &[f64],
    mode: DriftTraceMode,
    stream: Stream,
) -> Result<MartingalePath> {
    if t_grid.is_empty() {
        return Err(SiltError::input("empty time grid"));
    }
    let mut grid = t_grid.to_vec();
    grid.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let record_steps: Vec<usize> = grid.iter().map(|&t| (t / dt).round() as usize).collect();

    let mol = Mollifier::standard();
    let c = mol.grad_energy;
    let km1 = (k as f64) - 1.0;
    let mut sys = ParticleSystem::from_measure(nu, eps, a)?;
    let mut rng = stream.rng();

    // E(u, s) per atom: exp(-(k-1) M - c (k-1)^2 s / (2 eps^2)) with the
    // martingale part recovered from the tracked log-Jacobian,
    // M = L + c s/(2 eps^2) - T_a s.
    let exponentials = |sys: &ParticleSystem, s: f64| -> Vec<f64> {
        let shift = c * s / (2.0 * eps * eps) - mode.trace(a) * s;
        sys.logdets
            .iter()
            .map(|&l| (-km1 * (l + shift) - c * km1 * km1 * s / (2.0 * eps * eps)).exp())
            .collect()
    };
    let m_value = |sys: &ParticleSystem, exps: &[f64]| -> f64 {
        sys.weights.iter().zip(exps).map(|(w, e)| w * e).sum()
    };

    let max_step = *record_steps.last().unwrap();
    let mut values = Vec::with_capacity(grid.len());
    let mut next = 0;
    let mut qv_formula = 0.0;

    {
        let exps = exponentials(&sys, 0.0);
        while next < record_steps.len() && record_steps[next] == 0 {
            values.push(m_value(&sys, &exps));
            next += 1;
        }
    }
    for step in 1..=max_step {
        // left-endpoint accumulation of the characteristic integrand
        let s = (step - 1) as f64 * dt;
        let exps = exponentials(&sys, s);
        let mut integrand = 0.0;
        for i in 0..sys.len() {
            let wi = sys.weights[i] * exps[i];
            if wi == 0.0 {
                continue;
            }
            for j in 0..sys.len() {
                let wj = sys.weights[j] * exps[j];
                if wj == 0.0 {
                    continue;
                }
                let dist = (sys.positions[i] - sys.positions[j]).norm();
                integrand += wi * wj * mol.grad_correlation(dist, eps);
            }
        }
        qv_formula += km1 * km1 * integrand * dt;

        let noise = sample_step_noise(&sys, dt, &mut rng);
        flow_step_grid(&mut sys, mol, &noise, dt, mode, None)?;

        while next < record_steps.len() && record_steps[next] == step {
            let s_now = step as f64 * dt;
            let exps = exponentials(&sys, s_now);
            values.push(m_value(&sys, &exps));
            next += 1;
        }
    }

    let increments: Vec<f64> = values.windows(2).map(|w| w[1] - w[0]).collect();
    let qv_realized = increments.iter().map(|d| d * d).sum();
    let path = MartingalePath {
        times: record_steps.iter().map(|&s| s as f64 * dt).collect(),
        values,
        increments,
        qv_realized,
        qv_formula,
    };
    path.validate()?;
    Ok(path)
}

#[derive(Clone, Debug)]
pub struct MartingaleResult {
    pub t_grid: Vec<f64>,
    /// Ensemble mean of m at each grid time.
    pub means: Vec<f64>,
    pub stderrs: Vec<f64>,
    /// Paired flatness statistics: mean and stderr of m(t_j) - m(0).
    pub flatness: Vec<(f64, f64)>,
    /// Largest |slope| / se over the increment-on-past regressions.
    pub max_orthogonality_z: f64,
    pub qv_realized_mean: f64,
    pub qv_formula_mean: f64,
    pub qv_ratio: f64,
    /// Smallest value seen on any path (positivity witness).
    pub min_path_value: f64,
    pub records: Vec<ExperimentRecord>,
}

/// Full ensemble: a fresh field and measure per replica, one martingale path
/// each, and the three ensemble tests.
#[allow(clippy::too_many_arguments)]
pub fn martingale_run(
    alpha: f64,
    grid_nodes: usize,
    bins: usize,
    k: usize,
    a: f64,
    eps: f64,
    dt: f64,
    t_grid: &[f64],
    mode: DriftTraceMode,
    replicas: usize,
    eps_kernel: f64,
    stream: Stream,
) -> Result<MartingaleResult> {
    if replicas < 2 {
        return Err(SiltError::input("need at least 2 replicas"));
    }
    let grid = GridSpec::new(grid_nodes, grid_nodes, GridLayout::Midpoint)?;
    let spec = CovarianceSpec::new(alpha)?;
    let cov = covariance_matrix(&grid, &spec);
    let (factor, jitter) = factorize_with_jitter(&cov)?;
    let cfg = SiltConfig::new(k, eps_kernel, Scheme::FullGrid)?;

    let paths: Vec<MartingalePath> = (0..replicas as u64)
        .into_par_iter()
        .map(|r| -> Result<MartingalePath> {
            let rep = stream.fork(r);
            let field = crate::field::sample_field_with_factor(
                &grid,
                &spec,
                &factor,
                jitter,
                rep.fork_str("field"),
            );
            let values: Vec<nalgebra::Vector2<f64>> = (0..grid.len())
                .map(|i| nalgebra::Vector2::new(field.values1[i], field.values2[i]))
                .collect();
            let bin_grid = BinGrid::covering(&values, bins, bins)?;
            let nu = self_intersection_measure(&field, &cfg, &bin_grid)?;
            martingale_path(&nu, k, a, eps, dt, t_grid, mode, rep.fork_str("noise"))
        })
        .collect::<Result<Vec<_>>>()?;

    summarize(paths, replicas)
}

fn summarize(paths: Vec<MartingalePath>, replicas: usize) -> Result<MartingaleResult> {
    let t_grid = paths[0].times.clone();
    let nt = t_grid.len();
    let mut means = Vec::with_capacity(nt);
    let mut stderrs = Vec::with_capacity(nt);
    let mut flatness = Vec::with_capacity(nt);
    for j in 0..nt {
        let vals: Vec<f64> = paths.iter().map(|p| p.values[j]).collect();
        let (m, se) = mean_stderr(&vals);
        means.push(m);
        stderrs.push(se);
        let diffs: Vec<f64> = paths.iter().map(|p| p.values[j] - p.values[0]).collect();
        flatness.push(mean_stderr(&diffs));
    }

    // increments regressed on the current value, per grid interval
    let mut max_z = 0.0f64;
    for j in 0..nt.saturating_sub(1) {
        let x: Vec<f64> = paths.iter().map(|p| p.values[j]).collect();
        let y: Vec<f64> = paths.iter().map(|p| p.increments[j]).collect();
        let n = x.len() as f64;
        let mx = x.iter().sum::<f64>() / n;
        let my = y.iter().sum::<f64>() / n;
        let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
        if sxx == 0.0 {
            continue;
        }
        let sxy: f64 = x.iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum();
        let slope = sxy / sxx;
        let resid: f64 = x
            .iter()
            .zip(&y)
            .map(|(a, b)| (b - my - slope * (a - mx)).powi(2))
            .sum();
        let se = (resid / (n - 2.0) / sxx).sqrt();
        if se > 0.0 {
            max_z = max_z.max((slope / se).abs());
        }
    }

    let realized: Vec<f64> = paths.iter().map(|p| p.qv_realized).collect();
    let formula: Vec<f64> = paths.iter().map(|p| p.qv_formula).collect();
    let (qv_realized_mean, _) = mean_stderr(&realized);
    let (qv_formula_mean, _) = mean_stderr(&formula);
    let qv_ratio = qv_realized_mean / qv_formula_mean;
    let min_path_value = paths
        .iter()
        .flat_map(|p| p.values.iter().cloned())
        .fold(f64::INFINITY, f64::min);

    let mut records = Vec::new();
    for j in 0..nt {
        let mut rec = ExperimentRecord::new(
            "martingale_run",
            format!("t={}", t_grid[j]),
            means[j],
            stderrs[j],
        );
        rec.replicas = replicas;
        rec.extra.insert("flatness_diff".into(), flatness[j].0);
        rec.extra.insert("flatness_se".into(), flatness[j].1);
        rec.extra.insert("qv_realized".into(), qv_realized_mean);
        rec.extra.insert("qv_formula".into(), qv_formula_mean);
        rec.extra.insert("qv_ratio".into(), qv_ratio);
        rec.extra.insert("max_orthogonality_z".into(), max_z);
        rec.extra.insert("min_path_value".into(), min_path_value);
        records.push(rec);
    }

    Ok(MartingaleResult {
        t_grid,
        means,
        stderrs,
        flatness,
        max_orthogonality_z: max_z,
        qv_realized_mean,
        qv_formula_mean,
        qv_ratio,
        min_path_value,
        records,
    })
}

pub(super) fn martingale_run_def() -> ExperimentDef {
    ExperimentDef {
        name: "martingale_run",
        doc: "renormalized-martingale ensemble: flatness, orthogonality, QV",
        params: vec![
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
                name: "bins",
                kind: ParamKind::Int,
                default: ParamValue::Int(6),
                doc: "bins per axis for the self-intersection measure",
                range: Some((1.0, 64.0)),
            },
            ParamSpec {
                name: "k",
                kind: ParamKind::Int,
                default: ParamValue::Int(2),
                doc: "SILT multiplicity",
                range: Some((2.0, 6.0)),
            },
            ParamSpec {
                name: "a",
                kind: ParamKind::Float,
                default: ParamValue::Float(0.0),
                doc: "repulsion rate",
                range: Some((0.0, 100.0)),
            },
            ParamSpec {
                name: "eps",
                kind: ParamKind::Float,
                default: ParamValue::Float(2.0),
                doc: "interaction radius",
                range: Some((1e-3, 100.0)),
            },
            ParamSpec {
                name: "dt",
                kind: ParamKind::Float,
                default: ParamValue::Float(2.5e-3),
                doc: "Euler time step",
                range: Some((1e-9, 1.0)),
            },
            ParamSpec {
                name: "t_grid",
                kind: ParamKind::FloatList,
                default: ParamValue::FloatList(
                    (0..11).map(|j| j as f64 * 0.05).collect(),
                ),
                doc: "record times",
                range: Some((0.0, 10.0)),
            },
            ParamSpec {
                name: "eps_kernel",
                kind: ParamKind::Float,
                default: ParamValue::Float(0.05),
                doc: "delta-family bandwidth",
                range: Some((1e-9, 10.0)),
            },
            ParamSpec {
                name: "mode",
                kind: ParamKind::Str,
                default: ParamValue::Str("paper".into()),
                doc: "drift-trace mode: paper or liouville",
                range: None,
            },
            ParamSpec {
                name: "replicas",
                kind: ParamKind::Int,
                default: ParamValue::Int(10_000),
                doc: "Monte Carlo replicas",
                range: Some((2.0, 1e9)),
            },
        ],
        run: |p, seed| {
            let mode: DriftTraceMode = p.get_str("mode")?.parse()?;
            let result = martingale_run(
                p.get_f64("alpha")?,
                p.get_usize("grid")?,
                p.get_usize("bins")?,
                p.get_usize("k")?,
                p.get_f64("a")?,
                p.get_f64("eps")?,
                p.get_f64("dt")?,
                &p.get_f64_list("t_grid")?,
                mode,
                p.get_usize("replicas")?,
                p.get_f64("eps_kernel")?,
                Stream::from_seed(seed).fork_str("martingale_run"),
            )?;
            let mut records = result.records;
            stamp(&mut records, p, seed, Some(mode.to_string()));
            Ok(records)
        },
    }
}
