//! Mean-square dispersion of the flowed field.
//!
//! The limit object is
//!
//! ```text
//! E int int |x_eps(eta(u2), t) - x_eps(eta(u1), t)|^2 du1 du2
//!   -> 4t + E int int |eta(u2) - eta(u1)|^2 du1 du2   (eps -> 0),
//! ```
//!
//! two extra planar Brownian motions' worth of spread on top of the field's
//! own. The double integral is estimated by uniform pairs `(u1, u2)`: each
//! pair gets a joint two-point field draw and its own two-particle flow,
//! which leaves the pair expectation unchanged and makes replicas cheap.
//! The baseline has a closed-form kernel integral evaluated by quadrature.

use nalgebra::Vector2;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use super::{mean_stderr, stamp, ExperimentDef, ExperimentRecord, ParamKind, ParamSpec, ParamValue};
use crate::error::{Result, SiltError};
use crate::field::covariance;
use crate::field::CovarianceSpec;
use crate::flow_iso::{flow_step_cov, ParticleSystem};
use crate::mollifier::Mollifier;
use crate::stream::Stream;

/// Closed-form baseline `E int int |eta(u2) - eta(u1)|^2 du1 du2`
/// `= 6 - (16/3) * int int exp(-|y1-y2|^alpha) dy1 dy2`, the y-integral by
/// quadrature.
pub fn dispersion_baseline_quadrature(alpha: f64) -> f64 {
    // int_0^1 int_0^1 e^{-|y1-y2|^alpha} = 2 int_0^1 (1-z) e^{-z^alpha} dz
    let n = 400_000;
    let h = 1.0 / n as f64;
    let mut acc = 0.0;
    for i in 0..n {
        let z = (i as f64 + 0.5) * h;
        acc += (1.0 - z) * (-z.powf(alpha)).exp();
    }
    let b_y = 2.0 * acc * h;
    6.0 - 16.0 / 3.0 * b_y
}

#[derive(Clone, Debug)]
pub struct DispersionRow {
    pub eps: f64,
    pub estimate: f64,
    pub stderr: f64,
    /// Monte Carlo baseline from the same pair draws (t = 0 coupling).
    pub baseline_mc: f64,
}

#[derive(Clone, Debug)]
pub struct DispersionResult {
    pub rows: Vec<DispersionRow>,
    pub baseline_quadrature: f64,
    /// 4t + quadrature baseline.
    pub target: f64,
    pub records: Vec<ExperimentRecord>,
}

/// One pair: uniform (u1, u2) in D, a joint two-point field draw, then a
/// two-particle flow to time t. Returns (|d_eta|^2, |d_x(t)|^2).
fn pair_sample(
    alpha: f64,
    eps: f64,
    t: f64,
    dt: f64,
    stream: Stream,
) -> Result<(f64, f64)> {
    let mut rng = stream.rng();
    let u1 = (rng.random_range(0.0..1.0), rng.random_range(1.0..2.0));
    let u2 = (rng.random_range(0.0..1.0), rng.random_range(1.0..2.0));
    let spec = CovarianceSpec::new(alpha)?;
    let c11 = covariance(u1, u1, &spec)?;
    let c22 = covariance(u2, u2, &spec)?;
    let c12 = covariance(u1, u2, &spec)?;
    // 2x2 Cholesky per coordinate
    let l11 = c11.sqrt();
    let l21 = c12 / l11;
    let l22 = (c22 - l21 * l21).max(0.0).sqrt();
    let mut draw_pair = || {
        let z1: f64 = rng.sample(StandardNormal);
        let z2: f64 = rng.sample(StandardNormal);
        (l11 * z1, l21 * z1 + l22 * z2)
    };
    let (e1x, e2x) = draw_pair();
    let (e1y, e2y) = draw_pair();
    let eta1 = Vector2::new(e1x, e1y);
    let eta2 = Vector2::new(e2x, e2y);
    let base = (eta2 - eta1).norm_squared();

    let steps = (t / dt).round() as usize;
    if steps == 0 {
        return Ok((base, base));
    }
    let mol = Mollifier::standard();
    let mut sys = ParticleSystem::new(vec![eta1, eta2], vec![0.5, 0.5], eps, 0.0)?;
    for _ in 0..steps {
        flow_step_cov(&mut sys, mol, dt, &mut rng)?;
    }
    let moved = (sys.positions[1] - sys.positions[0]).norm_squared();
    Ok((base, moved))
}

/// Monte Carlo dispersion table across interaction radii.
pub fn dispersion_limit(
    alpha: f64,
    t: f64,
    eps_list: &[f64],
    replicas: usize,
    pairs_per_replica: usize,
    dt: f64,
    stream: Stream,
) -> Result<DispersionResult> {
    if replicas == 0 || pairs_per_replica == 0 {
        return Err(SiltError::input("need at least one replica and one pair"));
    }
    let baseline_quadrature = dispersion_baseline_quadrature(alpha);
    let target = 4.0 * t + baseline_quadrature;
    let mut rows = Vec::new();
    let mut records = Vec::new();
    for (ei, &eps) in eps_list.iter().enumerate() {
        let eps_stream = stream.fork(ei as u64);
        let samples: Vec<(f64, f64)> = (0..replicas as u64)
            .into_par_iter()
            .map(|r| -> Result<Vec<(f64, f64)>> {
                let rep = eps_stream.fork(r);
                (0..pairs_per_replica as u64)
                    .map(|p| pair_sample(alpha, eps, t, dt, rep.fork(p)))
                    .collect()
            })
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .flatten()
            .collect();
        let moved: Vec<f64> = samples.iter().map(|s| s.1).collect();
        let base: Vec<f64> = samples.iter().map(|s| s.0).collect();
        let (estimate, stderr) = mean_stderr(&moved);
        let (baseline_mc, _) = mean_stderr(&base);
        let mut rec = ExperimentRecord::new(
            "dispersion_limit",
            format!("eps={eps}"),
            estimate,
            stderr,
        );
        rec.replicas = replicas;
        rec.extra.insert("baseline_mc".into(), baseline_mc);
        rec.extra.insert("baseline_quadrature".into(), baseline_quadrature);
        rec.extra.insert("target".into(), target);
        rec.extra.insert("ratio_to_target".into(), estimate / target);
        records.push(rec);
        rows.push(DispersionRow { eps, estimate, stderr, baseline_mc });
    }
    Ok(DispersionResult { rows, baseline_quadrature, target, records })
}

pub(super) fn dispersion_limit_def() -> ExperimentDef {
    ExperimentDef {
        name: "dispersion_limit",
        doc: "mean-square spread of the flowed field against 4t + baseline",
        params: vec![
            ParamSpec {
                name: "alpha",
                kind: ParamKind::Float,
                default: ParamValue::Float(1.0),
                doc: "covariance exponent in (0, 2]",
                range: Some((1e-6, 2.0)),
            },
            ParamSpec {
                name: "t",
                kind: ParamKind::Float,
                default: ParamValue::Float(0.5),
                doc: "flow horizon",
                range: Some((0.0, 10.0)),
            },
            ParamSpec {
                name: "eps_list",
                kind: ParamKind::FloatList,
                default: ParamValue::FloatList(vec![0.1]),
                doc: "interaction radii",
                range: Some((1e-3, 100.0)),
            },
            ParamSpec {
                name: "replicas",
                kind: ParamKind::Int,
                default: ParamValue::Int(500),
                doc: "Monte Carlo replicas",
                range: Some((1.0, 1e9)),
            },
            ParamSpec {
                name: "pairs",
                kind: ParamKind::Int,
                default: ParamValue::Int(16),
                doc: "pair draws per replica",
                range: Some((1.0, 1e6)),
            },
            ParamSpec {
                name: "dt",
                kind: ParamKind::Float,
                default: ParamValue::Float(1e-3),
                doc: "Euler time step",
                range: Some((1e-9, 1.0)),
            },
        ],
        run: |p, seed| {
            let result = dispersion_limit(
                p.get_f64("alpha")?,
                p.get_f64("t")?,
                &p.get_f64_list("eps_list")?,
                p.get_usize("replicas")?,
                p.get_usize("pairs")?,
                p.get_f64("dt")?,
                Stream::from_seed(seed).fork_str("dispersion_limit"),
            )?;
            let mut records = result.records;
            stamp(&mut records, p, seed, None);
            Ok(records)
        },
    }
}
