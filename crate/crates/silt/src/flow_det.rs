//! Deterministic equations with interaction.
//!
//! A flow `x(v,t)` moves every atom of an initial measure by a drift
//! `a(x, mu_t)` that feeds back through the pushforward `mu_t`:
//!
//! ```text
//! dx(v,t) = a(x(v,t), mu_t) dt,   x(v,0) = v,   mu_t = mu o x(.,t)^{-1}.
//! ```
//!
//! The linear drift `A x + mass_center(mu_t)` admits the closed form
//! `x(v,t) = e^{At} v + (e^t - 1) e^{At} m0`, whose Jacobian determinant is
//! `e^{t tr A}` by Liouville; that pair is the exact oracle every Euler claim
//! is tested against. Measures are compared in the bounded-Wasserstein
//! metric with cost `|u-v| / (1 + |u-v|)`.

use std::sync::Arc;

use nalgebra::{Matrix2, Vector2};

use crate::error::{Result, SiltError};
use crate::field::FieldSample;
use crate::measure::{Atom, EmpiricalMeasure};
use crate::transport;

/// Atom-count bound (per measure) up to which the transport value is exact.
pub const EXACT_TRANSPORT_ATOMS: usize = 2048;

/// Drift coefficient of the interaction equation.
#[derive(Clone)]
pub enum DriftSpec {
    /// `a(x, mu) = A x + mass_center(mu)`.
    LinearCenterOfMass { a: Matrix2<f64> },
    /// `a(x, mu) = rate * (x - mass_center(mu))`, rate > 0.
    RadialFromCenter { rate: f64 },
    /// User-supplied drift with its spatial Jacobian trace (the trace feeds
    /// the Liouville log-determinant integral).
    Custom {
        f: Arc<dyn Fn(Vector2<f64>, &MeasureView) -> Vector2<f64> + Send + Sync>,
        jacobian_trace: Arc<dyn Fn(Vector2<f64>, &MeasureView) -> f64 + Send + Sync>,
    },
}

impl DriftSpec {
    pub fn radial(rate: f64) -> Result<Self> {
        if !(rate > 0.0) {
            return Err(SiltError::input("radial drift rate must be positive"));
        }
        Ok(DriftSpec::RadialFromCenter { rate })
    }

    pub fn eval(&self, x: Vector2<f64>, view: &MeasureView) -> Vector2<f64> {
        match self {
            DriftSpec::LinearCenterOfMass { a } => a * x + view.center,
            DriftSpec::RadialFromCenter { rate } => (x - view.center) * *rate,
            DriftSpec::Custom { f, .. } => f(x, view),
        }
    }

    /// Trace of the spatial Jacobian `a'(x, mu)`.
    pub fn jacobian_trace(&self, x: Vector2<f64>, view: &MeasureView) -> f64 {
        match self {
            DriftSpec::LinearCenterOfMass { a } => a.trace(),
            DriftSpec::RadialFromCenter { rate } => 2.0 * rate,
            DriftSpec::Custom { jacobian_trace, .. } => jacobian_trace(x, view),
        }
    }
}

impl std::fmt::Debug for DriftSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DriftSpec::LinearCenterOfMass { a } => write!(f, "LinearCenterOfMass({a:?})"),
            DriftSpec::RadialFromCenter { rate } => write!(f, "RadialFromCenter({rate})"),
            DriftSpec::Custom { .. } => write!(f, "Custom(..)"),
        }
    }
}

/// Immutable per-step view of the measure: the snapshot the drift reads, so
/// there is no intra-step feedback.
pub struct MeasureView<'a> {
    pub measure: &'a EmpiricalMeasure,
    pub center: Vector2<f64>,
}

impl<'a> MeasureView<'a> {
    pub fn new(measure: &'a EmpiricalMeasure) -> Self {
        MeasureView { measure, center: measure.mass_center() }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct FlowConfig {
    pub dt: f64,
    pub t_end: f64,
    pub record_every: usize,
}

impl FlowConfig {
    pub fn new(dt: f64, t_end: f64, record_every: usize) -> Result<Self> {
        if !(dt > 0.0) || t_end < dt {
            return Err(SiltError::input("need dt > 0 and t_end >= dt"));
        }
        Ok(FlowConfig { dt, t_end, record_every: record_every.max(1) })
    }
}

/// Occupation-measure discretization: `n^2` atoms of weight `1/n^2` at the
/// field values over the lattice `(k1/n, 1 + k2/n)`, `0 <= k1, k2 <= n-1`.
/// The field grid must contain the lattice in its interpolation hull.
pub fn discretize_occupation(field: &FieldSample, n: usize) -> Result<EmpiricalMeasure> {
    if n == 0 {
        return Err(SiltError::input("n must be positive"));
    }
    let w = 1.0 / (n * n) as f64;
    let mut atoms = Vec::with_capacity(n * n);
    for k2 in 0..n {
        for k1 in 0..n {
            let y = k1 as f64 / n as f64;
            let t = 1.0 + k2 as f64 / n as f64;
            let v = field.interpolate(y, t).map_err(|e| {
                SiltError::input(format!(
                    "lattice point ({y}, {t}) not interpolable at n = {n}: {e}"
                ))
            })?;
            atoms.push(Atom { pos: Vector2::new(v[0], v[1]), weight: w });
        }
    }
    EmpiricalMeasure::new(atoms)
}

/// Bounded-Wasserstein distance under the cost `|u-v| / (1 + |u-v|)`.
/// Exact (flagged `true`) up to [`EXACT_TRANSPORT_ATOMS`] atoms per measure;
/// beyond that a greedy feasible coupling gives an upper bound (`false`).
pub fn bounded_wasserstein(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> Result<(f64, bool)> {
    let ma = mu.total_mass();
    let mb = nu.total_mass();
    if (ma - mb).abs() > 1e-9 * ma.abs().max(mb.abs()).max(1.0) {
        return Err(SiltError::input(format!(
            "total masses differ ({ma} vs {mb}); normalize the measures first"
        )));
    }
    let a: Vec<&Atom> = mu.atoms.iter().filter(|at| at.weight > 0.0).collect();
    let b: Vec<&Atom> = nu.atoms.iter().filter(|at| at.weight > 0.0).collect();
    if a.is_empty() || b.is_empty() {
        return Ok((0.0, true));
    }
    let supply: Vec<f64> = a.iter().map(|at| at.weight).collect();
    let demand: Vec<f64> = b.iter().map(|at| at.weight).collect();
    let cost = |i: usize, j: usize| {
        let d = (a[i].pos - b[j].pos).norm();
        d / (1.0 + d)
    };
    if a.len().max(b.len()) <= EXACT_TRANSPORT_ATOMS {
        Ok((transport::min_cost_transport(&supply, &demand, &cost), true))
    } else {
        Ok((transport::greedy_transport(&supply, &demand, &cost), false))
    }
}

/// One explicit Euler step: every atom moves by `a(x, mu) dt` against the
/// measure snapshot; weights ride along unchanged (pushforward).
pub fn euler_interaction_step(
    atoms: &EmpiricalMeasure,
    drift: &DriftSpec,
    dt: f64,
) -> Result<EmpiricalMeasure> {
    let view = MeasureView::new(atoms);
    let mut moved = Vec::with_capacity(atoms.len());
    for (i, a) in atoms.atoms.iter().enumerate() {
        let d = drift.eval(a.pos, &view);
        if !d.x.is_finite() || !d.y.is_finite() {
            return Err(SiltError::numerical(format!(
                "drift not finite at atom {i} (position {:?})",
                (a.pos.x, a.pos.y)
            )));
        }
        moved.push(Atom { pos: a.pos + d * dt, weight: a.weight });
    }
    Ok(EmpiricalMeasure { atoms: moved })
}

/// Passive tracer carried by the flow: position plus the Liouville integral
/// `L = int tr a'(x(s), mu_s) ds`, i.e. the log-Jacobian of the flow map.
#[derive(Clone, Copy, Debug)]
pub struct Tracer {
    pub pos: Vector2<f64>,
    pub logdet: f64,
}

/// Result of integrating the interaction flow.
#[derive(Clone, Debug)]
pub struct FlowRun {
    /// Recorded times (always includes t_end).
    pub times: Vec<f64>,
    /// Measure snapshots at the recorded times.
    pub measures: Vec<EmpiricalMeasure>,
    /// Tracer snapshots at the recorded times.
    pub tracers: Vec<Vec<Tracer>>,
}

impl FlowRun {
    /// Trajectory dump: `t,atom_id,x,y,weight` over the recorded snapshots.
    pub fn write_csv(&self, w: &mut impl std::io::Write) -> Result<()> {
        writeln!(w, "t,atom_id,x,y,weight")?;
        for (t, measure) in self.times.iter().zip(&self.measures) {
            for (id, atom) in measure.atoms.iter().enumerate() {
                writeln!(
                    w,
                    "{t:.17e},{id},{:.17e},{:.17e},{:.17e}",
                    atom.pos.x, atom.pos.y, atom.weight
                )?;
            }
        }
        Ok(())
    }
}

/// Integrate the flow from `initial`, carrying optional passive tracers whose
/// log-Jacobians accumulate the drift's Jacobian trace along their own paths.
pub fn run_interaction_flow(
    initial: &EmpiricalMeasure,
    drift: &DriftSpec,
    cfg: &FlowConfig,
    tracer_starts: &[Vector2<f64>],
) -> Result<FlowRun> {
    let steps = (cfg.t_end / cfg.dt).round().max(1.0) as usize;
    let mut measure = initial.clone();
    let mut tracers: Vec<Tracer> =
        tracer_starts.iter().map(|&p| Tracer { pos: p, logdet: 0.0 }).collect();

    let mut run = FlowRun {
        times: vec![0.0],
        measures: vec![measure.clone()],
        tracers: vec![tracers.clone()],
    };
    for step in 0..steps {
        {
            let view = MeasureView::new(&measure);
            for tr in tracers.iter_mut() {
                let d = drift.eval(tr.pos, &view);
                if !d.x.is_finite() || !d.y.is_finite() {
                    return Err(SiltError::numerical("drift not finite at a tracer"));
                }
                tr.logdet += drift.jacobian_trace(tr.pos, &view) * cfg.dt;
                tr.pos += d * cfg.dt;
            }
        }
        measure = euler_interaction_step(&measure, drift, cfg.dt)?;
        if (step + 1) % cfg.record_every == 0 || step + 1 == steps {
            run.times.push((step + 1) as f64 * cfg.dt);
            run.measures.push(measure.clone());
            run.tracers.push(tracers.clone());
        }
    }
    Ok(run)
}

/// Closed-form solution of the linear interaction flow:
/// `x(v,t) = e^{At} v + (e^t - 1) e^{At} m0`.
pub fn closed_form_linear_flow(
    a: &Matrix2<f64>,
    m0: Vector2<f64>,
    v: Vector2<f64>,
    t: f64,
) -> Vector2<f64> {
    let e_at = matrix_exp(a, t);
    e_at * v + e_at * m0 * (t.exp() - 1.0)
}

/// `det e^{At} = e^{t tr A}`.
pub fn liouville_det(a: &Matrix2<f64>, t: f64) -> f64 {
    (t * a.trace()).exp()
}

/// Matrix exponential `e^{At}` by the closed 2x2 formula: with `M = At`,
/// `s = tr M / 2` and `q^2 = s^2 - det M`,
/// `e^M = e^s (cosh(q) I + sinh(q)/q (M - sI))` (trig branch for q^2 < 0).
pub fn matrix_exp(a: &Matrix2<f64>, t: f64) -> Matrix2<f64> {
    let m = a * t;
    let s = m.trace() / 2.0;
    let n = m - Matrix2::identity() * s;
    let disc = s * s - m.determinant();
    let (c, sinc) = if disc > 0.0 {
        let q = disc.sqrt();
        (q.cosh(), q.sinh() / q)
    } else if disc < 0.0 {
        let q = (-disc).sqrt();
        (q.cos(), q.sin() / q)
    } else {
        (1.0, 1.0)
    };
    (Matrix2::identity() * c + n * sinc) * s.exp()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;

    use crate::field::{sample_field, CovarianceSpec, GridLayout, GridSpec};
    use crate::stream::Stream;

    fn endpoint_field(seed: u64, ny: usize, nt: usize) -> FieldSample {
        let grid = GridSpec::new(ny, nt, GridLayout::Endpoint).unwrap();
        sample_field(&grid, &CovarianceSpec::new(1.0).unwrap(), Stream::from_seed(seed)).unwrap()
    }

    #[test]
    fn occupation_basics() {
        let field = endpoint_field(1, 17, 17);
        let mu1 = discretize_occupation(&field, 1).unwrap();
        assert_eq!(mu1.len(), 1);
        assert_relative_eq!(mu1.total_mass(), 1.0);
        let eta00 = field.interpolate(0.0, 1.0).unwrap();
        assert_eq!(mu1.atoms[0].pos, Vector2::new(eta00[0], eta00[1]));

        for n in [2usize, 3, 8] {
            let mu = discretize_occupation(&field, n).unwrap();
            assert_eq!(mu.len(), n * n);
            assert_relative_eq!(mu.total_mass(), 1.0, max_relative = 1e-12);
        }
    }

    #[test]
    fn occupation_gamma_decreases_with_n() {
        let field = endpoint_field(42, 33, 33);
        let mut prev = f64::INFINITY;
        for n in [2usize, 4, 8] {
            let mu_n = discretize_occupation(&field, n).unwrap();
            let mu_2n = discretize_occupation(&field, 2 * n).unwrap();
            let (gamma, exact) = bounded_wasserstein(&mu_n, &mu_2n).unwrap();
            assert!(exact);
            assert!(gamma < prev, "gamma({n}) = {gamma} not below {prev}");
            prev = gamma;
        }
    }

    #[test]
    fn wasserstein_basics() {
        let singleton = |x: f64, y: f64| {
            EmpiricalMeasure::new(vec![Atom { pos: Vector2::new(x, y), weight: 1.0 }]).unwrap()
        };
        let mu = singleton(0.0, 0.0);
        assert_eq!(bounded_wasserstein(&mu, &mu).unwrap().0, 0.0);
        let nu = singleton(3.0, 4.0);
        let (g, exact) = bounded_wasserstein(&mu, &nu).unwrap();
        assert!(exact);
        assert_relative_eq!(g, 5.0 / 6.0, max_relative = 1e-12);

        let heavy = EmpiricalMeasure::new(vec![Atom { pos: Vector2::zeros(), weight: 2.0 }])
            .unwrap();
        assert!(bounded_wasserstein(&mu, &heavy).is_err());
    }

    #[test]
    fn wasserstein_matches_permutation_oracle() {
        let mut rng = Stream::from_seed(8).rng();
        for _ in 0..20 {
            let pts = |rng: &mut rand_chacha::ChaCha12Rng| -> Vec<Vector2<f64>> {
                (0..3)
                    .map(|_| Vector2::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)))
                    .collect()
            };
            let a = pts(&mut rng);
            let b = pts(&mut rng);
            let uniform = |ps: &[Vector2<f64>]| {
                EmpiricalMeasure::new(
                    ps.iter().map(|&p| Atom { pos: p, weight: 1.0 / 3.0 }).collect(),
                )
                .unwrap()
            };
            let (got, exact) = bounded_wasserstein(&uniform(&a), &uniform(&b)).unwrap();
            assert!(exact);
            let cost = |u: Vector2<f64>, v: Vector2<f64>| {
                let d = (u - v).norm();
                d / (1.0 + d)
            };
            let perms: [[usize; 3]; 6] =
                [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
            let best = perms
                .iter()
                .map(|p| (0..3).map(|i| cost(a[i], b[p[i]]) / 3.0).sum::<f64>())
                .fold(f64::INFINITY, f64::min);
            assert!((got - best).abs() < 1e-10, "got {got}, permutation best {best}");
        }
    }

    #[test]
    fn euler_step_cases() {
        let atoms = EmpiricalMeasure::new(vec![
            Atom { pos: Vector2::new(0.0, 0.0), weight: 0.5 },
            Atom { pos: Vector2::new(1.0, 1.0), weight: 0.5 },
        ])
        .unwrap();

        // A = 0 means drift = mass center everywhere; hand-check on 2 atoms
        let zero = DriftSpec::LinearCenterOfMass { a: Matrix2::zeros() };
        let stepped = euler_interaction_step(&atoms, &zero, 0.1).unwrap();
        let center = Vector2::new(0.5, 0.5);
        assert_eq!(stepped.atoms[0].pos, center * 0.1);
        assert_eq!(stepped.atoms[1].pos, Vector2::new(1.0, 1.0) + center * 0.1);
        assert_relative_eq!(stepped.total_mass(), atoms.total_mass());

        // zero drift: atoms unchanged
        let none = DriftSpec::Custom {
            f: Arc::new(|_x, _v| Vector2::zeros()),
            jacobian_trace: Arc::new(|_x, _v| 0.0),
        };
        let still = euler_interaction_step(&atoms, &none, 0.5).unwrap();
        assert_eq!(still, atoms);

        // constant drift: rigid translation
        let c = Vector2::new(2.0, -1.0);
        let constant = DriftSpec::Custom {
            f: Arc::new(move |_x, _v| c),
            jacobian_trace: Arc::new(|_x, _v| 0.0),
        };
        let moved = euler_interaction_step(&atoms, &constant, 0.5).unwrap();
        for (m, a) in moved.atoms.iter().zip(&atoms.atoms) {
            assert_eq!(m.pos, a.pos + c * 0.5);
        }

        // NaN drift names the atom
        let bad = DriftSpec::Custom {
            f: Arc::new(|x, _v| Vector2::new(f64::NAN, 0.0) + x * 0.0),
            jacobian_trace: Arc::new(|_x, _v| 0.0),
        };
        let err = euler_interaction_step(&atoms, &bad, 0.1).unwrap_err();
        assert!(err.to_string().contains("atom 0"), "{err}");
    }

    #[test]
    fn closed_form_cases() {
        let v = Vector2::new(1.0, 1.0);
        let m0 = Vector2::new(0.5, -0.5);
        let a = Matrix2::new(0.3, -0.1, 0.2, 0.4);
        assert_eq!(closed_form_linear_flow(&a, m0, v, 0.0), v);

        // A = 0: v + (e^t - 1) m0
        let t = 0.7;
        let got = closed_form_linear_flow(&Matrix2::zeros(), m0, v, t);
        let expected = v + m0 * (t.exp() - 1.0);
        assert_relative_eq!((got - expected).norm(), 0.0, epsilon = 1e-14);

        // A = diag(1,-1), m0 = 0, t = 1 -> (e, 1/e)
        let diag = Matrix2::new(1.0, 0.0, 0.0, -1.0);
        let got = closed_form_linear_flow(&diag, Vector2::zeros(), v, 1.0);
        assert_relative_eq!(got.x, 1.0f64.exp(), max_relative = 1e-14);
        assert_relative_eq!(got.y, (-1.0f64).exp(), max_relative = 1e-14);
    }

    #[test]
    fn matrix_exp_cases() {
        assert_eq!(matrix_exp(&Matrix2::zeros(), 1.0), Matrix2::identity());

        // skew generator: rotation by theta
        let theta = 0.6f64;
        let skew = Matrix2::new(0.0, -theta, theta, 0.0);
        let rot = matrix_exp(&skew, 1.0);
        assert_relative_eq!(rot[(0, 0)], theta.cos(), max_relative = 1e-14);
        assert_relative_eq!(rot[(1, 0)], theta.sin(), max_relative = 1e-14);

        // group property on random matrices
        let mut rng = Stream::from_seed(17).rng();
        for _ in 0..50 {
            let a = Matrix2::from_fn(|_, _| rng.random_range(-1.5..1.5));
            let (s, t) = (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0));
            let lhs = matrix_exp(&a, s + t);
            let rhs = matrix_exp(&a, s) * matrix_exp(&a, t);
            assert!(
                (lhs - rhs).norm() <= 1e-12 * lhs.norm().max(1.0),
                "group property violated: {a:?}"
            );
        }
    }

    #[test]
    fn liouville_matches_exponential_determinant() {
        // trace-zero A gives 1 for all t
        assert_eq!(liouville_det(&Matrix2::new(1.0, 0.7, 0.3, -1.0), 2.0), 1.0);
        assert_relative_eq!(
            liouville_det(&Matrix2::identity(), 1.0),
            std::f64::consts::E.powi(2),
            max_relative = 1e-14
        );
        let mut rng = Stream::from_seed(23).rng();
        for _ in 0..50 {
            let a = Matrix2::from_fn(|_, _| rng.random_range(-1.5..1.5));
            let t = 0.7;
            let det = matrix_exp(&a, t).determinant();
            assert_relative_eq!(liouville_det(&a, t), det, max_relative = 1e-12);
        }
    }

    #[test]
    fn flow_tracks_closed_form_at_first_order() {
        // Euler endpoint error halves when dt halves.
        let field = endpoint_field(5, 17, 17);
        let mu0 = discretize_occupation(&field, 4).unwrap();
        let m0 = mu0.mass_center();
        let a = Matrix2::new(0.5, 0.2, -0.1, -0.3);
        let drift = DriftSpec::LinearCenterOfMass { a };
        let probe = Vector2::new(0.7, -0.4);
        let t_end = 1.0;

        let mut errors = Vec::new();
        for &dt in &[1e-2, 5e-3, 2.5e-3] {
            let cfg = FlowConfig::new(dt, t_end, usize::MAX).unwrap();
            let run = run_interaction_flow(&mu0, &drift, &cfg, &[probe]).unwrap();
            let got = run.tracers.last().unwrap()[0].pos;
            let expected = closed_form_linear_flow(&a, m0, probe, t_end);
            errors.push((got - expected).norm());
        }
        for w in errors.windows(2) {
            let ratio = w[0] / w[1];
            assert!(
                (1.7..=2.3).contains(&ratio),
                "halving dt gave error ratio {ratio}, errors {errors:?}"
            );
        }
    }

    #[test]
    fn tracer_logdet_matches_liouville_for_linear_drift() {
        let field = endpoint_field(6, 17, 17);
        let mu0 = discretize_occupation(&field, 4).unwrap();
        let a = Matrix2::new(0.5, 0.2, -0.1, -0.3);
        let drift = DriftSpec::LinearCenterOfMass { a };
        let cfg = FlowConfig::new(1e-3, 0.5, usize::MAX).unwrap();
        let run = run_interaction_flow(&mu0, &drift, &cfg, &[Vector2::new(0.1, 0.2)]).unwrap();
        let l = run.tracers.last().unwrap()[0].logdet;
        assert_relative_eq!(l, 0.5 * a.trace(), max_relative = 1e-9);
    }
}
