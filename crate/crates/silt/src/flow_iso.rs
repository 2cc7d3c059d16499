//! Isotropic stochastic flows driven by a Wiener sheet.
//!
//! Particles follow
//!
//! ```text
//! dx(u,t) = a (x(u,t) - m_t) dt + int phi_eps(x(u,t) - p) W(dp, dt),
//! ```
//!
//! with `m_t` the mass center of the carried measure and `phi_eps` the
//! standard mollifier at interaction radius `eps`. Each particle alone is a
//! planar Brownian motion; two particles decorrelate once their distance
//! exceeds `2 eps`.
//!
//! The log-Jacobian of the flow map is tracked alongside each particle:
//!
//! ```text
//! dL = (1/eps^2) grad phi((x - p)/eps) . W(dp, dt) - c/(2 eps^2) dt + T_a dt,
//! ```
//!
//! a stochastic exponential in disguise (`E det x' = e^{T_a t}` paths have
//! unit mean at `a = 0`). The drift-trace term `T_a` is `a` in
//! [`DriftTraceMode::Paper`] and `2a` in [`DriftTraceMode::Liouville`]; both
//! are carried because the finite-difference Jacobian oracle adjudicates
//! between them empirically.
//!
//! Two step schemes share the particle state. `flow_step_grid` discretizes
//! the sheet on a per-step cell grid (noise is white in time, so each step
//! draws a fresh grid over the current particle bounding box) and is the
//! only scheme that can track `L`. `flow_step_cov` draws the jointly
//! Gaussian increments directly from the pair-correlation kernel and is the
//! cheap choice when only positions matter.

use nalgebra::{DMatrix, DVector, Matrix2, Vector2};
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

use crate::error::{Result, SiltError};
use crate::measure::EmpiricalMeasure;
use crate::mollifier::Mollifier;
use crate::stream::Stream;

/// Noise cells per interaction radius: h = eps / 6. Eight cells per radius
/// would undershoot the gradient-energy quadrature by up to 9 percent; six
/// per radius keeps the per-step variance of L within 0.6 percent of
/// `c/eps^2 dt`.
pub const NOISE_CELLS_PER_EPS: f64 = 6.0;

/// Noise box margin beyond the particle bounding box, in units of eps.
pub const NOISE_MARGIN_EPS: f64 = 2.0;

/// Reading of the drift contribution to the log-Jacobian.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum DriftTraceMode {
    /// Trace term `a t`.
    Paper,
    /// Trace term `2 a t` (trace of the planar drift Jacobian `a I`).
    Liouville,
}

impl DriftTraceMode {
    pub fn trace(&self, drift_rate: f64) -> f64 {
        match self {
            DriftTraceMode::Paper => drift_rate,
            DriftTraceMode::Liouville => 2.0 * drift_rate,
        }
    }
}

impl std::str::FromStr for DriftTraceMode {
    type Err = SiltError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(DriftTraceMode::Paper),
            "liouville" => Ok(DriftTraceMode::Liouville),
            other => Err(SiltError::input(format!(
                "unknown mode '{other}' (expected paper or liouville)"
            ))),
        }
    }
}

impl std::fmt::Display for DriftTraceMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DriftTraceMode::Paper => write!(f, "paper"),
            DriftTraceMode::Liouville => write!(f, "liouville"),
        }
    }
}

/// Particles of a flow applied to weighted atoms: positions, log-Jacobians,
/// starting points, weights, clock.
#[derive(Clone, Debug)]
pub struct ParticleSystem {
    pub positions: Vec<Vector2<f64>>,
    pub logdets: Vec<f64>,
    pub origins: Vec<Vector2<f64>>,
    pub weights: Vec<f64>,
    pub t: f64,
    pub eps: f64,
    pub drift_rate: f64,
}

impl ParticleSystem {
    pub fn new(
        points: Vec<Vector2<f64>>,
        weights: Vec<f64>,
        eps: f64,
        drift_rate: f64,
    ) -> Result<Self> {
        if points.is_empty() || points.len() != weights.len() {
            return Err(SiltError::input("need matching nonempty positions and weights"));
        }
        if !(eps > 0.0) {
            return Err(SiltError::input("interaction radius must be positive"));
        }
        if drift_rate < 0.0 {
            return Err(SiltError::input("drift rate must be nonnegative"));
        }
        Ok(ParticleSystem {
            logdets: vec![0.0; points.len()],
            origins: points.clone(),
            positions: points,
            weights,
            t: 0.0,
            eps,
            drift_rate,
        })
    }

    pub fn from_measure(measure: &EmpiricalMeasure, eps: f64, drift_rate: f64) -> Result<Self> {
        ParticleSystem::new(
            measure.atoms.iter().map(|a| a.pos).collect(),
            measure.atoms.iter().map(|a| a.weight).collect(),
            eps,
            drift_rate,
        )
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Weighted mass center; falls back to the unweighted mean when all
    /// weights vanish (a system of pure probes).
    pub fn mass_center(&self) -> Vector2<f64> {
        let total: f64 = self.weights.iter().sum();
        if total > 0.0 {
            let mut c = Vector2::zeros();
            for (p, w) in self.positions.iter().zip(&self.weights) {
                c += *p * *w;
            }
            c / total
        } else {
            let mut c = Vector2::zeros();
            for p in &self.positions {
                c += *p;
            }
            c / self.positions.len() as f64
        }
    }
}

/// One time-step's spatial noise: cell-discretized Wiener sheet increments,
/// i.i.d. `N(0, h^2 dt)` per cell and component.
#[derive(Clone, Debug)]
pub struct StepNoise {
    pub origin: Vector2<f64>,
    pub h: f64,
    pub nx: usize,
    pub ny: usize,
    pub dw: Vec<[f64; 2]>,
}

impl StepNoise {
    pub fn zeros(origin: Vector2<f64>, h: f64, nx: usize, ny: usize) -> Self {
        StepNoise { origin, h, nx, ny, dw: vec![[0.0, 0.0]; nx * ny] }
    }

    fn cell_center(&self, i: usize, j: usize) -> Vector2<f64> {
        Vector2::new(
            self.origin.x + (i as f64 + 0.5) * self.h,
            self.origin.y + (j as f64 + 0.5) * self.h,
        )
    }

    fn covers(&self, p: Vector2<f64>, radius: f64) -> bool {
        p.x - radius >= self.origin.x
            && p.y - radius >= self.origin.y
            && p.x + radius <= self.origin.x + self.nx as f64 * self.h
            && p.y + radius <= self.origin.y + self.ny as f64 * self.h
    }
}

/// Draw a fresh per-step noise grid covering the current particle positions
/// with the standard margin.
pub fn sample_step_noise(sys: &ParticleSystem, dt: f64, rng: &mut ChaCha12Rng) -> StepNoise {
    let mut lo = sys.positions[0];
    let mut hi = sys.positions[0];
    for p in &sys.positions {
        lo.x = lo.x.min(p.x);
        lo.y = lo.y.min(p.y);
        hi.x = hi.x.max(p.x);
        hi.y = hi.y.max(p.y);
    }
    let margin = NOISE_MARGIN_EPS * sys.eps;
    let h = sys.eps / NOISE_CELLS_PER_EPS;
    let origin = Vector2::new(lo.x - margin, lo.y - margin);
    let nx = ((hi.x - lo.x + 2.0 * margin) / h).ceil() as usize + 1;
    let ny = ((hi.y - lo.y + 2.0 * margin) / h).ceil() as usize + 1;
    let sigma = h * dt.sqrt();
    let dw: Vec<[f64; 2]> = (0..nx * ny)
        .map(|_| {
            let a: f64 = rng.sample(StandardNormal);
            let b: f64 = rng.sample(StandardNormal);
            [sigma * a, sigma * b]
        })
        .collect();
    StepNoise { origin, h, nx, ny, dw }
}

/// One Euler step against a noise grid, updating positions and
/// log-Jacobians. All kernel sums read the position snapshot taken at the
/// start of the step. `center_override` replays a recorded mass-center path
/// (used by the finite-difference oracle); by default the center comes from
/// the system itself.
pub fn flow_step_grid(
    sys: &mut ParticleSystem,
    mol: &Mollifier,
    noise: &StepNoise,
    dt: f64,
    mode: DriftTraceMode,
    center_override: Option<Vector2<f64>>,
) -> Result<()> {
    let eps = sys.eps;
    let a = sys.drift_rate;
    let center = center_override.unwrap_or_else(|| sys.mass_center());
    let comp = mol.grad_energy / (2.0 * eps * eps) * dt;
    let trace_term = mode.trace(a) * dt;

    let mut new_positions = Vec::with_capacity(sys.len());
    for (idx, &x) in sys.positions.iter().enumerate() {
        if !noise.covers(x, eps) {
            return Err(SiltError::input(format!(
                "noise box does not cover the support of particle {idx} at ({:.4}, {:.4})",
                x.x, x.y
            )));
        }
        let i0 = ((x.x - eps - noise.origin.x) / noise.h).floor().max(0.0) as usize;
        let j0 = ((x.y - eps - noise.origin.y) / noise.h).floor().max(0.0) as usize;
        let i1 = (((x.x + eps - noise.origin.x) / noise.h).ceil() as usize).min(noise.nx);
        let j1 = (((x.y + eps - noise.origin.y) / noise.h).ceil() as usize).min(noise.ny);

        let mut diff = Vector2::zeros();
        let mut mart = 0.0;
        for j in j0..j1 {
            for i in i0..i1 {
                let offset = x - noise.cell_center(i, j);
                let r = offset.norm() / eps;
                if r >= 1.0 {
                    continue;
                }
                let dw = noise.dw[j * noise.nx + i];
                let k = mol.phi(r) / eps;
                diff.x += k * dw[0];
                diff.y += k * dw[1];
                // (1/eps^2) grad phi(offset/eps) . dw
                let g = mol.dphi_over_r(r) / (eps * eps * eps);
                mart += g * (offset.x * dw[0] + offset.y * dw[1]);
            }
        }
        sys.logdets[idx] += mart - comp + trace_term;
        let drift = (x - center) * (a * dt);
        new_positions.push(x + drift + diff);
    }
    sys.positions = new_positions;
    sys.t += dt;
    Ok(())
}

/// One Euler step drawing the jointly Gaussian increments straight from the
/// pair-correlation kernel: per coordinate the increment covariance is
/// `K_ij dt` with `K_ij = (phi_eps * phi_eps)(|x_i - x_j|)`, the two
/// coordinates independent. Cannot update log-Jacobians.
pub fn flow_step_cov(
    sys: &mut ParticleSystem,
    mol: &Mollifier,
    dt: f64,
    rng: &mut ChaCha12Rng,
) -> Result<()> {
    let n = sys.len();
    let eps = sys.eps;
    let a = sys.drift_rate;
    let center = sys.mass_center();
    let sqrt_dt = dt.sqrt();

    let mut z = [Vec::with_capacity(n), Vec::with_capacity(n)];
    for zc in z.iter_mut() {
        for _ in 0..n {
            zc.push(rng.sample::<f64, _>(StandardNormal));
        }
    }

    let increments: Vec<Vector2<f64>> = match n {
        1 => vec![Vector2::new(z[0][0], z[1][0]) * sqrt_dt],
        2 => {
            let rho = mol
                .pair_correlation((sys.positions[1] - sys.positions[0]).norm(), eps)
                .clamp(-1.0, 1.0);
            let s = (1.0 - rho * rho).max(0.0).sqrt();
            vec![
                Vector2::new(z[0][0], z[1][0]) * sqrt_dt,
                Vector2::new(rho * z[0][0] + s * z[0][1], rho * z[1][0] + s * z[1][1]) * sqrt_dt,
            ]
        }
        _ => {
            let mut k = DMatrix::zeros(n, n);
            for j in 0..n {
                for i in 0..=j {
                    let v =
                        mol.pair_correlation((sys.positions[j] - sys.positions[i]).norm(), eps);
                    k[(i, j)] = v;
                    k[(j, i)] = v;
                }
            }
            let factor = match k.clone().cholesky() {
                Some(chol) => chol.unpack(),
                None => {
                    // coincident or nearly coincident particles: clip the
                    // spectrum at zero
                    let eig = k.symmetric_eigen();
                    let mut scaled = eig.eigenvectors.clone();
                    for (c, &lambda) in eig.eigenvalues.iter().enumerate() {
                        let s = lambda.max(0.0).sqrt();
                        scaled.column_mut(c).scale_mut(s);
                    }
                    scaled
                }
            };
            let gx = &factor * DVector::from_vec(z[0].clone());
            let gy = &factor * DVector::from_vec(z[1].clone());
            (0..n).map(|i| Vector2::new(gx[i], gy[i]) * sqrt_dt).collect()
        }
    };

    for (i, inc) in increments.into_iter().enumerate() {
        let drift = (sys.positions[i] - center) * (a * dt);
        sys.positions[i] += drift + inc;
    }
    sys.t += dt;
    Ok(())
}

/// A grid-flow run with its noise and mass-center paths retained, so the
/// finite-difference oracle can replay perturbed starts under identical
/// randomness.
#[derive(Clone, Debug)]
pub struct RecordedRun {
    pub noise: Vec<StepNoise>,
    pub centers: Vec<Vector2<f64>>,
    pub sys: ParticleSystem,
}

/// Drive the grid scheme for `steps` steps, recording every step's noise and
/// the mass center used for the drift.
pub fn run_grid_flow_recorded(
    mut sys: ParticleSystem,
    dt: f64,
    steps: usize,
    mode: DriftTraceMode,
    stream: Stream,
) -> Result<RecordedRun> {
    let mol = Mollifier::standard();
    let mut rng = stream.rng();
    let mut noise_path = Vec::with_capacity(steps);
    let mut centers = Vec::with_capacity(steps);
    for _ in 0..steps {
        let center = sys.mass_center();
        let noise = sample_step_noise(&sys, dt, &mut rng);
        flow_step_grid(&mut sys, mol, &noise, dt, mode, Some(center))?;
        noise_path.push(noise);
        centers.push(center);
    }
    Ok(RecordedRun { noise: noise_path, centers, sys })
}

/// Central-difference Jacobian of the time-t flow map at `u`, re-running the
/// grid scheme from the four perturbed starts under the same recorded noise.
/// `centers` replays the mass-center path when the drift is active (the
/// probe is weightless, so the center path is externally fixed).
pub fn jacobian_fd(
    u: Vector2<f64>,
    noise_path: &[StepNoise],
    centers: Option<&[Vector2<f64>]>,
    eps: f64,
    drift_rate: f64,
    dt: f64,
    fd_step: f64,
) -> Result<Matrix2<f64>> {
    if !(fd_step > 0.0) {
        return Err(SiltError::input("finite-difference step must be positive"));
    }
    if drift_rate > 0.0 && centers.is_none() {
        return Err(SiltError::input(
            "drifted replay needs the recorded mass-center path",
        ));
    }
    if let Some(cs) = centers {
        if cs.len() != noise_path.len() {
            return Err(SiltError::input("center path length must match the noise path"));
        }
    }
    let mol = Mollifier::standard();
    let flow_to_end = |start: Vector2<f64>| -> Result<Vector2<f64>> {
        let mut sys = ParticleSystem::new(vec![start], vec![0.0], eps, drift_rate)?;
        for (step, noise) in noise_path.iter().enumerate() {
            let center = centers.map(|cs| cs[step]);
            // mode only shifts L, which the FD map does not read
            flow_step_grid(&mut sys, mol, noise, dt, DriftTraceMode::Liouville, center)?;
        }
        Ok(sys.positions[0])
    };
    let xp1 = flow_to_end(u + Vector2::new(fd_step, 0.0))?;
    let xm1 = flow_to_end(u - Vector2::new(fd_step, 0.0))?;
    let xp2 = flow_to_end(u + Vector2::new(0.0, fd_step))?;
    let xm2 = flow_to_end(u - Vector2::new(0.0, fd_step))?;
    let c1 = (xp1 - xm1) / (2.0 * fd_step);
    let c2 = (xp2 - xm2) / (2.0 * fd_step);
    Ok(Matrix2::new(c1.x, c2.x, c1.y, c2.y))
}

/// The Jacobian weight `rho = exp(-(k-1) L)`. Overflow returns the +inf
/// sentinel with the flag set.
pub fn jacobian_weight(l: f64, k: usize) -> (f64, bool) {
    let v = (-((k as f64) - 1.0) * l).exp();
    (v, v.is_infinite())
}

/// Trajectory and log-Jacobian dump: `t,particle_id,x,y,L` for a sequence of
/// recorded system snapshots.
pub fn write_trajectory_csv(
    w: &mut impl std::io::Write,
    snapshots: &[ParticleSystem],
) -> Result<()> {
    writeln!(w, "t,particle_id,x,y,L")?;
    for sys in snapshots {
        for (id, (pos, l)) in sys.positions.iter().zip(&sys.logdets).enumerate() {
            writeln!(w, "{:.17e},{id},{:.17e},{:.17e},{:.17e}", sys.t, pos.x, pos.y, l)?;
        }
    }
    Ok(())
}

/// Distance path of two particles under the covariance scheme with the
/// repulsive drift; records `(t, |x2 - x1|)` every `record_every` steps
/// (and at t_end).
pub fn pair_distance_path(
    u1: Vector2<f64>,
    u2: Vector2<f64>,
    eps: f64,
    drift_rate: f64,
    dt: f64,
    t_end: f64,
    record_every: usize,
    stream: Stream,
) -> Result<Vec<(f64, f64)>> {
    let mol = Mollifier::standard();
    let mut sys = ParticleSystem::new(vec![u1, u2], vec![0.5, 0.5], eps, drift_rate)?;
    let mut rng = stream.rng();
    let steps = (t_end / dt).round().max(1.0) as usize;
    let every = record_every.max(1);
    let mut path = vec![(0.0, (u2 - u1).norm())];
    for step in 0..steps {
        flow_step_cov(&mut sys, mol, dt, &mut rng)?;
        if (step + 1) % every == 0 || step + 1 == steps {
            path.push((sys.t, (sys.positions[1] - sys.positions[0]).norm()));
        }
    }
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn single(eps: f64) -> ParticleSystem {
        ParticleSystem::new(vec![Vector2::zeros()], vec![1.0], eps, 0.0).unwrap()
    }

    #[test]
    fn single_particle_cov_increments_are_standard() {
        // empirical per-coordinate variance dt, cross-covariance 0
        let mol = Mollifier::standard();
        let dt = 0.01;
        let n = 10_000;
        let mut rng = Stream::from_seed(5).rng();
        let (mut sx2, mut sy2, mut sxy) = (0.0, 0.0, 0.0);
        for _ in 0..n {
            let mut sys = single(0.5);
            flow_step_cov(&mut sys, mol, dt, &mut rng).unwrap();
            let d = sys.positions[0];
            sx2 += d.x * d.x;
            sy2 += d.y * d.y;
            sxy += d.x * d.y;
        }
        let nf = n as f64;
        let se_var = dt * (2.0 / nf).sqrt();
        assert!((sx2 / nf - dt).abs() <= 3.0 * se_var, "var x {}", sx2 / nf);
        assert!((sy2 / nf - dt).abs() <= 3.0 * se_var, "var y {}", sy2 / nf);
        assert!((sxy / nf).abs() <= 3.0 * dt / nf.sqrt(), "cross {}", sxy / nf);
    }

    #[test]
    fn distant_particles_decorrelate_and_coincident_coalesce() {
        let mol = Mollifier::standard();
        let dt = 0.01;
        let eps = 0.3;
        let mut rng = Stream::from_seed(6).rng();

        // distance 1 > 2 eps: exactly zero kernel, empirical corr ~ 0
        let n = 5000;
        let mut cross = 0.0;
        for _ in 0..n {
            let mut sys = ParticleSystem::new(
                vec![Vector2::zeros(), Vector2::new(1.0, 0.0)],
                vec![0.5, 0.5],
                eps,
                0.0,
            )
            .unwrap();
            let before = sys.positions.clone();
            flow_step_cov(&mut sys, mol, dt, &mut rng).unwrap();
            let d0 = sys.positions[0] - before[0];
            let d1 = sys.positions[1] - before[1];
            cross += d0.x * d1.x + d0.y * d1.y;
        }
        let se = 2.0 * dt / (n as f64).sqrt();
        assert!((cross / n as f64).abs() <= 3.0 * se);

        // coincident particles receive identical increments
        let p = Vector2::new(0.2, -0.4);
        let mut sys = ParticleSystem::new(vec![p, p, p], vec![1.0, 1.0, 1.0], eps, 0.0).unwrap();
        flow_step_cov(&mut sys, mol, dt, &mut rng).unwrap();
        let d01 = (sys.positions[0] - sys.positions[1]).norm();
        let d02 = (sys.positions[0] - sys.positions[2]).norm();
        assert!(d01 < 1e-12 && d02 < 1e-12, "coalesced particles split: {d01}, {d02}");
    }

    #[test]
    fn zero_noise_step_is_deterministic() {
        // all dW = 0, a > 0: dL = (-c/(2 eps^2) + trace) dt exactly
        let mol = Mollifier::standard();
        let eps = 0.5;
        let a = 1.5;
        let dt = 1e-3;
        for (mode, trace) in [(DriftTraceMode::Paper, a), (DriftTraceMode::Liouville, 2.0 * a)] {
            let mut sys = ParticleSystem::new(
                vec![Vector2::new(1.0, 0.0), Vector2::new(-1.0, 0.0)],
                vec![0.5, 0.5],
                eps,
                a,
            )
            .unwrap();
            let noise = StepNoise::zeros(Vector2::new(-8.0, -8.0), eps / NOISE_CELLS_PER_EPS, 200, 200);
            flow_step_grid(&mut sys, mol, &noise, dt, mode, None).unwrap();
            let expected = (-mol.grad_energy / (2.0 * eps * eps) + trace) * dt;
            assert_relative_eq!(sys.logdets[0], expected, max_relative = 1e-12);
            // pure repulsion from the pair center
            assert_relative_eq!(sys.positions[0].x, 1.0 + a * dt, max_relative = 1e-12);
        }
    }

    #[test]
    fn margin_violation_is_reported() {
        let mol = Mollifier::standard();
        let mut sys = single(1.0);
        let noise = StepNoise::zeros(Vector2::new(-0.5, -0.5), 0.25, 4, 4);
        let err = flow_step_grid(&mut sys, mol, &noise, 1e-3, DriftTraceMode::Paper, None)
            .unwrap_err();
        assert!(err.to_string().contains("does not cover"), "{err}");
    }

    #[test]
    fn grid_step_martingale_variance() {
        // per-step variance of the L martingale part is c/eps^2 dt
        let mol = Mollifier::standard();
        let eps = 0.7;
        let dt = 1e-3;
        let n = 10_000;
        let comp = mol.grad_energy / (2.0 * eps * eps) * dt;
        let mut rng = Stream::from_seed(17).rng();
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for _ in 0..n {
            let mut sys = single(eps);
            let noise = sample_step_noise(&sys, dt, &mut rng);
            flow_step_grid(&mut sys, mol, &noise, dt, DriftTraceMode::Paper, None).unwrap();
            let mart = sys.logdets[0] + comp;
            sum += mart;
            sumsq += mart * mart;
        }
        let nf = n as f64;
        let var = (sumsq - sum * sum / nf) / (nf - 1.0);
        let target = mol.grad_energy / (eps * eps) * dt;
        let se = target * (2.0 / nf).sqrt();
        assert!(
            (var - target).abs() <= 3.0 * se,
            "var {var} vs {target} (se {se})"
        );
    }

    #[test]
    fn fd_jacobian_identity_and_pure_drift() {
        // empty noise path: the map is the identity
        let j = jacobian_fd(Vector2::new(0.3, 0.4), &[], None, 0.5, 0.0, 1e-3, 1e-4).unwrap();
        assert_relative_eq!((j - Matrix2::identity()).norm(), 0.0, epsilon = 1e-12);

        // zero noise, frozen center, a > 0: det -> e^{2 a t}
        let a = 1.0;
        let eps = 0.5;
        let dt = 1e-4f64;
        let t = 0.2;
        let steps = (t / dt).round() as usize;
        let noise: Vec<StepNoise> = (0..steps)
            .map(|_| StepNoise::zeros(Vector2::new(-6.0, -6.0), eps / NOISE_CELLS_PER_EPS, 150, 150))
            .collect();
        let centers = vec![Vector2::zeros(); steps];
        let j = jacobian_fd(
            Vector2::new(1.0, 0.5),
            &noise,
            Some(&centers),
            eps,
            a,
            dt,
            1e-5,
        )
        .unwrap();
        let det = j.determinant();
        let expected = (2.0 * a * t).exp();
        assert!(
            (det - expected).abs() <= 1e-3 * expected,
            "det {det} vs e^(2at) {expected}"
        );
    }

    #[test]
    fn jacobian_weight_cases() {
        assert_eq!(jacobian_weight(0.0, 2), (1.0, false));
        let (w, flag) = jacobian_weight(2.0f64.ln(), 2);
        assert_relative_eq!(w, 0.5);
        assert!(!flag);
        let (w3, _) = jacobian_weight(-1.0, 3);
        assert_relative_eq!(w3, (2.0f64).exp());
        let (inf, flag) = jacobian_weight(-1e6, 9);
        assert!(inf.is_infinite() && flag);
    }

    #[test]
    fn pair_distance_coalesced_and_ode_limit() {
        // identical starts: identical increments forever
        let path = pair_distance_path(
            Vector2::new(0.1, 0.1),
            Vector2::new(0.1, 0.1),
            0.3,
            1.0,
            1e-3,
            0.2,
            50,
            Stream::from_seed(3),
        )
        .unwrap();
        for &(_, d) in &path {
            assert!(d < 1e-12);
        }

        // zero-noise two-particle drift: distance grows like e^{at} d0
        let mol = Mollifier::standard();
        let a = 2.0;
        let eps = 0.3;
        let dt = 1e-4f64;
        let t = 0.5;
        let mut sys = ParticleSystem::new(
            vec![Vector2::new(-0.25, 0.0), Vector2::new(0.25, 0.0)],
            vec![0.5, 0.5],
            eps,
            a,
        )
        .unwrap();
        let steps = (t / dt).round() as usize;
        for _ in 0..steps {
            let noise = StepNoise::zeros(
                Vector2::new(-40.0, -40.0),
                eps / NOISE_CELLS_PER_EPS,
                1600,
                1600,
            );
            flow_step_grid(&mut sys, mol, &noise, dt, DriftTraceMode::Paper, None).unwrap();
        }
        let d = (sys.positions[1] - sys.positions[0]).norm();
        let expected = 0.5 * (a * t).exp();
        assert!((d - expected).abs() <= 1e-3 * expected, "dist {d} vs {expected}");
    }

    #[test]
    fn pair_distance_matches_reduced_sde_beyond_support() {
        // Beyond 2 eps the difference is an OU-type expansion:
        // dy = a y dt + sqrt(2) dB. Compare E |y(T)|^2 against a direct
        // Euler oracle of the reduced 2-D SDE.
        let eps = 0.1;
        let a = 0.5;
        let dt = 1e-3;
        let t_end = 0.3;
        let d0 = 1.0;
        let n = 4000;

        let root = Stream::from_seed(91);
        let mut mean_pair = 0.0;
        for r in 0..n {
            let path = pair_distance_path(
                Vector2::zeros(),
                Vector2::new(d0, 0.0),
                eps,
                a,
                dt,
                t_end,
                usize::MAX,
                root.fork(r),
            )
            .unwrap();
            let d = path.last().unwrap().1;
            mean_pair += d * d;
        }
        mean_pair /= n as f64;

        let mut mean_sde = 0.0;
        let mut sumsq = 0.0;
        let oracle_root = Stream::from_seed(92);
        for r in 0..n {
            let mut rng = oracle_root.fork(r).rng();
            let mut y = Vector2::new(d0, 0.0);
            let steps = (t_end / dt).round() as usize;
            for _ in 0..steps {
                let g1: f64 = rng.sample(StandardNormal);
                let g2: f64 = rng.sample(StandardNormal);
                y += y * (a * dt) + Vector2::new(g1, g2) * (2.0 * dt).sqrt();
            }
            let v = y.norm_squared();
            mean_sde += v;
            sumsq += v * v;
        }
        mean_sde /= n as f64;
        let se = ((sumsq / n as f64 - mean_sde * mean_sde) / n as f64).sqrt();
        assert!(
            (mean_pair - mean_sde).abs() <= 3.0 * 2.0f64.sqrt() * se,
            "pair {mean_pair} vs reduced SDE {mean_sde} (se {se})"
        );
    }
}
