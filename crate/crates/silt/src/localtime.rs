//! Self-intersection local time estimators.
//!
//! The multiplicity-k SILT of a field sample is the Riemann sum over ordered
//! k-tuples of grid nodes
//!
//! ```text
//! T_k = sum rho(eta(u_1)) prod_{i<k} f_eps(eta(u_{i+1}) - eta(u_i)) * vol^k,
//! ```
//!
//! with the Gaussian delta family `f_eps(z) = exp(-|z|^2 / 2 eps) / (2 pi eps)`.
//! The sum telescopes along the tuple, so the full-grid scheme evaluates it
//! through powers of the N x N kernel matrix instead of enumerating N^k
//! tuples; the result is the identical sum, regrouped. Beyond the tuple
//! budget a stratified Monte Carlo scheme takes over.
//!
//! `diffeo_kernel` is the delta family adapted to a diffeomorphism F; with it
//! the SILT of the image field F(eta) equals the SILT of eta weighted by
//! |det F'|^{-(k-1)}, an identity the tests check per sample.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector, Matrix2, Vector2};
use rand::Rng;

use crate::error::{Result, SiltError};
use crate::field::FieldSample;
use crate::measure::{Atom, EmpiricalMeasure};
use crate::stream::Stream;

pub const DEFAULT_TUPLE_BUDGET: f64 = 1e7;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Scheme {
    FullGrid,
    MonteCarlo { draws: usize },
}

#[derive(Clone, Copy, Debug)]
pub struct SiltConfig {
    /// Multiplicity k >= 2.
    pub k: usize,
    /// Kernel bandwidth (the delta-family epsilon, an area in R^2). Distinct
    /// from any interaction radius; the two never share a field.
    pub epsilon: f64,
    pub scheme: Scheme,
    /// Full-grid refusal threshold on the notional tuple count (ny*nt)^k.
    pub tuple_budget: f64,
}

impl SiltConfig {
    pub fn new(k: usize, epsilon: f64, scheme: Scheme) -> Result<Self> {
        if k < 2 {
            return Err(SiltError::input("multiplicity k must be >= 2"));
        }
        if !(epsilon > 0.0) {
            return Err(SiltError::input("kernel bandwidth must be positive"));
        }
        if let Scheme::MonteCarlo { draws } = scheme {
            if draws == 0 {
                return Err(SiltError::input("monte-carlo scheme needs at least 1 draw"));
            }
        }
        Ok(SiltConfig { k, epsilon, scheme, tuple_budget: DEFAULT_TUPLE_BUDGET })
    }

    pub fn with_budget(mut self, budget: f64) -> Self {
        self.tuple_budget = budget;
        self
    }
}

/// Weight function `rho` applied at `eta(u_1)`.
#[derive(Clone)]
pub enum Weight {
    Constant(f64),
    Callback(Arc<dyn Fn(Vector2<f64>) -> f64 + Send + Sync>),
}

impl Weight {
    pub fn one() -> Self {
        Weight::Constant(1.0)
    }

    pub fn eval(&self, v: Vector2<f64>) -> f64 {
        match self {
            Weight::Constant(c) => *c,
            Weight::Callback(f) => f(v),
        }
    }
}

impl std::fmt::Debug for Weight {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Weight::Constant(c) => write!(f, "Weight::Constant({c})"),
            Weight::Callback(_) => write!(f, "Weight::Callback(..)"),
        }
    }
}

/// The planar Gaussian delta family.
pub fn gauss_kernel(z: Vector2<f64>, epsilon: f64) -> Result<f64> {
    if !(epsilon > 0.0) {
        return Err(SiltError::input("kernel bandwidth must be positive"));
    }
    Ok(gauss_kernel_unchecked(z.x, z.y, epsilon))
}

#[inline]
fn gauss_kernel_unchecked(zx: f64, zy: f64, epsilon: f64) -> f64 {
    (-(zx * zx + zy * zy) / (2.0 * epsilon)).exp() / (2.0 * std::f64::consts::PI * epsilon)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SiltEstimate {
    pub value: f64,
    pub stderr: Option<f64>,
}

fn node_values(field: &FieldSample) -> Vec<Vector2<f64>> {
    (0..field.grid.len())
        .map(|i| Vector2::new(field.values1[i], field.values2[i]))
        .collect()
}

fn kernel_matrix(values: &[Vector2<f64>], epsilon: f64) -> DMatrix<f64> {
    let n = values.len();
    let mut m = DMatrix::zeros(n, n);
    for j in 0..n {
        for i in 0..=j {
            let d = values[j] - values[i];
            let v = gauss_kernel_unchecked(d.x, d.y, epsilon);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
    m
}

/// Per-start-node contributions of the full-grid tuple sum:
/// `contrib[u1] = rho(v[u1]) * (K^(k-1) 1)[u1] * vol^k`. Their sum is the
/// SILT value; the self-intersection measure regroups them by bin.
fn full_grid_contributions(
    values: &[Vector2<f64>],
    weights: &[f64],
    cfg: &SiltConfig,
    vol: f64,
) -> Vec<f64> {
    let n = values.len();
    let kmat = kernel_matrix(values, cfg.epsilon);
    let mut chain = DVector::from_element(n, 1.0);
    for _ in 0..cfg.k - 1 {
        chain = &kmat * chain;
    }
    let volk = vol.powi(cfg.k as i32);
    (0..n).map(|i| weights[i] * chain[i] * volk).collect()
}

fn check_budget(n: usize, cfg: &SiltConfig) -> Result<()> {
    let tuples = (n as f64).powi(cfg.k as i32);
    if tuples > cfg.tuple_budget {
        return Err(SiltError::budget(format!(
            "full-grid scheme would sum {tuples:.3e} tuples (> budget {:.1e}); \
             use Scheme::MonteCarlo",
            cfg.tuple_budget
        )));
    }
    Ok(())
}

/// SILT estimator. Full-grid returns the exact Riemann sum (stderr `None`);
/// Monte Carlo returns the unbiased stratified-u1 tuple estimator with its
/// standard error and needs a stream.
pub fn silt_estimate(
    field: &FieldSample,
    cfg: &SiltConfig,
    weight: &Weight,
    stream: Option<Stream>,
) -> Result<SiltEstimate> {
    let n = field.grid.len();
    if n < 2 {
        return Err(SiltError::input("field grid needs at least 2 nodes"));
    }
    let values = node_values(field);
    let weights: Vec<f64> = values.iter().map(|&v| weight.eval(v)).collect();
    if weights.iter().any(|w| !w.is_finite()) {
        return Err(SiltError::input("weight evaluated to a non-finite value"));
    }
    let vol = field.grid.cell_volume();
    match cfg.scheme {
        Scheme::FullGrid => {
            check_budget(n, cfg)?;
            let contrib = full_grid_contributions(&values, &weights, cfg, vol);
            Ok(SiltEstimate { value: contrib.iter().sum(), stderr: None })
        }
        Scheme::MonteCarlo { draws } => {
            let stream =
                stream.ok_or_else(|| SiltError::input("monte-carlo scheme needs a stream"))?;
            Ok(monte_carlo_estimate(&values, &weights, cfg, vol, draws, stream))
        }
    }
}

/// Stratified-u1 Monte Carlo when `draws >= n`, plain uniform tuples
/// otherwise. `n * vol` is the domain area, so the unnormalized tuple mean
/// scales by `(n * vol)^(k-1)` per chain and `vol` per start node.
fn monte_carlo_estimate(
    values: &[Vector2<f64>],
    weights: &[f64],
    cfg: &SiltConfig,
    vol: f64,
    draws: usize,
    stream: Stream,
) -> SiltEstimate {
    let n = values.len();
    let area = n as f64 * vol;
    let chain_scale = area.powi(cfg.k as i32 - 1);
    let mut rng = stream.rng();

    let chain_product = |rng: &mut rand_chacha::ChaCha12Rng, start: usize| -> f64 {
        let mut prev = start;
        let mut prod = 1.0;
        for _ in 0..cfg.k - 1 {
            let next = rng.random_range(0..n);
            let d = values[next] - values[prev];
            prod *= gauss_kernel_unchecked(d.x, d.y, cfg.epsilon);
            prev = next;
        }
        prod
    };

    if draws >= n {
        // Even allocation over start nodes; the first (draws mod n) strata
        // take one extra draw.
        let base = draws / n;
        let extra = draws % n;
        let mut value = 0.0;
        let mut variance = 0.0;
        for (start, &w) in weights.iter().enumerate() {
            let m = base + usize::from(start < extra);
            let mut sum = 0.0;
            let mut sumsq = 0.0;
            for _ in 0..m {
                let p = chain_product(&mut rng, start);
                sum += p;
                sumsq += p * p;
            }
            let mean = sum / m as f64;
            let scale = vol * w * chain_scale;
            value += scale * mean;
            if m > 1 {
                let var = (sumsq - sum * sum / m as f64) / (m as f64 - 1.0);
                variance += scale * scale * var / m as f64;
            }
        }
        SiltEstimate { value, stderr: Some(variance.sqrt()) }
    } else {
        let scale = area.powi(cfg.k as i32);
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for _ in 0..draws {
            let start = rng.random_range(0..n);
            let g = weights[start] * chain_product(&mut rng, start);
            sum += g;
            sumsq += g * g;
        }
        let mean = sum / draws as f64;
        let stderr = if draws > 1 {
            let var = (sumsq - sum * sum / draws as f64) / (draws as f64 - 1.0);
            Some(scale * (var / draws as f64).sqrt())
        } else {
            None
        };
        SiltEstimate { value: scale * mean, stderr }
    }
}

/// Full-grid SILT with an externally supplied weight per grid node, for
/// weights that are functions of the node rather than of the field value
/// (Jacobian weights carried by a flow, for instance).
pub fn silt_node_weighted(
    field: &FieldSample,
    cfg: &SiltConfig,
    node_weights: &[f64],
) -> Result<f64> {
    let n = field.grid.len();
    if node_weights.len() != n {
        return Err(SiltError::input(format!(
            "need one weight per grid node ({} != {n})",
            node_weights.len()
        )));
    }
    check_budget(n, cfg)?;
    let values = node_values(field);
    let contrib =
        full_grid_contributions(&values, node_weights, cfg, field.grid.cell_volume());
    Ok(contrib.iter().sum())
}

// --- diffeomorphism-adapted delta family ------------------------------------

/// A planar diffeomorphism with its inverse and Jacobian determinant.
pub trait Diffeo {
    fn forward(&self, x: Vector2<f64>) -> Vector2<f64>;
    fn inverse(&self, v: Vector2<f64>) -> Vector2<f64>;
    /// det F'(x), evaluated at a point of the source plane.
    fn jacobian_det(&self, x: Vector2<f64>) -> f64;
}

/// F(x) = A x + b with invertible A.
#[derive(Clone, Debug)]
pub struct AffineMap {
    pub a: Matrix2<f64>,
    pub b: Vector2<f64>,
    a_inv: Matrix2<f64>,
    det: f64,
}

impl AffineMap {
    pub fn new(a: Matrix2<f64>, b: Vector2<f64>) -> Result<Self> {
        let det = a.determinant();
        if det == 0.0 || !det.is_finite() {
            return Err(SiltError::input("affine map must have an invertible matrix"));
        }
        let a_inv = a
            .try_inverse()
            .ok_or_else(|| SiltError::input("affine map matrix not invertible"))?;
        Ok(AffineMap { a, b, a_inv, det })
    }

    pub fn identity() -> Self {
        AffineMap::new(Matrix2::identity(), Vector2::zeros()).unwrap()
    }
}

impl Diffeo for AffineMap {
    fn forward(&self, x: Vector2<f64>) -> Vector2<f64> {
        self.a * x + self.b
    }

    fn inverse(&self, v: Vector2<f64>) -> Vector2<f64> {
        self.a_inv * (v - self.b)
    }

    fn jacobian_det(&self, _x: Vector2<f64>) -> f64 {
        self.det
    }
}

/// The adapted delta family
/// `f^F_eps(v_1..v_k) = |det F'(F^{-1}(v_1))|^{-(k-1)} prod f_eps(F^{-1}(v_{i+1}) - F^{-1}(v_i))`.
pub fn diffeo_kernel(v: &[Vector2<f64>], epsilon: f64, map: &dyn Diffeo) -> Result<f64> {
    if v.len() < 2 {
        return Err(SiltError::input("need at least 2 points"));
    }
    if !(epsilon > 0.0) {
        return Err(SiltError::input("kernel bandwidth must be positive"));
    }
    let back: Vec<Vector2<f64>> = v.iter().map(|&p| map.inverse(p)).collect();
    let det = map.jacobian_det(back[0]);
    if det == 0.0 || !det.is_finite() {
        return Err(SiltError::numerical("zero Jacobian determinant at F^{-1}(v_1)"));
    }
    let mut prod = det.abs().powi(-(v.len() as i32 - 1));
    for w in back.windows(2) {
        let d = w[1] - w[0];
        prod *= gauss_kernel_unchecked(d.x, d.y, epsilon);
    }
    Ok(prod)
}

/// Both routes of the affine image identity: `lhs` is the SILT of the
/// transformed field `A eta + b` summed with the adapted family, `rhs` the
/// plain estimator weighted by `|det A|^{-(k-1)}`. They agree to roundoff
/// but are computed through genuinely different expressions (the lhs maps
/// every value forward and back).
pub fn affine_image_silt(
    field: &FieldSample,
    a: Matrix2<f64>,
    b: Vector2<f64>,
    cfg: &SiltConfig,
) -> Result<(f64, f64)> {
    if !matches!(cfg.scheme, Scheme::FullGrid) {
        return Err(SiltError::input("affine identity check requires the full-grid scheme"));
    }
    let map = AffineMap::new(a, b)?;
    let n = field.grid.len();
    check_budget(n, cfg)?;
    let vol = field.grid.cell_volume();

    // lhs: image values, inverted pointwise through the map.
    let image: Vec<Vector2<f64>> = node_values(field).iter().map(|&v| map.forward(v)).collect();
    let back: Vec<Vector2<f64>> = image.iter().map(|&v| map.inverse(v)).collect();
    let prefactor: Vec<f64> = back
        .iter()
        .map(|&x| map.jacobian_det(x).abs().powi(-(cfg.k as i32 - 1)))
        .collect();
    let lhs: f64 = full_grid_contributions(&back, &prefactor, cfg, vol).iter().sum();

    let rho = map.det.abs().powi(-(cfg.k as i32 - 1));
    let rhs = silt_estimate(field, cfg, &Weight::Constant(rho), None)?.value;
    Ok((lhs, rhs))
}

// --- self-intersection measure ----------------------------------------------

/// Rectangular partition of a bounding box in R^2.
#[derive(Clone, Debug)]
pub struct BinGrid {
    pub origin: Vector2<f64>,
    pub cell: Vector2<f64>,
    pub nx: usize,
    pub ny: usize,
}

impl BinGrid {
    pub fn new(origin: Vector2<f64>, cell: Vector2<f64>, nx: usize, ny: usize) -> Result<Self> {
        if nx == 0 || ny == 0 || !(cell.x > 0.0) || !(cell.y > 0.0) {
            return Err(SiltError::input("bin grid needs positive cell sizes and counts"));
        }
        Ok(BinGrid { origin, cell, nx, ny })
    }

    /// Smallest grid of `nx x ny` cells covering all points, with a small
    /// symmetric margin so boundary points land strictly inside.
    pub fn covering(points: &[Vector2<f64>], nx: usize, ny: usize) -> Result<Self> {
        if points.is_empty() {
            return Err(SiltError::input("no points to cover"));
        }
        let mut lo = points[0];
        let mut hi = points[0];
        for p in points {
            lo.x = lo.x.min(p.x);
            lo.y = lo.y.min(p.y);
            hi.x = hi.x.max(p.x);
            hi.y = hi.y.max(p.y);
        }
        let pad = |span: f64| 1e-9 + 1e-9 * span.abs().max(1.0);
        let px = pad(hi.x - lo.x);
        let py = pad(hi.y - lo.y);
        let cell = Vector2::new(
            (hi.x - lo.x + 2.0 * px) / nx as f64,
            (hi.y - lo.y + 2.0 * py) / ny as f64,
        );
        BinGrid::new(Vector2::new(lo.x - px, lo.y - py), cell, nx, ny)
    }

    pub fn index(&self, p: Vector2<f64>) -> Option<usize> {
        let fx = (p.x - self.origin.x) / self.cell.x;
        let fy = (p.y - self.origin.y) / self.cell.y;
        if fx < 0.0 || fy < 0.0 {
            return None;
        }
        let (ix, iy) = (fx as usize, fy as usize);
        if ix >= self.nx || iy >= self.ny {
            return None;
        }
        Some(iy * self.nx + ix)
    }

    pub fn center(&self, idx: usize) -> Vector2<f64> {
        let ix = idx % self.nx;
        let iy = idx / self.nx;
        Vector2::new(
            self.origin.x + (ix as f64 + 0.5) * self.cell.x,
            self.origin.y + (iy as f64 + 0.5) * self.cell.y,
        )
    }

    pub fn min_cell_width(&self) -> f64 {
        self.cell.x.min(self.cell.y)
    }
}

/// The multiplicity-k self-intersection measure: per-start-node SILT
/// contributions (rho = 1) grouped by the bin containing `eta(u_1)`, one
/// atom per nonempty bin at the bin center. Total mass equals the
/// unweighted SILT value, being the same sum regrouped.
pub fn self_intersection_measure(
    field: &FieldSample,
    cfg: &SiltConfig,
    bins: &BinGrid,
) -> Result<EmpiricalMeasure> {
    let n = field.grid.len();
    if n < 2 {
        return Err(SiltError::input("field grid needs at least 2 nodes"));
    }
    check_budget(n, cfg)?;
    let values = node_values(field);
    let escapes: Vec<String> = values
        .iter()
        .filter(|&&v| bins.index(v).is_none())
        .take(8)
        .map(|v| format!("({:.4}, {:.4})", v.x, v.y))
        .collect();
    if !escapes.is_empty() {
        return Err(SiltError::input(format!(
            "bin box too small; escaping values: {}",
            escapes.join(", ")
        )));
    }
    let weights = vec![1.0; n];
    let contrib = full_grid_contributions(&values, &weights, cfg, field.grid.cell_volume());
    let mut mass = vec![0.0; bins.nx * bins.ny];
    for (i, &c) in contrib.iter().enumerate() {
        mass[bins.index(values[i]).expect("checked above")] += c;
    }
    let atoms: Vec<Atom> = mass
        .iter()
        .enumerate()
        .filter(|(_, &m)| m > 0.0)
        .map(|(idx, &m)| Atom { pos: bins.center(idx), weight: m })
        .collect();
    EmpiricalMeasure::new(atoms)
}

/// Clipped logarithmic self-energy
/// `sum_{i,j} w_i w_j ln_+(1 / max(|u_i - u_j|, floor))`, diagonal included
/// through the floor. `ln_+(x) = max(ln x, 0)`.
pub fn log_energy(measure: &EmpiricalMeasure, distance_floor: f64) -> Result<f64> {
    if !(distance_floor > 0.0) {
        return Err(SiltError::input("distance floor must be positive"));
    }
    let atoms = &measure.atoms;
    let mut total = 0.0;
    for i in 0..atoms.len() {
        for j in 0..atoms.len() {
            let d = (atoms[i].pos - atoms[j].pos).norm().max(distance_floor);
            let lnp = (1.0 / d).ln().max(0.0);
            total += atoms[i].weight * atoms[j].weight * lnp;
        }
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    use crate::field::{sample_field, CovarianceSpec, GridLayout, GridSpec};

    fn small_field(seed: u64, ny: usize, nt: usize) -> FieldSample {
        let grid = GridSpec::new(ny, nt, GridLayout::Midpoint).unwrap();
        let spec = CovarianceSpec::new(1.0).unwrap();
        sample_field(&grid, &spec, Stream::from_seed(seed)).unwrap()
    }

    fn constant_field(value: f64, ny: usize, nt: usize) -> FieldSample {
        let grid = GridSpec::new(ny, nt, GridLayout::Midpoint).unwrap();
        FieldSample {
            alpha: 1.0,
            values1: vec![value; grid.len()],
            values2: vec![-value; grid.len()],
            jitter: 0.0,
            grid,
        }
    }

    /// Brute-force tuple enumeration; the oracle the chain evaluation is
    /// checked against.
    fn brute_force_silt(field: &FieldSample, cfg: &SiltConfig, weight: &Weight) -> f64 {
        let n = field.grid.len();
        let vol = field.grid.cell_volume();
        let values = node_values(field);
        let mut tuple = vec![0usize; cfg.k];
        let mut total = 0.0;
        loop {
            let mut term = weight.eval(values[tuple[0]]);
            for i in 0..cfg.k - 1 {
                let d = values[tuple[i + 1]] - values[tuple[i]];
                term *= gauss_kernel(d, cfg.epsilon).unwrap();
            }
            total += term * vol.powi(cfg.k as i32);
            // odometer increment
            let mut pos = 0;
            loop {
                tuple[pos] += 1;
                if tuple[pos] < n {
                    break;
                }
                tuple[pos] = 0;
                pos += 1;
                if pos == cfg.k {
                    return total;
                }
            }
        }
    }

    #[test]
    fn kernel_values() {
        let f0 = gauss_kernel(Vector2::zeros(), 1.0).unwrap();
        assert_relative_eq!(f0, 1.0 / (2.0 * std::f64::consts::PI), max_relative = 1e-15);
        let f1 = gauss_kernel(Vector2::new(1.0, 0.0), 1.0).unwrap();
        assert_relative_eq!(f1, f0 * (-0.5f64).exp(), max_relative = 1e-15);
        assert!(gauss_kernel(Vector2::zeros(), 0.0).is_err());
    }

    #[test]
    fn kernel_integrates_to_one() {
        // adaptive-free radial quadrature oracle: 1/(2 pi e) int e^{-r^2/2e} 2 pi r dr
        for &eps in &[0.1f64, 1.0] {
            let rmax = eps.sqrt() * 14.0;
            let steps = 40_000;
            let h = rmax / steps as f64;
            let mut integral = 0.0;
            for i in 0..steps {
                let r = (i as f64 + 0.5) * h;
                integral += gauss_kernel(Vector2::new(r, 0.0), eps).unwrap()
                    * 2.0
                    * std::f64::consts::PI
                    * r
                    * h;
            }
            assert!((integral - 1.0).abs() < 1e-6, "eps {eps}: integral {integral}");
        }
    }

    #[test]
    fn kernel_rotation_invariance() {
        let eps = 0.3;
        let a = gauss_kernel(Vector2::new(0.6, -0.8), eps).unwrap();
        let b = gauss_kernel(Vector2::new(-0.8, 0.6), eps).unwrap();
        let c = gauss_kernel(Vector2::new(0.8, 0.6), eps).unwrap();
        assert_eq!(a, b);
        assert_eq!(b, c);
    }

    #[test]
    fn zero_weight_gives_zero() {
        let field = small_field(1, 3, 3);
        let cfg = SiltConfig::new(2, 0.5, Scheme::FullGrid).unwrap();
        let est = silt_estimate(&field, &cfg, &Weight::Constant(0.0), None).unwrap();
        assert_eq!(est.value, 0.0);
        assert_eq!(est.stderr, None);
    }

    #[test]
    fn constant_field_closed_form() {
        // all increments vanish: T = |D|^k * f_eps(0)^(k-1), |D| = 1
        let field = constant_field(0.7, 4, 4);
        for k in [2usize, 3] {
            let eps = 0.5;
            let cfg = SiltConfig::new(k, eps, Scheme::FullGrid).unwrap();
            let est = silt_estimate(&field, &cfg, &Weight::one(), None).unwrap();
            let expected = (1.0 / (2.0 * std::f64::consts::PI * eps)).powi(k as i32 - 1);
            assert_relative_eq!(est.value, expected, max_relative = 1e-12);
        }
    }

    #[test]
    fn chain_matches_brute_force() {
        let field = small_field(7, 2, 2);
        for k in [2usize, 3] {
            let cfg = SiltConfig::new(k, 0.5, Scheme::FullGrid).unwrap();
            let weight = Weight::Callback(Arc::new(|v: Vector2<f64>| 1.0 + 0.1 * v.x));
            let est = silt_estimate(&field, &cfg, &weight, None).unwrap();
            let oracle = brute_force_silt(&field, &cfg, &weight);
            assert_relative_eq!(est.value, oracle, max_relative = 1e-12);
        }
    }

    #[test]
    fn budget_refusal() {
        let field = small_field(3, 5, 5);
        let cfg = SiltConfig::new(3, 0.5, Scheme::FullGrid).unwrap().with_budget(1e3);
        let err = silt_estimate(&field, &cfg, &Weight::one(), None).unwrap_err();
        assert!(matches!(err, SiltError::Budget(_)), "got {err:?}");
        assert!(err.to_string().contains("MonteCarlo"));
    }

    #[test]
    fn monte_carlo_agrees_with_full_grid() {
        let field = small_field(5, 5, 5);
        let full = silt_estimate(
            &field,
            &SiltConfig::new(2, 0.3, Scheme::FullGrid).unwrap(),
            &Weight::one(),
            None,
        )
        .unwrap();
        let mc = silt_estimate(
            &field,
            &SiltConfig::new(2, 0.3, Scheme::MonteCarlo { draws: 40_000 }).unwrap(),
            &Weight::one(),
            Some(Stream::from_seed(100)),
        )
        .unwrap();
        let se = mc.stderr.unwrap();
        assert!(
            (mc.value - full.value).abs() <= 3.0 * se,
            "mc {} vs full {} (se {})",
            mc.value,
            full.value,
            se
        );
        // determinism of the stratified sampler
        let mc2 = silt_estimate(
            &field,
            &SiltConfig::new(2, 0.3, Scheme::MonteCarlo { draws: 40_000 }).unwrap(),
            &Weight::one(),
            Some(Stream::from_seed(100)),
        )
        .unwrap();
        assert_eq!(mc.value, mc2.value);
    }

    #[test]
    fn shift_invariance_with_constant_weight() {
        let field = small_field(11, 4, 4);
        let mut shifted = field.clone();
        for v in shifted.values1.iter_mut() {
            *v += 3.25;
        }
        for v in shifted.values2.iter_mut() {
            *v -= 1.5;
        }
        let cfg = SiltConfig::new(2, 0.4, Scheme::FullGrid).unwrap();
        let a = silt_estimate(&field, &cfg, &Weight::one(), None).unwrap().value;
        let b = silt_estimate(&shifted, &cfg, &Weight::one(), None).unwrap().value;
        assert_relative_eq!(a, b, max_relative = 1e-12);
    }

    #[test]
    fn diffeo_kernel_identity_and_scaling() {
        let eps = 0.7;
        let id = AffineMap::identity();
        let v = [Vector2::new(0.1, 0.2), Vector2::new(-0.3, 0.4), Vector2::new(0.0, 1.0)];
        let adapted = diffeo_kernel(&v, eps, &id).unwrap();
        let plain = gauss_kernel(v[1] - v[0], eps).unwrap() * gauss_kernel(v[2] - v[1], eps).unwrap();
        assert_relative_eq!(adapted, plain, max_relative = 1e-14);

        // F(x) = 2x: det F' = 4; coincident pair gives f_eps(0)/4
        let two = AffineMap::new(Matrix2::new(2.0, 0.0, 0.0, 2.0), Vector2::zeros()).unwrap();
        let p = Vector2::new(0.5, -0.5);
        let got = diffeo_kernel(&[p, p], eps, &two).unwrap();
        assert_relative_eq!(
            got,
            gauss_kernel(Vector2::zeros(), eps).unwrap() / 4.0,
            max_relative = 1e-14
        );
    }

    #[test]
    fn diffeo_kernel_shear_matches_explicit_inverse() {
        // det = 1 shear: unit prefactor, kernel on back-mapped increments
        let eps = 0.5;
        let shear = AffineMap::new(Matrix2::new(1.0, 1.0, 0.0, 1.0), Vector2::new(0.3, -0.2))
            .unwrap();
        let v = [Vector2::new(0.4, 0.1), Vector2::new(-0.2, 0.7), Vector2::new(0.9, -0.3)];
        let got = diffeo_kernel(&v, eps, &shear).unwrap();
        let inv = |p: Vector2<f64>| shear.inverse(p);
        let expected = gauss_kernel(inv(v[1]) - inv(v[0]), eps).unwrap()
            * gauss_kernel(inv(v[2]) - inv(v[1]), eps).unwrap();
        assert_relative_eq!(got, expected, max_relative = 1e-14);
    }

    #[test]
    fn affine_identity_simple_cases() {
        let field = small_field(19, 4, 4);
        let cfg = SiltConfig::new(2, 0.5, Scheme::FullGrid).unwrap();

        let (lhs, rhs) =
            affine_image_silt(&field, Matrix2::identity(), Vector2::zeros(), &cfg).unwrap();
        let plain = silt_estimate(&field, &cfg, &Weight::one(), None).unwrap().value;
        assert_relative_eq!(lhs, plain, max_relative = 1e-12);
        assert_relative_eq!(rhs, plain, max_relative = 1e-12);

        // A = 2I, k = 2: rhs = plain / 4
        let (lhs2, rhs2) = affine_image_silt(
            &field,
            Matrix2::new(2.0, 0.0, 0.0, 2.0),
            Vector2::new(1.0, -2.0),
            &cfg,
        )
        .unwrap();
        assert_relative_eq!(rhs2, plain / 4.0, max_relative = 1e-12);
        assert_relative_eq!(lhs2, rhs2, max_relative = 1e-10);

        assert!(affine_image_silt(&field, Matrix2::zeros(), Vector2::zeros(), &cfg).is_err());
    }

    #[test]
    fn measure_mass_matches_silt() {
        let field = small_field(23, 4, 4);
        let cfg = SiltConfig::new(2, 0.4, Scheme::FullGrid).unwrap();
        let values = node_values(&field);
        let bins = BinGrid::covering(&values, 5, 5).unwrap();
        let measure = self_intersection_measure(&field, &cfg, &bins).unwrap();
        let silt = silt_estimate(&field, &cfg, &Weight::one(), None).unwrap().value;
        assert!(
            (measure.total_mass() - silt).abs() <= 1e-12 * silt.abs().max(1.0),
            "mass {} vs silt {}",
            measure.total_mass(),
            silt
        );

        // single-bin partition carries everything in one atom
        let one = self_intersection_measure(&field, &cfg, &BinGrid::covering(&values, 1, 1).unwrap())
            .unwrap();
        assert_eq!(one.len(), 1);
        assert!((one.total_mass() - silt).abs() <= 1e-12 * silt.abs().max(1.0));
    }

    #[test]
    fn measure_per_bin_matches_enumeration() {
        let field = small_field(29, 2, 2);
        let cfg = SiltConfig::new(2, 0.5, Scheme::FullGrid).unwrap();
        let values = node_values(&field);
        let bins = BinGrid::covering(&values, 3, 3).unwrap();
        let measure = self_intersection_measure(&field, &cfg, &bins).unwrap();

        // enumeration oracle grouped by the bin of eta(u_1)
        let n = field.grid.len();
        let vol = field.grid.cell_volume();
        let mut oracle = vec![0.0; bins.nx * bins.ny];
        for u1 in 0..n {
            for u2 in 0..n {
                let term = gauss_kernel(values[u2] - values[u1], cfg.epsilon).unwrap() * vol * vol;
                oracle[bins.index(values[u1]).unwrap()] += term;
            }
        }
        for atom in &measure.atoms {
            let idx = bins.index(atom.pos).unwrap();
            assert_relative_eq!(atom.weight, oracle[idx], max_relative = 1e-12);
        }
    }

    #[test]
    fn measure_rejects_small_box() {
        let field = small_field(31, 3, 3);
        let cfg = SiltConfig::new(2, 0.4, Scheme::FullGrid).unwrap();
        let bins = BinGrid::new(Vector2::new(0.0, 0.0), Vector2::new(1e-3, 1e-3), 2, 2).unwrap();
        let err = self_intersection_measure(&field, &cfg, &bins).unwrap_err();
        assert!(err.to_string().contains("escaping"), "{err}");
    }

    #[test]
    fn log_energy_hand_cases() {
        let unit = |x: f64, y: f64| Atom { pos: Vector2::new(x, y), weight: 1.0 };
        // distance e > 1: cross terms clipped to zero, diagonal floor remains
        let far = EmpiricalMeasure::new(vec![unit(0.0, 0.0), unit(std::f64::consts::E, 0.0)])
            .unwrap();
        let floor = 1e-6;
        let e_far = log_energy(&far, floor).unwrap();
        assert_relative_eq!(e_far, 2.0 * (1.0 / floor).ln(), max_relative = 1e-12);

        // distance 0.1: cross terms 2 ln 10 plus the diagonal
        let near = EmpiricalMeasure::new(vec![unit(0.0, 0.0), unit(0.1, 0.0)]).unwrap();
        let e_near = log_energy(&near, floor).unwrap();
        assert_relative_eq!(
            e_near,
            2.0 * 10.0f64.ln() + 2.0 * 1e6f64.ln(),
            max_relative = 1e-12
        );
        assert!(log_energy(&near, 0.0).is_err());
    }

    #[test]
    fn log_energy_double_loop_oracle_and_monotonicity() {
        let mut rng = Stream::from_seed(55).rng();
        let atoms: Vec<Atom> = (0..10)
            .map(|_| Atom {
                pos: Vector2::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)),
                weight: rng.random_range(0.0..2.0),
            })
            .collect();
        let m = EmpiricalMeasure::new(atoms.clone()).unwrap();
        let floor = 1e-4;
        let got = log_energy(&m, floor).unwrap();
        let mut oracle = 0.0;
        for a in &atoms {
            for b in &atoms {
                let d = ((a.pos.x - b.pos.x).powi(2) + (a.pos.y - b.pos.y).powi(2))
                    .sqrt()
                    .max(floor);
                oracle += a.weight * b.weight * (1.0 / d).ln().max(0.0);
            }
        }
        assert_relative_eq!(got, oracle, max_relative = 1e-12);

        let mut prev = f64::INFINITY;
        for &fl in &[1e-6, 1e-4, 1e-2, 1.0, 10.0] {
            let e = log_energy(&m, fl).unwrap();
            assert!(e <= prev + 1e-12, "not nonincreasing at floor {fl}");
            prev = e;
        }
    }
}
