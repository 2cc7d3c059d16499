//! The planar Gaussian field and its covariance.
//!
//! The field `eta = (eta_1, eta_2)` lives on `D = [0,1] x [1,2]`; the two
//! coordinates are independent centered Gaussian fields with covariance
//!
//! ```text
//! E eta_i(y1,t1) eta_i(y2,t2) = exp(-|y2-y1|^alpha) * min(t1,t2),  alpha in (0,2].
//! ```
//!
//! For fixed `y` the `t`-sections are standard Brownian motions; correlation
//! across `y` decays like a stable characteristic function. Sampling is by
//! dense factorization of the covariance matrix over the grid nodes, with a
//! diagonal jitter escalation for nearly singular grids.
//!
//! `sample_product_field` draws the non-Gaussian twin `xi(y,t) = zeta(y) w(t)`
//! (stationary `zeta`, Wiener `w`) which shares the covariance above but not
//! the higher moments; it is the comparison object used by the covariance
//! acceptance checks.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Result, SiltError};
use crate::stream::Stream;

pub const Y_RANGE: (f64, f64) = (0.0, 1.0);
pub const T_RANGE: (f64, f64) = (1.0, 2.0);

/// Jitter escalation shared by every dense factorization in the crate:
/// try 0, then `1e-12 * trace/n`, escalating x10 up to `1e-6 * trace/n`.
pub const JITTER_START_REL: f64 = 1e-12;
pub const JITTER_MAX_REL: f64 = 1e-6;

/// Node placement on the rectangle.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum GridLayout {
    /// Cell midpoints; the natural quadrature nodes for the SILT Riemann sums.
    Midpoint,
    /// Endpoints included; contains the lattices `k/n` used by occupation
    /// measure discretizations when `n` divides `ny - 1`.
    Endpoint,
}

/// Rectangular grid on `D = [0,1] x [1,2]`, flattened row-major with the
/// y-index fastest: `idx = it * ny + iy`.
#[derive(Clone, Debug, PartialEq)]
pub struct GridSpec {
    pub ny: usize,
    pub nt: usize,
    pub layout: GridLayout,
    ys: Vec<f64>,
    ts: Vec<f64>,
}

impl GridSpec {
    pub fn new(ny: usize, nt: usize, layout: GridLayout) -> Result<Self> {
        if ny == 0 || nt == 0 {
            return Err(SiltError::input("grid needs at least one node per axis"));
        }
        if ny * nt < 2 {
            return Err(SiltError::input("grid needs at least two nodes in total"));
        }
        let place = |n: usize, lo: f64, hi: f64| -> Vec<f64> {
            match layout {
                GridLayout::Midpoint => (0..n)
                    .map(|i| lo + (hi - lo) * (i as f64 + 0.5) / n as f64)
                    .collect(),
                GridLayout::Endpoint => {
                    if n == 1 {
                        vec![lo]
                    } else {
                        (0..n)
                            .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
                            .collect()
                    }
                }
            }
        };
        Ok(GridSpec {
            ny,
            nt,
            layout,
            ys: place(ny, Y_RANGE.0, Y_RANGE.1),
            ts: place(nt, T_RANGE.0, T_RANGE.1),
        })
    }

    /// Explicit node coordinates; they must be strictly increasing and lie
    /// inside the declared ranges.
    pub fn from_nodes(ys: Vec<f64>, ts: Vec<f64>) -> Result<Self> {
        if ys.is_empty() || ts.is_empty() || ys.len() * ts.len() < 2 {
            return Err(SiltError::input("grid needs at least two nodes"));
        }
        let check = |v: &[f64], lo: f64, hi: f64, name: &str| -> Result<()> {
            for w in v.windows(2) {
                if w[1] <= w[0] {
                    return Err(SiltError::input(format!("{name} nodes not strictly increasing")));
                }
            }
            if v[0] < lo || v[v.len() - 1] > hi {
                return Err(SiltError::input(format!("{name} nodes outside [{lo}, {hi}]")));
            }
            Ok(())
        };
        check(&ys, Y_RANGE.0, Y_RANGE.1, "y")?;
        check(&ts, T_RANGE.0, T_RANGE.1, "t")?;
        Ok(GridSpec {
            ny: ys.len(),
            nt: ts.len(),
            layout: GridLayout::Endpoint,
            ys,
            ts,
        })
    }

    pub fn default_20x20() -> Self {
        GridSpec::new(20, 20, GridLayout::Midpoint).expect("static grid")
    }

    pub fn len(&self) -> usize {
        self.ny * self.nt
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn ys(&self) -> &[f64] {
        &self.ys
    }

    pub fn ts(&self) -> &[f64] {
        &self.ts
    }

    /// Node coordinates for a flat index.
    pub fn node(&self, idx: usize) -> (f64, f64) {
        (self.ys[idx % self.ny], self.ts[idx / self.ny])
    }

    /// Area carried by one node in the Riemann sums over D.
    pub fn cell_volume(&self) -> f64 {
        (Y_RANGE.1 - Y_RANGE.0) * (T_RANGE.1 - T_RANGE.0) / self.len() as f64
    }
}

/// Covariance exponent `alpha in (0, 2]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CovarianceSpec {
    pub alpha: f64,
}

impl CovarianceSpec {
    pub fn new(alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha <= 2.0) {
            return Err(SiltError::input(format!("alpha must lie in (0, 2], got {alpha}")));
        }
        Ok(CovarianceSpec { alpha })
    }
}

fn in_domain(u: (f64, f64)) -> bool {
    u.0 >= Y_RANGE.0 && u.0 <= Y_RANGE.1 && u.1 >= T_RANGE.0 && u.1 <= T_RANGE.1
}

/// The kernel `exp(-|y2-y1|^alpha) * min(t1,t2)` at two points of D.
pub fn covariance(u1: (f64, f64), u2: (f64, f64), spec: &CovarianceSpec) -> Result<f64> {
    if !in_domain(u1) || !in_domain(u2) {
        return Err(SiltError::input(format!(
            "points {u1:?}, {u2:?} must lie in D = [0,1] x [1,2]"
        )));
    }
    Ok(covariance_unchecked(u1, u2, spec.alpha))
}

#[inline]
pub(crate) fn covariance_unchecked(u1: (f64, f64), u2: (f64, f64), alpha: f64) -> f64 {
    (-((u2.0 - u1.0).abs().powf(alpha))).exp() * u1.1.min(u2.1)
}

/// Kernel assembled over all grid nodes, in the grid's flat node order.
pub fn covariance_matrix(grid: &GridSpec, spec: &CovarianceSpec) -> DMatrix<f64> {
    let n = grid.len();
    let mut m = DMatrix::zeros(n, n);
    for j in 0..n {
        let uj = grid.node(j);
        for i in 0..=j {
            let v = covariance_unchecked(grid.node(i), uj, spec.alpha);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
    m
}

/// Lower-triangular factor of a PSD matrix, escalating diagonal jitter until
/// the factorization succeeds. Returns the factor and the jitter used.
pub(crate) fn factorize_with_jitter(m: &DMatrix<f64>) -> Result<(DMatrix<f64>, f64)> {
    let n = m.nrows();
    let scale = m.trace() / n as f64;
    let mut jitter = 0.0;
    loop {
        let mut attempt = m.clone();
        if jitter > 0.0 {
            for i in 0..n {
                attempt[(i, i)] += jitter;
            }
        }
        if let Some(chol) = attempt.cholesky() {
            return Ok((chol.unpack(), jitter));
        }
        jitter = if jitter == 0.0 {
            JITTER_START_REL * scale
        } else {
            jitter * 10.0
        };
        if jitter > JITTER_MAX_REL * scale {
            return Err(SiltError::numerical(format!(
                "factorization failed after max jitter {:.3e} (n = {}, trace = {:.6e})",
                JITTER_MAX_REL * scale,
                n,
                m.trace()
            )));
        }
    }
}

/// One grid realization of the two-coordinate field.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldSample {
    pub grid: GridSpec,
    pub alpha: f64,
    /// eta_1 over the flat node order.
    pub values1: Vec<f64>,
    /// eta_2 over the flat node order.
    pub values2: Vec<f64>,
    /// Diagonal jitter used by the factorization, recorded for provenance.
    pub jitter: f64,
}

impl FieldSample {
    /// Field value `eta(u)` at flat node index `idx`.
    pub fn value(&self, idx: usize) -> [f64; 2] {
        [self.values1[idx], self.values2[idx]]
    }

    /// Bilinear interpolation of eta at `(y, t)`; the point must lie inside
    /// the convex hull of the grid nodes.
    pub fn interpolate(&self, y: f64, t: f64) -> Result<[f64; 2]> {
        let ys = self.grid.ys();
        let ts = self.grid.ts();
        let locate = |v: &[f64], x: f64, name: &str| -> Result<(usize, f64)> {
            if v.len() == 1 {
                if (x - v[0]).abs() < 1e-12 {
                    return Ok((0, 0.0));
                }
                return Err(SiltError::input(format!("{name} = {x} outside single-node grid")));
            }
            if x < v[0] - 1e-12 || x > v[v.len() - 1] + 1e-12 {
                return Err(SiltError::input(format!(
                    "{name} = {x} outside node hull [{}, {}]",
                    v[0],
                    v[v.len() - 1]
                )));
            }
            let x = x.clamp(v[0], v[v.len() - 1]);
            let mut i = match v.binary_search_by(|p| p.partial_cmp(&x).unwrap()) {
                Ok(i) => i,
                Err(i) => i.saturating_sub(1),
            };
            if i >= v.len() - 1 {
                i = v.len() - 2;
            }
            Ok((i, (x - v[i]) / (v[i + 1] - v[i])))
        };
        let (iy, fy) = locate(ys, y, "y")?;
        let (it, ft) = locate(ts, t, "t")?;
        let ny = self.grid.ny;
        let at = |iy: usize, it: usize, vals: &[f64]| vals[it * ny + iy];
        let mut out = [0.0; 2];
        for (c, vals) in [&self.values1, &self.values2].iter().enumerate() {
            let (i1, i2) = (iy, (iy + 1).min(ny - 1));
            let (j1, j2) = (it, (it + 1).min(self.grid.nt - 1));
            let v11 = at(i1, j1, vals);
            let v21 = at(i2, j1, vals);
            let v12 = at(i1, j2, vals);
            let v22 = at(i2, j2, vals);
            out[c] = v11 * (1.0 - fy) * (1.0 - ft)
                + v21 * fy * (1.0 - ft)
                + v12 * (1.0 - fy) * ft
                + v22 * fy * ft;
        }
        Ok(out)
    }
}

fn draw_normals(n: usize, stream: Stream) -> Vec<f64> {
    let mut rng = stream.rng();
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// Sample the Gaussian field on the grid. The two coordinates come from the
/// stream's children 0 and 1, so they are independent and individually
/// reproducible.
pub fn sample_field(grid: &GridSpec, spec: &CovarianceSpec, stream: Stream) -> Result<FieldSample> {
    let cov = covariance_matrix(grid, spec);
    let (factor, jitter) = factorize_with_jitter(&cov)?;
    Ok(sample_field_with_factor(grid, spec, &factor, jitter, stream))
}

/// Sampling against a pre-computed factor; lets ensembles factorize once.
pub fn sample_field_with_factor(
    grid: &GridSpec,
    spec: &CovarianceSpec,
    factor: &DMatrix<f64>,
    jitter: f64,
    stream: Stream,
) -> FieldSample {
    let n = grid.len();
    let mut coords: Vec<Vec<f64>> = Vec::with_capacity(2);
    for c in 0..2u64 {
        let z = nalgebra::DVector::from_vec(draw_normals(n, stream.fork(c)));
        coords.push((factor * z).as_slice().to_vec());
    }
    let values2 = coords.pop().unwrap();
    let values1 = coords.pop().unwrap();
    FieldSample {
        grid: grid.clone(),
        alpha: spec.alpha,
        values1,
        values2,
        jitter,
    }
}

/// Sample the product field `xi(y,t) = zeta(y) w(t)` per coordinate, with
/// `zeta` the stationary field with covariance `exp(-|dy|^alpha)` (dense
/// factorization over the y-nodes) and `w` a Wiener path on [0,2] evaluated
/// at the t-nodes. Same covariance as the Gaussian field, different law.
pub fn sample_product_field(
    grid: &GridSpec,
    spec: &CovarianceSpec,
    stream: Stream,
) -> Result<FieldSample> {
    let ny = grid.ny;
    let mut ycov = DMatrix::zeros(ny, ny);
    for j in 0..ny {
        for i in 0..=j {
            let v = (-((grid.ys()[j] - grid.ys()[i]).abs().powf(spec.alpha))).exp();
            ycov[(i, j)] = v;
            ycov[(j, i)] = v;
        }
    }
    let (factor, jitter) = factorize_with_jitter(&ycov)?;

    let mut out: Vec<Vec<f64>> = Vec::with_capacity(2);
    for c in 0..2u64 {
        let coord = stream.fork(c);
        let z = nalgebra::DVector::from_vec(draw_normals(ny, coord.fork(0)));
        let zeta = &factor * z;
        // Wiener path: independent increments between consecutive t-nodes,
        // starting from w(0) = 0.
        let mut rng = coord.fork(1).rng();
        let mut w = Vec::with_capacity(grid.nt);
        let mut prev_t = 0.0;
        let mut acc = 0.0;
        for &t in grid.ts() {
            let dt = t - prev_t;
            let g: f64 = rng.sample(StandardNormal);
            acc += dt.sqrt() * g;
            w.push(acc);
            prev_t = t;
        }
        let mut vals = vec![0.0; grid.len()];
        for it in 0..grid.nt {
            for iy in 0..ny {
                vals[it * ny + iy] = zeta[iy] * w[it];
            }
        }
        out.push(vals);
    }
    let values2 = out.pop().unwrap();
    let values1 = out.pop().unwrap();
    Ok(FieldSample {
        grid: grid.clone(),
        alpha: spec.alpha,
        values1,
        values2,
        jitter,
    })
}

/// Unbiased sample covariance with jackknife standard errors, per node pair.
pub fn empirical_covariance(
    samples: &[FieldSample],
    pairs: &[(usize, usize)],
) -> Result<Vec<(f64, f64)>> {
    let m = samples.len();
    if m < 2 {
        return Err(SiltError::input("need at least 2 samples"));
    }
    let n = samples[0].values1.len();
    for p in pairs {
        if p.0 >= n || p.1 >= n {
            return Err(SiltError::input(format!("pair {p:?} out of range (n = {n})")));
        }
    }
    let mf = m as f64;
    let mut out = Vec::with_capacity(pairs.len());
    for &(i, j) in pairs {
        let xs: Vec<f64> = samples.iter().map(|s| s.values1[i]).collect();
        let ys: Vec<f64> = samples.iter().map(|s| s.values1[j]).collect();
        let sx: f64 = xs.iter().sum();
        let sy: f64 = ys.iter().sum();
        let sxy: f64 = xs.iter().zip(&ys).map(|(a, b)| a * b).sum();
        let estimate = (sxy - sx * sy / mf) / (mf - 1.0);

        // Leave-one-out estimates in O(m) from the accumulated sums.
        let mut loo = Vec::with_capacity(m);
        for k in 0..m {
            let sx_k = sx - xs[k];
            let sy_k = sy - ys[k];
            let sxy_k = sxy - xs[k] * ys[k];
            loo.push((sxy_k - sx_k * sy_k / (mf - 1.0)) / (mf - 2.0));
        }
        let loo_mean = loo.iter().sum::<f64>() / mf;
        let var = loo.iter().map(|v| (v - loo_mean).powi(2)).sum::<f64>() * (mf - 1.0) / mf;
        out.push((estimate, var.sqrt()));
    }
    Ok(out)
}

// --- serialization: "SILTFLD1" block ---------------------------------------

const MAGIC: &[u8; 8] = b"SILTFLD1";

impl FieldSample {
    /// Flat little-endian binary block: magic, grid shape and node
    /// coordinates, alpha, jitter, then the two value arrays.
    pub fn write_to(&self, w: &mut impl std::io::Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&(self.grid.ny as u32).to_le_bytes())?;
        w.write_all(&(self.grid.nt as u32).to_le_bytes())?;
        let layout: u32 = match self.grid.layout {
            GridLayout::Midpoint => 0,
            GridLayout::Endpoint => 1,
        };
        w.write_all(&layout.to_le_bytes())?;
        w.write_all(&self.alpha.to_le_bytes())?;
        w.write_all(&self.jitter.to_le_bytes())?;
        for v in self.grid.ys().iter().chain(self.grid.ts()) {
            w.write_all(&v.to_le_bytes())?;
        }
        for v in self.values1.iter().chain(&self.values2) {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl std::io::Read) -> Result<FieldSample> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(SiltError::input("bad magic: not a SILTFLD1 block"));
        }
        let mut b4 = [0u8; 4];
        let mut b8 = [0u8; 8];
        let mut read_u32 = |r: &mut dyn std::io::Read| -> Result<u32> {
            r.read_exact(&mut b4)?;
            Ok(u32::from_le_bytes(b4))
        };
        let ny = read_u32(r)? as usize;
        let nt = read_u32(r)? as usize;
        let layout = read_u32(r)?;
        let mut read_f64 = |r: &mut dyn std::io::Read| -> Result<f64> {
            r.read_exact(&mut b8)?;
            Ok(f64::from_le_bytes(b8))
        };
        let alpha = read_f64(r)?;
        let jitter = read_f64(r)?;
        let mut ys = Vec::with_capacity(ny);
        for _ in 0..ny {
            ys.push(read_f64(r)?);
        }
        let mut ts = Vec::with_capacity(nt);
        for _ in 0..nt {
            ts.push(read_f64(r)?);
        }
        let mut grid = GridSpec::from_nodes(ys, ts)?;
        grid.layout = if layout == 0 { GridLayout::Midpoint } else { GridLayout::Endpoint };
        let n = grid.len();
        let mut values1 = Vec::with_capacity(n);
        for _ in 0..n {
            values1.push(read_f64(r)?);
        }
        let mut values2 = Vec::with_capacity(n);
        for _ in 0..n {
            values2.push(read_f64(r)?);
        }
        Ok(FieldSample { grid, alpha, values1, values2, jitter })
    }
}
