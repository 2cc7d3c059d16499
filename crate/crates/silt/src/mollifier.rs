//! The radial mollifier driving the isotropic flows.
//!
//! `phi(u) = C exp(-1/(1 - |u|^2))` inside the unit ball, zero outside, with
//! `C` fixed by `int phi^2 = 1`. Two derived objects govern everything in
//! the stochastic-flow module:
//!
//! - the gradient energy `c = int |grad phi|^2`, the rate constant of the
//!   Jacobian stochastic exponential and of every scaling law;
//! - the radial correlation profiles `psi(s) = (phi * phi)(s)` and
//!   `G(s) = (grad phi * grad phi)(s)` (componentwise convolution, summed),
//!   which give the increment covariances of two particles at distance `s`.
//!
//! Under the scaling `phi_eps(u) = phi(u/eps)/eps`:
//! `int phi_eps^2 = 1`, `int |grad phi_eps|^2 = c/eps^2`,
//! `(phi_eps * phi_eps)(r) = psi(|r|/eps)` and
//! `(grad phi_eps * grad phi_eps)(r) = G(|r|/eps)/eps^2`.
//!
//! All constants come from quadrature at construction; the profiles are
//! tabulated on first use and interpolated linearly.

use std::sync::{LazyLock, OnceLock};

use crate::error::{Result, SiltError};

const TABLE_LEN: usize = 1601; // s in [0, 2], h = 2/1600
const TABLE_MAX: f64 = 2.0;

/// Unnormalized profile `g(r) = exp(-1/(1-r^2))` on [0, 1).
#[inline]
fn bump(r: f64) -> f64 {
    if r >= 1.0 {
        0.0
    } else {
        (-1.0 / (1.0 - r * r)).exp()
    }
}

/// `g'(r) / r = -2 g(r) / (1-r^2)^2`, finite at r = 0.
#[inline]
fn bump_derivative_over_r(r: f64) -> f64 {
    if r >= 1.0 {
        0.0
    } else {
        let v = 1.0 - r * r;
        -2.0 * bump(r) / (v * v)
    }
}

/// Adaptive Simpson on [a, b].
fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    fn simpson(f: &dyn Fn(f64) -> f64, a: f64, fa: f64, b: f64, fb: f64) -> (f64, f64, f64) {
        let m = 0.5 * (a + b);
        let fm = f(m);
        ((b - a) / 6.0 * (fa + 4.0 * fm + fb), m, fm)
    }
    fn recurse(
        f: &dyn Fn(f64) -> f64,
        a: f64,
        fa: f64,
        b: f64,
        fb: f64,
        whole: f64,
        m: f64,
        fm: f64,
        tol: f64,
        depth: u32,
    ) -> f64 {
        let (left, lm, flm) = simpson(f, a, fa, m, fm);
        let (right, rm, frm) = simpson(f, m, fm, b, fb);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            left + right + delta / 15.0
        } else {
            recurse(f, a, fa, m, fm, left, lm, flm, 0.5 * tol, depth - 1)
                + recurse(f, m, fm, b, fb, right, rm, frm, 0.5 * tol, depth - 1)
        }
    }
    let (fa, fb) = (f(a), f(b));
    let (whole, m, fm) = simpson(f, a, fa, b, fb);
    recurse(f, a, fa, b, fb, whole, m, fm, tol, 48)
}

#[derive(Debug)]
pub struct Mollifier {
    /// Normalization constant C with `int phi^2 = 1`.
    pub normalization: f64,
    /// Gradient energy `c = int |grad phi|^2`.
    pub grad_energy: f64,
    pair_table: OnceLock<Vec<f64>>,
    grad_table: OnceLock<Vec<f64>>,
}

/// Build the mollifier, computing C and c by radial quadrature.
pub fn make_mollifier() -> Result<Mollifier> {
    // int phi^2 = C^2 * 2 pi * int_0^1 g(r)^2 r dr
    let i2 = 2.0 * std::f64::consts::PI
        * adaptive_simpson(&|r| bump(r) * bump(r) * r, 0.0, 1.0, 1e-14);
    if !(i2 > 0.0) || !i2.is_finite() {
        return Err(SiltError::numerical("mollifier normalization quadrature failed"));
    }
    let c2 = 1.0 / i2;
    // c = C^2 * 2 pi * int_0^1 (g'(r))^2 r dr, with g'(r) = r * (g'/r)
    let grad = 2.0 * std::f64::consts::PI
        * adaptive_simpson(
            &|r| {
                let d = r * bump_derivative_over_r(r);
                d * d * r
            },
            0.0,
            1.0,
            1e-14,
        );
    if !(grad > 0.0) || !grad.is_finite() {
        return Err(SiltError::numerical("mollifier gradient-energy quadrature failed"));
    }
    Ok(Mollifier {
        normalization: c2.sqrt(),
        grad_energy: c2 * grad,
        pair_table: OnceLock::new(),
        grad_table: OnceLock::new(),
    })
}

static STANDARD: LazyLock<Mollifier> =
    LazyLock::new(|| make_mollifier().expect("mollifier quadrature"));

impl Mollifier {
    /// The shared process-wide instance; the profile is fixed, so there is
    /// exactly one.
    pub fn standard() -> &'static Mollifier {
        &STANDARD
    }

    /// `phi` at radius r (scale 1).
    #[inline]
    pub fn phi(&self, r: f64) -> f64 {
        self.normalization * bump(r)
    }

    /// Radial derivative `phi'(r)`.
    #[inline]
    pub fn dphi(&self, r: f64) -> f64 {
        self.normalization * r * bump_derivative_over_r(r)
    }

    /// `phi'(r)/r`, the factor mapping an offset vector to `grad phi`:
    /// `grad phi(u) = (phi'(|u|)/|u|) u`. Finite everywhere.
    #[inline]
    pub fn dphi_over_r(&self, r: f64) -> f64 {
        self.normalization * bump_derivative_over_r(r)
    }

    /// `(phi_eps * phi_eps)(dist)`; equals 1 at dist = 0 for every eps and
    /// vanishes for dist >= 2 eps.
    pub fn pair_correlation(&self, dist: f64, eps: f64) -> f64 {
        self.lookup(self.pair_table(), dist / eps)
    }

    /// `(grad phi_eps * grad phi_eps)(dist) = G(dist/eps) / eps^2`;
    /// equals `c/eps^2` at dist = 0.
    pub fn grad_correlation(&self, dist: f64, eps: f64) -> f64 {
        self.lookup(self.grad_table(), dist / eps) / (eps * eps)
    }

    fn lookup(&self, table: &[f64], s: f64) -> f64 {
        if !(s >= 0.0) {
            return table[0];
        }
        if s >= TABLE_MAX {
            return 0.0;
        }
        let x = s / TABLE_MAX * (TABLE_LEN - 1) as f64;
        let i = (x as usize).min(TABLE_LEN - 2);
        let f = x - i as f64;
        table[i] * (1.0 - f) + table[i + 1] * f
    }

    fn pair_table(&self) -> &[f64] {
        self.pair_table.get_or_init(|| self.build_tables().0)
    }

    fn grad_table(&self) -> &[f64] {
        self.grad_table.get_or_init(|| self.build_tables().1)
    }

    /// Convolutions at unit scale by polar quadrature: for each tabulated
    /// separation s,
    /// `psi(s) = int phi(rho) phi(d) rho drho dtheta` and
    /// `G(s)  = int phi'(rho) (phi'(d)/d) (rho^2 - s rho cos theta) drho dtheta`
    /// with `d = sqrt(rho^2 + s^2 - 2 s rho cos theta)`. The integrands are
    /// smooth with compact support, so midpoint sums converge fast.
    fn build_tables(&self) -> (Vec<f64>, Vec<f64>) {
        let n_rho = 256;
        let n_theta = 128; // over [0, pi], doubled by symmetry
        let d_rho = 1.0 / n_rho as f64;
        let d_theta = std::f64::consts::PI / n_theta as f64;

        let rhos: Vec<f64> = (0..n_rho).map(|i| (i as f64 + 0.5) * d_rho).collect();
        let cos_thetas: Vec<f64> =
            (0..n_theta).map(|j| ((j as f64 + 0.5) * d_theta).cos()).collect();
        let phi_rho: Vec<f64> = rhos.iter().map(|&r| self.phi(r)).collect();
        let dphi_rho: Vec<f64> = rhos.iter().map(|&r| self.dphi(r)).collect();

        let mut pair = vec![0.0; TABLE_LEN];
        let mut grad = vec![0.0; TABLE_LEN];
        for (k, (p, g)) in pair.iter_mut().zip(grad.iter_mut()).enumerate() {
            let s = k as f64 / (TABLE_LEN - 1) as f64 * TABLE_MAX;
            let mut acc_p = 0.0;
            let mut acc_g = 0.0;
            for (i, &rho) in rhos.iter().enumerate() {
                if rho + 1.0 <= s {
                    continue; // supports disjoint at this radius
                }
                let mut row_p = 0.0;
                let mut row_g = 0.0;
                for &ct in &cos_thetas {
                    let d2 = rho * rho + s * s - 2.0 * s * rho * ct;
                    if d2 >= 1.0 {
                        continue;
                    }
                    let d = d2.sqrt();
                    row_p += self.phi(d);
                    row_g += self.dphi_over_r(d) * (rho * rho - s * rho * ct);
                }
                acc_p += phi_rho[i] * rho * row_p;
                acc_g += dphi_rho[i] * row_g;
            }
            // factor 2 from the theta symmetry
            *p = 2.0 * acc_p * d_rho * d_theta;
            *g = 2.0 * acc_g * d_rho * d_theta;
        }
        // pin the exact endpoint values
        pair[0] = 1.0;
        grad[0] = self.grad_energy;
        (pair, grad)
    }
}
