//! Gram determinants and conditional variances of Gaussian coordinate
//! systems.
//!
//! The Gram determinant of increments is bounded below by the chained
//! conditional variances,
//!
//! ```text
//! G(e_2-e_1, ..., e_k-e_{k-1}) >= Var(e_2|e_1) ... Var(e_k|e_1,...,e_{k-1}),
//! ```
//!
//! and the conditional variance of the field against far-away observations
//! is floored by `K t d1^(alpha+1) + d2/2`. Both facts drive the existence
//! estimates, so they get direct numeric checks here.

use nalgebra::DMatrix;

use crate::error::{Result, SiltError};
use crate::field::factorize_with_jitter;

/// A finite system of centered Gaussian variables given by its covariance.
#[derive(Clone, Debug)]
pub struct GaussianSystem {
    cov: DMatrix<f64>,
}

impl GaussianSystem {
    pub fn new(cov: DMatrix<f64>) -> Result<Self> {
        if cov.nrows() != cov.ncols() || cov.nrows() == 0 {
            return Err(SiltError::input("covariance must be square and nonempty"));
        }
        let n = cov.nrows();
        for i in 0..n {
            for j in 0..i {
                if (cov[(i, j)] - cov[(j, i)]).abs() > 1e-9 * (1.0 + cov.trace().abs()) {
                    return Err(SiltError::input("covariance must be symmetric"));
                }
            }
        }
        let min_eig = cov
            .clone()
            .symmetric_eigen()
            .eigenvalues
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min);
        if min_eig < -1e-10 * cov.trace().max(1.0) {
            return Err(SiltError::input(format!(
                "covariance not PSD: smallest eigenvalue {min_eig:.3e}"
            )));
        }
        Ok(GaussianSystem { cov })
    }

    pub fn dim(&self) -> usize {
        self.cov.nrows()
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    fn submatrix(&self, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
        DMatrix::from_fn(rows.len(), cols.len(), |i, j| self.cov[(rows[i], cols[j])])
    }
}

/// Gram determinant of the covariance submatrix over `subset`.
pub fn gram_determinant(sys: &GaussianSystem, subset: &[usize]) -> Result<f64> {
    if subset.is_empty() {
        return Err(SiltError::input("empty subset"));
    }
    for &i in subset {
        if i >= sys.dim() {
            return Err(SiltError::input(format!("index {i} out of range")));
        }
    }
    Ok(sys.submatrix(subset, subset).determinant())
}

/// Schur-complement conditional variance `Var(e_target | e_given)`.
///
/// With empty `given` this is the marginal variance. A singular conditioning
/// block is handled by the shared jitter escalation; conditional variances
/// are clipped at zero (they can round slightly negative for degenerate
/// systems).
pub fn conditional_variance(sys: &GaussianSystem, target: usize, given: &[usize]) -> Result<f64> {
    if target >= sys.dim() {
        return Err(SiltError::input(format!("target {target} out of range")));
    }
    if given.contains(&target) {
        return Err(SiltError::input("target must not appear in the conditioning set"));
    }
    let marginal = sys.cov[(target, target)];
    if given.is_empty() {
        return Ok(marginal);
    }
    for &i in given {
        if i >= sys.dim() {
            return Err(SiltError::input(format!("index {i} out of range")));
        }
    }
    let block = sys.submatrix(given, given);
    let cross = sys.submatrix(given, &[target]);
    let (factor, _) = factorize_with_jitter(&block).map_err(|e| {
        SiltError::numerical(format!("conditioning block not factorizable: {e}"))
    })?;
    // Solve block * x = cross through the Cholesky factor.
    let x = factor.solve_lower_triangular(&cross).and_then(|y| {
        factor.transpose().solve_upper_triangular(&y)
    });
    let x = x.ok_or_else(|| SiltError::numerical("triangular solve failed"))?;
    let reduction = (cross.transpose() * x)[(0, 0)];
    Ok((marginal - reduction).max(0.0))
}

/// Gram determinant of consecutive differences `e_{i+1} - e_i` along `order`,
/// from the entrywise difference covariance
/// `cov(e_{i+1}-e_i, e_{j+1}-e_j) = C[i+1,j+1] - C[i+1,j] - C[i,j+1] + C[i,j]`.
pub fn increment_gram(sys: &GaussianSystem, order: &[usize]) -> Result<f64> {
    validate_order(sys, order)?;
    let m = order.len() - 1;
    let mut diff = DMatrix::zeros(m, m);
    for i in 0..m {
        for j in 0..m {
            let (a, b) = (order[i], order[i + 1]);
            let (c, d) = (order[j], order[j + 1]);
            diff[(i, j)] =
                sys.cov[(b, d)] - sys.cov[(b, c)] - sys.cov[(a, d)] + sys.cov[(a, c)];
        }
    }
    Ok(diff.determinant())
}

fn validate_order(sys: &GaussianSystem, order: &[usize]) -> Result<()> {
    if order.len() < 2 {
        return Err(SiltError::input("order must list at least 2 indices"));
    }
    for &i in order {
        if i >= sys.dim() {
            return Err(SiltError::input(format!("index {i} out of range")));
        }
    }
    let mut seen = order.to_vec();
    seen.sort_unstable();
    seen.dedup();
    if seen.len() != order.len() {
        return Err(SiltError::input("order must list distinct indices"));
    }
    Ok(())
}

/// Both sides of the increment-Gram lower bound: lhs is the increment Gram
/// determinant, rhs the product of chained conditional variances. The
/// contract is `lhs >= rhs - 1e-9 * max(1, |lhs|)`.
pub fn chain_bound(sys: &GaussianSystem, order: &[usize]) -> Result<(f64, f64)> {
    let lhs = increment_gram(sys, order)?;
    let mut rhs = 1.0;
    for i in 1..order.len() {
        rhs *= conditional_variance(sys, order[i], &order[..i])?;
    }
    Ok((lhs, rhs))
}

/// Parameters of the conditional-variance floor. `K` is existential in the
/// underlying estimate; here it is whatever the caller fitted or configured.
#[derive(Clone, Copy, Debug)]
pub struct VarianceFloorParams {
    pub k: f64,
    pub alpha: f64,
}

impl VarianceFloorParams {
    pub fn new(k: f64, alpha: f64) -> Result<Self> {
        if !(k > 0.0) {
            return Err(SiltError::input("K must be positive"));
        }
        if !(alpha > 0.0 && alpha <= 2.0) {
            return Err(SiltError::input("alpha must lie in (0, 2]"));
        }
        Ok(VarianceFloorParams { k, alpha })
    }
}

/// The floor `K * t * delta1^(alpha+1) + delta2 / 2`.
pub fn variance_floor(
    delta1: f64,
    delta2: f64,
    t: f64,
    params: &VarianceFloorParams,
) -> Result<f64> {
    if !(0.0..0.5).contains(&delta1) || !(0.0..0.5).contains(&delta2) {
        return Err(SiltError::input("separations must lie in [0, 1/2)"));
    }
    if !(1.0..=2.0).contains(&t) {
        return Err(SiltError::input("t must lie in [1, 2]"));
    }
    Ok(params.k * t * delta1.powf(params.alpha + 1.0) + 0.5 * delta2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;

    use crate::stream::Stream;

    fn identity(n: usize) -> GaussianSystem {
        GaussianSystem::new(DMatrix::identity(n, n)).unwrap()
    }

    fn random_psd(n: usize, rng: &mut impl Rng) -> GaussianSystem {
        // B B^T + small diagonal keeps the system comfortably PSD.
        let b = DMatrix::from_fn(n, n + 1, |_, _| rng.random_range(-1.0..1.0));
        let mut cov = &b * b.transpose();
        for i in 0..n {
            cov[(i, i)] += 1e-6;
        }
        GaussianSystem::new(cov).unwrap()
    }

    #[test]
    fn gram_basics() {
        let sys = GaussianSystem::new(DMatrix::from_row_slice(2, 2, &[2.0, -1.0, -1.0, 2.0]))
            .unwrap();
        assert_eq!(gram_determinant(&sys, &[0]).unwrap(), 2.0);
        assert_relative_eq!(gram_determinant(&sys, &[0, 1]).unwrap(), 3.0);
        let id = identity(4);
        assert_relative_eq!(gram_determinant(&id, &[0, 2, 3]).unwrap(), 1.0);
        assert!(gram_determinant(&id, &[]).is_err());
    }

    #[test]
    fn conditional_variance_cases() {
        let id = identity(3);
        // independent: conditional equals marginal
        assert_eq!(conditional_variance(&id, 2, &[0, 1]).unwrap(), 1.0);
        // perfectly correlated pair: zero residual
        let degenerate =
            GaussianSystem::new(DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0])).unwrap();
        let v = conditional_variance(&degenerate, 1, &[0]).unwrap();
        assert!(v.abs() < 1e-8, "got {v}");
        // rho = 0.5: residual 0.75
        let pair =
            GaussianSystem::new(DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 1.0])).unwrap();
        assert_relative_eq!(conditional_variance(&pair, 1, &[0]).unwrap(), 0.75);
        assert!(conditional_variance(&pair, 0, &[0]).is_err());
    }

    #[test]
    fn increment_gram_small_cases() {
        let id2 = identity(2);
        assert_relative_eq!(increment_gram(&id2, &[0, 1]).unwrap(), 2.0);
        let id3 = identity(3);
        // det [[2,-1],[-1,2]] = 3
        assert_relative_eq!(increment_gram(&id3, &[0, 1, 2]).unwrap(), 3.0);
    }

    #[test]
    fn increment_gram_matches_differencing_matrix_oracle() {
        // independent route: D * cov * D^T determinant
        let mut rng = Stream::from_seed(9).rng();
        for _ in 0..50 {
            let sys = random_psd(5, &mut rng);
            let order = [3usize, 0, 4, 1, 2];
            let m = order.len() - 1;
            let mut d = DMatrix::zeros(m, 5);
            for i in 0..m {
                d[(i, order[i])] = -1.0;
                d[(i, order[i + 1])] = 1.0;
            }
            let oracle = (&d * sys.cov() * d.transpose()).determinant();
            let got = increment_gram(&sys, &order).unwrap();
            assert_relative_eq!(got, oracle, max_relative = 1e-9, epsilon = 1e-12);
        }
    }

    #[test]
    fn chain_bound_iid_and_degenerate() {
        for k in 2..=6 {
            let sys = identity(k);
            let order: Vec<usize> = (0..k).collect();
            let (lhs, rhs) = chain_bound(&sys, &order).unwrap();
            // tridiagonal(-1, 2, -1) of size k-1 has determinant k
            assert_relative_eq!(lhs, k as f64, max_relative = 1e-10);
            assert_relative_eq!(rhs, 1.0, max_relative = 1e-12);
            assert!(lhs >= rhs);
        }
        // perfectly correlated chain: both sides vanish
        let ones = GaussianSystem::new(DMatrix::from_element(3, 3, 1.0)).unwrap();
        let (lhs, rhs) = chain_bound(&ones, &[0, 1, 2]).unwrap();
        assert!(lhs.abs() < 1e-12 && rhs.abs() < 1e-12);
    }

    #[test]
    fn chain_bound_randomized_sweep() {
        let mut rng = Stream::from_seed(4242).rng();
        for trial in 0..1000 {
            let n = rng.random_range(2..=6);
            let sys = random_psd(n, &mut rng);
            let order: Vec<usize> = {
                let mut idx: Vec<usize> = (0..n).collect();
                // Fisher-Yates
                for i in (1..n).rev() {
                    let j = rng.random_range(0..=i);
                    idx.swap(i, j);
                }
                idx
            };
            let (lhs, rhs) = chain_bound(&sys, &order).unwrap();
            assert!(
                lhs >= rhs - 1e-9 * lhs.abs().max(1.0),
                "trial {trial}: lhs {lhs} < rhs {rhs}"
            );
        }
    }

    #[test]
    fn gram_monotone_under_extension() {
        // G(S U {j}) <= G(S) * cov[j][j]
        let mut rng = Stream::from_seed(31).rng();
        for _ in 0..200 {
            let sys = random_psd(5, &mut rng);
            let g_s = gram_determinant(&sys, &[0, 1, 2]).unwrap();
            let g_sj = gram_determinant(&sys, &[0, 1, 2, 4]).unwrap();
            assert!(g_sj <= g_s * sys.cov()[(4, 4)] + 1e-9 * g_s.abs().max(1.0));
        }
    }

    #[test]
    fn floor_values() {
        let p = VarianceFloorParams::new(1.0, 1.0).unwrap();
        assert_eq!(variance_floor(0.0, 0.0, 1.0, &p).unwrap(), 0.0);
        assert_relative_eq!(variance_floor(0.0, 0.2, 1.5, &p).unwrap(), 0.1);
        assert_relative_eq!(variance_floor(0.1, 0.0, 1.0, &p).unwrap(), 0.01);
        assert!(variance_floor(0.5, 0.0, 1.0, &p).is_err());
        assert!(variance_floor(0.1, 0.1, 0.5, &p).is_err());
        assert!(VarianceFloorParams::new(0.0, 1.0).is_err());
    }
}
