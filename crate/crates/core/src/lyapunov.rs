//! Stationary covariance of `dx = A x dt + B dxi` and the mean harvested power.
//!
//! The covariance solves `A P + P A^T + Q = 0` with `Q = B W B^T`. The system is
//! vectorized column-major as `(I (x) A + A (x) I) vec(P) = -vec(Q)` and solved by
//! LU with partial pivoting; at five states that is a 25x25 dense solve.

use nalgebra::DMatrix;

use crate::error::{domain, Error, Result};
use crate::model::{ensure_hurwitz, StateSpaceModel};

/// Pivot ratio below which the Kronecker system is treated as singular.
const SINGULAR_PIVOT_RATIO: f64 = 1e-14;

/// Which Lyapunov equation to solve.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Orientation {
    /// `A P + P A^T + Q = 0`: stationary state covariance.
    #[default]
    Covariance,
    /// `A^T P + P A + Q = 0`, the transposed form. Kept for comparison only; its
    /// `P[n, n]` is not the stationary output variance.
    Transposed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceResult {
    pub p: DMatrix<f64>,
    /// Frobenius norm of `A P + P A^T + Q`.
    pub residual_norm: f64,
}

/// Solves `A P + P A^T + Q = 0` for stable `A`.
pub fn solve_stationary_covariance(a: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<CovarianceResult> {
    let n = a.nrows();
    if a.ncols() != n || q.shape() != (n, n) {
        return Err(Error::Dimension(format!(
            "A is {:?}, Q is {:?}; both must be the same square size",
            a.shape(),
            q.shape()
        )));
    }
    if q.iter().any(|x| !x.is_finite()) {
        return Err(domain("Q", "non-finite entry"));
    }
    if (q - q.transpose()).amax() > 1e-12 * q.amax().max(f64::MIN_POSITIVE) {
        return Err(domain("Q", "forcing matrix must be symmetric"));
    }
    ensure_hurwitz(a)?;

    let eye = DMatrix::<f64>::identity(n, n);
    let kron_sum = eye.kronecker(a) + a.kronecker(&eye);
    let lu = kron_sum.lu();

    let u = lu.u();
    let diag = u.diagonal();
    let max_pivot = diag.amax();
    let min_pivot = diag.iter().map(|d| d.abs()).fold(f64::INFINITY, f64::min);
    let pivot_ratio = if max_pivot > 0.0 { min_pivot / max_pivot } else { 0.0 };
    if !(pivot_ratio > SINGULAR_PIVOT_RATIO) {
        return Err(Error::SingularSolve { pivot_ratio });
    }

    let rhs = DMatrix::from_column_slice(n * n, 1, (-q).as_slice());
    let vec_p = lu.solve(&rhs).ok_or(Error::SingularSolve { pivot_ratio })?;
    let p = DMatrix::from_column_slice(n, n, vec_p.as_slice());
    let p = (&p + p.transpose()) * 0.5;

    let residual_norm = (a * &p + &p * a.transpose() + q).norm();
    Ok(CovarianceResult { p, residual_norm })
}

/// Relative residual bound accepted by [`solve_stationary_covariance`] callers:
/// `1e-8 (2 |A|_F |P|_F + |Q|_F)`.
pub fn residual_tolerance(a: &DMatrix<f64>, p: &DMatrix<f64>, q: &DMatrix<f64>) -> f64 {
    1e-8 * (2.0 * a.norm() * p.norm() + q.norm())
}

fn forcing(m: &StateSpaceModel, w: f64) -> DMatrix<f64> {
    &m.b_xi * m.b_xi.transpose() * w
}

/// Stationary covariance of the model states under noise intensity `w`.
pub fn state_covariance(m: &StateSpaceModel, w: f64) -> Result<CovarianceResult> {
    if !(w >= 0.0 && w.is_finite()) {
        return Err(domain("W", format!("must be nonnegative and finite, got {w}")));
    }
    // the equation is linear in W: solve once at unit intensity and scale
    let unit = solve_stationary_covariance(&m.a, &forcing(m, 1.0))?;
    let p = unit.p * w;
    let residual_norm = (&m.a * &p + &p * m.a.transpose() + forcing(m, w)).norm();
    Ok(CovarianceResult { p, residual_norm })
}

/// Mean output power `J = C P C^T`.
pub fn mean_power(m: &StateSpaceModel, w: f64) -> Result<f64> {
    mean_power_oriented(m, w, Orientation::Covariance)
}

pub fn mean_power_oriented(m: &StateSpaceModel, w: f64, orientation: Orientation) -> Result<f64> {
    if !(w >= 0.0 && w.is_finite()) {
        return Err(domain("W", format!("must be nonnegative and finite, got {w}")));
    }
    let a = match orientation {
        Orientation::Covariance => m.a.clone(),
        Orientation::Transposed => m.a.transpose(),
    };
    let cov = solve_stationary_covariance(&a, &forcing(m, 1.0))?;
    let j = w * (&m.c * &cov.p * m.c.transpose())[(0, 0)];
    // roundoff can leave a tiny negative value when W = 0 or the output is decoupled
    Ok(j.max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_closed_loop, build_open_loop, ControlGains, HarvesterParams};

    #[test]
    fn scalar_closed_form() {
        for (a, w) in [(1.0, 1.0), (0.3, 2.5), (17.0, 0.01)] {
            let r =
                solve_stationary_covariance(&DMatrix::from_element(1, 1, -a), &DMatrix::from_element(1, 1, w)).unwrap();
            assert!((r.p[(0, 0)] - w / (2.0 * a)).abs() <= 1e-12);
        }
    }

    #[test]
    fn oscillator_closed_form() {
        for (zeta, w) in [(0.05, 1.0), (0.01, 3.0), (0.7, 0.2)] {
            let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, -2.0 * zeta]);
            let q = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, w]);
            let r = solve_stationary_covariance(&a, &q).unwrap();
            let var = w / (4.0 * zeta);
            assert!((r.p[(0, 0)] - var).abs() <= 1e-12 * var.max(1.0));
            assert!((r.p[(1, 1)] - var).abs() <= 1e-12 * var.max(1.0));
            assert!(r.p[(0, 1)].abs() <= 1e-12);
        }
    }

    #[test]
    fn rejects_unstable() {
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0]);
        let q = DMatrix::identity(2, 2);
        assert!(matches!(
            solve_stationary_covariance(&a, &q),
            Err(Error::Unstable { .. })
        ));
        let a = DMatrix::from_element(1, 1, 0.5);
        assert!(matches!(
            solve_stationary_covariance(&a, &DMatrix::identity(1, 1)),
            Err(Error::Unstable { .. })
        ));
    }

    #[test]
    fn rejects_asymmetric_forcing() {
        let a = DMatrix::from_row_slice(2, 2, &[-1.0, 0.0, 0.0, -2.0]);
        let q = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(matches!(solve_stationary_covariance(&a, &q), Err(Error::Domain { .. })));
    }

    #[test]
    fn zero_noise_gives_zero_power() {
        let m = build_closed_loop(&HarvesterParams::REFERENCE, &ControlGains::new(0.1, 900.0)).unwrap();
        assert_eq!(mean_power(&m, 0.0).unwrap(), 0.0);
    }

    #[test]
    fn uncoupled_open_loop_still_harvests() {
        let p = HarvesterParams {
            kappa: 0.0,
            ..HarvesterParams::REFERENCE
        };
        assert!(mean_power(&build_open_loop(&p).unwrap(), 1.0).unwrap() > 0.0);
    }

    #[test]
    fn reference_covariance_is_consistent() {
        let m = build_closed_loop(&HarvesterParams::REFERENCE, &ControlGains::new(0.1, 900.0)).unwrap();
        let cov = state_covariance(&m, 1.0).unwrap();
        let q = &m.b_xi * m.b_xi.transpose();
        assert!(cov.residual_norm <= residual_tolerance(&m.a, &cov.p, &q));
        assert_eq!(cov.p, cov.p.transpose());
        let eig = cov.p.clone().symmetric_eigenvalues();
        let floor = -1e-10 * cov.p.trace();
        assert!(eig.iter().all(|&e| e >= floor), "{eig}");
        // the structure obeys the oscillator closed form: Var(x_s) = W / (4 zeta_s lambda^3)
        let p = HarvesterParams::REFERENCE;
        let var_xs = 1.0 / (4.0 * p.zeta_s * p.lambda.powi(3));
        assert!((cov.p[(0, 0)] - var_xs).abs() < 1e-12 * var_xs);
    }

    #[test]
    fn orientations_differ() {
        let m = build_closed_loop(&HarvesterParams::REFERENCE, &ControlGains::new(0.3, 925.0)).unwrap();
        let cov = mean_power_oriented(&m, 1.0, Orientation::Covariance).unwrap();
        let transposed = mean_power_oriented(&m, 1.0, Orientation::Transposed).unwrap();
        assert!((cov - transposed).abs() > 1e-3 * cov);
    }
}
