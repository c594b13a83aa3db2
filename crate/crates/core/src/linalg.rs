//! Small dense helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

pub type Vector = DVector<f64>;
pub type Matrix = DMatrix<f64>;

/// Relative residual targeted by every exact solve in the crate.
pub const SOLVE_TOL: f64 = 1e-12;

/// Factor by which a stalled solve may miss `rel_tol` (round-off floor).
pub const ROUNDOFF_SLACK: f64 = 100.0;

/// Conjugate gradient on a symmetric positive definite operator.
///
/// Stops once `‖b − A x‖ ≤ rel_tol · ‖b‖`. The residual is recomputed from
/// scratch every `n` steps to keep round-off from drifting below tolerance.
/// If the iteration cap is hit, a true residual within [`ROUNDOFF_SLACK`]
/// times the target is still accepted.
pub fn conjugate_gradient<F>(apply: F, b: &Vector, rel_tol: f64, max_iter: usize) -> Result<Vector>
where
    F: Fn(&Vector) -> Vector,
{
    let n = b.len();
    let b_norm = b.norm();
    let mut x = Vector::zeros(n);
    if b_norm == 0.0 {
        return Ok(x);
    }
    let target = rel_tol * b_norm;
    let mut r = b.clone();
    let mut p = r.clone();
    let mut rs = r.dot(&r);
    for it in 0..max_iter {
        let ap = apply(&p);
        let pap = p.dot(&ap);
        if !(pap > 0.0) {
            return Err(Error::LinearSolve { residual: rs.sqrt() / b_norm, iterations: it });
        }
        let step = rs / pap;
        x.axpy(step, &p, 1.0);
        if (it + 1) % n.max(1) == 0 {
            r = b - apply(&x);
        } else {
            r.axpy(-step, &ap, 1.0);
        }
        let rs_new = r.dot(&r);
        if rs_new.sqrt() <= target {
            return Ok(x);
        }
        p = &r + &p * (rs_new / rs);
        rs = rs_new;
    }
    let residual = (b - apply(&x)).norm() / b_norm;
    if residual <= ROUNDOFF_SLACK * rel_tol {
        Ok(x)
    } else {
        Err(Error::LinearSolve { residual, iterations: max_iter })
    }
}

/// Default iteration cap for [`conjugate_gradient`] in dimension `n`.
pub fn cg_max_iter(n: usize) -> usize {
    20 * n + 100
}

/// Largest singular value.
pub fn spectral_norm(m: &Matrix) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.singular_values().max()
}

/// (λ_min, λ_max) of a symmetric matrix.
pub fn sym_eig_range(m: &Matrix) -> (f64, f64) {
    let eig = SymmetricEigen::new(m.clone());
    (eig.eigenvalues.min(), eig.eigenvalues.max())
}

pub fn is_symmetric(m: &Matrix, tol: f64) -> bool {
    m.is_square() && (m - m.transpose()).amax() <= tol * m.amax().max(1.0)
}

/// Dense LU solve with a relative-residual check.
pub fn solve_dense(a: &Matrix, b: &Vector) -> Result<Vector> {
    let x = a
        .clone()
        .lu()
        .solve(b)
        .ok_or_else(|| Error::Singular("LU factorization has a zero pivot".into()))?;
    let scale = a.norm() * x.norm() + b.norm();
    let residual = (a * &x - b).norm();
    if !residual.is_finite() || residual > 1e-9 * scale.max(f64::MIN_POSITIVE) {
        return Err(Error::Singular(format!("residual {residual:.3e} too large")));
    }
    Ok(x)
}

/// Radial projection onto the Euclidean ball of the given radius.
pub fn project_ball(y: &Vector, radius: f64) -> Vector {
    let n = y.norm();
    if n <= radius {
        y.clone()
    } else {
        y * (radius / n)
    }
}

pub fn all_finite(v: &Vector) -> bool {
    v.iter().all(|x| x.is_finite())
}
