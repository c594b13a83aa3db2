//! Quadratic bilevel instances.
//!
//! `g(x, y) = ½ yᵀAy − yᵀ(Bx + c)` and
//! `f(x, y) = ½ xᵀPx + xᵀQy + ½ yᵀRy + pᵀx + qᵀy`, so `y*(x) = A⁻¹(Bx + c)`
//! and `∇F` is affine.

use rand::RngCore;
use serde::{Deserialize, Serialize};

use super::{
    block_sym, check_len, check_noise, check_shape, noise_matrix, noisy, serde_mat, serde_vec, stack,
    symmetric_perturbation,
};
use crate::error::{domain, Result};
use crate::linalg::{is_symmetric, spectral_norm, sym_eig_range, Matrix, Vector};
use crate::problem_model::{derive_constants, BilevelProblem, GroundTruth, ProblemConstants};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuadraticBilevelSpec {
    #[serde(rename = "A", with = "serde_mat")]
    pub a: Matrix,
    #[serde(rename = "B", with = "serde_mat")]
    pub b: Matrix,
    #[serde(with = "serde_vec")]
    pub c: Vector,
    #[serde(rename = "P", with = "serde_mat")]
    pub p_mat: Matrix,
    #[serde(rename = "Q", with = "serde_mat")]
    pub q_mat: Matrix,
    #[serde(rename = "R", with = "serde_mat")]
    pub r_mat: Matrix,
    #[serde(with = "serde_vec")]
    pub p: Vector,
    #[serde(with = "serde_vec")]
    pub q: Vector,
    pub noise_sigma_grad_f: f64,
    pub noise_sigma_grad_g: f64,
    pub noise_sigma_hess: f64,
    /// Radius of the x-region over which `ℓ_f0` is declared.
    pub region_radius: f64,
}

#[derive(Debug, Clone)]
pub struct QuadraticBilevel {
    spec: QuadraticBilevelSpec,
    constants: ProblemConstants,
    a_inv: Matrix,
    /// `A⁻¹B`, the Jacobian of `y*`.
    jac: Matrix,
    /// `y*(0) = A⁻¹c`.
    y0: Vector,
    /// Hessian of F.
    hess_f: Matrix,
    /// `∇F(0)`.
    grad_f0: Vector,
}

pub fn make_quadratic_bilevel(spec: &QuadraticBilevelSpec) -> Result<QuadraticBilevel> {
    let (d, dl) = (spec.p_mat.nrows(), spec.a.nrows());
    check_shape("A", &spec.a, dl, dl)?;
    check_shape("B", &spec.b, dl, d)?;
    check_len("c", &spec.c, dl)?;
    check_shape("P", &spec.p_mat, d, d)?;
    check_shape("Q", &spec.q_mat, d, dl)?;
    check_shape("R", &spec.r_mat, dl, dl)?;
    check_len("p", &spec.p, d)?;
    check_len("q", &spec.q, dl)?;
    if d == 0 || dl == 0 {
        return domain("dimensions must be positive");
    }
    for (n, s) in [
        ("noise_sigma_grad_f", spec.noise_sigma_grad_f),
        ("noise_sigma_grad_g", spec.noise_sigma_grad_g),
        ("noise_sigma_hess", spec.noise_sigma_hess),
    ] {
        check_noise(n, s)?;
    }
    if !(spec.region_radius > 0.0) {
        return domain("region_radius must be positive");
    }
    for (n, m) in [("A", &spec.a), ("P", &spec.p_mat), ("R", &spec.r_mat)] {
        if !is_symmetric(m, 1e-12) {
            return domain(format!("{n} must be symmetric"));
        }
    }
    let (mu, a_max) = sym_eig_range(&spec.a);
    if !(mu > 0.0) {
        return domain(format!("A is not positive definite (lambda_min = {mu:.3e})"));
    }
    if spec.noise_sigma_hess >= mu / 2.0 {
        return domain("noise_sigma_hess must be below mu_g / 2");
    }
    let a_inv = spec
        .a
        .clone()
        .cholesky()
        .ok_or_else(|| crate::Error::Singular("Cholesky of A failed".into()))?
        .inverse();
    let jac = &a_inv * &spec.b;
    let y0 = &a_inv * &spec.c;
    let hess_f = &spec.p_mat
        + &spec.q_mat * &jac
        + jac.transpose() * spec.q_mat.transpose()
        + jac.transpose() * &spec.r_mat * &jac;
    let grad_f0 = &spec.q_mat * &y0 + &spec.p + jac.transpose() * (&spec.r_mat * &y0 + &spec.q);

    let b_norm = spectral_norm(&spec.b);
    let hess_slack = if spec.noise_sigma_hess > 0.0 { mu / 2.0 } else { 0.0 };
    let l_g1 = (a_max + hess_slack).max(b_norm);
    let l_f1 = spectral_norm(&block_sym(&spec.p_mat, &spec.q_mat, &spec.r_mat));
    let radius = spec.region_radius;
    let y_bound = (b_norm * radius + spec.c.norm()) / mu;
    let l_f0 = l_f1 * (radius + y_bound) + stack(&spec.p, &spec.q).norm();
    let constants = derive_constants(
        mu,
        l_f0,
        l_f1,
        l_g1,
        0.0,
        spec.noise_sigma_grad_f,
        spec.noise_sigma_grad_g,
        3f64.sqrt() * spec.noise_sigma_hess,
    )?;
    Ok(QuadraticBilevel { spec: spec.clone(), constants, a_inv, jac, y0, hess_f, grad_f0 })
}

impl QuadraticBilevel {
    pub fn spec(&self) -> &QuadraticBilevelSpec {
        &self.spec
    }

    /// Hessian of the upper objective `F`.
    pub fn objective_hessian(&self) -> &Matrix {
        &self.hess_f
    }

    /// `A⁻¹B`.
    pub fn solution_jacobian(&self) -> &Matrix {
        &self.jac
    }
}

impl BilevelProblem for QuadraticBilevel {
    fn dim_upper(&self) -> usize {
        self.spec.p_mat.nrows()
    }
    fn dim_lower(&self) -> usize {
        self.spec.a.nrows()
    }
    fn constants(&self) -> &ProblemConstants {
        &self.constants
    }

    fn upper_value(&self, x: &Vector, y: &Vector) -> f64 {
        let s = &self.spec;
        0.5 * x.dot(&(&s.p_mat * x)) + x.dot(&(&s.q_mat * y)) + 0.5 * y.dot(&(&s.r_mat * y)) + s.p.dot(x) + s.q.dot(y)
    }
    fn upper_grad_x(&self, x: &Vector, y: &Vector) -> Vector {
        &self.spec.p_mat * x + &self.spec.q_mat * y + &self.spec.p
    }
    fn upper_grad_y(&self, x: &Vector, y: &Vector) -> Vector {
        self.spec.q_mat.tr_mul(x) + &self.spec.r_mat * y + &self.spec.q
    }
    fn lower_grad_y(&self, x: &Vector, y: &Vector) -> Vector {
        &self.spec.a * y - &self.spec.b * x - &self.spec.c
    }
    fn lower_hess_yy_vec(&self, _x: &Vector, _y: &Vector, v: &Vector) -> Vector {
        &self.spec.a * v
    }
    fn lower_hess_xy_vec(&self, _x: &Vector, _y: &Vector, v: &Vector) -> Vector {
        -self.spec.b.tr_mul(v)
    }

    fn sample_upper_grad(&self, x: &Vector, y: &Vector, rng: &mut dyn RngCore) -> (Vector, Vector) {
        let d = self.dim_upper();
        let g = noisy(stack(&self.upper_grad_x(x, y), &self.upper_grad_y(x, y)), self.spec.noise_sigma_grad_f, rng);
        (g.rows(0, d).into_owned(), g.rows(d, g.len() - d).into_owned())
    }
    fn sample_lower_grad(&self, x: &Vector, y: &Vector, rng: &mut dyn RngCore) -> Vector {
        noisy(self.lower_grad_y(x, y), self.spec.noise_sigma_grad_g, rng)
    }
    fn sample_lower_hess_yy_vec(&self, x: &Vector, y: &Vector, v: &Vector, rng: &mut dyn RngCore) -> Vector {
        let s = self.spec.noise_sigma_hess;
        if s == 0.0 {
            return self.lower_hess_yy_vec(x, y, v);
        }
        let e = symmetric_perturbation(self.dim_lower(), s, self.constants.mu_g / 2.0, rng);
        &self.spec.a * v + e * v
    }
    fn sample_lower_hess_xy_vec(&self, x: &Vector, y: &Vector, v: &Vector, rng: &mut dyn RngCore) -> Vector {
        let s = self.spec.noise_sigma_hess;
        if s == 0.0 {
            return self.lower_hess_xy_vec(x, y, v);
        }
        let e = noise_matrix(self.dim_upper(), self.dim_lower(), s, rng);
        -self.spec.b.tr_mul(v) + e * v
    }

    fn ground_truth(&self) -> Option<&dyn GroundTruth> {
        Some(self)
    }
}

impl GroundTruth for QuadraticBilevel {
    fn y_star(&self, x: &Vector) -> Result<Vector> {
        Ok(&self.jac * x + &self.y0)
    }
    fn grad_objective(&self, x: &Vector) -> Result<Vector> {
        Ok(&self.hess_f * x + &self.grad_f0)
    }
}

impl QuadraticBilevel {
    /// `A⁻¹`, for tests that need the exact lower-level inverse.
    pub fn lower_inverse(&self) -> &Matrix {
        &self.a_inv
    }
}
