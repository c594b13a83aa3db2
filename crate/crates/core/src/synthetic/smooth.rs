//! Quadratic bilevel instance with a smooth non-quadratic lower level.
//!
//! `g(x, y) = ½ yᵀAy − yᵀ(Bx + c) + ε Σᵢ log cosh(yᵢ)`. The extra term is
//! convex with second derivative `sech²` in `(0, 1]` and third derivative
//! bounded by `4/(3√3)`, so `μ_g = λ_min(A)`, `ℓ_g1` grows by `ε`, and
//! `ℓ_g2 = 4ε/(3√3)` is nonzero. `y*(x)` comes from a damped Newton solve.

use rand::RngCore;
use serde::{Deserialize, Serialize};

use super::{
    block_sym, check_len, check_noise, check_shape, noise_matrix, noisy, serde_mat, serde_vec, stack,
    symmetric_perturbation,
};
use crate::error::{domain, Error, Result};
use crate::linalg::{is_symmetric, solve_dense, spectral_norm, sym_eig_range, Matrix, Vector};
use crate::problem_model::{derive_constants, BilevelProblem, GroundTruth, ProblemConstants};

/// Sup of `|d³/dt³ log cosh t|`.
pub const THIRD_DERIVATIVE_BOUND: f64 = 0.769_800_358_919_501_2; // 4 / (3√3)

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SmoothBilevelSpec {
    #[serde(rename = "A", with = "serde_mat")]
    pub a: Matrix,
    #[serde(rename = "B", with = "serde_mat")]
    pub b: Matrix,
    #[serde(with = "serde_vec")]
    pub c: Vector,
    pub epsilon: f64,
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
    pub region_radius: f64,
}

#[derive(Debug, Clone)]
pub struct SmoothBilevel {
    spec: SmoothBilevelSpec,
    constants: ProblemConstants,
}

pub fn make_smooth_bilevel(spec: &SmoothBilevelSpec) -> Result<SmoothBilevel> {
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
        ("epsilon", spec.epsilon),
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
    let b_norm = spectral_norm(&spec.b);
    let hess_slack = if spec.noise_sigma_hess > 0.0 { mu / 2.0 } else { 0.0 };
    let l_g1 = (a_max + spec.epsilon + hess_slack).max(b_norm);
    let l_g2 = spec.epsilon * THIRD_DERIVATIVE_BOUND;
    let l_f1 = spectral_norm(&block_sym(&spec.p_mat, &spec.q_mat, &spec.r_mat));
    let radius = spec.region_radius;
    // |tanh| ≤ 1 gives ‖y*(x)‖ ≤ (‖B‖‖x‖ + ‖c‖ + ε√d') / μ
    let y_bound = (b_norm * radius + spec.c.norm() + spec.epsilon * (dl as f64).sqrt()) / mu;
    let l_f0 = l_f1 * (radius + y_bound) + stack(&spec.p, &spec.q).norm();
    let constants = derive_constants(
        mu,
        l_f0,
        l_f1,
        l_g1,
        l_g2,
        spec.noise_sigma_grad_f,
        spec.noise_sigma_grad_g,
        3f64.sqrt() * spec.noise_sigma_hess,
    )?;
    Ok(SmoothBilevel { spec: spec.clone(), constants })
}

impl SmoothBilevel {
    pub fn spec(&self) -> &SmoothBilevelSpec {
        &self.spec
    }

    fn hess_yy(&self, y: &Vector) -> Matrix {
        let mut h = self.spec.a.clone();
        for i in 0..y.len() {
            h[(i, i)] += self.spec.epsilon * sech2(y[i]);
        }
        h
    }
}

fn sech2(t: f64) -> f64 {
    let c = t.cosh();
    if c.is_finite() {
        1.0 / (c * c)
    } else {
        0.0
    }
}

fn log_cosh(t: f64) -> f64 {
    let a = t.abs();
    a + (-2.0 * a).exp().ln_1p() - std::f64::consts::LN_2
}

impl BilevelProblem for SmoothBilevel {
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
        &self.spec.a * y - &self.spec.b * x - &self.spec.c + y.map(f64::tanh) * self.spec.epsilon
    }
    fn lower_hess_yy_vec(&self, _x: &Vector, y: &Vector, v: &Vector) -> Vector {
        &self.spec.a * v + v.zip_map(y, |vi, yi| self.spec.epsilon * sech2(yi) * vi)
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
        let hv = self.lower_hess_yy_vec(x, y, v);
        if s == 0.0 {
            return hv;
        }
        hv + symmetric_perturbation(self.dim_lower(), s, self.constants.mu_g / 2.0, rng) * v
    }
    fn sample_lower_hess_xy_vec(&self, x: &Vector, y: &Vector, v: &Vector, rng: &mut dyn RngCore) -> Vector {
        let s = self.spec.noise_sigma_hess;
        let jv = self.lower_hess_xy_vec(x, y, v);
        if s == 0.0 {
            return jv;
        }
        jv + noise_matrix(self.dim_upper(), self.dim_lower(), s, rng) * v
    }

    fn ground_truth(&self) -> Option<&dyn GroundTruth> {
        Some(self)
    }
}

impl GroundTruth for SmoothBilevel {
    /// Damped Newton on the strongly convex lower objective.
    fn y_star(&self, x: &Vector) -> Result<Vector> {
        let s = &self.spec;
        let rhs = &s.b * x + &s.c;
        let value = |y: &Vector| 0.5 * y.dot(&(&s.a * y)) - y.dot(&rhs) + s.epsilon * y.iter().map(|&t| log_cosh(t)).sum::<f64>();
        let mut y = solve_dense(&s.a, &rhs)?;
        let scale = rhs.norm() + 1.0;
        for _ in 0..100 {
            let grad = self.lower_grad_y(x, &y);
            if grad.norm() <= 1e-14 * scale {
                return Ok(y);
            }
            let step = solve_dense(&self.hess_yy(&y), &grad)?;
            let f0 = value(&y);
            let slope = grad.dot(&step);
            let gnorm = grad.norm();
            // near the optimum value differences drown in round-off; a
            // smaller gradient is then the better acceptance test
            let accept = |next: &Vector, t: f64| {
                value(next) <= f0 - 1e-4 * t * slope || self.lower_grad_y(x, next).norm() < 0.5 * gnorm
            };
            let mut t = 1.0;
            let mut next = &y - &step * t;
            while !accept(&next, t) && t > 1e-10 {
                t *= 0.5;
                next = &y - &step * t;
            }
            if next == y {
                break;
            }
            y = next;
        }
        let residual = self.lower_grad_y(x, &y).norm();
        if residual <= 1e-12 * scale {
            Ok(y)
        } else {
            Err(Error::LinearSolve { residual: residual / scale, iterations: 100 })
        }
    }

    /// Implicit-function formula with dense factorizations.
    fn grad_objective(&self, x: &Vector) -> Result<Vector> {
        let y = self.y_star(x)?;
        let jac = solve_dense_matrix(&self.hess_yy(&y), &self.spec.b)?;
        Ok(self.upper_grad_x(x, &y) + jac.tr_mul(&self.upper_grad_y(x, &y)))
    }
}

fn solve_dense_matrix(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    a.clone()
        .lu()
        .solve(b)
        .ok_or_else(|| Error::Singular("lower Hessian is singular".into()))
}
