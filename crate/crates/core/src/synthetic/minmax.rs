//! Quadratic games `min_x max_y ½ xᵀPx + xᵀQy − ½ yᵀRy`.
//!
//! Written as a nested problem with lower objective `g = −f`. The lower
//! constant `ℓ_g1` is `max(λ_max(R), ‖Q‖)`, the Lipschitz constant of
//! `∇_y f` block by block; for `‖Q‖ ≤ λ_max(R)` the reported κ is the
//! condition number of `R`.

use rand::RngCore;
use serde::{Deserialize, Serialize};

use super::{block_sym, check_noise, check_shape, noisy, serde_mat};
use crate::error::{domain, Error, Result};
use crate::linalg::{is_symmetric, spectral_norm, sym_eig_range, Matrix, Vector};
use crate::problem_model::{derive_minmax_constants, BilevelProblem, GroundTruth, ProblemConstants};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MinMaxSpec {
    #[serde(rename = "P", with = "serde_mat")]
    pub p_mat: Matrix,
    #[serde(rename = "Q", with = "serde_mat")]
    pub q_mat: Matrix,
    #[serde(rename = "R", with = "serde_mat")]
    pub r_mat: Matrix,
    /// Total standard deviation of the stacked `∇f` draw.
    pub noise_sigma: f64,
    pub region_radius: f64,
}

#[derive(Debug, Clone)]
pub struct MinMaxQuadratic {
    spec: MinMaxSpec,
    constants: ProblemConstants,
    /// `R⁻¹Qᵀ`.
    jac: Matrix,
    /// `P + QR⁻¹Qᵀ`.
    hess_f: Matrix,
}

pub fn make_minmax_quadratic(spec: &MinMaxSpec) -> Result<MinMaxQuadratic> {
    let (d, dl) = (spec.p_mat.nrows(), spec.r_mat.nrows());
    check_shape("P", &spec.p_mat, d, d)?;
    check_shape("Q", &spec.q_mat, d, dl)?;
    check_shape("R", &spec.r_mat, dl, dl)?;
    if d == 0 || dl == 0 {
        return domain("dimensions must be positive");
    }
    check_noise("noise_sigma", spec.noise_sigma)?;
    if !(spec.region_radius > 0.0) {
        return domain("region_radius must be positive");
    }
    for (n, m) in [("P", &spec.p_mat), ("R", &spec.r_mat)] {
        if !is_symmetric(m, 1e-12) {
            return domain(format!("{n} must be symmetric"));
        }
    }
    let (mu, r_max) = sym_eig_range(&spec.r_mat);
    if !(mu > 0.0) {
        return domain(format!("R is not positive definite (lambda_min = {mu:.3e})"));
    }
    let r_inv = spec
        .r_mat
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Singular("Cholesky of R failed".into()))?
        .inverse();
    let jac = &r_inv * spec.q_mat.transpose();
    let hess_f = &spec.p_mat + &spec.q_mat * &jac;
    let hess_f = (&hess_f + hess_f.transpose()) * 0.5;
    let (f_min, _) = sym_eig_range(&hess_f);
    if f_min < -1e-12 * spectral_norm(&hess_f).max(1.0) {
        return domain("P + Q R^-1 Q^T must be positive semidefinite");
    }
    let q_norm = spectral_norm(&spec.q_mat);
    let l_g1 = r_max.max(q_norm);
    let l_f1 = spectral_norm(&block_sym(&spec.p_mat, &spec.q_mat, &(-&spec.r_mat)));
    let radius = spec.region_radius;
    let l_f0 = l_f1 * (radius + q_norm * radius / mu);
    let constants = derive_minmax_constants(mu, l_f0, l_f1, l_g1, 0.0, spec.noise_sigma)?;
    Ok(MinMaxQuadratic { spec: spec.clone(), constants, jac, hess_f })
}

impl MinMaxQuadratic {
    pub fn spec(&self) -> &MinMaxSpec {
        &self.spec
    }
    pub fn objective_hessian(&self) -> &Matrix {
        &self.hess_f
    }
    fn noise_scale_total(&self) -> f64 {
        self.spec.noise_sigma
    }
}

impl BilevelProblem for MinMaxQuadratic {
    fn dim_upper(&self) -> usize {
        self.spec.p_mat.nrows()
    }
    fn dim_lower(&self) -> usize {
        self.spec.r_mat.nrows()
    }
    fn constants(&self) -> &ProblemConstants {
        &self.constants
    }

    fn upper_value(&self, x: &Vector, y: &Vector) -> f64 {
        let s = &self.spec;
        0.5 * x.dot(&(&s.p_mat * x)) + x.dot(&(&s.q_mat * y)) - 0.5 * y.dot(&(&s.r_mat * y))
    }
    fn upper_grad_x(&self, x: &Vector, y: &Vector) -> Vector {
        &self.spec.p_mat * x + &self.spec.q_mat * y
    }
    fn upper_grad_y(&self, x: &Vector, y: &Vector) -> Vector {
        self.spec.q_mat.tr_mul(x) - &self.spec.r_mat * y
    }
    fn lower_grad_y(&self, x: &Vector, y: &Vector) -> Vector {
        -self.upper_grad_y(x, y)
    }
    fn lower_hess_yy_vec(&self, _x: &Vector, _y: &Vector, v: &Vector) -> Vector {
        &self.spec.r_mat * v
    }
    fn lower_hess_xy_vec(&self, _x: &Vector, _y: &Vector, v: &Vector) -> Vector {
        -(&self.spec.q_mat * v)
    }

    /// Per-coordinate noise matches the stacked draw, so each block carries
    /// its share of `σ_f²`.
    fn sample_upper_grad(&self, x: &Vector, y: &Vector, rng: &mut dyn RngCore) -> (Vector, Vector) {
        let (d, dl) = (self.dim_upper(), self.dim_lower());
        let share = |n: usize| self.noise_scale_total() * (n as f64 / (d + dl) as f64).sqrt();
        let gx = noisy(self.upper_grad_x(x, y), share(d), rng);
        let gy = noisy(self.upper_grad_y(x, y), share(dl), rng);
        (gx, gy)
    }
    /// `−∇_y f(x, y; ξ)`: the lower draw is a draw of f itself.
    fn sample_lower_grad(&self, x: &Vector, y: &Vector, rng: &mut dyn RngCore) -> Vector {
        let (d, dl) = (self.dim_upper(), self.dim_lower());
        let share = self.noise_scale_total() * (dl as f64 / (d + dl) as f64).sqrt();
        -noisy(self.upper_grad_y(x, y), share, rng)
    }
    fn sample_lower_hess_yy_vec(&self, x: &Vector, y: &Vector, v: &Vector, _rng: &mut dyn RngCore) -> Vector {
        self.lower_hess_yy_vec(x, y, v)
    }
    fn sample_lower_hess_xy_vec(&self, x: &Vector, y: &Vector, v: &Vector, _rng: &mut dyn RngCore) -> Vector {
        self.lower_hess_xy_vec(x, y, v)
    }

    fn ground_truth(&self) -> Option<&dyn GroundTruth> {
        Some(self)
    }
}

impl GroundTruth for MinMaxQuadratic {
    fn y_star(&self, x: &Vector) -> Result<Vector> {
        Ok(&self.jac * x)
    }
    fn grad_objective(&self, x: &Vector) -> Result<Vector> {
        Ok(&self.hess_f * x)
    }
}
