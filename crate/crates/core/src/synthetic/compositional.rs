//! Compositional instances `min_x f(h(x))` with `h(x) = Wx + w` and
//! `f(y) = ½ yᵀMy + mᵀy`, written with lower objective `g = ½‖y − h(x)‖²`.

use rand::RngCore;
use serde::{Deserialize, Serialize};

use super::{check_len, check_noise, check_shape, noise_matrix, noisy, serde_mat, serde_vec};
use crate::error::{domain, Result};
use crate::linalg::{is_symmetric, spectral_norm, sym_eig_range, Matrix, Vector};
use crate::problem_model::{derive_compositional_constants, BilevelProblem, GroundTruth, ProblemConstants};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompositionalSpec {
    #[serde(rename = "W", with = "serde_mat")]
    pub w_mat: Matrix,
    #[serde(with = "serde_vec")]
    pub w: Vector,
    #[serde(rename = "M", with = "serde_mat")]
    pub m_mat: Matrix,
    #[serde(with = "serde_vec")]
    pub m: Vector,
    /// Noise on draws of `h(x)`.
    pub noise_sigma_h: f64,
    /// Noise on draws of `∇h(x)`.
    pub noise_sigma_grad_h: f64,
    /// Noise on draws of `∇f(y)`.
    pub noise_sigma_grad_f: f64,
    pub region_radius: f64,
}

#[derive(Debug, Clone)]
pub struct CompositionalProblem {
    spec: CompositionalSpec,
    constants: ProblemConstants,
}

pub fn make_compositional(spec: &CompositionalSpec) -> Result<CompositionalProblem> {
    let (dl, d) = (spec.w_mat.nrows(), spec.w_mat.ncols());
    if d == 0 || dl == 0 {
        return domain("dimensions must be positive");
    }
    check_len("w", &spec.w, dl)?;
    check_shape("M", &spec.m_mat, dl, dl)?;
    check_len("m", &spec.m, dl)?;
    for (n, s) in [
        ("noise_sigma_h", spec.noise_sigma_h),
        ("noise_sigma_grad_h", spec.noise_sigma_grad_h),
        ("noise_sigma_grad_f", spec.noise_sigma_grad_f),
    ] {
        check_noise(n, s)?;
    }
    if !(spec.region_radius > 0.0) {
        return domain("region_radius must be positive");
    }
    if !is_symmetric(&spec.m_mat, 1e-12) {
        return domain("M must be symmetric");
    }
    let (m_min, m_max) = sym_eig_range(&spec.m_mat);
    if m_min < -1e-12 * m_max.abs().max(1.0) {
        return domain("M must be positive semidefinite");
    }
    let l_h0 = spectral_norm(&spec.w_mat);
    let l_f1 = m_max.max(0.0);
    let y_bound = l_h0 * spec.region_radius + spec.w.norm();
    let l_f0 = l_f1 * y_bound + spec.m.norm();
    let constants = derive_compositional_constants(
        l_f0,
        l_f1,
        l_h0,
        0.0,
        spec.noise_sigma_grad_f,
        spec.noise_sigma_h,
        spec.noise_sigma_grad_h,
    )?;
    Ok(CompositionalProblem { spec: spec.clone(), constants })
}

impl CompositionalProblem {
    pub fn spec(&self) -> &CompositionalSpec {
        &self.spec
    }

    pub fn inner(&self, x: &Vector) -> Vector {
        &self.spec.w_mat * x + &self.spec.w
    }
}

impl BilevelProblem for CompositionalProblem {
    fn dim_upper(&self) -> usize {
        self.spec.w_mat.ncols()
    }
    fn dim_lower(&self) -> usize {
        self.spec.w_mat.nrows()
    }
    fn constants(&self) -> &ProblemConstants {
        &self.constants
    }

    fn upper_value(&self, _x: &Vector, y: &Vector) -> f64 {
        0.5 * y.dot(&(&self.spec.m_mat * y)) + self.spec.m.dot(y)
    }
    fn upper_grad_x(&self, _x: &Vector, _y: &Vector) -> Vector {
        Vector::zeros(self.dim_upper())
    }
    fn upper_grad_y(&self, _x: &Vector, y: &Vector) -> Vector {
        &self.spec.m_mat * y + &self.spec.m
    }
    fn lower_grad_y(&self, x: &Vector, y: &Vector) -> Vector {
        y - self.inner(x)
    }
    fn lower_hess_yy_vec(&self, _x: &Vector, _y: &Vector, v: &Vector) -> Vector {
        v.clone()
    }
    fn lower_hess_xy_vec(&self, _x: &Vector, _y: &Vector, v: &Vector) -> Vector {
        -self.spec.w_mat.tr_mul(v)
    }

    fn sample_upper_grad(&self, x: &Vector, y: &Vector, rng: &mut dyn RngCore) -> (Vector, Vector) {
        (self.upper_grad_x(x, y), noisy(self.upper_grad_y(x, y), self.spec.noise_sigma_grad_f, rng))
    }
    /// `y − h(x; φ)`.
    fn sample_lower_grad(&self, x: &Vector, y: &Vector, rng: &mut dyn RngCore) -> Vector {
        y - noisy(self.inner(x), self.spec.noise_sigma_h, rng)
    }
    fn sample_lower_hess_yy_vec(&self, _x: &Vector, _y: &Vector, v: &Vector, _rng: &mut dyn RngCore) -> Vector {
        v.clone()
    }
    /// `−∇h(x; φ)ᵀ v`.
    fn sample_lower_hess_xy_vec(&self, x: &Vector, y: &Vector, v: &Vector, rng: &mut dyn RngCore) -> Vector {
        let s = self.spec.noise_sigma_grad_h;
        if s == 0.0 {
            return self.lower_hess_xy_vec(x, y, v);
        }
        let e = noise_matrix(self.dim_lower(), self.dim_upper(), s, rng);
        -(&self.spec.w_mat + e).tr_mul(v)
    }

    fn ground_truth(&self) -> Option<&dyn GroundTruth> {
        Some(self)
    }
}

impl GroundTruth for CompositionalProblem {
    fn y_star(&self, x: &Vector) -> Result<Vector> {
        Ok(self.inner(x))
    }
    fn grad_objective(&self, x: &Vector) -> Result<Vector> {
        Ok(self.spec.w_mat.tr_mul(&(&self.spec.m_mat * self.inner(x) + &self.spec.m)))
    }
}
