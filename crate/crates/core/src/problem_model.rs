//! Stochastic bilevel problems as operator-only oracle bundles.
//!
//! A problem is `min_x F(x) = f(x, y*(x))` with `y*(x) = argmin_y g(x, y)`.
//! Second derivatives of `g` are only ever applied to vectors. Stochastic
//! oracles take the stream they draw from as an argument and hold no state.
//!
//! Noise convention: `sigma_f` bounds the variance of the stacked draw
//! `(∇_x f, ∇_y f)` as a whole, not each block separately.

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::linalg::{cg_max_iter, conjugate_gradient, Matrix, Vector, SOLVE_TOL};

/// Which set of reductions produced the derived constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Family {
    /// General nested problem.
    Bilevel,
    /// `g = −f`; `l_g2` holds the Lipschitz constant of `∇²f`.
    MinMax,
    /// `g = ½‖y − h(x)‖²`; `sigma_g1`/`sigma_g2` hold the noise of `h` and `∇h`.
    Compositional { l_h0: f64, l_h1: f64 },
}

/// Assumption constants and everything derived from them.
#[allow(non_snake_case)]
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProblemConstants {
    pub family: Family,
    pub mu_g: f64,
    pub l_f0: f64,
    pub l_f1: f64,
    pub l_g1: f64,
    pub l_g2: f64,
    pub sigma_f: f64,
    pub sigma_g1: f64,
    pub sigma_g2: f64,
    pub kappa: f64,
    pub rho_g: f64,
    pub L_f: f64,
    pub L_y: f64,
    pub L_F: f64,
    pub L_yx: f64,
    pub C_f_tilde_sq: f64,
    pub sigma_f_tilde_sq: f64,
}

fn check_primitive(name: &str, v: f64) -> Result<()> {
    if !v.is_finite() || v < 0.0 {
        return domain(format!("{name} must be finite and non-negative, got {v}"));
    }
    Ok(())
}

fn lower_level(mu_g: f64, l_g1: f64) -> Result<(f64, f64)> {
    if !(mu_g > 0.0) || !mu_g.is_finite() {
        return domain(format!("mu_g must be positive, got {mu_g}"));
    }
    if !(l_g1 >= mu_g) || !l_g1.is_finite() {
        return domain(format!("l_g1 = {l_g1} must be at least mu_g = {mu_g}"));
    }
    Ok((l_g1 / mu_g, 2.0 * mu_g * l_g1 / (mu_g + l_g1)))
}

/// Constants of the general nested problem.
#[allow(clippy::too_many_arguments, non_snake_case)]
pub fn derive_constants(
    mu_g: f64,
    l_f0: f64,
    l_f1: f64,
    l_g1: f64,
    l_g2: f64,
    sigma_f: f64,
    sigma_g1: f64,
    sigma_g2: f64,
) -> Result<ProblemConstants> {
    for (n, v) in [
        ("l_f0", l_f0),
        ("l_f1", l_f1),
        ("l_g2", l_g2),
        ("sigma_f", sigma_f),
        ("sigma_g1", sigma_g1),
        ("sigma_g2", sigma_g2),
    ] {
        check_primitive(n, v)?;
    }
    let (kappa, rho_g) = lower_level(mu_g, l_g1)?;
    let mu = mu_g;
    let L_y = l_g1 / mu;
    let curvature = (l_f0 / mu) * (l_g2 + l_g1 * l_g2 / mu);
    let L_f = l_f1 + l_g1 * l_f1 / mu + curvature;
    let L_F = l_f1 + l_g1 * (l_f1 + L_f) / mu + curvature;
    let L_yx = (l_g2 + l_g2 * L_y) / mu + l_g1 * (l_g2 + l_g2 * L_y) / (mu * mu);
    let sf2 = sigma_f * sigma_f;
    let sigma_f_tilde_sq = sf2
        + (3.0 / (mu * mu))
            * ((sf2 + l_f0 * l_f0) * (sigma_g2 * sigma_g2 + 2.0 * l_g1 * l_g1) + sf2 * l_g1 * l_g1);
    let bound = l_f0 + l_f0 * l_g1 / mu + l_g1 * l_f1 / mu;
    Ok(ProblemConstants {
        family: Family::Bilevel,
        mu_g,
        l_f0,
        l_f1,
        l_g1,
        l_g2,
        sigma_f,
        sigma_g1,
        sigma_g2,
        kappa,
        rho_g,
        L_f,
        L_y,
        L_F,
        L_yx,
        C_f_tilde_sq: bound * bound + sigma_f_tilde_sq,
        sigma_f_tilde_sq,
    })
}

/// Constants of a min-max problem `min_x max_y f` (lower objective `−f`).
///
/// `l_g1` is the Lipschitz constant of `∇_y f` (yy and xy blocks); `l_f1`
/// that of the full `∇f`. When the two coincide these reduce to the usual
/// `L_F = ℓ_f1 + ℓ_f1²/μ`.
#[allow(non_snake_case)]
pub fn derive_minmax_constants(
    mu_f: f64,
    l_f0: f64,
    l_f1: f64,
    l_g1: f64,
    l_f2: f64,
    sigma_f: f64,
) -> Result<ProblemConstants> {
    for (n, v) in [("l_f0", l_f0), ("l_f1", l_f1), ("l_f2", l_f2), ("sigma_f", sigma_f)] {
        check_primitive(n, v)?;
    }
    let (kappa, rho_g) = lower_level(mu_f, l_g1)?;
    let mu = mu_f;
    let L_y = l_g1 / mu;
    let sf2 = sigma_f * sigma_f;
    Ok(ProblemConstants {
        family: Family::MinMax,
        mu_g: mu_f,
        l_f0,
        l_f1,
        l_g1,
        l_g2: l_f2,
        sigma_f,
        sigma_g1: sigma_f,
        sigma_g2: 0.0,
        kappa,
        rho_g,
        L_f: l_f1,
        L_y,
        L_F: l_f1 + l_f1 * L_y,
        L_yx: (l_f2 + l_f2 * L_y) / mu + l_g1 * (l_f2 + l_f2 * L_y) / (mu * mu),
        C_f_tilde_sq: l_f0 * l_f0 + sf2,
        sigma_f_tilde_sq: sf2,
    })
}

/// Constants of `min_x f(h(x))` written with `g = ½‖y − h(x)‖²`.
#[allow(non_snake_case)]
pub fn derive_compositional_constants(
    l_f0: f64,
    l_f1: f64,
    l_h0: f64,
    l_h1: f64,
    sigma_f: f64,
    sigma_h0: f64,
    sigma_h1: f64,
) -> Result<ProblemConstants> {
    for (n, v) in [
        ("l_f0", l_f0),
        ("l_f1", l_f1),
        ("l_h0", l_h0),
        ("l_h1", l_h1),
        ("sigma_f", sigma_f),
        ("sigma_h0", sigma_h0),
        ("sigma_h1", sigma_h1),
    ] {
        check_primitive(n, v)?;
    }
    let sf2 = sigma_f * sigma_f;
    let sh1 = sigma_h1 * sigma_h1;
    Ok(ProblemConstants {
        family: Family::Compositional { l_h0, l_h1 },
        mu_g: 1.0,
        l_f0,
        l_f1,
        l_g1: 1.0,
        l_g2: l_h1,
        sigma_f,
        sigma_g1: sigma_h0,
        sigma_g2: sigma_h1,
        kappa: 1.0,
        rho_g: 1.0,
        L_f: l_h0 * l_f1,
        L_y: l_h0,
        L_F: l_h0 * l_h0 * l_f1 + l_f0 * l_h1,
        L_yx: l_h1,
        C_f_tilde_sq: (l_f0 * l_f0 + sf2) * (l_h0 * l_h0 + sh1),
        sigma_f_tilde_sq: l_h0 * l_h0 * sf2 + (l_f0 * l_f0 + sf2) * sh1,
    })
}

impl ProblemConstants {
    /// Recompute every derived field from the stored primitives.
    pub fn rederive(&self) -> Result<ProblemConstants> {
        match self.family {
            Family::Bilevel => derive_constants(
                self.mu_g,
                self.l_f0,
                self.l_f1,
                self.l_g1,
                self.l_g2,
                self.sigma_f,
                self.sigma_g1,
                self.sigma_g2,
            ),
            Family::MinMax => {
                derive_minmax_constants(self.mu_g, self.l_f0, self.l_f1, self.l_g1, self.l_g2, self.sigma_f)
            }
            Family::Compositional { l_h0, l_h1 } => derive_compositional_constants(
                self.l_f0,
                self.l_f1,
                l_h0,
                l_h1,
                self.sigma_f,
                self.sigma_g1,
                self.sigma_g2,
            ),
        }
    }

    pub fn all_finite(&self) -> bool {
        [
            self.mu_g,
            self.l_f0,
            self.l_f1,
            self.l_g1,
            self.l_g2,
            self.kappa,
            self.rho_g,
            self.L_f,
            self.L_y,
            self.L_F,
            self.L_yx,
            self.C_f_tilde_sq,
            self.sigma_f_tilde_sq,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// Closed-form solution oracles of a synthetic instance.
pub trait GroundTruth {
    /// Lower-level solution `y*(x)`.
    fn y_star(&self, x: &Vector) -> Result<Vector>;
    /// Hypergradient `∇F(x)` from the instance's own closed form.
    fn grad_objective(&self, x: &Vector) -> Result<Vector>;
}

/// Oracle bundle for `min_x f(x, y*(x))`, `y*(x) = argmin_y g(x, y)`.
pub trait BilevelProblem: Send + Sync {
    fn dim_upper(&self) -> usize;
    fn dim_lower(&self) -> usize;
    fn constants(&self) -> &ProblemConstants;

    fn upper_value(&self, x: &Vector, y: &Vector) -> f64;
    fn upper_grad_x(&self, x: &Vector, y: &Vector) -> Vector;
    fn upper_grad_y(&self, x: &Vector, y: &Vector) -> Vector;
    fn lower_grad_y(&self, x: &Vector, y: &Vector) -> Vector;
    /// `∇²_yy g(x, y) v`, a d'-vector.
    fn lower_hess_yy_vec(&self, x: &Vector, y: &Vector, v: &Vector) -> Vector;
    /// `∇²_xy g(x, y) v` for a d'-vector `v`, giving a d-vector.
    fn lower_hess_xy_vec(&self, x: &Vector, y: &Vector, v: &Vector) -> Vector;

    /// One draw of ξ: `(∇_x f(x,y;ξ), ∇_y f(x,y;ξ))`.
    fn sample_upper_grad(&self, x: &Vector, y: &Vector, rng: &mut dyn RngCore) -> (Vector, Vector);
    fn sample_lower_grad(&self, x: &Vector, y: &Vector, rng: &mut dyn RngCore) -> Vector;
    fn sample_lower_hess_yy_vec(&self, x: &Vector, y: &Vector, v: &Vector, rng: &mut dyn RngCore) -> Vector;
    fn sample_lower_hess_xy_vec(&self, x: &Vector, y: &Vector, v: &Vector, rng: &mut dyn RngCore) -> Vector;

    fn ground_truth(&self) -> Option<&dyn GroundTruth> {
        None
    }
}

fn require_truth(problem: &dyn BilevelProblem) -> Result<&dyn GroundTruth> {
    problem
        .ground_truth()
        .ok_or(Error::Unsupported("problem has no closed-form ground truth"))
}

/// Solve `∇²_yy g(x, y) s = b` by conjugate gradient.
pub fn solve_lower_hessian(problem: &dyn BilevelProblem, x: &Vector, y: &Vector, b: &Vector) -> Result<Vector> {
    conjugate_gradient(
        |v| problem.lower_hess_yy_vec(x, y, v),
        b,
        SOLVE_TOL,
        cg_max_iter(problem.dim_lower()),
    )
}

/// `∇̄_x f(x, y) = ∇_x f − ∇²_xy g [∇²_yy g]⁻¹ ∇_y f`, all evaluated at `(x, y)`.
pub fn surrogate_gradient(problem: &dyn BilevelProblem, x: &Vector, y: &Vector) -> Result<Vector> {
    let s = solve_lower_hessian(problem, x, y, &problem.upper_grad_y(x, y))?;
    Ok(problem.upper_grad_x(x, y) - problem.lower_hess_xy_vec(x, y, &s))
}

/// `∇F(x)`: the surrogate gradient evaluated at the exact `y*(x)`.
pub fn exact_hypergradient(problem: &dyn BilevelProblem, x: &Vector) -> Result<Vector> {
    let y = require_truth(problem)?.y_star(x)?;
    surrogate_gradient(problem, x, &y)
}

/// `F(x) = f(x, y*(x))`.
pub fn upper_objective(problem: &dyn BilevelProblem, x: &Vector) -> Result<f64> {
    let y = require_truth(problem)?.y_star(x)?;
    Ok(problem.upper_value(x, &y))
}

/// Jacobian of `x ↦ y*(x)` (d' × d), `−[∇²_yy g]⁻¹ (∇²_xy g)ᵀ` at `y*(x)`.
///
/// Built column by column of its transpose, so only forward operator
/// applications are needed.
pub fn implicit_jacobian(problem: &dyn BilevelProblem, x: &Vector) -> Result<Matrix> {
    let y = require_truth(problem)?.y_star(x)?;
    let (d, dl) = (problem.dim_upper(), problem.dim_lower());
    let mut jt = Matrix::zeros(d, dl);
    for i in 0..dl {
        let mut e = Vector::zeros(dl);
        e[i] = 1.0;
        let s = solve_lower_hessian(problem, x, &y, &e)?;
        jt.set_column(i, &(-problem.lower_hess_xy_vec(x, &y, &s)));
    }
    Ok(jt.transpose())
}
