//! Neumann-series inverse estimator and the stochastic hypergradient.
//!
//! The truncation level `N'` is uniform on `{0, …, N−1}` and the empty
//! product is the identity, so for a deterministic Hessian `A`
//!
//! ```text
//! E[(N/ℓ) ∏_{n=1}^{N'} (I − A/ℓ) v] = A⁻¹ (I − (I − A/ℓ)^N) v.
//! ```
//!
//! Setting [`NeumannConfig::literal_index`] samples `N'` from `{1, …, N}`
//! instead, which drops the zeroth term (kept for comparison only).

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};
use crate::linalg::Vector;
use crate::problem_model::{solve_lower_hessian, BilevelProblem, ProblemConstants};
use crate::rng::{self, Stream};

#[allow(non_snake_case)]
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NeumannConfig {
    pub depth_N: usize,
    /// Replace the Monte-Carlo estimate by a deterministic solve.
    #[serde(default)]
    pub exact_inverse_mode: bool,
    /// Sample `N'` from `{1, …, N}` as literally written.
    #[serde(default)]
    pub literal_index: bool,
}

impl NeumannConfig {
    pub fn new(depth_n: usize) -> Result<Self> {
        let cfg = NeumannConfig { depth_N: depth_n, exact_inverse_mode: false, literal_index: false };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn exact() -> Self {
        NeumannConfig { depth_N: 1, exact_inverse_mode: true, literal_index: false }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth_N < 1 {
            return domain("Neumann depth N must be at least 1");
        }
        Ok(())
    }
}

/// One estimator draw together with the number of Hessian draws it consumed.
#[derive(Debug, Clone)]
pub struct Draw {
    pub value: Vector,
    pub hessian_draws: usize,
}

/// One draw of `(N/ℓ) ∏ (I − ∇²_yy g(x,y;φ_n)/ℓ) v`, applied right to left.
///
/// `depth_rng` picks `N'`; every Hessian factor draws from `hess_rng`.
pub fn neumann_inverse_apply(
    problem: &dyn BilevelProblem,
    x: &Vector,
    y: &Vector,
    v: &Vector,
    cfg: &NeumannConfig,
    depth_rng: &mut dyn RngCore,
    hess_rng: &mut dyn RngCore,
) -> Result<Draw> {
    cfg.validate()?;
    if cfg.exact_inverse_mode {
        let value = solve_lower_hessian(problem, x, y, v)?;
        return Ok(Draw { value, hessian_draws: 0 });
    }
    let n = cfg.depth_N;
    let depth = if cfg.literal_index { rng::index(depth_rng, n) + 1 } else { rng::index(depth_rng, n) };
    Ok(neumann_at_depth(problem, x, y, v, n, depth, hess_rng))
}

/// The estimator with the truncation level fixed to `depth`:
/// `(N/ℓ) ∏_{n=1}^{depth} (I − ∇²_yy g(x,y;φ_n)/ℓ) v`.
pub fn neumann_at_depth(
    problem: &dyn BilevelProblem,
    x: &Vector,
    y: &Vector,
    v: &Vector,
    depth_n: usize,
    depth: usize,
    hess_rng: &mut dyn RngCore,
) -> Draw {
    let l = problem.constants().l_g1;
    let mut w = v.clone();
    for _ in 0..depth {
        let hw = problem.sample_lower_hess_yy_vec(x, y, &w, hess_rng);
        w.axpy(-1.0 / l, &hw, 1.0);
    }
    w *= depth_n as f64 / l;
    Draw { value: w, hessian_draws: depth }
}

/// Independent streams for the pieces of one hypergradient draw.
#[derive(Debug, Clone)]
pub struct HypergradStreams {
    /// ξ, shared by `∇_x f` and `∇_y f`.
    pub xi: Stream,
    /// φ_(0), the cross Jacobian draw.
    pub phi_cross: Stream,
    /// φ_(1..N'), the Hessian factors.
    pub phi_hess: Stream,
    /// Truncation level N'.
    pub depth: Stream,
}

impl HypergradStreams {
    pub fn derive(seed: u64, run_index: u64) -> Self {
        HypergradStreams {
            xi: rng::derive_stream(seed, run_index, "xi"),
            phi_cross: rng::derive_stream(seed, run_index, "phi_cross"),
            phi_hess: rng::derive_stream(seed, run_index, "phi_hess"),
            depth: rng::derive_stream(seed, run_index, "neumann_depth"),
        }
    }
}

/// `h_f = ∇_x f(x,y;ξ) − ∇²_xy g(x,y;φ_0) · Ĥ⁻¹ ∇_y f(x,y;ξ)`.
pub fn stochastic_hypergradient(
    problem: &dyn BilevelProblem,
    x: &Vector,
    y: &Vector,
    cfg: &NeumannConfig,
    streams: &mut HypergradStreams,
) -> Result<Draw> {
    let (gx, gy) = problem.sample_upper_grad(x, y, &mut streams.xi);
    let inv = neumann_inverse_apply(problem, x, y, &gy, cfg, &mut streams.depth, &mut streams.phi_hess)?;
    let cross = problem.sample_lower_hess_xy_vec(x, y, &inv.value, &mut streams.phi_cross);
    Ok(Draw { value: gx - cross, hessian_draws: inv.hessian_draws })
}

/// Bias bound `ℓ_g1 ℓ_f1 / μ_g · (1 − μ_g/ℓ_g1)^N`.
pub fn bias_bound(c: &ProblemConstants, n: usize) -> Result<f64> {
    if n < 1 {
        return domain("bias bound needs N >= 1");
    }
    Ok(c.l_g1 * c.l_f1 / c.mu_g * contraction(c).powi(n as i32))
}

fn contraction(c: &ProblemConstants) -> f64 {
    1.0 - c.mu_g / c.l_g1
}

/// Smallest N whose squared bias bound is at most `1/√K`.
pub fn depth_for_horizon(c: &ProblemConstants, k: usize) -> Result<usize> {
    if k < 1 {
        return domain("horizon K must be at least 1");
    }
    let q = contraction(c);
    if q <= 0.0 {
        return Ok(1);
    }
    let target = 1.0 / (k as f64).sqrt();
    let mut n = 1usize;
    let mut b = c.l_g1 * c.l_f1 / c.mu_g * q;
    while b * b > target {
        n += 1;
        b *= q;
        if n > 100_000_000 {
            return domain("no admissible Neumann depth below 1e8");
        }
    }
    Ok(n)
}
