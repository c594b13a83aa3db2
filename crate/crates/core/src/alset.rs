//! Alternating stochastic gradient loops.
//!
//! Each outer iteration takes `T` lower-level steps on `y` and then one
//! upper-level step on `x` using the freshly updated `y`. Stepsizes come
//! from [`stepsize_schedule`] and stay fixed over the horizon.

use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::estimators::{stochastic_hypergradient, HypergradStreams, NeumannConfig};
use crate::linalg::{all_finite, Vector};
use crate::problem_model::{BilevelProblem, Family, GroundTruth, ProblemConstants};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    BilevelKappa,
    MinmaxKappa,
    Compositional,
    Manual,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum StepsizeRule {
    /// `α_k = min(ᾱ₁, ᾱ₂, α/√K)` with β_k tied to α_k.
    Schedule,
    /// Constant user-chosen stepsizes.
    Fixed { alpha: f64, beta: f64 },
}

#[allow(non_snake_case)]
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlsetConfig {
    #[serde(default = "one")]
    pub horizon_K: usize,
    pub inner_T: usize,
    pub alpha_base: f64,
    pub eta: f64,
    pub neumann: NeumannConfig,
    pub preset: Preset,
    /// Proportionality constant of the κ presets.
    #[serde(default = "unit")]
    pub preset_constant: f64,
    #[serde(default = "schedule")]
    pub stepsizes: StepsizeRule,
    /// Use `μ_g` instead of `ρ_g` in the β/α ratio.
    #[serde(default)]
    pub main_text_ratio: bool,
    /// Base β of the two-timescale baseline; defaults to `2/(μ_g + ℓ_g1)`.
    #[serde(default)]
    pub two_timescale_beta: Option<f64>,
    #[serde(default)]
    pub seed: u64,
    /// Second component of the stream key; sweeps use the horizon.
    #[serde(default)]
    pub run_index: u64,
    pub x0: Vec<f64>,
    pub y0: Vec<f64>,
}

fn one() -> usize {
    1
}
fn unit() -> f64 {
    1.0
}
fn schedule() -> StepsizeRule {
    StepsizeRule::Schedule
}

impl AlsetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon_K < 1 {
            return domain("horizon_K must be at least 1");
        }
        if self.inner_T < 1 {
            return domain("inner_T must be at least 1");
        }
        if !(self.alpha_base > 0.0) || !self.alpha_base.is_finite() {
            return domain("alpha_base must be positive");
        }
        if !(self.eta > 0.0) || !self.eta.is_finite() {
            return domain("eta must be positive");
        }
        if !(self.preset_constant > 0.0) {
            return domain("preset_constant must be positive");
        }
        if let StepsizeRule::Fixed { alpha, beta } = self.stepsizes {
            if !(alpha > 0.0 && beta > 0.0 && alpha.is_finite() && beta.is_finite()) {
                return domain("fixed stepsizes must be positive");
            }
        }
        self.neumann.validate()
    }

    fn initial(&self, problem: &dyn BilevelProblem) -> Result<(Vector, Vector)> {
        if self.x0.len() != problem.dim_upper() || self.y0.len() != problem.dim_lower() {
            return domain(format!(
                "initial point has dimensions ({}, {}), problem has ({}, {})",
                self.x0.len(),
                self.y0.len(),
                problem.dim_upper(),
                problem.dim_lower()
            ));
        }
        Ok((Vector::from_vec(self.x0.clone()), Vector::from_vec(self.y0.clone())))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepsizePair {
    pub alpha_k: f64,
    pub beta_k: f64,
    pub alpha_bar_1: f64,
    pub alpha_bar_2: f64,
}

/// Upper/lower stepsizes for iteration `k` of a run with horizon `cfg.horizon_K`.
pub fn stepsize_schedule(c: &ProblemConstants, cfg: &AlsetConfig, _k: usize) -> Result<StepsizePair> {
    if !c.all_finite() {
        return domain("constants must be finite");
    }
    let t = cfg.inner_T as f64;
    let eta = cfg.eta;
    let lfly = c.L_f * c.L_y;
    let curv = if c.L_yx == 0.0 { 0.0 } else { c.L_f * c.L_yx / (c.L_y * eta) };
    let alpha_bar_1 = 1.0 / (2.0 * c.L_F + 4.0 * lfly + curv);
    let numer = 8.0 * lfly + eta * c.L_yx * c.C_f_tilde_sq * alpha_bar_1;
    // 8Tρ/(μ+ℓ) is also 16Tμℓ/(μ+ℓ)², so ᾱ₂ is the same in both forms
    let alpha_bar_2 = if numer > 0.0 {
        8.0 * t * c.rho_g / ((c.mu_g + c.l_g1) * numer)
    } else {
        f64::INFINITY
    };
    let modulus = if cfg.main_text_ratio { c.mu_g } else { c.rho_g };
    let ratio = numer / (4.0 * t * modulus);
    let (alpha_k, beta_k) = match cfg.stepsizes {
        StepsizeRule::Schedule => {
            let a = alpha_bar_1.min(alpha_bar_2).min(cfg.alpha_base / (cfg.horizon_K as f64).sqrt());
            (a, ratio * a)
        }
        StepsizeRule::Fixed { alpha, beta } => (alpha, beta),
    };
    Ok(StepsizePair { alpha_k, beta_k, alpha_bar_1, alpha_bar_2 })
}

/// Set `alpha_base`, `inner_T` and `eta` from the problem's κ.
pub fn apply_preset(c: &ProblemConstants, cfg: &AlsetConfig) -> Result<AlsetConfig> {
    let mut out = cfg.clone();
    let k = c.kappa;
    let s = cfg.preset_constant;
    match cfg.preset {
        Preset::Manual => return domain("apply_preset needs a non-manual preset"),
        Preset::BilevelKappa => {
            out.alpha_base = s * k.powf(-2.5);
            out.inner_T = ceil_count(k.powi(4));
            out.eta = k;
        }
        Preset::MinmaxKappa => {
            out.alpha_base = s * k.recip();
            out.inner_T = ceil_count(k);
            out.eta = 1.0;
        }
        Preset::Compositional => {
            out.alpha_base = 1.0;
            out.inner_T = 1;
            out.eta = if c.L_yx > 0.0 { 1.0 / c.L_yx } else { 1.0 };
        }
    }
    Ok(out)
}

/// `⌈v⌉`, ignoring round-off just above an integer.
fn ceil_count(v: f64) -> usize {
    let r = v.round();
    if (v - r).abs() <= 1e-9 * v.abs().max(1.0) {
        r.max(1.0) as usize
    } else {
        v.ceil().max(1.0) as usize
    }
}

#[allow(non_snake_case)]
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterRecord {
    pub k: usize,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub grad_F_norm_sq: Option<f64>,
    pub lower_err_sq: Option<f64>,
    pub lyapunov: Option<f64>,
    pub alpha_k: f64,
    pub beta_k: f64,
    /// Cumulative ξ draws before iterate `k` was formed.
    pub xi_samples: u64,
    /// Cumulative φ draws before iterate `k` was formed.
    pub phi_samples: u64,
    /// Hessian draws of the Neumann estimate in step `k → k+1`.
    pub hessian_draws: u64,
}

#[allow(non_snake_case)]
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub iterations: usize,
    pub final_x: Vec<f64>,
    pub final_y: Vec<f64>,
    /// `(1/K) Σ_{k<K} ‖∇F(x^k)‖²`.
    pub mean_grad_F_norm_sq: Option<f64>,
    pub final_grad_F_norm_sq: Option<f64>,
    pub final_lower_err_sq: Option<f64>,
    pub total_xi_samples: u64,
    pub total_phi_samples: u64,
}

/// Records for `k = 0, …, K`; record `k` holds the stepsizes used to leave it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub records: Vec<IterRecord>,
    pub summary: Summary,
}

/// Per-iteration diagnostic values.
#[derive(Debug, Clone, Copy)]
pub struct Metrics {
    pub grad_norm_sq: f64,
    pub lower_err_sq: f64,
    pub lyapunov: f64,
}

/// `‖∇F(x)‖²`, `‖y − y*(x)‖²` and `V = F(x) + (L_f/L_y)‖y − y*(x)‖²`.
pub fn metrics(problem: &dyn BilevelProblem, truth: &dyn GroundTruth, x: &Vector, y: &Vector) -> Result<Metrics> {
    let c = problem.constants();
    let ys = truth.y_star(x)?;
    let grad = truth.grad_objective(x)?;
    let err = (y - &ys).norm_squared();
    let weight = if c.L_y > 0.0 { c.L_f / c.L_y } else { 0.0 };
    Ok(Metrics {
        grad_norm_sq: grad.norm_squared(),
        lower_err_sq: err,
        lyapunov: problem.upper_value(x, &ys) + weight * err,
    })
}

struct Recorder<'a> {
    problem: &'a dyn BilevelProblem,
    horizon: usize,
    records: Vec<IterRecord>,
    xi: u64,
    phi: u64,
}

impl<'a> Recorder<'a> {
    fn new(problem: &'a dyn BilevelProblem, horizon: usize) -> Self {
        Recorder { problem, horizon, records: Vec::with_capacity(horizon + 1), xi: 0, phi: 0 }
    }

    fn push(&mut self, k: usize, x: &Vector, y: &Vector, step: (f64, f64), hessian_draws: u64) -> Result<()> {
        let finite = all_finite(x) && all_finite(y);
        let m = match (self.problem.ground_truth(), finite) {
            (Some(t), true) => Some(metrics(self.problem, t, x, y)?),
            _ => None,
        };
        self.records.push(IterRecord {
            k,
            x: x.as_slice().to_vec(),
            y: y.as_slice().to_vec(),
            grad_F_norm_sq: m.map(|m| m.grad_norm_sq),
            lower_err_sq: m.map(|m| m.lower_err_sq),
            lyapunov: m.map(|m| m.lyapunov),
            alpha_k: step.0,
            beta_k: step.1,
            xi_samples: self.xi,
            phi_samples: self.phi,
            hessian_draws,
        });
        Ok(())
    }

    fn set_draws(&mut self, hessian_draws: u64) {
        if let Some(r) = self.records.last_mut() {
            r.hessian_draws = hessian_draws;
        }
    }

    /// Record the new iterate, aborting on non-finite values.
    fn advance(&mut self, k: usize, x: &Vector, y: &Vector, step: (f64, f64)) -> Result<()> {
        if !(all_finite(x) && all_finite(y)) {
            self.push(k, x, y, step, 0)?;
            let partial = self.finish();
            return Err(Error::Diverged { k, partial: Box::new(partial) });
        }
        self.push(k, x, y, step, 0)
    }

    /// An iterate too large to solve with is the start of a divergence.
    fn overflow<T>(&mut self, k: usize, r: Result<T>) -> Result<T> {
        match r {
            Err(Error::LinearSolve { residual, .. }) if !residual.is_finite() => {
                Err(Error::Diverged { k, partial: Box::new(self.finish()) })
            }
            other => other,
        }
    }

    fn finish(&mut self) -> Trajectory {
        summarize(std::mem::take(&mut self.records), self.horizon, self.xi, self.phi)
    }
}

/// Assemble a trajectory and its summary from finished records.
pub(crate) fn summarize(records: Vec<IterRecord>, horizon: usize, xi: u64, phi: u64) -> Trajectory {
    let last = records.last().cloned();
    let head: Vec<Option<f64>> = records.iter().filter(|r| r.k < horizon).map(|r| r.grad_F_norm_sq).collect();
    let mean = if !head.is_empty() && head.iter().all(Option::is_some) {
        Some(head.iter().flatten().sum::<f64>() / head.len() as f64)
    } else {
        None
    };
    let summary = Summary {
        iterations: last.as_ref().map_or(0, |r| r.k),
        final_x: last.as_ref().map_or_else(Vec::new, |r| r.x.clone()),
        final_y: last.as_ref().map_or_else(Vec::new, |r| r.y.clone()),
        mean_grad_F_norm_sq: mean,
        final_grad_F_norm_sq: last.as_ref().and_then(|r| r.grad_F_norm_sq),
        final_lower_err_sq: last.as_ref().and_then(|r| r.lower_err_sq),
        total_xi_samples: xi,
        total_phi_samples: phi,
    };
    Trajectory { records, summary }
}

/// Algorithm 1: `T` SGD steps on `y`, then one hypergradient step on `x`.
pub fn run_bilevel(problem: &dyn BilevelProblem, cfg: &AlsetConfig) -> Result<Trajectory> {
    cfg.validate()?;
    let steps = stepsize_schedule(problem.constants(), cfg, 0)?;
    bilevel_loop(problem, cfg, cfg.inner_T, |_| (steps.alpha_k, steps.beta_k))
}

/// Same loop with `T = 1` and `α_k = α(k+1)^{-3/5}`, `β_k = β(k+1)^{-2/5}`.
pub fn run_two_timescale_baseline(problem: &dyn BilevelProblem, cfg: &AlsetConfig) -> Result<Trajectory> {
    cfg.validate()?;
    let c = problem.constants();
    let alpha = cfg.alpha_base;
    let beta = cfg.two_timescale_beta.unwrap_or(2.0 / (c.mu_g + c.l_g1));
    if !(beta > 0.0) {
        return domain("two_timescale_beta must be positive");
    }
    bilevel_loop(problem, cfg, 1, |k| {
        let t = (k + 1) as f64;
        (alpha * t.powf(-0.6), beta * t.powf(-0.4))
    })
}

fn bilevel_loop<S>(problem: &dyn BilevelProblem, cfg: &AlsetConfig, inner: usize, step: S) -> Result<Trajectory>
where
    S: Fn(usize) -> (f64, f64),
{
    let (mut x, mut y) = cfg.initial(problem)?;
    let mut hyper = HypergradStreams::derive(cfg.seed, cfg.run_index);
    let mut lower = rng::derive_stream(cfg.seed, cfg.run_index, "phi_lower");
    let mut rec = Recorder::new(problem, cfg.horizon_K);
    rec.push(0, &x, &y, step(0), 0)?;
    for k in 0..cfg.horizon_K {
        let (alpha, beta) = step(k);
        for _ in 0..inner {
            let g = problem.sample_lower_grad(&x, &y, &mut lower);
            y.axpy(-beta, &g, 1.0);
        }
        let h = rec.overflow(k, stochastic_hypergradient(problem, &x, &y, &cfg.neumann, &mut hyper))?;
        x.axpy(-alpha, &h.value, 1.0);
        rec.xi += 1;
        rec.phi += inner as u64 + 1 + h.hessian_draws as u64;
        rec.set_draws(h.hessian_draws as u64);
        rec.advance(k + 1, &x, &y, step(k + 1))?;
    }
    Ok(rec.finish())
}

/// Algorithm 2: `T` ascent steps on `y` with draws ξ₁, then a descent step
/// on `x` with an independent draw ξ₂. No inverse estimate is needed since
/// `∇_y f(x, y*(x)) = 0`.
pub fn run_minmax(problem: &dyn BilevelProblem, cfg: &AlsetConfig) -> Result<Trajectory> {
    cfg.validate()?;
    if problem.constants().family != Family::MinMax {
        return domain("run_minmax needs a min-max problem");
    }
    let steps = stepsize_schedule(problem.constants(), cfg, 0)?;
    let step = (steps.alpha_k, steps.beta_k);
    let (mut x, mut y) = cfg.initial(problem)?;
    let mut xi_inner = rng::derive_stream(cfg.seed, cfg.run_index, "xi_inner");
    let mut xi_outer = rng::derive_stream(cfg.seed, cfg.run_index, "xi_outer");
    let mut rec = Recorder::new(problem, cfg.horizon_K);
    rec.push(0, &x, &y, step, 0)?;
    for k in 0..cfg.horizon_K {
        for _ in 0..cfg.inner_T {
            // sample_lower_grad is −∇_y f(x, y; ξ₁), so this is ascent on f
            let g = problem.sample_lower_grad(&x, &y, &mut xi_inner);
            y.axpy(-step.1, &g, 1.0);
        }
        let (gx, _) = problem.sample_upper_grad(&x, &y, &mut xi_outer);
        x.axpy(-step.0, &gx, 1.0);
        rec.xi += cfg.inner_T as u64 + 1;
        rec.advance(k + 1, &x, &y, step)?;
    }
    Ok(rec.finish())
}

/// Algorithm 3: `y ← y − β(y − h(x; φ))`, then
/// `x ← x − α ∇h(x; φ')ᵀ ∇f(y; ξ)` with an independent `φ'`.
pub fn run_compositional(problem: &dyn BilevelProblem, cfg: &AlsetConfig) -> Result<Trajectory> {
    cfg.validate()?;
    if !matches!(problem.constants().family, Family::Compositional { .. }) {
        return domain("run_compositional needs a compositional problem");
    }
    let steps = stepsize_schedule(problem.constants(), cfg, 0)?;
    let step = (steps.alpha_k, steps.beta_k);
    let (mut x, mut y) = cfg.initial(problem)?;
    let mut xi = rng::derive_stream(cfg.seed, cfg.run_index, "xi");
    let mut phi_lower = rng::derive_stream(cfg.seed, cfg.run_index, "phi_lower");
    let mut phi_cross = rng::derive_stream(cfg.seed, cfg.run_index, "phi_cross");
    let mut rec = Recorder::new(problem, cfg.horizon_K);
    rec.push(0, &x, &y, step, 0)?;
    for k in 0..cfg.horizon_K {
        for _ in 0..cfg.inner_T {
            let g = problem.sample_lower_grad(&x, &y, &mut phi_lower);
            y.axpy(-step.1, &g, 1.0);
        }
        let (gx, gy) = problem.sample_upper_grad(&x, &y, &mut xi);
        // ∇²_xy g = −∇hᵀ, so subtracting it applies +∇hᵀ
        let h = gx - problem.sample_lower_hess_xy_vec(&x, &y, &gy, &mut phi_cross);
        x.axpy(-step.0, &h, 1.0);
        rec.xi += 1;
        rec.phi += cfg.inner_T as u64 + 1;
        rec.advance(k + 1, &x, &y, step)?;
    }
    Ok(rec.finish())
}
