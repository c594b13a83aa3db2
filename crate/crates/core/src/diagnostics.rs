//! Rate fits, Neumann bias curves, Lipschitz certificates and Lyapunov series.
//!
//! Everything here is read-only over problems and trajectories.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::alset::{metrics, Trajectory};
use crate::error::{domain, Error, Result};
use crate::estimators::neumann_at_depth;
use crate::linalg::{spectral_norm, Vector};
use crate::problem_model::{implicit_jacobian, BilevelProblem, GroundTruth};
use crate::rng::{self, Stream};

/// Least-squares line `log metric = intercept + slope · log K`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    /// `(K, mean over seeds)`.
    pub points: Vec<(f64, f64)>,
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

impl RateFit {
    pub fn slope_within(&self, lo: f64, hi: f64) -> bool {
        lo <= self.slope && self.slope <= hi
    }
}

/// Ordinary least squares of `ys` on `xs`: `(slope, intercept, r²)`.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> Result<(f64, f64, f64)> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::Degenerate("linear fit needs at least two paired points".into()));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::Degenerate("abscissae are all equal".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r2 = if syy == 0.0 { 1.0 } else { (sxy * sxy / (sxx * syy)).clamp(0.0, 1.0) };
    Ok((slope, intercept, r2))
}

/// Fit `log(mean over seeds)` against `log K`.
///
/// `sweep` holds one entry per horizon with the per-seed metric values
/// (typically `(1/K) Σ_k ‖∇F(x^k)‖²`).
pub fn fit_rate(sweep: &[(usize, Vec<f64>)]) -> Result<RateFit> {
    let mut ks: Vec<usize> = sweep.iter().map(|(k, _)| *k).collect();
    ks.sort_unstable();
    ks.dedup();
    if ks.len() < 3 || ks.len() != sweep.len() {
        return Err(Error::Degenerate("rate fit needs at least 3 distinct K values".into()));
    }
    let mut points = Vec::with_capacity(sweep.len());
    for (k, vals) in sweep {
        if *k == 0 || vals.is_empty() {
            return Err(Error::Degenerate("every K needs K >= 1 and at least one seed".into()));
        }
        if vals.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(Error::Degenerate(format!("non-positive metric at K = {k}")));
        }
        points.push((*k as f64, vals.iter().sum::<f64>() / vals.len() as f64));
    }
    points.sort_by(|a, b| a.0.total_cmp(&b.0));
    let lx: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ly: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let (slope, intercept, r_squared) = linear_fit(&lx, &ly)?;
    Ok(RateFit { points, slope, intercept, r_squared })
}

/// How the truncation level is drawn in [`neumann_bias_curve`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DepthSampling {
    /// `N'` i.i.d. uniform on `{0, …, N−1}`.
    Iid,
    /// Each level `0..N` used equally often (needs `N | M`); the Hessian
    /// factors are still drawn at random.
    Stratified,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BiasPoint {
    pub depth_n: usize,
    pub empirical_bias: f64,
    /// Standard error of the empirical mean, `sqrt(E‖mean − E mean‖²)`.
    pub standard_error: f64,
    /// `(1/μ_g)(1 − μ_g/ℓ_g1)^N ‖v‖`.
    pub bound: f64,
}

/// Empirical bias of the inverse estimator against the reference `A⁻¹v`.
#[allow(clippy::too_many_arguments)]
pub fn neumann_bias_curve(
    problem: &dyn BilevelProblem,
    x: &Vector,
    y: &Vector,
    v: &Vector,
    reference: &Vector,
    depths: &[usize],
    draws: usize,
    sampling: DepthSampling,
    seed: u64,
) -> Result<Vec<BiasPoint>> {
    if draws < 2 {
        return domain("bias curve needs at least two draws");
    }
    if depths.contains(&0) {
        return domain("Neumann depth must be at least 1");
    }
    let c = problem.constants();
    let q = 1.0 - c.mu_g / c.l_g1;
    depths
        .par_iter()
        .map(|&n| {
            let mut depth_rng = rng::derive_stream(seed, n as u64, "bias_curve/depth");
            let mut hess_rng = rng::derive_stream(seed, n as u64, "bias_curve/hessian");
            let (mean, se) = match sampling {
                DepthSampling::Iid => {
                    let mut acc = Moments::new(v.len());
                    for _ in 0..draws {
                        let depth = rng::index(&mut depth_rng, n);
                        acc.push(&neumann_at_depth(problem, x, y, v, n, depth, &mut hess_rng).value);
                    }
                    (acc.mean.clone(), (acc.variance_sum() / draws as f64).sqrt())
                }
                DepthSampling::Stratified => stratified(problem, x, y, v, n, draws, &mut hess_rng)?,
            };
            Ok(BiasPoint {
                depth_n: n,
                empirical_bias: (mean - reference).norm(),
                standard_error: se,
                bound: q.max(0.0).powi(n as i32) * v.norm() / c.mu_g,
            })
        })
        .collect()
}

fn stratified(
    problem: &dyn BilevelProblem,
    x: &Vector,
    y: &Vector,
    v: &Vector,
    n: usize,
    draws: usize,
    hess_rng: &mut Stream,
) -> Result<(Vector, f64)> {
    if !draws.is_multiple_of(n) {
        return domain(format!("stratified sampling needs N = {n} to divide M = {draws}"));
    }
    let per = draws / n;
    let mut mean = Vector::zeros(v.len());
    let mut var = 0.0;
    for depth in 0..n {
        let mut acc = Moments::new(v.len());
        for _ in 0..per {
            acc.push(&neumann_at_depth(problem, x, y, v, n, depth, hess_rng).value);
        }
        mean += &acc.mean / n as f64;
        var += acc.variance_sum() / (per as f64 * (n * n) as f64);
    }
    Ok((mean, var.sqrt()))
}

/// Welford accumulator over vectors.
struct Moments {
    count: usize,
    mean: Vector,
    m2: Vector,
}

impl Moments {
    fn new(n: usize) -> Self {
        Moments { count: 0, mean: Vector::zeros(n), m2: Vector::zeros(n) }
    }

    fn push(&mut self, v: &Vector) {
        self.count += 1;
        let delta = v - &self.mean;
        self.mean += &delta / self.count as f64;
        let delta2 = v - &self.mean;
        self.m2 += delta.component_mul(&delta2);
    }

    /// Sum of per-coordinate sample variances.
    fn variance_sum(&self) -> f64 {
        if self.count < 2 {
            return 0.0;
        }
        self.m2.sum() / (self.count - 1) as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Certified {
    YStar,
    GradF,
    JacYStar,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    pub which: Certified,
    pub max_ratio: f64,
    pub declared: f64,
    pub pass: bool,
}

/// Relative slack allowed on top of the declared constant.
pub const CERTIFICATE_SLACK: f64 = 1e-9;

/// Default radius of the sampling ball.
pub const CERTIFICATE_RADIUS: f64 = 10.0;

/// Largest difference quotient over `n_pairs` point pairs drawn uniformly
/// from the ball of the given radius around the origin.
pub fn lipschitz_certificate(
    problem: &dyn BilevelProblem,
    which: Certified,
    n_pairs: usize,
    radius: f64,
    seed: u64,
) -> Result<Certificate> {
    if problem.ground_truth().is_none() {
        return Err(Error::Unsupported("Lipschitz certificates need a closed-form ground truth"));
    }
    if n_pairs == 0 || !(radius > 0.0) {
        return domain("certificate needs at least one pair and a positive radius");
    }
    let c = problem.constants();
    let declared = match which {
        Certified::YStar => c.L_y,
        Certified::GradF => c.L_F,
        Certified::JacYStar => c.L_yx,
    };
    let d = problem.dim_upper();
    let mut rng = rng::derive_stream(seed, 0, "lipschitz_certificate");
    let pairs: Vec<(Vector, Vector)> = (0..n_pairs)
        .map(|_| (ball_point(&mut rng, d, radius), ball_point(&mut rng, d, radius)))
        .collect();
    let ratios: Vec<f64> = pairs
        .par_iter()
        .map(|(a, b)| {
            let dist = (a - b).norm();
            if dist == 0.0 {
                return Ok(0.0);
            }
            let truth = problem.ground_truth().expect("checked above");
            let diff = match which {
                Certified::YStar => (truth.y_star(a)? - truth.y_star(b)?).norm(),
                Certified::GradF => (truth.grad_objective(a)? - truth.grad_objective(b)?).norm(),
                Certified::JacYStar => spectral_norm(&(implicit_jacobian(problem, a)? - implicit_jacobian(problem, b)?)),
            };
            Ok(diff / dist)
        })
        .collect::<Result<_>>()?;
    let max_ratio = ratios.into_iter().fold(0.0, f64::max);
    Ok(Certificate { which, max_ratio, declared, pass: max_ratio <= declared * (1.0 + CERTIFICATE_SLACK) })
}

fn ball_point(rng: &mut Stream, d: usize, radius: f64) -> Vector {
    let g = rng::normal_vector(rng, d, 1.0);
    let r = radius * rng::uniform(rng).powf(1.0 / d as f64);
    let n = g.norm();
    if n == 0.0 {
        return g;
    }
    g * (r / n)
}

/// `V^k = F(x^k) + (L_f/L_y)‖y^k − y*(x^k)‖²` for every recorded iterate.
pub fn lyapunov_series(problem: &dyn BilevelProblem, trajectory: &Trajectory) -> Result<Vec<f64>> {
    let truth: &dyn GroundTruth = problem
        .ground_truth()
        .ok_or(Error::Unsupported("Lyapunov series needs a closed-form ground truth"))?;
    trajectory
        .records
        .iter()
        .map(|r| {
            let x = Vector::from_vec(r.x.clone());
            let y = Vector::from_vec(r.y.clone());
            Ok(metrics(problem, truth, &x, &y)?.lyapunov)
        })
        .collect()
}
