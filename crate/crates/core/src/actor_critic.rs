//! Single-timescale actor-critic on a tabular MDP.
//!
//! The policy is tabular softmax, `π_θ(a|s) ∝ exp(θ_{s,a})` with `θ` stored
//! state-major (`θ[s·|A| + a]`). The critic is linear in the features
//! `φ(s)` and updated by projected TD(0). Samples are drawn i.i.d. from the
//! exactly computed stationary distribution μ_θ (critic) and discounted
//! visitation d_θ (actor); no rollouts are simulated.
//!
//! [`exact_policy_gradient`] carries the `1/(1−γ)` visitation factor while
//! the actor update omits it, so the two agree in direction only.

use std::collections::VecDeque;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::alset::{summarize, IterRecord, Trajectory};
use crate::error::{domain, Error, Result};
use crate::linalg::{all_finite, project_ball, solve_dense, sym_eig_range, Matrix, Vector};
use crate::rng;
use crate::synthetic::serde_mat;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TabularMdp {
    pub n_states: usize,
    pub n_actions: usize,
    /// `transition[s][a][s']`.
    pub transition: Vec<Vec<Vec<f64>>>,
    /// `reward[s][a][s']`.
    pub reward: Vec<Vec<Vec<f64>>>,
    pub gamma: f64,
    pub init_dist: Vec<f64>,
    /// `|S| × d_y`, one feature row per state.
    #[serde(with = "serde_mat")]
    pub features: Matrix,
}

/// One transition `(s, a, s', r)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition {
    pub s: usize,
    pub a: usize,
    pub s_next: usize,
    pub r: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CriticState {
    pub y: Vector,
    pub radius: f64,
}

impl TabularMdp {
    pub fn validate(&self) -> Result<()> {
        let (ns, na) = (self.n_states, self.n_actions);
        if ns == 0 || na == 0 {
            return domain("MDP needs at least one state and one action");
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return domain("gamma must lie in [0, 1)");
        }
        let shaped = |t: &Vec<Vec<Vec<f64>>>| t.len() == ns && t.iter().all(|r| r.len() == na && r.iter().all(|p| p.len() == ns));
        if !shaped(&self.transition) || !shaped(&self.reward) {
            return domain("transition and reward must have shape [S][A][S]");
        }
        for (s, rows) in self.transition.iter().enumerate() {
            for (a, p) in rows.iter().enumerate() {
                let total: f64 = p.iter().sum();
                if p.iter().any(|&v| !(v >= 0.0)) || (total - 1.0).abs() > 1e-12 {
                    return domain(format!("P(.|{s},{a}) is not a probability vector"));
                }
            }
        }
        if self.reward.iter().flatten().flatten().any(|r| !r.is_finite()) {
            return domain("rewards must be finite");
        }
        let total: f64 = self.init_dist.iter().sum();
        if self.init_dist.len() != ns || self.init_dist.iter().any(|&v| !(v >= 0.0)) || (total - 1.0).abs() > 1e-12 {
            return domain("init_dist must be a probability vector over states");
        }
        if self.features.nrows() != ns || self.features.ncols() == 0 {
            return domain("features must have one row per state");
        }
        for s in 0..ns {
            if self.features.row(s).norm() > 1.0 + 1e-12 {
                return domain(format!("feature row {s} has norm above 1"));
            }
        }
        Ok(())
    }

    pub fn dim_theta(&self) -> usize {
        self.n_states * self.n_actions
    }

    pub fn dim_critic(&self) -> usize {
        self.features.ncols()
    }

    pub fn r_max(&self) -> f64 {
        self.reward.iter().flatten().flatten().fold(0.0, |m, r| m.max(r.abs()))
    }

    fn check_theta(&self, theta: &Vector) -> Result<()> {
        if theta.len() != self.dim_theta() {
            return domain(format!("theta has length {}, expected {}", theta.len(), self.dim_theta()));
        }
        Ok(())
    }

    /// `π_θ(·|s)` for every state.
    pub fn policy(&self, theta: &Vector) -> Vec<Vec<f64>> {
        let na = self.n_actions;
        (0..self.n_states)
            .map(|s| {
                let row = &theta.as_slice()[s * na..(s + 1) * na];
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = row.iter().map(|t| (t - m).exp()).collect();
                let z: f64 = e.iter().sum();
                e.into_iter().map(|v| v / z).collect()
            })
            .collect()
    }

    /// State chain `P_π(s'|s)`.
    pub fn state_chain(&self, pi: &[Vec<f64>]) -> Matrix {
        let ns = self.n_states;
        Matrix::from_fn(ns, ns, |s, s2| (0..self.n_actions).map(|a| pi[s][a] * self.transition[s][a][s2]).sum())
    }

    /// `r̄(s, a) = Σ_{s'} P(s'|s,a) R(s,a,s')`.
    pub fn mean_reward(&self, s: usize, a: usize) -> f64 {
        self.transition[s][a].iter().zip(&self.reward[s][a]).map(|(p, r)| p * r).sum()
    }

    /// `r̄_π(s)`.
    pub fn policy_reward(&self, pi: &[Vec<f64>]) -> Vector {
        Vector::from_fn(self.n_states, |s, _| (0..self.n_actions).map(|a| pi[s][a] * self.mean_reward(s, a)).sum())
    }

    /// `V_π = (I − γ P_π)⁻¹ r̄_π`.
    pub fn value_function(&self, theta: &Vector) -> Result<Vector> {
        self.check_theta(theta)?;
        let pi = self.policy(theta);
        let ns = self.n_states;
        let m = Matrix::identity(ns, ns) - self.state_chain(&pi) * self.gamma;
        solve_dense(&m, &self.policy_reward(&pi))
    }

    /// `F(θ) = Σ_s η(s) V_π(s)`.
    pub fn objective(&self, theta: &Vector) -> Result<f64> {
        let v = self.value_function(theta)?;
        Ok(self.init_dist.iter().zip(v.iter()).map(|(e, v)| e * v).sum())
    }

    /// Softmax score `∇_θ log π_θ(a|s)`: row `s` holds `e_a − π(·|s)`.
    pub fn score(&self, pi: &[Vec<f64>], s: usize, a: usize) -> Vector {
        let na = self.n_actions;
        let mut psi = Vector::zeros(self.dim_theta());
        for b in 0..na {
            psi[s * na + b] = if b == a { 1.0 } else { 0.0 } - pi[s][b];
        }
        psi
    }
}

fn strongly_connected(p: &Matrix) -> bool {
    let n = p.nrows();
    let reach = |forward: bool| {
        let mut seen = vec![false; n];
        let mut queue = VecDeque::from([0usize]);
        seen[0] = true;
        while let Some(i) = queue.pop_front() {
            for j in 0..n {
                let w = if forward { p[(i, j)] } else { p[(j, i)] };
                if w > 0.0 && !seen[j] {
                    seen[j] = true;
                    queue.push_back(j);
                }
            }
        }
        seen.into_iter().all(|v| v)
    };
    reach(true) && reach(false)
}

/// Stationary distribution of the state chain under `π_θ`.
///
/// Solves `(I − P_πᵀ + 𝟙𝟙ᵀ) μ = 𝟙`, which is nonsingular exactly when the
/// stationary distribution is unique.
pub fn stationary_distribution(mdp: &TabularMdp, theta: &Vector) -> Result<Vector> {
    mdp.check_theta(theta)?;
    let p = mdp.state_chain(&mdp.policy(theta));
    if !strongly_connected(&p) {
        return Err(Error::Singular("state chain is reducible".into()));
    }
    let ns = mdp.n_states;
    let m = Matrix::identity(ns, ns) - p.transpose() + Matrix::from_element(ns, ns, 1.0);
    let ones = Vector::from_element(ns, 1.0);
    let mut mu = solve_dense(&m, &ones)?;
    // one round of refinement tightens the residual to ~1e-16
    let r = &ones - &m * &mu;
    mu += solve_dense(&m, &r)?;
    Ok(mu)
}

/// `d_θ = (1 − γ) Σ_t γᵗ (P_πᵀ)ᵗ η`, from `(I − γP_πᵀ) d = (1 − γ) η`.
pub fn discounted_visitation(mdp: &TabularMdp, theta: &Vector) -> Result<Vector> {
    mdp.check_theta(theta)?;
    let p = mdp.state_chain(&mdp.policy(theta));
    let ns = mdp.n_states;
    let m = Matrix::identity(ns, ns) - p.transpose() * mdp.gamma;
    let rhs = Vector::from_vec(mdp.init_dist.clone()) * (1.0 - mdp.gamma);
    solve_dense(&m, &rhs)
}

/// `A = E[φ(s)(γφ(s') − φ(s))ᵀ]` and `b = E[r φ(s)]` under `μ_θ ⊗ π_θ ⊗ P`.
pub fn td_system(mdp: &TabularMdp, theta: &Vector) -> Result<(Matrix, Vector)> {
    let mu = stationary_distribution(mdp, theta)?;
    let pi = mdp.policy(theta);
    let p = mdp.state_chain(&pi);
    let r = mdp.policy_reward(&pi);
    let phi = &mdp.features;
    let d_mu = Matrix::from_diagonal(&mu);
    let a = phi.transpose() * &d_mu * (p * mdp.gamma - Matrix::identity(mdp.n_states, mdp.n_states)) * phi;
    let b = phi.transpose() * (d_mu * r);
    Ok((a, b))
}

/// TD fixed point `y*(θ) = −A⁻¹b`.
pub fn critic_fixed_point(mdp: &TabularMdp, theta: &Vector) -> Result<Vector> {
    let (a, b) = td_system(mdp, theta)?;
    solve_dense(&a, &(-b)).map_err(|_| Error::Singular("TD matrix A is singular".into()))
}

/// `λ_θ = −λ_max((A + Aᵀ)/2)`, positive when A is negative definite.
pub fn critic_margin(mdp: &TabularMdp, theta: &Vector) -> Result<f64> {
    let (a, _) = td_system(mdp, theta)?;
    let (_, top) = sym_eig_range(&((&a + a.transpose()) * 0.5));
    Ok(-top)
}

/// θ-set used to certify the critic margin: the origin plus `n_random`
/// Gaussian draws of the given scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThetaGrid {
    pub n_random: usize,
    pub scale: f64,
    pub seed: u64,
}

impl ThetaGrid {
    pub fn points(&self, dim: usize) -> Vec<Vector> {
        let mut rng = rng::derive_stream(self.seed, 0, "actor_critic/theta_grid");
        let mut pts = vec![Vector::zeros(dim)];
        pts.extend((0..self.n_random).map(|_| rng::normal_vector(&mut rng, dim, self.scale)));
        pts
    }
}

/// Safety factor applied to the sampled critic margin.
pub const MARGIN_SAFETY: f64 = 0.9;

/// `λ = 0.9 · min_θ λ_θ` over the grid, and the projection radius `r_max/λ`.
pub fn critic_radius(mdp: &TabularMdp, grid: &ThetaGrid) -> Result<(f64, f64)> {
    let mut lambda = f64::INFINITY;
    for theta in grid.points(mdp.dim_theta()) {
        lambda = lambda.min(critic_margin(mdp, &theta)?);
    }
    if !(lambda > 0.0) {
        return domain(format!("TD matrix is not negative definite on the grid (margin {lambda:.3e})"));
    }
    let lambda = MARGIN_SAFETY * lambda;
    Ok((lambda, mdp.r_max() / lambda))
}

/// Exact `∇F(θ)` by enumeration over `(s, a, s')`, including `1/(1−γ)`.
pub fn exact_policy_gradient(mdp: &TabularMdp, theta: &Vector) -> Result<Vector> {
    let v = mdp.value_function(theta)?;
    let d = discounted_visitation(mdp, theta)?;
    let pi = mdp.policy(theta);
    let na = mdp.n_actions;
    let mut grad = Vector::zeros(mdp.dim_theta());
    for s in 0..mdp.n_states {
        for a in 0..na {
            let adv: f64 = (0..mdp.n_states)
                .map(|s2| mdp.transition[s][a][s2] * (mdp.reward[s][a][s2] + mdp.gamma * v[s2] - v[s]))
                .sum();
            let w = d[s] * pi[s][a] * adv;
            for b in 0..na {
                grad[s * na + b] += w * (if b == a { 1.0 } else { 0.0 } - pi[s][b]);
            }
        }
    }
    Ok(grad / (1.0 - mdp.gamma))
}

/// `max_θ sqrt(E_{s∼μ_θ} |V_θ(s) − φ(s)ᵀy*(θ)|²)` over the given θ set.
///
/// The definition maximises over all θ; a finite set under-estimates it.
pub fn epsilon_app(mdp: &TabularMdp, thetas: &[Vector]) -> Result<f64> {
    if thetas.is_empty() {
        return domain("epsilon_app needs at least one theta");
    }
    let mut worst = 0.0f64;
    for theta in thetas {
        let v = mdp.value_function(theta)?;
        let mu = stationary_distribution(mdp, theta)?;
        let fit = &mdp.features * critic_fixed_point(mdp, theta)?;
        let e: f64 = (0..mdp.n_states).map(|s| mu[s] * (v[s] - fit[s]).powi(2)).sum();
        worst = worst.max(e.sqrt());
    }
    Ok(worst)
}

/// Draw `s ∼ dist`, `a ∼ π(·|s)`, `s' ∼ P(·|s,a)`.
pub fn sample_transition(mdp: &TabularMdp, dist: &[f64], pi: &[Vec<f64>], rng: &mut dyn RngCore) -> Transition {
    let s = rng::categorical(rng, dist);
    let a = rng::categorical(rng, &pi[s]);
    let s_next = rng::categorical(rng, &mdp.transition[s][a]);
    Transition { s, a, s_next, r: mdp.reward[s][a][s_next] }
}

/// `δ̂ = r + γ φ(s')ᵀy − φ(s)ᵀy`.
pub fn td_error(mdp: &TabularMdp, y: &Vector, t: &Transition) -> f64 {
    let phi = &mdp.features;
    t.r + mdp.gamma * phi.row(t.s_next).dot(&y.transpose()) - phi.row(t.s).dot(&y.transpose())
}

/// `y ← Π_{R_y}(y + β δ̂ φ(s))`.
pub fn td_critic_step(mdp: &TabularMdp, critic: &CriticState, sample: &Transition, beta: f64) -> CriticState {
    let delta = td_error(mdp, &critic.y, sample);
    let phi_s = mdp.features.row(sample.s).transpose();
    let y = project_ball(&(&critic.y + phi_s * (beta * delta)), critic.radius);
    CriticState { y, radius: critic.radius }
}

/// `θ ← θ + α δ̂(ξ', y) ψ_θ(s', a')`.
pub fn actor_step(mdp: &TabularMdp, theta: &Vector, critic: &CriticState, sample: &Transition, alpha: f64) -> Vector {
    let delta = td_error(mdp, &critic.y, sample);
    let pi = mdp.policy(theta);
    theta + mdp.score(&pi, sample.s, sample.a) * (alpha * delta)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
#[allow(non_snake_case)]
pub struct ActorCriticConfig {
    #[serde(default = "one")]
    pub horizon_K: usize,
    /// `α = alpha_scale / √K`.
    pub alpha_scale: f64,
    /// `β = beta_scale / √K`.
    pub beta_scale: f64,
    pub theta_grid: ThetaGrid,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub run_index: u64,
    pub theta0: Vec<f64>,
    pub y0: Vec<f64>,
}

fn one() -> usize {
    1
}

/// Alternate one projected TD step (ξ ∼ μ_θ ⊗ π_θ ⊗ P) and one actor step
/// (ξ' ∼ d_θ ⊗ π_θ ⊗ P) for K iterations.
///
/// Records reuse the bilevel layout: `x` is θ, `y` the critic,
/// `grad_F_norm_sq` is `‖∇F(θ_k)‖²`, `lower_err_sq` is `‖y_k − y*(θ_k)‖²`,
/// and `xi_samples`/`phi_samples` count critic/actor transitions.
#[allow(non_snake_case)]
pub fn run_actor_critic(mdp: &TabularMdp, cfg: &ActorCriticConfig) -> Result<Trajectory> {
    mdp.validate()?;
    if cfg.horizon_K < 1 {
        return domain("horizon_K must be at least 1");
    }
    if !(cfg.alpha_scale > 0.0 && cfg.beta_scale > 0.0) {
        return domain("stepsize scales must be positive");
    }
    if cfg.theta0.len() != mdp.dim_theta() || cfg.y0.len() != mdp.dim_critic() {
        return domain("initial theta/critic have the wrong dimension");
    }
    let (_, radius) = critic_radius(mdp, &cfg.theta_grid)?;
    let y0 = Vector::from_vec(cfg.y0.clone());
    if y0.norm() > radius {
        return domain(format!("initial critic norm exceeds R_y = {radius:.6}"));
    }
    let sqrt_k = (cfg.horizon_K as f64).sqrt();
    let (alpha, beta) = (cfg.alpha_scale / sqrt_k, cfg.beta_scale / sqrt_k);
    let mut critic_rng = rng::derive_stream(cfg.seed, cfg.run_index, "critic");
    let mut actor_rng = rng::derive_stream(cfg.seed, cfg.run_index, "actor");
    let mut theta = Vector::from_vec(cfg.theta0.clone());
    let mut critic = CriticState { y: y0, radius };
    let mut records = Vec::with_capacity(cfg.horizon_K + 1);
    let record = |k: usize, theta: &Vector, y: &Vector, n: u64| -> Result<IterRecord> {
        let finite = all_finite(theta) && all_finite(y);
        let (g, e) = if finite {
            let g = exact_policy_gradient(mdp, theta)?.norm_squared();
            let e = (y - critic_fixed_point(mdp, theta)?).norm_squared();
            (Some(g), Some(e))
        } else {
            (None, None)
        };
        Ok(IterRecord {
            k,
            x: theta.as_slice().to_vec(),
            y: y.as_slice().to_vec(),
            grad_F_norm_sq: g,
            lower_err_sq: e,
            lyapunov: None,
            alpha_k: alpha,
            beta_k: beta,
            xi_samples: n,
            phi_samples: n,
            hessian_draws: 0,
        })
    };
    records.push(record(0, &theta, &critic.y, 0)?);
    for k in 0..cfg.horizon_K {
        let pi = mdp.policy(&theta);
        let mu = stationary_distribution(mdp, &theta)?;
        let d = discounted_visitation(mdp, &theta)?;
        let xi = sample_transition(mdp, mu.as_slice(), &pi, &mut critic_rng);
        critic = td_critic_step(mdp, &critic, &xi, beta);
        let xi_prime = sample_transition(mdp, d.as_slice(), &pi, &mut actor_rng);
        theta = actor_step(mdp, &theta, &critic, &xi_prime, alpha);
        let n = (k + 1) as u64;
        let rec = record(k + 1, &theta, &critic.y, n)?;
        records.push(rec);
        if !(all_finite(&theta) && all_finite(&critic.y)) {
            let partial = summarize(records, cfg.horizon_K, n, n);
            return Err(Error::Diverged { k: k + 1, partial: Box::new(partial) });
        }
    }
    let n = cfg.horizon_K as u64;
    Ok(summarize(records, cfg.horizon_K, n, n))
}

/// Frozen-θ projected TD: returns `‖y_k − y*(θ)‖²` for `k = 0..=steps`.
pub fn critic_tracking(
    mdp: &TabularMdp,
    theta: &Vector,
    y0: &Vector,
    radius: f64,
    beta: f64,
    steps: usize,
    rng: &mut dyn RngCore,
) -> Result<Vec<f64>> {
    let y_star = critic_fixed_point(mdp, theta)?;
    let mu = stationary_distribution(mdp, theta)?;
    let pi = mdp.policy(theta);
    let mut critic = CriticState { y: y0.clone(), radius };
    let mut errs = Vec::with_capacity(steps + 1);
    errs.push((&critic.y - &y_star).norm_squared());
    for _ in 0..steps {
        let t = sample_transition(mdp, mu.as_slice(), &pi, rng);
        critic = td_critic_step(mdp, &critic, &t, beta);
        errs.push((&critic.y - &y_star).norm_squared());
    }
    Ok(errs)
}

/// Random MDP with strictly positive transitions (hence ergodic under any
/// policy), rewards uniform on `[0, 1]`, and identity features.
pub fn random_mdp(n_states: usize, n_actions: usize, gamma: f64, seed: u64) -> TabularMdp {
    let mut rng = rng::derive_stream(seed, 0, "actor_critic/mdp");
    let simplex = |n: usize, rng: &mut rng::Stream| {
        let w: Vec<f64> = (0..n).map(|_| 0.05 + rng::uniform(rng)).collect();
        let z: f64 = w.iter().sum();
        w.into_iter().map(|v| v / z).collect::<Vec<f64>>()
    };
    let transition = (0..n_states)
        .map(|_| (0..n_actions).map(|_| simplex(n_states, &mut rng)).collect())
        .collect();
    let reward = (0..n_states)
        .map(|_| (0..n_actions).map(|_| (0..n_states).map(|_| rng::uniform(&mut rng)).collect()).collect())
        .collect();
    let init_dist = simplex(n_states, &mut rng);
    TabularMdp {
        n_states,
        n_actions,
        transition,
        reward,
        gamma,
        init_dist,
        features: Matrix::identity(n_states, n_states),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_state() -> TabularMdp {
        TabularMdp {
            n_states: 1,
            n_actions: 1,
            transition: vec![vec![vec![1.0]]],
            reward: vec![vec![vec![1.0]]],
            gamma: 0.5,
            init_dist: vec![1.0],
            features: Matrix::identity(1, 1),
        }
    }

    #[test]
    fn one_state_td_step() {
        let mdp = one_state();
        let theta = Vector::zeros(1);
        let y_star = critic_fixed_point(&mdp, &theta).unwrap();
        assert!((y_star[0] - 2.0).abs() < 1e-14);
        assert!((critic_margin(&mdp, &theta).unwrap() - 0.5).abs() < 1e-14);
        let t = Transition { s: 0, a: 0, s_next: 0, r: 1.0 };
        let c = td_critic_step(&mdp, &CriticState { y: Vector::zeros(1), radius: 10.0 }, &t, 0.5);
        assert_eq!(c.y[0], 0.5);
    }

    #[test]
    fn symmetric_chain_is_uniform() {
        let mut mdp = random_mdp(2, 2, 0.9, 1);
        mdp.transition = vec![vec![vec![0.5, 0.5]; 2]; 2];
        let mu = stationary_distribution(&mdp, &Vector::from_vec(vec![0.3, -1.0, 2.0, 0.1])).unwrap();
        assert!((mu[0] - 0.5).abs() < 1e-15 && (mu[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn reducible_chain_is_rejected() {
        let mut mdp = random_mdp(2, 1, 0.9, 1);
        mdp.transition = vec![vec![vec![1.0, 0.0]], vec![vec![0.0, 1.0]]];
        assert!(stationary_distribution(&mdp, &Vector::zeros(2)).is_err());
    }

    #[test]
    fn score_sums_to_zero_under_policy() {
        let mdp = random_mdp(3, 2, 0.9, 4);
        let theta = Vector::from_vec(vec![0.2, -0.4, 1.0, 0.0, -2.0, 0.5]);
        let pi = mdp.policy(&theta);
        for s in 0..3 {
            let total = (0..2).fold(Vector::zeros(6), |acc, a| acc + mdp.score(&pi, s, a) * pi[s][a]);
            assert!(total.amax() < 1e-15);
        }
    }
}
