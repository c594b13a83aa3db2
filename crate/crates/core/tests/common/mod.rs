#![allow(dead_code)]

use alset_core::actor_critic::TabularMdp;
use alset_core::alset::{AlsetConfig, Preset, StepsizeRule};
use alset_core::estimators::NeumannConfig;
use alset_core::linalg::{Matrix, Vector};
use alset_core::synthetic::{CompositionalSpec, MinMaxSpec, QuadraticBilevelSpec};

pub fn m(rows: usize, cols: usize, data: &[f64]) -> Matrix {
    Matrix::from_row_slice(rows, cols, data)
}

pub fn v(data: &[f64]) -> Vector {
    Vector::from_vec(data.to_vec())
}

/// `g = ½(y − x)²`, `f = ½y²`: `y*(x) = x`, `F(x) = ½x²`.
pub fn one_d() -> QuadraticBilevelSpec {
    QuadraticBilevelSpec {
        a: m(1, 1, &[1.0]),
        b: m(1, 1, &[1.0]),
        c: v(&[0.0]),
        p_mat: m(1, 1, &[0.0]),
        q_mat: m(1, 1, &[0.0]),
        r_mat: m(1, 1, &[1.0]),
        p: v(&[0.0]),
        q: v(&[0.0]),
        noise_sigma_grad_f: 0.0,
        noise_sigma_grad_g: 0.0,
        noise_sigma_hess: 0.0,
        region_radius: 10.0,
    }
}

/// Lower Hessian `diag(1, 2)`, `f = ½‖x‖² + ½‖y‖²`.
pub fn diag12() -> QuadraticBilevelSpec {
    QuadraticBilevelSpec {
        a: Matrix::from_diagonal(&v(&[1.0, 2.0])),
        b: m(2, 1, &[1.0, 0.0]),
        c: Vector::zeros(2),
        p_mat: Matrix::identity(1, 1),
        q_mat: Matrix::zeros(1, 2),
        r_mat: Matrix::identity(2, 2),
        p: Vector::zeros(1),
        q: Vector::zeros(2),
        noise_sigma_grad_f: 0.0,
        noise_sigma_grad_g: 0.0,
        noise_sigma_hess: 0.0,
        region_radius: 10.0,
    }
}

/// `f(x, y) = xy − ½y²`.
pub fn scalar_game() -> MinMaxSpec {
    MinMaxSpec { p_mat: m(1, 1, &[0.0]), q_mat: m(1, 1, &[1.0]), r_mat: m(1, 1, &[1.0]), noise_sigma: 0.0, region_radius: 10.0 }
}

/// `h(x) = x`, `f(y) = ½y²`.
pub fn identity_composition() -> CompositionalSpec {
    CompositionalSpec {
        w_mat: m(1, 1, &[1.0]),
        w: v(&[0.0]),
        m_mat: m(1, 1, &[1.0]),
        m: v(&[0.0]),
        noise_sigma_h: 0.0,
        noise_sigma_grad_h: 0.0,
        noise_sigma_grad_f: 0.0,
        region_radius: 10.0,
    }
}

pub fn manual(x0: &[f64], y0: &[f64]) -> AlsetConfig {
    AlsetConfig {
        horizon_K: 1,
        inner_T: 1,
        alpha_base: 1.0,
        eta: 1.0,
        neumann: NeumannConfig::new(1).unwrap(),
        preset: Preset::Manual,
        preset_constant: 1.0,
        stepsizes: StepsizeRule::Schedule,
        main_text_ratio: false,
        two_timescale_beta: None,
        seed: 0,
        run_index: 0,
        x0: x0.to_vec(),
        y0: y0.to_vec(),
    }
}

pub fn fixed(x0: &[f64], y0: &[f64], alpha: f64, beta: f64) -> AlsetConfig {
    let mut c = manual(x0, y0);
    c.stepsizes = StepsizeRule::Fixed { alpha, beta };
    c.neumann = NeumannConfig::exact();
    c
}

/// MDP with one action per state and the given transition rows and rewards
/// `r(s)` on every transition out of `s`.
pub fn chain_mdp(p: &[&[f64]], r: &[f64], gamma: f64, features: Matrix) -> TabularMdp {
    let n = p.len();
    TabularMdp {
        n_states: n,
        n_actions: 1,
        transition: p.iter().map(|row| vec![row.to_vec()]).collect(),
        reward: r.iter().map(|&rs| vec![vec![rs; n]]).collect(),
        gamma,
        init_dist: vec![1.0 / n as f64; n],
        features,
    }
}

/// Mean of draws together with the standard error of that mean in norm,
/// `sqrt(E‖mean − E mean‖²)`.
pub fn mean_and_se(draws: &[Vector]) -> (Vector, f64) {
    let n = draws.len() as f64;
    let dim = draws[0].len();
    let mean = draws.iter().fold(Vector::zeros(dim), |a, d| a + d) / n;
    let var = draws.iter().map(|d| (d - &mean).norm_squared()).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}
