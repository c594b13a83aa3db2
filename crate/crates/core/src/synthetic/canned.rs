//! Seeded generators for well-conditioned instances.
//!
//! Lower Hessians have spectrum evenly spaced on `[1, κ]` in a random
//! orthonormal basis, and cross terms are scaled so that `ℓ_g1 = κ` exactly.

use nalgebra::linalg::QR;

use super::{CompositionalSpec, MinMaxSpec, QuadraticBilevelSpec, SmoothBilevelSpec};
use crate::linalg::{spectral_norm, Matrix, Vector};
use crate::rng::{self, Stream};

/// Condition numbers of the canned κ-scaling instances.
pub const CANNED_KAPPAS: [f64; 4] = [1.0, 2.0, 4.0, 8.0];

fn orthogonal(rng: &mut Stream, n: usize) -> Matrix {
    let g = rng::normal_matrix(rng, n, n, 1.0);
    let qr = QR::new(g);
    let (q, r) = (qr.q(), qr.r());
    // fix column signs so the factor is a deterministic function of g
    let signs = Vector::from_fn(n, |i, _| if r[(i, i)] < 0.0 { -1.0 } else { 1.0 });
    q * Matrix::from_diagonal(&signs)
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vector {
    if n == 1 {
        return Vector::from_element(1, lo);
    }
    Vector::from_fn(n, |i, _| lo + (hi - lo) * i as f64 / (n - 1) as f64)
}

fn with_spectrum(rng: &mut Stream, eigenvalues: &Vector) -> Matrix {
    let u = orthogonal(rng, eigenvalues.len());
    let m = &u * Matrix::from_diagonal(eigenvalues) * u.transpose();
    (&m + m.transpose()) * 0.5
}

fn with_norm(rng: &mut Stream, rows: usize, cols: usize, norm: f64) -> Matrix {
    let g = rng::normal_matrix(rng, rows, cols, 1.0);
    let s = spectral_norm(&g);
    g * (norm / s)
}

fn unit_scaled(rng: &mut Stream, n: usize) -> Vector {
    rng::normal_vector(rng, n, 1.0 / (n as f64).sqrt())
}

struct Upper {
    p_mat: Matrix,
    q_mat: Matrix,
    r_mat: Matrix,
    p: Vector,
    q: Vector,
}

/// Upper objective with `R ⪰ I` and `‖Q‖ = 0.3`, so that
/// `∇²F ⪰ P − QQᵀ ⪰ 0.41 I` whatever the lower level.
fn upper(rng: &mut Stream, d: usize, dl: usize) -> Upper {
    let p_mat = with_spectrum(rng, &linspace(0.5, 1.5, d));
    let q_mat = with_norm(rng, d, dl, 0.3);
    let r_diag = Vector::from_fn(dl, |_, _| 1.0 + 0.5 * rng::uniform(rng));
    let r_mat = Matrix::from_diagonal(&r_diag);
    let p = unit_scaled(rng, d);
    let q = unit_scaled(rng, dl);
    Upper { p_mat, q_mat, r_mat, p, q }
}

/// Quadratic bilevel instance with `μ_g = 1`, `ℓ_g1 = κ` and `‖B‖ = 0.75κ`.
pub fn canned_quadratic(
    kappa: f64,
    dim_upper: usize,
    dim_lower: usize,
    noise: [f64; 3],
    seed: u64,
) -> QuadraticBilevelSpec {
    let mut rng = rng::derive_stream(seed, 0, "synthetic/quadratic");
    let a = with_spectrum(&mut rng, &linspace(1.0, kappa, dim_lower));
    let b = with_norm(&mut rng, dim_lower, dim_upper, 0.75 * kappa);
    let c = unit_scaled(&mut rng, dim_lower);
    let u = upper(&mut rng, dim_upper, dim_lower);
    QuadraticBilevelSpec {
        a,
        b,
        c,
        p_mat: u.p_mat,
        q_mat: u.q_mat,
        r_mat: u.r_mat,
        p: u.p,
        q: u.q,
        noise_sigma_grad_f: noise[0],
        noise_sigma_grad_g: noise[1],
        noise_sigma_hess: noise[2],
        region_radius: 10.0,
    }
}

/// Noise-free quadratic instance with κ drawn uniformly from `[1, kappa_max]`.
pub fn random_quadratic(dim_upper: usize, dim_lower: usize, kappa_max: f64, seed: u64) -> QuadraticBilevelSpec {
    let mut rng = rng::derive_stream(seed, 0, "synthetic/random_kappa");
    let kappa = 1.0 + (kappa_max - 1.0) * rng::uniform(&mut rng);
    canned_quadratic(kappa, dim_upper, dim_lower, [0.0; 3], seed)
}

/// Smooth non-quadratic lower level with `ε = 0.5`.
pub fn canned_smooth(kappa: f64, dim_upper: usize, dim_lower: usize, seed: u64) -> SmoothBilevelSpec {
    let mut rng = rng::derive_stream(seed, 0, "synthetic/smooth");
    let epsilon = 0.5;
    let a = with_spectrum(&mut rng, &linspace(1.0, kappa, dim_lower));
    let b = with_norm(&mut rng, dim_lower, dim_upper, 0.75 * kappa);
    let c = unit_scaled(&mut rng, dim_lower);
    let u = upper(&mut rng, dim_upper, dim_lower);
    SmoothBilevelSpec {
        a,
        b,
        c,
        epsilon,
        p_mat: u.p_mat,
        q_mat: u.q_mat,
        r_mat: u.r_mat,
        p: u.p,
        q: u.q,
        noise_sigma_grad_f: 0.0,
        noise_sigma_grad_g: 0.0,
        noise_sigma_hess: 0.0,
        region_radius: 10.0,
    }
}

/// Quadratic game with `R` spectrum on `[1, κ]` and `‖Q‖ = κ/2`.
pub fn canned_minmax(kappa: f64, dim_upper: usize, dim_lower: usize, noise_sigma: f64, seed: u64) -> MinMaxSpec {
    let mut rng = rng::derive_stream(seed, 0, "synthetic/minmax");
    let r_mat = with_spectrum(&mut rng, &linspace(1.0, kappa, dim_lower));
    let q_mat = with_norm(&mut rng, dim_upper, dim_lower, 0.5 * kappa);
    let p_mat = with_spectrum(&mut rng, &linspace(0.5, 1.0, dim_upper));
    MinMaxSpec { p_mat, q_mat, r_mat, noise_sigma, region_radius: 10.0 }
}

/// Compositional instance with singular values of `W` and eigenvalues of
/// `M` on `[0.7, 1]`. Needs `dim_lower ≥ dim_upper` for a strongly convex F.
pub fn canned_compositional(dim_upper: usize, dim_lower: usize, noise: [f64; 3], seed: u64) -> CompositionalSpec {
    let mut rng = rng::derive_stream(seed, 0, "synthetic/compositional");
    let k = dim_upper.min(dim_lower);
    let left = orthogonal(&mut rng, dim_lower).columns(0, k).into_owned();
    let right = orthogonal(&mut rng, dim_upper).columns(0, k).into_owned();
    let w_mat = left * Matrix::from_diagonal(&linspace(0.7, 1.0, k)) * right.transpose();
    let m_mat = with_spectrum(&mut rng, &linspace(0.7, 1.0, dim_lower));
    let w = unit_scaled(&mut rng, dim_lower);
    let m = unit_scaled(&mut rng, dim_lower);
    CompositionalSpec {
        w_mat,
        w,
        m_mat,
        m,
        noise_sigma_h: noise[0],
        noise_sigma_grad_h: noise[1],
        noise_sigma_grad_f: noise[2],
        region_radius: 10.0,
    }
}
