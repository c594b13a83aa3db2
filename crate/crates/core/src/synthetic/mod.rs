//! Closed-form problem instances.
//!
//! Every generator declares its assumption constants from the matrices it
//! is built from, so they act as certificates rather than estimates.
//! Gradient noise is Gaussian, which is unbounded but has the declared
//! variance. The noise scale of a vector draw is its total standard
//! deviation (`E‖noise‖² = σ²`), split evenly over coordinates.
//!
//! Constants that involve `ℓ_f0` (a Lipschitz constant of a quadratic, so
//! unbounded globally) use a bound over the declared region
//! `‖x‖ ≤ region_radius`, `y = y*(x)`.

mod canned;
mod compositional;
mod minmax;
mod quadratic;
mod smooth;

pub use canned::{
    canned_compositional, canned_minmax, canned_quadratic, canned_smooth, random_quadratic, CANNED_KAPPAS,
};
pub use compositional::{make_compositional, CompositionalProblem, CompositionalSpec};
pub use minmax::{make_minmax_quadratic, MinMaxQuadratic, MinMaxSpec};
pub use quadratic::{make_quadratic_bilevel, QuadraticBilevel, QuadraticBilevelSpec};
pub use smooth::{make_smooth_bilevel, SmoothBilevel, SmoothBilevelSpec};

use rand::RngCore;

use crate::error::{domain, Result};
use crate::linalg::{spectral_norm, Matrix, Vector};
use crate::rng;

/// Row-major nested arrays for matrices in config files.
pub mod serde_mat {
    use serde::{de::Error as _, Deserialize, Deserializer, Serialize, Serializer};

    use crate::linalg::Matrix;

    pub fn serialize<S: Serializer>(m: &Matrix, s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<Vec<f64>> = (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect();
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Matrix, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        let nrows = rows.len();
        let ncols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != ncols) {
            return Err(D::Error::custom("ragged matrix rows"));
        }
        Ok(Matrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
    }
}

pub mod serde_vec {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use crate::linalg::Vector;

    pub fn serialize<S: Serializer>(v: &Vector, s: S) -> Result<S::Ok, S::Error> {
        v.as_slice().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vector, D::Error> {
        Ok(Vector::from_vec(Vec::<f64>::deserialize(d)?))
    }
}

pub(crate) fn check_shape(name: &str, m: &Matrix, rows: usize, cols: usize) -> Result<()> {
    if m.nrows() != rows || m.ncols() != cols {
        return domain(format!("{name} is {}x{}, expected {rows}x{cols}", m.nrows(), m.ncols()));
    }
    Ok(())
}

pub(crate) fn check_len(name: &str, v: &Vector, n: usize) -> Result<()> {
    if v.len() != n {
        return domain(format!("{name} has length {}, expected {n}", v.len()));
    }
    Ok(())
}

pub(crate) fn check_noise(name: &str, s: f64) -> Result<()> {
    if !s.is_finite() || s < 0.0 {
        return domain(format!("{name} must be finite and non-negative"));
    }
    Ok(())
}

/// Additive Gaussian noise with total standard deviation `sigma`.
pub(crate) fn noisy(v: Vector, sigma: f64, rng: &mut dyn RngCore) -> Vector {
    if sigma == 0.0 || v.is_empty() {
        return v;
    }
    let n = v.len();
    v + rng::normal_vector(rng, n, sigma / (n as f64).sqrt())
}

/// Gaussian matrix with total standard deviation `sigma` (`E‖E‖_F² = σ²`).
pub(crate) fn noise_matrix(rows: usize, cols: usize, sigma: f64, rng: &mut dyn RngCore) -> Matrix {
    let scale = sigma / ((rows * cols) as f64).sqrt();
    rng::normal_matrix(rng, rows, cols, scale)
}

/// Symmetric perturbation with `E‖E‖_F² = σ²` before rejection; draws with
/// spectral norm at or above `bound` are redrawn. Rejection depends on `E`
/// only through its norm, so `E` and `−E` stay equally likely and the draw
/// remains zero-mean.
pub(crate) fn symmetric_perturbation(n: usize, sigma: f64, bound: f64, rng: &mut dyn RngCore) -> Matrix {
    let scale = sigma / ((n * (n + 1)) as f64).sqrt() * std::f64::consts::SQRT_2;
    loop {
        let g = rng::normal_matrix(rng, n, n, scale);
        let e = (&g + g.transpose()) * 0.5;
        if spectral_norm(&e) < bound {
            return e;
        }
    }
}

/// Block symmetric `[[P, Q], [Qᵀ, R]]`.
pub(crate) fn block_sym(p: &Matrix, q: &Matrix, r: &Matrix) -> Matrix {
    let (d, dl) = (p.nrows(), r.nrows());
    let mut h = Matrix::zeros(d + dl, d + dl);
    h.view_mut((0, 0), (d, d)).copy_from(p);
    h.view_mut((0, d), (d, dl)).copy_from(q);
    h.view_mut((d, 0), (dl, d)).copy_from(&q.transpose());
    h.view_mut((d, d), (dl, dl)).copy_from(r);
    h
}

pub(crate) fn stack(a: &Vector, b: &Vector) -> Vector {
    Vector::from_iterator(a.len() + b.len(), a.iter().chain(b.iter()).copied())
}
