//! Seeded random streams.
//!
//! Every stream is a ChaCha20 generator (the `rand_chacha` implementation,
//! 64-bit block counter) whose 256-bit key is
//!
//! ```text
//! SHA-256( "alset-stream-v1" || seed as u64 LE || run_index as u64 LE || label as UTF-8 )
//! ```
//!
//! with stream id 0. Distinct labels give statistically independent streams,
//! so each kind of draw (upper-level ξ, lower-level φ, Neumann depth, ...)
//! owns its own stream and consuming one never shifts another. Gaussians use
//! the `rand_distr` ziggurat `StandardNormal`; uniform integers use
//! `rand`'s `random_range`.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::linalg::{Matrix, Vector};

pub type Stream = ChaCha20Rng;

const DOMAIN_TAG: &[u8] = b"alset-stream-v1";

/// Derive the stream for `(seed, run_index, label)`.
pub fn derive_stream(seed: u64, run_index: u64, label: &str) -> Stream {
    let mut h = Sha256::new();
    h.update(DOMAIN_TAG);
    h.update(seed.to_le_bytes());
    h.update(run_index.to_le_bytes());
    h.update(label.as_bytes());
    let digest = h.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha20Rng::from_seed(key)
}

pub fn normal(rng: &mut dyn RngCore) -> f64 {
    rng.sample(StandardNormal)
}

/// Vector of iid N(0, scale²) entries.
pub fn normal_vector(rng: &mut dyn RngCore, n: usize, scale: f64) -> Vector {
    Vector::from_fn(n, |_, _| scale * normal(rng))
}

pub fn normal_matrix(rng: &mut dyn RngCore, rows: usize, cols: usize, scale: f64) -> Matrix {
    // column-major fill order, fixed so ports can match
    let mut m = Matrix::zeros(rows, cols);
    for j in 0..cols {
        for i in 0..rows {
            m[(i, j)] = scale * normal(rng);
        }
    }
    m
}

pub fn uniform(rng: &mut dyn RngCore) -> f64 {
    rng.random::<f64>()
}

/// Uniform integer in `0..n`.
pub fn index(rng: &mut dyn RngCore, n: usize) -> usize {
    rng.random_range(0..n)
}

/// Draw from a discrete distribution by inversion.
pub fn categorical(rng: &mut dyn RngCore, probs: &[f64]) -> usize {
    let u = uniform(rng);
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // round-off: fall back to the last state with positive mass
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}
