//! CSV and JSON writers.
//!
//! Floats in CSV are written as `{:.16e}` (17 significant digits, exact
//! round trip); a missing value is an empty field.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::alset::Trajectory;
use crate::error::{Error, Result};

pub const TRAJECTORY_HEADER: &str = "k,grad_F_norm_sq,lower_err_sq,lyapunov,alpha_k,beta_k,xi_samples,phi_samples";

/// Version string written into every summary: crate version plus a hash of
/// the library sources.
pub fn code_version() -> String {
    format!("{}+{}", env!("CARGO_PKG_VERSION"), env!("ALSET_SOURCE_HASH"))
}

pub fn float(v: f64) -> String {
    format!("{v:.16e}")
}

fn opt(v: Option<f64>) -> String {
    v.map(float).unwrap_or_default()
}

pub fn trajectory_csv(t: &Trajectory) -> String {
    let mut s = String::with_capacity(64 * (t.records.len() + 1));
    s.push_str(TRAJECTORY_HEADER);
    s.push('\n');
    for r in &t.records {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            r.k,
            opt(r.grad_F_norm_sq),
            opt(r.lower_err_sq),
            opt(r.lyapunov),
            float(r.alpha_k),
            float(r.beta_k),
            r.xi_samples,
            r.phi_samples
        );
    }
    s
}

/// CSV with a fixed header and pre-formatted rows.
pub fn table_csv(header: &str, rows: &[Vec<String>]) -> String {
    let mut s = String::from(header);
    s.push('\n');
    for r in rows {
        s.push_str(&r.join(","));
        s.push('\n');
    }
    s
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Config(format!("cannot write {}: {e}", path.display())))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Config(format!("cannot serialize: {e}")))?;
    text.push('\n');
    write_text(path, &text)
}

pub fn run_file_stem(k: usize, seed: u64) -> String {
    format!("run_K{k}_seed{seed}")
}
