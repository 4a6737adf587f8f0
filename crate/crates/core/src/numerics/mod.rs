//! Dense arithmetic, a reverse-mode tape, and a finite-difference gradient
//! verifier. Everything runs in `f64`.

mod matrix;
mod tape;

pub use matrix::{dot, norm, squared_distance, RealMatrix};
pub use tape::{Gradients, Mask, Tape, Var};

use crate::error::{ensure, Error, Result};

/// Cosine of the angle between `u` and `v`.
pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64> {
    ensure!(
        u.len() == v.len(),
        Dimension,
        "cosine of lengths {} and {}",
        u.len(),
        v.len()
    );
    let (nu, nv) = (norm(u), norm(v));
    if !(nu > 0.0 && nv > 0.0) {
        return Err(Error::Degenerate("cosine similarity of a zero vector".into()));
    }
    Ok((dot(u, v) / (nu * nv)).clamp(-1.0, 1.0))
}

/// `exp(scores / temperature)` normalized to sum to one.
pub fn softmax(scores: &[f64], temperature: f64) -> Result<Vec<f64>> {
    ensure!(
        temperature > 0.0 && temperature.is_finite(),
        Config,
        "softmax temperature must be positive, got {temperature}"
    );
    let mut out: Vec<f64> = scores.iter().map(|s| s / temperature).collect();
    tape::softmax_in_place(&mut out);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub passed: bool,
    pub max_relative_error: f64,
    /// Coordinate with the largest relative error.
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

/// Compares the analytic gradient returned by `f` against central finite
/// differences at `point`.
///
/// `f` maps parameter values to `(value, gradient)`. The relative error
/// per coordinate is `|g_a - g_fd| / max(1e-8, |g_a| + |g_fd|)`.
pub fn grad_check<F>(mut f: F, point: &[f64], step: f64, tolerance: f64) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    ensure!(step > 0.0, Config, "finite-difference step must be positive");
    let (value, analytic) = f(point)?;
    ensure!(
        analytic.len() == point.len(),
        Dimension,
        "gradient has {} entries for {} parameters",
        analytic.len(),
        point.len()
    );
    if !value.is_finite() || analytic.iter().any(|g| !g.is_finite()) {
        return Err(Error::Numeric("non-finite value at the base point".into()));
    }

    let mut x = point.to_vec();
    let mut numeric = Vec::with_capacity(point.len());
    for i in 0..point.len() {
        let orig = x[i];
        x[i] = orig + step;
        let up = f(&x)?.0;
        x[i] = orig - step;
        let down = f(&x)?.0;
        x[i] = orig;
        if !(up.is_finite() && down.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite evaluation perturbing coordinate {i}"
            )));
        }
        numeric.push((up - down) / (2.0 * step));
    }

    let (mut worst_index, mut max_relative_error) = (0, 0.0);
    for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        let rel = (a - n).abs() / (a.abs() + n.abs()).max(1e-8);
        if rel > max_relative_error {
            max_relative_error = rel;
            worst_index = i;
        }
    }
    Ok(GradCheckReport {
        passed: max_relative_error < tolerance,
        max_relative_error,
        worst_index,
        analytic,
        numeric,
    })
}
