//! Central finite-difference gradient oracle.
//!
//! Certifies an analytic gradient of a scalar function against
//! `(f(x + h e_i) - f(x - h e_i)) / 2h` coordinate by coordinate with the
//! symmetric relative error `|a - n| / max(1e-8, |a| + |n|)`.

use crate::error::{Error, Result};

/// Maximum relative error between the analytic gradient and central
/// differences over every coordinate of `x`.
pub fn gradcheck<F>(mut f: F, analytic: &[f64], x: &[f64], h: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!("step h must be positive, got {h}")));
    }
    if analytic.len() != x.len() {
        return Err(Error::DimMismatch(format!(
            "analytic gradient has {} coordinates, point has {}",
            analytic.len(),
            x.len()
        )));
    }
    let mut probe = x.to_vec();
    let mut max_rel = 0.0f64;
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let fp = f(&probe)?;
        probe[i] = x[i] - h;
        let fm = f(&probe)?;
        probe[i] = x[i];
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "function non-finite near coordinate {i}: f+ = {fp}, f- = {fm}"
            )));
        }
        let numeric = (fp - fm) / (2.0 * h);
        let rel = (analytic[i] - numeric).abs() / (analytic[i].abs() + numeric.abs()).max(1e-8);
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok(max_rel)
}
