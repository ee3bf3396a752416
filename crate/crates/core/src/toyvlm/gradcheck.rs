//! Central finite-difference gradient checking.

use crate::error::{shape_err, Result};

/// Denominator floor in [`relative_error`], so that coordinates whose true
/// gradient is zero are compared on an absolute scale.
pub const REL_ERR_FLOOR: f64 = 1e-5;

/// `|a - n| / max(|a|, |n|, REL_ERR_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for every coordinate.
pub fn numeric_gradient(f: impl Fn(&[f64]) -> f64, x: &[f64], step: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + step;
            let up = f(&probe);
            probe[i] = orig - step;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * step)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub mean_rel_err: f64,
    /// Coordinate holding the maximum error.
    pub worst_index: usize,
    pub coordinates: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_err < tolerance
    }

    /// Combine reports over disjoint coordinate sets.
    pub fn merge(&self, other: &GradCheckReport) -> GradCheckReport {
        let n = self.coordinates + other.coordinates;
        let mean = if n == 0 {
            0.0
        } else {
            (self.mean_rel_err * self.coordinates as f64
                + other.mean_rel_err * other.coordinates as f64)
                / n as f64
        };
        let (max, worst) = if other.max_rel_err > self.max_rel_err {
            (other.max_rel_err, self.coordinates + other.worst_index)
        } else {
            (self.max_rel_err, self.worst_index)
        };
        GradCheckReport {
            max_rel_err: max,
            mean_rel_err: mean,
            worst_index: worst,
            coordinates: n,
        }
    }
}

/// Compare `analytic` with central differences of `f` at `x`.
pub fn finite_diff_check(
    f: impl Fn(&[f64]) -> f64,
    x: &[f64],
    analytic: &[f64],
    step: f64,
) -> Result<GradCheckReport> {
    if analytic.len() != x.len() {
        return Err(shape_err!(
            "{} analytic partials for {} coordinates",
            analytic.len(),
            x.len()
        ));
    }
    let numeric = numeric_gradient(f, x, step);
    Ok(compare(analytic, &numeric))
}

pub fn compare(analytic: &[f64], numeric: &[f64]) -> GradCheckReport {
    let mut max = 0.0;
    let mut worst = 0;
    let mut sum = 0.0;
    for (i, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        let e = relative_error(*a, *n);
        sum += e;
        if e > max {
            max = e;
            worst = i;
        }
    }
    GradCheckReport {
        max_rel_err: max,
        mean_rel_err: if analytic.is_empty() {
            0.0
        } else {
            sum / analytic.len() as f64
        },
        worst_index: worst,
        coordinates: analytic.len(),
    }
}
