//! Central finite-difference gradient checks.

use crate::error::{MsgcError, Result};

/// Worst coordinate found by a finite-difference check.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FdReport {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub numeric: f64,
    pub analytic: f64,
    pub coords_checked: usize,
}

impl FdReport {
    fn empty() -> Self {
        Self { max_rel_error: 0.0, worst_index: 0, numeric: 0.0, analytic: 0.0, coords_checked: 0 }
    }

    pub fn merge(self, other: FdReport) -> FdReport {
        let coords = self.coords_checked + other.coords_checked;
        let mut best = if other.max_rel_error > self.max_rel_error { other } else { self };
        best.coords_checked = coords;
        best
    }
}

/// Per unit of `max(1, |f|)`, the gradient magnitude below which the central
/// difference cannot resolve a coordinate past rounding noise; smaller
/// gradients are measured in absolute terms against it.
pub const GRADIENT_FLOOR: f64 = 1e-6;

pub fn relative_error(numeric: f64, analytic: f64) -> f64 {
    relative_error_floored(numeric, analytic, GRADIENT_FLOOR)
}

fn relative_error_floored(numeric: f64, analytic: f64, floor: f64) -> f64 {
    (numeric - analytic).abs() / (numeric.abs() + analytic.abs()).max(floor)
}

/// Steps tried in turn, relative to `max(1, |theta_i|)`. A step that straddles a
/// ReLU or hinge kink gives a meaningless difference; a smaller step usually
/// does not, while a wrong analytic gradient disagrees at every step.
const STEPS: [f64; 3] = [1e-5, 1e-6, 1e-7];
const RETRY_ABOVE: f64 = 1e-6;

/// Checks every coordinate of `theta`.
pub fn finite_diff_check(
    f: impl FnMut(&[f64]) -> f64,
    theta: &[f64],
    analytic: &[f64],
) -> Result<FdReport> {
    let coords: Vec<usize> = (0..theta.len()).collect();
    finite_diff_check_at(f, theta, analytic, &coords)
}

/// Checks only the listed coordinates.
pub fn finite_diff_check_at(
    mut f: impl FnMut(&[f64]) -> f64,
    theta: &[f64],
    analytic: &[f64],
    coords: &[usize],
) -> Result<FdReport> {
    if theta.len() != analytic.len() {
        return Err(MsgcError::shape(format!(
            "gradient has {} entries for {} parameters",
            analytic.len(),
            theta.len()
        )));
    }
    let mut probe = theta.to_vec();
    let mut report = FdReport::empty();
    let floor = GRADIENT_FLOOR * f(theta).abs().max(1.0);
    for &i in coords {
        if !analytic[i].is_finite() {
            return Err(MsgcError::NonFinite(format!("analytic gradient at coordinate {i}")));
        }
        let (mut numeric, mut err) = (0.0, f64::INFINITY);
        for step in STEPS {
            let h = step * theta[i].abs().max(1.0);
            probe[i] = theta[i] + h;
            let up = f(&probe);
            probe[i] = theta[i] - h;
            let down = f(&probe);
            probe[i] = theta[i];
            if !up.is_finite() || !down.is_finite() {
                return Err(MsgcError::NonFinite(format!("finite difference at coordinate {i}")));
            }
            let n = (up - down) / (2.0 * h);
            let e = relative_error_floored(n, analytic[i], floor);
            if e < err {
                (numeric, err) = (n, e);
            }
            if err <= RETRY_ABOVE {
                break;
            }
        }
        report.coords_checked += 1;
        if err > report.max_rel_error || report.coords_checked == 1 {
            report.max_rel_error = err;
            report.worst_index = i;
            report.numeric = numeric;
            report.analytic = analytic[i];
        }
    }
    Ok(report)
}
