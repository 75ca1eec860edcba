//! Central-difference gradient checking.

/// Outcome of comparing an analytic gradient with central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Largest `|a − n| / max(1, |a|, |n|)` over the checked coordinates.
    pub max_rel_error: f64,
    /// Coordinate attaining `max_rel_error`.
    pub worst_coord: usize,
    /// Coordinates where either evaluation produced a non-finite value.
    pub non_finite: Vec<usize>,
    pub coords_checked: usize,
}

impl GradCheckReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.non_finite.is_empty() && self.max_rel_error < tol
    }
}

/// Checks `analytic` against `(f(x+h e_i) − f(x−h e_i)) / 2h` at every
/// coordinate of `point`.
pub fn grad_check(
    mut f: impl FnMut(&[f64]) -> f64,
    point: &[f64],
    analytic: &[f64],
    h: f64,
) -> GradCheckReport {
    assert!(h > 0.0, "step must be positive");
    assert_eq!(point.len(), analytic.len(), "gradient length");
    let mut x = point.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_coord: 0,
        non_finite: Vec::new(),
        coords_checked: point.len(),
    };
    for i in 0..point.len() {
        let orig = x[i];
        x[i] = orig + h;
        let plus = f(&x);
        x[i] = orig - h;
        let minus = f(&x);
        x[i] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        let a = analytic[i];
        if !numeric.is_finite() || !a.is_finite() {
            report.non_finite.push(i);
            continue;
        }
        let rel = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_coord = i;
        }
    }
    report
}
