/// Function value at a point plus a fingerprint of its piecewise-linear region
/// (ReLU signs, pooling argmaxes).
#[derive(Debug, Clone, Copy)]
pub struct Probe {
    pub value: f64,
    pub pattern: u64,
}

impl Probe {
    pub fn smooth(value: f64) -> Self {
        Self { value, pattern: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_index: Option<usize>,
    pub checked: usize,
    /// Coordinates where ±δ crossed a kink and were left out.
    pub skipped: usize,
    pub passed: bool,
}

/// Floor for the relative-error denominator so vanishing gradients compare
/// absolutely.
const DENOM_FLOOR: f64 = 1e-6;

/// Compares `analytic` against central differences (f(x+δ) − f(x−δ)) / 2δ on
/// every coordinate of `params`.
pub fn grad_check(
    mut f: impl FnMut(&[f64]) -> Probe,
    params: &[f64],
    analytic: &[f64],
    delta: f64,
    tol: f64,
) -> GradCheckReport {
    assert_eq!(params.len(), analytic.len(), "grad_check: gradient length");
    let base = f(params).pattern;
    let mut x = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: None,
        checked: 0,
        skipped: 0,
        passed: true,
    };
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + delta;
        let plus = f(&x);
        x[i] = orig - delta;
        let minus = f(&x);
        x[i] = orig;
        if plus.pattern != base || minus.pattern != base {
            report.skipped += 1;
            continue;
        }
        let numeric = (plus.value - minus.value) / (2.0 * delta);
        let a = analytic[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(DENOM_FLOOR);
        report.checked += 1;
        if rel > report.max_rel_error || report.worst_index.is_none() {
            report.max_rel_error = report.max_rel_error.max(rel);
            report.worst_index = Some(i);
        }
    }
    report.passed = report.max_rel_error <= tol;
    report
}
