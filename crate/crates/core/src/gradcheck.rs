//! Central finite differences for checking hand-written gradients.

/// Agreement statistics between an analytic and a numeric gradient.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub coordinates: usize,
    /// Fraction of coordinates with relative error at most `tolerance`.
    pub fraction_within: f64,
    pub max_relative_error: f64,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passes(&self, min_fraction: f64, max_error: f64) -> bool {
        self.fraction_within >= min_fraction && self.max_relative_error <= max_error
    }
}

/// `|a − n| / max(|a|, |n|, floor)`; the floor keeps coordinates whose true
/// gradient is zero from dividing by rounding noise.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    const FLOOR: f64 = 1e-7;
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

/// Central-difference gradient of `f` at `x` with step `h`.
pub fn numeric_gradient(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

pub fn compare(analytic: &[f64], numeric: &[f64], tolerance: f64) -> GradCheckReport {
    assert_eq!(analytic.len(), numeric.len());
    let errors: Vec<f64> = analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .collect();
    let within = errors.iter().filter(|&&e| e <= tolerance).count();
    GradCheckReport {
        coordinates: errors.len(),
        fraction_within: if errors.is_empty() {
            1.0
        } else {
            within as f64 / errors.len() as f64
        },
        max_relative_error: errors.iter().copied().fold(0.0, f64::max),
        tolerance,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient_is_recovered() {
        let f = |x: &[f64]| x[0] * x[0] + 3.0 * x[0] * x[1] - x[1].powi(3);
        let x = [0.4, -1.2];
        let numeric = numeric_gradient(f, &x, 1e-5);
        let analytic = [2.0 * x[0] + 3.0 * x[1], 3.0 * x[0] - 3.0 * x[1] * x[1]];
        let report = compare(&analytic, &numeric, 1e-6);
        assert!(report.passes(1.0, 1e-6), "{report:?}");
    }
}
