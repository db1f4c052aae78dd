//! Central finite differences, used to verify analytic gradients.

/// `|a − b| / max(|a|, |b|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(floor);
    (analytic - numeric).abs() / scale
}

/// Central difference `(f(x + h eᵢ) − f(x − h eᵢ)) / 2h` for each index in `indices`.
pub fn central_differences<F>(mut f: F, x: &[f64], indices: &[usize], h: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut probe = x.to_vec();
    indices
        .iter()
        .map(|&i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let plus = f(&probe);
            probe[i] = orig - h;
            let minus = f(&probe);
            probe[i] = orig;
            (plus - minus) / (2.0 * h)
        })
        .collect()
}

/// Worst relative error between `analytic[i]` and the numeric derivative at `indices[i]`.
#[derive(Debug, Clone, Copy)]
pub struct CheckReport {
    pub max_relative_error: f64,
    pub worst_index: usize,
    pub checked: usize,
}

pub fn compare(analytic: &[f64], numeric: &[f64], indices: &[usize], floor: f64) -> CheckReport {
    let mut report = CheckReport {
        max_relative_error: 0.0,
        worst_index: indices.first().copied().unwrap_or(0),
        checked: indices.len(),
    };
    for ((&a, &n), &i) in analytic.iter().zip(numeric).zip(indices) {
        let e = relative_error(a, n, floor);
        if e > report.max_relative_error {
            report.max_relative_error = e;
            report.worst_index = i;
        }
    }
    report
}
