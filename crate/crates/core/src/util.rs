//! Small shared helpers: float formatting, summary statistics.

/// Format with 17 significant digits so the printed value round-trips to the
/// same f64 bits.
pub fn fmt_f64(x: f64) -> String {
    format!("{:.16e}", x)
}

/// Sample mean.
pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample variance.
pub fn variance(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64
}

/// Standard error of the sample mean.
pub fn std_error(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    (variance(xs) / xs.len() as f64).sqrt()
}

/// Mean and standard error in one pass over the slice.
pub fn mean_se(xs: &[f64]) -> (f64, f64) {
    (mean(xs), std_error(xs))
}
