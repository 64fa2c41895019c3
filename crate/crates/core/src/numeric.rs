//! Log-space helpers shared by every sampler.

use rand::Rng;

/// `ln(sum(exp(xs)))`, stable for large magnitudes. Returns `-inf` for an
/// empty slice or when every entry is `-inf`.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    let sum: f64 = xs.iter().map(|&x| (x - max).exp()).sum();
    max + sum.ln()
}

/// Normalizes log weights in place into probabilities.
///
/// An all `-inf` input becomes the uniform distribution.
pub fn normalize_log_weights(ws: &mut [f64]) {
    if ws.is_empty() {
        return;
    }
    let lse = log_sum_exp(ws);
    if !lse.is_finite() {
        let u = 1.0 / ws.len() as f64;
        ws.iter_mut().for_each(|w| *w = u);
        return;
    }
    ws.iter_mut().for_each(|w| *w = (*w - lse).exp());
}

/// Draws an index with probability proportional to `exp(log_weights[i])`.
///
/// Panics on an empty slice.
pub fn sample_log_categorical<R: Rng + ?Sized>(log_weights: &[f64], rng: &mut R) -> usize {
    assert!(!log_weights.is_empty(), "categorical over zero outcomes");
    let max = log_weights
        .iter()
        .copied()
        .filter(|w| !w.is_nan())
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return rng.random_range(0..log_weights.len());
    }
    let total: f64 = log_weights
        .iter()
        .map(|&w| if w.is_nan() { 0.0 } else { (w - max).exp() })
        .sum();
    let mut u = rng.random::<f64>() * total;
    let mut last_positive = 0;
    for (i, &w) in log_weights.iter().enumerate() {
        if w.is_nan() {
            continue;
        }
        let p = (w - max).exp();
        if p > 0.0 {
            last_positive = i;
        }
        if u < p {
            return i;
        }
        u -= p;
    }
    last_positive
}
