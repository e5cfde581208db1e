//! Checks of additive-noise variance on the 0-255 intensity scale.

use statrs::distribution::{ChiSquared, ContinuousCDF};

use super::Sample;
use crate::error::{Error, Result};

/// Unbiased sample variance.
pub fn sample_variance(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)
}

/// Two-sided interval for the sample variance of `n` draws with true
/// variance `sigma2`: `sigma2 * q / (n - 1)` for the chi-square(n - 1)
/// quantiles `q` at `(1 -+ confidence) / 2`.
pub fn variance_bounds(sigma2: f64, n: usize, confidence: f64) -> Result<(f64, f64)> {
    if n < 2 || !(0.0..1.0).contains(&confidence) {
        return Err(Error::contract(format!("variance bounds need n >= 2 and confidence in [0, 1), got {n}, {confidence}")));
    }
    let k = (n - 1) as f64;
    let chi = ChiSquared::new(k).map_err(|e| Error::contract(e.to_string()))?;
    let alpha = 1.0 - confidence;
    Ok((sigma2 * chi.inverse_cdf(alpha / 2.0) / k, sigma2 * chi.inverse_cdf(1.0 - alpha / 2.0) / k))
}

/// Variance (0-255 scale) of the input over background voxels, and their count.
pub fn background_variance(s: &Sample) -> (f64, usize) {
    let bg: Vec<f64> = s
        .input
        .data()
        .iter()
        .zip(s.mask.data())
        .filter(|(_, &m)| m == 0.0)
        .map(|(&v, _)| v as f64 * 255.0)
        .collect();
    (sample_variance(&bg), bg.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bounds_bracket_the_target() {
        let (lo, hi) = variance_bounds(20.0, 10_000, 0.99).unwrap();
        assert!(lo < 20.0 && hi > 20.0);
        assert!(hi - lo < 2.0);
        assert!(variance_bounds(1.0, 1, 0.9).is_err());
    }

    #[test]
    fn sample_variance_of_known_values() {
        assert!((sample_variance(&[1.0, 2.0, 3.0, 4.0]) - 5.0 / 3.0).abs() < 1e-12);
    }
}
