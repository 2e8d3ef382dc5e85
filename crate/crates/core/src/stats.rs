//! Order-independent reductions and sample statistics.
//!
//! Every reduction over paths or particles goes through [`pairwise_sum`], so
//! results depend only on the data and never on how work was scheduled.

/// Pairwise (cascade) summation. Error grows like `O(log n)` rather than `O(n)`.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    const BLOCK: usize = 32;
    if values.len() <= BLOCK {
        return values.iter().sum();
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    pairwise_sum(values) / values.len() as f64
}

/// Unbiased sample variance; zero for fewer than two samples.
pub fn sample_variance(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    let m = mean(values);
    let sq: Vec<f64> = values.iter().map(|v| (v - m) * (v - m)).collect();
    pairwise_sum(&sq) / (n - 1) as f64
}

/// Mean with its Monte Carlo standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleSummary {
    pub mean: f64,
    pub std_error: f64,
    pub samples: usize,
}

impl SampleSummary {
    pub fn from_samples(values: &[f64]) -> Self {
        let n = values.len();
        Self {
            mean: mean(values),
            std_error: if n == 0 {
                f64::NAN
            } else {
                (sample_variance(values) / n as f64).sqrt()
            },
            samples: n,
        }
    }

    /// `|mean - target| <= k * std_error`.
    pub fn within(&self, target: f64, k: f64) -> bool {
        (self.mean - target).abs() <= k * self.std_error
    }
}

pub fn rms(values: &[f64]) -> f64 {
    let sq: Vec<f64> = values.iter().map(|v| v * v).collect();
    mean(&sq).sqrt()
}

pub fn max_abs(values: &[f64]) -> f64 {
    values.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pairwise_matches_naive_on_small_input() {
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(pairwise_sum(&v), 5050.0);
    }

    #[test]
    fn summary_of_constant_has_zero_error() {
        let s = SampleSummary::from_samples(&[2.5; 10]);
        assert_eq!(s.mean, 2.5);
        assert_eq!(s.std_error, 0.0);
        assert!(s.within(2.5, 3.0));
    }

    #[test]
    fn variance_of_pair() {
        assert!((sample_variance(&[1.0, 3.0]) - 2.0).abs() < 1e-15);
    }
}
