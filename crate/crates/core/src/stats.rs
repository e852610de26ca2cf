//! Boxplot summary statistics for latency samples.
//!
//! Quantiles use linear interpolation at rank `h = (n - 1) p`; the adjacent
//! values are the extreme samples still within 1.5 IQR of the quartiles.

use thiserror::Error;

use crate::scalar::Real;

#[derive(Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("need at least 5 samples, got {0}")]
    TooFewSamples(usize),
    #[error("samples must be finite")]
    NonFiniteSample,
    #[error("degenerate sample set violates the boxplot ordering")]
    DegenerateOrdering,
}

/// Seven-number boxplot summary.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxStats<T: Real> {
    pub min: T,
    pub lower_adjacent: T,
    pub q25: T,
    pub median: T,
    pub q75: T,
    pub upper_adjacent: T,
    pub max: T,
}

impl<T: Real> BoxStats<T> {
    /// The seven values in ascending order.
    pub fn ordered(&self) -> [T; 7] {
        [
            self.min,
            self.lower_adjacent,
            self.q25,
            self.median,
            self.q75,
            self.upper_adjacent,
            self.max,
        ]
    }

    pub fn validate(&self) -> Result<(), StatsError> {
        let v = self.ordered();
        if v.windows(2).any(|w| w[0] > w[1]) {
            return Err(StatsError::DegenerateOrdering);
        }
        Ok(())
    }
}

/// Interpolated quantile of an ascending-sorted slice at probability `p`.
fn quantile_sorted<T: Real>(sorted: &[T], p: f64) -> T {
    let h = T::of(p) * T::from_usize(sorted.len() - 1).unwrap();
    let lo = h.floor();
    let idx = lo.as_f64() as usize;
    let frac = h - lo;
    if idx + 1 >= sorted.len() {
        return sorted[sorted.len() - 1];
    }
    sorted[idx] + (sorted[idx + 1] - sorted[idx]) * frac
}

/// Boxplot statistics of at least five finite samples.
pub fn box_stats<T: Real>(samples: &[T]) -> Result<BoxStats<T>, StatsError> {
    if samples.len() < 5 {
        return Err(StatsError::TooFewSamples(samples.len()));
    }
    if samples.iter().any(|s| !s.is_finite()) {
        return Err(StatsError::NonFiniteSample);
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite samples are totally ordered"));

    let q25 = quantile_sorted(&sorted, 0.25);
    let median = quantile_sorted(&sorted, 0.50);
    let q75 = quantile_sorted(&sorted, 0.75);
    let iqr = q75 - q25;
    let lower_fence = q25 - T::of(1.5) * iqr;
    let upper_fence = q75 + T::of(1.5) * iqr;

    let lower_adjacent =
        *sorted.iter().find(|s| **s >= lower_fence).expect("max >= lower fence");
    let upper_adjacent =
        *sorted.iter().rev().find(|s| **s <= upper_fence).expect("min <= upper fence");

    let stats = BoxStats {
        min: sorted[0],
        lower_adjacent,
        q25,
        median,
        q75,
        upper_adjacent,
        max: sorted[sorted.len() - 1],
    };
    stats.validate()?;
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn one_to_hundred_quantiles() {
        let samples: Vec<f64> = (1..=100).map(f64::from).collect();
        let s = box_stats(&samples).unwrap();
        assert_eq!(s.median, 50.5);
        assert_eq!(s.q25, 25.75);
        assert_eq!(s.q75, 75.25);
        // Fences are wider than the sample range here.
        assert_eq!(s.lower_adjacent, 1.0);
        assert_eq!(s.upper_adjacent, 100.0);
        assert_eq!((s.min, s.max), (1.0, 100.0));
    }

    #[test]
    fn constant_samples_collapse() {
        let s = box_stats(&[7.5f64; 9]).unwrap();
        assert!(s.ordered().iter().all(|v| *v == 7.5));
    }

    #[test]
    fn outliers_are_excluded_from_whiskers() {
        let samples = vec![1.0f64, 10.0, 10.5, 11.0, 11.5, 12.0, 30.0];
        let s = box_stats(&samples).unwrap();
        assert_eq!(s.min, 1.0);
        assert_eq!(s.max, 30.0);
        assert!(s.lower_adjacent > 1.0);
        assert!(s.upper_adjacent < 30.0);
        s.validate().unwrap();
    }

    #[test]
    fn rejects_small_and_non_finite_sets() {
        assert_eq!(box_stats(&[1.0f64; 4]).unwrap_err(), StatsError::TooFewSamples(4));
        assert_eq!(
            box_stats(&[1.0f64, 2.0, f64::NAN, 4.0, 5.0]).unwrap_err(),
            StatsError::NonFiniteSample
        );
    }

    /// Direct re-implementation from the definition: sort, index arithmetic,
    /// linear scan for the adjacent values.
    fn brute_force(samples: &[f64]) -> BoxStats<f64> {
        let mut s = samples.to_vec();
        s.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = s.len();
        let q = |p: f64| {
            let h = p * (n - 1) as f64;
            let lo = h.floor() as usize;
            let frac = h - h.floor();
            if lo + 1 >= n {
                s[n - 1]
            } else {
                s[lo] + (s[lo + 1] - s[lo]) * frac
            }
        };
        let (q25, median, q75) = (q(0.25), q(0.5), q(0.75));
        let iqr = q75 - q25;
        let mut lower_adjacent = s[n - 1];
        for v in &s {
            if *v >= q25 - 1.5 * iqr {
                lower_adjacent = *v;
                break;
            }
        }
        let mut upper_adjacent = s[0];
        for v in s.iter().rev() {
            if *v <= q75 + 1.5 * iqr {
                upper_adjacent = *v;
                break;
            }
        }
        BoxStats { min: s[0], lower_adjacent, q25, median, q75, upper_adjacent, max: s[n - 1] }
    }

    #[test]
    fn matches_brute_force_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..1000 {
            let n = rng.gen_range(5..200);
            let samples: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..100.0)).collect();
            let got = box_stats(&samples).unwrap();
            let want = brute_force(&samples);
            assert_eq!(got, want);
        }
    }

    proptest! {
        #[test]
        fn ordering_invariant_on_random_sets(
            samples in proptest::collection::vec(-1e6..1e6f64, 5..300)
        ) {
            let s = box_stats(&samples).unwrap();
            let v = s.ordered();
            prop_assert!(v.windows(2).all(|w| w[0] <= w[1]));
            prop_assert_eq!(s.min, samples.iter().cloned().fold(f64::INFINITY, f64::min));
            prop_assert_eq!(s.max, samples.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
        }
    }
}
