use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mean with population variance; reports print `mean ± variance`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: f64,
    pub variance: f64,
    pub std: f64,
    pub count: usize,
}

pub fn summarize(values: &[f64]) -> Result<MetricSummary> {
    if values.is_empty() {
        return Err(Error::EmptySample);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let variance = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Ok(MetricSummary {
        mean,
        variance,
        std: variance.sqrt(),
        count: values.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn constant_sample() {
        let s = summarize(&[1.0, 1.0, 1.0]).unwrap();
        assert_eq!((s.mean, s.variance, s.std, s.count), (1.0, 0.0, 0.0, 3));
    }

    #[test]
    fn two_points() {
        let s = summarize(&[0.0, 1.0]).unwrap();
        assert_eq!(s.mean, 0.5);
        assert_eq!(s.variance, 0.25);
        assert_eq!(s.std, 0.5);
    }

    #[test]
    fn single_sample_has_no_spread() {
        let s = summarize(&[-3.75]).unwrap();
        assert_eq!((s.mean, s.variance), (-3.75, 0.0));
    }

    #[test]
    fn empty_is_an_error() {
        assert!(matches!(summarize(&[]), Err(Error::EmptySample)));
    }

    fn rel_close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
    }

    proptest! {
        #[test]
        fn matches_brute_force(values in prop::collection::vec(-1e3..1e3f64, 1..64)) {
            // independent route: variance as mean pairwise squared difference / 2
            let n = values.len() as f64;
            let mean = values.iter().fold(0.0, |acc, v| acc + v / n);
            let mut pair = 0.0;
            for a in &values {
                for b in &values {
                    pair += (a - b) * (a - b);
                }
            }
            let variance = pair / (2.0 * n * n);
            let s = summarize(&values).unwrap();
            prop_assert!(rel_close(s.mean, mean, 1e-12));
            prop_assert!(rel_close(s.variance, variance, 1e-12));
            prop_assert_eq!(s.std, s.variance.sqrt());
        }
    }
}
