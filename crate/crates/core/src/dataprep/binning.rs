use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Rank-based discretizer: boundaries at empirical quantiles.
///
/// `bin(x)` is the number of boundaries `<= x`, so bins are numbered
/// `0..=boundaries.len()`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantileBinner {
    pub boundaries: Vec<f64>,
}

/// Linear-interpolated empirical quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

impl QuantileBinner {
    /// Fits at most `n_bins - 1` boundaries. Duplicate quantiles collapse and
    /// boundaries at or below the minimum are dropped so bin 0 is never empty.
    pub fn fit(values: &[f64], n_bins: usize) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::data("cannot fit a binner on an empty column"));
        }
        if n_bins == 0 {
            return Err(Error::config("n_bins must be at least 1"));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::data_at("non-finite value while fitting binner", i));
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let min = sorted[0];
        let mut boundaries: Vec<f64> = Vec::with_capacity(n_bins.saturating_sub(1));
        for i in 1..n_bins {
            let b = quantile(&sorted, i as f64 / n_bins as f64);
            if b > min && boundaries.last().is_none_or(|&last| b > last) {
                boundaries.push(b);
            }
        }
        Ok(QuantileBinner { boundaries })
    }

    pub fn n_bins(&self) -> usize {
        self.boundaries.len() + 1
    }

    pub fn bin(&self, x: f64) -> Result<usize> {
        bin_value(x, &self.boundaries)
    }
}

/// Bin id of `x` given sorted boundaries.
pub fn bin_value(x: f64, boundaries: &[f64]) -> Result<usize> {
    if x.is_nan() {
        return Err(Error::data("cannot bin NaN"));
    }
    Ok(boundaries.partition_point(|&b| b <= x))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn constant_column_has_no_boundaries() {
        let b = QuantileBinner::fit(&[4.2; 100], 50).unwrap();
        assert!(b.boundaries.is_empty());
        assert_eq!(b.bin(4.2).unwrap(), 0);
        assert_eq!(b.bin(-1e9).unwrap(), 0);
    }

    #[test]
    fn uniform_values_fifty_bins() {
        let values: Vec<f64> = (0..1000).map(f64::from).collect();
        let b = QuantileBinner::fit(&values, 50).unwrap();
        assert_eq!(b.boundaries.len(), 49);
        // Sort-and-count oracle: rank of 500 among values is 500, and each
        // bin holds ~20 values.
        let count_below = values.iter().filter(|&&v| v < 500.0).count();
        assert_eq!(count_below / 20, 25);
        assert_eq!(b.bin(500.0).unwrap(), 25);
    }

    #[test]
    fn median_split() {
        let b = QuantileBinner::fit(&[1.0, 2.0, 3.0, 4.0], 2).unwrap();
        assert_eq!(b.boundaries, vec![2.5]);
        assert_eq!(b.bin(1.0).unwrap(), 0);
        assert_eq!(b.bin(4.0).unwrap(), 1);
    }

    #[test]
    fn edges_and_errors() {
        let b = QuantileBinner { boundaries: vec![1.0, 2.0, 3.0] };
        assert_eq!(b.bin(0.0).unwrap(), 0);
        assert_eq!(b.bin(10.0).unwrap(), 3);
        assert!(b.bin(f64::NAN).is_err());
        assert!(QuantileBinner::fit(&[], 5).is_err());
    }

    #[test]
    fn heavy_ties_collapse() {
        let mut values = vec![0.0; 90];
        values.extend((1..=10).map(f64::from));
        let b = QuantileBinner::fit(&values, 50).unwrap();
        assert!(b.boundaries.windows(2).all(|w| w[0] < w[1]));
        assert!(b.boundaries.len() < 49);
        assert_eq!(b.bin(0.0).unwrap(), 0);
    }

    proptest! {
        #[test]
        fn matches_linear_scan(values in proptest::collection::vec(-100.0f64..100.0, 1..200),
                               queries in proptest::collection::vec(-150.0f64..150.0, 1..50),
                               n_bins in 1usize..60) {
            let b = QuantileBinner::fit(&values, n_bins).unwrap();
            prop_assert!(b.boundaries.len() < n_bins);
            for &q in &queries {
                let scan = b.boundaries.iter().filter(|&&x| x <= q).count();
                prop_assert_eq!(b.bin(q).unwrap(), scan);
            }
        }

        #[test]
        fn monotone(values in proptest::collection::vec(-10.0f64..10.0, 1..100), x in -12.0f64..12.0, dx in 0.0f64..5.0) {
            let b = QuantileBinner::fit(&values, 10).unwrap();
            prop_assert!(b.bin(x).unwrap() <= b.bin(x + dx).unwrap());
        }
    }
}
