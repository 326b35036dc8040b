use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Per-target z-scoring fitted on the training split.
///
/// Labels are laid out step-major: label `j` belongs to target `j % n`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetNormalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl TargetNormalizer {
    /// Fits on training label vectors; `n_targets` must divide their length.
    pub fn fit(labels: &[&[f64]], n_targets: usize) -> Result<Self> {
        if n_targets == 0 {
            return Err(Error::config("normalizer needs at least one target"));
        }
        let mut sum = vec![0.0; n_targets];
        let mut count = vec![0usize; n_targets];
        for row in labels {
            if row.len() % n_targets != 0 {
                return Err(Error::data(format!("label vector of length {} not a multiple of {n_targets}", row.len())));
            }
            for (j, &y) in row.iter().enumerate() {
                sum[j % n_targets] += y;
                count[j % n_targets] += 1;
            }
        }
        if count.contains(&0) {
            return Err(Error::data("normalizer fitted on an empty training split"));
        }
        let mean: Vec<f64> = sum.iter().zip(&count).map(|(s, &c)| s / c as f64).collect();
        let mut sq = vec![0.0; n_targets];
        for row in labels {
            for (j, &y) in row.iter().enumerate() {
                let d = y - mean[j % n_targets];
                sq[j % n_targets] += d * d;
            }
        }
        let std: Vec<f64> = sq.iter().zip(&count).map(|(s, &c)| (s / c as f64).sqrt()).collect();
        if let Some(j) = std.iter().position(|&s| !(s > 0.0)) {
            return Err(Error::config(format!("target {j} has zero variance on the training split")));
        }
        Ok(TargetNormalizer { mean, std })
    }

    pub fn n_targets(&self) -> usize {
        self.mean.len()
    }

    pub fn transform(&self, labels: &[f64]) -> Vec<f64> {
        let n = self.n_targets();
        labels.iter().enumerate().map(|(j, &y)| (y - self.mean[j % n]) / self.std[j % n]).collect()
    }

    pub fn inverse(&self, normalized: &[f64]) -> Vec<f64> {
        let n = self.n_targets();
        normalized.iter().enumerate().map(|(j, &z)| z * self.std[j % n] + self.mean[j % n]).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn two_point_fit() {
        let n = TargetNormalizer::fit(&[&[1.0], &[3.0]], 1).unwrap();
        assert_eq!(n.transform(&[1.0, 3.0]), vec![-1.0, 1.0]);
    }

    #[test]
    fn zero_variance_rejected() {
        assert!(matches!(TargetNormalizer::fit(&[&[2.0], &[2.0]], 1), Err(Error::Config(_))));
    }

    #[test]
    fn held_out_split_uses_train_statistics() {
        let n = TargetNormalizer::fit(&[&[0.0, 10.0], &[2.0, 30.0]], 2).unwrap();
        let val = n.transform(&[5.0, 50.0]);
        assert!(val.iter().all(|&z| z > 0.5), "{val:?}");
    }

    proptest! {
        #[test]
        fn roundtrip(train in proptest::collection::vec(proptest::collection::vec(-1e3f64..1e3, 4), 2..20),
                     x in proptest::collection::vec(-1e4f64..1e4, 4)) {
            let refs: Vec<&[f64]> = train.iter().map(|v| v.as_slice()).collect();
            if let Ok(n) = TargetNormalizer::fit(&refs, 2) {
                let back = n.inverse(&n.transform(&x));
                for (a, b) in back.iter().zip(&x) {
                    prop_assert!((a - b).abs() < 1e-9 * (1.0 + b.abs()));
                }
            }
        }
    }
}
