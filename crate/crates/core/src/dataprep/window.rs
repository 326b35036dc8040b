use std::collections::BTreeMap;

use chrono::NaiveDateTime;
use serde::{Deserialize, Serialize};

use crate::tensor::Rng;
use crate::{Error, Result};

/// Grouping and ordering key of one raw row.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RowKey {
    pub entity: String,
    pub time: Option<NaiveDateTime>,
}

/// `length` consecutive rows of one entity, as indices into the raw rows.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Window {
    pub entity: String,
    /// Offset of the first row within the entity's sorted history.
    pub start: usize,
    pub rows: Vec<usize>,
}

/// Cuts every entity's chronologically sorted history into windows of
/// `length` rows taken at every `stride`-th offset. Entities come out in
/// lexicographic order; entities shorter than `length` produce nothing.
pub fn window_by_entity(keys: &[RowKey], length: usize, stride: usize) -> Result<Vec<Window>> {
    if length == 0 || stride == 0 {
        return Err(Error::config("window length and stride must be at least 1"));
    }
    let mut by_entity: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, k) in keys.iter().enumerate() {
        by_entity.entry(k.entity.as_str()).or_default().push(i);
    }
    let mut out = Vec::new();
    for (entity, mut rows) in by_entity {
        // Stable: equal timestamps keep file order.
        rows.sort_by_key(|&i| keys[i].time);
        let mut start = 0;
        while start + length <= rows.len() {
            out.push(Window { entity: entity.to_string(), start, rows: rows[start..start + length].to_vec() });
            start += stride;
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::config(format!("unknown split {other:?} (expected train, val or test)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    BySample,
    ByEntity,
}

/// Sizes for `n` items: train and val rounded, test takes the rest.
fn split_sizes(n: usize, fractions: [f64; 3]) -> [usize; 3] {
    let train = ((fractions[0] * n as f64).round() as usize).min(n);
    let val = ((fractions[1] * n as f64).round() as usize).min(n - train);
    [train, val, n - train - val]
}

/// Assigns a split to every item. `entities[i]` is the entity of item `i`.
pub fn split_samples(entities: &[&str], fractions: [f64; 3], mode: SplitMode, rng: &mut Rng) -> Result<Vec<Split>> {
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
        return Err(Error::config(format!("split fractions {fractions:?} must be in [0, 1] and sum to 1")));
    }
    let assign = |n: usize, rng: &mut Rng| {
        let mut order: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut order);
        let [a, b, _] = split_sizes(n, fractions);
        let mut tags = vec![Split::Test; n];
        for (rank, &i) in order.iter().enumerate() {
            tags[i] = if rank < a {
                Split::Train
            } else if rank < a + b {
                Split::Val
            } else {
                Split::Test
            };
        }
        tags
    };
    match mode {
        SplitMode::BySample => Ok(assign(entities.len(), rng)),
        SplitMode::ByEntity => {
            let unique: Vec<&str> = {
                let mut u: Vec<&str> = entities.to_vec();
                u.sort_unstable();
                u.dedup();
                u
            };
            let needed = fractions.iter().filter(|&&f| f > 0.0).count();
            if unique.len() < needed {
                return Err(Error::config(format!(
                    "by_entity split needs at least {needed} entities, found {}",
                    unique.len()
                )));
            }
            let tags = assign(unique.len(), rng);
            let lookup: BTreeMap<&str, Split> = unique.iter().copied().zip(tags).collect();
            Ok(entities.iter().map(|e| lookup[e]).collect())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn keys(entity: &str, n: usize) -> Vec<RowKey> {
        (0..n)
            .map(|h| RowKey {
                entity: entity.into(),
                time: chrono::NaiveDate::from_ymd_opt(2024, 1, 1).unwrap().and_hms_opt(h as u32 % 24, 0, 0),
            })
            .collect()
    }

    #[test]
    fn window_counts() {
        let mut k = keys("a", 12);
        k.extend(keys("b", 9));
        let w = window_by_entity(&k, 10, 1).unwrap();
        assert_eq!(w.len(), 3);
        assert!(w.iter().all(|w| w.entity == "a"));
        assert_eq!(window_by_entity(&k, 10, 10).unwrap().len(), 1);
    }

    #[test]
    fn windows_sorted_and_within_entity() {
        let mut k = keys("x", 15);
        k.reverse();
        k.extend(keys("y", 11));
        for w in window_by_entity(&k, 5, 2).unwrap() {
            assert!(w.rows.iter().all(|&i| k[i].entity == w.entity));
            assert!(w.rows.windows(2).all(|p| k[p[0]].time <= k[p[1]].time));
        }
    }

    #[test]
    fn by_sample_sizes() {
        let ents: Vec<String> = (0..100).map(|i| format!("e{i}")).collect();
        let refs: Vec<&str> = ents.iter().map(|s| s.as_str()).collect();
        let tags = split_samples(&refs, [0.6, 0.2, 0.2], SplitMode::BySample, &mut Rng::new(1, 4)).unwrap();
        let count = |s| tags.iter().filter(|&&t| t == s).count();
        assert_eq!((count(Split::Train), count(Split::Val), count(Split::Test)), (60, 20, 20));
    }

    #[test]
    fn by_entity_keeps_entities_whole() {
        let mut ents = Vec::new();
        for e in 0..10 {
            for _ in 0..7 {
                ents.push(format!("client{e}"));
            }
        }
        let refs: Vec<&str> = ents.iter().map(|s| s.as_str()).collect();
        let tags = split_samples(&refs, [0.8, 0.2, 0.0], SplitMode::ByEntity, &mut Rng::new(3, 4)).unwrap();
        let mut per_split: BTreeMap<Split, HashSet<&str>> = BTreeMap::new();
        for (e, t) in refs.iter().zip(&tags) {
            per_split.entry(*t).or_default().insert(e);
        }
        assert_eq!(per_split[&Split::Train].len(), 8);
        assert_eq!(per_split[&Split::Val].len(), 2);
        assert!(!per_split.contains_key(&Split::Test));
        assert!(per_split[&Split::Train].is_disjoint(&per_split[&Split::Val]));
    }

    #[test]
    fn deterministic_and_errors() {
        let refs: Vec<&str> = vec!["a", "b", "c", "d", "e"];
        let a = split_samples(&refs, [0.6, 0.2, 0.2], SplitMode::BySample, &mut Rng::new(5, 4)).unwrap();
        let b = split_samples(&refs, [0.6, 0.2, 0.2], SplitMode::BySample, &mut Rng::new(5, 4)).unwrap();
        assert_eq!(a, b);
        assert!(split_samples(&["a", "b"], [0.4, 0.3, 0.3], SplitMode::ByEntity, &mut Rng::new(5, 4)).is_err());
        assert!(split_samples(&refs, [0.5, 0.2, 0.2], SplitMode::BySample, &mut Rng::new(5, 4)).is_err());
    }
}
