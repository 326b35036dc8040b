//! Per-column token tables in one global id space.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};
use std::ops::Range;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataprep::Sample;
use crate::{Error, Result};

pub const PAD: usize = 0;
pub const MASK: usize = 1;
pub const CLS: usize = 2;
pub const UNK: usize = 3;
pub const N_SPECIAL: usize = 4;
pub const SPECIAL_NAMES: [&str; N_SPECIAL] = ["[PAD]", "[MASK]", "[CLS]", "[UNK]"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColumnTable {
    pub name: String,
    pub offset: usize,
    pub values: Vec<String>,
    /// Training-split frequency of each value.
    pub counts: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VocabFile {
    specials: Vec<String>,
    columns: Vec<ColumnTable>,
}

/// Immutable after [`Vocabulary::build`]. Column `c` owns the contiguous
/// ids `offset_c .. offset_c + len_c`; specials occupy `0..4`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "VocabFile", into = "VocabFile")]
pub struct Vocabulary {
    columns: Vec<ColumnTable>,
    index: Vec<HashMap<String, usize>>,
}

impl From<Vocabulary> for VocabFile {
    fn from(v: Vocabulary) -> Self {
        VocabFile { specials: SPECIAL_NAMES.iter().map(|s| s.to_string()).collect(), columns: v.columns }
    }
}

impl TryFrom<VocabFile> for Vocabulary {
    type Error = Error;

    fn try_from(f: VocabFile) -> Result<Self> {
        if f.specials != SPECIAL_NAMES {
            return Err(Error::data(format!("unexpected special tokens {:?}", f.specials)));
        }
        Vocabulary::from_columns(f.columns)
    }
}

/// Numbers sort numerically ahead of other strings, so quantile bins and
/// calendar fields get ids in their natural order.
fn value_order(a: &str, b: &str) -> Ordering {
    match (a.parse::<f64>(), b.parse::<f64>()) {
        (Ok(x), Ok(y)) => x.partial_cmp(&y).unwrap_or(Ordering::Equal).then_with(|| a.cmp(b)),
        (Ok(_), Err(_)) => Ordering::Less,
        (Err(_), Ok(_)) => Ordering::Greater,
        (Err(_), Err(_)) => a.cmp(b),
    }
}

impl Vocabulary {
    /// Builds one table per column from the given (training) samples.
    pub fn build<'a>(samples: impl IntoIterator<Item = &'a Sample>, field_names: &[String]) -> Result<Self> {
        let mut freq: Vec<BTreeMap<&str, u64>> = vec![BTreeMap::new(); field_names.len()];
        for s in samples {
            for row in &s.fields {
                if row.len() != field_names.len() {
                    return Err(Error::data(format!(
                        "sample of entity {:?} has {} fields, schema has {}",
                        s.entity,
                        row.len(),
                        field_names.len()
                    )));
                }
                for (c, v) in row.iter().enumerate() {
                    *freq[c].entry(v.as_str()).or_insert(0) += 1;
                }
            }
        }
        let mut offset = N_SPECIAL;
        let mut columns = Vec::with_capacity(field_names.len());
        for (name, f) in field_names.iter().zip(freq) {
            let mut values: Vec<&str> = f.keys().copied().collect();
            values.sort_by(|a, b| value_order(a, b));
            let counts = values.iter().map(|v| f[v]).collect();
            let len = values.len();
            columns.push(ColumnTable {
                name: name.clone(),
                offset,
                values: values.into_iter().map(String::from).collect(),
                counts,
            });
            offset += len;
        }
        Vocabulary::from_columns(columns)
    }

    fn from_columns(columns: Vec<ColumnTable>) -> Result<Self> {
        let v = Vocabulary { index: Vec::new(), columns };
        v.validate()?;
        let index = v
            .columns
            .iter()
            .map(|c| c.values.iter().enumerate().map(|(i, s)| (s.clone(), c.offset + i)).collect())
            .collect();
        Ok(Vocabulary { index, ..v })
    }

    /// Checks that column ranges are contiguous, disjoint and after the
    /// specials, and that values within a column are unique.
    pub fn validate(&self) -> Result<()> {
        let mut next = N_SPECIAL;
        for c in &self.columns {
            if c.offset != next {
                return Err(Error::data(format!("column {:?} offset {} expected {next}", c.name, c.offset)));
            }
            if c.counts.len() != c.values.len() {
                return Err(Error::data(format!("column {:?} counts/values length mismatch", c.name)));
            }
            let mut seen = std::collections::HashSet::new();
            if let Some(dup) = c.values.iter().find(|v| !seen.insert(v.as_str())) {
                return Err(Error::data(format!("column {:?} lists {dup:?} twice", c.name)));
            }
            next += c.values.len();
        }
        Ok(())
    }

    /// Total number of ids, specials included.
    pub fn size(&self) -> usize {
        self.columns.last().map_or(N_SPECIAL, |c| c.offset + c.values.len())
    }

    pub fn n_columns(&self) -> usize {
        self.columns.len()
    }

    pub fn columns(&self) -> &[ColumnTable] {
        &self.columns
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c.name == name)
    }

    pub fn column_range(&self, column: usize) -> Range<usize> {
        let c = &self.columns[column];
        c.offset..c.offset + c.values.len()
    }

    /// Global id of `value` in `column`; unseen values map to [UNK].
    pub fn encode(&self, value: &str, column: usize) -> usize {
        self.index[column].get(value).copied().unwrap_or(UNK)
    }

    /// Column and value of a non-special id.
    pub fn decode(&self, id: usize) -> Option<(usize, &str)> {
        if id < N_SPECIAL || id >= self.size() {
            return None;
        }
        let c = self.columns.partition_point(|t| t.offset <= id) - 1;
        let t = &self.columns[c];
        Some((c, t.values[id - t.offset].as_str()))
    }

    /// Column owning a non-special id.
    pub fn column_of(&self, id: usize) -> Option<usize> {
        self.decode(id).map(|(c, _)| c)
    }

    pub fn encode_grid(&self, sample: &Sample, rows: usize) -> Result<TokenGrid> {
        let cols = self.columns.len();
        if sample.fields.len() != rows || sample.fields.iter().any(|r| r.len() != cols) {
            return Err(Error::data(format!(
                "grid of entity {:?} at {} is not {rows}x{cols}",
                sample.entity, sample.window_start
            )));
        }
        let ids = sample
            .fields
            .iter()
            .flat_map(|row| row.iter().enumerate().map(|(c, v)| self.encode(v, c)))
            .collect();
        Ok(TokenGrid { rows, cols, ids, labels: sample.labels.clone() })
    }

    /// Hex SHA-256 of the serialized vocabulary.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("vocabulary serializes");
        let digest = Sha256::digest(&bytes);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// One encoded sample: `rows x cols` ids in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenGrid {
    pub rows: usize,
    pub cols: usize,
    pub ids: Vec<usize>,
    pub labels: Vec<f64>,
}

impl TokenGrid {
    pub fn new(rows: usize, cols: usize, ids: Vec<usize>, labels: Vec<f64>) -> Result<Self> {
        if ids.len() != rows * cols {
            return Err(Error::Shape { op: "token grid", left: vec![rows, cols], right: vec![ids.len()] });
        }
        Ok(TokenGrid { rows, cols, ids, labels })
    }

    pub fn at(&self, r: usize, c: usize) -> usize {
        self.ids[r * self.cols + c]
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }
}
