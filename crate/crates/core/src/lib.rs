//! Workbench for transformer attention layouts over tabular time-series.
//!
//! A sample is a window of `R` consecutive rows of one entity with `C`
//! fields per row. Five layouts are provided: a flattened single-stage
//! encoder (`ft_flat`), row/column averaged contextualization (`tabbie`),
//! row- and column-based two-stage encoders (`tabbert_row`, `tabbert_col`),
//! and the field-based two-stage encoder (`fieldy`) whose first stage runs a
//! row-context and a column-context encoder side by side, fuses them per
//! field, and whose second stage attends across all fields of the window.
//!
//! The crate also contains the data preparation pipeline, masked-token
//! pretraining, fine-tuning, metrics and the cross-row `Hour` probe.

pub mod arch;
pub mod dataprep;
mod error;
pub mod eval;
pub mod gradcheck;
pub mod tensor;
pub mod train;
pub mod vocab;

pub use error::{Error, Result};
