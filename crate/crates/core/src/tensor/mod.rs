//! Deterministic numeric substrate: dense tensors, a reverse-mode tape,
//! a parameter registry, AdamW and seeded random streams.

mod dense;
mod graph;
mod optim;
mod params;
mod real;
pub mod rng;

pub use dense::Tensor;
pub use graph::{Graph, Var};
pub use optim::{AdamW, AdamWConfig};
pub use params::{Param, ParamId, ParamStore};
pub use real::Real;
pub use rng::{Rng, RngState};

#[cfg(test)]
mod tests;
