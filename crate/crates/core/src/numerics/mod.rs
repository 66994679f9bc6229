//! Dense tensors, reverse-mode autodiff, seeded random streams and the ODT1
//! tensor file format.

mod float;
mod graph;
pub mod odt;
pub mod rng;
mod tensor;

pub use float::{DType, Float};
pub use graph::{Graph, RowPattern, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
