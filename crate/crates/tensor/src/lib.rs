//! Small reverse-mode differentiable array layer.
//!
//! Provides exactly the primitives the folding model needs: dense linear
//! algebra on row-major tensors, normalization, multi-head attention with
//! rotary encodings, pooling/broadcast between atom and residue tokens, plus
//! AdamW, parameter EMA and a binary checkpoint format.

pub mod checkpoint;
mod error;
pub mod fourier;
pub mod gradcheck;
mod graph;
pub mod nn;
pub mod optim;
mod params;
pub mod rope;
mod scalar;
mod tensor;

pub use checkpoint::Checkpoint;
pub use error::{Result, TensorError};
pub use graph::{CustomOp, Graph, Var};
pub use params::{Init, ParamTree};
pub use rope::{RopeFreqs, RopeTable};
pub use scalar::Scalar;
pub use tensor::Tensor;
