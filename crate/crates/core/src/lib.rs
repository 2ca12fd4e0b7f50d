//! Numeric core for dynamic token normalization.
//!
//! The crate is organized around a small dense `Tensor` type and a
//! reverse-mode `Tape`. On top of those sit the normalizer family
//! (layer, inter-token, and the unified dynamic variant), positional
//! attention over patch grids, an analytic complexity model, and the
//! analysis metrics used to inspect trained models.

pub mod analysis;
pub mod autodiff;
pub mod complexity;
pub mod dtn;
pub mod error;
pub mod grid;
pub mod norm;
pub mod tensor;

pub use error::CoreError;
pub use tensor::{Tensor, TokenTensor};
