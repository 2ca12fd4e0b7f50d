//! Toy transformer harness for exercising the dynamic normalizer:
//! synthetic patch-grid tasks, a small pre-norm encoder stack, and a
//! deterministic training loop with mixing-weight traces.

pub mod error;
pub mod model;
pub mod tasks;
pub mod train;

pub use error::ToyError;
