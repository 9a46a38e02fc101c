//! Spatio-temporal transformer for clip classification: a small tape-based
//! autodiff core, the factorized spatial/temporal attention model, the
//! compact softmax cross-entropy loss and a training harness.

pub mod embed;
pub mod error;
pub mod exec;
pub mod harness;
pub mod loss;
pub mod stt;
pub mod tensor;

pub use error::{Error, Result};
