//! Numerics substrate: dense `f64` tensors, a reverse-mode tape over a small
//! operation inventory, AdamW, finite-difference gradient checks, counter-based
//! random streams and the HBT1 tensor file format.

mod error;
pub mod gradcheck;
pub mod hbt;
pub mod ops;
pub mod optim;
mod param;
pub mod rng;
mod tape;
mod tensor;

pub use error::{NumError, Result};
pub use gradcheck::{grad_check, grad_check_coords, op_suite, GradCheckReport, SuiteCase};
pub use optim::{AdamWConfig, OptimState, StepOutcome};
pub use param::{ParamStore, Parameter};
pub use rng::{Stream, StreamKey};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
