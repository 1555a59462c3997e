//! Numerical substrate: a define-by-run reverse-mode tape over dense `f64`
//! tensors, the layers built on it, Adam, finite-difference checking and a
//! named-tensor checkpoint format.

pub mod adam;
pub mod checkpoint;
mod error;
mod gemm;
pub mod gradcheck;
pub mod nn;
pub mod params;
pub mod tape;
pub mod tensor;

pub use adam::{adam_update, AdamConfig, AdamState, Moments};
pub use error::{NumError, Result};
pub use gradcheck::{grad_check, grad_check_params};
pub use params::{ParamGrads, ParamId, ParamStore};
pub use tape::{Conv3dGeom, Gradients, Tape, Var};
pub use tensor::Tensor;
