//! Local relation networks on the CPU: tensors, the local relation layer, network
//! builders, cost accounting and a small training harness.

pub mod cost;
pub mod error;
pub mod gradcheck;
pub mod local_relation;
pub mod model;
pub mod ops;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Element, Shape, Tensor};
