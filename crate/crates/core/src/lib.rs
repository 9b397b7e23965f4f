//! Multi-stream transformer with per-modality low-rank experts, cross-modal
//! gated attention, a convolutional low-level adapter and a routed mixture of
//! heads, plus the synthetic forgery corpus and training loops it is studied on.

pub mod data;
pub mod adapter;
pub mod backbone;
pub mod error;
pub mod extract;
pub mod gradcheck;
pub mod model;
pub mod nn;
pub mod param;
pub mod router;
pub mod tape;
pub mod tensor;
pub mod train;
mod wire;

pub use error::{Error, Result};
pub use param::{Param, ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{matmul, DType, Real, Tensor};
