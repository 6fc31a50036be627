//! Dense row-major tensors with a define-by-run autodiff tape.
//!
//! The engine is deliberately small: a [`Graph`] records every operation as a
//! node holding its forward value and a backward closure. Parameters live in a
//! [`ParamStore`] outside the graph so that one store can be evaluated by many
//! graphs (one per step) and cast between `f32` and `f64`.

mod gemm;
pub mod gradcheck;
mod graph;
pub mod layers;
mod ops;
pub mod optim;
mod param;
mod tensor;

pub use graph::{BackCtx, Gradients, Graph, Var};
pub use ops::conv::ConvGeometry;
pub use param::{Init, ParamBuilder, ParamEntry, ParamId, ParamStore};
pub use tensor::{Float, Tensor};
