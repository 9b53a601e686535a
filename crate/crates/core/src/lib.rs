//! Hierarchical patch-graph image encoder.
//!
//! An image is split into multi-level patches, each patch is described by `k`
//! independent CNN feature extractors, a query-conditioned softmax gate mixes
//! those descriptions, position/scale encodings are added, and a stack of
//! attention layers refines the resulting patch graph. The encoder is trained
//! by reconstructing masked regions of the input.

pub mod aggregator;
pub mod autodiff;
pub mod checks;
pub mod checkpoint;
pub mod encoding;
pub mod error;
pub mod extractor;
pub mod gradcheck;
pub mod graph;
pub mod image;
pub mod kernels;
pub mod nn;
pub mod optim;
pub mod params;
pub mod patches;
pub mod pretext;
pub mod rng;
pub mod tensor;
pub mod train;

pub use autodiff::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use params::{ParamId, Parameter, Params};
pub use rng::Rng;
pub use tensor::{Scalar, Tensor};
