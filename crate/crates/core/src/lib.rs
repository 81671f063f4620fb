//! Diffusion-augmented invariant risk minimization for spatiotemporal
//! prediction over graphs.

// numeric kernels index several buffers in lockstep; NaN-rejecting checks use negated comparisons
#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord, clippy::too_many_arguments)]

pub mod config;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod gradcheck;
pub mod gradsuite;
pub mod graph;
pub mod io;
pub mod mask;
pub mod nn;
pub mod objectives;
pub mod optim;
pub mod params;
pub mod predictor;
pub mod scm;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use graph::Graph;
pub use params::ParamSet;
pub use tensor::{Activation, Tape, Tensor, Var};
