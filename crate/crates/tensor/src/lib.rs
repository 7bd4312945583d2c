//! Deterministic CPU tensor engine with reverse-mode automatic differentiation.
//!
//! Values live on a [`Tape`]; every op records what it needs for its backward
//! rule, and [`Tape::backward`] sweeps the record in reverse. Model parameters
//! sit in a [`ParamStore`] and are bound onto a fresh tape for each step.

pub mod attention;
pub mod error;
pub mod gradcheck;
pub mod ops;
pub mod optim;
pub mod params;
pub mod real;
pub mod tape;
pub mod tensor;
pub mod weights;

pub use attention::{AttentionOutput, AttentionVars};
pub use error::{Result, TensorError};
pub use ops::conv::{conv_out_extent, Conv2dOptions};
pub use ops::norm::BatchStats;
pub use optim::{AdamConfig, OptimizerState};
pub use params::{ParamId, ParamKind, ParamStore};
pub use real::Real;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
