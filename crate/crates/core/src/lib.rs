//! Segmentation quality assessment for interactive building segmentation.
//!
//! A trainable 4-channel residual encoder (image + mask) is fused with a
//! frozen transformer encoder; a feature-difference decoder then labels each
//! pixel background, missed or mistaken.

pub mod backbone;
pub mod config;
pub mod count;
pub mod data;
pub mod decoder;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod neck;
pub mod train;

pub use config::{Ablation, AuxSource, DecoderKind, ModelConfig, SegBranchInput, VitConfig};
pub use error::{AqsError, Result};
pub use model::{AqsNet, ModelOutput};
