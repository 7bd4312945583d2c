//! The two feature extractors: a trainable 4-channel residual encoder and a
//! frozen transformer encoder.

mod resnet;
mod vit;

pub use resnet::{BasicBlock, ResNetLite, RESNET_INPUT_CHANNELS};
pub use vit::{VitBlock, VitLite};

use aqs_tensor::{Real, Tape, Var};

use crate::error::{AqsError, Result};

/// Four stage maps with their declared downscale factor and channel count.
#[derive(Clone, Copy, Debug)]
pub struct FeaturePyramid {
    pub stages: [Var; 4],
    pub scales: [usize; 4],
    pub channels: [usize; 4],
}

impl FeaturePyramid {
    /// Checks every stage against `input_h × input_w` divided by its scale.
    pub fn check<T: Real>(&self, tape: &Tape<T>, batch: usize, input_h: usize, input_w: usize) -> Result<()> {
        for (i, ((&v, &s), &c)) in self.stages.iter().zip(&self.scales).zip(&self.channels).enumerate() {
            let want = [batch, c, input_h / s, input_w / s];
            if tape.dims(v) != want {
                return Err(AqsError::Validation(format!(
                    "pyramid stage {} has dims {:?}, expected {want:?}",
                    i + 1,
                    tape.dims(v)
                )));
            }
        }
        Ok(())
    }
}
