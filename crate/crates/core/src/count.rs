//! Parameter totals and multiply-accumulate estimates.

use aqs_tensor::{ParamKind, Tape};
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::Result;
use crate::layers::{Ctx, Mode};
use crate::model::AqsNet;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelCounts {
    pub trainable: usize,
    pub frozen: usize,
    /// Running batch-norm statistics; not parameters in the learned sense.
    pub buffers: usize,
    /// Multiply-accumulates of one forward pass at `input` (batch 1).
    pub macs: u64,
    pub input: [usize; 2],
}

impl ModelCounts {
    pub fn params(&self) -> usize {
        self.trainable + self.frozen
    }
}

/// Counts for `cfg` at an `h × w` input; the forward pass only propagates
/// shapes.
pub fn count_params_flops(cfg: &ModelConfig, h: usize, w: usize) -> Result<ModelCounts> {
    let net = AqsNet::<f32>::new(cfg)?;
    let s = &net.store;
    let mut ctx = Ctx::with_tape(s, Mode::Eval, Tape::shape_only());
    let image = ctx.tape.placeholder(&[1, 3, h, w]);
    let mask = ctx.tape.placeholder(&[1, 1, h, w]);
    net.forward(&mut ctx, image, mask)?;
    Ok(ModelCounts {
        trainable: s.count(Some(ParamKind::Trainable)),
        frozen: s.count(Some(ParamKind::Frozen)),
        buffers: s.count(Some(ParamKind::Buffer)),
        macs: ctx.tape.macs(),
        input: [h, w],
    })
}
