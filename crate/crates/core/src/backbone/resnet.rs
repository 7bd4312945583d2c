use aqs_tensor::{Conv2dOptions, Real, Var};

use super::FeaturePyramid;
use crate::error::{AqsError, Result};
use crate::layers::{ConvBn, Ctx, Init};

/// RGB plus the binary segmentation mask.
pub const RESNET_INPUT_CHANNELS: usize = 4;

/// Two 3×3 conv-bn layers with an identity or projected shortcut.
#[derive(Clone, Debug)]
pub struct BasicBlock {
    conv1: ConvBn,
    conv2: ConvBn,
    downsample: Option<ConvBn>,
}

impl BasicBlock {
    fn new<T: Real>(init: &mut Init<T>, name: &str, cin: usize, cout: usize, stride: usize, eps: f64) -> Result<Self> {
        init.scoped(name, |init| {
            let downsample = if stride != 1 || cin != cout {
                Some(ConvBn::new(init, "downsample", cin, cout, 1, Conv2dOptions::new(stride, 0, 1), eps)?)
            } else {
                None
            };
            Ok(Self {
                conv1: ConvBn::new(init, "conv1", cin, cout, 3, Conv2dOptions::new(stride, 1, 1), eps)?,
                conv2: ConvBn::new(init, "conv2", cout, cout, 3, Conv2dOptions::same(3, 1), eps)?,
                downsample,
            })
        })
    }

    fn forward<T: Real>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let y = self.conv1.forward(ctx, x, true)?;
        let y = self.conv2.forward(ctx, y, false)?;
        let shortcut = match &self.downsample {
            Some(d) => d.forward(ctx, x, false)?,
            None => x,
        };
        let sum = ctx.tape.add(y, shortcut)?;
        Ok(ctx.tape.relu(sum)?)
    }
}

/// Residual encoder with a 4-channel stem and no classifier head. Stages sit
/// at 1/4, 1/8, 1/16 and 1/32 of the input.
#[derive(Clone, Debug)]
pub struct ResNetLite {
    stem: ConvBn,
    layers: Vec<Vec<BasicBlock>>,
    channels: [usize; 4],
}

impl ResNetLite {
    pub fn new<T: Real>(init: &mut Init<T>, channels: [usize; 4], blocks: usize, eps: f64) -> Result<Self> {
        init.scoped("resnet", |init| {
            let stem = ConvBn::new(init, "stem", RESNET_INPUT_CHANNELS, channels[0], 7, Conv2dOptions::new(2, 3, 1), eps)?;
            let mut layers = Vec::with_capacity(4);
            let mut cin = channels[0];
            for (i, &cout) in channels.iter().enumerate() {
                let stride = if i == 0 { 1 } else { 2 };
                let stage = init.scoped(&format!("layer{}", i + 1), |init| {
                    (0..blocks)
                        .map(|b| BasicBlock::new(init, &b.to_string(), if b == 0 { cin } else { cout }, cout, if b == 0 { stride } else { 1 }, eps))
                        .collect::<Result<Vec<_>>>()
                })?;
                layers.push(stage);
                cin = cout;
            }
            Ok(Self { stem, layers, channels })
        })
    }

    pub fn channels(&self) -> [usize; 4] {
        self.channels
    }

    /// `input` is (B, 4, H, W) with H and W divisible by 32.
    pub fn forward<T: Real>(&self, ctx: &mut Ctx<T>, input: Var) -> Result<FeaturePyramid> {
        let dims = ctx.tape.dims(input).to_vec();
        let [_, c, h, w] = dims[..] else {
            return Err(AqsError::Validation(format!("ResNet-lite input must be (B, C, H, W), got {dims:?}")));
        };
        if c != RESNET_INPUT_CHANNELS {
            return Err(AqsError::Validation(format!(
                "ResNet-lite takes {RESNET_INPUT_CHANNELS} input channels (RGB image + segmentation mask), got {c}"
            )));
        }
        if h % 32 != 0 || w % 32 != 0 {
            return Err(AqsError::Validation(format!("ResNet-lite input extent {h}x{w} is not divisible by 32")));
        }
        let x = self.stem.forward(ctx, input, true)?;
        let mut x = ctx.tape.max_pool2d(x, 3, 2, 1)?;
        let mut stages = Vec::with_capacity(4);
        for layer in &self.layers {
            for block in layer {
                x = block.forward(ctx, x)?;
            }
            stages.push(x);
        }
        Ok(FeaturePyramid { stages: stages.try_into().unwrap(), scales: [4, 8, 16, 32], channels: self.channels })
    }
}
