//! Heads that turn neck features into 3-class quality logits
//! (0 background, 1 missed, 2 mistaken).

use aqs_tensor::{Conv2dOptions, Real, Var};

use crate::config::{ModelConfig, SegBranchInput};
use crate::error::{AqsError, Result};
use crate::layers::{Conv2d, ConvBn, Ctx, Init};

pub const NUM_CLASSES: usize = 3;

/// Shared conv-bn-relu → 1×1 classifier → bilinear upsample.
#[derive(Clone, Debug)]
pub struct ClassifierHead {
    pub conv: ConvBn,
    pub classifier: Conv2d,
}

impl ClassifierHead {
    fn new<T: Real>(init: &mut Init<T>, cin: usize, hidden: usize, eps: f64) -> Result<Self> {
        Ok(Self {
            conv: ConvBn::new(init, "conv", cin, hidden, 3, Conv2dOptions::same(3, 1), eps)?,
            classifier: Conv2d::new(init, "classifier", hidden, NUM_CLASSES, 1, Conv2dOptions::default(), true)?,
        })
    }

    fn forward<T: Real>(&self, ctx: &mut Ctx<T>, x: Var, h: usize, w: usize) -> Result<Var> {
        let y = self.conv.forward(ctx, x, true)?;
        let y = self.classifier.forward(ctx, y)?;
        Ok(ctx.tape.bilinear_resize(y, h, w)?)
    }
}

/// Channel attention followed by spatial attention.
#[derive(Clone, Debug)]
pub struct Csam {
    pub fc1: Conv2d,
    pub fc2: Conv2d,
    pub spatial: Conv2d,
}

impl Csam {
    pub fn new<T: Real>(init: &mut Init<T>, name: &str, channels: usize, reduction: usize) -> Result<Self> {
        let hidden = (channels / reduction).max(1);
        init.scoped(name, |init| {
            Ok(Self {
                fc1: Conv2d::new(init, "fc1", channels, hidden, 1, Conv2dOptions::default(), true)?,
                fc2: Conv2d::new(init, "fc2", hidden, channels, 1, Conv2dOptions::default(), true)?,
                spatial: Conv2d::new(init, "spatial", 2, 1, 7, Conv2dOptions::same(7, 1), true)?,
            })
        })
    }

    fn mlp<T: Real>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let y = self.fc1.forward(ctx, x)?;
        let y = ctx.tape.relu(y)?;
        self.fc2.forward(ctx, y)
    }

    /// The (B, C, 1, 1) channel multiplier.
    pub fn channel_weights<T: Real>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let t = &mut ctx.tape;
        let avg = t.global_avg_pool(x)?;
        let max = t.max_axis(x, 3)?;
        let max = t.max_axis(max, 2)?;
        let a = self.mlp(ctx, avg)?;
        let m = self.mlp(ctx, max)?;
        let s = ctx.tape.add(a, m)?;
        Ok(ctx.tape.sigmoid(s)?)
    }

    /// The (B, 1, H, W) spatial multiplier.
    pub fn spatial_weights<T: Real>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let t = &mut ctx.tape;
        let avg = t.mean_axis(x, 1)?;
        let max = t.max_axis(x, 1)?;
        let cat = t.concat(&[avg, max], 1)?;
        let s = self.spatial.forward(ctx, cat)?;
        Ok(ctx.tape.sigmoid(s)?)
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let cw = self.channel_weights(ctx, x)?;
        let x = ctx.tape.mul(x, cw)?;
        let sw = self.spatial_weights(ctx, x)?;
        Ok(ctx.tape.mul(x, sw)?)
    }
}

/// Multi-scale feature-difference decoder.
#[derive(Clone, Debug)]
pub struct AqsDecoder {
    /// Four stride-2 conv-bn-relu layers; S1, S2, S3 are the outputs of the
    /// second, third and fourth.
    pub seg_branch: [ConvBn; 4],
    pub csam: [Csam; 3],
    pub head: ClassifierHead,
    pub input: SegBranchInput,
}

impl AqsDecoder {
    pub fn new<T: Real>(init: &mut Init<T>, cfg: &ModelConfig) -> Result<Self> {
        let c = cfg.stage_channels;
        let eps = cfg.bn_eps;
        let cin = match cfg.seg_branch_input {
            SegBranchInput::Mask => 1,
            SegBranchInput::MaskAndImage => 4,
        };
        init.scoped("aqsd", |init| {
            let ladder = [(cin, (c[0] / 2).max(1)), ((c[0] / 2).max(1), c[0]), (c[0], c[1]), (c[1], c[2])];
            let seg = ladder
                .iter()
                .enumerate()
                .map(|(i, &(a, b))| ConvBn::new(init, &format!("seg{}", i + 1), a, b, 3, Conv2dOptions::new(2, 1, 1), eps))
                .collect::<Result<Vec<_>>>()?;
            let csam = (0..3)
                .map(|i| Csam::new(init, &format!("csam{}", i + 1), c[i], cfg.csam_reduction))
                .collect::<Result<Vec<_>>>()?;
            let head = init.scoped("head", |init| ClassifierHead::new(init, c[0] + c[1] + c[2], c[0], eps))?;
            Ok(Self { seg_branch: seg.try_into().unwrap(), csam: csam.try_into().unwrap(), head, input: cfg.seg_branch_input })
        })
    }

    /// S1..S3 from the mask (and, if configured, the image).
    pub fn seg_features<T: Real>(&self, ctx: &mut Ctx<T>, image: Var, mask: Var) -> Result<[Var; 3]> {
        if !ctx.tape.is_shape_only() && ctx.tape.data(mask).iter().any(|&v| v != T::zero() && v != T::one()) {
            return Err(AqsError::Validation("segmentation mask values must be 0 or 1".into()));
        }
        let mut x = match self.input {
            SegBranchInput::Mask => mask,
            SegBranchInput::MaskAndImage => ctx.tape.concat(&[image, mask], 1)?,
        };
        let mut out = Vec::with_capacity(3);
        for (i, layer) in self.seg_branch.iter().enumerate() {
            x = layer.forward(ctx, x, true)?;
            if i > 0 {
                out.push(x);
            }
        }
        Ok(out.try_into().unwrap())
    }

    /// D_i = S_i − N_i.
    pub fn differences<T: Real>(&self, ctx: &mut Ctx<T>, seg: [Var; 3], neck: &[Var; 4]) -> Result<[Var; 3]> {
        let mut d = seg;
        for i in 0..3 {
            let (a, b) = (ctx.tape.dims(seg[i]), ctx.tape.dims(neck[i]));
            if a != b {
                return Err(AqsError::Validation(format!("scale 1/{}: segmentation features {a:?} vs fusion features {b:?}", 4 << i)));
            }
            d[i] = ctx.tape.sub(seg[i], neck[i])?;
        }
        Ok(d)
    }

    /// CSAM on each difference map, then the classifier at 1/4 scale.
    pub fn classify<T: Real>(&self, ctx: &mut Ctx<T>, diffs: [Var; 3], h: usize, w: usize) -> Result<Var> {
        let mut enhanced = Vec::with_capacity(3);
        for (csam, &d) in self.csam.iter().zip(&diffs) {
            enhanced.push(csam.forward(ctx, d)?);
        }
        let d1 = ctx.tape.dims(enhanced[0]).to_vec();
        for e in &mut enhanced[1..] {
            *e = ctx.tape.bilinear_resize(*e, d1[2], d1[3])?;
        }
        let cat = ctx.tape.concat(&enhanced, 1)?;
        self.head.forward(ctx, cat, h, w)
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<T>, image: Var, mask: Var, neck: &[Var; 4]) -> Result<Var> {
        let d = ctx.tape.dims(mask).to_vec();
        if !d[2].is_multiple_of(16) || !d[3].is_multiple_of(16) {
            return Err(AqsError::Validation(format!("decoder mask extent {}x{} is not divisible by 16", d[2], d[3])));
        }
        let seg = self.seg_features(ctx, image, mask)?;
        let diffs = self.differences(ctx, seg, neck)?;
        self.classify(ctx, diffs, d[2], d[3])
    }
}

/// 3×3 conv + 1×1 conv on N1; stands in for a full segmentation decoder in
/// the ablation rows without the difference decoder.
#[derive(Clone, Debug)]
pub struct PlainHead {
    pub head: ClassifierHead,
}

impl PlainHead {
    pub fn new<T: Real>(init: &mut Init<T>, cfg: &ModelConfig) -> Result<Self> {
        let c = cfg.stage_channels[0];
        Ok(Self { head: init.scoped("head", |init| ClassifierHead::new(init, c, c, cfg.bn_eps))? })
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<T>, n1: Var, h: usize, w: usize) -> Result<Var> {
        self.head.forward(ctx, n1, h, w)
    }
}

#[derive(Clone, Debug)]
pub enum Decoder {
    Plain(PlainHead),
    Aqs(Box<AqsDecoder>),
}
