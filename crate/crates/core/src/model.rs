//! The assembled network: ResNet-lite + frozen ViT-lite → neck → head.

use std::io::{Read, Write};

use aqs_tensor::{weights, ParamStore, Real, Tape, Tensor, Var};

use crate::backbone::{FeaturePyramid, ResNetLite, VitLite};
use crate::config::{DecoderKind, ModelConfig};
use crate::decoder::{AqsDecoder, Decoder, PlainHead, NUM_CLASSES};
use crate::error::{AqsError, Result};
use crate::layers::{Ctx, Init, Mode};
use crate::neck::Neck;

/// Name prefixes of every parameter group, in file order.
pub const PARAM_PREFIXES: [&str; 6] = ["resnet.", "vit.", "neck.", "aux_head.", "aqsd.", "head."];

/// Seed for one component, derived from the model seed so that each
/// component's initial values do not depend on which others exist.
fn component_seed(seed: u64, component: u64) -> u64 {
    seed.wrapping_add(component.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

#[derive(Clone, Copy, Debug)]
pub struct ModelOutput {
    pub logits: Var,
    pub aux: Option<Var>,
    pub resnet: FeaturePyramid,
    pub vit: Option<FeaturePyramid>,
    pub neck: [Var; 4],
}

#[derive(Clone, Debug)]
pub struct AqsNet<T: Real = f32> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub resnet: ResNetLite,
    pub vit: Option<VitLite>,
    pub neck: Neck,
    pub decoder: Decoder,
}

impl<T: Real> AqsNet<T> {
    pub fn new(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let seed = config.seed;
        let mut init = Init::new(&mut store, seed);
        init.reseed(component_seed(seed, 1));
        let resnet = ResNetLite::new(&mut init, config.stage_channels, config.resnet_blocks, config.bn_eps)?;
        let vit = if config.pretrained_fusion { Some(VitLite::new(&mut init, &config.vit, component_seed(seed, 2))?) } else { None };
        init.reseed(component_seed(seed, 3));
        let neck = Neck::new(&mut init, config)?;
        init.reseed(component_seed(seed, 4));
        let decoder = match config.decoder {
            DecoderKind::Plain => Decoder::Plain(PlainHead::new(&mut init, config)?),
            DecoderKind::Aqs => Decoder::Aqs(Box::new(AqsDecoder::new(&mut init, config)?)),
        };
        Ok(Self { config: config.clone(), store, resnet, vit, neck, decoder })
    }

    /// `image` is (B, 3, H, W) in [0, 1]; `mask` is (B, 1, H, W) in {0, 1}.
    pub fn forward(&self, ctx: &mut Ctx<T>, image: Var, mask: Var) -> Result<ModelOutput> {
        self.forward_with_vit(ctx, image, mask, None)
    }

    /// As [`forward`](Self::forward), optionally taking precomputed ViT stage
    /// maps instead of running the frozen encoder.
    pub fn forward_with_vit(&self, ctx: &mut Ctx<T>, image: Var, mask: Var, vit_maps: Option<[Var; 4]>) -> Result<ModelOutput> {
        let (id, md) = (ctx.tape.dims(image).to_vec(), ctx.tape.dims(mask).to_vec());
        if id.len() != 4 || md.len() != 4 || md[1] != 1 || id[0] != md[0] || id[2..] != md[2..] {
            return Err(AqsError::Validation(format!("image {id:?} and mask {md:?} must be (B, 3, H, W) and (B, 1, H, W)")));
        }
        if !ctx.tape.is_shape_only() && ctx.tape.data(mask).iter().any(|&v| v != T::zero() && v != T::one()) {
            return Err(AqsError::Validation("segmentation mask values must be 0 or 1".into()));
        }
        let (h, w) = (id[2], id[3]);
        let input = ctx.tape.concat(&[image, mask], 1)?;
        let resnet = self.resnet.forward(ctx, input)?;
        resnet.check(&ctx.tape, id[0], h, w)?;
        let vit = match (&self.vit, vit_maps) {
            (None, _) => None,
            (Some(v), None) => Some(v.forward(ctx, image)?),
            (Some(v), Some(stages)) => {
                let d = v.config().embed_dim;
                Some(FeaturePyramid { stages, scales: [16; 4], channels: [d; 4] })
            }
        };
        if let Some(v) = &vit {
            v.check(&ctx.tape, id[0], h, w)?;
        }
        let neck = self.neck.forward(ctx, &resnet, vit.as_ref(), h, w)?;
        let logits = match &self.decoder {
            Decoder::Plain(p) => p.forward(ctx, neck.maps[0], h, w)?,
            Decoder::Aqs(d) => d.forward(ctx, image, mask, &neck.maps)?,
        };
        Ok(ModelOutput { logits, aux: neck.aux, resnet, vit, neck: neck.maps })
    }

    /// Per-pixel argmax labels in eval mode, laid out (B, H, W).
    pub fn predict(&self, image: &Tensor<T>, mask: &Tensor<T>) -> Result<Vec<u8>> {
        let mut ctx = Ctx::with_tape(&self.store, Mode::Eval, Tape::new().without_grad());
        let (i, m) = (ctx.tape.input(image.clone()), ctx.tape.input(mask.clone()));
        let out = self.forward(&mut ctx, i, m)?;
        Ok(argmax_labels(&ctx.tape.value(out.logits)))
    }

    /// Runs the frozen encoder alone; the maps can be fed back through
    /// [`forward_with_vit`](Self::forward_with_vit).
    pub fn vit_features(&self, image: &Tensor<T>) -> Result<Option<[Tensor<T>; 4]>> {
        let Some(vit) = &self.vit else { return Ok(None) };
        let mut ctx = Ctx::with_tape(&self.store, Mode::Eval, Tape::new().without_grad());
        let i = ctx.tape.input(image.clone());
        let p = vit.forward(&mut ctx, i)?;
        Ok(Some(p.stages.map(|v| ctx.tape.value(v))))
    }
}

impl AqsNet<f32> {
    pub fn save<W: Write>(&self, w: W) -> Result<()> {
        Ok(weights::write(w, &self.store)?)
    }

    /// Builds the network for `config` and overwrites every parameter from an
    /// AQSW stream.
    pub fn load<R: Read>(config: &ModelConfig, r: R) -> Result<Self> {
        let mut net = Self::new(config)?;
        let tensors = weights::read(r)?;
        net.load_tensors(tensors, &PARAM_PREFIXES)?;
        Ok(net)
    }

    /// Copies every tensor whose name matches a parameter; parameters under
    /// `required` prefixes must all be present. `["vit."]` supplies external
    /// frozen-encoder weights.
    pub fn load_tensors(&mut self, tensors: Vec<(String, Tensor<f32>)>, required: &[&str]) -> Result<usize> {
        Ok(weights::load_into(&mut self.store, tensors, required)?)
    }
}

/// Argmax over the class axis of (B, 3, H, W) logits.
pub fn argmax_labels<T: Real>(logits: &Tensor<T>) -> Vec<u8> {
    let d = logits.dims();
    let (b, c, hw) = (d[0], d[1], d[2] * d[3]);
    debug_assert_eq!(c, NUM_CLASSES);
    let x = logits.data();
    let mut out = Vec::with_capacity(b * hw);
    for n in 0..b {
        for p in 0..hw {
            let mut best = 0;
            for k in 1..c {
                if x[(n * c + k) * hw + p] > x[(n * c + best) * hw + p] {
                    best = k;
                }
            }
            out.push(best as u8);
        }
    }
    out
}
