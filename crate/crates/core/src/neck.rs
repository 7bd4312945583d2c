//! Fusion of the two pyramids: channel alignment, per-stage fuse blocks,
//! ASPP on the deepest map, top-down fusion and the auxiliary classifier.

use aqs_tensor::{Conv2dOptions, Real, Var};

use crate::backbone::FeaturePyramid;
use crate::config::ModelConfig;
use crate::error::{AqsError, Result};
use crate::layers::{Conv2d, ConvBn, Ctx, Init};

/// Neck scales relative to the input; N3 and N4 share 1/16.
pub const NECK_SCALES: [usize; 4] = [4, 8, 16, 16];

/// y = relu(bn(conv3(x))); out = relu(bn(conv3(y)) + proj1(x)).
#[derive(Clone, Debug)]
pub struct FuseBlock {
    conv1: ConvBn,
    conv2: ConvBn,
    proj: Conv2d,
}

impl FuseBlock {
    pub fn new<T: Real>(init: &mut Init<T>, name: &str, cin: usize, cout: usize, eps: f64) -> Result<Self> {
        init.scoped(name, |init| {
            Ok(Self {
                conv1: ConvBn::new(init, "conv1", cin, cout, 3, Conv2dOptions::same(3, 1), eps)?,
                conv2: ConvBn::new(init, "conv2", cout, cout, 3, Conv2dOptions::same(3, 1), eps)?,
                proj: Conv2d::new(init, "proj", cin, cout, 1, Conv2dOptions::default(), false)?,
            })
        })
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let y = self.conv1.forward(ctx, x, true)?;
        let y = self.conv2.forward(ctx, y, false)?;
        let p = self.proj.forward(ctx, x)?;
        let s = ctx.tape.add(y, p)?;
        Ok(ctx.tape.relu(s)?)
    }
}

/// Dilated 3×3 branches, an image-pooling branch and a 1×1 merge.
#[derive(Clone, Debug)]
pub struct Aspp {
    pub branches: Vec<ConvBn>,
    pub rates: Vec<usize>,
    pub pool: Conv2d,
    pub merge: ConvBn,
}

impl Aspp {
    pub fn new<T: Real>(init: &mut Init<T>, name: &str, channels: usize, rates: &[usize], eps: f64) -> Result<Self> {
        let inner = (channels / 4).max(1);
        init.scoped(name, |init| {
            let branches = rates
                .iter()
                .enumerate()
                .map(|(i, &r)| ConvBn::new(init, &format!("branch{i}"), channels, inner, 3, Conv2dOptions::same(3, r), eps))
                .collect::<Result<Vec<_>>>()?;
            let pool = Conv2d::new(init, "pool", channels, inner, 1, Conv2dOptions::default(), true)?;
            let merge = ConvBn::new(init, "merge", inner * (rates.len() + 1), channels, 1, Conv2dOptions::default(), eps)?;
            Ok(Self { branches, rates: rates.to_vec(), pool, merge })
        })
    }

    /// Dilation actually used for a map of extent `h × w`: a rate at or
    /// beyond the extent only ever samples padding off-centre, so it is
    /// clamped to `max(h, w) - 1` (and at least 1).
    pub fn effective_rate(rate: usize, h: usize, w: usize) -> usize {
        rate.min(h.max(w).saturating_sub(1)).max(1)
    }

    pub fn branch<T: Real>(&self, ctx: &mut Ctx<T>, i: usize, x: Var) -> Result<Var> {
        let d = ctx.tape.dims(x).to_vec();
        let r = Self::effective_rate(self.rates[i], d[2], d[3]);
        let b = &self.branches[i];
        let w = ctx.param(b.conv.weight);
        let y = ctx.tape.conv2d(x, w, None, Conv2dOptions::same(3, r))?;
        let y = b.bn.forward(ctx, y)?;
        Ok(ctx.tape.relu(y)?)
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let d = ctx.tape.dims(x).to_vec();
        let mut parts = (0..self.branches.len()).map(|i| self.branch(ctx, i, x)).collect::<Result<Vec<_>>>()?;
        let t = &mut ctx.tape;
        let g = t.global_avg_pool(x)?;
        let g = self.pool.forward(ctx, g)?;
        let g = ctx.tape.relu(g)?;
        parts.push(ctx.tape.bilinear_resize(g, d[2], d[3])?);
        let cat = ctx.tape.concat(&parts, 1)?;
        self.merge.forward(ctx, cat, true)
    }
}

/// N1..N4 plus the auxiliary logits when enabled.
#[derive(Clone, Copy, Debug)]
pub struct NeckOutput {
    pub maps: [Var; 4],
    pub aux: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct Neck {
    /// 1×1 ViT→stage alignment and per-stage fuse blocks; absent without PIF.
    pub align: Option<[Conv2d; 4]>,
    pub stage_fuse: Option<[FuseBlock; 4]>,
    pub aspp: Aspp,
    /// Top-down blocks producing N3, N2, N1 (index 0 is N1).
    pub top_down: [FuseBlock; 3],
    pub aux_head: Option<Conv2d>,
    channels: [usize; 4],
    aux_from_finest: bool,
}

impl Neck {
    pub fn new<T: Real>(init: &mut Init<T>, cfg: &ModelConfig) -> Result<Self> {
        let c = cfg.stage_channels;
        let d = cfg.vit.embed_dim;
        let eps = cfg.bn_eps;
        let aux_from_finest = cfg.aux_source == crate::config::AuxSource::Finest;
        let (align, stage_fuse, aspp, top_down) = init.scoped("neck", |init| {
            let (align, stage_fuse) = if cfg.pretrained_fusion {
                let align = (0..4)
                    .map(|i| Conv2d::new(init, &format!("align{}", i + 1), d, c[i], 1, Conv2dOptions::default(), true))
                    .collect::<Result<Vec<_>>>()?;
                let fuse = (0..4)
                    .map(|i| FuseBlock::new(init, &format!("fuse{}", i + 1), 2 * c[i], c[i], eps))
                    .collect::<Result<Vec<_>>>()?;
                (Some(align.try_into().unwrap()), Some(fuse.try_into().unwrap()))
            } else {
                (None, None)
            };
            let aspp = Aspp::new(init, "aspp", c[3], &cfg.aspp_rates, eps)?;
            let top_down = (0..3)
                .map(|i| FuseBlock::new(init, &format!("top_down{}", i + 1), c[i + 1] + c[i], c[i], eps))
                .collect::<Result<Vec<_>>>()?;
            Ok((align, stage_fuse, aspp, top_down.try_into().unwrap()))
        })?;
        let aux_head = if cfg.aux_enabled {
            let cin = if aux_from_finest { c[0] } else { c[3] };
            Some(init.scoped("aux_head", |init| Conv2d::new(init, "classifier", cin, 3, 1, Conv2dOptions::default(), true))?)
        } else {
            None
        };
        Ok(Self { align, stage_fuse, aspp, top_down, aux_head, channels: c, aux_from_finest })
    }

    pub fn channels(&self) -> [usize; 4] {
        self.channels
    }

    /// Aligns and fuses one stage (`stage` is 0-based). Stages 0–2 bring the
    /// ViT map to the ResNet extent; stage 3 brings the ResNet map up to the
    /// ViT extent.
    pub fn align_and_fuse<T: Real>(&self, ctx: &mut Ctx<T>, stage: usize, resnet: Var, vit: Option<Var>) -> Result<Var> {
        let r = ctx.tape.dims(resnet).to_vec();
        let (Some(align), Some(fuse), Some(vit)) = (&self.align, &self.stage_fuse, vit) else {
            if stage == 3 {
                // Without a ViT branch the deepest ResNet map is still brought
                // to 1/16 so that N3 and N4 share an extent.
                return Ok(ctx.tape.bilinear_resize(resnet, r[2] * 2, r[3] * 2)?);
            }
            return Ok(resnet);
        };
        let v = ctx.tape.dims(vit).to_vec();
        if v[0] != r[0] {
            return Err(AqsError::Validation(format!("stage {} batch mismatch: resnet {} vs vit {}", stage + 1, r[0], v[0])));
        }
        let a = align[stage].forward(ctx, vit)?;
        let t = &mut ctx.tape;
        let (x, y) = if stage < 3 { (resnet, t.bilinear_resize(a, r[2], r[3])?) } else { (t.bilinear_resize(resnet, v[2], v[3])?, a) };
        let cat = t.concat(&[x, y], 1)?;
        fuse[stage].forward(ctx, cat)
    }

    /// ASPP on the deepest fused map, then top-down fusion to N1.
    pub fn top_down<T: Real>(&self, ctx: &mut Ctx<T>, fused: [Var; 4]) -> Result<[Var; 4]> {
        let mut maps = fused;
        maps[3] = self.aspp.forward(ctx, fused[3])?;
        for i in (0..3).rev() {
            let d = ctx.tape.dims(fused[i]).to_vec();
            let up = ctx.tape.bilinear_resize(maps[i + 1], d[2], d[3])?;
            let cat = ctx.tape.concat(&[up, fused[i]], 1)?;
            maps[i] = self.top_down[i].forward(ctx, cat)?;
        }
        Ok(maps)
    }

    pub fn aux<T: Real>(&self, ctx: &mut Ctx<T>, maps: &[Var; 4], h: usize, w: usize) -> Result<Option<Var>> {
        let Some(head) = &self.aux_head else { return Ok(None) };
        let src = if self.aux_from_finest { maps[0] } else { maps[3] };
        let y = head.forward(ctx, src)?;
        Ok(Some(ctx.tape.bilinear_resize(y, h, w)?))
    }

    pub fn forward<T: Real>(
        &self,
        ctx: &mut Ctx<T>,
        resnet: &FeaturePyramid,
        vit: Option<&FeaturePyramid>,
        input_h: usize,
        input_w: usize,
    ) -> Result<NeckOutput> {
        if self.align.is_some() != vit.is_some() {
            return Err(AqsError::Usage("ViT features must be supplied exactly when pretrained fusion is enabled".into()));
        }
        let mut fused = resnet.stages;
        for (i, f) in fused.iter_mut().enumerate() {
            *f = self.align_and_fuse(ctx, i, resnet.stages[i], vit.map(|v| v.stages[i]))?;
        }
        let maps = self.top_down(ctx, fused)?;
        self.check(ctx, &maps, input_h, input_w)?;
        let aux = self.aux(ctx, &maps, input_h, input_w)?;
        Ok(NeckOutput { maps, aux })
    }

    fn check<T: Real>(&self, ctx: &Ctx<T>, maps: &[Var; 4], h: usize, w: usize) -> Result<()> {
        for (i, &m) in maps.iter().enumerate() {
            let d = ctx.tape.dims(m);
            let want = [self.channels[i], h / NECK_SCALES[i], w / NECK_SCALES[i]];
            if d[1..] != want {
                return Err(AqsError::Validation(format!("neck output N{} has dims {d:?}, expected (B, {want:?})", i + 1)));
            }
        }
        Ok(())
    }
}
