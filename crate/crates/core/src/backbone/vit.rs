use aqs_tensor::{AttentionVars, Conv2dOptions, Real, Var};

use super::FeaturePyramid;
use crate::config::VitConfig;
use crate::error::{AqsError, Result};
use crate::layers::{Conv2d, Ctx, Init, LayerNorm, Linear};

/// Pre-norm transformer block: attention then MLP, each with a residual.
#[derive(Clone, Debug)]
pub struct VitBlock {
    norm1: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    proj: Linear,
    norm2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
    heads: usize,
}

impl VitBlock {
    fn new<T: Real>(init: &mut Init<T>, name: &str, cfg: &VitConfig) -> Result<Self> {
        let d = cfg.embed_dim;
        let hidden = d * cfg.mlp_ratio;
        init.scoped(name, |init| {
            Ok(Self {
                norm1: LayerNorm::new(init, "norm1", d)?,
                q: Linear::new(init, "attn.q", d, d, (1.0 / d as f64).sqrt())?,
                k: Linear::new(init, "attn.k", d, d, (1.0 / d as f64).sqrt())?,
                v: Linear::new(init, "attn.v", d, d, (1.0 / d as f64).sqrt())?,
                proj: Linear::new(init, "attn.proj", d, d, (1.0 / d as f64).sqrt())?,
                norm2: LayerNorm::new(init, "norm2", d)?,
                fc1: Linear::new(init, "mlp.fc1", d, hidden, (1.0 / d as f64).sqrt())?,
                fc2: Linear::new(init, "mlp.fc2", hidden, d, (1.0 / hidden as f64).sqrt())?,
                heads: cfg.heads,
            })
        })
    }

    fn forward<T: Real>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let h = self.norm1.forward(ctx, x)?;
        let p = AttentionVars { q: self.q.vars(ctx), k: self.k.vars(ctx), v: self.v.vars(ctx), out: self.proj.vars(ctx) };
        let a = ctx.tape.multi_head_self_attention(h, &p, self.heads)?.output;
        let x = ctx.tape.add(x, a)?;
        let h = self.norm2.forward(ctx, x)?;
        let h = self.fc1.forward(ctx, h)?;
        let h = ctx.tape.gelu(h)?;
        let h = self.fc2.forward(ctx, h)?;
        Ok(ctx.tape.add(x, h)?)
    }
}

/// Frozen ViT-style encoder; the four stages are block outputs at the
/// configured tap indices, reshaped to (B, D, H/16, W/16).
#[derive(Clone, Debug)]
pub struct VitLite {
    patch_embed: Conv2d,
    pub pos_embed: aqs_tensor::ParamId,
    blocks: Vec<VitBlock>,
    cfg: VitConfig,
}

impl VitLite {
    /// Every parameter is created frozen under the `vit.` prefix, drawn from
    /// a generator seeded with `seed` alone.
    pub fn new<T: Real>(init: &mut Init<T>, cfg: &VitConfig, seed: u64) -> Result<Self> {
        if cfg.heads == 0 || !cfg.embed_dim.is_multiple_of(cfg.heads) {
            return Err(AqsError::Config(format!("ViT embed dim {} is not divisible by {} heads", cfg.embed_dim, cfg.heads)));
        }
        init.reseed(seed);
        init.frozen(|init| {
            init.scoped("vit", |init| {
                let d = cfg.embed_dim;
                let patch_embed = Conv2d::new(init, "patch_embed", 3, d, cfg.patch, Conv2dOptions::new(cfg.patch, 0, 1), true)?;
                let pos_embed = init.normal("pos_embed", &[1, d, cfg.pos_grid[0], cfg.pos_grid[1]], 0.02)?;
                let blocks = (0..cfg.depth)
                    .map(|i| VitBlock::new(init, &format!("blocks.{i}"), cfg))
                    .collect::<Result<Vec<_>>>()?;
                Ok(Self { patch_embed, pos_embed, blocks, cfg: cfg.clone() })
            })
        })
    }

    pub fn config(&self) -> &VitConfig {
        &self.cfg
    }

    pub fn tap_indices(&self) -> [usize; 4] {
        self.cfg.tap_indices()
    }

    /// Patch tokens plus positional embedding, (B, N, D), and the token grid.
    pub fn embed<T: Real>(&self, ctx: &mut Ctx<T>, image: Var) -> Result<(Var, usize, usize)> {
        let dims = ctx.tape.dims(image).to_vec();
        let [b, 3, h, w] = dims[..] else {
            return Err(AqsError::Validation(format!("ViT-lite input must be (B, 3, H, W), got {dims:?}")));
        };
        let p = self.cfg.patch;
        if h % p != 0 || w % p != 0 {
            return Err(AqsError::Validation(format!("ViT-lite input extent {h}x{w} is not divisible by patch size {p}")));
        }
        let (gh, gw, d) = (h / p, w / p, self.cfg.embed_dim);
        let x = self.patch_embed.forward(ctx, image)?;
        let t = &mut ctx.tape;
        let x = t.reshape(x, &[b, d, gh * gw])?;
        let tokens = t.permute(x, &[0, 2, 1])?;
        let pos = ctx.param(self.pos_embed);
        let t = &mut ctx.tape;
        let pos = t.bilinear_resize(pos, gh, gw)?;
        let pos = t.reshape(pos, &[1, d, gh * gw])?;
        let pos = t.permute(pos, &[0, 2, 1])?;
        Ok((t.add(tokens, pos)?, gh, gw))
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<T>, image: Var) -> Result<FeaturePyramid> {
        let (mut x, gh, gw) = self.embed(ctx, image)?;
        let b = ctx.tape.dims(image)[0];
        let d = self.cfg.embed_dim;
        let taps = self.tap_indices();
        let mut stages = Vec::with_capacity(4);
        for (i, block) in self.blocks.iter().enumerate() {
            x = block.forward(ctx, x)?;
            if taps.contains(&(i + 1)) {
                let m = ctx.tape.permute(x, &[0, 2, 1])?;
                stages.push(ctx.tape.reshape(m, &[b, d, gh, gw])?);
            }
        }
        let stages: [Var; 4] = stages
            .try_into()
            .map_err(|s: Vec<Var>| AqsError::Config(format!("ViT taps {taps:?} produced {} stages", s.len())))?;
        Ok(FeaturePyramid { stages, scales: [16; 4], channels: [d; 4] })
    }
}
