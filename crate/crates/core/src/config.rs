use serde::{Deserialize, Serialize};

use crate::error::{AqsError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderKind {
    /// 3×3 conv + 1×1 conv on the finest fused map.
    Plain,
    /// Multi-scale feature-difference decoder with channel-spatial attention.
    Aqs,
}

/// Which fused map feeds the auxiliary classifier.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuxSource {
    /// N4, the ASPP output at 1/16.
    Deepest,
    /// N1, the last top-down output at 1/4.
    Finest,
}

/// Input of the decoder's segmentation-feature branch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegBranchInput {
    Mask,
    MaskAndImage,
}

/// Ablation configurations, from plain baseline to the full model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    Baseline,
    BaselinePif,
    BaselinePifAqsd,
}

impl Ablation {
    pub const ALL: [Ablation; 3] = [Ablation::Baseline, Ablation::BaselinePif, Ablation::BaselinePifAqsd];

    pub fn label(self) -> &'static str {
        match self {
            Ablation::Baseline => "Baseline",
            Ablation::BaselinePif => "Baseline + PIF",
            Ablation::BaselinePifAqsd => "Baseline + PIF + AQSD",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VitConfig {
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub patch: usize,
    pub mlp_ratio: usize,
    /// 1-based block indices whose outputs form the four stages; defaults to
    /// depth/4, depth/2, 3·depth/4, depth.
    pub taps: Option<[usize; 4]>,
    /// Positional-embedding grid; resized bilinearly for other input sizes.
    pub pos_grid: [usize; 2],
}

impl Default for VitConfig {
    fn default() -> Self {
        Self { embed_dim: 96, depth: 8, heads: 4, patch: 16, mlp_ratio: 4, taps: None, pos_grid: [4, 4] }
    }
}

impl VitConfig {
    pub fn tap_indices(&self) -> [usize; 4] {
        self.taps.unwrap_or_else(|| {
            let l = self.depth;
            [l / 4, l / 2, 3 * l / 4, l]
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Fuse frozen ViT features into the neck (PIF).
    pub pretrained_fusion: bool,
    pub decoder: DecoderKind,
    pub stage_channels: [usize; 4],
    pub resnet_blocks: usize,
    pub vit: VitConfig,
    pub aspp_rates: [usize; 4],
    pub csam_reduction: usize,
    pub aux_enabled: bool,
    pub aux_source: AuxSource,
    pub seg_branch_input: SegBranchInput,
    pub bn_momentum: f64,
    pub bn_eps: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            pretrained_fusion: true,
            decoder: DecoderKind::Aqs,
            stage_channels: [64, 128, 256, 512],
            resnet_blocks: 2,
            vit: VitConfig::default(),
            aspp_rates: [1, 6, 12, 18],
            csam_reduction: 8,
            aux_enabled: true,
            aux_source: AuxSource::Deepest,
            seg_branch_input: SegBranchInput::Mask,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Narrow trainable branches for CPU training runs on 64×64 scenes; the
    /// frozen encoder keeps its default size since it is never differentiated.
    pub fn compact() -> Self {
        Self { stage_channels: [16, 32, 64, 128], resnet_blocks: 1, ..Self::default() }
    }

    pub fn with_ablation(mut self, ablation: Ablation) -> Self {
        (self.pretrained_fusion, self.decoder) = match ablation {
            Ablation::Baseline => (false, DecoderKind::Plain),
            Ablation::BaselinePif => (true, DecoderKind::Plain),
            Ablation::BaselinePifAqsd => (true, DecoderKind::Aqs),
        };
        self
    }

    /// The ablation row this configuration corresponds to, if any.
    pub fn ablation(&self) -> Option<Ablation> {
        match (self.pretrained_fusion, self.decoder) {
            (false, DecoderKind::Plain) => Some(Ablation::Baseline),
            (true, DecoderKind::Plain) => Some(Ablation::BaselinePif),
            (true, DecoderKind::Aqs) => Some(Ablation::BaselinePifAqsd),
            (false, DecoderKind::Aqs) => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(AqsError::Config(m));
        if self.stage_channels.contains(&0) {
            return bad(format!("stage channels must be positive, got {:?}", self.stage_channels));
        }
        if self.resnet_blocks == 0 {
            return bad("resnet_blocks must be at least 1".into());
        }
        if self.csam_reduction == 0 {
            return bad("csam_reduction must be at least 1".into());
        }
        if self.aspp_rates.contains(&0) {
            return bad(format!("ASPP rates must be positive, got {:?}", self.aspp_rates));
        }
        let v = &self.vit;
        if v.embed_dim == 0 || v.heads == 0 || !v.embed_dim.is_multiple_of(v.heads) {
            return bad(format!("ViT embed dim {} is not divisible by {} heads", v.embed_dim, v.heads));
        }
        if v.patch != 16 {
            return bad(format!("ViT patch size must be 16 (stages sit at 1/16), got {}", v.patch));
        }
        if v.depth < 4 || v.mlp_ratio == 0 || v.pos_grid.contains(&0) {
            return bad("ViT needs depth >= 4, mlp_ratio >= 1 and a non-empty positional grid".into());
        }
        let taps = v.tap_indices();
        if taps[0] == 0 || taps.windows(2).any(|w| w[0] >= w[1]) || taps[3] != v.depth {
            return bad(format!("ViT taps {taps:?} must be strictly increasing, start >= 1 and end at depth {}", v.depth));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) || self.bn_eps <= 0.0 {
            return bad("bn_momentum must lie in [0, 1] and bn_eps must be positive".into());
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}
