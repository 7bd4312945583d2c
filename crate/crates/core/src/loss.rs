//! Weighted cross-entropy + soft dice, with an optional auxiliary term.

use aqs_tensor::{Real, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::decoder::NUM_CLASSES;
use crate::error::{AqsError, Result};

/// Labels used to supervise the auxiliary output.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuxTarget {
    /// The same 3-class quality labels as the main output.
    QaLabels,
    /// The building mask as classes {0, 1}.
    BuildingMask,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub ce_weight: f64,
    pub dice_weight: f64,
    pub aux_weight: f64,
    pub dice_eps: f64,
    pub aux_target: AuxTarget,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { ce_weight: 0.5, dice_weight: 0.5, aux_weight: 0.4, dice_eps: 1.0, aux_target: AuxTarget::QaLabels }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = [self.ce_weight, self.dice_weight, self.aux_weight].iter().all(|w| w.is_finite() && *w >= 0.0);
        if !ok || self.dice_eps.is_nan() || self.dice_eps <= 0.0 {
            return Err(AqsError::Config("loss weights must be non-negative and dice_eps positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub ce: Var,
    pub dice: Var,
    /// γ₁·ce + γ₂·dice.
    pub total: Var,
}

/// (B, 3, H, W) one-hot encoding of (B, H, W) labels.
pub fn one_hot<T: Real>(labels: &[u8], batch: usize, h: usize, w: usize) -> Result<Tensor<T>> {
    if labels.len() != batch * h * w {
        return Err(AqsError::Validation(format!("{} labels for a {batch}x{h}x{w} batch", labels.len())));
    }
    let hw = h * w;
    let mut data = vec![T::zero(); batch * NUM_CLASSES * hw];
    for (i, &l) in labels.iter().enumerate() {
        if l as usize >= NUM_CLASSES {
            return Err(AqsError::Validation(format!("label {l} at pixel {i} is outside {{0, 1, 2}}")));
        }
        let (n, p) = (i / hw, i % hw);
        data[(n * NUM_CLASSES + l as usize) * hw + p] = T::one();
    }
    Ok(Tensor::new(vec![batch, NUM_CLASSES, h, w], data)?)
}

/// γ₁·ce + γ₂·dice.
pub fn combine_terms<T: Real>(tape: &mut Tape<T>, ce: Var, dice: Var, cfg: &LossConfig) -> Result<Var> {
    let a = tape.scale(ce, T::from_f64_lossy(cfg.ce_weight))?;
    let b = tape.scale(dice, T::from_f64_lossy(cfg.dice_weight))?;
    Ok(tape.add(a, b)?)
}

/// Sum over batch and both spatial axes, leaving (1, C, 1, 1).
fn per_class_sum<T: Real>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let s = tape.sum_axis(x, 3)?;
    let s = tape.sum_axis(s, 2)?;
    Ok(tape.sum_axis(s, 0)?)
}

/// Pixel-mean cross-entropy and class-mean soft dice of `logits` against
/// `labels` laid out (B, H, W).
pub fn segmentation_loss<T: Real>(tape: &mut Tape<T>, logits: Var, labels: &[u8], cfg: &LossConfig) -> Result<LossTerms> {
    let d = tape.dims(logits).to_vec();
    if d.len() != 4 || d[1] != NUM_CLASSES {
        return Err(AqsError::Validation(format!("logits must be (B, 3, H, W), got {d:?}")));
    }
    let (b, h, w) = (d[0], d[2], d[3]);
    let onehot = one_hot::<T>(labels, b, h, w)?;
    let g_sum: Vec<T> = (0..NUM_CLASSES)
        .map(|c| T::from_f64_lossy(labels.iter().filter(|&&l| l as usize == c).count() as f64))
        .collect();
    let g = tape.input(onehot);

    let logp = tape.log_softmax(logits, 1)?;
    let picked = tape.mul(logp, g)?;
    let ce = tape.sum(picked)?;
    let ce = tape.scale(ce, T::from_f64_lossy(-1.0 / (b * h * w) as f64))?;

    let p = tape.softmax(logits, 1)?;
    let pg = tape.mul(p, g)?;
    let inter = per_class_sum(tape, pg)?;
    let p_sum = per_class_sum(tape, p)?;
    let g_sum = tape.input(Tensor::new(vec![1, NUM_CLASSES, 1, 1], g_sum)?);
    let eps = T::from_f64_lossy(cfg.dice_eps);
    let num = tape.scale(inter, T::from_f64_lossy(2.0))?;
    let num = tape.add_scalar(num, eps)?;
    let den = tape.add(p_sum, g_sum)?;
    let den = tape.add_scalar(den, eps)?;
    let ratio = tape.div(num, den)?;
    let mean_ratio = tape.mean(ratio)?;
    let neg = tape.scale(mean_ratio, T::from_f64_lossy(-1.0))?;
    let dice = tape.add_scalar(neg, T::one())?;

    let total = combine_terms(tape, ce, dice, cfg)?;
    Ok(LossTerms { ce, dice, total })
}

/// Main loss plus λ_aux times the auxiliary loss, if an auxiliary output is
/// present.
#[derive(Clone, Copy, Debug)]
pub struct CombinedLoss {
    pub main: LossTerms,
    pub aux: Option<LossTerms>,
    pub total: Var,
}

pub fn combined_loss<T: Real>(
    tape: &mut Tape<T>,
    logits: Var,
    aux_logits: Option<Var>,
    labels: &[u8],
    aux_labels: &[u8],
    cfg: &LossConfig,
) -> Result<CombinedLoss> {
    let main = segmentation_loss(tape, logits, labels, cfg)?;
    let Some(a) = aux_logits else { return Ok(CombinedLoss { main, aux: None, total: main.total }) };
    let aux = segmentation_loss(tape, a, aux_labels, cfg)?;
    let weighted = tape.scale(aux.total, T::from_f64_lossy(cfg.aux_weight))?;
    let total = tape.add(main.total, weighted)?;
    Ok(CombinedLoss { main, aux: Some(aux), total })
}
