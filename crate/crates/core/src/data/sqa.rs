use super::mask::Mask;
use crate::error::{AqsError, Result};
use crate::metrics::{BACKGROUND, MISSED, MISTAKEN};

/// 1 where the building was missed (gt ∧ ¬seg), 2 where the segmentation is
/// mistaken (seg ∧ ¬gt), 0 elsewhere.
pub fn sqa_ground_truth(seg: &Mask, gt: &Mask) -> Result<Vec<u8>> {
    if (seg.width, seg.height) != (gt.width, gt.height) {
        return Err(AqsError::Validation(format!(
            "segmentation {}x{} and ground truth {}x{} differ in size",
            seg.width, seg.height, gt.width, gt.height
        )));
    }
    Ok(seg
        .data
        .iter()
        .zip(&gt.data)
        .map(|(&s, &g)| match (s, g) {
            (0, 1) => MISSED,
            (1, 0) => MISTAKEN,
            _ => BACKGROUND,
        })
        .collect())
}
