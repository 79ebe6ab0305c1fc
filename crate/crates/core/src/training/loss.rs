use crate::error::{HrstError, Result};
use crate::tape::{seg_loss_forward, LossTerms, Mat};
use crate::topology::DICE_EPS;
use crate::volume_io::{LabelVolume, VolumeTensor};

/// Channel-first logits to token-major rows.
fn logits_rows(logits: &VolumeTensor, labels: &LabelVolume) -> Result<Mat> {
    if logits.dims() != labels.dims() {
        return Err(HrstError::Shape(format!(
            "logits {:?} do not match labels {:?}",
            logits.dims(),
            labels.dims()
        )));
    }
    let l = logits.channels();
    if let Some(&bad) = labels.data().iter().find(|&&v| v as usize >= l) {
        return Err(HrstError::Shape(format!(
            "label {bad} has no logit channel ({l} channels)"
        )));
    }
    let n = logits.voxels();
    let mut data = vec![0.0f64; n * l];
    for c in 0..l {
        for (t, &v) in logits.channel(c).iter().enumerate() {
            data[t * l + c] = v as f64;
        }
    }
    Ok(Mat::new(n, l, data))
}

/// Soft Dice, dice term, and cross-entropy in one pass.
pub fn combined_loss(logits: &VolumeTensor, labels: &LabelVolume) -> Result<LossTerms> {
    let m = logits_rows(logits, labels)?;
    Ok(seg_loss_forward(&m, labels.data(), DICE_EPS).0)
}

/// `1 − mean_c (2 Σ p g + ε) / (Σ p + Σ g + ε)` over softmax probabilities, background included.
pub fn soft_dice_loss(logits: &VolumeTensor, labels: &LabelVolume) -> Result<f64> {
    Ok(combined_loss(logits, labels)?.dice)
}

/// Mean over voxels of `−log softmax` at the true class.
pub fn cross_entropy_loss(logits: &VolumeTensor, labels: &LabelVolume) -> Result<f64> {
    Ok(combined_loss(logits, labels)?.ce)
}
