//! Training objective: guidance distance plus deeply supervised
//! segmentation loss, summed without weights.

use candle_core::{DType, Tensor};

use crate::error::{Error, Result};
use crate::types::{MaskBatch, SegPrediction};

pub const DICE_SMOOTH: f64 = 1.0;

/// Mean over the batch of the squared L2 distance between embedding rows.
pub fn guide_loss(e_seg: &Tensor, e_sam: &Tensor) -> Result<Tensor> {
    if e_seg.dims() != e_sam.dims() || e_seg.rank() != 2 {
        return Err(Error::shape(format!(
            "guide loss needs two [N, d] embeddings of equal shape, got {:?} and {:?}",
            e_seg.dims(),
            e_sam.dims()
        )));
    }
    let n = e_seg.dim(0)? as f64;
    Ok(((e_seg - e_sam)?.sqr()?.sum_all()? / n)?)
}

fn check_logits(logits: &Tensor, gt: &Tensor) -> Result<()> {
    if logits.dims() != gt.dims() {
        return Err(Error::shape(format!(
            "logits {:?} do not match ground truth {:?}",
            logits.dims(),
            gt.dims()
        )));
    }
    Ok(())
}

/// Pixel-mean binary cross-entropy on logits:
/// `max(x, 0) - x·y + ln(1 + e^{-|x|})`.
pub fn bce_loss_tensor(logits: &Tensor, gt: &Tensor) -> Result<Tensor> {
    check_logits(logits, gt)?;
    let pos = logits.relu()?;
    let soft = ((logits.abs()?.neg()?.exp()? + 1.0)?).log()?;
    Ok(((pos - (logits * gt)?)? + soft)?.mean_all()?)
}

/// Per-image soft Dice loss averaged over the batch.
pub fn dice_loss_tensor(logits: &Tensor, gt: &Tensor) -> Result<Tensor> {
    check_logits(logits, gt)?;
    let b = logits.dim(0)?;
    let p = candle_nn::ops::sigmoid(logits)?.reshape((b, ()))?;
    let g = gt.reshape((b, ()))?;
    let inter = (&p * &g)?.sum(1)?;
    let denom = ((p.sum(1)? + g.sum(1)?)? + DICE_SMOOTH)?;
    let dice = ((inter * 2.0)? + DICE_SMOOTH)?.div(&denom)?;
    Ok((1.0 - dice)?.mean_all()?)
}

pub fn bce_loss(logits: &Tensor, gt: &MaskBatch) -> Result<Tensor> {
    bce_loss_tensor(logits, &gt.to_tensor(logits.dtype(), logits.device())?)
}

pub fn dice_loss(logits: &Tensor, gt: &MaskBatch) -> Result<Tensor> {
    dice_loss_tensor(logits, &gt.to_tensor(logits.dtype(), logits.device())?)
}

/// Sum over decoder heads of BCE + Dice against the same mask.
pub fn seg_loss(preds: &SegPrediction, gt: &MaskBatch) -> Result<Tensor> {
    let first = preds
        .logits
        .first()
        .ok_or_else(|| Error::invalid("segmentation loss needs at least one head"))?;
    let g = gt.to_tensor(first.dtype(), first.device())?;
    let mut total: Option<Tensor> = None;
    for logits in &preds.logits {
        let head = (bce_loss_tensor(logits, &g)? + dice_loss_tensor(logits, &g)?)?;
        total = Some(match total {
            Some(t) => (t + head)?,
            None => head,
        });
    }
    Ok(total.expect("at least one head"))
}

/// Logged loss values for one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub guide: f64,
    pub seg: f64,
    pub total: f64,
}

pub fn total_loss(guide: f64, seg: f64) -> LossBreakdown {
    LossBreakdown {
        guide,
        seg,
        total: guide + seg,
    }
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        self.guide.is_finite() && self.seg.is_finite() && self.total.is_finite()
    }
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}
