//! Per-image Dice and IoU on binary masks, averaged over images.
//! An image where both prediction and ground truth are empty scores 1.

use ndarray::Axis;

use crate::error::{Error, Result};
use crate::types::MaskBatch;

/// Pixel counts for one prediction/ground-truth pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Overlap {
    pub intersection: u64,
    pub pred: u64,
    pub gt: u64,
}

impl Overlap {
    pub fn union(&self) -> u64 {
        self.pred + self.gt - self.intersection
    }

    pub fn dice(&self) -> f64 {
        let denom = self.pred + self.gt;
        if denom == 0 {
            1.0
        } else {
            2.0 * self.intersection as f64 / denom as f64
        }
    }

    pub fn iou(&self) -> f64 {
        let union = self.union();
        if union == 0 {
            1.0
        } else {
            self.intersection as f64 / union as f64
        }
    }
}

pub fn overlaps(pred: &MaskBatch, gt: &MaskBatch) -> Result<Vec<Overlap>> {
    if pred.values().dim() != gt.values().dim() {
        return Err(Error::shape(format!(
            "prediction {:?} and ground truth {:?} differ in shape",
            pred.values().dim(),
            gt.values().dim()
        )));
    }
    Ok(pred
        .values()
        .axis_iter(Axis(0))
        .zip(gt.values().axis_iter(Axis(0)))
        .map(|(p, g)| {
            let mut o = Overlap::default();
            for (&a, &b) in p.iter().zip(g.iter()) {
                o.pred += u64::from(a);
                o.gt += u64::from(b);
                o.intersection += u64::from(a & b);
            }
            o
        })
        .collect())
}

pub fn mean_dice(pred: &MaskBatch, gt: &MaskBatch) -> Result<f64> {
    let o = overlaps(pred, gt)?;
    Ok(o.iter().map(Overlap::dice).sum::<f64>() / o.len() as f64)
}

pub fn mean_iou(pred: &MaskBatch, gt: &MaskBatch) -> Result<f64> {
    let o = overlaps(pred, gt)?;
    Ok(o.iter().map(Overlap::iou).sum::<f64>() / o.len() as f64)
}

/// Streaming accumulator for dataset-level means across batches.
#[derive(Debug, Clone, Default)]
pub struct MetricAccumulator {
    dice_sum: f64,
    iou_sum: f64,
    images: usize,
}

impl MetricAccumulator {
    pub fn add(&mut self, pred: &MaskBatch, gt: &MaskBatch) -> Result<()> {
        for o in overlaps(pred, gt)? {
            self.dice_sum += o.dice();
            self.iou_sum += o.iou();
            self.images += 1;
        }
        Ok(())
    }

    pub fn images(&self) -> usize {
        self.images
    }

    /// `(mDice, mIoU)`; `None` when nothing was added.
    pub fn finish(&self) -> Option<(f64, f64)> {
        (self.images > 0).then(|| {
            let n = self.images as f64;
            (self.dice_sum / n, self.iou_sum / n)
        })
    }
}
