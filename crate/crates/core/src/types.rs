//! Batch containers shared by every stage of the pipeline.
//!
//! Host-side arrays use the channel-last `[B, H, W, C]` layout. Tensors handed
//! to the networks are channel-first `[B, C, H, W]`, which is what the
//! convolution kernels expect.

use candle_core::{DType, Device, Tensor};
use ndarray::{Array4, Axis};

use crate::error::{Error, Result};

/// Per-channel RGB mean used for input normalization.
pub const PIXEL_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
/// Per-channel RGB standard deviation used for input normalization.
pub const PIXEL_STD: [f32; 3] = [0.229, 0.224, 0.225];

/// RGB images in `[0, 1]`, shape `[B, H, W, 3]`.
///
/// The edge detectors read these pixels directly; the networks read the
/// mean/std-normalized view produced by [`ImageBatch::to_tensor`].
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBatch {
    pixels: Array4<f32>,
}

impl ImageBatch {
    pub fn new(pixels: Array4<f32>) -> Result<Self> {
        let (b, h, w, c) = pixels.dim();
        if c != 3 {
            return Err(Error::shape(format!(
                "image batch needs 3 channels, got {c}"
            )));
        }
        if b == 0 || h == 0 || w == 0 {
            return Err(Error::shape(format!(
                "image batch has an empty dimension: {b}x{h}x{w}x{c}"
            )));
        }
        if pixels.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("image batch contains non-finite values"));
        }
        Ok(Self { pixels })
    }

    pub fn pixels(&self) -> &Array4<f32> {
        &self.pixels
    }

    pub fn batch_size(&self) -> usize {
        self.pixels.dim().0
    }

    /// `(height, width)`
    pub fn spatial(&self) -> (usize, usize) {
        let (_, h, w, _) = self.pixels.dim();
        (h, w)
    }

    /// Normalized, channel-first network input `[B, 3, H, W]`.
    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let (b, h, w, _) = self.pixels.dim();
        let mut out = Vec::with_capacity(b * 3 * h * w);
        for img in self.pixels.axis_iter(Axis(0)) {
            for c in 0..3 {
                let (m, s) = (PIXEL_MEAN[c], PIXEL_STD[c]);
                out.extend(img.index_axis(Axis(2), c).iter().map(|&v| (v - m) / s));
            }
        }
        Ok(Tensor::from_vec(out, (b, 3, h, w), device)?.to_dtype(dtype)?)
    }

    /// Selects a subset of images, in the given order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        Self::new(self.pixels.select(Axis(0), indices))
    }
}

/// Binary masks, shape `[B, H, W, 1]`, values in `{0, 1}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskBatch {
    values: Array4<u8>,
}

impl MaskBatch {
    pub fn new(values: Array4<u8>) -> Result<Self> {
        let (b, h, w, c) = values.dim();
        if c != 1 {
            return Err(Error::shape(format!("mask batch needs 1 channel, got {c}")));
        }
        if b == 0 || h == 0 || w == 0 {
            return Err(Error::shape("mask batch has an empty dimension"));
        }
        if values.iter().any(|&v| v > 1) {
            return Err(Error::invalid("mask batch is not binary"));
        }
        Ok(Self { values })
    }

    /// Binarizes a real-valued array: entries strictly above `threshold` become 1.
    pub fn from_scores(scores: &Array4<f64>, threshold: f64) -> Result<Self> {
        Self::new(scores.mapv(|v| u8::from(v > threshold)))
    }

    /// Binarizes network logits `[B, 1, H, W]` at probability 0.5.
    pub fn from_logits(logits: &Tensor) -> Result<Self> {
        let (b, c, h, w) = logits.dims4()?;
        if c != 1 {
            return Err(Error::shape(format!("logit map needs 1 channel, got {c}")));
        }
        let flat = logits.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
        // sigmoid(x) > 0.5 <=> x > 0
        let values = Array4::from_shape_vec((b, h, w, 1), flat.iter().map(|&v| u8::from(v > 0.0)).collect())
            .map_err(|e| Error::shape(e.to_string()))?;
        Self::new(values)
    }

    pub fn values(&self) -> &Array4<u8> {
        &self.values
    }

    pub fn batch_size(&self) -> usize {
        self.values.dim().0
    }

    pub fn spatial(&self) -> (usize, usize) {
        let (_, h, w, _) = self.values.dim();
        (h, w)
    }

    /// Channel-first `[B, 1, H, W]` tensor of zeros and ones.
    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let (b, h, w, _) = self.values.dim();
        let data: Vec<f32> = self.values.iter().map(|&v| f32::from(v)).collect();
        Ok(Tensor::from_vec(data, (b, 1, h, w), device)?.to_dtype(dtype)?)
    }

    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        Self::new(self.values.select(Axis(0), indices))
    }
}

/// Logit maps, one `[B, 1, H, W]` tensor per supervised decoder head.
#[derive(Debug, Clone)]
pub struct SegPrediction {
    pub logits: Vec<Tensor>,
}

impl SegPrediction {
    pub fn heads(&self) -> usize {
        self.logits.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_wrong_channel_count() {
        assert!(ImageBatch::new(Array4::zeros((1, 2, 2, 1))).is_err());
        assert!(MaskBatch::new(Array4::zeros((1, 2, 2, 3))).is_err());
    }

    #[test]
    fn rejects_non_finite_pixels() {
        let mut px = Array4::zeros((1, 2, 2, 3));
        px[[0, 1, 1, 2]] = f32::NAN;
        assert!(ImageBatch::new(px).is_err());
    }

    #[test]
    fn rejects_non_binary_masks() {
        let mut m = Array4::zeros((1, 2, 2, 1));
        m[[0, 0, 0, 0]] = 2;
        assert!(MaskBatch::new(m).is_err());
    }

    #[test]
    fn normalized_tensor_is_channel_first() {
        let mut px = Array4::zeros((1, 2, 3, 3));
        px[[0, 1, 2, 0]] = 1.0;
        let t = ImageBatch::new(px).unwrap().to_tensor(DType::F64, &Device::Cpu).unwrap();
        assert_eq!(t.dims(), &[1, 3, 2, 3]);
        let red = t.get(0).unwrap().get(0).unwrap().to_vec2::<f64>().unwrap();
        let expect_hi = ((1.0f32 - PIXEL_MEAN[0]) / PIXEL_STD[0]) as f64;
        let expect_lo = ((0.0f32 - PIXEL_MEAN[0]) / PIXEL_STD[0]) as f64;
        assert_eq!(red[1][2], expect_hi);
        assert_eq!(red[0][0], expect_lo);
    }

    #[test]
    fn logits_binarize_at_zero() {
        let t = Tensor::new(&[[[[-0.1f32, 0.0], [0.1, 5.0]]]], &Device::Cpu).unwrap();
        let m = MaskBatch::from_logits(&t).unwrap();
        let flat: Vec<u8> = m.values().iter().copied().collect();
        assert_eq!(flat, vec![0, 0, 1, 1]);
    }
}
