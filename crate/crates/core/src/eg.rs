//! Edge guiding: edge fusion, boundary attention, channel attention and the
//! projection head that turns a feature map into a guidance embedding.
//!
//! Feature maps are channel-first tensors `[B, C, h, w]`. The pipeline is
//!
//! ```text
//! fused = z * edge                      (edge broadcast over channels)
//! a     = fused + fused * σ(conv3x3(fused))
//! b     = a + a * σ(mlp(avgpool(a)) + mlp(maxpool(a)))
//! e     = relu(batchnorm(linear(gap(b))))
//! ```
//!
//! With edge guiding disabled only the projection head is built and applied
//! to the raw feature map.

use candle_core::{DType, Device, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::edge::{resize_edge_map, EdgeDetector, EdgeMap};
use crate::error::{Error, Result};
use crate::nn::{self, Conv2d, ConvSpec, Init, Linear, NamedVar, ParamInit, Parameterized};
use crate::types::ImageBatch;

pub const DEFAULT_EMBED_DIM: usize = 256;
pub const DEFAULT_REDUCTION: usize = 16;
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Teacher,
    Student,
}

impl Side {
    pub fn prefix(&self) -> &'static str {
        match self {
            Side::Teacher => "eg_teacher",
            Side::Student => "eg_student",
        }
    }
}

/// Multiplies every channel of `z` by the single-channel edge map.
pub fn fuse(z: &Tensor, edge: &EdgeMap) -> Result<Tensor> {
    let (b, _, h, w) = z.dims4()?;
    let (eb, eh, ew, _) = edge.data().dim();
    if (eb, eh, ew) != (b, h, w) {
        return Err(Error::shape(format!(
            "edge map {eb}x{eh}x{ew} does not match feature map {b}x{h}x{w}"
        )));
    }
    let e = edge_tensor(edge, z.dtype(), z.device())?;
    Ok(z.broadcast_mul(&e)?)
}

/// `[B, h, w, 1]` host map → `[B, 1, h, w]` tensor.
pub fn edge_tensor(edge: &EdgeMap, dtype: DType, device: &Device) -> Result<Tensor> {
    let (b, h, w, _) = edge.data().dim();
    let flat: Vec<f64> = edge.data().iter().copied().collect();
    Ok(Tensor::from_vec(flat, (b, 1, h, w), device)?.to_dtype(dtype)?)
}

fn check_channels(z: &Tensor, expected: usize, what: &str) -> Result<()> {
    let c = z.dims4()?.1;
    if c != expected {
        return Err(Error::shape(format!("{what}: expected {expected} channels, got {c}")));
    }
    Ok(())
}

/// Spatial attention mask from a single-output 3×3 convolution.
#[derive(Debug, Clone)]
pub struct BoundaryAttention {
    conv: Conv2d,
    channels: usize,
}

impl BoundaryAttention {
    pub fn new(p: &mut ParamInit, name: &str, channels: usize) -> Result<Self> {
        let bound = 1.0 / ((channels * 9) as f64).sqrt();
        let conv = Conv2d::with_init(
            p,
            &format!("{name}.conv"),
            ConvSpec::new(channels, 1, 3),
            Init::Uniform(bound),
            Init::Uniform(bound),
        )?;
        Ok(Self { conv, channels })
    }

    /// `σ(conv(z))`, shape `[B, 1, h, w]`.
    pub fn mask(&self, z: &Tensor) -> Result<Tensor> {
        check_channels(z, self.channels, "boundary attention")?;
        nn::sigmoid(&self.conv.forward(z)?)
    }

    pub fn forward(&self, z: &Tensor) -> Result<Tensor> {
        Ok(z.broadcast_mul(&self.mask(z)?)?)
    }
}

/// Channel gate from avg- and max-pooled descriptors through a shared
/// two-layer transform.
#[derive(Debug, Clone)]
pub struct ChannelAttention {
    fc0: Linear,
    fc1: Linear,
    channels: usize,
}

impl ChannelAttention {
    pub fn new(p: &mut ParamInit, name: &str, channels: usize, reduction: usize) -> Result<Self> {
        if reduction == 0 {
            return Err(Error::invalid("channel attention reduction must be positive"));
        }
        let hidden = (channels / reduction).max(1);
        Ok(Self {
            fc0: Linear::new(p, &format!("{name}.fc0"), channels, hidden)?,
            fc1: Linear::new(p, &format!("{name}.fc1"), hidden, channels)?,
            channels,
        })
    }

    pub fn hidden(&self) -> usize {
        self.fc0.out_dim()
    }

    fn transform(&self, x: &Tensor) -> Result<Tensor> {
        self.fc1.forward(&self.fc0.forward(x)?.relu()?)
    }

    /// Channel weights `[B, C, 1, 1]` in `(0, 1)`.
    pub fn attention(&self, z: &Tensor) -> Result<Tensor> {
        check_channels(z, self.channels, "channel attention")?;
        let (b, c, h, w) = z.dims4()?;
        let flat = z.reshape((b, c, h * w))?;
        let avg = flat.mean(D::Minus1)?;
        let max = flat.max(D::Minus1)?;
        let logits = (self.transform(&avg)? + self.transform(&max)?)?;
        nn::sigmoid(&logits)?.reshape((b, c, 1, 1)).map_err(Into::into)
    }

    pub fn forward(&self, z: &Tensor) -> Result<Tensor> {
        Ok(z.broadcast_mul(&self.attention(z)?)?)
    }
}

/// Global average pooling, linear projection, batch normalization, ReLU.
#[derive(Debug, Clone)]
pub struct Projection {
    linear: Linear,
    scale: Tensor,
    shift: Tensor,
    running_mean: Tensor,
    running_var: Tensor,
}

impl Projection {
    pub fn new(p: &mut ParamInit, name: &str, channels: usize, embed_dim: usize) -> Result<Self> {
        let linear = Linear::new(p, &format!("{name}.linear"), channels, embed_dim)?;
        let scale = p.tensor(format!("{name}.norm.scale"), &[embed_dim], Init::Ones)?;
        let shift = p.tensor(format!("{name}.norm.shift"), &[embed_dim], Init::Zeros)?;
        let running_mean = Tensor::zeros(embed_dim, p.dtype(), p.device())?;
        let running_var = Tensor::ones(embed_dim, p.dtype(), p.device())?;
        Ok(Self {
            linear,
            scale,
            shift,
            running_mean,
            running_var,
        })
    }

    pub fn embed_dim(&self) -> usize {
        self.linear.out_dim()
    }

    pub fn in_channels(&self) -> usize {
        self.linear.in_dim()
    }

    pub fn running_mean(&self) -> &Tensor {
        &self.running_mean
    }

    pub fn running_var(&self) -> &Tensor {
        &self.running_var
    }

    pub fn set_running_stats(&mut self, mean: Tensor, var: Tensor) -> Result<()> {
        let d = self.embed_dim();
        if mean.dims() != [d] || var.dims() != [d] {
            return Err(Error::shape(format!("running statistics must have length {d}")));
        }
        let min_var = var.to_dtype(DType::F64)?.min(0)?.to_scalar::<f64>()?;
        // also rejects NaN
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !(min_var > 0.0) {
            return Err(Error::invalid("running variance must be strictly positive"));
        }
        self.running_mean = mean.to_dtype(self.scale.dtype())?.detach();
        self.running_var = var.to_dtype(self.scale.dtype())?.detach();
        Ok(())
    }

    fn pooled_linear(&self, z: &Tensor) -> Result<Tensor> {
        check_channels(z, self.in_channels(), "projection")?;
        let (b, c, h, w) = z.dims4()?;
        let gap = z.reshape((b, c, h * w))?.mean(D::Minus1)?;
        self.linear.forward(&gap)
    }

    fn affine_relu(&self, normed: &Tensor) -> Result<Tensor> {
        Ok(normed.broadcast_mul(&self.scale)?.broadcast_add(&self.shift)?.relu()?)
    }

    /// Eval-mode projection using the running statistics.
    pub fn forward_eval(&self, z: &Tensor) -> Result<Tensor> {
        let x = self.pooled_linear(z)?;
        let normed = x
            .broadcast_sub(&self.running_mean)?
            .broadcast_div(&(&self.running_var + BN_EPS)?.sqrt()?)?;
        self.affine_relu(&normed)
    }

    /// Training-mode projection: normalizes with batch statistics and folds
    /// them into the running estimates.
    pub fn forward_train(&mut self, z: &Tensor) -> Result<Tensor> {
        let b = z.dims4()?.0;
        if b < 2 {
            return Err(Error::invalid(format!(
                "batch normalization in training mode needs at least 2 samples, got {b}"
            )));
        }
        let x = self.pooled_linear(z)?;
        let mean = x.mean_keepdim(0)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(0)?;
        let normed = centered.broadcast_div(&(&var + BN_EPS)?.sqrt()?)?;

        let unbiased = (var.squeeze(0)?.detach() * (b as f64 / (b as f64 - 1.0)))?;
        self.running_mean = ((&self.running_mean * (1.0 - BN_MOMENTUM))?
            + (mean.squeeze(0)?.detach() * BN_MOMENTUM)?)?;
        self.running_var = ((&self.running_var * (1.0 - BN_MOMENTUM))? + (unbiased * BN_MOMENTUM)?)?;
        self.affine_relu(&normed)
    }

    pub fn forward(&mut self, z: &Tensor, training: bool) -> Result<Tensor> {
        if training {
            self.forward_train(z)
        } else {
            self.forward_eval(z)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EgConfig {
    pub side: Side,
    pub channels: usize,
    pub embed_dim: usize,
    pub reduction: usize,
    /// false: projection head only, applied to the raw features.
    pub use_edges: bool,
}

impl EgConfig {
    pub fn new(side: Side, channels: usize) -> Self {
        Self {
            side,
            channels,
            embed_dim: DEFAULT_EMBED_DIM,
            reduction: DEFAULT_REDUCTION,
            use_edges: true,
        }
    }
}

/// One edge-guiding branch with its own parameters.
#[derive(Debug, Clone)]
pub struct EgModule {
    config: EgConfig,
    bam: Option<BoundaryAttention>,
    cam: Option<ChannelAttention>,
    proj: Projection,
    vars: Vec<NamedVar>,
}

impl EgModule {
    pub fn new(config: EgConfig, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        if config.channels == 0 || config.embed_dim == 0 {
            return Err(Error::invalid("edge-guiding channels and embedding size must be positive"));
        }
        let prefix = config.side.prefix();
        let mut p = ParamInit::trainable(seed, dtype, device);
        let (bam, cam) = if config.use_edges {
            (
                Some(BoundaryAttention::new(&mut p, &format!("{prefix}.bam"), config.channels)?),
                Some(ChannelAttention::new(
                    &mut p,
                    &format!("{prefix}.cam"),
                    config.channels,
                    config.reduction,
                )?),
            )
        } else {
            (None, None)
        };
        let proj = Projection::new(&mut p, &format!("{prefix}.proj"), config.channels, config.embed_dim)?;
        Ok(Self {
            config,
            bam,
            cam,
            proj,
            vars: p.into_vars(),
        })
    }

    pub fn config(&self) -> &EgConfig {
        &self.config
    }

    pub fn bam(&self) -> Option<&BoundaryAttention> {
        self.bam.as_ref()
    }

    pub fn cam(&self) -> Option<&ChannelAttention> {
        self.cam.as_ref()
    }

    pub fn projection(&self) -> &Projection {
        &self.proj
    }

    pub fn projection_mut(&mut self) -> &mut Projection {
        &mut self.proj
    }

    /// Fusion plus the two residual attention stages, before projection.
    pub fn attend(&self, z: &Tensor, edge: &EdgeMap) -> Result<Tensor> {
        let (bam, cam) = match (&self.bam, &self.cam) {
            (Some(b), Some(c)) => (b, c),
            _ => return Ok(z.clone()),
        };
        let (_, _, h, w) = z.dims4()?;
        let edge = resize_edge_map(edge, h, w)?;
        let fused = fuse(z, &edge)?;
        let a = (&fused + bam.forward(&fused)?)?;
        Ok((&a + cam.forward(&a)?)?)
    }

    /// Embedding `[B, d]` from a feature map and a full-resolution edge map.
    /// `edge` may be `None` only when edge guiding is disabled.
    pub fn forward(&mut self, z: &Tensor, edge: Option<&EdgeMap>, training: bool) -> Result<Tensor> {
        let features = self.features(z, edge)?;
        self.proj.forward(&features, training)
    }

    /// Read-only eval-mode forward.
    pub fn forward_eval(&self, z: &Tensor, edge: Option<&EdgeMap>) -> Result<Tensor> {
        self.proj.forward_eval(&self.features(z, edge)?)
    }

    fn features(&self, z: &Tensor, edge: Option<&EdgeMap>) -> Result<Tensor> {
        check_channels(z, self.config.channels, self.config.side.prefix())?;
        if !self.config.use_edges {
            return Ok(z.clone());
        }
        let edge = edge.ok_or_else(|| Error::invalid("edge guiding is enabled but no edge map was given"))?;
        self.attend(z, edge)
    }

    /// Runs grayscale conversion and the detector on `images` first.
    pub fn forward_images(
        &mut self,
        images: &ImageBatch,
        z: &Tensor,
        detector: EdgeDetector,
        training: bool,
    ) -> Result<Tensor> {
        let edge = if self.config.use_edges {
            Some(detector.detect(images)?)
        } else {
            None
        };
        self.forward(z, edge.as_ref(), training)
    }

    /// Non-trainable state (batch-norm running statistics).
    pub fn buffers(&self) -> Vec<(String, Tensor)> {
        let prefix = format!("{}.proj.norm", self.config.side.prefix());
        vec![
            (format!("{prefix}.running_mean"), self.proj.running_mean.clone()),
            (format!("{prefix}.running_var"), self.proj.running_var.clone()),
        ]
    }
}

impl Parameterized for EgModule {
    fn named_vars(&self) -> Vec<NamedVar> {
        self.vars.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::edge::DetectorKind;
    use ndarray::Array4;

    fn dev() -> Device {
        Device::Cpu
    }

    fn randn(shape: &[usize], seed: u64) -> Tensor {
        let mut p = ParamInit::frozen(seed, DType::F64, &dev());
        p.tensor("x", shape, Init::Normal(1.0)).unwrap()
    }

    fn edge_const(b: usize, h: usize, w: usize, v: f64) -> EdgeMap {
        EdgeMap::new(Array4::from_elem((b, h, w, 1), v), DetectorKind::Sobel).unwrap()
    }

    fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
        (a - b).unwrap().abs().unwrap().flatten_all().unwrap().max(0).unwrap().to_scalar::<f64>().unwrap()
    }

    fn zero_all(m: &EgModule) {
        for (_, v) in m.named_vars() {
            v.set(&v.zeros_like().unwrap()).unwrap();
        }
    }

    #[test]
    fn fuse_identity_annihilator_and_scaling() {
        let z = randn(&[2, 3, 4, 4], 1);
        assert_eq!(max_abs_diff(&fuse(&z, &edge_const(2, 4, 4, 1.0)).unwrap(), &z), 0.0);
        let zero = fuse(&z, &edge_const(2, 4, 4, 0.0)).unwrap();
        assert_eq!(zero.abs().unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap(), 0.0);
        let half = fuse(&z, &edge_const(2, 4, 4, 0.5)).unwrap();
        assert!(max_abs_diff(&half, &(&z * 0.5).unwrap()) < 1e-15);
        assert!(fuse(&z, &edge_const(2, 3, 4, 1.0)).is_err());
    }

    #[test]
    fn zeroed_attention_halves_input() {
        let m = EgModule::new(EgConfig::new(Side::Student, 8), 3, DType::F64, &dev()).unwrap();
        zero_all(&m);
        let z = randn(&[1, 8, 4, 4], 2);
        let half = (&z * 0.5).unwrap();
        assert!(max_abs_diff(&m.bam().unwrap().forward(&z).unwrap(), &half) < 1e-15);
        assert!(max_abs_diff(&m.cam().unwrap().forward(&z).unwrap(), &half) < 1e-15);
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let m = EgModule::new(EgConfig::new(Side::Teacher, 8), 0, DType::F64, &dev()).unwrap();
        let z = randn(&[1, 4, 4, 4], 2);
        assert!(m.bam().unwrap().forward(&z).is_err());
        assert!(m.cam().unwrap().forward(&z).is_err());
        assert!(m.projection().forward_eval(&z).is_err());
    }

    #[test]
    fn cam_hidden_width_is_clamped() {
        let m = EgModule::new(EgConfig::new(Side::Student, 8), 0, DType::F64, &dev()).unwrap();
        assert_eq!(m.cam().unwrap().hidden(), 1);
        let m = EgModule::new(EgConfig::new(Side::Teacher, 256), 0, DType::F64, &dev()).unwrap();
        assert_eq!(m.cam().unwrap().hidden(), 16);
    }

    #[test]
    fn training_projection_needs_two_samples() {
        let mut m = EgModule::new(EgConfig::new(Side::Student, 8), 0, DType::F64, &dev()).unwrap();
        let z = randn(&[1, 8, 2, 2], 5);
        assert!(m.projection_mut().forward_train(&z).is_err());
        assert!(m.projection().forward_eval(&z).is_ok());
    }

    #[test]
    fn running_stats_follow_momentum() {
        let mut m = EgModule::new(EgConfig::new(Side::Student, 4), 0, DType::F64, &dev()).unwrap();
        let z = randn(&[3, 4, 2, 2], 9);
        let lin = m.projection().pooled_linear(&z).unwrap();
        m.projection_mut().forward_train(&z).unwrap();
        let mean = lin.mean(0).unwrap();
        let expect = (mean * BN_MOMENTUM).unwrap();
        assert!(max_abs_diff(m.projection().running_mean(), &expect) < 1e-12);
        let rv = m.projection().running_var().to_vec1::<f64>().unwrap();
        assert!(rv.iter().all(|&v| v > 0.0));
    }

    #[test]
    fn rejects_non_positive_running_variance() {
        let mut m = EgModule::new(EgConfig::new(Side::Student, 4), 0, DType::F64, &dev()).unwrap();
        let d = m.projection().embed_dim();
        let zeros = Tensor::zeros(d, DType::F64, &dev()).unwrap();
        assert!(m.projection_mut().set_running_stats(zeros.clone(), zeros).is_err());
    }

    #[test]
    fn edge_map_required_when_enabled() {
        let mut m = EgModule::new(EgConfig::new(Side::Student, 4), 0, DType::F64, &dev()).unwrap();
        let z = randn(&[2, 4, 2, 2], 1);
        assert!(m.forward(&z, None, false).is_err());
        let mut cfg = EgConfig::new(Side::Student, 4);
        cfg.use_edges = false;
        let mut plain = EgModule::new(cfg, 0, DType::F64, &dev()).unwrap();
        assert!(plain.bam().is_none());
        assert_eq!(plain.forward(&z, None, true).unwrap().dims(), &[2, 256]);
    }
}
