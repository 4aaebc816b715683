use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use super::pvt::{PvtBackbone, PVT_B0_CHANNELS};
use super::{check_input, PyramidFeatures, DEFAULT_CHANNELS, DEFAULT_HEADS};
use crate::error::{Error, Result};
use crate::nn::{resize_bilinear, Conv2d, ConvSpec, NamedVar, ParamInit, Parameterized};
use crate::types::SegPrediction;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StudentKind {
    Tiny,
    PvtB0Adapter,
}

impl std::str::FromStr for StudentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tiny" => Ok(StudentKind::Tiny),
            "pvt-b0-adapter" => Ok(StudentKind::PvtB0Adapter),
            other => Err(Error::invalid(format!(
                "unknown student `{other}` (expected tiny or pvt-b0-adapter)"
            ))),
        }
    }
}

impl std::fmt::Display for StudentKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            StudentKind::Tiny => "tiny",
            StudentKind::PvtB0Adapter => "pvt-b0-adapter",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudentConfig {
    pub kind: StudentKind,
    /// Pyramid channels of the built-in backbone; ignored by the PVT adapter.
    pub channels: [usize; 4],
    pub decoder_channels: usize,
    pub heads: usize,
    pub seed: u64,
    pub weights: Option<PathBuf>,
}

impl Default for StudentConfig {
    fn default() -> Self {
        Self {
            kind: StudentKind::Tiny,
            channels: DEFAULT_CHANNELS,
            decoder_channels: 32,
            heads: DEFAULT_HEADS,
            seed: 0,
            weights: None,
        }
    }
}

/// Built-in convolutional encoder: a stride-4 stem followed by three
/// stride-2 stages, each with one residual 3×3 refinement.
#[derive(Debug, Clone)]
pub struct ConvBackbone {
    down: [Conv2d; 4],
    refine: [Conv2d; 4],
}

impl ConvBackbone {
    pub fn new(p: &mut ParamInit, channels: [usize; 4]) -> Result<Self> {
        let mut down = Vec::with_capacity(4);
        let mut refine = Vec::with_capacity(4);
        let mut prev = 3;
        for (i, &c) in channels.iter().enumerate() {
            let spec = if i == 0 {
                ConvSpec::new(prev, c, 7).stride(4).padding(3)
            } else {
                ConvSpec::new(prev, c, 3).stride(2).padding(1)
            };
            down.push(Conv2d::new(p, &format!("backbone.stage{}.down", i + 1), spec)?);
            refine.push(Conv2d::new(
                p,
                &format!("backbone.stage{}.refine", i + 1),
                ConvSpec::new(c, c, 3),
            )?);
            prev = c;
        }
        Ok(Self {
            down: down.try_into().expect("four stages"),
            refine: refine.try_into().expect("four stages"),
        })
    }

    /// Scalar parameter count derived from the layer shapes alone.
    pub fn expected_params(channels: [usize; 4]) -> usize {
        let mut prev = 3;
        let mut total = 0;
        for (i, &c) in channels.iter().enumerate() {
            let k = if i == 0 { 7 } else { 3 };
            total += ConvSpec::new(prev, c, k).param_count() + ConvSpec::new(c, c, 3).param_count();
            prev = c;
        }
        total
    }

    pub fn forward(&self, x: &Tensor) -> Result<[Tensor; 4]> {
        let mut h = x.clone();
        let mut out = Vec::with_capacity(4);
        for (down, refine) in self.down.iter().zip(&self.refine) {
            let y = down.forward(&h)?.relu()?;
            let y = (&y + refine.forward(&y)?)?.relu()?;
            out.push(y.clone());
            h = y;
        }
        Ok(out.try_into().expect("four stages"))
    }
}

/// Top-down fusion decoder: lateral 1×1 reductions, upsample-and-add from the
/// coarsest scale, a 3×3 smoothing conv per level, and one 1×1 logit head per
/// supervised level (finest first).
#[derive(Debug, Clone)]
pub struct TopDownDecoder {
    lateral: [Conv2d; 4],
    smooth: [Conv2d; 3],
    heads: Vec<Conv2d>,
}

impl TopDownDecoder {
    pub fn new(p: &mut ParamInit, channels: [usize; 4], width: usize, heads: usize) -> Result<Self> {
        if heads == 0 || heads > 4 {
            return Err(Error::invalid(format!("decoder head count must be in 1..=4, got {heads}")));
        }
        let lateral: Vec<_> = channels
            .iter()
            .enumerate()
            .map(|(i, &c)| Conv2d::new(p, &format!("decoder.lateral{}", i + 1), ConvSpec::new(c, width, 1)))
            .collect::<Result<_>>()?;
        let smooth: Vec<_> = (0..3)
            .map(|i| Conv2d::new(p, &format!("decoder.smooth{}", i + 1), ConvSpec::new(width, width, 3)))
            .collect::<Result<_>>()?;
        let heads = (0..heads)
            .map(|i| Conv2d::new(p, &format!("decoder.head{}", i + 1), ConvSpec::new(width, 1, 1)))
            .collect::<Result<_>>()?;
        Ok(Self {
            lateral: lateral.try_into().expect("four laterals"),
            smooth: smooth.try_into().expect("three smoothers"),
            heads,
        })
    }

    pub fn expected_params(channels: [usize; 4], width: usize, heads: usize) -> usize {
        channels.iter().map(|&c| ConvSpec::new(c, width, 1).param_count()).sum::<usize>()
            + 3 * ConvSpec::new(width, width, 3).param_count()
            + heads * ConvSpec::new(width, 1, 1).param_count()
    }

    pub fn heads(&self) -> usize {
        self.heads.len()
    }

    pub fn forward(&self, feats: &[Tensor; 4], out_h: usize, out_w: usize) -> Result<SegPrediction> {
        let mut levels: Vec<Tensor> = vec![self.lateral[3].forward(&feats[3])?.relu()?];
        for i in (0..3).rev() {
            let lat = self.lateral[i].forward(&feats[i])?;
            let (_, _, h, w) = lat.dims4()?;
            let up = resize_bilinear(levels.last().expect("coarser level"), h, w)?;
            levels.push(self.smooth[i].forward(&(lat + up)?)?.relu()?);
        }
        levels.reverse();
        let logits = self
            .heads
            .iter()
            .zip(&levels)
            .map(|(head, level)| resize_bilinear(&head.forward(level)?, out_h, out_w))
            .collect::<Result<Vec<_>>>()?;
        Ok(SegPrediction { logits })
    }
}

#[derive(Debug, Clone)]
enum Backbone {
    Conv(ConvBackbone),
    Pvt(Box<PvtBackbone>),
}

/// Trainable segmenter.
#[derive(Debug, Clone)]
pub struct Student {
    kind: StudentKind,
    channels: [usize; 4],
    backbone: Backbone,
    decoder: TopDownDecoder,
    vars: Vec<NamedVar>,
    dtype: DType,
}

impl Student {
    pub fn new(config: &StudentConfig, dtype: DType, device: &Device) -> Result<Self> {
        let kind = match (config.kind, &config.weights) {
            (StudentKind::PvtB0Adapter, None) => {
                log::warn!("pvt-b0-adapter selected without a weights file; using the built-in tiny student");
                StudentKind::Tiny
            }
            (k, _) => k,
        };
        let student = Self::build(config, kind, dtype, device)?;
        if let (StudentKind::PvtB0Adapter, Some(path)) = (kind, &config.weights) {
            student.load_backbone_weights(path)?;
        }
        Ok(student)
    }

    /// Architecture of `config.kind` with fresh initialization and no
    /// pretrained weights, for restoring saved parameters into.
    pub fn skeleton(config: &StudentConfig, dtype: DType, device: &Device) -> Result<Self> {
        Self::build(config, config.kind, dtype, device)
    }

    fn build(config: &StudentConfig, kind: StudentKind, dtype: DType, device: &Device) -> Result<Self> {
        let mut p = ParamInit::trainable(config.seed, dtype, device);
        let (backbone, channels) = match kind {
            StudentKind::Tiny => {
                if config.channels.contains(&0) {
                    return Err(Error::invalid("student channels must be positive"));
                }
                (Backbone::Conv(ConvBackbone::new(&mut p, config.channels)?), config.channels)
            }
            StudentKind::PvtB0Adapter => (Backbone::Pvt(Box::new(PvtBackbone::b0(&mut p)?)), PVT_B0_CHANNELS),
        };
        if config.decoder_channels == 0 {
            return Err(Error::invalid("decoder width must be positive"));
        }
        let decoder = TopDownDecoder::new(&mut p, channels, config.decoder_channels, config.heads)?;
        Ok(Self {
            kind,
            channels,
            backbone,
            decoder,
            vars: p.into_vars(),
            dtype,
        })
    }

    /// Copies pretrained backbone tensors from a safetensors file. Names may
    /// be given with or without the `backbone.` prefix.
    fn load_backbone_weights(&self, path: &Path) -> Result<()> {
        if !path.exists() {
            return Err(Error::Adapter {
                path: path.to_path_buf(),
                reason: "file not found".into(),
            });
        }
        let tensors = candle_core::safetensors::load(path, &Device::Cpu).map_err(|e| Error::Adapter {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        let mut missing = Vec::new();
        for (name, var) in self.vars.iter().filter(|(n, _)| n.starts_with("backbone.")) {
            let bare = &name["backbone.".len()..];
            match tensors.get(name.as_str()).or_else(|| tensors.get(bare)) {
                Some(t) if t.dims() == var.dims() => var.set(&t.to_dtype(self.dtype)?)?,
                Some(t) => {
                    return Err(Error::Adapter {
                        path: path.to_path_buf(),
                        reason: format!("{bare}: shape {:?}, expected {:?}", t.dims(), var.dims()),
                    })
                }
                None => missing.push(bare.to_string()),
            }
        }
        if !missing.is_empty() {
            return Err(Error::Adapter {
                path: path.to_path_buf(),
                reason: format!("missing tensors: {}", missing.join(", ")),
            });
        }
        log::info!("loaded PVTv2-B0 backbone weights from {}", path.display());
        Ok(())
    }

    pub fn kind(&self) -> StudentKind {
        self.kind
    }

    pub fn channels(&self) -> [usize; 4] {
        self.channels
    }

    pub fn heads(&self) -> usize {
        self.decoder.heads()
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    /// `x`: normalized `[B, 3, H, W]`.
    pub fn forward(&self, x: &Tensor) -> Result<(PyramidFeatures, SegPrediction)> {
        let (_, h, w) = check_input(x)?;
        let scales = match &self.backbone {
            Backbone::Conv(b) => b.forward(x)?,
            Backbone::Pvt(b) => b.forward(x)?,
        };
        let preds = self.decoder.forward(&scales, h, w)?;
        Ok((PyramidFeatures { scales }, preds))
    }

    /// Inference logits: the finest decoder head.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let (_, mut preds) = self.forward(x)?;
        Ok(preds.logits.swap_remove(0))
    }
}

impl Parameterized for Student {
    fn named_vars(&self) -> Vec<NamedVar> {
        self.vars.clone()
    }
}
