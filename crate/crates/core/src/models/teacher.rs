use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use candle_nn::VarBuilder;
use candle_transformers::models::segment_anything::sam::{Sam, IMAGE_SIZE};
use serde::{Deserialize, Serialize};

use super::{check_input, TeacherFeatures, STUB_TEACHER_GRID, TEACHER_CHANNELS};
use crate::error::{Error, Result};
use crate::nn::{adaptive_avg_pool, digest_tensors, resize_bilinear, Conv2d, ConvSpec, ParamInit};
use crate::types::{PIXEL_MEAN, PIXEL_STD};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TeacherKind {
    Stub,
    SamAdapter,
}

impl std::str::FromStr for TeacherKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stub" => Ok(TeacherKind::Stub),
            "sam-adapter" => Ok(TeacherKind::SamAdapter),
            other => Err(Error::invalid(format!(
                "unknown teacher `{other}` (expected stub or sam-adapter)"
            ))),
        }
    }
}

impl std::fmt::Display for TeacherKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TeacherKind::Stub => "stub",
            TeacherKind::SamAdapter => "sam-adapter",
        })
    }
}

/// Image-encoder size of the SAM checkpoint behind the adapter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum SamVariant {
    #[default]
    VitB,
    VitL,
    VitH,
    /// MobileSAM TinyViT encoder.
    Tiny,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TeacherConfig {
    pub kind: TeacherKind,
    pub seed: u64,
    pub weights: Option<PathBuf>,
    pub sam_variant: SamVariant,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            kind: TeacherKind::Stub,
            seed: 0,
            weights: None,
            sam_variant: SamVariant::VitB,
        }
    }
}

/// Fixed-seed random convolutional encoder with the teacher's output
/// contract `[B, 256, 16, 16]`. Never trained.
#[derive(Debug, Clone)]
pub struct StubTeacher {
    convs: Vec<Conv2d>,
    tensors: Vec<(String, Tensor)>,
}

impl StubTeacher {
    pub fn new(seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        let mut p = ParamInit::frozen(seed, dtype, device);
        let widths = [3, 32, 64, 128];
        let mut convs = Vec::new();
        for i in 0..3 {
            let spec = ConvSpec::new(widths[i], widths[i + 1], 3).stride(2).padding(1);
            convs.push(Conv2d::new(&mut p, &format!("teacher.conv{}", i + 1), spec)?);
        }
        convs.push(Conv2d::new(&mut p, "teacher.out", ConvSpec::new(128, TEACHER_CHANNELS, 1))?);
        Ok(Self {
            convs,
            tensors: p.into_frozen(),
        })
    }

    pub fn encode(&self, x: &Tensor) -> Result<TeacherFeatures> {
        check_input(x)?;
        let x = x.detach();
        let last = self.convs.len() - 1;
        let mut h = x;
        for (i, conv) in self.convs.iter().enumerate() {
            h = conv.forward(&h)?;
            if i < last {
                h = h.relu()?;
            }
        }
        let z = adaptive_avg_pool(&h, STUB_TEACHER_GRID, STUB_TEACHER_GRID)?;
        Ok(TeacherFeatures { z: z.detach() })
    }
}

/// Segment Anything image encoder loaded from a safetensors checkpoint.
pub struct SamTeacher {
    sam: Sam,
    tensors: Vec<(String, Tensor)>,
}

impl std::fmt::Debug for SamTeacher {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SamTeacher").field("tensors", &self.tensors.len()).finish()
    }
}

impl SamTeacher {
    pub fn load(path: &Path, variant: SamVariant, device: &Device) -> Result<Self> {
        let adapter_err = |reason: String| Error::Adapter {
            path: path.to_path_buf(),
            reason,
        };
        if !path.exists() {
            return Err(adapter_err("file not found".into()));
        }
        let map = candle_core::safetensors::load(path, device).map_err(|e| adapter_err(e.to_string()))?;
        let mut tensors: Vec<(String, Tensor)> = map.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        tensors.sort_by(|a, b| a.0.cmp(&b.0));
        let vb = VarBuilder::from_tensors(map, DType::F32, device);
        let sam = match variant {
            SamVariant::VitB => Sam::new(768, 12, 12, &[2, 5, 8, 11], vb),
            SamVariant::VitL => Sam::new(1024, 24, 16, &[5, 11, 17, 23], vb),
            SamVariant::VitH => Sam::new(1280, 32, 16, &[7, 15, 23, 31], vb),
            SamVariant::Tiny => Sam::new_tiny(vb),
        }
        .map_err(|e| adapter_err(e.to_string()))?;
        Ok(Self { sam, tensors })
    }

    /// Undoes the input normalization, rescales the longest side to the
    /// encoder resolution and runs the image encoder one sample at a time.
    pub fn encode(&self, x: &Tensor) -> Result<TeacherFeatures> {
        let (b, h, w) = check_input(x)?;
        let dev = x.device();
        let mean = Tensor::new(&PIXEL_MEAN, dev)?.reshape((1, 3, 1, 1))?;
        let std = Tensor::new(&PIXEL_STD, dev)?.reshape((1, 3, 1, 1))?;
        let rgb = (x.detach().to_dtype(DType::F32)?.broadcast_mul(&std)?.broadcast_add(&mean)? * 255.0)?;
        let scale = IMAGE_SIZE as f64 / h.max(w) as f64;
        let (th, tw) = (((h as f64) * scale).round() as usize, ((w as f64) * scale).round() as usize);
        let rgb = resize_bilinear(&rgb, th.min(IMAGE_SIZE), tw.min(IMAGE_SIZE))?;
        let mut outs = Vec::with_capacity(b);
        for i in 0..b {
            outs.push(self.sam.embeddings(&rgb.get(i)?)?);
        }
        let z = Tensor::cat(&outs, 0)?.to_dtype(x.dtype())?;
        Ok(TeacherFeatures { z: z.detach() })
    }
}

/// The frozen guidance encoder.
#[derive(Debug)]
pub enum Teacher {
    Stub(StubTeacher),
    Sam(Box<SamTeacher>),
}

impl Teacher {
    pub fn new(config: &TeacherConfig, dtype: DType, device: &Device) -> Result<Self> {
        match (config.kind, &config.weights) {
            (TeacherKind::Stub, _) => Ok(Teacher::Stub(StubTeacher::new(config.seed, dtype, device)?)),
            (TeacherKind::SamAdapter, Some(path)) => {
                Ok(Teacher::Sam(Box::new(SamTeacher::load(path, config.sam_variant, device)?)))
            }
            (TeacherKind::SamAdapter, None) => {
                log::warn!("sam-adapter selected without a weights file; using the stub teacher");
                Ok(Teacher::Stub(StubTeacher::new(config.seed, dtype, device)?))
            }
        }
    }

    pub fn kind(&self) -> TeacherKind {
        match self {
            Teacher::Stub(_) => TeacherKind::Stub,
            Teacher::Sam(_) => TeacherKind::SamAdapter,
        }
    }

    pub fn encode(&self, x: &Tensor) -> Result<TeacherFeatures> {
        let f = match self {
            Teacher::Stub(t) => t.encode(x)?,
            Teacher::Sam(t) => t.encode(x)?,
        };
        let c = f.z.dims4()?.1;
        if c != TEACHER_CHANNELS {
            return Err(Error::shape(format!("teacher produced {c} channels, expected {TEACHER_CHANNELS}")));
        }
        Ok(f)
    }

    fn tensors(&self) -> &[(String, Tensor)] {
        match self {
            Teacher::Stub(t) => &t.tensors,
            Teacher::Sam(t) => &t.tensors,
        }
    }

    /// The teacher exposes no trainable parameters.
    pub fn trainable_count(&self) -> usize {
        0
    }

    pub fn frozen_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.elem_count()).sum()
    }

    /// SHA-256 of every teacher tensor.
    pub fn digest(&self) -> Result<String> {
        digest_tensors(self.tensors().iter().map(|(n, t)| (n.as_str(), t)))
    }
}
