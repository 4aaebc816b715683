//! Teacher encoders and student segmenters.
//!
//! The teacher maps a normalized batch `[B, 3, H, W]` to a frozen 256-channel
//! feature map. The student produces a four-scale feature pyramid at strides
//! 4/8/16/32 plus `D` full-resolution logit maps.

mod pvt;
mod student;
mod teacher;

pub use pvt::{PvtBackbone, PVT_B0_CHANNELS};
pub use student::{ConvBackbone, Student, StudentConfig, StudentKind, TopDownDecoder};
pub use teacher::{SamTeacher, SamVariant, StubTeacher, Teacher, TeacherConfig, TeacherKind};

use candle_core::{Device, Tensor};

use crate::error::{Error, Result};
use crate::nn::Parameterized;
use crate::trace::{self, TraceEntry};

/// Channel count of every teacher feature map.
pub const TEACHER_CHANNELS: usize = 256;
/// Spatial size of the stub teacher's output.
pub const STUB_TEACHER_GRID: usize = 16;
pub const DEFAULT_CHANNELS: [usize; 4] = [64, 128, 320, 512];
pub const DEFAULT_HEADS: usize = 2;
/// Total stride of the last pyramid level; inputs must be at least this big.
pub const MAX_STRIDE: usize = 32;

/// Frozen teacher output `[B, 256, h_t, w_t]`, detached from any graph.
#[derive(Debug, Clone)]
pub struct TeacherFeatures {
    pub z: Tensor,
}

/// Student encoder scales, finest first. Scale `i` (0-based) has stride
/// `2^(i+2)` with ceil division.
#[derive(Debug, Clone)]
pub struct PyramidFeatures {
    pub scales: [Tensor; 4],
}

impl PyramidFeatures {
    /// The coarsest scale, used for guidance.
    pub fn last(&self) -> &Tensor {
        &self.scales[3]
    }
}

/// Expected `(h, w)` of pyramid scale `i` (0-based) for an `h × w` input.
pub fn pyramid_dims(h: usize, w: usize, i: usize) -> (usize, usize) {
    let s = 1usize << (i + 2);
    (h.div_ceil(s), w.div_ceil(s))
}

pub(crate) fn check_input(x: &Tensor) -> Result<(usize, usize, usize)> {
    let (b, c, h, w) = x.dims4()?;
    if c != 3 {
        return Err(Error::shape(format!("expected 3 input channels, got {c}")));
    }
    if h < MAX_STRIDE || w < MAX_STRIDE {
        return Err(Error::shape(format!(
            "input {h}x{w} is smaller than the coarsest stride {MAX_STRIDE}"
        )));
    }
    Ok((b, h, w))
}

/// Number of trainable scalars.
pub fn count_params(model: &dyn Parameterized) -> usize {
    model.trainable_count()
}

/// Twice the multiply-accumulates of every conv/linear layer the student runs
/// on a single `input_h × input_w` image.
pub fn estimate_flops(student: &Student, input_h: usize, input_w: usize) -> Result<u64> {
    Ok(2 * shape_trace(student, input_h, input_w)?.iter().map(|e| e.macs).sum::<u64>())
}

/// Per-layer record of one single-image student forward pass.
pub fn shape_trace(student: &Student, input_h: usize, input_w: usize) -> Result<Vec<TraceEntry>> {
    if input_h == 0 || input_w == 0 {
        return Err(Error::invalid(format!(
            "input dimensions must be positive, got {input_h}x{input_w}"
        )));
    }
    let x = Tensor::zeros((1, 3, input_h, input_w), student.dtype(), &Device::Cpu)?;
    let (_, entries) = trace::capture(|| student.forward(&x))?;
    Ok(entries)
}

pub fn gflops(flops: u64) -> f64 {
    flops as f64 / 1e9
}
