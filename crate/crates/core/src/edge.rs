//! Edge extraction from RGB batches.
//!
//! Every operator works on host-side `[B, H, W, 1]` arrays in `f64` and treats
//! each image of the batch independently. Borders are handled by symmetric
//! reflection (`... c b a | a b c ... | c b a ...`).

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array2, Array4, ArrayView2, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::ImageBatch;

/// BT.601 luma weights.
pub const LUMA_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];

/// Images whose maximum response is below this are reported as edge-free.
pub const ZERO_MAX_EPS: f64 = 1e-8;

pub const CANNY_SIGMA: f64 = 1.4;
pub const CANNY_DEFAULT_LOW: f64 = 0.1;
pub const CANNY_DEFAULT_HIGH: f64 = 0.2;

const SOBEL_X: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
const SOBEL_Y: [[f64; 3]; 3] = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];
const LAPLACIAN: [[f64; 3]; 3] = [[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]];

/// Luminance batch `[B, H, W, 1]` with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayBatch {
    data: Array4<f64>,
}

impl GrayBatch {
    pub fn new(data: Array4<f64>) -> Result<Self> {
        if data.dim().3 != 1 {
            return Err(Error::shape(format!(
                "gray batch needs 1 channel, got {}",
                data.dim().3
            )));
        }
        if data.iter().any(|v| !v.is_finite() || !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("gray values must be finite and in [0, 1]"));
        }
        Ok(Self { data })
    }

    pub fn data(&self) -> &Array4<f64> {
        &self.data
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DetectorKind {
    Sobel,
    Laplacian,
    Canny,
}

impl fmt::Display for DetectorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DetectorKind::Sobel => "sobel",
            DetectorKind::Laplacian => "laplacian",
            DetectorKind::Canny => "canny",
        })
    }
}

impl FromStr for DetectorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sobel" => Ok(DetectorKind::Sobel),
            "laplacian" => Ok(DetectorKind::Laplacian),
            "canny" => Ok(DetectorKind::Canny),
            other => Err(Error::invalid(format!(
                "unknown edge detector `{other}` (expected sobel, laplacian or canny)"
            ))),
        }
    }
}

/// A detector together with its parameters.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum EdgeDetector {
    #[default]
    Sobel,
    Laplacian,
    Canny { low: f64, high: f64 },
}

impl EdgeDetector {
    pub fn from_kind(kind: DetectorKind, canny_low: f64, canny_high: f64) -> Self {
        match kind {
            DetectorKind::Sobel => EdgeDetector::Sobel,
            DetectorKind::Laplacian => EdgeDetector::Laplacian,
            DetectorKind::Canny => EdgeDetector::Canny {
                low: canny_low,
                high: canny_high,
            },
        }
    }

    pub fn kind(&self) -> DetectorKind {
        match self {
            EdgeDetector::Sobel => DetectorKind::Sobel,
            EdgeDetector::Laplacian => DetectorKind::Laplacian,
            EdgeDetector::Canny { .. } => DetectorKind::Canny,
        }
    }

    pub fn apply(&self, gray: &GrayBatch) -> Result<EdgeMap> {
        match *self {
            EdgeDetector::Sobel => Ok(sobel_edges(gray)),
            EdgeDetector::Laplacian => Ok(laplacian_edges(gray)),
            EdgeDetector::Canny { low, high } => canny_edges(gray, low, high),
        }
    }

    /// Grayscale conversion followed by the detector.
    pub fn detect(&self, images: &ImageBatch) -> Result<EdgeMap> {
        self.apply(&to_grayscale(images)?)
    }
}

/// Edge strength `[B, h, w, 1]` in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeMap {
    data: Array4<f64>,
    kind: DetectorKind,
}

impl EdgeMap {
    pub fn new(data: Array4<f64>, kind: DetectorKind) -> Result<Self> {
        if data.dim().3 != 1 {
            return Err(Error::shape("edge map needs 1 channel"));
        }
        if data.iter().any(|v| !v.is_finite() || !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("edge values must be finite and in [0, 1]"));
        }
        Ok(Self { data, kind })
    }

    pub fn data(&self) -> &Array4<f64> {
        &self.data
    }

    pub fn kind(&self) -> DetectorKind {
        self.kind
    }

    /// `(height, width)`
    pub fn spatial(&self) -> (usize, usize) {
        let (_, h, w, _) = self.data.dim();
        (h, w)
    }
}

pub fn to_grayscale(images: &ImageBatch) -> Result<GrayBatch> {
    let px = images.pixels();
    let (b, h, w, c) = px.dim();
    if c != 3 {
        return Err(Error::shape(format!("expected 3 channels, got {c}")));
    }
    let mut out = Array4::zeros((b, h, w, 1));
    Zip::from(out.lanes_mut(Axis(3)))
        .and(px.lanes(Axis(3)))
        .for_each(|mut o, p| {
            let y = LUMA_WEIGHTS[0] * f64::from(p[0])
                + LUMA_WEIGHTS[1] * f64::from(p[1])
                + LUMA_WEIGHTS[2] * f64::from(p[2]);
            o[0] = y.clamp(0.0, 1.0);
        });
    GrayBatch::new(out)
}

/// Symmetric reflection of an index into `0..n`.
#[inline]
pub(crate) fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m >= n { period - 1 - m } else { m }) as usize
}

/// 2-D correlation with reflected borders.
fn correlate<const K: usize>(img: ArrayView2<f64>, kernel: &[[f64; K]; K]) -> Array2<f64> {
    let (h, w) = img.dim();
    let r = (K / 2) as isize;
    Array2::from_shape_fn((h, w), |(y, x)| {
        let mut acc = 0.0;
        for (ky, row) in kernel.iter().enumerate() {
            let sy = reflect(y as isize + ky as isize - r, h);
            for (kx, &k) in row.iter().enumerate() {
                if k != 0.0 {
                    let sx = reflect(x as isize + kx as isize - r, w);
                    acc += k * img[[sy, sx]];
                }
            }
        }
        acc
    })
}

fn normalize_by_max(mut m: Array2<f64>) -> Array2<f64> {
    let max = m.iter().copied().fold(0.0f64, f64::max);
    if max < ZERO_MAX_EPS {
        m.fill(0.0);
    } else {
        m.mapv_inplace(|v| (v / max).clamp(0.0, 1.0));
    }
    m
}

fn map_images(gray: &GrayBatch, f: impl Fn(ArrayView2<f64>) -> Array2<f64>) -> Array4<f64> {
    let data = gray.data();
    let mut out = Array4::zeros(data.dim());
    for (src, mut dst) in data.outer_iter().zip(out.outer_iter_mut()) {
        let res = f(src.index_axis(Axis(2), 0));
        dst.index_axis_mut(Axis(2), 0).assign(&res);
    }
    out
}

fn sobel_magnitude(img: ArrayView2<f64>) -> Array2<f64> {
    let gx = correlate(img, &SOBEL_X);
    let gy = correlate(img, &SOBEL_Y);
    Zip::from(&gx).and(&gy).map_collect(|&a, &b| a.hypot(b))
}

pub fn sobel_edges(gray: &GrayBatch) -> EdgeMap {
    let data = map_images(gray, |img| normalize_by_max(sobel_magnitude(img)));
    EdgeMap {
        data,
        kind: DetectorKind::Sobel,
    }
}

pub fn laplacian_edges(gray: &GrayBatch) -> EdgeMap {
    let data = map_images(gray, |img| {
        normalize_by_max(correlate(img, &LAPLACIAN).mapv(f64::abs))
    });
    EdgeMap {
        data,
        kind: DetectorKind::Laplacian,
    }
}

/// Normalized 5×5 Gaussian kernel.
pub fn gaussian_kernel_5(sigma: f64) -> [[f64; 5]; 5] {
    let mut k = [[0.0; 5]; 5];
    let mut sum = 0.0;
    for (y, row) in k.iter_mut().enumerate() {
        for (x, v) in row.iter_mut().enumerate() {
            let dy = y as f64 - 2.0;
            let dx = x as f64 - 2.0;
            *v = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
            sum += *v;
        }
    }
    for row in k.iter_mut() {
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    k
}

/// Neighbour offsets `(dy, dx)` along the quantized gradient direction.
fn direction_offsets(gx: f64, gy: f64) -> (isize, isize) {
    let mut angle = gy.atan2(gx).to_degrees();
    if angle < 0.0 {
        angle += 180.0;
    }
    if !(22.5..157.5).contains(&angle) {
        (0, 1)
    } else if angle < 67.5 {
        (1, 1)
    } else if angle < 112.5 {
        (1, 0)
    } else {
        (1, -1)
    }
}

/// Thinned gradient magnitude of one image: Gaussian smoothing, Sobel
/// gradients normalized by the per-image max, then non-maximum suppression.
fn suppressed_magnitude(img: ArrayView2<f64>) -> Array2<f64> {
    let (h, w) = img.dim();
    let smooth = correlate(img, &gaussian_kernel_5(CANNY_SIGMA));
    let gx = correlate(smooth.view(), &SOBEL_X);
    let gy = correlate(smooth.view(), &SOBEL_Y);
    let mag = normalize_by_max(Zip::from(&gx).and(&gy).map_collect(|&a, &b| a.hypot(b)));
    let at = |y: isize, x: isize| -> f64 {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            0.0
        } else {
            mag[[y as usize, x as usize]]
        }
    };
    Array2::from_shape_fn((h, w), |(y, x)| {
        let m = mag[[y, x]];
        if m == 0.0 {
            return 0.0;
        }
        let (dy, dx) = direction_offsets(gx[[y, x]], gy[[y, x]]);
        let (yi, xi) = (y as isize, x as isize);
        let forward = at(yi + dy, xi + dx);
        let backward = at(yi - dy, xi - dx);
        // ties on a symmetric ridge resolve to the forward pixel
        if m >= backward && m > forward {
            m
        } else {
            0.0
        }
    })
}

/// The non-maximum-suppressed, max-normalized gradient magnitude that Canny
/// thresholds. Exposed so the hysteresis stage can be checked independently.
pub fn canny_suppressed_magnitude(gray: &GrayBatch) -> Array4<f64> {
    map_images(gray, suppressed_magnitude)
}

/// Double threshold plus 8-connected hysteresis on one magnitude image.
pub fn hysteresis(mag: ArrayView2<f64>, low: f64, high: f64) -> Array2<f64> {
    let (h, w) = mag.dim();
    let mut out = Array2::zeros((h, w));
    let mut queue = VecDeque::new();
    for ((y, x), &m) in mag.indexed_iter() {
        if m >= high {
            out[[y, x]] = 1.0;
            queue.push_back((y, x));
        }
    }
    while let Some((y, x)) = queue.pop_front() {
        for dy in -1isize..=1 {
            for dx in -1isize..=1 {
                let ny = y as isize + dy;
                let nx = x as isize + dx;
                if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                    continue;
                }
                let (ny, nx) = (ny as usize, nx as usize);
                if out[[ny, nx]] == 0.0 && mag[[ny, nx]] >= low {
                    out[[ny, nx]] = 1.0;
                    queue.push_back((ny, nx));
                }
            }
        }
    }
    out
}

pub fn canny_edges(gray: &GrayBatch, low: f64, high: f64) -> Result<EdgeMap> {
    validate_canny_thresholds(low, high)?;
    let data = map_images(gray, |img| {
        let thin = suppressed_magnitude(img);
        hysteresis(thin.view(), low, high)
    });
    Ok(EdgeMap {
        data,
        kind: DetectorKind::Canny,
    })
}

pub fn validate_canny_thresholds(low: f64, high: f64) -> Result<()> {
    if !(low.is_finite() && high.is_finite()) || low < 0.0 || high > 1.0 || low >= high {
        return Err(Error::invalid(format!(
            "canny thresholds must satisfy 0 <= low < high <= 1, got low={low} high={high}"
        )));
    }
    Ok(())
}

/// Source coordinate and blend weight for half-pixel-centred bilinear sampling.
#[inline]
fn sample_coord(dst: usize, src_len: usize, dst_len: usize) -> (usize, usize, f64) {
    let scale = src_len as f64 / dst_len as f64;
    let pos = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (src_len - 1) as f64);
    let i0 = pos.floor() as usize;
    let i1 = (i0 + 1).min(src_len - 1);
    (i0, i1, pos - i0 as f64)
}

/// Bilinear interpolation of a single-channel map.
pub fn resize_bilinear_2d(src: ArrayView2<f64>, target_h: usize, target_w: usize) -> Array2<f64> {
    let (h, w) = src.dim();
    if (h, w) == (target_h, target_w) {
        return src.to_owned();
    }
    let cols: Vec<_> = (0..target_w).map(|x| sample_coord(x, w, target_w)).collect();
    Array2::from_shape_fn((target_h, target_w), |(y, x)| {
        let (y0, y1, ty) = sample_coord(y, h, target_h);
        let (x0, x1, tx) = cols[x];
        let top = lerp(src[[y0, x0]], src[[y0, x1]], tx);
        let bottom = lerp(src[[y1, x0]], src[[y1, x1]], tx);
        lerp(top, bottom, ty)
    })
}

#[inline]
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + t * (b - a)
}

pub fn resize_edge_map(edge: &EdgeMap, target_h: usize, target_w: usize) -> Result<EdgeMap> {
    if target_h == 0 || target_w == 0 {
        return Err(Error::invalid(format!(
            "resize target must be positive, got {target_h}x{target_w}"
        )));
    }
    if edge.spatial() == (target_h, target_w) {
        return Ok(edge.clone());
    }
    let b = edge.data.dim().0;
    let mut out = Array4::zeros((b, target_h, target_w, 1));
    for i in 0..b {
        let src = edge.data.slice(s![i, .., .., 0]);
        let res = resize_bilinear_2d(src, target_h, target_w).mapv(|v| v.clamp(0.0, 1.0));
        out.slice_mut(s![i, .., .., 0]).assign(&res);
    }
    Ok(EdgeMap {
        data: out,
        kind: edge.kind,
    })
}
