//! Minimal layer toolkit on top of candle tensors.
//!
//! Layers own plain tensors. A [`ParamInit`] hands those tensors out and, for
//! trainable models, keeps the backing [`Var`]s in declaration order so that
//! optimizers, checkpoints and parameter counts all see the same list.
//! Initialization is drawn from a seeded ChaCha stream, never from candle's
//! global RNG, so a seed fully determines a model.

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::trace;

/// A named trainable parameter.
pub type NamedVar = (String, Var);

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    Constant(f64),
    Uniform(f64),
    Normal(f64),
    /// He-normal for a ReLU layer with the given fan-in.
    He(usize),
}

pub struct ParamInit {
    rng: ChaCha8Rng,
    dtype: DType,
    device: Device,
    trainable: bool,
    vars: Vec<NamedVar>,
    frozen: Vec<(String, Tensor)>,
}

impl ParamInit {
    pub fn trainable(seed: u64, dtype: DType, device: &Device) -> Self {
        Self::new(seed, dtype, device, true)
    }

    pub fn frozen(seed: u64, dtype: DType, device: &Device) -> Self {
        Self::new(seed, dtype, device, false)
    }

    fn new(seed: u64, dtype: DType, device: &Device, trainable: bool) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            dtype,
            device: device.clone(),
            trainable,
            vars: Vec::new(),
            frozen: Vec::new(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn tensor(&mut self, name: impl Into<String>, shape: &[usize], init: Init) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Constant(c) => vec![c; n],
            Init::Uniform(bound) => {
                let dist = Uniform::new_inclusive(-bound, bound)
                    .map_err(|e| Error::invalid(e.to_string()))?;
                (0..n).map(|_| dist.sample(&mut self.rng)).collect()
            }
            Init::Normal(std) => normal_values(&mut self.rng, n, std)?,
            Init::He(fan_in) => normal_values(&mut self.rng, n, (2.0 / fan_in.max(1) as f64).sqrt())?,
        };
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let name = name.into();
        if self.trainable {
            let var = Var::from_tensor(&t)?;
            let handle = var.as_tensor().clone();
            self.vars.push((name, var));
            Ok(handle)
        } else {
            self.frozen.push((name, t.clone()));
            Ok(t)
        }
    }

    /// Trainable parameters in declaration order.
    pub fn into_vars(self) -> Vec<NamedVar> {
        self.vars
    }

    /// Frozen tensors in declaration order.
    pub fn into_frozen(self) -> Vec<(String, Tensor)> {
        self.frozen
    }
}

fn normal_values(rng: &mut impl Rng, n: usize, std: f64) -> Result<Vec<f64>> {
    let dist = Normal::new(0.0, std).map_err(|e| Error::invalid(e.to_string()))?;
    Ok((0..n).map(|_| dist.sample(rng)).collect())
}

/// Anything that owns trainable parameters.
pub trait Parameterized {
    fn named_vars(&self) -> Vec<NamedVar>;

    fn trainable_count(&self) -> usize {
        self.named_vars().iter().map(|(_, v)| v.elem_count()).sum()
    }
}

pub fn count_vars(vars: &[NamedVar]) -> usize {
    vars.iter().map(|(_, v)| v.elem_count()).sum()
}

/// Raw little-endian bytes of a float tensor in its native dtype.
pub fn tensor_bytes(t: &Tensor) -> Result<Vec<u8>> {
    let flat = t.flatten_all()?;
    Ok(match t.dtype() {
        DType::F64 => flat.to_vec1::<f64>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        DType::F32 => flat.to_vec1::<f32>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        other => return Err(Error::invalid(format!("unsupported dtype {other:?}"))),
    })
}

/// SHA-256 over names, shapes and raw bytes of a tensor list.
pub fn digest_tensors<'a>(items: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Result<String> {
    let mut h = Sha256::new();
    for (name, t) in items {
        h.update(name.as_bytes());
        for d in t.dims() {
            h.update((*d as u64).to_le_bytes());
        }
        h.update(tensor_bytes(t)?);
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

pub fn digest_vars(vars: &[NamedVar]) -> Result<String> {
    digest_tensors(vars.iter().map(|(n, v)| (n.as_str(), v.as_tensor())))
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::sigmoid(x)?)
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    name: String,
    weight: Tensor,
    bias: Option<Tensor>,
    stride: usize,
    padding: usize,
    groups: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct ConvSpec {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    pub bias: bool,
}

impl ConvSpec {
    pub fn new(in_ch: usize, out_ch: usize, kernel: usize) -> Self {
        Self {
            in_ch,
            out_ch,
            kernel,
            stride: 1,
            padding: kernel / 2,
            groups: 1,
            bias: true,
        }
    }

    pub fn stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn padding(mut self, padding: usize) -> Self {
        self.padding = padding;
        self
    }

    pub fn groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn param_count(&self) -> usize {
        self.out_ch * (self.in_ch / self.groups) * self.kernel * self.kernel
            + if self.bias { self.out_ch } else { 0 }
    }
}

impl Conv2d {
    /// He-normal weights, zero bias.
    pub fn new(p: &mut ParamInit, name: &str, spec: ConvSpec) -> Result<Self> {
        let fan_in = spec.in_ch / spec.groups * spec.kernel * spec.kernel;
        Self::with_init(p, name, spec, Init::He(fan_in), Init::Zeros)
    }

    pub fn with_init(p: &mut ParamInit, name: &str, spec: ConvSpec, w: Init, b: Init) -> Result<Self> {
        if spec.groups == 0 || !spec.in_ch.is_multiple_of(spec.groups) || !spec.out_ch.is_multiple_of(spec.groups) {
            return Err(Error::invalid(format!("{name}: channels not divisible by groups")));
        }
        let weight = p.tensor(
            format!("{name}.weight"),
            &[spec.out_ch, spec.in_ch / spec.groups, spec.kernel, spec.kernel],
            w,
        )?;
        let bias = if spec.bias {
            Some(p.tensor(format!("{name}.bias"), &[spec.out_ch], b)?)
        } else {
            None
        };
        Ok(Self {
            name: name.to_string(),
            weight,
            bias,
            stride: spec.stride,
            padding: spec.padding,
            groups: spec.groups,
        })
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(&self.weight, self.padding, self.stride, 1, self.groups)?;
        let y = match &self.bias {
            Some(b) => y.broadcast_add(&b.reshape((1, b.dim(0)?, 1, 1))?)?,
            None => y,
        };
        if trace::enabled() {
            let (b, out_c, oh, ow) = y.dims4()?;
            let (_, in_per_group, kh, kw) = self.weight.dims4()?;
            let macs = (b * out_c * oh * ow * in_per_group * kh * kw) as u64;
            trace::record(&self.name, "conv2d", y.dims(), macs);
        }
        Ok(y)
    }
}

/// Fully connected layer; weight stored as `[out, in]`.
#[derive(Debug, Clone)]
pub struct Linear {
    name: String,
    weight: Tensor,
    bias: Option<Tensor>,
}

impl Linear {
    pub fn new(p: &mut ParamInit, name: &str, in_dim: usize, out_dim: usize) -> Result<Self> {
        let bound = 1.0 / (in_dim.max(1) as f64).sqrt();
        Self::with_init(p, name, in_dim, out_dim, Init::Uniform(bound), Init::Uniform(bound))
    }

    pub fn with_init(
        p: &mut ParamInit,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        w: Init,
        b: Init,
    ) -> Result<Self> {
        let weight = p.tensor(format!("{name}.weight"), &[out_dim, in_dim], w)?;
        let bias = Some(p.tensor(format!("{name}.bias"), &[out_dim], b)?);
        Ok(Self {
            name: name.to_string(),
            weight,
            bias,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> Option<&Tensor> {
        self.bias.as_ref()
    }

    /// `x`: `[..., in]` → `[..., out]`
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let last = *dims.last().ok_or_else(|| Error::shape("linear input is a scalar"))?;
        if last != self.in_dim() {
            return Err(Error::shape(format!(
                "{}: expected input width {}, got {last}",
                self.name,
                self.in_dim()
            )));
        }
        let rows = x.elem_count() / last;
        let y = x.reshape((rows, last))?.matmul(&self.weight.t()?)?;
        let y = match &self.bias {
            Some(b) => y.broadcast_add(b)?,
            None => y,
        };
        let mut out_dims = dims;
        *out_dims.last_mut().unwrap() = self.out_dim();
        let y = y.reshape(out_dims)?;
        if trace::enabled() {
            trace::record(&self.name, "linear", y.dims(), (rows * self.in_dim() * self.out_dim()) as u64);
        }
        Ok(y)
    }
}

/// Layer normalization over the last dimension.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(p: &mut ParamInit, name: &str, dim: usize, eps: f64) -> Result<Self> {
        Ok(Self {
            weight: p.tensor(format!("{name}.weight"), &[dim], Init::Ones)?,
            bias: p.tensor(format!("{name}.bias"), &[dim], Init::Zeros)?,
            eps,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let last = x.rank() - 1;
        let mean = x.mean_keepdim(last)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(last)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.weight)?.broadcast_add(&self.bias)?)
    }
}

/// Per-axis bilinear sampling matrix `[dst, src]` with half-pixel centres.
pub fn bilinear_matrix(src: usize, dst: usize) -> Vec<f64> {
    let mut m = vec![0.0; dst * src];
    let scale = src as f64 / dst as f64;
    for i in 0..dst {
        let pos = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
        let i0 = pos.floor() as usize;
        let i1 = (i0 + 1).min(src - 1);
        let t = pos - i0 as f64;
        m[i * src + i0] += 1.0 - t;
        m[i * src + i1] += t;
    }
    m
}

/// Per-axis adaptive average pooling matrix `[dst, src]`.
pub fn adaptive_avg_matrix(src: usize, dst: usize) -> Vec<f64> {
    let mut m = vec![0.0; dst * src];
    for i in 0..dst {
        let start = i * src / dst;
        let end = ((i + 1) * src).div_ceil(dst);
        let w = 1.0 / (end - start) as f64;
        for j in start..end {
            m[i * src + j] = w;
        }
    }
    m
}

/// Applies separable per-axis matrices to `[B, C, h, w]`:
/// `out = rows · x · colsᵀ`, giving `[B, C, H, W]`.
fn separable(x: &Tensor, rows: Vec<f64>, cols: Vec<f64>, dst_h: usize, dst_w: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let dev = x.device();
    let dt = x.dtype();
    let cols_t = Tensor::from_vec(cols, (dst_w, w), dev)?.to_dtype(dt)?.t()?;
    let rows_t = Tensor::from_vec(rows, (dst_h, h), dev)?.to_dtype(dt)?.t()?;
    // [B*C*h, w] · [w, W]
    let y = x.reshape((b * c * h, w))?.matmul(&cols_t)?;
    // [B*C, W, h] · [h, H]
    let y = y.reshape((b * c, h, dst_w))?.transpose(1, 2)?.contiguous()?;
    let y = y.reshape((b * c * dst_w, h))?.matmul(&rows_t)?;
    let y = y.reshape((b * c, dst_w, dst_h))?.transpose(1, 2)?.contiguous()?;
    Ok(y.reshape((b, c, dst_h, dst_w))?)
}

/// Differentiable bilinear resize of `[B, C, h, w]`.
pub fn resize_bilinear(x: &Tensor, dst_h: usize, dst_w: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if (h, w) == (dst_h, dst_w) {
        return Ok(x.clone());
    }
    if dst_h == 0 || dst_w == 0 {
        return Err(Error::invalid("resize target must be positive"));
    }
    separable(x, bilinear_matrix(h, dst_h), bilinear_matrix(w, dst_w), dst_h, dst_w)
}

/// Differentiable adaptive average pooling of `[B, C, h, w]` to `[B, C, H, W]`.
pub fn adaptive_avg_pool(x: &Tensor, dst_h: usize, dst_w: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if (h, w) == (dst_h, dst_w) {
        return Ok(x.clone());
    }
    if dst_h == 0 || dst_w == 0 {
        return Err(Error::invalid("pool target must be positive"));
    }
    separable(x, adaptive_avg_matrix(h, dst_h), adaptive_avg_matrix(w, dst_w), dst_h, dst_w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn seeded_init_is_reproducible() {
        let dev = Device::Cpu;
        let mut a = ParamInit::trainable(7, DType::F64, &dev);
        let mut b = ParamInit::trainable(7, DType::F64, &dev);
        let ta = a.tensor("w", &[4, 5], Init::He(20)).unwrap();
        let tb = b.tensor("w", &[4, 5], Init::He(20)).unwrap();
        assert_eq!(tensor_bytes(&ta).unwrap(), tensor_bytes(&tb).unwrap());
        assert_eq!(a.into_vars().len(), 1);
    }

    #[test]
    fn frozen_init_has_no_vars() {
        let mut p = ParamInit::frozen(1, DType::F32, &Device::Cpu);
        Conv2d::new(&mut p, "c", ConvSpec::new(3, 4, 3)).unwrap();
        let frozen = p.into_frozen();
        assert_eq!(frozen.len(), 2);
    }

    #[test]
    fn linear_param_count() {
        let mut p = ParamInit::trainable(0, DType::F32, &Device::Cpu);
        let _lin = Linear::new(&mut p, "fc", 10, 5).unwrap();
        assert_eq!(count_vars(&p.into_vars()), 55);
    }

    #[test]
    fn bilinear_matrix_rows_sum_to_one() {
        for (s, d) in [(2, 4), (5, 3), (11, 352), (1, 7)] {
            let m = bilinear_matrix(s, d);
            for r in 0..d {
                let sum: f64 = m[r * s..(r + 1) * s].iter().sum();
                assert_abs_diff_eq!(sum, 1.0, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn resize_bilinear_matches_host_resize() {
        let dev = Device::Cpu;
        let vals: Vec<f64> = (0..12).map(|i| (i * 7 % 5) as f64 / 4.0).collect();
        let host = ndarray::Array2::from_shape_vec((3, 4), vals.clone()).unwrap();
        let t = Tensor::from_vec(vals, (1, 1, 3, 4), &dev).unwrap();
        let r = resize_bilinear(&t, 5, 9).unwrap().squeeze(0).unwrap().squeeze(0).unwrap();
        let r = r.to_vec2::<f64>().unwrap();
        let expect = crate::edge::resize_bilinear_2d(host.view(), 5, 9);
        for y in 0..5 {
            for x in 0..9 {
                assert_abs_diff_eq!(r[y][x], expect[[y, x]], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn adaptive_pool_averages_blocks() {
        let dev = Device::Cpu;
        let t = Tensor::arange(0f64, 16.0, &dev).unwrap().reshape((1, 1, 4, 4)).unwrap();
        let p = adaptive_avg_pool(&t, 2, 2).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(p, vec![2.5, 4.5, 10.5, 12.5]);
    }

    #[test]
    fn trace_counts_linear_and_conv_flops() {
        let dev = Device::Cpu;
        let mut p = ParamInit::trainable(0, DType::F32, &dev);
        let lin = Linear::new(&mut p, "fc", 10, 5).unwrap();
        let conv = Conv2d::new(&mut p, "conv", ConvSpec::new(8, 8, 1)).unwrap();
        let (_, macs) = trace::count_macs(|| lin.forward(&Tensor::zeros((1, 10), DType::F32, &dev)?)).unwrap();
        assert_eq!(2 * macs, 100);
        let (_, macs) =
            trace::count_macs(|| conv.forward(&Tensor::zeros((1, 8, 4, 4), DType::F32, &dev)?)).unwrap();
        assert_eq!(2 * macs, 2048);
    }
}
