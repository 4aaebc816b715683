//! PVTv2-B0 encoder (overlapping patch embeddings, spatial-reduction
//! attention, depthwise-conv feed-forward). Parameter names follow the
//! reference PyTorch checkpoint so converted weights load directly.

use candle_core::{Tensor, D};

use crate::error::Result;
use crate::nn::{Conv2d, ConvSpec, Init, LayerNorm, Linear, ParamInit};

pub const PVT_B0_CHANNELS: [usize; 4] = [32, 64, 160, 256];
const B0_HEADS: [usize; 4] = [1, 2, 5, 8];
const B0_MLP_RATIO: [usize; 4] = [8, 8, 4, 4];
const B0_DEPTHS: [usize; 4] = [2, 2, 2, 2];
const B0_SR_RATIO: [usize; 4] = [8, 4, 2, 1];
const LN_EPS: f64 = 1e-6;

fn linear(p: &mut ParamInit, name: &str, i: usize, o: usize) -> Result<Linear> {
    Linear::with_init(p, name, i, o, Init::Normal(0.02), Init::Zeros)
}

fn conv(p: &mut ParamInit, name: &str, spec: ConvSpec) -> Result<Conv2d> {
    let fan_out = spec.kernel * spec.kernel * spec.out_ch / spec.groups;
    Conv2d::with_init(p, name, spec, Init::Normal((2.0 / fan_out as f64).sqrt()), Init::Zeros)
}

/// `[B, N, C]` tokens ↔ `[B, C, H, W]` maps.
fn to_map(x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (b, _, c) = x.dims3()?;
    Ok(x.transpose(1, 2)?.contiguous()?.reshape((b, c, h, w))?)
}

fn to_tokens(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    Ok(x.reshape((b, c, h * w))?.transpose(1, 2)?.contiguous()?)
}

#[derive(Debug, Clone)]
struct PatchEmbed {
    proj: Conv2d,
    norm: LayerNorm,
}

impl PatchEmbed {
    fn new(p: &mut ParamInit, name: &str, spec: ConvSpec) -> Result<Self> {
        Ok(Self {
            proj: conv(p, &format!("{name}.proj"), spec)?,
            norm: LayerNorm::new(p, &format!("{name}.norm"), spec.out_ch, 1e-5)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<(Tensor, usize, usize)> {
        let y = self.proj.forward(x)?;
        let (_, _, h, w) = y.dims4()?;
        Ok((self.norm.forward(&to_tokens(&y)?)?, h, w))
    }
}

#[derive(Debug, Clone)]
struct Attention {
    q: Linear,
    kv: Linear,
    proj: Linear,
    sr: Option<(Conv2d, LayerNorm)>,
    heads: usize,
}

impl Attention {
    fn new(p: &mut ParamInit, name: &str, dim: usize, heads: usize, sr_ratio: usize) -> Result<Self> {
        let q = linear(p, &format!("{name}.q"), dim, dim)?;
        let kv = linear(p, &format!("{name}.kv"), dim, 2 * dim)?;
        let sr = if sr_ratio > 1 {
            let spec = ConvSpec::new(dim, dim, sr_ratio).stride(sr_ratio).padding(0);
            Some((
                conv(p, &format!("{name}.sr"), spec)?,
                LayerNorm::new(p, &format!("{name}.norm"), dim, 1e-5)?,
            ))
        } else {
            None
        };
        let proj = linear(p, &format!("{name}.proj"), dim, dim)?;
        Ok(Self { q, kv, proj, sr, heads })
    }

    fn forward(&self, x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
        let (b, n, c) = x.dims3()?;
        let hd = c / self.heads;
        let q = self.q.forward(x)?.reshape((b, n, self.heads, hd))?.transpose(1, 2)?.contiguous()?;
        let src = match &self.sr {
            Some((sr, norm)) => norm.forward(&to_tokens(&sr.forward(&to_map(x, h, w)?)?)?)?,
            None => x.clone(),
        };
        let m = src.dim(1)?;
        let kv = self.kv.forward(&src)?.reshape((b, m, 2, self.heads, hd))?;
        let k = kv.narrow(2, 0, 1)?.squeeze(2)?.transpose(1, 2)?.contiguous()?;
        let v = kv.narrow(2, 1, 1)?.squeeze(2)?.transpose(1, 2)?.contiguous()?;
        let scores = (q.matmul(&k.t()?)? * (hd as f64).powf(-0.5))?;
        let attn = candle_nn::ops::softmax(&scores, D::Minus1)?;
        let out = attn.matmul(&v)?.transpose(1, 2)?.contiguous()?.reshape((b, n, c))?;
        self.proj.forward(&out)
    }
}

#[derive(Debug, Clone)]
struct Mlp {
    fc1: Linear,
    dwconv: Conv2d,
    fc2: Linear,
}

impl Mlp {
    fn new(p: &mut ParamInit, name: &str, dim: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            fc1: linear(p, &format!("{name}.fc1"), dim, hidden)?,
            dwconv: conv(
                p,
                &format!("{name}.dwconv.dwconv"),
                ConvSpec::new(hidden, hidden, 3).groups(hidden),
            )?,
            fc2: linear(p, &format!("{name}.fc2"), hidden, dim)?,
        })
    }

    fn forward(&self, x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
        let y = self.fc1.forward(x)?;
        let y = to_tokens(&self.dwconv.forward(&to_map(&y, h, w)?)?)?.gelu_erf()?;
        self.fc2.forward(&y)
    }
}

#[derive(Debug, Clone)]
struct Block {
    norm1: LayerNorm,
    attn: Attention,
    norm2: LayerNorm,
    mlp: Mlp,
}

impl Block {
    fn forward(&self, x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
        let x = (x + self.attn.forward(&self.norm1.forward(x)?, h, w)?)?;
        Ok((&x + self.mlp.forward(&self.norm2.forward(&x)?, h, w)?)?)
    }
}

#[derive(Debug, Clone)]
struct Stage {
    embed: PatchEmbed,
    blocks: Vec<Block>,
    norm: LayerNorm,
}

#[derive(Debug, Clone)]
pub struct PvtBackbone {
    stages: Vec<Stage>,
}

impl PvtBackbone {
    pub fn b0(p: &mut ParamInit) -> Result<Self> {
        let mut stages = Vec::with_capacity(4);
        let mut prev = 3;
        for i in 0..4 {
            let dim = PVT_B0_CHANNELS[i];
            let n = i + 1;
            let spec = if i == 0 {
                ConvSpec::new(prev, dim, 7).stride(4).padding(3)
            } else {
                ConvSpec::new(prev, dim, 3).stride(2).padding(1)
            };
            let embed = PatchEmbed::new(p, &format!("backbone.patch_embed{n}"), spec)?;
            let blocks = (0..B0_DEPTHS[i])
                .map(|j| {
                    let name = format!("backbone.block{n}.{j}");
                    Ok(Block {
                        norm1: LayerNorm::new(p, &format!("{name}.norm1"), dim, LN_EPS)?,
                        attn: Attention::new(p, &format!("{name}.attn"), dim, B0_HEADS[i], B0_SR_RATIO[i])?,
                        norm2: LayerNorm::new(p, &format!("{name}.norm2"), dim, LN_EPS)?,
                        mlp: Mlp::new(p, &format!("{name}.mlp"), dim, dim * B0_MLP_RATIO[i])?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let norm = LayerNorm::new(p, &format!("backbone.norm{n}"), dim, LN_EPS)?;
            stages.push(Stage { embed, blocks, norm });
            prev = dim;
        }
        Ok(Self { stages })
    }

    pub fn forward(&self, x: &Tensor) -> Result<[Tensor; 4]> {
        let mut h = x.clone();
        let mut out = Vec::with_capacity(4);
        for stage in &self.stages {
            let (mut tokens, gh, gw) = stage.embed.forward(&h)?;
            for block in &stage.blocks {
                tokens = block.forward(&tokens, gh, gw)?;
            }
            let map = to_map(&stage.norm.forward(&tokens)?, gh, gw)?;
            out.push(map.clone());
            h = map;
        }
        Ok(out.try_into().expect("four stages"))
    }
}
