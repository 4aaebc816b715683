//! Independent reference computations shared by the integration tests and
//! the acceptance runner. Everything here is written with plain loops over
//! `Vec`s so it shares no code with the library under test.
#![allow(dead_code)]

use candle_core::{DType, Device, Tensor, Var};
use edgeguide::eg::EgModule;
use edgeguide::nn::Parameterized;
use ndarray::Array4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform_vec(r: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| r.random_range(lo..hi)).collect()
}

pub fn tensor(values: Vec<f64>, shape: &[usize]) -> Tensor {
    Tensor::from_vec(values, shape, &Device::Cpu).unwrap()
}

pub fn flat(t: &Tensor) -> Vec<f64> {
    t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

// ---------------------------------------------------------------- edges

/// Mirror index including the edge pixel: -1 → 0, n → n-1.
fn mirror(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= n {
            i = 2 * n - i - 1;
        } else {
            return i as usize;
        }
    }
}

/// Direct 3×3 correlation with mirrored borders on a row-major image.
pub fn correlate3(img: &[f64], h: usize, w: usize, k: [[f64; 3]; 3]) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (ky, row) in k.iter().enumerate() {
                for (kx, &kv) in row.iter().enumerate() {
                    let sy = mirror(y as isize + ky as isize - 1, h);
                    let sx = mirror(x as isize + kx as isize - 1, w);
                    acc += kv * img[sy * w + sx];
                }
            }
            out[y * w + x] = acc;
        }
    }
    out
}

fn max_normalize(v: Vec<f64>) -> Vec<f64> {
    let m = v.iter().cloned().fold(0.0, f64::max);
    if m < 1e-8 {
        vec![0.0; v.len()]
    } else {
        v.into_iter().map(|x| x / m).collect()
    }
}

pub fn sobel_oracle(img: &[f64], h: usize, w: usize) -> Vec<f64> {
    let gx = correlate3(img, h, w, [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]]);
    let gy = correlate3(img, h, w, [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]]);
    max_normalize(gx.iter().zip(&gy).map(|(a, b)| (a * a + b * b).sqrt()).collect())
}

pub fn laplacian_oracle(img: &[f64], h: usize, w: usize) -> Vec<f64> {
    let l = correlate3(img, h, w, [[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]]);
    max_normalize(l.into_iter().map(f64::abs).collect())
}

/// Hysteresis by depth-first flood fill from every strong pixel.
pub fn hysteresis_oracle(mag: &[f64], h: usize, w: usize, low: f64, high: f64) -> Vec<u8> {
    let mut keep = vec![0u8; h * w];
    for start in 0..h * w {
        if mag[start] < high || keep[start] == 1 {
            continue;
        }
        let mut stack = vec![start];
        keep[start] = 1;
        while let Some(p) = stack.pop() {
            let (y, x) = ((p / w) as isize, (p % w) as isize);
            for ny in y - 1..=y + 1 {
                for nx in x - 1..=x + 1 {
                    if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                        continue;
                    }
                    let q = ny as usize * w + nx as usize;
                    if keep[q] == 0 && mag[q] >= low {
                        keep[q] = 1;
                        stack.push(q);
                    }
                }
            }
        }
    }
    keep
}

pub fn random_gray(r: &mut ChaCha8Rng, h: usize, w: usize) -> Vec<f64> {
    uniform_vec(r, h * w, 0.0, 1.0)
}

pub fn gray_batch(img: &[f64], h: usize, w: usize) -> edgeguide::edge::GrayBatch {
    edgeguide::edge::GrayBatch::new(Array4::from_shape_vec((1, h, w, 1), img.to_vec()).unwrap()).unwrap()
}

// ------------------------------------------------------- edge guiding

/// `[B, C, H, W]` row-major feature map.
#[derive(Clone, Debug)]
pub struct Fmap {
    pub b: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub v: Vec<f64>,
}

impl Fmap {
    pub fn at(&self, b: usize, c: usize, y: usize, x: usize) -> f64 {
        self.v[((b * self.c + c) * self.h + y) * self.w + x]
    }

    pub fn from_tensor(t: &Tensor) -> Self {
        let (b, c, h, w) = t.dims4().unwrap();
        Fmap { b, c, h, w, v: flat(t) }
    }

    pub fn to_tensor(&self) -> Tensor {
        tensor(self.v.clone(), &[self.b, self.c, self.h, self.w])
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `z ⊗ σ(conv3x3(z))` with zero padding; `wt` is `[C][3][3]`.
pub fn bam_oracle(z: &Fmap, wt: &[f64], bias: f64) -> Fmap {
    let mut out = z.clone();
    for b in 0..z.b {
        for y in 0..z.h {
            for x in 0..z.w {
                let mut acc = bias;
                for c in 0..z.c {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let sy = y as isize + ky as isize - 1;
                            let sx = x as isize + kx as isize - 1;
                            if sy < 0 || sx < 0 || sy >= z.h as isize || sx >= z.w as isize {
                                continue;
                            }
                            acc += wt[(c * 3 + ky) * 3 + kx] * z.at(b, c, sy as usize, sx as usize);
                        }
                    }
                }
                let m = sigmoid(acc);
                for c in 0..z.c {
                    out.v[((b * z.c + c) * z.h + y) * z.w + x] = z.at(b, c, y, x) * m;
                }
            }
        }
    }
    out
}

/// `y = W x + b` with `W` row-major `[out][in]`.
pub fn dense(x: &[f64], wt: &[f64], bias: &[f64]) -> Vec<f64> {
    let (o, i) = (bias.len(), x.len());
    (0..o).map(|r| bias[r] + (0..i).map(|k| wt[r * i + k] * x[k]).sum::<f64>()).collect()
}

pub struct CamParams {
    pub w0: Vec<f64>,
    pub b0: Vec<f64>,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
}

pub fn cam_oracle(z: &Fmap, p: &CamParams) -> Fmap {
    let mut out = z.clone();
    let n = (z.h * z.w) as f64;
    for b in 0..z.b {
        let mut avg = vec![0.0; z.c];
        let mut mx = vec![f64::NEG_INFINITY; z.c];
        for c in 0..z.c {
            for y in 0..z.h {
                for x in 0..z.w {
                    let v = z.at(b, c, y, x);
                    avg[c] += v / n;
                    mx[c] = mx[c].max(v);
                }
            }
        }
        let path = |d: &[f64]| {
            let hidden: Vec<f64> = dense(d, &p.w0, &p.b0).into_iter().map(|v| v.max(0.0)).collect();
            dense(&hidden, &p.w1, &p.b1)
        };
        let (pa, pm) = (path(&avg), path(&mx));
        for c in 0..z.c {
            let a = sigmoid(pa[c] + pm[c]);
            for y in 0..z.h {
                for x in 0..z.w {
                    out.v[((b * z.c + c) * z.h + y) * z.w + x] = z.at(b, c, y, x) * a;
                }
            }
        }
    }
    out
}

pub struct ProjParams {
    pub w: Vec<f64>,
    pub bias: Vec<f64>,
    pub scale: Vec<f64>,
    pub shift: Vec<f64>,
}

pub fn gap(z: &Fmap) -> Vec<Vec<f64>> {
    let n = (z.h * z.w) as f64;
    (0..z.b)
        .map(|b| {
            (0..z.c)
                .map(|c| {
                    let mut s = 0.0;
                    for y in 0..z.h {
                        for x in 0..z.w {
                            s += z.at(b, c, y, x);
                        }
                    }
                    s / n
                })
                .collect()
        })
        .collect()
}

/// Eval-mode projection with given running statistics.
pub fn projection_eval_oracle(z: &Fmap, p: &ProjParams, mean: &[f64], var: &[f64]) -> Vec<Vec<f64>> {
    gap(z)
        .iter()
        .map(|g| {
            dense(g, &p.w, &p.bias)
                .iter()
                .enumerate()
                .map(|(j, &v)| ((v - mean[j]) / (var[j] + 1e-5).sqrt() * p.scale[j] + p.shift[j]).max(0.0))
                .collect()
        })
        .collect()
}

/// Pre-affine batch-normalized values in training mode, `[B][d]`.
pub fn batchnorm_train_oracle(z: &Fmap, p: &ProjParams) -> Vec<Vec<f64>> {
    let lin: Vec<Vec<f64>> = gap(z).iter().map(|g| dense(g, &p.w, &p.bias)).collect();
    let (b, d) = (lin.len(), lin[0].len());
    let mut out = vec![vec![0.0; d]; b];
    for j in 0..d {
        let mean = lin.iter().map(|r| r[j]).sum::<f64>() / b as f64;
        let var = lin.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / b as f64;
        for i in 0..b {
            out[i][j] = (lin[i][j] - mean) / (var + 1e-5).sqrt();
        }
    }
    out
}

/// Named parameter of an edge-guiding module, by suffix.
pub fn var(m: &EgModule, suffix: &str) -> Var {
    m.named_vars()
        .into_iter()
        .find(|(n, _)| n.ends_with(suffix))
        .unwrap_or_else(|| panic!("no parameter ending in {suffix}"))
        .1
}

pub fn randomize(vars: &[(String, Var)], seed: u64, scale: f64) {
    let mut r = rng(seed);
    for (_, v) in vars {
        let n = v.elem_count();
        let t = tensor(uniform_vec(&mut r, n, -scale, scale), v.dims()).to_dtype(v.dtype()).unwrap();
        v.set(&t).unwrap();
    }
}

pub fn zero_var(v: &Var) {
    v.set(&v.zeros_like().unwrap()).unwrap();
}

// -------------------------------------------------------------- losses

pub fn bce_oracle(logits: &[f64], gt: &[f64]) -> f64 {
    let n = logits.len() as f64;
    logits
        .iter()
        .zip(gt)
        .map(|(&x, &y)| {
            let p = sigmoid(x);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum::<f64>()
        / n
}

/// Per-image soft Dice loss, batch mean, ε = 1.
pub fn dice_oracle(logits: &[f64], gt: &[f64], batch: usize) -> f64 {
    let per = logits.len() / batch;
    let mut total = 0.0;
    for b in 0..batch {
        let (mut inter, mut ps, mut gs) = (0.0, 0.0, 0.0);
        for i in b * per..(b + 1) * per {
            let p = sigmoid(logits[i]);
            inter += p * gt[i];
            ps += p;
            gs += gt[i];
        }
        total += 1.0 - (2.0 * inter + 1.0) / (ps + gs + 1.0);
    }
    total / batch as f64
}

/// Per-image `(dice, iou)` by pixel counting.
pub fn overlap_oracle(pred: &[u8], gt: &[u8]) -> (f64, f64) {
    let (mut i, mut p, mut g, mut u) = (0usize, 0usize, 0usize, 0usize);
    for (&a, &b) in pred.iter().zip(gt) {
        i += (a == 1 && b == 1) as usize;
        p += (a == 1) as usize;
        g += (b == 1) as usize;
        u += (a == 1 || b == 1) as usize;
    }
    let dice = if p + g == 0 { 1.0 } else { 2.0 * i as f64 / (p + g) as f64 };
    let iou = if u == 0 { 1.0 } else { i as f64 / u as f64 };
    (dice, iou)
}

// ------------------------------------------------------- gradients

/// Worst relative error `|a - n| / max(|a|, |n|, denom_floor)` between
/// analytic and central-difference gradients of `loss` over every element
/// of `vars`, and the number of elements whose gradient exceeds the floor.
pub fn gradient_check(
    vars: &[(String, Var)],
    step: f64,
    denom_floor: f64,
    loss: impl Fn() -> Tensor,
) -> (f64, String, usize) {
    let l = loss();
    let grads = l.backward().unwrap();
    let mut worst = (0.0f64, String::new());
    let mut live = 0;
    for (name, v) in vars {
        let analytic = grads.get(v.as_tensor()).map(flat).unwrap_or_else(|| vec![0.0; v.elem_count()]);
        let base = flat(v.as_tensor());
        for i in 0..base.len() {
            let mut plus = base.clone();
            plus[i] += step;
            v.set(&tensor(plus, v.dims())).unwrap();
            let lp = flat(&loss())[0];
            let mut minus = base.clone();
            minus[i] -= step;
            v.set(&tensor(minus, v.dims())).unwrap();
            let lm = flat(&loss())[0];
            v.set(&tensor(base.clone(), v.dims())).unwrap();
            let numeric = (lp - lm) / (2.0 * step);
            let a = analytic[i];
            let diff = (a - numeric).abs();
            let scale = a.abs().max(numeric.abs());
            live += usize::from(scale > denom_floor);
            let rel = diff / scale.max(denom_floor);
            if rel > worst.0 {
                worst = (rel, format!("{name}[{i}] analytic={a:e} numeric={numeric:e}"));
            }
        }
    }
    (worst.0, worst.1, live)
}
