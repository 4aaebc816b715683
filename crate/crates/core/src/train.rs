//! Training loop, evaluation and checkpoint plumbing.
//!
//! Each step: the frozen teacher encodes the batch, the student produces its
//! pyramid and logits, both edge-guiding branches embed their side's
//! features, and `guide + seg` is minimized over student and edge-guiding
//! parameters only.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Tensor, Var};
use candle_nn::optim::{AdamW, Optimizer, ParamsAdamW};
use serde::Serialize;

use crate::checkpoint::Checkpoint;
use crate::config::TrainConfig;
use crate::data::{make_batches, read_gray, Batch, BatchOptions, DatasetManifest};
use crate::edge::EdgeDetector;
use crate::eg::{EgConfig, EgModule, Side};
use crate::error::{Error, Result};
use crate::losses::{guide_loss, scalar, seg_loss, total_loss, LossBreakdown};
use crate::metrics::MetricAccumulator;
use crate::models::{estimate_flops, gflops, Student, Teacher, TEACHER_CHANNELS};
use crate::nn::{resize_bilinear, NamedVar, Parameterized};
use crate::types::{ImageBatch, MaskBatch};

pub const ADAM_BETAS: (f64, f64) = (0.9, 0.999);
pub const ADAM_EPS: f64 = 1e-8;
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";

/// The two edge-guiding branches. `student_side` is `None` when weights are
/// shared, in which case the teacher-side module serves both.
#[derive(Debug, Clone)]
pub struct Guidance {
    teacher_side: EgModule,
    student_side: Option<EgModule>,
}

impl Guidance {
    pub fn teacher_side(&self) -> &EgModule {
        &self.teacher_side
    }

    pub fn student_side(&self) -> &EgModule {
        self.student_side.as_ref().unwrap_or(&self.teacher_side)
    }

    fn modules(&self) -> impl Iterator<Item = &EgModule> {
        std::iter::once(&self.teacher_side).chain(self.student_side.as_ref())
    }

    fn modules_mut(&mut self) -> impl Iterator<Item = &mut EgModule> {
        std::iter::once(&mut self.teacher_side).chain(self.student_side.as_mut())
    }
}

/// Tensors from one forward pass over a batch.
#[derive(Debug, Clone)]
pub struct StepTensors {
    pub seg: Tensor,
    pub guide: Option<Tensor>,
    pub total: Tensor,
    pub e_sam: Option<Tensor>,
    pub e_seg: Option<Tensor>,
}

impl StepTensors {
    pub fn breakdown(&self) -> Result<LossBreakdown> {
        let seg = scalar(&self.seg)?;
        let guide = match &self.guide {
            Some(g) => scalar(g)?,
            None => 0.0,
        };
        Ok(total_loss(guide, seg))
    }
}

/// Teacher, student and edge-guiding branches for one configuration.
#[derive(Debug)]
pub struct Framework {
    config: TrainConfig,
    device: Device,
    dtype: DType,
    teacher: Option<Teacher>,
    student: Student,
    guidance: Option<Guidance>,
    detector: EdgeDetector,
    epoch: usize,
}

impl Framework {
    pub fn new(config: TrainConfig) -> Result<Self> {
        Self::build(config, false)
    }

    fn build(mut config: TrainConfig, restoring: bool) -> Result<Self> {
        config.validate()?;
        let device = Device::Cpu;
        let dtype = config.precision.dtype();
        let student = if restoring {
            Student::skeleton(&config.student_config(), dtype, &device)?
        } else {
            Student::new(&config.student_config(), dtype, &device)?
        };
        // record what was actually built, after any adapter fallback
        config.student = student.kind();
        let (teacher, guidance) = if config.use_sam_guiding {
            let teacher = Teacher::new(&config.teacher_config(), dtype, &device)?;
            config.teacher = teacher.kind();
            let student_c = student.channels()[3];
            let eg = |side: Side, channels: usize, salt: u64| {
                let mut c = EgConfig::new(side, channels);
                c.embed_dim = config.d;
                c.reduction = config.reduction;
                c.use_edges = config.use_eg;
                EgModule::new(c, config.seed ^ salt, dtype, &device)
            };
            let teacher_side = eg(Side::Teacher, TEACHER_CHANNELS, 0xE6_0001)?;
            let student_side = if config.share_eg {
                if student_c != TEACHER_CHANNELS {
                    return Err(Error::Config(format!(
                        "share_eg needs the student's last scale to have {TEACHER_CHANNELS} channels, it has {student_c}"
                    )));
                }
                None
            } else {
                Some(eg(Side::Student, student_c, 0xE6_0002)?)
            };
            (
                Some(teacher),
                Some(Guidance {
                    teacher_side,
                    student_side,
                }),
            )
        } else {
            (None, None)
        };
        let detector = config.detector();
        Ok(Self {
            config,
            device,
            dtype,
            teacher,
            student,
            guidance,
            detector,
            epoch: 0,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn student(&self) -> &Student {
        &self.student
    }

    pub fn teacher(&self) -> Option<&Teacher> {
        self.teacher.as_ref()
    }

    pub fn guidance(&self) -> Option<&Guidance> {
        self.guidance.as_ref()
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    /// Student parameters followed by edge-guiding parameters.
    pub fn trainable_vars(&self) -> Vec<NamedVar> {
        let mut vars = self.student.named_vars();
        if let Some(g) = &self.guidance {
            for m in g.modules() {
                vars.extend(m.named_vars());
            }
        }
        vars
    }

    pub fn buffers(&self) -> Vec<(String, Tensor)> {
        self.guidance
            .iter()
            .flat_map(|g| g.modules().flat_map(|m| m.buffers()).collect::<Vec<_>>())
            .collect()
    }

    /// SHA-256 over teacher tensors, or `None` without a teacher.
    pub fn teacher_digest(&self) -> Result<Option<String>> {
        self.teacher.as_ref().map(Teacher::digest).transpose()
    }

    /// Forward pass and loss terms. `training` selects batch statistics in
    /// the projection heads and updates their running estimates.
    pub fn forward_losses(&mut self, batch: &Batch, training: bool) -> Result<StepTensors> {
        let x = batch.images.to_tensor(self.dtype, &self.device)?;
        let (pyramid, preds) = self.student.forward(&x)?;
        let seg = seg_loss(&preds, &batch.masks)?;
        let (Some(teacher), Some(guidance)) = (&self.teacher, &mut self.guidance) else {
            return Ok(StepTensors {
                total: seg.clone(),
                seg,
                guide: None,
                e_sam: None,
                e_seg: None,
            });
        };
        let z_sam = teacher.encode(&x)?.z;
        let edge = if self.config.use_eg {
            Some(self.detector.detect(&batch.images)?)
        } else {
            None
        };
        let e_sam = guidance.teacher_side.forward(&z_sam, edge.as_ref(), training)?;
        let student_side = guidance.student_side.as_mut().unwrap_or(&mut guidance.teacher_side);
        let e_seg = student_side.forward(pyramid.last(), edge.as_ref(), training)?;
        let guide = guide_loss(&e_seg, &e_sam)?;
        Ok(StepTensors {
            total: (&guide + &seg)?,
            seg,
            guide: Some(guide),
            e_sam: Some(e_sam),
            e_seg: Some(e_seg),
        })
    }

    /// Student-only inference logits `[B, 1, H, W]` (finest head).
    pub fn predict_logits(&self, images: &ImageBatch) -> Result<Tensor> {
        predict_logits(&self.student, images)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut tensors: Vec<(String, Tensor)> = self
            .trainable_vars()
            .into_iter()
            .map(|(n, v)| (n, v.as_tensor().copy().expect("cpu copy")))
            .collect();
        tensors.extend(self.buffers());
        Checkpoint {
            config: self.config.clone(),
            epoch: self.epoch,
            tensors,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    /// Rebuilds the framework and restores every saved tensor.
    pub fn from_checkpoint(ck: &Checkpoint, path: &Path) -> Result<Self> {
        let mut fw = Self::build(ck.config.clone(), true)?;
        restore_vars(&fw.trainable_vars(), ck, path)?;
        if let Some(g) = &mut fw.guidance {
            for m in g.modules_mut() {
                let names: Vec<String> = m.buffers().into_iter().map(|(n, _)| n).collect();
                let fetch = |n: &str| {
                    ck.get(n).cloned().ok_or_else(|| Error::CheckpointCorrupt {
                        path: path.to_path_buf(),
                        reason: format!("missing tensor {n}"),
                    })
                };
                let mean = fetch(&names[0])?.to_dtype(fw.dtype)?;
                let var = fetch(&names[1])?.to_dtype(fw.dtype)?;
                m.projection_mut().set_running_stats(mean, var)?;
            }
        }
        fw.epoch = ck.epoch;
        Ok(fw)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?, path)
    }
}

fn restore_vars(vars: &[NamedVar], ck: &Checkpoint, path: &Path) -> Result<()> {
    for (name, var) in vars {
        let t = ck.get(name).ok_or_else(|| Error::CheckpointCorrupt {
            path: path.to_path_buf(),
            reason: format!("missing tensor {name}"),
        })?;
        if t.dims() != var.dims() {
            return Err(Error::CheckpointCorrupt {
                path: path.to_path_buf(),
                reason: format!("{name}: shape {:?}, expected {:?}", t.dims(), var.dims()),
            });
        }
        var.set(&t.to_dtype(var.dtype())?)?;
    }
    Ok(())
}

/// Restores only the student, for inference.
pub fn load_student(path: &Path) -> Result<(Student, TrainConfig)> {
    let ck = Checkpoint::load(path)?;
    let student = Student::skeleton(&ck.config.student_config(), ck.config.precision.dtype(), &Device::Cpu)?;
    restore_vars(&student.named_vars(), &ck, path)?;
    Ok((student, ck.config))
}

pub fn predict_logits(student: &Student, images: &ImageBatch) -> Result<Tensor> {
    let x = images.to_tensor(student.dtype(), &Device::Cpu)?;
    student.predict(&x)
}

/// Global L2 norm of the gradients, rescaled in place to at most `max_norm`.
pub fn clip_grad_norm(grads: &mut GradStore, vars: &[Var], max_norm: f64) -> Result<f64> {
    let mut sq = 0.0;
    for v in vars {
        if let Some(g) = grads.get(v.as_tensor()) {
            sq += scalar(&g.sqr()?.sum_all()?)?;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm {
        let s = max_norm / (norm + 1e-6);
        for v in vars {
            if let Some(g) = grads.remove(v.as_tensor()) {
                grads.insert(v.as_tensor(), (g * s)?);
            }
        }
    }
    Ok(norm)
}

/// A framework plus its optimizer state.
pub struct Trainer {
    framework: Framework,
    vars: Vec<Var>,
    opt: AdamW,
    step: usize,
}

impl Trainer {
    pub fn new(framework: Framework) -> Result<Self> {
        let c = framework.config();
        let params = ParamsAdamW {
            lr: c.lr,
            beta1: ADAM_BETAS.0,
            beta2: ADAM_BETAS.1,
            eps: ADAM_EPS,
            weight_decay: c.weight_decay,
        };
        let vars: Vec<Var> = framework.trainable_vars().into_iter().map(|(_, v)| v).collect();
        let opt = AdamW::new(vars.clone(), params)?;
        Ok(Self {
            framework,
            vars,
            opt,
            step: 0,
        })
    }

    pub fn framework(&self) -> &Framework {
        &self.framework
    }

    pub fn framework_mut(&mut self) -> &mut Framework {
        &mut self.framework
    }

    pub fn into_framework(self) -> Framework {
        self.framework
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// One optimization step; returns the logged loss values.
    pub fn step(&mut self, batch: &Batch) -> Result<LossBreakdown> {
        let out = self.framework.forward_losses(batch, true)?;
        let losses = out.breakdown()?;
        if !losses.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: self.step,
                guide: losses.guide,
                seg: losses.seg,
            });
        }
        let mut grads = out.total.backward()?;
        clip_grad_norm(&mut grads, &self.vars, self.framework.config.clip_norm)?;
        self.opt.step(&grads)?;
        self.step += 1;
        Ok(losses)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub guide: f64,
    pub seg: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub guide: f64,
    pub seg: f64,
    pub total: f64,
    pub val_mdice: Option<f64>,
    pub val_miou: Option<f64>,
    pub wall_time: f64,
}

impl EpochRecord {
    pub fn progress_line(&self) -> String {
        let val = self.val_mdice.map_or_else(|| "nan".to_string(), |d| format!("{d:.4}"));
        format!(
            "epoch={} guide={:.6} seg={:.6} total={:.6} val_mdice={val}",
            self.epoch, self.guide, self.seg, self.total
        )
    }
}

/// Per-epoch means plus every step's raw losses.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunRecord {
    pub epochs: Vec<EpochRecord>,
    pub steps: Vec<StepRecord>,
}

fn opt_cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl RunRecord {
    /// CSV with columns `epoch,guide,seg,total,val_mdice,val_miou[,wall_time]`.
    pub fn to_csv(&self, with_wall_time: bool) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["epoch", "guide", "seg", "total", "val_mdice", "val_miou"];
        if with_wall_time {
            header.push("wall_time");
        }
        let csv_err = |e: csv::Error| Error::invalid(e.to_string());
        w.write_record(&header).map_err(csv_err)?;
        for r in &self.epochs {
            let mut row = vec![
                r.epoch.to_string(),
                r.guide.to_string(),
                r.seg.to_string(),
                r.total.to_string(),
                opt_cell(r.val_mdice),
                opt_cell(r.val_miou),
            ];
            if with_wall_time {
                row.push(format!("{:.3}", r.wall_time));
            }
            w.write_record(&row).map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::invalid(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv is utf-8"))
    }

    /// The run's content without timing, for reproducibility comparisons.
    pub fn deterministic_csv(&self) -> Result<String> {
        self.to_csv(false)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv(true)?).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub best: PathBuf,
    pub last: PathBuf,
    pub record: RunRecord,
    pub framework: Framework,
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(epoch as u64)
}

/// Full training run. Writes `best.ckpt` and `last.ckpt` into `out_dir`.
/// `on_epoch` sees each epoch's record as soon as it is complete.
pub fn train(
    config: TrainConfig,
    train_set: &DatasetManifest,
    val_set: Option<&DatasetManifest>,
    out_dir: &Path,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::Dataset("empty training set".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut trainer = Trainer::new(Framework::new(config.clone())?)?;
    let best = out_dir.join(BEST_CHECKPOINT);
    let last = out_dir.join(LAST_CHECKPOINT);
    let mut record = RunRecord::default();
    let mut best_dice = f64::NEG_INFINITY;
    for epoch in 1..=config.epochs {
        let started = Instant::now();
        let opts = BatchOptions {
            batch_size: config.batch_size,
            image_size: config.image_size,
            shuffle: true,
            seed: epoch_seed(config.seed, epoch),
            hflip: config.hflip,
            vflip: config.vflip,
            multi_scale: config.multi_scale,
            prefetch: config.prefetch,
        };
        let (mut guide, mut seg, mut total, mut n) = (0.0, 0.0, 0.0, 0usize);
        for batch in make_batches(train_set, opts)? {
            let batch = batch?;
            if batch.ids.len() < 2 && trainer.framework().guidance().is_some() {
                log::debug!("skipping a single-sample batch; batch statistics need two samples");
                continue;
            }
            let step = trainer.steps_taken();
            let l = trainer.step(&batch)?;
            record.steps.push(StepRecord {
                epoch,
                step,
                guide: l.guide,
                seg: l.seg,
                total: l.total,
            });
            guide += l.guide;
            seg += l.seg;
            total += l.total;
            n += 1;
        }
        if n == 0 {
            return Err(Error::Dataset("no usable training batch in an epoch".into()));
        }
        let nf = n as f64;
        let val = match val_set {
            Some(v) => Some(evaluate_student(
                trainer.framework().student(),
                v,
                config.image_size,
                config.batch_size,
            )?),
            None => None,
        };
        trainer.framework_mut().epoch = epoch;
        let row = EpochRecord {
            epoch,
            guide: guide / nf,
            seg: seg / nf,
            total: total / nf,
            val_mdice: val.map(|v| v.0),
            val_miou: val.map(|v| v.1),
            wall_time: started.elapsed().as_secs_f64(),
        };
        on_epoch(&row);
        record.epochs.push(row);
        let ck = trainer.framework().to_checkpoint();
        ck.save(&last)?;
        let score = val.map_or(f64::INFINITY, |v| v.0);
        if score > best_dice || val.is_none() {
            best_dice = score;
            ck.save(&best)?;
        }
    }
    Ok(TrainOutcome {
        best,
        last,
        record,
        framework: trainer.into_framework(),
    })
}

/// Binarized predictions at the resolution of the original masks.
pub fn predict_at_size(student: &Student, images: &ImageBatch, sizes: &[(usize, usize)]) -> Result<Vec<MaskBatch>> {
    let logits = predict_logits(student, images)?;
    sizes
        .iter()
        .enumerate()
        .map(|(i, &(h, w))| {
            let l = logits.narrow(0, i, 1)?;
            let (_, _, lh, lw) = l.dims4()?;
            let l = if (lh, lw) == (h, w) { l } else { resize_bilinear(&l, h, w)? };
            MaskBatch::from_logits(&l)
        })
        .collect()
}

fn original_masks(manifest: &DatasetManifest, ids: &[String]) -> Result<Vec<MaskBatch>> {
    ids.iter()
        .map(|id| {
            let s = manifest
                .samples
                .iter()
                .find(|s| &s.stem == id)
                .ok_or_else(|| Error::Dataset(format!("unknown sample {id}")))?;
            let g = read_gray(&s.mask)?;
            let (w, h) = g.dimensions();
            let v = crate::data::prepare_mask(&g, h as usize, w as usize);
            MaskBatch::new(
                ndarray::Array4::from_shape_vec((1, h as usize, w as usize, 1), v)
                    .map_err(|e| Error::shape(e.to_string()))?,
            )
        })
        .collect()
}

/// `(mDice, mIoU)` of the student on a dataset, comparing against masks at
/// their original resolution.
pub fn evaluate_student(
    student: &Student,
    manifest: &DatasetManifest,
    image_size: usize,
    batch_size: usize,
) -> Result<(f64, f64)> {
    let mut acc = MetricAccumulator::default();
    for batch in make_batches(manifest, BatchOptions::new(batch_size.max(1), image_size))? {
        let batch = batch?;
        let gts = original_masks(manifest, &batch.ids)?;
        let sizes: Vec<(usize, usize)> = gts.iter().map(MaskBatch::spatial).collect();
        for (pred, gt) in predict_at_size(student, &batch.images, &sizes)?.iter().zip(&gts) {
            acc.add(pred, gt)?;
        }
    }
    acc.finish().ok_or_else(|| Error::Dataset("empty evaluation set".into()))
}

/// One evaluation table row.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRow {
    pub dataset: String,
    pub mdice: f64,
    pub miou: f64,
    pub params_m: f64,
    pub gflops: f64,
}

pub fn metrics_row(student: &Student, config: &TrainConfig, manifest: &DatasetManifest) -> Result<MetricsRow> {
    let (mdice, miou) = evaluate_student(student, manifest, config.image_size, config.batch_size)?;
    Ok(MetricsRow {
        dataset: manifest.name.clone(),
        mdice,
        miou,
        params_m: student.trainable_count() as f64 / 1e6,
        gflops: gflops(estimate_flops(student, config.image_size, config.image_size)?),
    })
}

/// Student-only evaluation of a saved checkpoint.
pub fn evaluate(checkpoint: &Path, manifest: &DatasetManifest) -> Result<MetricsRow> {
    let (student, config) = load_student(checkpoint)?;
    metrics_row(&student, &config, manifest)
}
