use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use edgeguide::config::{parse_named_root, TrainConfig};
use edgeguide::data::{load_manifest, read_gray, read_rgb, DatasetManifest, IMAGE_EXTENSIONS};
use edgeguide::edge::DetectorKind;
use edgeguide::models::{estimate_flops, gflops, shape_trace, Student, StudentKind, TeacherKind};
use edgeguide::nn::Parameterized;
use edgeguide::report;
use edgeguide::train::{self, load_student, predict_at_size};
use edgeguide::{Error, ImageBatch};

#[derive(Parser)]
#[command(name = "edgeguide", version, about = "Edge-guided teacher/student segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a student; writes checkpoints, run.csv and loss_curve.png.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one or more datasets.
    Eval(EvalArgs),
    /// Write predicted masks and overlays for images.
    Predict(PredictArgs),
    /// Print parameter count, GFLOPs and the layer shape trace.
    Inspect(TrainArgs),
}

#[derive(Args, Default)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset root, `PATH` or `NAME=PATH`; repeatable.
    #[arg(long = "data-dir")]
    data_dir: Vec<String>,
    #[arg(long)]
    val_dir: Option<PathBuf>,
    #[arg(long)]
    edge_detector: Option<DetectorKind>,
    #[arg(long)]
    canny_low: Option<f64>,
    #[arg(long)]
    canny_high: Option<f64>,
    /// Disable teacher guidance (and therefore edge guiding).
    #[arg(long)]
    no_sam: bool,
    /// Guide with the projection head only, without edge fusion or attention.
    #[arg(long)]
    no_eg: bool,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    image_size: Option<usize>,
    #[arg(long)]
    teacher: Option<TeacherKind>,
    #[arg(long)]
    teacher_weights: Option<PathBuf>,
    #[arg(long)]
    student: Option<StudentKind>,
    #[arg(long)]
    student_weights: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Test dataset root, `PATH` or `NAME=PATH`; repeatable.
    #[arg(long = "data-dir", required = true)]
    data_dir: Vec<String>,
    /// Directory for metrics.csv and metrics.md (default: next to the checkpoint).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// An image file or a directory of images.
    #[arg(long)]
    input: PathBuf,
    /// Ground-truth mask file, or a directory of masks matched by stem.
    #[arg(long)]
    gt: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

/// Exit status: 1 usage/config, 2 data, 3 runtime or numerical.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) => 1,
        Error::Dataset(_) | Error::Io { .. } | Error::Image { .. } | Error::Adapter { .. } => 2,
        _ => 3,
    }
}

fn resolve_config(args: &TrainArgs) -> edgeguide::Result<TrainConfig> {
    let mut c = match &args.config {
        Some(path) => TrainConfig::from_file(path)?,
        None => TrainConfig::default(),
    };
    if !args.data_dir.is_empty() {
        c.data_dirs = args.data_dir.clone();
    }
    if let Some(v) = &args.val_dir {
        c.val_dir = Some(v.clone());
    }
    if let Some(v) = args.edge_detector {
        c.detector = v;
    }
    if let Some(v) = args.canny_low {
        c.canny_low = v;
    }
    if let Some(v) = args.canny_high {
        c.canny_high = v;
    }
    if args.no_sam {
        c.use_sam_guiding = false;
        c.use_eg = false;
    }
    if args.no_eg {
        c.use_eg = false;
    }
    if let Some(v) = args.epochs {
        c.epochs = v;
    }
    if let Some(v) = args.batch_size {
        c.batch_size = v;
    }
    if let Some(v) = args.lr {
        c.lr = v;
    }
    if let Some(v) = args.seed {
        c.seed = v;
    }
    if let Some(v) = args.image_size {
        c.image_size = v;
    }
    if let Some(v) = args.teacher {
        c.teacher = v;
    }
    if let Some(v) = &args.teacher_weights {
        c.teacher_weights = Some(v.clone());
    }
    if let Some(v) = args.student {
        c.student = v;
    }
    if let Some(v) = &args.student_weights {
        c.student_weights = Some(v.clone());
    }
    if let Some(v) = &args.out {
        c.out_dir = v.clone();
    }
    c.validate()?;
    Ok(c)
}

fn load_roots(specs: &[String]) -> edgeguide::Result<Vec<DatasetManifest>> {
    specs
        .iter()
        .map(|s| {
            let (name, path) = parse_named_root(s)?;
            load_manifest(&path, &name)
        })
        .collect()
}

fn cmd_train(args: &TrainArgs) -> edgeguide::Result<()> {
    let config = resolve_config(args)?;
    if config.data_dirs.is_empty() {
        return Err(Error::Config("no training data: pass --data-dir or set data_dirs".into()));
    }
    let parts = load_roots(&config.data_dirs)?;
    let train_set = DatasetManifest::merge("train", &parts)?;
    let val_set = match &config.val_dir {
        Some(p) => Some(load_manifest(p, "val")?),
        None => None,
    };
    let out = config.out_dir.clone();
    std::fs::create_dir_all(&out).map_err(|e| Error::Io {
        path: out.clone(),
        source: e,
    })?;
    report::write_text(&out.join("config.toml"), &config.to_toml()?)?;
    let outcome = train::train(config, &train_set, val_set.as_ref(), &out, &mut |row| {
        println!("{}", row.progress_line())
    })?;
    outcome.record.write_csv(&out.join("run.csv"))?;
    report::write_loss_curve(&outcome.record, &out.join("loss_curve.png"))?;
    println!("best checkpoint: {}", outcome.best.display());
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> edgeguide::Result<()> {
    let (student, config) = load_student(&args.checkpoint)?;
    let mut rows = Vec::new();
    for manifest in load_roots(&args.data_dir)? {
        rows.push(train::metrics_row(&student, &config, &manifest)?);
    }
    let md = report::metrics_markdown(&rows);
    print!("{md}");
    let out = match &args.out {
        Some(o) => o.clone(),
        None => args
            .checkpoint
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from(".")),
    };
    std::fs::create_dir_all(&out).map_err(|e| Error::Io {
        path: out.clone(),
        source: e,
    })?;
    report::write_text(&out.join("metrics.csv"), &report::metrics_csv(&rows)?)?;
    report::write_text(&out.join("metrics.md"), &md)
}

fn is_image(p: &Path) -> bool {
    p.is_file()
        && p.extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

fn list_inputs(input: &Path) -> edgeguide::Result<Vec<PathBuf>> {
    if input.is_file() {
        return Ok(vec![input.to_path_buf()]);
    }
    let entries = std::fs::read_dir(input).map_err(|e| Error::Io {
        path: input.to_path_buf(),
        source: e,
    })?;
    let mut files: Vec<PathBuf> = entries.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| is_image(p)).collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Dataset(format!("{}: no images found", input.display())));
    }
    Ok(files)
}

fn stem(p: &Path) -> String {
    p.file_stem().and_then(|s| s.to_str()).unwrap_or("image").to_string()
}

fn cmd_predict(args: &PredictArgs) -> edgeguide::Result<()> {
    let (student, config) = load_student(&args.checkpoint)?;
    std::fs::create_dir_all(&args.out).map_err(|e| Error::Io {
        path: args.out.clone(),
        source: e,
    })?;
    let size = config.image_size;
    for path in list_inputs(&args.input)? {
        let rgb = read_rgb(&path)?;
        let (w, h) = rgb.dimensions();
        let pixels = edgeguide::data::prepare_image(&rgb, size, size);
        let batch = ImageBatch::new(
            ndarray::Array4::from_shape_vec((1, size, size, 3), pixels).map_err(|e| Error::Shape(e.to_string()))?,
        )?;
        let pred = predict_at_size(&student, &batch, &[(h as usize, w as usize)])?.remove(0);
        let values: Vec<u8> = pred.values().iter().copied().collect();
        let name = stem(&path);
        report::write_mask_png(&values, h as usize, w as usize, &args.out.join(format!("{name}_mask.png")))?;
        let gt = match &args.gt {
            Some(g) if g.is_dir() => {
                let candidate = g.join(format!("{name}.png"));
                candidate.exists().then(|| read_gray(&candidate)).transpose()?
            }
            Some(g) => Some(read_gray(g)?),
            None => None,
        };
        let pred_img = report::mask_image(&values, h as usize, w as usize);
        report::write_overlay_png(&rgb, gt.as_ref(), &pred_img, &args.out.join(format!("{name}_overlay.png")))?;
        println!("{name}: {} foreground pixels", values.iter().filter(|&&v| v > 0).count());
    }
    Ok(())
}

fn cmd_inspect(args: &TrainArgs) -> edgeguide::Result<()> {
    let config = resolve_config(args)?;
    let fw = edgeguide::Framework::new(config.clone())?;
    let student: &Student = fw.student();
    let size = config.image_size;
    println!("student: {} channels={:?} heads={}", student.kind(), student.channels(), student.heads());
    println!("student params: {} ({:.2} M)", student.trainable_count(), student.trainable_count() as f64 / 1e6);
    println!("student GFLOPs at {size}x{size}: {:.2}", gflops(estimate_flops(student, size, size)?));
    if let (Some(t), Some(g)) = (fw.teacher(), fw.guidance()) {
        println!("teacher: {} frozen tensors={} trainable=0", t.kind(), t.frozen_count());
        println!(
            "edge-guiding params: teacher side {}, student side {}",
            g.teacher_side().trainable_count(),
            g.student_side().trainable_count()
        );
    }
    for e in shape_trace(student, size, size)? {
        println!("{:<28} {:<7} {:?} macs={}", e.layer, e.kind, e.output, e.macs);
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match &cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Inspect(a) => cmd_inspect(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
