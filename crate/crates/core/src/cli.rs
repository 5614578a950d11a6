//! Command-line front end.
//!
//! Exit status: 0 success, 1 usage or configuration error, 2 data error
//! (malformed or inconsistent input files), 3 numeric error.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::io::{self, RunConfig, StageSpec};
use crate::metrics::{evaluate_dataset, ImageMetrics, SegMask};
use crate::model::{TfNet, TfNetConfig};
use crate::optim::OptimState;
use crate::pipeline::{
    run_video, Classifier, Detector, FixedFractionDetector, FrameClassLabel, ModelSegmenter, Segmenter, StageBackends,
};
use crate::tensor::{bilinear_resize, Shape, Tensor};
use crate::train::{synthetic_blob_sample, train_with, TrainOptions, BN_MOMENTUM};

/// Environment variable capping the number of worker threads.
pub const THREADS_ENV: &str = "TEARFLOW_THREADS";

#[derive(Debug, Parser)]
#[command(name = "tearflow", version, about = "Tear-film break-up segmentation and analysis")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a randomly initialized train-form weight container.
    Init {
        #[arg(long)]
        out: PathBuf,
        /// TOML run configuration supplying the `[model]` section.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Nominal input size recorded in the configuration.
        #[arg(long)]
        size: Option<usize>,
    },
    /// Rewrite a train-form container in fused inference form.
    Fuse {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Segment one image and write the mask.
    Infer {
        #[arg(long)]
        weights: PathBuf,
        /// Fuse a train-form container before running it.
        #[arg(long)]
        fused: bool,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write the logits as raw little-endian f32 (n, c, h, w).
        #[arg(long)]
        logits: Option<PathBuf>,
        /// Resize the image to size x size for the network and map the mask
        /// back to the original resolution.
        #[arg(long)]
        size: Option<usize>,
    },
    /// Evaluate predicted masks against ground truth with matching file names.
    Eval {
        #[arg(long)]
        pred_dir: PathBuf,
        #[arg(long)]
        gt_dir: PathBuf,
        /// Write the report here as well as to standard output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the frame-by-frame analysis over a directory of frames.
    Pipeline {
        #[arg(long)]
        frames: Option<PathBuf>,
        #[arg(long)]
        fps: Option<f64>,
        /// oracle:<annotations> (model:<path> is not available)
        #[arg(long)]
        cls: Option<StageSpec>,
        /// oracle:<annotations> | fixed:<fraction>
        #[arg(long)]
        det: Option<StageSpec>,
        /// model:<container> | oracle:<annotations>
        #[arg(long)]
        seg: Option<StageSpec>,
        /// Output directory for masks and report.json.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Crop side fed to the segmenter.
        #[arg(long)]
        size: Option<usize>,
    },
    /// Overfit a small network on a synthetic blob image.
    TrainToy {
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 200)]
        iters: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the trained weights to this container.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare forward throughput of the train and fused forms.
    Bench {
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 256)]
        size: usize,
        #[arg(long, default_value_t = 5)]
        iters: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Parse arguments, run, and return the process exit status.
pub fn main_with_args<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return e.exit_code();
    }
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn configure_threads() -> Result<()> {
    let Ok(value) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let threads: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("{THREADS_ENV} must be a positive integer, got `{value}`")))?;
    // a second initialisation in the same process is harmless
    let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    Ok(())
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Init { out, config, seed, size } => cmd_init(&out, config.as_deref(), seed, size),
        Command::Fuse { weights, out } => cmd_fuse(&weights, &out),
        Command::Infer {
            weights,
            fused,
            image,
            out,
            logits,
            size,
        } => cmd_infer(&weights, fused, &image, &out, logits.as_deref(), size),
        Command::Eval { pred_dir, gt_dir, out } => cmd_eval(&pred_dir, &gt_dir, out.as_deref()),
        Command::Pipeline {
            frames,
            fps,
            cls,
            det,
            seg,
            out,
            config,
            size,
        } => {
            let mut cfg = match &config {
                Some(p) => RunConfig::load(p)?,
                None => RunConfig::default(),
            };
            if let Some(f) = frames {
                cfg.paths.frames = Some(f);
            }
            if let Some(o) = out {
                cfg.paths.out = Some(o);
            }
            if let Some(f) = fps {
                cfg.fps = f;
            }
            if let Some(s) = size {
                cfg.crop_size = s;
            }
            cfg.stages.classifier = cls.or(cfg.stages.classifier);
            cfg.stages.detector = det.or(cfg.stages.detector);
            cfg.stages.segmenter = seg.or(cfg.stages.segmenter);
            cfg.validate()?;
            cmd_pipeline(&cfg)
        }
        Command::TrainToy { size, iters, seed, out } => cmd_train_toy(size, iters, seed, out.as_deref()),
        Command::Bench {
            weights,
            config,
            size,
            iters,
            seed,
        } => cmd_bench(weights.as_deref(), config.as_deref(), size, iters, seed),
    }
}

fn cmd_init(out: &Path, config: Option<&Path>, seed: Option<u64>, size: Option<usize>) -> Result<()> {
    let cfg = match config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let mut model_cfg = cfg.model;
    if let Some(s) = size {
        model_cfg.input_size = s;
    }
    let model = TfNet::<f32>::build(model_cfg, seed.unwrap_or(cfg.seed))?;
    io::write_weights(&model, out)?;
    println!("wrote {} ({} trainable parameters)", out.display(), model.param_count());
    Ok(())
}

fn cmd_fuse(weights: &Path, out: &Path) -> Result<()> {
    let model = io::read_weights(weights)?;
    let fused = model.fuse()?;
    io::write_weights(&fused, out)?;
    println!(
        "parameters: train {} -> fused {}",
        model.param_count(),
        fused.param_count()
    );
    Ok(())
}

fn load_inference_model(weights: &Path, fuse: bool) -> Result<TfNet<f32>> {
    let model = io::read_weights(weights)?;
    if fuse && !model.is_fused() {
        model.fuse()
    } else {
        Ok(model)
    }
}

fn cmd_infer(
    weights: &Path,
    fused: bool,
    image: &Path,
    out: &Path,
    logits_path: Option<&Path>,
    size: Option<usize>,
) -> Result<()> {
    let model = load_inference_model(weights, fused)?;
    let img = io::read_image(image)?;
    let s = img.shape();
    let input = match size {
        Some(side) if (side, side) != (s.h, s.w) => bilinear_resize(&img, side, side)?,
        _ => img,
    };
    let logits = model.forward(&input)?;
    logits.ensure_finite("logits")?;
    if let Some(p) = logits_path {
        io::write_raw_f32(p, &logits)?;
    }
    let mask = crate::model::argmax_masks(&logits).remove(0);
    let mask = resize_mask_nearest(&mask, s.h, s.w);
    io::write_mask(out, &mask)?;
    println!("wrote {} ({} break-up pixels)", out.display(), mask.count());
    Ok(())
}

/// Nearest-neighbour resampling sampled at pixel centres.
fn resize_mask_nearest(mask: &SegMask, h: usize, w: usize) -> SegMask {
    if (mask.height(), mask.width()) == (h, w) {
        return mask.clone();
    }
    let pick = |i: usize, to: usize, from: usize| (((i as f64 + 0.5) * from as f64 / to as f64) as usize).min(from - 1);
    SegMask::from_fn(h, w, |y, x| {
        mask.get(pick(y, h, mask.height()), pick(x, w, mask.width()))
    })
}

fn is_image_file(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("pgm" | "ppm" | "pnm" | "png")
    )
}

/// Image files of a directory, sorted by file name.
fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    let mut files = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
        let path = entry.path();
        if path.is_file() && is_image_file(&path) {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

fn cmd_eval(pred_dir: &Path, gt_dir: &Path, out: Option<&Path>) -> Result<()> {
    let gts = list_images(gt_dir)?;
    if gts.is_empty() {
        return Err(Error::Format(format!("{}: no ground-truth masks", gt_dir.display())));
    }
    let mut pairs = Vec::with_capacity(gts.len());
    for gt_path in &gts {
        let name = gt_path.file_name().expect("listed files have names");
        let pred_path = pred_dir.join(name);
        if !pred_path.is_file() {
            return Err(Error::Format(format!(
                "no prediction {} for ground truth {}",
                pred_path.display(),
                gt_path.display()
            )));
        }
        pairs.push((io::read_mask(&pred_path)?, io::read_mask(gt_path)?));
    }
    // surfaces the first size mismatch with file names attached
    for ((p, g), path) in pairs.iter().zip(&gts) {
        ImageMetrics::compute(p, g).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    }
    let report = evaluate_dataset(&pairs)?;
    let text = report.to_toml();
    if let Some(p) = out {
        fs::write(p, &text).map_err(|e| Error::Io {
            path: p.to_path_buf(),
            source: e,
        })?;
    }
    print!("{text}");
    Ok(())
}

#[derive(Serialize)]
struct FrameReport {
    index: usize,
    file: String,
    label: FrameClassLabel,
    mask: Option<String>,
}

#[derive(Serialize)]
struct RunReport {
    fps: f64,
    frames: usize,
    t_but_frames: Option<usize>,
    t_but_seconds: Option<f64>,
    classifier: String,
    detector: String,
    segmenter: String,
    per_frame: Vec<FrameReport>,
}

/// Annotation files are parsed once even when several stages replay them.
#[derive(Default)]
struct AnnotationCache(BTreeMap<PathBuf, Vec<io::AnnotationRecord>>);

impl AnnotationCache {
    fn get(&mut self, path: &Path) -> Result<&[io::AnnotationRecord]> {
        if !self.0.contains_key(path) {
            let records = io::ingest_annotations(path)?;
            self.0.insert(path.to_path_buf(), records);
        }
        Ok(&self.0[path])
    }
}

fn cmd_pipeline(cfg: &RunConfig) -> Result<()> {
    let frames_dir = cfg
        .paths
        .frames
        .as_deref()
        .ok_or_else(|| Error::Config("no frame directory (--frames)".into()))?;
    let out_dir = cfg.paths.out.clone().unwrap_or_else(|| PathBuf::from("tearflow-run"));
    let need = |s: &Option<StageSpec>, what: &str| {
        s.clone()
            .ok_or_else(|| Error::Config(format!("no {what} backend selected")))
    };
    let cls_spec = need(&cfg.stages.classifier, "classifier (--cls)")?;
    let det_spec = cfg
        .stages
        .detector
        .clone()
        .unwrap_or(StageSpec::Fixed(FixedFractionDetector::DEFAULT_FRACTION));
    let seg_spec = need(&cfg.stages.segmenter, "segmenter (--seg)")?;

    let mut annotations = AnnotationCache::default();
    let classifier: Box<dyn Classifier> = match &cls_spec {
        StageSpec::Oracle(p) => Box::new(io::oracle_stages(annotations.get(p)?).0),
        StageSpec::Model(p) => {
            return Err(Error::Config(format!(
                "cannot load classifier {}: no frame-classifier network is available; use oracle:<annotations>",
                p.display()
            )))
        }
        StageSpec::Fixed(_) => return Err(Error::Config("the classifier stage cannot be `fixed`".into())),
    };
    let detector: Box<dyn Detector> = match &det_spec {
        StageSpec::Oracle(p) => Box::new(io::oracle_stages(annotations.get(p)?).1),
        StageSpec::Fixed(f) => Box::new(FixedFractionDetector::new(*f)?),
        StageSpec::Model(_) => {
            return Err(Error::Config(
                "no detector network is available; use oracle:<annotations> or fixed:<fraction>".into(),
            ))
        }
    };
    let segmenter: Box<dyn Segmenter> = match &seg_spec {
        StageSpec::Oracle(p) => Box::new(io::oracle_stages(annotations.get(p)?).2),
        StageSpec::Model(p) => Box::new(ModelSegmenter {
            model: load_inference_model(p, true)?,
        }),
        StageSpec::Fixed(_) => return Err(Error::Config("the segmenter stage cannot be `fixed`".into())),
    };

    let files = list_images(frames_dir)?;
    if files.is_empty() {
        return Err(Error::Format(format!("{}: no frames", frames_dir.display())));
    }
    let frames = files.iter().map(|p| io::read_image(p)).collect::<Result<Vec<_>>>()?;
    let backends = StageBackends {
        classifier: classifier.as_ref(),
        detector: detector.as_ref(),
        segmenter: segmenter.as_ref(),
        crop_size: (cfg.crop_size, cfg.crop_size),
    };
    let result = run_video(&frames, &backends, cfg.fps)?;

    fs::create_dir_all(&out_dir).map_err(|e| Error::Io {
        path: out_dir.clone(),
        source: e,
    })?;
    let mut per_frame = Vec::with_capacity(files.len());
    for (i, (file, (label, mask))) in files.iter().zip(result.labels.iter().zip(&result.masks)).enumerate() {
        let index = i + 1;
        let mask_name = match mask {
            Some(m) => {
                let name = format!("mask_{index:05}.pgm");
                io::write_mask(&out_dir.join(&name), m)?;
                Some(name)
            }
            None => None,
        };
        per_frame.push(FrameReport {
            index,
            file: file.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
            label: *label,
            mask: mask_name,
        });
    }
    let report = RunReport {
        fps: cfg.fps,
        frames: frames.len(),
        t_but_frames: result.t_but_frames,
        t_but_seconds: result.t_but_seconds,
        classifier: cls_spec.to_string(),
        detector: det_spec.to_string(),
        segmenter: seg_spec.to_string(),
        per_frame,
    };
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    let report_path = out_dir.join("report.json");
    fs::write(&report_path, format!("{json}\n")).map_err(|e| Error::Io {
        path: report_path.clone(),
        source: e,
    })?;
    match (result.t_but_frames, result.t_but_seconds) {
        (Some(f), Some(s)) => println!("t_BUT = {f} frames ({s:.3} s)"),
        _ => println!("t_BUT = N/A (no break-up frame)"),
    }
    println!("wrote {}", report_path.display());
    Ok(())
}

/// Widths of the small network used for the synthetic overfitting run.
pub const TOY_WIDTHS: [usize; 5] = [8, 16, 16, 32, 32];

/// Scheduler epochs of the toy run: `iters` steps split into epochs of at most
/// ten steps each.
pub fn toy_train_options(iters: usize) -> TrainOptions {
    let passes = iters.clamp(1, 10);
    TrainOptions {
        epochs: iters / passes,
        passes_per_epoch: passes,
        bn_momentum: BN_MOMENTUM,
    }
}

fn cmd_train_toy(size: usize, iters: usize, seed: u64, out: Option<&Path>) -> Result<()> {
    if size == 0 || size % 32 != 0 {
        return Err(Error::Config(format!("--size must be a positive multiple of 32, got {size}")));
    }
    if iters % toy_train_options(iters).passes_per_epoch != 0 {
        return Err(Error::Config(format!(
            "--iters {iters} must be at most 10 or a multiple of 10"
        )));
    }
    let mut cfg = TfNetConfig::with_widths(TOY_WIDTHS);
    cfg.input_size = size;
    let mut model = TfNet::<f32>::build(cfg, seed)?;
    let sample = synthetic_blob_sample::<f32>(size, 0.1, seed)?;
    let mut state = OptimState::standard();
    let start = Instant::now();
    let report = train_with(&mut model, std::slice::from_ref(&sample), &toy_train_options(iters), &mut state)?;
    let elapsed = start.elapsed().as_secs_f64();
    let pred = model.predict_mask(&sample.image)?;
    let metrics = ImageMetrics::compute(&pred, &sample.mask)?;
    let first = report.step_losses.first().copied().unwrap_or(f64::NAN);
    let last = report.step_losses.last().copied().unwrap_or(f64::NAN);
    println!("steps: {}", report.step_losses.len());
    println!("loss: {first:.6} -> {last:.6}");
    println!("final lr: {}", state.lr);
    println!("break-up IoU: {:.4}", metrics.classes[1].iou);
    println!("time: {elapsed:.2} s");
    if let Some(p) = out {
        io::write_weights(&model, p)?;
        println!("wrote {}", p.display());
    }
    Ok(())
}

/// Mean seconds per forward pass over `iters` runs after one warm-up.
pub fn time_forward(model: &TfNet<f32>, input: &Tensor<f32>, iters: usize) -> Result<f64> {
    model.forward(input)?;
    let start = Instant::now();
    for _ in 0..iters {
        std::hint::black_box(model.forward(input)?);
    }
    Ok(start.elapsed().as_secs_f64() / iters as f64)
}

fn cmd_bench(weights: Option<&Path>, config: Option<&Path>, size: usize, iters: usize, seed: u64) -> Result<()> {
    if iters == 0 {
        return Err(Error::Config("--iters must be positive".into()));
    }
    let model = match (weights, config) {
        (Some(_), Some(_)) => return Err(Error::Config("give either --weights or --config, not both".into())),
        (Some(w), None) => io::read_weights(w)?,
        (None, c) => {
            let cfg = match c {
                Some(p) => RunConfig::load(p)?,
                None => RunConfig::default(),
            };
            TfNet::build(cfg.model, seed)?
        }
    };
    if model.is_fused() {
        return Err(Error::Config("bench needs a train-form model to compare against".into()));
    }
    let fused = model.fuse()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let input = Tensor::<f32>::from_fn(Shape::new(1, 3, size, size), |_, _, _, _| {
        rand::Rng::gen_range(&mut rng, 0.0..1.0)
    });
    let train_s = time_forward(&model, &input, iters)?;
    let fused_s = time_forward(&fused, &input, iters)?;
    println!("threads: {}", rayon::current_num_threads());
    println!("input: 1x3x{size}x{size}, {iters} iterations");
    println!("train form: {:.3} ms/frame ({} parameters)", train_s * 1e3, model.param_count());
    println!("fused form: {:.3} ms/frame ({} parameters)", fused_s * 1e3, fused.param_count());
    println!("fused/train throughput ratio: {:.3}", train_s / fused_s);
    Ok(())
}
