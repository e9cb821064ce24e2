//! Subcommand implementations.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use sepconv_core::datapipe::extract_triplets;
use sepconv_core::eval::{bench, kernel_visualize, overlay_baseline, withheld_frame_eval};
use sepconv_core::infer::interpolate;
use sepconv_core::model::{build, forward, ForwardMode, Parameters};
use sepconv_core::rng::RandomStream;
use sepconv_core::tensor::Tensor;
use sepconv_core::training::{
    train, FeatureExtractor, LossConfig, TrainOptions, DEFAULT_EXTRACTOR_CHANNELS,
    DEFAULT_EXTRACTOR_SEED,
};

use crate::config::{ExtractorChoice, RunConfig};
use crate::dataset::{write_dataset, DatasetReader};
use crate::error::{CliError, CliResult, OutputGuard};
use crate::imageio::{read_frame_dir, read_image, write_gray_png, write_image};
use crate::weights::{load_extractor, load_model, save_model};

#[derive(Parser)]
#[command(
    name = "sepconv",
    about = "Video frame interpolation via adaptive separable convolution",
    version
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Interpolate the midpoint frame between two images.
    Interpolate {
        frame1: PathBuf,
        frame2: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Recursively interpolate 2^depth - 1 in-between frames.
    MultiInterpolate {
        frame1: PathBuf,
        frame2: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        /// Output directory; frames are written as frame_t*.png in temporal order.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        depth: u32,
    },
    /// Train a fresh model with the L1 loss.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset prefix (PREFIX.manifest + PREFIX.records).
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        width_scale: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Fine-tune an existing checkpoint with the feature loss.
    Finetune {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        dataset: PathBuf,
        /// Starting checkpoint (from `train`).
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Build a training dataset from a directory of numbered frames.
    MakeDataset {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        frames: PathBuf,
        /// Output prefix (writes PREFIX.manifest and PREFIX.records).
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Withheld-frame evaluation over a directory of frames.
    Evaluate {
        #[arg(long)]
        frames: PathBuf,
        /// Model weights; mutually exclusive with --overlay.
        #[arg(long)]
        weights: Option<PathBuf>,
        /// Score the overlay (average) baseline instead of a model.
        #[arg(long)]
        overlay: bool,
        /// Where to write the CSV report.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Time full-frame interpolation and estimate the working set.
    Bench {
        #[arg(long)]
        width: usize,
        #[arg(long)]
        height: usize,
        #[arg(long, default_value_t = 5)]
        reps: usize,
        /// Model weights; a fresh seeded model is built when omitted.
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        width_scale: Option<usize>,
        /// Where to write the CSV (printed to stdout when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render the predicted kernels at one pixel as a grayscale PNG.
    VisualizeKernels {
        frame1: PathBuf,
        frame2: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        /// Pixel as X,Y in input-image coordinates.
        #[arg(long)]
        pixel: String,
        #[arg(long)]
        out: PathBuf,
    },
}

pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Interpolate {
            frame1,
            frame2,
            weights,
            out,
        } => cmd_interpolate(&frame1, &frame2, &weights, &out),
        Command::MultiInterpolate {
            frame1,
            frame2,
            weights,
            out,
            depth,
        } => cmd_multi_interpolate(&frame1, &frame2, &weights, &out, depth),
        Command::Train {
            config,
            dataset,
            out,
            seed,
            width_scale,
            steps,
        } => cmd_train(config.as_deref(), &dataset, &out, seed, width_scale, steps),
        Command::Finetune {
            config,
            dataset,
            weights,
            out,
            seed,
            steps,
        } => cmd_finetune(config.as_deref(), &dataset, &weights, &out, seed, steps),
        Command::MakeDataset {
            config,
            frames,
            out,
            seed,
        } => cmd_make_dataset(config.as_deref(), &frames, &out, seed),
        Command::Evaluate {
            frames,
            weights,
            overlay,
            out,
        } => cmd_evaluate(&frames, weights.as_deref(), overlay, out.as_deref()),
        Command::Bench {
            width,
            height,
            reps,
            weights,
            config,
            seed,
            width_scale,
            out,
        } => cmd_bench(
            width,
            height,
            reps,
            weights.as_deref(),
            config.as_deref(),
            seed,
            width_scale,
            out.as_deref(),
        ),
        Command::VisualizeKernels {
            frame1,
            frame2,
            weights,
            pixel,
            out,
        } => cmd_visualize_kernels(&frame1, &frame2, &weights, &pixel, &out),
    }
}

fn load_config(path: Option<&Path>) -> CliResult<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn load_frame_pair(frame1: &Path, frame2: &Path) -> CliResult<(Tensor<f32>, Tensor<f32>)> {
    let i1 = read_image(frame1)?;
    let i2 = read_image(frame2)?;
    if i1.shape() != i2.shape() {
        return Err(CliError::Config(format!(
            "input frames differ in size: {:?} vs {:?}",
            i1.shape(),
            i2.shape()
        )));
    }
    Ok((i1, i2))
}

fn cmd_interpolate(frame1: &Path, frame2: &Path, weights: &Path, out: &Path) -> CliResult<()> {
    let (i1, i2) = load_frame_pair(frame1, frame2)?;
    let params = load_model(weights)?;
    let mid = interpolate(&params, &i1, &i2)?;
    let mut guard = OutputGuard::new();
    guard.register(out);
    write_image(out, &mid)?;
    guard.commit();
    Ok(())
}

fn cmd_multi_interpolate(
    frame1: &Path,
    frame2: &Path,
    weights: &Path,
    out_dir: &Path,
    depth: u32,
) -> CliResult<()> {
    if depth == 0 || depth > 8 {
        return Err(CliError::Config(format!(
            "depth must be between 1 and 8, got {depth}"
        )));
    }
    let (i1, i2) = load_frame_pair(frame1, frame2)?;
    let params = load_model(weights)?;
    std::fs::create_dir_all(out_dir).map_err(|e| CliError::io(out_dir, e))?;

    // Dyadic recursion: the midpoint first, then the midpoints of each half.
    let denom = 1u32 << depth;
    let mut frames: Vec<(u32, Tensor<f32>)> = Vec::with_capacity(denom as usize - 1);
    fn recurse(
        params: &Parameters<f32>,
        a: &Tensor<f32>,
        b: &Tensor<f32>,
        lo: u32,
        hi: u32,
        acc: &mut Vec<(u32, Tensor<f32>)>,
    ) -> CliResult<()> {
        if hi - lo < 2 {
            return Ok(());
        }
        let mid_t = (lo + hi) / 2;
        let mid = interpolate(params, a, b)?;
        recurse(params, a, &mid, lo, mid_t, acc)?;
        let upper = recurse(params, &mid, b, mid_t, hi, acc);
        acc.push((mid_t, mid));
        upper
    }
    recurse(&params, &i1, &i2, 0, denom, &mut frames)?;
    frames.sort_by_key(|&(t, _)| t);

    let mut guard = OutputGuard::new();
    for (t, frame) in &frames {
        let name = format!("frame_t{:.4}.png", *t as f64 / denom as f64);
        let path = out_dir.join(name);
        guard.register(&path);
        write_image(&path, frame)?;
        println!("{}", path.display());
    }
    guard.commit();
    Ok(())
}

fn cmd_train(
    config: Option<&Path>,
    dataset: &Path,
    out: &Path,
    seed: Option<u64>,
    width_scale: Option<usize>,
    steps: Option<usize>,
) -> CliResult<()> {
    let mut run = load_config(config)?;
    if let Some(s) = seed {
        run.seed = s;
    }
    if let Some(ws) = width_scale {
        run.model.width_scale = ws;
    }
    if let Some(n) = steps {
        run.train_steps = n;
    }
    let reader = DatasetReader::open(dataset, run.data_crop, run.data_max_shift)?;
    let params = build::<f32>(&run.model, &mut RandomStream::new(run.seed))?;
    run_training(params, &reader, LossConfig::l1(), &run, out)
}

fn cmd_finetune(
    config: Option<&Path>,
    dataset: &Path,
    weights: &Path,
    out: &Path,
    seed: Option<u64>,
    steps: Option<usize>,
) -> CliResult<()> {
    let mut run = load_config(config)?;
    if let Some(s) = seed {
        run.seed = s;
    }
    if let Some(n) = steps {
        run.train_steps = n;
    }
    let reader = DatasetReader::open(dataset, run.data_crop, run.data_max_shift)?;
    let params = load_model(weights)?;
    let extractor = match &run.extractor {
        ExtractorChoice::Identity => FeatureExtractor::identity(),
        ExtractorChoice::RandomPyramid => FeatureExtractor::seeded_random_pyramid(
            DEFAULT_EXTRACTOR_SEED,
            &DEFAULT_EXTRACTOR_CHANNELS,
        )?,
        ExtractorChoice::External(path) => load_extractor(path)?,
    };
    let mut loss = LossConfig::lf_finetune(extractor);
    loss.lf_lr = run.lf_lr;
    run_training(params, &reader, loss, &run, out)
}

fn run_training(
    params: Parameters<f32>,
    reader: &DatasetReader,
    loss: LossConfig<f32>,
    run: &RunConfig,
    out: &Path,
) -> CliResult<()> {
    let options = TrainOptions {
        steps: run.train_steps,
        batch_size: run.batch_size,
        checkpoint_interval: run.checkpoint_interval,
        seed: run.seed,
        lr_override: None,
    };
    let mut guard = OutputGuard::new();
    let mut checkpoint_paths: Vec<PathBuf> = Vec::new();
    let outcome = {
        let checkpoint = |step: usize, p: &Parameters<f32>| {
            let path = out.with_extension(format!("step{step}.sepw"));
            save_model(&path, p).map_err(|e| sepconv_core::Error::Parameter(e.to_string()))?;
            checkpoint_paths.push(path.clone());
            eprintln!("checkpoint: {}", path.display());
            Ok(())
        };
        train(params, reader, &loss, &options, checkpoint)?
    };
    for p in &checkpoint_paths {
        guard.register(p);
    }
    guard.register(out);
    save_model(out, &outcome.params)?;

    let curve_path = out.with_extension("loss.csv");
    guard.register(&curve_path);
    let mut csv = String::from("step,loss,phase\n");
    for p in &outcome.curve {
        csv.push_str(&format!("{},{},{}\n", p.step, p.loss, p.phase.as_str()));
    }
    std::fs::write(&curve_path, csv).map_err(|e| CliError::io(&curve_path, e))?;
    guard.commit();
    println!("weights: {}", out.display());
    println!("loss curve: {}", curve_path.display());
    if let Some(last) = outcome.curve.last() {
        println!("final loss: {:.6}", last.loss);
    }
    Ok(())
}

fn cmd_make_dataset(
    config: Option<&Path>,
    frames_dir: &Path,
    out: &Path,
    seed: Option<u64>,
) -> CliResult<()> {
    let mut run = load_config(config)?;
    if let Some(s) = seed {
        run.seed = s;
    }
    let frames = read_frame_dir(frames_dir)?;
    let mut rng = RandomStream::new(run.seed);
    let settings = run.extract_settings();
    let source_id = frames_dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "frames".to_string());
    let (candidates, stats) = extract_triplets(&frames, &source_id, &settings, &mut rng)?;
    println!(
        "windows: {}  shot-rejected: {}  texture-rejected: {}  candidates: {}",
        stats.windows,
        stats.shot_rejected,
        stats.texture_rejected,
        candidates.len()
    );
    if candidates.is_empty() {
        return Err(CliError::Config(
            "no candidate triplets survived the filters".into(),
        ));
    }
    let target = run.data_target_count.min(candidates.len());
    let selected = sepconv_core::datapipe::weighted_select(&candidates, target, &mut rng)?;
    let chosen: Vec<_> = selected.iter().map(|&i| candidates[i].clone()).collect();

    let mut guard = OutputGuard::new();
    let (manifest, records) = write_dataset(out, &chosen)?;
    guard.register(&manifest);
    guard.register(&records);
    let flows: Vec<f32> = chosen.iter().map(|s| s.mean_flow).collect();
    let pct = sepconv_core::datapipe::flow_percentiles(&flows)?;
    println!(
        "samples: {}  flow p90: {:.2}  p95: {:.2}  max: {:.2}",
        chosen.len(),
        pct.p90,
        pct.p95,
        pct.max
    );
    println!("manifest: {}", manifest.display());
    println!("records: {}", records.display());
    guard.commit();
    Ok(())
}

fn cmd_evaluate(
    frames_dir: &Path,
    weights: Option<&Path>,
    overlay: bool,
    out: Option<&Path>,
) -> CliResult<()> {
    if overlay == weights.is_some() {
        return Err(CliError::Config(
            "pass exactly one of --weights PATH or --overlay".into(),
        ));
    }
    let frames = read_frame_dir(frames_dir)?;
    let report = if overlay {
        withheld_frame_eval(&frames, |a, b| overlay_baseline(a, b))?
    } else {
        let params = load_model(weights.expect("checked above"))?;
        withheld_frame_eval(&frames, |a, b| interpolate(&params, a, b))?
    };
    print!("{}", report.to_text());
    if let Some(path) = out {
        let mut guard = OutputGuard::new();
        guard.register(path);
        std::fs::write(path, report.to_csv()).map_err(|e| CliError::io(path, e))?;
        guard.commit();
        println!("report: {}", path.display());
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_bench(
    width: usize,
    height: usize,
    reps: usize,
    weights: Option<&Path>,
    config: Option<&Path>,
    seed: Option<u64>,
    width_scale: Option<usize>,
    out: Option<&Path>,
) -> CliResult<()> {
    let params = match weights {
        Some(path) => load_model(path)?,
        None => {
            let mut run = load_config(config)?;
            if let Some(ws) = width_scale {
                run.model.width_scale = ws;
            }
            build::<f32>(&run.model, &mut RandomStream::new(seed.unwrap_or(0)))?
        }
    };
    let report = bench(
        |a, b| interpolate(&params, a, b),
        width,
        height,
        reps,
        &params.config,
    )?;
    let n = params.config.kernel_size as u64;
    let full2d = sepconv_core::sepconv::memory_footprint(
        width as u64,
        height as u64,
        n,
        sepconv_core::sepconv::KernelStorage::Full2d,
        4,
    );
    let mut csv = String::from("width,height,n,mode,seconds,bytes\n");
    csv.push_str(&format!(
        "{width},{height},{n},separable,{:.6},{}\n",
        report.seconds_per_frame, report.working_set_bytes
    ));
    // The dense route is an estimate only: its kernel buffer alone would
    // need `full2d` bytes.
    csv.push_str(&format!("{width},{height},{n},full2d,,{full2d}\n"));
    match out {
        Some(path) => {
            let mut guard = OutputGuard::new();
            guard.register(path);
            std::fs::write(path, &csv).map_err(|e| CliError::io(path, e))?;
            guard.commit();
        }
        None => print!("{csv}"),
    }
    Ok(())
}

fn cmd_visualize_kernels(
    frame1: &Path,
    frame2: &Path,
    weights: &Path,
    pixel: &str,
    out: &Path,
) -> CliResult<()> {
    let (x, y) = pixel
        .split_once(',')
        .and_then(|(a, b)| Some((a.trim().parse::<usize>().ok()?, b.trim().parse::<usize>().ok()?)))
        .ok_or_else(|| CliError::Config(format!("--pixel expects X,Y; got `{pixel}`")))?;
    let (i1, i2) = load_frame_pair(frame1, frame2)?;
    let params = load_model(weights)?;

    // Same padding the interpolator applies; kernel-field coordinates shift
    // by the top/left margins.
    let (h, w) = (i1.shape()[0], i1.shape()[1]);
    if x >= w || y >= h {
        return Err(CliError::Config(format!(
            "pixel ({x}, {y}) outside the {w}x{h} frame"
        )));
    }
    let factor = params.config.pool_factor();
    let (pad_h, pad_w) = ((factor - h % factor) % factor, (factor - w % factor) % factor);
    let (top, left) = (pad_h / 2, pad_w / 2);
    let p1 = sepconv_core::infer::replicate_pad_rect(&i1, top, pad_h - top, left, pad_w - left)?;
    let p2 = sepconv_core::infer::replicate_pad_rect(&i2, top, pad_h - top, left, pad_w - left)?;
    let (kf, _) = forward(&params, &p1, &p2, ForwardMode::Infer)?;
    let glimpse = kernel_visualize(&kf, x + left, y + top)?;

    let mut guard = OutputGuard::new();
    guard.register(out);
    write_gray_png(out, &glimpse.image)?;
    guard.commit();
    println!(
        "pixel ({x}, {y}): center-of-mass offset (dy, dx) = ({:.3}, {:.3})",
        glimpse.offset.0, glimpse.offset.1
    );
    println!(
        "implied frame-to-frame motion (dy, dx) = ({:.3}, {:.3})",
        glimpse.implied_motion.0, glimpse.implied_motion.1
    );
    println!("kernel image: {}", out.display());
    Ok(())
}
