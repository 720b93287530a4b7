use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use styleforge_core::config::{parse_resolution, ExtractorChoice, RunConfig};
use styleforge_core::flow::synth_sequence;
use styleforge_core::image::write_mask_pgm;
use styleforge_core::inspect::{format_rows, size_row, size_table};
use styleforge_core::perceptual::{load_vgg16, FeatureExtractor};
use styleforge_core::pipeline::{
    bench_model, load_images, load_pairs, read_frame, stylize_dir, write_bench_report, write_frame, BenchResult,
    FrameSequence,
};
use styleforge_core::trainer::{
    finetune_stage2, style_target_from_image, train_stage1, write_trace, Checkpoints, LossRecord, RunOptions,
};
use styleforge_core::{flow::write_flo, ArchConfig, StyleNetModel, Variant};

#[derive(Parser)]
#[command(name = "styleforge", version, about = "Scalable feed-forward video style transfer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parameter count and storage size of a configuration.
    Inspect {
        #[arg(long, required_unless_present = "all")]
        alpha: Option<f32>,
        #[arg(long, required_unless_present = "all")]
        beta: Option<f32>,
        #[arg(long, default_value = "paper")]
        variant: Variant,
        /// Print every configuration of the size study.
        #[arg(long)]
        all: bool,
    },
    /// Stylize a directory of PPM frames.
    Stylize {
        #[arg(long)]
        model: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long = "out")]
        output: PathBuf,
        /// Network input size, WxH.
        #[arg(long, value_parser = parse_resolution)]
        resize: Option<(usize, usize)>,
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Measure frames per second for one or more configurations.
    Bench {
        /// Comma-separated `alpha:beta[:variant]` entries, or `all`.
        #[arg(long, conflicts_with = "model")]
        configs: Option<String>,
        /// Bench a trained model instead of freshly initialized configs.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        frames: PathBuf,
        /// Network input size, WxH.
        #[arg(long, value_parser = parse_resolution)]
        resolution: (usize, usize),
        #[arg(long = "loop", default_value_t = 1)]
        loops: usize,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Stage 1: content, style and total-variation training on single images.
    Train(TrainArgs),
    /// Stage 2: temporal fine-tuning on frame pairs with optical flow.
    Finetune(TrainArgs),
    /// Write a synthetic clip with exact flow and masks.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 8)]
        frames: usize,
        #[arg(long, value_parser = parse_resolution, default_value = "64x64")]
        resolution: (usize, usize),
        /// Per-frame motion in pixels, `U,V`.
        #[arg(long, value_parser = parse_velocity, default_value = "2,1", allow_hyphen_values = true)]
        velocity: (i32, i32),
    },
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn parse_velocity(s: &str) -> Result<(i32, i32), String> {
    let (u, v) = s.split_once(',').ok_or_else(|| format!("expected U,V, got \"{s}\""))?;
    let p = |t: &str| t.trim().parse::<i32>().map_err(|e| format!("{t:?}: {e}"));
    Ok((p(u)?, p(v)?))
}

fn parse_configs(list: &str) -> Result<Vec<ArchConfig>> {
    if list.trim() == "all" {
        return Ok(ArchConfig::size_study());
    }
    list.split(',')
        .map(|entry| {
            let parts: Vec<&str> = entry.trim().split(':').collect();
            let (a, b, v) = match parts.as_slice() {
                [a, b] => (*a, *b, None),
                [a, b, v] => (*a, *b, Some(*v)),
                _ => bail!("config entry \"{entry}\" is not alpha:beta[:variant]"),
            };
            let alpha: f32 = a.parse().with_context(|| format!("alpha in \"{entry}\""))?;
            let beta: f32 = b.parse().with_context(|| format!("beta in \"{entry}\""))?;
            let variant = match v {
                Some(v) => v.parse()?,
                None if beta == 1.0 => Variant::LegacyV1,
                None => Variant::Paper,
            };
            Ok(ArchConfig::new(alpha, beta, variant)?)
        })
        .collect()
}

fn inspect(alpha: Option<f32>, beta: Option<f32>, variant: Variant, all: bool) -> Result<()> {
    let rows = if all {
        size_table()
    } else {
        let (a, b) = (alpha.expect("clap enforces"), beta.expect("clap enforces"));
        vec![size_row(ArchConfig::new(a, b, variant)?)]
    };
    print!("{}", format_rows(&rows));
    Ok(())
}

fn bench(
    configs: Option<String>,
    model: Option<PathBuf>,
    frames_dir: &Path,
    resolution: (usize, usize),
    loops: usize,
    report: Option<PathBuf>,
) -> Result<()> {
    let frames = FrameSequence::open(frames_dir)?.load_all()?;
    let models: Vec<StyleNetModel> = match (model, configs) {
        (Some(path), _) => vec![StyleNetModel::load(&path).with_context(|| format!("loading {}", path.display()))?],
        (None, Some(list)) => parse_configs(&list)?.into_iter().map(|c| StyleNetModel::build(c, 0)).collect(),
        (None, None) => bail!("pass --configs or --model"),
    };
    let mut results: Vec<BenchResult> = Vec::new();
    for m in &models {
        let r = bench_model(m, &frames, resolution, loops, true)?;
        println!(
            "alpha {:.3} beta {:.2} {:<9} {:>8} params  {:>8.2} fps (with resize)  {:>8.2} fps (forward)",
            r.config.alpha(),
            r.config.beta(),
            r.config.variant().to_string(),
            r.params,
            r.fps_end_to_end,
            r.fps_forward.unwrap_or(f64::NAN)
        );
        results.push(r);
    }
    if let Some(path) = report {
        let mut out = BufWriter::new(File::create(&path).with_context(|| format!("creating {}", path.display()))?);
        write_bench_report(&mut out, &results)?;
        out.flush()?;
    }
    Ok(())
}

fn extractor_for(choice: &ExtractorChoice) -> Result<FeatureExtractor> {
    Ok(match choice {
        ExtractorChoice::Tiny { seed } => FeatureExtractor::tiny(*seed),
        ExtractorChoice::Vgg16 { weights } => {
            load_vgg16(weights).with_context(|| format!("loading extractor weights {}", weights.display()))?
        }
    })
}

fn save_trace(path: &Path, trace: &[LossRecord]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    write_trace(&mut out, trace)?;
    out.flush()?;
    Ok(())
}

fn default_trace_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".trace.csv");
    PathBuf::from(s)
}

fn run_training(args: &TrainArgs, finetune: bool) -> Result<()> {
    let cfg = RunConfig::from_file(&args.config)?;
    let extractor = extractor_for(&cfg.extractor)?;
    let style = read_frame(&cfg.style_image).context("reading style_image")?;
    let target = style_target_from_image(&extractor, &style, cfg.training.style_size)?;

    let mut model = match &cfg.init_model {
        Some(p) => StyleNetModel::load(p).with_context(|| format!("loading init_model {}", p.display()))?,
        None if finetune => bail!("finetune needs init_model in {}", args.config.display()),
        None => StyleNetModel::build(cfg.arch, cfg.model_seed),
    };
    let checkpoints = cfg.checkpoint_dir.as_ref().map(|dir| Checkpoints {
        dir: dir.clone(),
        prefix: if finetune { "finetune" } else { "train" }.to_string(),
    });
    if let Some(c) = &checkpoints {
        fs::create_dir_all(&c.dir).with_context(|| format!("creating {}", c.dir.display()))?;
    }
    let run = RunOptions {
        resume: None,
        checkpoints,
    };
    let (trace, _) = if finetune {
        let pairs = load_pairs(&args.data, cfg.training.stage2_resolution)?;
        log::info!("{} frame pairs", pairs.len());
        finetune_stage2(&mut model, &pairs, &extractor, &target, &cfg.training, run)?
    } else {
        let images = load_images(&args.data, cfg.training.stage1_resolution)?;
        log::info!("{} training images", images.len());
        train_stage1(&mut model, &images, &extractor, &target, &cfg.training, run)?
    };
    model.save(&args.out).with_context(|| format!("writing {}", args.out.display()))?;
    let trace_path = cfg.trace.clone().unwrap_or_else(|| default_trace_path(&args.out));
    save_trace(&trace_path, &trace)?;
    if let Some(last) = trace.last() {
        println!("step {} total loss {:.6e}", last.step, last.terms.total);
    }
    println!("wrote {} and {}", args.out.display(), trace_path.display());
    Ok(())
}

fn synth(out: &Path, seed: u64, frames: usize, (h, w): (usize, usize), velocity: (i32, i32)) -> Result<()> {
    let seq = synth_sequence(seed, frames, h, w, velocity)?;
    for sub in ["frames", "flow", "mask"] {
        fs::create_dir_all(out.join(sub))?;
    }
    for (k, f) in seq.frames.iter().enumerate() {
        write_frame(&out.join("frames").join(format!("{k:05}.ppm")), f)?;
    }
    for (k, (f, m)) in seq.flows.iter().zip(&seq.masks).enumerate() {
        fs::write(out.join("flow").join(format!("{k:05}.flo")), write_flo(f))?;
        fs::write(out.join("mask").join(format!("{k:05}.pgm")), write_mask_pgm(m))?;
    }
    println!("wrote {frames} frames to {}", out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Inspect {
            alpha,
            beta,
            variant,
            all,
        } => inspect(alpha, beta, variant, all),
        Command::Stylize {
            model,
            input,
            output,
            resize,
            workers,
        } => {
            let m = StyleNetModel::load(&model).with_context(|| format!("loading {}", model.display()))?;
            let timings = stylize_dir(&m, &input, &output, resize, workers)?;
            let total: f64 = timings.iter().map(|t| t.millis).sum();
            println!(
                "stylized {} frames, {:.1} ms per frame",
                timings.len(),
                total / timings.len().max(1) as f64
            );
            Ok(())
        }
        Command::Bench {
            configs,
            model,
            frames,
            resolution,
            loops,
            report,
        } => bench(configs, model, &frames, resolution, loops, report),
        Command::Train(args) => run_training(&args, false),
        Command::Finetune(args) => run_training(&args, true),
        Command::Synth {
            out,
            seed,
            frames,
            resolution,
            velocity,
        } => synth(&out, seed, frames, resolution, velocity),
    }
}

/// Error chain joined with `: `, skipping causes already quoted by the
/// message above them.
fn describe(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if !out.ends_with(&text) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&text);
        }
    }
    out
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::FAILURE
        }
    }
}
