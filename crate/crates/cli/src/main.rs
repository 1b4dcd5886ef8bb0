//! `dynsplat` command-line entry point.
//!
//! Every subcommand writes `config.json` (the fully resolved run
//! configuration) into its output directory before doing any work, so a run
//! can be repeated from that file and the dataset alone.

mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context as _;
use clap::{Args, Parser, Subcommand};
use log::info;

use dynsplat::eval::{evaluate, fps_benchmark, generate_synthetic, write_synthetic, Evaluation};
use dynsplat::ingest::{
    export_ply, frame_file_name, load_dataset, load_depth, save_depth, save_image, save_mask, PlyPoint,
};
use dynsplat::init::{fuse_initial_points, points_to_cloud};
use dynsplat::render::render_cloud;
use dynsplat::train::{load_checkpoint, save_checkpoint, write_log, Checkpoint, Trainer};
use dynsplat::{DepthMap, Error, FrameSequence};

use config::{Overrides, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "dynsplat", version, about = "Dynamic Gaussian splatting with depth priors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fuse depth-prior points into the initial cloud.
    Init(CommonArgs),
    /// Optimize a cloud on the training split.
    Train {
        #[command(flatten)]
        common: CommonArgs,
        /// Continue from this checkpoint instead of a fresh initialization.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Render colour and depth from a checkpoint.
    Render {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// `all`, `train`, `test`, or a list like `0,3,5-8`.
        #[arg(long, default_value = "all")]
        frames: String,
    },
    /// Score a checkpoint on the test split.
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Depth ground truth directory; defaults to `<dataset>/gt_depth` when
        /// present, else the dataset's own depth maps.
        #[arg(long)]
        gt_depth: Option<PathBuf>,
        /// Timed rendering passes over the test frames (0 skips timing).
        #[arg(long, default_value_t = 0)]
        fps_repetitions: usize,
    },
    /// Generate a synthetic dataset with ground truth.
    Synth(CommonArgs),
}

#[derive(Args, Debug)]
struct CommonArgs {
    /// JSON run configuration; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

/// Failure classes mapped to exit codes.
enum Failure {
    Usage(anyhow::Error),
    Data(anyhow::Error),
    Numerical(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
            Failure::Numerical(_) => 3,
        }
    }

    fn error(&self) -> &anyhow::Error {
        match self {
            Failure::Usage(e) | Failure::Data(e) | Failure::Numerical(e) => e,
        }
    }
}

fn usage(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Usage(e.into())
}

/// Numerical aborts get their own class. Everything else from the library is
/// a data problem once the configuration has been validated.
fn classify(e: anyhow::Error) -> Failure {
    match e.downcast_ref::<Error>() {
        Some(Error::NonFiniteLoss { .. }) => Failure::Numerical(e),
        _ => Failure::Data(e),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error());
            ExitCode::from(f.code())
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let common = match &cli.command {
        Command::Init(c) | Command::Synth(c) => c,
        Command::Train { common, .. } | Command::Render { common, .. } | Command::Eval { common, .. } => common,
    };
    let cfg = RunConfig::resolve(common.config.as_deref(), &common.overrides).map_err(usage)?;
    cfg.validate().map_err(usage)?;
    let output = cfg
        .output
        .clone()
        .ok_or_else(|| usage(anyhow::anyhow!("--output is required")))?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| Failure::Data(e.into()))?;
    pool.install(|| {
        fs::create_dir_all(&output)
            .with_context(|| format!("creating {}", output.display()))
            .map_err(Failure::Data)?;
        cfg.write_echo(&output.join("config.json")).map_err(Failure::Data)?;
        match &cli.command {
            Command::Init(_) => cmd_init(&cfg, &output),
            Command::Train { resume, .. } => cmd_train(&cfg, &output, resume.as_deref()),
            Command::Render { checkpoint, frames, .. } => cmd_render(&cfg, &output, checkpoint, frames),
            Command::Eval {
                checkpoint,
                gt_depth,
                fps_repetitions,
                ..
            } => cmd_eval(&cfg, &output, checkpoint, gt_depth.as_deref(), *fps_repetitions),
            Command::Synth(_) => cmd_synth(&cfg, &output),
        }
        .map_err(classify)
    })
}

fn dataset(cfg: &RunConfig) -> anyhow::Result<FrameSequence> {
    let path = cfg.dataset.as_ref().context("--dataset is required")?;
    let seq = load_dataset(path)?;
    info!("loaded {} frames from {}", seq.len(), path.display());
    Ok(seq)
}

fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn cmd_init(cfg: &RunConfig, out: &Path) -> anyhow::Result<()> {
    let seq = dataset(cfg)?;
    let fused = fuse_initial_points(&seq, &cfg.init)?;
    let ply: Vec<PlyPoint> = fused
        .points
        .iter()
        .map(|p| PlyPoint::new(&p.position, &p.color))
        .collect();
    export_ply(&ply, &out.join("init.ply"))?;
    for mm in &fused.motion_masks {
        save_mask(
            &mm.mask,
            &out.join("motion_masks").join(frame_file_name(mm.frame_index)),
        )?;
    }
    let mut summary = format!("tau={}\ntotal_points={}\n", fused.tau, fused.points.len());
    for (i, n) in fused.per_frame.iter().enumerate() {
        summary.push_str(&format!("frame_{i:06}={n}\n"));
    }
    write_text(&out.join("init_summary.txt"), &summary)?;
    info!("fused {} points (tau {})", fused.points.len(), fused.tau);
    Ok(())
}

fn cmd_train(cfg: &RunConfig, out: &Path, resume: Option<&Path>) -> anyhow::Result<()> {
    let seq = dataset(cfg)?;
    let mut trainer = match resume {
        Some(p) => Trainer::from_checkpoint(&seq, load_checkpoint(p)?, cfg.train.clone())?,
        None => {
            let fused = fuse_initial_points(&seq, &cfg.init)?;
            let cloud = points_to_cloud(&fused.points, cfg.init.basis_count)?;
            info!("initialized {} gaussians", cloud.len());
            Trainer::new(&seq, cloud, cfg.train.clone())?
        }
    };
    let result = trainer.run();
    // the log up to the failure is still useful
    write_log(trainer.log(), &out.join("log.csv"))?;
    result?;
    save_checkpoint(&trainer.checkpoint(), &out.join("checkpoint.bin"))?;
    info!(
        "finished {} iterations with {} gaussians",
        trainer.iteration(),
        trainer.cloud().len()
    );
    Ok(())
}

/// Parses `all`, `train`, `test` or a comma list of indices and `a-b` ranges.
fn select_frames(spec: &str, seq: &FrameSequence) -> anyhow::Result<Vec<usize>> {
    let frames = match spec.trim() {
        "all" => (0..seq.len()).collect(),
        "train" => seq.train_indices(),
        "test" => seq.test_indices(),
        list => {
            let mut v = Vec::new();
            for part in list.split(',').map(str::trim).filter(|p| !p.is_empty()) {
                match part.split_once('-') {
                    Some((a, b)) => {
                        let (a, b): (usize, usize) = (a.trim().parse()?, b.trim().parse()?);
                        anyhow::ensure!(a <= b, "empty frame range {part}");
                        v.extend(a..=b);
                    }
                    None => v.push(part.parse().with_context(|| format!("bad frame index {part:?}"))?),
                }
            }
            v
        }
    };
    if let Some(&bad) = frames.iter().find(|&&i| i >= seq.len()) {
        return Err(Error::FrameOutOfRange {
            index: bad,
            len: seq.len(),
        }
        .into());
    }
    Ok(frames)
}

fn load_ck(path: &Path) -> anyhow::Result<Checkpoint> {
    Ok(load_checkpoint(path)?)
}

fn cmd_render(cfg: &RunConfig, out: &Path, checkpoint: &Path, frames: &str) -> anyhow::Result<()> {
    let seq = dataset(cfg)?;
    let frames = select_frames(frames, &seq)?;
    let ck = load_ck(checkpoint)?;
    for &i in &frames {
        let r = render_cloud(&ck.cloud, &seq.camera, seq.frames[i].time);
        let name = frame_file_name(i);
        save_image(&r.color, &out.join("color").join(&name))?;
        save_depth(&r.depth, seq.depth_scale, &out.join("depth").join(&name))?;
    }
    info!("rendered {} frames", frames.len());
    Ok(())
}

fn cmd_eval(
    cfg: &RunConfig,
    out: &Path,
    checkpoint: &Path,
    gt_dir: Option<&Path>,
    fps_repetitions: usize,
) -> anyhow::Result<()> {
    let seq = dataset(cfg)?;
    let ck = load_ck(checkpoint)?;
    let test = seq.test_indices();
    anyhow::ensure!(!test.is_empty(), "dataset has no test frames");

    let default_gt = cfg.dataset.as_ref().map(|d| d.join("gt_depth"));
    let gt_dir = gt_dir.map(Path::to_path_buf).or(default_gt.filter(|d| d.is_dir()));
    let gt: Option<Vec<DepthMap>> = match &gt_dir {
        Some(dir) => {
            info!("depth ground truth from {}", dir.display());
            Some(
                (0..seq.len())
                    .map(|i| load_depth(&dir.join(frame_file_name(i)), seq.depth_scale))
                    .collect::<Result<_, _>>()?,
            )
        }
        None => None,
    };

    let Evaluation {
        per_frame,
        mut aggregate,
    } = evaluate(&ck.cloud, &seq, &test, gt.as_deref(), cfg.eval_mask)?;
    let fps = if fps_repetitions > 0 {
        let r = fps_benchmark(&ck.cloud, &seq, &test, fps_repetitions, cfg.threads.max(1))?;
        aggregate.fps = Some(r.median_fps);
        Some(r)
    } else {
        None
    };

    let mut per_text = String::new();
    for r in &per_frame {
        per_text.push_str(&r.to_key_value());
        per_text.push('\n');
    }
    write_text(&out.join("metrics_per_frame.txt"), &per_text)?;
    write_text(&out.join("metrics.txt"), &aggregate.to_key_value())?;
    let summary = serde_json::json!({
        "checkpoint": checkpoint,
        "test_frames": test,
        "aggregate": aggregate,
        "per_frame": per_frame,
        "fps": fps,
    });
    write_text(&out.join("metrics.json"), &serde_json::to_string_pretty(&summary)?)?;
    print!("{}", aggregate.to_key_value());
    Ok(())
}

fn cmd_synth(cfg: &RunConfig, out: &Path) -> anyhow::Result<()> {
    let scene = generate_synthetic(&cfg.synth)?;
    write_synthetic(&scene, out)?;
    info!(
        "wrote {} frames of {} gaussians to {}",
        scene.sequence.len(),
        scene.generator.len(),
        out.display()
    );
    Ok(())
}
