//! Image and depth metrics, the rendering-speed benchmark and the synthetic
//! scene generator.

mod metrics;
pub mod synthetic;

pub use metrics::{depth_metrics, psnr, ssim, ssim_with_grad, DepthMetrics, PSNR_CAP, SSIM_SIGMA, SSIM_WINDOW};
pub use synthetic::{generate_synthetic, write_synthetic, OccluderSpec, SyntheticScene, SyntheticSpec};

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::GaussianCloud;
use crate::grid::{BinaryMask, DepthMap};
use crate::ingest::FrameSequence;
use crate::render::render_cloud;

/// Which pixels the metrics see.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMask {
    /// Tool pixels excluded.
    #[default]
    Tissue,
    All,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// `None` for an aggregate.
    pub frame: Option<usize>,
    pub psnr: f64,
    pub ssim: f64,
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub rmse: f64,
    pub rmse_log: f64,
    pub depth_pixels: usize,
    pub fps: Option<f64>,
}

impl MetricReport {
    pub fn to_key_value(&self) -> String {
        let mut s = String::new();
        if let Some(f) = self.frame {
            let _ = writeln!(s, "frame={f}");
        }
        for (k, v) in [
            ("psnr", self.psnr),
            ("ssim", self.ssim),
            ("abs_rel", self.abs_rel),
            ("sq_rel", self.sq_rel),
            ("rmse", self.rmse),
            ("rmse_log", self.rmse_log),
        ] {
            let _ = writeln!(s, "{k}={v}");
        }
        let _ = writeln!(s, "depth_pixels={}", self.depth_pixels);
        if let Some(fps) = self.fps {
            let _ = writeln!(s, "fps={fps}");
        }
        s
    }

    /// Mean of every per-frame field.
    pub fn mean(reports: &[MetricReport]) -> MetricReport {
        let n = reports.len().max(1) as f64;
        let avg = |f: fn(&MetricReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        MetricReport {
            frame: None,
            psnr: avg(|r| r.psnr),
            ssim: avg(|r| r.ssim),
            abs_rel: avg(|r| r.abs_rel),
            sq_rel: avg(|r| r.sq_rel),
            rmse: avg(|r| r.rmse),
            rmse_log: avg(|r| r.rmse_log),
            depth_pixels: reports.iter().map(|r| r.depth_pixels).sum(),
            fps: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub per_frame: Vec<MetricReport>,
    pub aggregate: MetricReport,
}

/// Renders `frames` and scores them against the sequence. Depth ground truth
/// comes from `gt_depth` when given (indexed like the sequence), otherwise
/// from the frames' own depth maps.
pub fn evaluate(
    cloud: &GaussianCloud,
    seq: &FrameSequence,
    frames: &[usize],
    gt_depth: Option<&[DepthMap]>,
    mask: EvalMask,
) -> Result<Evaluation> {
    if frames.is_empty() {
        return Err(Error::InvalidInput("no frames to evaluate".into()));
    }
    let mut per_frame = Vec::with_capacity(frames.len());
    for &i in frames {
        let frame = seq.frames.get(i).ok_or(Error::FrameOutOfRange {
            index: i,
            len: seq.len(),
        })?;
        let out = render_cloud(cloud, &seq.camera, frame.time);
        let region = match mask {
            EvalMask::Tissue => frame.tissue_mask.clone(),
            EvalMask::All => BinaryMask::filled(frame.width(), frame.height(), true),
        };
        let gt = match gt_depth {
            Some(d) => d.get(i).ok_or(Error::FrameOutOfRange { index: i, len: d.len() })?,
            None => &frame.depth,
        };
        let depth_mask = region.zip_map(gt, |&m, &g| m && g > 0.0).and(&out.covered());
        let image = out.color.map(|c| c.map(|v| v.clamp(0.0, 1.0)));
        let dm = depth_metrics(&out.depth, gt, &depth_mask)?;
        per_frame.push(MetricReport {
            frame: Some(i),
            psnr: psnr(&image, &frame.image, &region)?,
            ssim: ssim(&image, &frame.image, &region)?,
            abs_rel: dm.abs_rel,
            sq_rel: dm.sq_rel,
            rmse: dm.rmse,
            rmse_log: dm.rmse_log,
            depth_pixels: dm.count,
            fps: None,
        });
    }
    let aggregate = MetricReport::mean(&per_frame);
    Ok(Evaluation { per_frame, aggregate })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FpsReport {
    pub median_fps: f64,
    pub iqr_fps: f64,
    pub repetitions: usize,
    pub frames: usize,
    pub threads: usize,
    pub fps_per_repetition: Vec<f64>,
}

/// Linear-interpolated quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Times deform+project+rasterize over the given frames. Runs on a dedicated
/// pool of `threads` workers (1 unless overridden).
pub fn fps_benchmark(
    cloud: &GaussianCloud,
    seq: &FrameSequence,
    frames: &[usize],
    repetitions: usize,
    threads: usize,
) -> Result<FpsReport> {
    if repetitions == 0 || frames.is_empty() {
        return Err(Error::InvalidInput("benchmark needs frames and repetitions".into()));
    }
    if let Some(&bad) = frames.iter().find(|&&i| i >= seq.len()) {
        return Err(Error::FrameOutOfRange {
            index: bad,
            len: seq.len(),
        });
    }
    let threads = threads.max(1);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::InvalidState(format!("thread pool: {e}")))?;
    let mut fps: Vec<f64> = pool.install(|| {
        (0..repetitions)
            .map(|_| {
                let start = Instant::now();
                for &i in frames {
                    let out = render_cloud(cloud, &seq.camera, seq.frames[i].time);
                    std::hint::black_box(&out.color);
                }
                frames.len() as f64 / start.elapsed().as_secs_f64().max(1e-12)
            })
            .collect()
    });
    let per_rep = fps.clone();
    fps.sort_by(f64::total_cmp);
    Ok(FpsReport {
        median_fps: quantile(&fps, 0.5),
        iqr_fps: quantile(&fps, 0.75) - quantile(&fps, 0.25),
        repetitions,
        frames: frames.len(),
        threads,
        fps_per_repetition: per_rep,
    })
}
