//! Losses, optimizer, density control and the training loop.

pub mod adam;
pub mod backward;
pub mod canny;
pub mod checkpoint;
pub mod density;
pub mod loss;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use backward::{cloud_backward, CloudGrad};
pub use canny::{canny_edges, EdgeMask};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use density::{density_control, scene_extent, DensityConfig, DensityState, DensityStats};
pub use loss::{
    depth_loss, inverse_depth_loss, l1_depth_loss, logl1_depth_loss, normalized_depth_loss, photometric_loss,
    smoothness_loss, total_loss, DepthLossKind, LossConfig, LossReport, Normalization,
};

use std::fmt;
use std::io::Write as _;
use std::path::Path;

use log::{debug, info};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::deform::deform_gaussians;
use crate::error::{Error, Result};
use crate::gaussian::GaussianCloud;
use crate::ingest::FrameSequence;
use crate::render::{cull_and_project, rasterize, rasterize_backward};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub iterations: u64,
    pub log_interval: u64,
    pub loss: LossConfig,
    pub adam: AdamConfig,
    pub density: DensityConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 6000,
            log_interval: 100,
            loss: LossConfig::default(),
            adam: AdamConfig::default(),
            density: DensityConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.log_interval == 0 {
            return Err(Error::InvalidInput("log_interval must be positive".into()));
        }
        self.loss.validate()?;
        self.adam.validate()?;
        self.density.validate()
    }
}

/// One metrics-log line.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    /// Completed iterations.
    pub iter: u64,
    pub color_loss: f64,
    pub depth_loss: f64,
    pub smooth_loss: f64,
    pub total: f64,
    pub num_gaussians: usize,
}

pub const LOG_HEADER: &str = "iter,color_loss,depth_loss,smooth_loss,total,num_gaussians";

impl fmt::Display for LogRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{},{},{},{},{},{}",
            self.iter, self.color_loss, self.depth_loss, self.smooth_loss, self.total, self.num_gaussians
        )
    }
}

pub fn write_log(rows: &[LogRow], path: &Path) -> Result<()> {
    let write = || -> std::io::Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "{LOG_HEADER}")?;
        for r in rows {
            writeln!(f, "{r}")?;
        }
        f.flush()
    };
    write().map_err(|source| Error::Write {
        path: path.to_path_buf(),
        source,
    })
}

/// Outcome of one optimization step.
#[derive(Clone, Debug)]
pub struct StepInfo {
    pub frame: usize,
    pub color_loss: f64,
    pub depth_loss: f64,
    pub smooth_loss: f64,
    pub total: f64,
    pub density: Option<DensityStats>,
}

/// Stateful optimizer over one sequence. Training frames are visited
/// round-robin in index order.
pub struct Trainer<'a> {
    seq: &'a FrameSequence,
    cfg: TrainConfig,
    cloud: GaussianCloud,
    adam: AdamState,
    density: DensityState,
    iteration: u64,
    train_frames: Vec<usize>,
    /// Indexed like `train_frames`.
    edges: Vec<EdgeMask>,
    log: Vec<LogRow>,
}

impl<'a> Trainer<'a> {
    pub fn new(seq: &'a FrameSequence, cloud: GaussianCloud, cfg: TrainConfig) -> Result<Self> {
        let extent = scene_extent(&cloud);
        let ck = Checkpoint {
            iteration: 0,
            adam: AdamState::new(&cloud),
            density: DensityState::new(&cloud, extent),
            cloud,
        };
        Self::from_checkpoint(seq, ck, cfg)
    }

    pub fn from_checkpoint(seq: &'a FrameSequence, ck: Checkpoint, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if ck.cloud.is_empty() {
            return Err(Error::EmptyCloud);
        }
        ck.adam.check(&ck.cloud)?;
        if ck.density.grad_accum.len() != ck.cloud.len() || ck.density.counts.len() != ck.cloud.len() {
            return Err(Error::InvalidState("density state misaligned with cloud".into()));
        }
        let train_frames = seq.train_indices();
        if train_frames.is_empty() {
            return Err(Error::InvalidInput("training split is empty".into()));
        }
        let l = &cfg.loss;
        let edges = train_frames
            .par_iter()
            .map(|&i| canny_edges(&seq.frames[i].depth, l.canny_low, l.canny_high, l.canny_blur_sigma))
            .collect();
        Ok(Self {
            seq,
            cfg,
            cloud: ck.cloud,
            adam: ck.adam,
            density: ck.density,
            iteration: ck.iteration,
            train_frames,
            edges,
            log: Vec::new(),
        })
    }

    pub fn cloud(&self) -> &GaussianCloud {
        &self.cloud
    }

    pub fn into_cloud(self) -> GaussianCloud {
        self.cloud
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn log(&self) -> &[LogRow] {
        &self.log
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            iteration: self.iteration,
            cloud: self.cloud.clone(),
            adam: self.adam.clone(),
            density: self.density.clone(),
        }
    }

    fn diagnostics(&self) -> String {
        let gs = self.cloud.gaussians();
        let non_finite = gs.iter().filter(|g| !g.is_finite()).count();
        let fin = |f: fn(&crate::gaussian::Gaussian) -> f64| {
            gs.iter()
                .map(f)
                .filter(|v| v.is_finite())
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)))
        };
        let op = fin(|g| g.opacity());
        let sc = fin(|g| g.scale().max());
        let pos = fin(|g| g.position.norm());
        format!(
            "{} gaussians, {non_finite} non-finite; opacity [{:.3e}, {:.3e}]; max scale [{:.3e}, {:.3e}]; |position| [{:.3e}, {:.3e}]",
            gs.len(),
            op.0,
            op.1,
            sc.0,
            sc.1,
            pos.0,
            pos.1
        )
    }

    pub fn step(&mut self) -> Result<StepInfo> {
        if self.cloud.is_empty() {
            return Err(Error::EmptyCloud);
        }
        let slot = (self.iteration % self.train_frames.len() as u64) as usize;
        let index = self.train_frames[slot];
        let frame = &self.seq.frames[index];
        let cam = &self.seq.camera;

        let deformed = deform_gaussians(&self.cloud, frame.time);
        let render = rasterize(&cull_and_project(&deformed, cam), cam);
        let report = total_loss(frame, &render, &self.edges[slot], &self.cfg.loss)?;
        if !report.is_finite() {
            return Err(Error::NonFiniteLoss {
                iteration: self.iteration as usize,
                frame: index,
                diagnostics: self.diagnostics(),
            });
        }
        let splat_grads = rasterize_backward(&render.state, &report.grad_color, &report.grad_depth)?;
        let grad = cloud_backward(&self.cloud, &deformed, cam, &splat_grads);
        adam_step(
            &mut self.cloud,
            &grad,
            &mut self.adam,
            &self.cfg.adam,
            self.iteration,
            self.cfg.iterations,
        )?;
        self.density.accumulate(&grad);
        self.iteration += 1;

        let density = if self.cfg.density.due(self.iteration) {
            let (stats, sources) = density_control(&mut self.cloud, &mut self.density, &self.cfg.density)?;
            self.adam.remap(&sources, self.cloud.basis_count());
            debug!(
                "iteration {}: cloned {}, split {}, pruned {} -> {} gaussians",
                self.iteration,
                stats.cloned,
                stats.split,
                stats.pruned,
                self.cloud.len()
            );
            Some(stats)
        } else {
            None
        };

        if self.iteration.is_multiple_of(self.cfg.log_interval) {
            let row = LogRow {
                iter: self.iteration,
                color_loss: report.color_loss,
                depth_loss: report.depth_loss,
                smooth_loss: report.smooth_loss,
                total: report.total,
                num_gaussians: self.cloud.len(),
            };
            info!("{row}");
            self.log.push(row);
        }
        Ok(StepInfo {
            frame: index,
            color_loss: report.color_loss,
            depth_loss: report.depth_loss,
            smooth_loss: report.smooth_loss,
            total: report.total,
            density,
        })
    }

    /// Steps until `cfg.iterations` are complete.
    pub fn run(&mut self) -> Result<()> {
        self.run_until(self.cfg.iterations)
    }

    pub fn run_until(&mut self, iteration: u64) -> Result<()> {
        while self.iteration < iteration {
            self.step()?;
        }
        Ok(())
    }
}

/// Trains from `cloud` for the configured iterations.
pub fn train(seq: &FrameSequence, cloud: GaussianCloud, cfg: TrainConfig) -> Result<(Checkpoint, Vec<LogRow>)> {
    let mut t = Trainer::new(seq, cloud, cfg)?;
    t.run()?;
    Ok((t.checkpoint(), t.log.clone()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::{generate_synthetic, SyntheticSpec};
    use crate::init::{fuse_initial_cloud, InitConfig};

    fn scene() -> FrameSequence {
        generate_synthetic(&SyntheticSpec {
            count: 80,
            width: 24,
            height: 24,
            frames: 9,
            focal: 30.0,
            ..Default::default()
        })
        .unwrap()
        .sequence
    }

    fn quick_cfg(iterations: u64) -> TrainConfig {
        TrainConfig {
            iterations,
            log_interval: 5,
            density: DensityConfig {
                start: 10,
                stop: 30,
                interval: 10,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn log_row_format() {
        let r = LogRow {
            iter: 100,
            color_loss: 0.5,
            depth_loss: 0.25,
            smooth_loss: 2.0,
            total: 0.7502,
            num_gaussians: 42,
        };
        assert_eq!(r.to_string(), "100,0.5,0.25,2,0.7502,42");
    }

    #[test]
    fn report_decomposition_and_round_robin() {
        let seq = scene();
        let cloud = fuse_initial_cloud(&seq, &InitConfig::default()).unwrap();
        let cfg = quick_cfg(20);
        let lambda = cfg.loss.lambda_smooth;
        let mut t = Trainer::new(&seq, cloud, cfg).unwrap();
        let train = seq.train_indices();
        for k in 0..20 {
            let s = t.step().unwrap();
            assert_eq!(s.frame, train[k % train.len()]);
            assert!((s.total - (s.color_loss + s.depth_loss + lambda * s.smooth_loss)).abs() <= 1e-9);
        }
        assert_eq!(t.log().len(), 4);
    }

    #[test]
    fn resume_reproduces_trajectory() {
        let seq = scene();
        let cloud = fuse_initial_cloud(&seq, &InitConfig::default()).unwrap();
        let mut full = Trainer::new(&seq, cloud.clone(), quick_cfg(40)).unwrap();
        full.run().unwrap();

        let mut first = Trainer::new(&seq, cloud, quick_cfg(40)).unwrap();
        first.run_until(15).unwrap();
        let bytes = checkpoint::encode(&first.checkpoint());
        let ck = checkpoint::decode(&bytes).unwrap();
        let mut second = Trainer::from_checkpoint(&seq, ck, quick_cfg(40)).unwrap();
        second.run().unwrap();
        assert_eq!(
            checkpoint::encode(&second.checkpoint()),
            checkpoint::encode(&full.checkpoint())
        );
        assert_eq!(second.log(), &full.log()[3..]);
    }

    #[test]
    fn empty_training_split_is_rejected() {
        let mut seq = scene();
        seq.split.iter_mut().for_each(|s| *s = crate::ingest::Split::Test);
        let cloud = fuse_initial_cloud(&scene(), &InitConfig::default()).unwrap();
        assert!(Trainer::new(&seq, cloud, quick_cfg(1)).is_err());
    }

    #[test]
    fn non_finite_loss_aborts_with_frame() {
        let seq = scene();
        let mut cloud = fuse_initial_cloud(&seq, &InitConfig::default()).unwrap();
        for g in cloud.gaussians_mut() {
            g.color.x = f64::NAN;
        }
        match Trainer::new(&seq, cloud, quick_cfg(1)).unwrap().step() {
            Err(Error::NonFiniteLoss {
                iteration,
                frame,
                diagnostics,
            }) => {
                assert_eq!((iteration, frame), (0, 0));
                assert!(diagnostics.contains("gaussians"));
            }
            other => panic!("expected non-finite loss, got {other:?}"),
        }
    }
}
