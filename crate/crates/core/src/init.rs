//! Dense initialization from depth priors.
//!
//! Frame 0 contributes every valid tissue pixel. Every later training frame
//! contributes only the pixels of its motion mask: pixels whose depth moved by
//! more than `τ` relative to frame 0, or tissue hidden by a tool in frame 0 and
//! visible now. All contributions are subsampled on a `stride × stride` grid.

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::deform::DEFAULT_BASIS_COUNT;
use crate::error::{Error, Result};
use crate::gaussian::{logit, CameraModel, Gaussian, GaussianCloud};
use crate::grid::{BinaryMask, Grid};
use crate::ingest::{Frame, FrameSequence};

pub const INITIAL_OPACITY: f64 = 0.1;
/// Relative default for `τ`: fraction of frame 0's valid depth range.
pub const DEFAULT_TAU_FRACTION: f64 = 0.03;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InitConfig {
    /// Depth-change threshold in scene units; `None` uses 3% of frame 0's
    /// valid depth range.
    pub tau: Option<f64>,
    pub stride: usize,
    pub basis_count: usize,
    /// Fuse motion-masked points from later frames. Off means frame 0 only.
    pub fuse_frames: bool,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            tau: None,
            stride: 4,
            basis_count: DEFAULT_BASIS_COUNT,
            fuse_frames: true,
        }
    }
}

impl InitConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(t) = self.tau {
            if !(t > 0.0) {
                return Err(Error::InvalidInput("tau must be positive".into()));
            }
        }
        if self.stride == 0 {
            return Err(Error::InvalidInput("stride must be >= 1".into()));
        }
        if self.basis_count == 0 {
            return Err(Error::InvalidInput("basis_count must be >= 1".into()));
        }
        Ok(())
    }

    pub fn resolve_tau(&self, frame0: &Frame) -> f64 {
        self.tau.unwrap_or_else(|| {
            let valid = frame0.valid_mask();
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for (&d, &m) in frame0.depth.as_slice().iter().zip(valid.as_slice()) {
                if m {
                    lo = lo.min(d);
                    hi = hi.max(d);
                }
            }
            let range = if hi > lo { hi - lo } else { 0.0 };
            // a flat frame still needs a positive threshold
            (DEFAULT_TAU_FRACTION * range).max(f64::EPSILON)
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MotionMask {
    pub mask: BinaryMask,
    pub frame_index: usize,
}

/// A point with the colour of the pixel it came from.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ColoredPoint {
    pub position: Vector3<f64>,
    pub color: [f64; 3],
}

/// World points for every set pixel of `pixel_mask`.
pub fn unproject_frame(frame: &Frame, cam: &CameraModel, pixel_mask: &BinaryMask) -> Vec<ColoredPoint> {
    let mut out = Vec::new();
    for v in 0..pixel_mask.height() {
        for u in 0..pixel_mask.width() {
            if !*pixel_mask.get(u, v) {
                continue;
            }
            let d = *frame.depth.get(u, v);
            if !(d > 0.0) {
                continue;
            }
            let pc = cam.unproject_pixel(u, v, d);
            out.push(ColoredPoint {
                position: cam.camera_to_world_point(&pc),
                color: *frame.image.get(u, v),
            });
        }
    }
    out
}

/// Motion mask of `frame_i` relative to `frame0`:
/// `(|D0 - Di| > τ  ∨  (¬M0 ∧ Mi)) ∧ Mi ∧ valid(Di)`, with the depth term
/// only where both depths are valid.
pub fn compute_motion_mask(frame0: &Frame, frame_i: &Frame, tau: f64, frame_index: usize) -> Result<MotionMask> {
    if !frame0.image.same_shape(&frame_i.image) {
        return Err(Error::InvalidInput("motion mask frames differ in size".into()));
    }
    let n = frame0.depth.len();
    let (d0, di) = (frame0.depth.as_slice(), frame_i.depth.as_slice());
    let (m0, mi) = (frame0.tissue_mask.as_slice(), frame_i.tissue_mask.as_slice());
    let data = (0..n)
        .map(|k| {
            let valid_i = di[k] > 0.0;
            let moved = d0[k] > 0.0 && valid_i && (d0[k] - di[k]).abs() > tau;
            let disoccluded = !m0[k] && mi[k];
            (moved || disoccluded) && mi[k] && valid_i
        })
        .collect();
    Ok(MotionMask {
        mask: Grid::from_vec(frame0.width(), frame0.height(), data)?,
        frame_index,
    })
}

/// Keeps only pixels on the `stride` grid.
pub fn subsample(mask: &BinaryMask, stride: usize) -> BinaryMask {
    Grid::from_fn(mask.width(), mask.height(), |x, y| {
        x % stride == 0 && y % stride == 0 && *mask.get(x, y)
    })
}

/// Fused points before they become Gaussians.
#[derive(Clone, Debug)]
pub struct FusedPoints {
    pub points: Vec<ColoredPoint>,
    /// Points contributed by each frame (0 for frames not used).
    pub per_frame: Vec<usize>,
    /// Motion masks of the fused frames after frame 0.
    pub motion_masks: Vec<MotionMask>,
    pub tau: f64,
}

/// Unprojects frame 0 and the motion-masked pixels of later training frames,
/// concatenated in frame order.
pub fn fuse_initial_points(seq: &FrameSequence, cfg: &InitConfig) -> Result<FusedPoints> {
    cfg.validate()?;
    let frame0 = seq
        .frames
        .first()
        .ok_or_else(|| Error::InvalidInput("sequence has no frames".into()))?;
    let tau = cfg.resolve_tau(frame0);
    let cam = &seq.camera;

    let later: Vec<usize> = if cfg.fuse_frames {
        seq.train_indices().into_iter().filter(|&i| i > 0).collect()
    } else {
        Vec::new()
    };

    let base = unproject_frame(frame0, cam, &subsample(&frame0.valid_mask(), cfg.stride));
    let contributions: Vec<(MotionMask, Vec<ColoredPoint>)> = later
        .par_iter()
        .map(|&i| {
            let mm = compute_motion_mask(frame0, &seq.frames[i], tau, i)?;
            let pts = unproject_frame(&seq.frames[i], cam, &subsample(&mm.mask, cfg.stride));
            Ok((mm, pts))
        })
        .collect::<Result<_>>()?;

    let mut per_frame = vec![0; seq.len()];
    per_frame[0] = base.len();
    let mut points = base;
    let mut motion_masks = Vec::with_capacity(contributions.len());
    for (mm, pts) in contributions {
        per_frame[mm.frame_index] = pts.len();
        points.extend(pts);
        motion_masks.push(mm);
    }
    Ok(FusedPoints {
        points,
        per_frame,
        motion_masks,
        tau,
    })
}

/// Turns points into isotropic Gaussians sized by the mean distance to their
/// three nearest neighbours.
pub fn points_to_cloud(points: &[ColoredPoint], basis_count: usize) -> Result<GaussianCloud> {
    if points.is_empty() {
        return Err(Error::EmptyInitialization);
    }
    let positions: Vec<Vector3<f64>> = points.iter().map(|p| p.position).collect();
    let spacing = mean_neighbor_distance(&positions, 3);
    let opacity_logit = logit(INITIAL_OPACITY);
    let mut cloud = GaussianCloud::new(basis_count);
    for (p, s) in points.iter().zip(spacing) {
        cloud.push(Gaussian {
            position: p.position,
            rotation: nalgebra::Vector4::new(1.0, 0.0, 0.0, 0.0),
            log_scale: Vector3::repeat(s.max(1e-7).ln()),
            opacity_logit,
            color: Vector3::from(p.color),
        });
    }
    Ok(cloud)
}

pub fn fuse_initial_cloud(seq: &FrameSequence, cfg: &InitConfig) -> Result<GaussianCloud> {
    let fused = fuse_initial_points(seq, cfg)?;
    points_to_cloud(&fused.points, cfg.basis_count)
}

/// Mean distance from each point to its `k` nearest other points, using a
/// uniform hash grid. Points with no neighbours get the cloud's median spacing
/// (or 1 for a single point).
pub fn mean_neighbor_distance(points: &[Vector3<f64>], k: usize) -> Vec<f64> {
    let n = points.len();
    if n <= 1 {
        return vec![1.0; n];
    }
    let k = k.min(n - 1);
    let (mut lo, mut hi) = (points[0], points[0]);
    for p in points {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    let extent = hi - lo;
    let volume_side = extent.iter().copied().fold(0.0, f64::max);
    // roughly a few points per cell for surface-like clouds
    let cell = if volume_side > 0.0 {
        (volume_side / (n as f64).sqrt()).max(volume_side * 1e-6)
    } else {
        1.0
    };
    let key = |p: &Vector3<f64>| -> [i64; 3] {
        [
            ((p.x - lo.x) / cell).floor() as i64,
            ((p.y - lo.y) / cell).floor() as i64,
            ((p.z - lo.z) / cell).floor() as i64,
        ]
    };
    let mut cells: std::collections::HashMap<[i64; 3], Vec<usize>> = Default::default();
    for (i, p) in points.iter().enumerate() {
        cells.entry(key(p)).or_default().push(i);
    }
    let dims: [i64; 3] = [
        (extent.x / cell).floor() as i64 + 1,
        (extent.y / cell).floor() as i64 + 1,
        (extent.z / cell).floor() as i64 + 1,
    ];
    let max_ring = dims.iter().copied().max().unwrap();

    points
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let c = key(p);
            let mut best: Vec<f64> = Vec::with_capacity(k + 1);
            let mut ring = 0i64;
            loop {
                for dx in -ring..=ring {
                    for dy in -ring..=ring {
                        for dz in -ring..=ring {
                            if dx.abs().max(dy.abs()).max(dz.abs()) != ring {
                                continue;
                            }
                            let Some(list) = cells.get(&[c[0] + dx, c[1] + dy, c[2] + dz]) else {
                                continue;
                            };
                            for &j in list {
                                if j == i {
                                    continue;
                                }
                                let d = (points[j] - p).norm();
                                if best.len() < k || d < best[k - 1] {
                                    let pos = best.partition_point(|&b| b <= d);
                                    best.insert(pos, d);
                                    best.truncate(k);
                                }
                            }
                        }
                    }
                }
                // everything outside this ring is at least `ring * cell` away
                if (best.len() == k && best[k - 1] <= ring as f64 * cell) || ring > max_ring {
                    break;
                }
                ring += 1;
            }
            best.iter().sum::<f64>() / best.len() as f64
        })
        .collect()
}
