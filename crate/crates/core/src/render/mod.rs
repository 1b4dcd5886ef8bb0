//! Differentiable splatting: projection to screen-space primitives, tiled
//! front-to-back compositing of colour and depth, and the analytic backward
//! pass of the compositing.

mod raster;

pub use raster::{
    rasterize, rasterize_backward, reference_render, CompositingState, SplatGrad, ALPHA_MAX, ALPHA_MIN, TILE_SIZE,
    TRANSMITTANCE_MIN,
};

use nalgebra::{Matrix2, Vector2, Vector3};

use crate::deform::{deform_gaussians, DeformedAttributes};
use crate::gaussian::{covariance_unchecked, project_covariance_camera, CameraModel, GaussianCloud};
use crate::grid::{BinaryMask, DepthMap, Grid, RgbImage};

/// One Gaussian after projection to the image plane.
#[derive(Clone, Debug, PartialEq)]
pub struct SplatPrimitive {
    /// Continuous pixel coordinates of the projected centre.
    pub mean2d: Vector2<f64>,
    /// Screen-space covariance including the low-pass floor.
    pub cov2d: Matrix2<f64>,
    /// Camera-space z of the centre.
    pub depth_z: f64,
    pub opacity: f64,
    pub color: Vector3<f64>,
    pub source_index: usize,
}

/// Rendered colour, depth and coverage plus the state needed by
/// [`rasterize_backward`].
#[derive(Clone, Debug)]
pub struct RenderOutput {
    pub color: RgbImage,
    pub depth: DepthMap,
    /// Accumulated opacity `1 - T_final`.
    pub alpha: Grid<f64>,
    pub state: CompositingState,
}

impl RenderOutput {
    /// Pixels that received at least one contribution.
    pub fn covered(&self) -> BinaryMask {
        self.alpha.map(|&a| a > 0.0)
    }
}

/// Projects deformed Gaussians, culls those outside the clip range or whose
/// 3σ footprint misses the image, and sorts the rest by depth (ties by index).
pub fn cull_and_project(deformed: &DeformedAttributes, cam: &CameraModel) -> Vec<SplatPrimitive> {
    let (w, h) = (cam.width as f64, cam.height as f64);
    let mut prims: Vec<SplatPrimitive> = (0..deformed.len())
        .filter_map(|i| {
            let pc = cam.world_to_camera_point(&deformed.positions[i]);
            if !(pc.z > cam.near && pc.z < cam.far) {
                return None;
            }
            let cov = covariance_unchecked(&deformed.rotations[i], &deformed.scales[i]);
            let cov2d = project_covariance_camera(&cov, cam, &pc);
            let mean2d = cam.project_camera_point(&pc);
            let radius = 3.0 * max_eigenvalue(&cov2d).sqrt();
            if !radius.is_finite() || !mean2d.iter().all(|v| v.is_finite()) {
                return None;
            }
            if mean2d.x + radius < 0.0 || mean2d.x - radius > w || mean2d.y + radius < 0.0 || mean2d.y - radius > h {
                return None;
            }
            Some(SplatPrimitive {
                mean2d,
                cov2d,
                depth_z: pc.z,
                opacity: deformed.opacities[i],
                color: deformed.colors[i],
                source_index: i,
            })
        })
        .collect();
    sort_primitives(&mut prims);
    prims
}

/// Deform, project and rasterize the cloud at time `t`.
pub fn render_cloud(cloud: &GaussianCloud, cam: &CameraModel, t: f64) -> RenderOutput {
    let deformed = deform_gaussians(cloud, t);
    rasterize(&cull_and_project(&deformed, cam), cam)
}

/// Ascending depth, ties broken by source index.
pub fn sort_primitives(prims: &mut [SplatPrimitive]) {
    prims.sort_by(|a, b| {
        a.depth_z
            .total_cmp(&b.depth_z)
            .then(a.source_index.cmp(&b.source_index))
    });
}

#[inline]
pub(crate) fn max_eigenvalue(m: &Matrix2<f64>) -> f64 {
    let mid = 0.5 * (m[(0, 0)] + m[(1, 1)]);
    let det = m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)];
    mid + (mid * mid - det).max(0.0).sqrt()
}
