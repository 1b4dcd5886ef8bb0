//! Chain rule from per-splat gradients to the cloud's parameters.

use nalgebra::{Vector3, Vector4};

use crate::deform::{deform_backward, DeformGrad, DeformedAttributes};
use crate::gaussian::{
    build_covariance_backward, covariance_unchecked, normalize_backward, project_backward, CameraModel, GaussianCloud,
    ProjectionGrad,
};
use crate::render::SplatGrad;

/// Gradient of a scalar loss w.r.t. every canonical and deformation
/// parameter, aligned with the cloud.
#[derive(Clone, Debug, PartialEq)]
pub struct CloudGrad {
    pub position: Vec<Vector3<f64>>,
    /// W.r.t. the raw (unnormalized) quaternion.
    pub rotation: Vec<Vector4<f64>>,
    pub log_scale: Vec<Vector3<f64>>,
    pub opacity_logit: Vec<f64>,
    pub color: Vec<Vector3<f64>>,
    pub deform: Vec<DeformGrad>,
    /// Norm of the screen-space mean gradient in normalized device units,
    /// `None` for Gaussians that were culled.
    pub mean2d_norm: Vec<Option<f64>>,
}

impl CloudGrad {
    pub fn zeros(cloud: &GaussianCloud) -> Self {
        let n = cloud.len();
        let k = crate::deform::DEFORMED_COORDS * cloud.basis_count();
        Self {
            position: vec![Vector3::zeros(); n],
            rotation: vec![Vector4::zeros(); n],
            log_scale: vec![Vector3::zeros(); n],
            opacity_logit: vec![0.0; n],
            color: vec![Vector3::zeros(); n],
            deform: vec![
                DeformGrad {
                    weights: vec![0.0; k],
                    centers: vec![0.0; k],
                    widths: vec![0.0; k],
                };
                n
            ],
            mean2d_norm: vec![None; n],
        }
    }

    pub fn is_finite(&self) -> bool {
        let v3 = |v: &[Vector3<f64>]| v.iter().all(|x| x.iter().all(|c| c.is_finite()));
        v3(&self.position)
            && v3(&self.log_scale)
            && v3(&self.color)
            && self.rotation.iter().all(|x| x.iter().all(|c| c.is_finite()))
            && self.opacity_logit.iter().all(|x| x.is_finite())
            && self.deform.iter().all(|d| {
                d.weights
                    .iter()
                    .chain(&d.centers)
                    .chain(&d.widths)
                    .all(|x| x.is_finite())
            })
    }
}

/// Pulls rasterizer gradients back through projection, covariance
/// construction, quaternion normalization, the activations and the
/// deformation field.
pub fn cloud_backward(
    cloud: &GaussianCloud,
    deformed: &DeformedAttributes,
    cam: &CameraModel,
    splat_grads: &[SplatGrad],
) -> CloudGrad {
    let mut out = CloudGrad::zeros(cloud);
    // pixel to NDC: du/dx_ndc = W/2
    let (sx, sy) = (0.5 * cam.width as f64, 0.5 * cam.height as f64);
    for sg in splat_grads {
        let i = sg.source_index;
        let o = deformed.opacities[i];
        out.color[i] += sg.color;
        out.opacity_logit[i] += sg.opacity * o * (1.0 - o);

        let cov = covariance_unchecked(&deformed.rotations[i], &deformed.scales[i]);
        let (d_pos, d_cov) = project_backward(
            &cov,
            cam,
            &deformed.positions[i],
            &ProjectionGrad {
                mean2d: sg.mean2d,
                cov2d: sg.cov2d_matrix(),
                depth: sg.depth_z,
            },
        );
        let (d_unit, d_scale) = build_covariance_backward(&deformed.rotations[i], &deformed.scales[i], &d_cov);
        let d_raw = normalize_backward(&deformed.raw_rotations[i], &d_unit);
        let d_log_scale = d_scale.component_mul(&deformed.scales[i]);

        out.position[i] += d_pos;
        out.rotation[i] += d_raw;
        out.log_scale[i] += d_log_scale;
        out.mean2d_norm[i] = Some((sg.mean2d.x * sx).hypot(sg.mean2d.y * sy));

        let params = &cloud.deform_params()[i];
        if !params.weights.is_empty() {
            let mut coords = [0.0; crate::deform::DEFORMED_COORDS];
            coords[..3].copy_from_slice(d_pos.as_slice());
            coords[3..7].copy_from_slice(d_raw.as_slice());
            coords[7..].copy_from_slice(d_log_scale.as_slice());
            out.deform[i] = deform_backward(params, deformed.time, &coords);
        }
    }
    out
}
