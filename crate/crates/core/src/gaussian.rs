//! Scene primitives, the pinhole camera, and closed-form Gaussian math.
//!
//! Conventions used everywhere in the crate:
//! - quaternions are stored `(w, x, y, z)`;
//! - extrinsics map world to camera coordinates, camera looks down `+z`;
//! - pixel `(u, v)` has its centre at `(u + 0.5, v + 0.5)`.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Matrix4, Vector2, Vector3, Vector4};

use crate::deform::DeformParams;
use crate::error::{Error, Result};

/// Screen-space variance added to every projected covariance (pixels²).
pub const COV2D_FLOOR: f64 = 0.3;

/// Largest condition number accepted by [`evaluate_gaussian`].
pub const MAX_CONDITION: f64 = 1e12;

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// One explicit scene primitive in its canonical (undeformed) state.
#[derive(Clone, Debug, PartialEq)]
pub struct Gaussian {
    pub position: Vector3<f64>,
    /// Unit quaternion `(w, x, y, z)`.
    pub rotation: Vector4<f64>,
    /// Log of the per-axis standard deviation.
    pub log_scale: Vector3<f64>,
    pub opacity_logit: f64,
    /// Degree-0 colour, RGB in `[0, 1]`.
    pub color: Vector3<f64>,
}

impl Gaussian {
    pub fn new(position: Vector3<f64>, scale: f64, opacity: f64, color: Vector3<f64>) -> Self {
        Self {
            position,
            rotation: Vector4::new(1.0, 0.0, 0.0, 0.0),
            log_scale: Vector3::repeat(scale.ln()),
            opacity_logit: logit(opacity),
            color,
        }
    }

    #[inline]
    pub fn scale(&self) -> Vector3<f64> {
        self.log_scale.map(f64::exp)
    }

    #[inline]
    pub fn opacity(&self) -> f64 {
        sigmoid(self.opacity_logit)
    }

    pub fn is_finite(&self) -> bool {
        self.position.iter().all(|v| v.is_finite())
            && self.rotation.iter().all(|v| v.is_finite())
            && self.log_scale.iter().all(|v| v.is_finite())
            && self.opacity_logit.is_finite()
            && self.color.iter().all(|v| v.is_finite())
    }
}

/// The explicit scene: Gaussians plus one deformation record per Gaussian.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianCloud {
    gaussians: Vec<Gaussian>,
    deform_params: Vec<DeformParams>,
    basis_count: usize,
}

impl GaussianCloud {
    pub fn new(basis_count: usize) -> Self {
        Self {
            gaussians: Vec::new(),
            deform_params: Vec::new(),
            basis_count,
        }
    }

    pub fn from_parts(gaussians: Vec<Gaussian>, deform_params: Vec<DeformParams>, basis_count: usize) -> Result<Self> {
        if gaussians.len() != deform_params.len() {
            return Err(Error::InvalidInput(format!(
                "{} gaussians but {} deformation records",
                gaussians.len(),
                deform_params.len()
            )));
        }
        if let Some(p) = deform_params.iter().find(|p| p.basis_count() != basis_count) {
            return Err(Error::InvalidInput(format!(
                "deformation record has {} basis functions, cloud expects {basis_count}",
                p.basis_count()
            )));
        }
        Ok(Self {
            gaussians,
            deform_params,
            basis_count,
        })
    }

    /// Appends a Gaussian with the identity deformation.
    pub fn push(&mut self, gaussian: Gaussian) {
        self.gaussians.push(gaussian);
        self.deform_params.push(DeformParams::identity(self.basis_count));
    }

    pub fn push_with(&mut self, gaussian: Gaussian, deform: DeformParams) {
        assert_eq!(deform.basis_count(), self.basis_count);
        self.gaussians.push(gaussian);
        self.deform_params.push(deform);
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    #[inline]
    pub fn basis_count(&self) -> usize {
        self.basis_count
    }

    pub fn gaussians(&self) -> &[Gaussian] {
        &self.gaussians
    }

    pub fn gaussians_mut(&mut self) -> &mut [Gaussian] {
        &mut self.gaussians
    }

    pub fn deform_params(&self) -> &[DeformParams] {
        &self.deform_params
    }

    pub fn deform_params_mut(&mut self) -> &mut [DeformParams] {
        &mut self.deform_params
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Gaussian, &DeformParams)> {
        self.gaussians.iter().zip(self.deform_params.iter())
    }

    /// Keeps the Gaussians for which `keep` returns true, preserving order.
    pub fn retain_indices(&mut self, keep: &[bool]) {
        assert_eq!(keep.len(), self.len());
        let mut k = keep.iter();
        self.gaussians.retain(|_| *k.next().unwrap());
        let mut k = keep.iter();
        self.deform_params.retain(|_| *k.next().unwrap());
    }

    pub fn extend(&mut self, other: GaussianCloud) {
        assert_eq!(other.basis_count, self.basis_count);
        self.gaussians.extend(other.gaussians);
        self.deform_params.extend(other.deform_params);
    }
}

/// Symmetric 3×3 covariance in scene units².
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Covariance3(pub Matrix3<f64>);

impl Covariance3 {
    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }
}

/// Pinhole camera with world-to-camera extrinsics.
#[derive(Clone, Debug, PartialEq)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub near: f64,
    pub far: f64,
    pub world_to_camera: Matrix4<f64>,
}

impl CameraModel {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
        near: f64,
        far: f64,
        world_to_camera: Matrix4<f64>,
    ) -> Result<Self> {
        let cam = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            near,
            far,
            world_to_camera,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Camera at the origin looking down `+z` with the principal point at the
    /// image centre.
    pub fn centered(focal: f64, width: usize, height: usize, near: f64, far: f64) -> Result<Self> {
        Self::new(
            focal,
            focal,
            width as f64 / 2.0,
            height as f64 / 2.0,
            width,
            height,
            near,
            far,
            Matrix4::identity(),
        )
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidCamera(m.to_string()));
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return bad("focal lengths must be positive");
        }
        if self.width == 0 || self.height == 0 {
            return bad("image size must be nonzero");
        }
        if !(self.cx >= 0.0 && self.cx < self.width as f64) {
            return bad("cx outside image");
        }
        if !(self.cy >= 0.0 && self.cy < self.height as f64) {
            return bad("cy outside image");
        }
        if !(self.near > 0.0 && self.near < self.far) {
            return bad("clip range must satisfy 0 < near < far");
        }
        if self.world_to_camera.iter().any(|v| !v.is_finite()) {
            return bad("extrinsics contain non-finite values");
        }
        let r = self.rotation();
        let err = (r.transpose() * r - Matrix3::identity()).abs().max();
        if err > 1e-6 {
            return Err(Error::InvalidCamera(format!(
                "extrinsic rotation is not orthonormal (error {err:.3e})"
            )));
        }
        let last = self.world_to_camera.row(3);
        if last[0] != 0.0 || last[1] != 0.0 || last[2] != 0.0 || last[3] != 1.0 {
            return bad("extrinsics last row must be (0, 0, 0, 1)");
        }
        Ok(())
    }

    pub fn intrinsics(&self) -> Matrix3<f64> {
        Matrix3::new(
            self.fx, 0.0, self.cx, //
            0.0, self.fy, self.cy, //
            0.0, 0.0, 1.0,
        )
    }

    /// Rotation block `W` of the world-to-camera transform.
    pub fn rotation(&self) -> Matrix3<f64> {
        self.world_to_camera.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.world_to_camera.fixed_view::<3, 1>(0, 3).into_owned()
    }

    #[inline]
    pub fn world_to_camera_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation() * p + self.translation()
    }

    #[inline]
    pub fn camera_to_world_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation().transpose() * (p - self.translation())
    }

    /// Continuous pixel coordinates of a camera-space point.
    #[inline]
    pub fn project_camera_point(&self, pc: &Vector3<f64>) -> Vector2<f64> {
        Vector2::new(self.fx * pc.x / pc.z + self.cx, self.fy * pc.y / pc.z + self.cy)
    }

    /// Camera-space point at depth `depth` through the centre of pixel `(u, v)`.
    #[inline]
    pub fn unproject_pixel(&self, u: usize, v: usize, depth: f64) -> Vector3<f64> {
        let x = (u as f64 + 0.5 - self.cx) / self.fx;
        let y = (v as f64 + 0.5 - self.cy) / self.fy;
        Vector3::new(x * depth, y * depth, depth)
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    /// Same camera at a different resolution, scaling the intrinsics.
    pub fn resized(&self, width: usize, height: usize) -> Result<Self> {
        let sx = width as f64 / self.width as f64;
        let sy = height as f64 / self.height as f64;
        Self::new(
            self.fx * sx,
            self.fy * sy,
            self.cx * sx,
            self.cy * sy,
            width,
            height,
            self.near,
            self.far,
            self.world_to_camera,
        )
    }
}

/// Rotation matrix of a unit quaternion `(w, x, y, z)`.
pub fn quat_to_rotation(q: &Vector4<f64>) -> Matrix3<f64> {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Pulls `dL/dR` back to the quaternion components that produced `R`.
pub fn quat_to_rotation_backward(q: &Vector4<f64>, d_r: &Matrix3<f64>) -> Vector4<f64> {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    let dw = Matrix3::new(
        0.0,
        -2.0 * z,
        2.0 * y, //
        2.0 * z,
        0.0,
        -2.0 * x, //
        -2.0 * y,
        2.0 * x,
        0.0,
    );
    let dx = Matrix3::new(
        0.0,
        2.0 * y,
        2.0 * z, //
        2.0 * y,
        -4.0 * x,
        -2.0 * w, //
        2.0 * z,
        2.0 * w,
        -4.0 * x,
    );
    let dy = Matrix3::new(
        -4.0 * y,
        2.0 * x,
        2.0 * w, //
        2.0 * x,
        0.0,
        2.0 * z, //
        -2.0 * w,
        2.0 * z,
        -4.0 * y,
    );
    let dz = Matrix3::new(
        -4.0 * z,
        -2.0 * w,
        2.0 * x, //
        2.0 * w,
        -4.0 * z,
        2.0 * y, //
        2.0 * x,
        2.0 * y,
        0.0,
    );
    Vector4::new(
        d_r.component_mul(&dw).sum(),
        d_r.component_mul(&dx).sum(),
        d_r.component_mul(&dy).sum(),
        d_r.component_mul(&dz).sum(),
    )
}

/// Gradient of `q / |q|` pulled back to the raw quaternion `q`.
pub fn normalize_backward(raw: &Vector4<f64>, d_unit: &Vector4<f64>) -> Vector4<f64> {
    let n = raw.norm();
    let u = raw / n;
    (d_unit - u * u.dot(d_unit)) / n
}

/// `R S Sᵀ Rᵀ` for a unit quaternion and per-axis standard deviations.
pub fn build_covariance(rotation: &Vector4<f64>, scale: &Vector3<f64>) -> Result<Covariance3> {
    if rotation.iter().chain(scale.iter()).any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite rotation or scale".into()));
    }
    if (rotation.norm() - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidInput(format!(
            "rotation quaternion has norm {}",
            rotation.norm()
        )));
    }
    if scale.iter().any(|&s| s <= 0.0) {
        return Err(Error::InvalidInput("scale components must be positive".into()));
    }
    Ok(Covariance3(covariance_unchecked(rotation, scale)))
}

#[inline]
pub(crate) fn covariance_unchecked(rotation: &Vector4<f64>, scale: &Vector3<f64>) -> Matrix3<f64> {
    let m = quat_to_rotation(rotation) * Matrix3::from_diagonal(scale);
    m * m.transpose()
}

/// Pulls a (full, symmetric) `dL/dΣ` back to the unit quaternion and scale.
pub fn build_covariance_backward(
    rotation: &Vector4<f64>,
    scale: &Vector3<f64>,
    d_cov: &Matrix3<f64>,
) -> (Vector4<f64>, Vector3<f64>) {
    let r = quat_to_rotation(rotation);
    let m = r * Matrix3::from_diagonal(scale);
    let sym = d_cov + d_cov.transpose();
    let d_m = sym * m;
    let mut d_r = Matrix3::zeros();
    let mut d_s = Vector3::zeros();
    for j in 0..3 {
        for i in 0..3 {
            d_r[(i, j)] = d_m[(i, j)] * scale[j];
            d_s[j] += d_m[(i, j)] * r[(i, j)];
        }
    }
    (quat_to_rotation_backward(rotation, &d_r), d_s)
}

/// `exp(-½ (x-µ)ᵀ Σ⁻¹ (x-µ))`.
pub fn evaluate_gaussian(center: &Vector3<f64>, cov: &Covariance3, x: &Vector3<f64>) -> Result<f64> {
    let eig = cov.0.symmetric_eigenvalues();
    let max = eig.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
    let min = eig.iter().fold(f64::INFINITY, |a, &v| a.min(v));
    let condition = if min > 0.0 { max / min } else { f64::INFINITY };
    if !(condition < MAX_CONDITION) {
        return Err(Error::DegenerateCovariance { condition });
    }
    let inv = cov.0.try_inverse().ok_or(Error::DegenerateCovariance { condition })?;
    let d = x - center;
    Ok((-0.5 * d.dot(&(inv * d))).exp())
}

/// Jacobian of the pinhole projection at camera-space point `pc`.
#[inline]
pub fn projection_jacobian(cam: &CameraModel, pc: &Vector3<f64>) -> Matrix2x3<f64> {
    let iz = 1.0 / pc.z;
    let iz2 = iz * iz;
    Matrix2x3::new(
        cam.fx * iz,
        0.0,
        -cam.fx * pc.x * iz2,
        0.0,
        cam.fy * iz,
        -cam.fy * pc.y * iz2,
    )
}

/// Screen-space covariance `J W Σ Wᵀ Jᵀ + 0.3·I` of a Gaussian at world
/// `position`. Returns `None` when the point is not in front of the near plane.
pub fn project_covariance(cov: &Covariance3, cam: &CameraModel, position: &Vector3<f64>) -> Option<Matrix2<f64>> {
    let pc = cam.world_to_camera_point(position);
    if !(pc.z > cam.near) {
        return None;
    }
    Some(project_covariance_camera(&cov.0, cam, &pc))
}

#[inline]
pub(crate) fn project_covariance_camera(cov: &Matrix3<f64>, cam: &CameraModel, pc: &Vector3<f64>) -> Matrix2<f64> {
    let a = projection_jacobian(cam, pc) * cam.rotation();
    let mut c = a * cov * a.transpose();
    c[(0, 0)] += COV2D_FLOOR;
    c[(1, 1)] += COV2D_FLOOR;
    // exact symmetry
    let off = 0.5 * (c[(0, 1)] + c[(1, 0)]);
    c[(0, 1)] = off;
    c[(1, 0)] = off;
    c
}

/// Upstream gradients of one projected splat.
#[derive(Clone, Copy, Debug, Default)]
pub struct ProjectionGrad {
    pub mean2d: Vector2<f64>,
    /// Gradient w.r.t. the symmetric 2×2 covariance as a full matrix.
    pub cov2d: Matrix2<f64>,
    pub depth: f64,
}

/// Pulls splat gradients back to the world position and world covariance.
pub fn project_backward(
    cov: &Matrix3<f64>,
    cam: &CameraModel,
    position: &Vector3<f64>,
    grad: &ProjectionGrad,
) -> (Vector3<f64>, Matrix3<f64>) {
    let w = cam.rotation();
    let pc = cam.world_to_camera_point(position);
    let j = projection_jacobian(cam, &pc);
    let a = j * w;
    let g = grad.cov2d;
    let sym = g + g.transpose();
    let d_cov = a.transpose() * (0.5 * sym) * a;
    // cov2d = J (W Σ Wᵀ) Jᵀ
    let cov_cam = w * cov * w.transpose();
    let d_j = sym * j * cov_cam;

    let (x, y, z) = (pc.x, pc.y, pc.z);
    let iz = 1.0 / z;
    let iz2 = iz * iz;
    let iz3 = iz2 * iz;
    let (fx, fy) = (cam.fx, cam.fy);

    let mut d_pc = Vector3::zeros();
    // mean2d
    d_pc.x += grad.mean2d.x * fx * iz;
    d_pc.y += grad.mean2d.y * fy * iz;
    d_pc.z += -grad.mean2d.x * fx * x * iz2 - grad.mean2d.y * fy * y * iz2;
    // depth
    d_pc.z += grad.depth;
    // Jacobian entries
    d_pc.x += d_j[(0, 2)] * (-fx * iz2);
    d_pc.y += d_j[(1, 2)] * (-fy * iz2);
    d_pc.z += d_j[(0, 0)] * (-fx * iz2)
        + d_j[(0, 2)] * (2.0 * fx * x * iz3)
        + d_j[(1, 1)] * (-fy * iz2)
        + d_j[(1, 2)] * (2.0 * fy * y * iz3);

    (w.transpose() * d_pc, d_cov)
}
