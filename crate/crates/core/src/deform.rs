//! Per-Gaussian motion curves built from Gaussian radial basis functions of time.
//!
//! Ten canonical coordinates are deformed independently: position `(x, y, z)`,
//! raw quaternion `(w, x, y, z)` and log-scale `(x, y, z)`. Each coordinate `c`
//! receives the offset `ψ_c(t) = Σ_j ω_cj · exp(-(t - θ_cj)² / (2 σ_cj²))`.
//! Opacity and colour are not time-varying.

use nalgebra::{Vector3, Vector4};
use rayon::prelude::*;

use crate::gaussian::GaussianCloud;

/// Number of deformed coordinates per Gaussian.
pub const DEFORMED_COORDS: usize = 10;
/// Lower bound applied to every basis width after an optimizer step.
pub const MIN_WIDTH: f64 = 1e-4;
pub const DEFAULT_BASIS_COUNT: usize = 8;

/// Index of the first position, rotation and log-scale coordinate.
pub const POSITION: usize = 0;
pub const ROTATION: usize = 3;
pub const SCALE: usize = 7;

/// Basis weights, centres and widths for the ten deformed coordinates, stored
/// coordinate-major (`[c * B + j]`).
#[derive(Clone, Debug, PartialEq)]
pub struct DeformParams {
    basis_count: usize,
    pub weights: Vec<f64>,
    pub centers: Vec<f64>,
    pub widths: Vec<f64>,
}

impl DeformParams {
    /// Zero weights, centres evenly spaced over `[0, 1]`, widths `1 / B`.
    pub fn identity(basis_count: usize) -> Self {
        assert!(basis_count > 0, "basis count must be positive");
        let n = DEFORMED_COORDS * basis_count;
        let centers = (0..n)
            .map(|i| {
                let j = i % basis_count;
                if basis_count == 1 {
                    0.5
                } else {
                    j as f64 / (basis_count - 1) as f64
                }
            })
            .collect();
        Self {
            basis_count,
            weights: vec![0.0; n],
            centers,
            widths: vec![1.0 / basis_count as f64; n],
        }
    }

    #[inline]
    pub fn basis_count(&self) -> usize {
        self.basis_count
    }

    #[inline]
    pub fn range(&self, coord: usize) -> std::ops::Range<usize> {
        coord * self.basis_count..(coord + 1) * self.basis_count
    }

    pub fn is_identity(&self) -> bool {
        self.weights.iter().all(|&w| w == 0.0)
    }

    pub fn clamp_widths(&mut self) {
        for s in &mut self.widths {
            if !(*s >= MIN_WIDTH) {
                *s = MIN_WIDTH;
            }
        }
    }

    /// `ψ_c(t)` for one coordinate.
    pub fn offset(&self, coord: usize, t: f64) -> f64 {
        let r = self.range(coord);
        deform_offset(t, &self.weights[r.clone()], &self.centers[r.clone()], &self.widths[r])
    }

    pub fn offsets(&self, t: f64) -> [f64; DEFORMED_COORDS] {
        std::array::from_fn(|c| self.offset(c, t))
    }
}

/// `exp(-(t - θ)² / (2σ²))`.
#[inline]
pub fn basis_eval(t: f64, theta: f64, sigma: f64) -> f64 {
    let d = t - theta;
    (-(d * d) / (2.0 * sigma * sigma)).exp()
}

/// Weighted sum of basis functions at time `t`.
pub fn deform_offset(t: f64, weights: &[f64], centers: &[f64], widths: &[f64]) -> f64 {
    debug_assert!(weights.len() == centers.len() && centers.len() == widths.len());
    weights
        .iter()
        .zip(centers)
        .zip(widths)
        .map(|((&w, &c), &s)| w * basis_eval(t, c, s))
        .sum()
}

/// Partial derivatives of one basis term `ω·b(t; θ, σ)` w.r.t. `(ω, θ, σ)`.
#[inline]
pub fn basis_term_grad(t: f64, weight: f64, theta: f64, sigma: f64) -> (f64, f64, f64) {
    let b = basis_eval(t, theta, sigma);
    let d = t - theta;
    let s2 = sigma * sigma;
    (b, weight * b * d / s2, weight * b * d * d / (s2 * sigma))
}

/// Attributes of every Gaussian at one instant, index-aligned with the cloud.
#[derive(Clone, Debug, PartialEq)]
pub struct DeformedAttributes {
    pub time: f64,
    pub positions: Vec<Vector3<f64>>,
    /// Quaternion after the additive offset, before normalization.
    pub raw_rotations: Vec<Vector4<f64>>,
    pub rotations: Vec<Vector4<f64>>,
    pub log_scales: Vec<Vector3<f64>>,
    pub scales: Vec<Vector3<f64>>,
    /// Pass-through, not time-varying.
    pub opacities: Vec<f64>,
    /// Pass-through, not time-varying.
    pub colors: Vec<Vector3<f64>>,
}

impl DeformedAttributes {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

struct Deformed {
    position: Vector3<f64>,
    raw_rotation: Vector4<f64>,
    rotation: Vector4<f64>,
    log_scale: Vector3<f64>,
}

/// Evaluates every Gaussian's deformation at time `t`.
pub fn deform_gaussians(cloud: &GaussianCloud, t: f64) -> DeformedAttributes {
    let per: Vec<Deformed> = cloud
        .gaussians()
        .par_iter()
        .zip(cloud.deform_params().par_iter())
        .map(|(g, p)| {
            if p.is_identity() {
                return Deformed {
                    position: g.position,
                    raw_rotation: g.rotation,
                    rotation: normalize_quat(&g.rotation),
                    log_scale: g.log_scale,
                };
            }
            let o = p.offsets(t);
            let position = g.position + Vector3::new(o[0], o[1], o[2]);
            let raw_rotation = g.rotation + Vector4::new(o[3], o[4], o[5], o[6]);
            let log_scale = g.log_scale + Vector3::new(o[7], o[8], o[9]);
            Deformed {
                position,
                raw_rotation,
                rotation: normalize_quat(&raw_rotation),
                log_scale,
            }
        })
        .collect();

    let mut out = DeformedAttributes {
        time: t,
        positions: Vec::with_capacity(per.len()),
        raw_rotations: Vec::with_capacity(per.len()),
        rotations: Vec::with_capacity(per.len()),
        log_scales: Vec::with_capacity(per.len()),
        scales: Vec::with_capacity(per.len()),
        opacities: cloud.gaussians().iter().map(|g| g.opacity()).collect(),
        colors: cloud.gaussians().iter().map(|g| g.color).collect(),
    };
    for d in per {
        out.positions.push(d.position);
        out.raw_rotations.push(d.raw_rotation);
        out.rotations.push(d.rotation);
        out.scales.push(d.log_scale.map(f64::exp));
        out.log_scales.push(d.log_scale);
    }
    out
}

/// Unit quaternion, falling back to identity for a vanishing norm.
pub fn normalize_quat(q: &Vector4<f64>) -> Vector4<f64> {
    let n = q.norm();
    if n > 1e-12 {
        q / n
    } else {
        Vector4::new(1.0, 0.0, 0.0, 0.0)
    }
}

/// Gradients of a loss w.r.t. one Gaussian's deformation parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct DeformGrad {
    pub weights: Vec<f64>,
    pub centers: Vec<f64>,
    pub widths: Vec<f64>,
}

/// Pulls gradients w.r.t. the ten deformed coordinates back to `(ω, θ, σ)`.
/// The canonical attributes receive `coord_grad` unchanged.
pub fn deform_backward(params: &DeformParams, t: f64, coord_grad: &[f64; DEFORMED_COORDS]) -> DeformGrad {
    let n = params.weights.len();
    let mut g = DeformGrad {
        weights: vec![0.0; n],
        centers: vec![0.0; n],
        widths: vec![0.0; n],
    };
    for (c, &gc) in coord_grad.iter().enumerate() {
        if gc == 0.0 {
            continue;
        }
        for i in params.range(c) {
            let (dw, dt, ds) = basis_term_grad(t, params.weights[i], params.centers[i], params.widths[i]);
            g.weights[i] = gc * dw;
            g.centers[i] = gc * dt;
            g.widths[i] = gc * ds;
        }
    }
    g
}
