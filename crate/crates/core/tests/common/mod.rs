#![allow(dead_code)]

use dynsplat::deform::{deform_gaussians, DeformParams};
use dynsplat::gaussian::{CameraModel, Gaussian, GaussianCloud};
use dynsplat::grid::{DepthMap, Grid, RgbImage};
use dynsplat::render::{cull_and_project, rasterize, rasterize_backward};
use dynsplat::train::adam::{gather, scatter, Group};
use dynsplat::train::cloud_backward;
use nalgebra::{Vector3, Vector4};
use rand::rngs::StdRng;
use rand::Rng;

/// Pass rule for one entry: relative error ≤ 1e-4, or absolute error ≤ 1e-6.
pub const REL_TOL: f64 = 1e-4;
pub const ABS_FLOOR: f64 = 1e-6;
/// One-sided slopes further apart than this (relative, plus the absolute
/// floor) mean a kink inside the step.
pub const KINK_REL: f64 = 1e-3;

pub fn close(analytic: f64, numeric: f64) -> bool {
    let err = (analytic - numeric).abs();
    err <= ABS_FLOOR || err <= REL_TOL * analytic.abs().max(numeric.abs())
}

#[derive(Debug, Default)]
pub struct FdStats {
    pub checked: usize,
    /// Entries where the one-sided differences disagree: the function has a
    /// kink (threshold, clamp, |·|) within the step.
    pub skipped: usize,
    pub failures: Vec<(usize, f64, f64)>,
    pub worst_rel: f64,
}

impl FdStats {
    pub fn merge(&mut self, o: FdStats) {
        self.checked += o.checked;
        self.skipped += o.skipped;
        self.failures.extend(o.failures);
        self.worst_rel = self.worst_rel.max(o.worst_rel);
    }
}

/// Central differences of `f` at `x` for the given coordinates, compared to
/// `analytic`.
pub fn fd_check(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], analytic: &[f64], coords: &[usize]) -> FdStats {
    let mut stats = FdStats::default();
    let f0 = f(x);
    let mut xp = x.to_vec();
    for &i in coords {
        let h = 1e-6 * x[i].abs().max(1.0);
        xp[i] = x[i] + h;
        let fp = f(&xp);
        xp[i] = x[i] - h;
        let fm = f(&xp);
        xp[i] = x[i];
        let central = (fp - fm) / (2.0 * h);
        let fwd = (fp - f0) / h;
        let bwd = (f0 - fm) / h;
        if (fwd - bwd).abs() > KINK_REL * fwd.abs().max(bwd.abs()) + ABS_FLOOR {
            stats.skipped += 1;
            continue;
        }
        stats.checked += 1;
        let a = analytic[i];
        let err = (a - central).abs();
        let scale = a.abs().max(central.abs());
        if scale > ABS_FLOOR {
            stats.worst_rel = stats.worst_rel.max(err / scale);
        }
        if !close(a, central) {
            stats.failures.push((i, a, central));
        }
    }
    stats
}

pub fn camera(w: usize, h: usize, focal: f64) -> CameraModel {
    CameraModel::centered(focal, w, h, 0.1, 100.0).unwrap()
}

pub fn random_quat(rng: &mut StdRng) -> Vector4<f64> {
    Vector4::new(
        rng.gen_range(-1.0..1.0),
        rng.gen_range(-1.0..1.0),
        rng.gen_range(-1.0..1.0),
        rng.gen_range(-1.0..1.0),
    )
    .normalize()
}

/// Up to `max` Gaussians inside the frustum, with random deformation fields.
pub fn random_cloud(rng: &mut StdRng, cam: &CameraModel, max: usize) -> GaussianCloud {
    let n = rng.gen_range(1..=max);
    let b = rng.gen_range(1..=4);
    let mut cloud = GaussianCloud::new(b);
    for _ in 0..n {
        let z = rng.gen_range(4.0..8.0);
        let hx = 0.45 * z * cam.width as f64 / cam.fx;
        let hy = 0.45 * z * cam.height as f64 / cam.fy;
        let g = Gaussian {
            position: Vector3::new(rng.gen_range(-hx..hx), rng.gen_range(-hy..hy), z),
            rotation: random_quat(rng),
            log_scale: Vector3::from_fn(|_, _| rng.gen_range(0.05f64..0.5).ln()),
            opacity_logit: rng.gen_range(-1.5..3.0),
            color: Vector3::from_fn(|_, _| rng.gen_range(0.0..1.0)),
        };
        let mut p = DeformParams::identity(b);
        for c in 0..10 {
            let amp = if c < 3 { 0.3 } else { 0.05 };
            for i in p.range(c) {
                p.weights[i] = rng.gen_range(-amp..amp);
                p.centers[i] = rng.gen_range(0.0..1.0);
                p.widths[i] = rng.gen_range(0.15..0.6);
            }
        }
        cloud.push_with(g, p);
    }
    cloud
}

pub fn random_weights(rng: &mut StdRng, w: usize, h: usize) -> (RgbImage, DepthMap) {
    let c = Grid::from_fn(w, h, |_, _| {
        [
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        ]
    });
    let d = Grid::from_fn(w, h, |_, _| rng.gen_range(-0.1..0.1));
    (c, d)
}

/// `Σ wc·colour + Σ wd·depth` of the render at time `t`.
pub fn linear_objective(cloud: &GaussianCloud, cam: &CameraModel, t: f64, wc: &RgbImage, wd: &DepthMap) -> f64 {
    let out = rasterize(&cull_and_project(&deform_gaussians(cloud, t), cam), cam);
    let mut s = 0.0;
    for (c, w) in out.color.as_slice().iter().zip(wc.as_slice()) {
        s += c[0] * w[0] + c[1] * w[1] + c[2] * w[2];
    }
    for (d, w) in out.depth.as_slice().iter().zip(wd.as_slice()) {
        s += d * w;
    }
    s
}

/// FD check of the whole chain (deformation, projection, compositing) for
/// every parameter group. Deformation parameters are subsampled to
/// `deform_samples` per cloud.
pub fn check_render_chain(
    rng: &mut StdRng,
    cloud: &GaussianCloud,
    cam: &CameraModel,
    t: f64,
    deform_samples: usize,
) -> FdStats {
    let (wc, wd) = random_weights(rng, cam.width, cam.height);
    let deformed = deform_gaussians(cloud, t);
    let out = rasterize(&cull_and_project(&deformed, cam), cam);
    let splat = rasterize_backward(&out.state, &wc, &wd).unwrap();
    let grad = cloud_backward(cloud, &deformed, cam, &splat);

    let mut stats = FdStats::default();
    for group in Group::ALL {
        let x = gather(cloud, group);
        let analytic = dynsplat::train::adam::gather_grad(&grad, group);
        let coords: Vec<usize> = if group == Group::Deform {
            (0..deform_samples.min(x.len()))
                .map(|_| rng.gen_range(0..x.len()))
                .collect()
        } else {
            (0..x.len()).collect()
        };
        let mut work = cloud.clone();
        let mut f = |v: &[f64]| {
            scatter(&mut work, group, v);
            linear_objective(&work, cam, t, &wc, &wd)
        };
        stats.merge(fd_check(&mut f, &x, &analytic, &coords));
    }
    stats
}
