//! Adam over the cloud's parameter groups.

use log::warn;
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::deform::normalize_quat;
use crate::error::{Error, Result};
use crate::gaussian::GaussianCloud;

use super::backward::CloudGrad;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Group {
    Position,
    Rotation,
    Scale,
    Opacity,
    Color,
    Deform,
}

impl Group {
    pub const ALL: [Group; 6] = [
        Group::Position,
        Group::Rotation,
        Group::Scale,
        Group::Opacity,
        Group::Color,
        Group::Deform,
    ];

    /// Scalars per Gaussian.
    pub fn width(self, basis_count: usize) -> usize {
        match self {
            Group::Position | Group::Scale | Group::Color => 3,
            Group::Rotation => 4,
            Group::Opacity => 1,
            Group::Deform => 3 * crate::deform::DEFORMED_COORDS * basis_count,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Group::Position => "position",
            Group::Rotation => "rotation",
            Group::Scale => "scale",
            Group::Opacity => "opacity",
            Group::Color => "color",
            Group::Deform => "deform",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub lr_position_init: f64,
    pub lr_position_final: f64,
    pub lr_rotation: f64,
    pub lr_scale: f64,
    pub lr_opacity: f64,
    pub lr_color: f64,
    pub lr_deform: f64,
    /// Multiplies the position rate and the rate of the positional
    /// deformation weights, for scenes whose units are far from unit scale.
    pub spatial_lr_scale: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-15,
            lr_position_init: 1.6e-3,
            lr_position_final: 1.6e-5,
            lr_rotation: 1e-3,
            lr_scale: 5e-3,
            lr_opacity: 0.05,
            lr_color: 2.5e-3,
            lr_deform: 1.6e-3,
            spatial_lr_scale: 1.0,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::InvalidInput("adam: betas must lie in [0, 1) and eps > 0".into()));
        }
        let rates = [
            self.lr_position_init,
            self.lr_position_final,
            self.lr_rotation,
            self.lr_scale,
            self.lr_opacity,
            self.lr_color,
            self.lr_deform,
        ];
        if rates.iter().any(|r| !(*r >= 0.0)) || self.lr_position_final > self.lr_position_init {
            return Err(Error::InvalidInput(
                "adam: learning rates must be >= 0 and position rate must decay".into(),
            ));
        }
        if !(self.spatial_lr_scale > 0.0) {
            return Err(Error::InvalidInput("adam: spatial_lr_scale must be positive".into()));
        }
        Ok(())
    }

    /// Position rate at `iter`, log-linear from init to final over `total`.
    pub fn position_lr(&self, iter: u64, total: u64) -> f64 {
        let r = if total == 0 {
            1.0
        } else {
            (iter as f64 / total as f64).clamp(0.0, 1.0)
        };
        if self.lr_position_init == 0.0 || self.lr_position_final == 0.0 {
            return self.lr_position_init * (1.0 - r) + self.lr_position_final * r;
        }
        ((1.0 - r) * self.lr_position_init.ln() + r * self.lr_position_final.ln()).exp()
    }
}

/// First and second moments of one group, laid out like [`gather`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    /// Indexed like [`Group::ALL`].
    pub moments: Vec<Moments>,
    /// Skipped group updates caused by non-finite gradients.
    pub skipped: Vec<u64>,
}

impl AdamState {
    pub fn new(cloud: &GaussianCloud) -> Self {
        let n = cloud.len();
        let b = cloud.basis_count();
        Self {
            step: 0,
            moments: Group::ALL
                .iter()
                .map(|g| Moments {
                    m: vec![0.0; n * g.width(b)],
                    v: vec![0.0; n * g.width(b)],
                })
                .collect(),
            skipped: vec![0; Group::ALL.len()],
        }
    }

    /// Reorders moments after a density change: `sources[k]` is the old
    /// index the new Gaussian `k` came from, or `None` for fresh state.
    pub fn remap(&mut self, sources: &[Option<usize>], basis_count: usize) {
        for (g, mom) in Group::ALL.iter().zip(self.moments.iter_mut()) {
            let w = g.width(basis_count);
            let pick = |old: &Vec<f64>| -> Vec<f64> {
                let mut out = Vec::with_capacity(sources.len() * w);
                for s in sources {
                    match s {
                        Some(i) => out.extend_from_slice(&old[i * w..(i + 1) * w]),
                        None => out.extend(std::iter::repeat_n(0.0, w)),
                    }
                }
                out
            };
            mom.m = pick(&mom.m);
            mom.v = pick(&mom.v);
        }
    }

    pub fn check(&self, cloud: &GaussianCloud) -> Result<()> {
        let n = cloud.len();
        for (g, mom) in Group::ALL.iter().zip(&self.moments) {
            let len = n * g.width(cloud.basis_count());
            if mom.m.len() != len || mom.v.len() != len {
                return Err(Error::InvalidState(format!(
                    "optimizer moments for {} hold {} values, cloud needs {len}",
                    g.name(),
                    mom.m.len()
                )));
            }
        }
        Ok(())
    }
}

/// Flattens one parameter group, Gaussian-major.
pub fn gather(cloud: &GaussianCloud, group: Group) -> Vec<f64> {
    let mut out = Vec::with_capacity(cloud.len() * group.width(cloud.basis_count()));
    for (g, p) in cloud.iter() {
        match group {
            Group::Position => out.extend(g.position.iter()),
            Group::Rotation => out.extend(g.rotation.iter()),
            Group::Scale => out.extend(g.log_scale.iter()),
            Group::Opacity => out.push(g.opacity_logit),
            Group::Color => out.extend(g.color.iter()),
            Group::Deform => {
                out.extend(&p.weights);
                out.extend(&p.centers);
                out.extend(&p.widths);
            }
        }
    }
    out
}

/// Writes a flattened group back; inverse of [`gather`].
pub fn scatter(cloud: &mut GaussianCloud, group: Group, values: &[f64]) {
    let w = group.width(cloud.basis_count());
    let n = cloud.len();
    for i in 0..n {
        let v = &values[i * w..(i + 1) * w];
        match group {
            Group::Deform => {
                let p = &mut cloud.deform_params_mut()[i];
                let k = p.weights.len();
                p.weights.copy_from_slice(&v[..k]);
                p.centers.copy_from_slice(&v[k..2 * k]);
                p.widths.copy_from_slice(&v[2 * k..]);
            }
            _ => {
                let g = &mut cloud.gaussians_mut()[i];
                match group {
                    Group::Position => g.position.copy_from_slice(v),
                    Group::Rotation => g.rotation.copy_from_slice(v),
                    Group::Scale => g.log_scale.copy_from_slice(v),
                    Group::Opacity => g.opacity_logit = v[0],
                    Group::Color => g.color.copy_from_slice(v),
                    Group::Deform => unreachable!(),
                }
            }
        }
    }
}

/// Gradient flattened like [`gather`].
pub fn gather_grad(grad: &CloudGrad, group: Group) -> Vec<f64> {
    let n = grad.position.len();
    let mut out = Vec::new();
    for i in 0..n {
        match group {
            Group::Position => out.extend(grad.position[i].iter()),
            Group::Rotation => out.extend(grad.rotation[i].iter()),
            Group::Scale => out.extend(grad.log_scale[i].iter()),
            Group::Opacity => out.push(grad.opacity_logit[i]),
            Group::Color => out.extend(grad.color[i].iter()),
            Group::Deform => {
                let d = &grad.deform[i];
                out.extend(&d.weights);
                out.extend(&d.centers);
                out.extend(&d.widths);
            }
        }
    }
    out
}

/// Per-element learning rates of one group.
pub struct Rates {
    pub base: f64,
    /// Applied to the positional deformation weights only.
    pub deform_position_weights: f64,
}

pub fn group_rates(cfg: &AdamConfig, group: Group, iter: u64, total: u64) -> Rates {
    let spatial = cfg.spatial_lr_scale;
    let base = match group {
        Group::Position => cfg.position_lr(iter, total) * spatial,
        Group::Rotation => cfg.lr_rotation,
        Group::Scale => cfg.lr_scale,
        Group::Opacity => cfg.lr_opacity,
        Group::Color => cfg.lr_color,
        Group::Deform => cfg.lr_deform,
    };
    Rates {
        base,
        deform_position_weights: cfg.lr_deform * spatial,
    }
}

/// One Adam update of a flat slice. Returns false (and leaves everything
/// untouched) when the gradient has a non-finite entry.
pub fn adam_update(
    params: &mut [f64],
    grads: &[f64],
    mom: &mut Moments,
    lr: impl Fn(usize) -> f64,
    cfg: &AdamConfig,
    step: u64,
) -> bool {
    if grads.iter().any(|g| !g.is_finite()) {
        return false;
    }
    let bc1 = 1.0 - cfg.beta1.powi(step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(step as i32);
    for i in 0..params.len() {
        let g = grads[i];
        mom.m[i] = cfg.beta1 * mom.m[i] + (1.0 - cfg.beta1) * g;
        mom.v[i] = cfg.beta2 * mom.v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = mom.m[i] / bc1;
        let v_hat = mom.v[i] / bc2;
        params[i] -= lr(i) * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    true
}

/// Steps every group, then renormalizes quaternions, clamps basis widths and
/// keeps colours in `[0, 1]`.
pub fn adam_step(
    cloud: &mut GaussianCloud,
    grad: &CloudGrad,
    state: &mut AdamState,
    cfg: &AdamConfig,
    iter: u64,
    total: u64,
) -> Result<()> {
    state.check(cloud)?;
    if grad.position.len() != cloud.len() {
        return Err(Error::InvalidState("gradient and cloud sizes differ".into()));
    }
    state.step += 1;
    let b = cloud.basis_count();
    let per_coord = b;
    let deform_width = Group::Deform.width(b);
    for (gi, &group) in Group::ALL.iter().enumerate() {
        let rates = group_rates(cfg, group, iter, total);
        let mut params = gather(cloud, group);
        let grads = gather_grad(grad, group);
        let lr = |i: usize| {
            // ω of the three positional coordinates sit first in each block
            if group == Group::Deform && i % deform_width < 3 * per_coord {
                rates.deform_position_weights
            } else {
                rates.base
            }
        };
        if adam_update(&mut params, &grads, &mut state.moments[gi], lr, cfg, state.step) {
            scatter(cloud, group, &params);
        } else {
            state.skipped[gi] += 1;
            warn!(
                "adam: non-finite {} gradient, group skipped at step {}",
                group.name(),
                state.step
            );
        }
    }
    for g in cloud.gaussians_mut() {
        g.rotation = normalize_quat(&g.rotation);
        g.color = Vector3::from_iterator(g.color.iter().map(|c| c.clamp(0.0, 1.0)));
    }
    for p in cloud.deform_params_mut() {
        p.clamp_widths();
    }
    Ok(())
}
