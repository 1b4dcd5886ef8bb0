//! Adaptive density control: clone small high-gradient Gaussians, split large
//! ones, prune transparent ones.

use log::warn;
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::deform::normalize_quat;
use crate::error::{Error, Result};
use crate::gaussian::{quat_to_rotation, GaussianCloud};

use super::backward::CloudGrad;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DensityConfig {
    pub interval: u64,
    pub start: u64,
    pub stop: u64,
    /// Mean screen-space gradient norm, normalized device units.
    pub grad_threshold: f64,
    /// Clone below `extent × fraction`, split above.
    pub clone_scale_fraction: f64,
    pub split_factor: f64,
    pub min_opacity: f64,
    pub max_gaussians: usize,
}

impl Default for DensityConfig {
    fn default() -> Self {
        Self {
            interval: 100,
            start: 500,
            stop: 3000,
            grad_threshold: 2e-4,
            clone_scale_fraction: 0.01,
            split_factor: 1.6,
            min_opacity: 0.005,
            max_gaussians: 500_000,
        }
    }
}

impl DensityConfig {
    pub fn validate(&self) -> Result<()> {
        if self.interval == 0 || self.start > self.stop {
            return Err(Error::InvalidInput(
                "density: interval must be > 0 and start <= stop".into(),
            ));
        }
        if !(self.split_factor > 1.0) || !(self.grad_threshold >= 0.0) || !(self.clone_scale_fraction >= 0.0) {
            return Err(Error::InvalidInput(
                "density: split_factor must exceed 1 and thresholds must be >= 0".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.min_opacity) || self.max_gaussians == 0 {
            return Err(Error::InvalidInput(
                "density: min_opacity in [0, 1) and max_gaussians > 0".into(),
            ));
        }
        Ok(())
    }

    /// Whether density control runs after iteration `iter` (1-based count of
    /// completed iterations).
    pub fn due(&self, iter: u64) -> bool {
        iter > self.start && iter <= self.stop && iter.is_multiple_of(self.interval)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DensityState {
    pub grad_accum: Vec<f64>,
    pub counts: Vec<u64>,
    pub enabled: bool,
    pub extent: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct DensityStats {
    pub cloned: usize,
    pub split: usize,
    pub pruned: usize,
}

/// Radius of the cloud around its centroid.
pub fn scene_extent(cloud: &GaussianCloud) -> f64 {
    if cloud.is_empty() {
        return 0.0;
    }
    let c = cloud.gaussians().iter().fold(Vector3::zeros(), |a, g| a + g.position) / cloud.len() as f64;
    cloud
        .gaussians()
        .iter()
        .map(|g| (g.position - c).norm())
        .fold(0.0, f64::max)
}

impl DensityState {
    pub fn new(cloud: &GaussianCloud, extent: f64) -> Self {
        Self {
            grad_accum: vec![0.0; cloud.len()],
            counts: vec![0; cloud.len()],
            enabled: true,
            extent,
        }
    }

    pub fn accumulate(&mut self, grad: &CloudGrad) {
        for (i, n) in grad.mean2d_norm.iter().enumerate() {
            if let Some(n) = n {
                self.grad_accum[i] += n;
                self.counts[i] += 1;
            }
        }
    }

    fn reset(&mut self, n: usize) {
        self.grad_accum = vec![0.0; n];
        self.counts = vec![0; n];
    }
}

/// Applies clone/split/prune. Returns the stats and, for every Gaussian of the
/// new cloud, the old index whose optimizer state it keeps (`None` = fresh,
/// used for every added copy). Errors when pruning empties the cloud.
pub fn density_control(
    cloud: &mut GaussianCloud,
    state: &mut DensityState,
    cfg: &DensityConfig,
) -> Result<(DensityStats, Vec<Option<usize>>)> {
    let n = cloud.len();
    if state.grad_accum.len() != n {
        return Err(Error::InvalidState("density accumulators misaligned with cloud".into()));
    }
    let mut stats = DensityStats::default();
    let mut clone = vec![false; n];
    let mut split = vec![false; n];
    if state.enabled {
        let limit = state.extent * cfg.clone_scale_fraction;
        for i in 0..n {
            if state.counts[i] == 0 {
                continue;
            }
            let mean = state.grad_accum[i] / state.counts[i] as f64;
            if mean > cfg.grad_threshold {
                let s = cloud.gaussians()[i].scale().max();
                if s <= limit {
                    clone[i] = true;
                } else {
                    split[i] = true;
                }
            }
        }
        let added = clone.iter().chain(&split).filter(|&&b| b).count();
        if n + added > cfg.max_gaussians {
            warn!(
                "density control: {} Gaussians would exceed the cap of {}, densification disabled",
                n + added,
                cfg.max_gaussians
            );
            state.enabled = false;
            clone.iter_mut().for_each(|c| *c = false);
            split.iter_mut().for_each(|s| *s = false);
        }
    }

    // Originals stay in place (split ones are shrunk and shifted); copies are
    // appended in index order.
    let mut sources: Vec<Option<usize>> = (0..n).map(Some).collect();
    let shrink = cfg.split_factor.ln();
    let mut extra = GaussianCloud::new(cloud.basis_count());
    for i in 0..n {
        if clone[i] {
            extra.push_with(cloud.gaussians()[i].clone(), cloud.deform_params()[i].clone());
            sources.push(None);
            stats.cloned += 1;
        } else if split[i] {
            let g = &mut cloud.gaussians_mut()[i];
            let scale = g.scale();
            let axis = scale.imax();
            let dir: Vector3<f64> = quat_to_rotation(&normalize_quat(&g.rotation)).column(axis).into();
            let offset = dir * scale[axis];
            g.log_scale.add_scalar_mut(-shrink);
            let mut twin = g.clone();
            g.position += offset;
            twin.position -= offset;
            extra.push_with(twin, cloud.deform_params()[i].clone());
            sources.push(None);
            stats.split += 1;
        }
    }
    cloud.extend(extra);

    let keep: Vec<bool> = cloud
        .gaussians()
        .iter()
        .map(|g| g.opacity() >= cfg.min_opacity)
        .collect();
    stats.pruned = keep.iter().filter(|&&k| !k).count();
    if stats.pruned > 0 {
        cloud.retain_indices(&keep);
        sources = sources
            .into_iter()
            .zip(&keep)
            .filter(|(_, &k)| k)
            .map(|(s, _)| s)
            .collect();
    }
    state.reset(cloud.len());
    if cloud.is_empty() {
        return Err(Error::EmptyCloud);
    }
    Ok((stats, sources))
}
