//! Photometric, depth and edge-aware smoothness losses with their gradients
//! w.r.t. the rendered images.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::ssim_with_grad;
use crate::grid::{ensure_same_shape, BinaryMask, DepthMap, Grid, RgbImage};
use crate::ingest::Frame;
use crate::render::RenderOutput;

/// Added to the min-max range before dividing.
pub const NORM_EPS: f64 = 1e-8;
/// Added to depths before inverting.
pub const INVERSE_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DepthLossKind {
    #[default]
    Normalized,
    Inverse,
    L1,
    Logl1,
}

/// Per-map normalization used by the normalized depth loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Normalization {
    #[default]
    MinMax,
    /// `(D - mean) / (std + eps)`. Untested alternative.
    MeanStd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub lambda_smooth: f64,
    pub lambda_dssim: f64,
    pub depth_loss_kind: DepthLossKind,
    pub normalization: Normalization,
    /// Fractions of the maximum gradient magnitude.
    pub canny_low: f64,
    pub canny_high: f64,
    pub canny_blur_sigma: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_smooth: 1e-4,
            lambda_dssim: 0.2,
            depth_loss_kind: DepthLossKind::Normalized,
            normalization: Normalization::MinMax,
            canny_low: 0.1,
            canny_high: 0.2,
            canny_blur_sigma: 1.4,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_smooth >= 0.0) || !(0.0..=1.0).contains(&self.lambda_dssim) {
            return Err(Error::InvalidInput(
                "lambda_smooth must be >= 0 and lambda_dssim in [0, 1]".into(),
            ));
        }
        if !(self.canny_low >= 0.0 && self.canny_low < self.canny_high) {
            return Err(Error::InvalidInput("canny thresholds need 0 <= low < high".into()));
        }
        if !(self.canny_blur_sigma > 0.0) {
            return Err(Error::InvalidInput("canny_blur_sigma must be positive".into()));
        }
        Ok(())
    }
}

/// Loss values plus gradients w.r.t. the rendered colour and depth.
#[derive(Clone, Debug)]
pub struct LossReport {
    pub color_loss: f64,
    pub depth_loss: f64,
    pub smooth_loss: f64,
    pub total: f64,
    pub grad_color: RgbImage,
    pub grad_depth: DepthMap,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        [self.color_loss, self.depth_loss, self.smooth_loss, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Sign with `sgn(0) = 0`, the subgradient used for every `|·|`.
#[inline]
fn sgn(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `(1 - λ) L1 + λ (1 - SSIM)` over the mask, and its gradient w.r.t. `rendered`.
pub fn photometric_loss(
    rendered: &RgbImage,
    target: &RgbImage,
    mask: &BinaryMask,
    lambda_dssim: f64,
) -> Result<(f64, RgbImage)> {
    ensure_same_shape(rendered, target, "photometric target")?;
    ensure_same_shape(rendered, mask, "photometric mask")?;
    let n = mask.count();
    let mut grad = Grid::filled(rendered.width(), rendered.height(), [0.0; 3]);
    if n == 0 {
        warn!("photometric loss: empty mask, loss set to 0");
        return Ok((0.0, grad));
    }
    let scale = (1.0 - lambda_dssim) / (3 * n) as f64;
    let mut l1 = 0.0;
    for (i, g) in grad.as_mut_slice().iter_mut().enumerate() {
        if !mask.as_slice()[i] {
            continue;
        }
        let (r, t) = (rendered.as_slice()[i], target.as_slice()[i]);
        for k in 0..3 {
            let d = r[k] - t[k];
            l1 += d.abs();
            g[k] = scale * sgn(d);
        }
    }
    l1 /= (3 * n) as f64;
    let mut loss = (1.0 - lambda_dssim) * l1;
    if lambda_dssim > 0.0 {
        let (s, sg) = ssim_with_grad(rendered, target, mask)?;
        loss += lambda_dssim * (1.0 - s);
        for (g, d) in grad.as_mut_slice().iter_mut().zip(sg.as_slice()) {
            for k in 0..3 {
                g[k] -= lambda_dssim * d[k];
            }
        }
    }
    Ok((loss, grad))
}

fn masked_values(map: &DepthMap, mask: &BinaryMask) -> Vec<f64> {
    map.as_slice()
        .iter()
        .zip(mask.as_slice())
        .filter(|(_, &m)| m)
        .map(|(&v, _)| v)
        .collect()
}

/// Shift and scale `(offset, scale)` with `normalized = (d - offset) / scale`.
fn normalizer(values: &[f64], kind: Normalization) -> (f64, f64) {
    match kind {
        Normalization::MinMax => {
            let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            (lo, hi - lo + NORM_EPS)
        }
        Normalization::MeanStd => {
            let n = values.len() as f64;
            let mean = values.iter().sum::<f64>() / n;
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            (mean, var.sqrt() + NORM_EPS)
        }
    }
}

/// Normalized depth loss. The normalizer statistics are treated as constants
/// in the gradient.
pub fn normalized_depth_loss(
    rendered: &DepthMap,
    target: &DepthMap,
    mask: &BinaryMask,
    kind: Normalization,
) -> Result<(f64, DepthMap)> {
    ensure_same_shape(rendered, target, "depth target")?;
    ensure_same_shape(rendered, mask, "depth mask")?;
    let mut grad = Grid::filled(rendered.width(), rendered.height(), 0.0);
    let n = mask.count();
    if n < 2 {
        warn!("normalized depth loss: fewer than 2 masked pixels, loss set to 0");
        return Ok((0.0, grad));
    }
    let (ro, rs) = normalizer(&masked_values(rendered, mask), kind);
    let (to, ts) = normalizer(&masked_values(target, mask), kind);
    if rs <= NORM_EPS || ts <= NORM_EPS {
        warn!("normalized depth loss: zero depth range, loss set to 0");
        return Ok((0.0, grad));
    }
    let mut loss = 0.0;
    let inv_n = 1.0 / n as f64;
    for (i, g) in grad.as_mut_slice().iter_mut().enumerate() {
        if !mask.as_slice()[i] {
            continue;
        }
        let d = (rendered.as_slice()[i] - ro) / rs - (target.as_slice()[i] - to) / ts;
        loss += d.abs();
        *g = sgn(d) * inv_n / rs;
    }
    Ok((loss * inv_n, grad))
}

/// Shared body of the per-pixel depth losses: `f(rendered, target)` returns
/// the pixel loss and its derivative w.r.t. the rendered value.
fn pointwise_depth_loss(
    rendered: &DepthMap,
    target: &DepthMap,
    mask: &BinaryMask,
    name: &str,
    f: impl Fn(f64, f64) -> (f64, f64),
) -> Result<(f64, DepthMap)> {
    ensure_same_shape(rendered, target, "depth target")?;
    ensure_same_shape(rendered, mask, "depth mask")?;
    let mut grad = Grid::filled(rendered.width(), rendered.height(), 0.0);
    let n = mask.count();
    if n == 0 {
        warn!("{name} depth loss: empty mask, loss set to 0");
        return Ok((0.0, grad));
    }
    let inv_n = 1.0 / n as f64;
    let mut loss = 0.0;
    for (i, g) in grad.as_mut_slice().iter_mut().enumerate() {
        if mask.as_slice()[i] {
            let (l, d) = f(rendered.as_slice()[i], target.as_slice()[i]);
            loss += l;
            *g = d * inv_n;
        }
    }
    Ok((loss * inv_n, grad))
}

pub fn inverse_depth_loss(rendered: &DepthMap, target: &DepthMap, mask: &BinaryMask) -> Result<(f64, DepthMap)> {
    pointwise_depth_loss(rendered, target, mask, "inverse", |r, t| {
        let ir = 1.0 / (r + INVERSE_EPS);
        let d = ir - 1.0 / (t + INVERSE_EPS);
        (d.abs(), -sgn(d) * ir * ir)
    })
}

pub fn l1_depth_loss(rendered: &DepthMap, target: &DepthMap, mask: &BinaryMask) -> Result<(f64, DepthMap)> {
    pointwise_depth_loss(rendered, target, mask, "l1", |r, t| {
        let d = r - t;
        (d.abs(), sgn(d))
    })
}

pub fn logl1_depth_loss(rendered: &DepthMap, target: &DepthMap, mask: &BinaryMask) -> Result<(f64, DepthMap)> {
    pointwise_depth_loss(rendered, target, mask, "logl1", |r, t| {
        let d = r - t;
        (d.abs().ln_1p(), sgn(d) / (1.0 + d.abs()))
    })
}

pub fn depth_loss(
    kind: DepthLossKind,
    normalization: Normalization,
    rendered: &DepthMap,
    target: &DepthMap,
    mask: &BinaryMask,
) -> Result<(f64, DepthMap)> {
    match kind {
        DepthLossKind::Normalized => normalized_depth_loss(rendered, target, mask, normalization),
        DepthLossKind::Inverse => inverse_depth_loss(rendered, target, mask),
        DepthLossKind::L1 => l1_depth_loss(rendered, target, mask),
        DepthLossKind::Logl1 => logl1_depth_loss(rendered, target, mask),
    }
}

/// Edge-aware total variation of the rendered depth. `non_edge` is 1 away
/// from edges. A pixel counts when it is non-edge and covered; it adds the
/// absolute difference to each covered right/down neighbour, and the sum is
/// divided by the number of counted pixels.
pub fn smoothness_loss(rendered: &DepthMap, non_edge: &BinaryMask, coverage: &BinaryMask) -> Result<(f64, DepthMap)> {
    ensure_same_shape(rendered, non_edge, "edge mask")?;
    ensure_same_shape(rendered, coverage, "coverage mask")?;
    let (w, h) = (rendered.width(), rendered.height());
    let mut grad = Grid::filled(w, h, 0.0);
    let d = rendered.as_slice();
    let cov = coverage.as_slice();
    let active = |i: usize| non_edge.as_slice()[i] && cov[i];
    let count = (0..d.len()).filter(|&i| active(i)).count();
    if count == 0 {
        return Ok((0.0, grad));
    }
    let inv = 1.0 / count as f64;
    let mut sum = 0.0;
    let g = grad.as_mut_slice();
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if !active(i) {
                continue;
            }
            let mut pair = |j: usize| {
                if cov[j] {
                    let diff = d[i] - d[j];
                    sum += diff.abs();
                    let s = sgn(diff) * inv;
                    g[i] += s;
                    g[j] -= s;
                }
            };
            if x + 1 < w {
                pair(i + 1);
            }
            if y + 1 < h {
                pair(i + w);
            }
        }
    }
    Ok((sum * inv, grad))
}

/// Full objective for one frame. `non_edge` is the frame's precomputed edge
/// mask. Colour is supervised on tissue pixels, depth on tissue pixels with
/// valid stereo depth that the render covers.
pub fn total_loss(frame: &Frame, render: &RenderOutput, non_edge: &BinaryMask, cfg: &LossConfig) -> Result<LossReport> {
    let covered = render.covered();
    let (color_loss, grad_color) = photometric_loss(&render.color, &frame.image, &frame.tissue_mask, cfg.lambda_dssim)?;
    let depth_mask = frame.valid_mask().and(&covered);
    let (depth_loss, mut grad_depth) = depth_loss(
        cfg.depth_loss_kind,
        cfg.normalization,
        &render.depth,
        &frame.depth,
        &depth_mask,
    )?;
    let smooth_loss = if cfg.lambda_smooth > 0.0 {
        let (s, sg) = smoothness_loss(&render.depth, non_edge, &covered)?;
        for (g, d) in grad_depth.as_mut_slice().iter_mut().zip(sg.as_slice()) {
            *g += cfg.lambda_smooth * d;
        }
        s
    } else {
        0.0
    };
    Ok(LossReport {
        color_loss,
        depth_loss,
        smooth_loss,
        total: color_loss + depth_loss + cfg.lambda_smooth * smooth_loss,
        grad_color,
        grad_depth,
    })
}
