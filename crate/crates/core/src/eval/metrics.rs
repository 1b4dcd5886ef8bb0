//! Image and depth quality metrics.
//!
//! SSIM uses an 11×11 Gaussian window (σ = 1.5), `K1 = 0.01`, `K2 = 0.03`,
//! dynamic range 1 and zero padding at the borders. Pixels outside the mask
//! are zeroed in both images before windowing and only masked window centres
//! are averaged.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{ensure_same_shape, BinaryMask, DepthMap, Grid, RgbImage};

pub const PSNR_CAP: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

/// `10·log10(1 / MSE)` over masked pixels, capped at 100 dB.
pub fn psnr(a: &RgbImage, b: &RgbImage, mask: &BinaryMask) -> Result<f64> {
    ensure_same_shape(a, b, "metric input")?;
    ensure_same_shape(a, mask, "metric input")?;
    let mut sum = 0.0;
    let mut n = 0usize;
    for ((pa, pb), &m) in a.as_slice().iter().zip(b.as_slice()).zip(mask.as_slice()) {
        if m {
            for k in 0..3 {
                let d = pa[k] - pb[k];
                sum += d * d;
            }
            n += 3;
        }
    }
    if n == 0 {
        return Err(Error::EmptyMask);
    }
    let mse = sum / n as f64;
    Ok(if mse > 0.0 {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
    } else {
        PSNR_CAP
    })
}

pub(crate) fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let half = (SSIM_WINDOW / 2) as f64;
    let mut w = [0.0; SSIM_WINDOW];
    for (i, v) in w.iter_mut().enumerate() {
        let x = i as f64 - half;
        *v = (-(x * x) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Separable same-size convolution with zero padding. Self-adjoint because the
/// window is symmetric.
fn blur(src: &[f64], width: usize, height: usize, win: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as isize;
    let mut tmp = vec![0.0; src.len()];
    for y in 0..height {
        let row = &src[y * width..(y + 1) * width];
        for x in 0..width {
            let mut acc = 0.0;
            for (k, &w) in win.iter().enumerate() {
                let xx = x as isize + k as isize - r;
                if xx >= 0 && (xx as usize) < width {
                    acc += w * row[xx as usize];
                }
            }
            tmp[y * width + x] = acc;
        }
    }
    let mut out = vec![0.0; src.len()];
    for y in 0..height {
        for x in 0..width {
            let mut acc = 0.0;
            for (k, &w) in win.iter().enumerate() {
                let yy = y as isize + k as isize - r;
                if yy >= 0 && (yy as usize) < height {
                    acc += w * tmp[yy as usize * width + x];
                }
            }
            out[y * width + x] = acc;
        }
    }
    out
}

fn channel(img: &RgbImage, mask: &BinaryMask, k: usize) -> Vec<f64> {
    img.as_slice()
        .iter()
        .zip(mask.as_slice())
        .map(|(p, &m)| if m { p[k] } else { 0.0 })
        .collect()
}

struct SsimChannel {
    map: Vec<f64>,
    d_mu: Vec<f64>,
    d_e_aa: Vec<f64>,
    d_e_ab: Vec<f64>,
}

fn ssim_channel(
    a: &[f64],
    b: &[f64],
    width: usize,
    height: usize,
    win: &[f64; SSIM_WINDOW],
    grads: bool,
) -> SsimChannel {
    let sq = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).collect::<Vec<_>>();
    let mu_a = blur(a, width, height, win);
    let mu_b = blur(b, width, height, win);
    let e_aa = blur(&sq(a, a), width, height, win);
    let e_bb = blur(&sq(b, b), width, height, win);
    let e_ab = blur(&sq(a, b), width, height, win);
    let n = a.len();
    let mut out = SsimChannel {
        map: Vec::with_capacity(n),
        d_mu: if grads { Vec::with_capacity(n) } else { Vec::new() },
        d_e_aa: if grads { Vec::with_capacity(n) } else { Vec::new() },
        d_e_ab: if grads { Vec::with_capacity(n) } else { Vec::new() },
    };
    for i in 0..n {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let s_aa = e_aa[i] - ma * ma;
        let s_bb = e_bb[i] - mb * mb;
        let s_ab = e_ab[i] - ma * mb;
        let n1 = 2.0 * ma * mb + C1;
        let n2 = 2.0 * s_ab + C2;
        let d1 = ma * ma + mb * mb + C1;
        let d2 = s_aa + s_bb + C2;
        let s = (n1 * n2) / (d1 * d2);
        out.map.push(s);
        if grads {
            out.d_mu
                .push(s * (2.0 * mb / n1 - 2.0 * mb / n2 - 2.0 * ma / d1 + 2.0 * ma / d2));
            out.d_e_aa.push(-s / d2);
            out.d_e_ab.push(2.0 * n1 / (d1 * d2));
        }
    }
    out
}

/// Mean SSIM over masked window centres, averaged over channels.
pub fn ssim(a: &RgbImage, b: &RgbImage, mask: &BinaryMask) -> Result<f64> {
    ssim_impl(a, b, mask, false).map(|(v, _)| v)
}

/// SSIM value and its gradient w.r.t. `a`.
pub fn ssim_with_grad(a: &RgbImage, b: &RgbImage, mask: &BinaryMask) -> Result<(f64, Grid<[f64; 3]>)> {
    ssim_impl(a, b, mask, true).map(|(v, g)| (v, g.expect("gradient requested")))
}

fn ssim_impl(a: &RgbImage, b: &RgbImage, mask: &BinaryMask, grads: bool) -> Result<(f64, Option<Grid<[f64; 3]>>)> {
    ensure_same_shape(a, b, "metric input")?;
    ensure_same_shape(a, mask, "metric input")?;
    let count = mask.count();
    if count == 0 {
        return Err(Error::EmptyMask);
    }
    let (w, h) = (a.width(), a.height());
    let win = gaussian_window();
    let m = mask.as_slice();
    let weight = 1.0 / (3.0 * count as f64);
    let mut total = 0.0;
    let mut grad = if grads {
        Some(Grid::filled(w, h, [0.0; 3]))
    } else {
        None
    };
    for k in 0..3 {
        let ca = channel(a, mask, k);
        let cb = channel(b, mask, k);
        let ch = ssim_channel(&ca, &cb, w, h, &win, grads);
        total += ch.map.iter().zip(m).filter(|(_, &mm)| mm).map(|(s, _)| s).sum::<f64>();
        if let Some(g) = grad.as_mut() {
            let masked = |v: &[f64]| -> Vec<f64> {
                v.iter()
                    .zip(m)
                    .map(|(x, &mm)| if mm { x * weight } else { 0.0 })
                    .collect()
            };
            let bm = blur(&masked(&ch.d_mu), w, h, &win);
            let baa = blur(&masked(&ch.d_e_aa), w, h, &win);
            let bab = blur(&masked(&ch.d_e_ab), w, h, &win);
            for (i, px) in g.as_mut_slice().iter_mut().enumerate() {
                if m[i] {
                    px[k] = bm[i] + 2.0 * ca[i] * baa[i] + cb[i] * bab[i];
                }
            }
        }
    }
    Ok((total * weight, grad))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DepthMetrics {
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub rmse: f64,
    pub rmse_log: f64,
    /// Pixels that entered abs_rel / sq_rel / rmse.
    pub count: usize,
    /// Masked pixels dropped because `gt <= 0`.
    pub excluded_gt: usize,
    /// Pixels dropped from rmse_log because `pred <= 0`.
    pub excluded_log: usize,
}

/// Standard depth errors over masked pixels with positive ground truth.
pub fn depth_metrics(pred: &DepthMap, gt: &DepthMap, mask: &BinaryMask) -> Result<DepthMetrics> {
    ensure_same_shape(pred, gt, "metric input")?;
    ensure_same_shape(pred, mask, "metric input")?;
    let mut out = DepthMetrics::default();
    let (mut abs_rel, mut sq_rel, mut sq, mut sq_log) = (0.0, 0.0, 0.0, 0.0);
    let mut n_log = 0usize;
    for ((&p, &g), &m) in pred.as_slice().iter().zip(gt.as_slice()).zip(mask.as_slice()) {
        if !m {
            continue;
        }
        if !(g > 0.0) {
            out.excluded_gt += 1;
            continue;
        }
        let d = p - g;
        abs_rel += d.abs() / g;
        sq_rel += d * d / g;
        sq += d * d;
        out.count += 1;
        if p > 0.0 {
            let l = p.ln() - g.ln();
            sq_log += l * l;
            n_log += 1;
        } else {
            out.excluded_log += 1;
        }
    }
    if out.count == 0 {
        return Err(Error::EmptyMask);
    }
    let n = out.count as f64;
    out.abs_rel = abs_rel / n;
    out.sq_rel = sq_rel / n;
    out.rmse = (sq / n).sqrt();
    out.rmse_log = if n_log > 0 {
        (sq_log / n_log as f64).sqrt()
    } else {
        f64::NAN
    };
    Ok(out)
}
