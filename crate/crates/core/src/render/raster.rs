//! Tiled forward/backward compositing and the untiled reference renderer.
//!
//! Per pixel, primitives are visited in depth order with
//! `α = min(0.99, o·G(x))`; contributions with `α < 1/255` are skipped and
//! accumulation stops once the transmittance falls below `1e-4`.
//!
//! A primitive is listed in a tile only if some pixel centre of the tile can
//! reach `α ≥ 1/255`, so the tiled result is bit-identical to visiting every
//! primitive at every pixel.

use nalgebra::{Matrix2, Vector2, Vector3};
use rayon::prelude::*;

use super::{max_eigenvalue, RenderOutput, SplatPrimitive};
use crate::error::{Error, Result};
use crate::gaussian::CameraModel;
use crate::grid::Grid;

pub const TILE_SIZE: usize = 16;
pub const ALPHA_MAX: f64 = 0.99;
pub const ALPHA_MIN: f64 = 1.0 / 255.0;
pub const TRANSMITTANCE_MIN: f64 = 1e-4;

/// Everything the backward pass needs from one forward call.
#[derive(Clone, Debug)]
pub struct CompositingState {
    width: usize,
    height: usize,
    primitives: Vec<SplatPrimitive>,
    conics: Vec<[f64; 3]>,
    tiles_x: usize,
    tile_lists: Vec<Vec<u32>>,
    final_transmittance: Vec<f64>,
    /// Number of tile-list entries visited at each pixel.
    visited: Vec<u32>,
}

impl CompositingState {
    pub fn primitives(&self) -> &[SplatPrimitive] {
        &self.primitives
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }
}

/// Gradients w.r.t. one primitive, aligned with the sorted primitive list.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SplatGrad {
    pub mean2d: Vector2<f64>,
    /// Gradient w.r.t. `(a, b, c)` of the covariance `[[a, b], [b, c]]`.
    pub cov2d: Vector3<f64>,
    pub opacity: f64,
    pub color: Vector3<f64>,
    pub depth_z: f64,
    pub source_index: usize,
}

impl SplatGrad {
    /// Covariance gradient as a full symmetric matrix (off-diagonals halved).
    pub fn cov2d_matrix(&self) -> Matrix2<f64> {
        let half = 0.5 * self.cov2d.y;
        Matrix2::new(self.cov2d.x, half, half, self.cov2d.z)
    }

    fn accumulate(&mut self, other: &SplatGrad) {
        self.mean2d += other.mean2d;
        self.cov2d += other.cov2d;
        self.opacity += other.opacity;
        self.color += other.color;
        self.depth_z += other.depth_z;
    }
}

#[inline]
fn conic_of(cov: &Matrix2<f64>) -> [f64; 3] {
    let (a, b, c) = (cov[(0, 0)], cov[(0, 1)], cov[(1, 1)]);
    let det = a * c - b * b;
    let inv = 1.0 / det;
    [c * inv, -b * inv, a * inv]
}

/// Per-pixel evaluation shared by every path so they agree bit for bit.
#[derive(Clone, Copy)]
struct Hit {
    alpha: f64,
    gauss: f64,
    clamped: bool,
    dx: f64,
    dy: f64,
}

#[inline]
fn hit(prim: &SplatPrimitive, conic: &[f64; 3], px: f64, py: f64) -> Option<Hit> {
    let dx = px - prim.mean2d.x;
    let dy = py - prim.mean2d.y;
    let power = -0.5 * (conic[0] * dx * dx + conic[2] * dy * dy) - conic[1] * dx * dy;
    if power > 0.0 {
        return None;
    }
    let gauss = power.exp();
    let raw = prim.opacity * gauss;
    let clamped = raw > ALPHA_MAX;
    let alpha = if clamped { ALPHA_MAX } else { raw };
    if alpha < ALPHA_MIN {
        return None;
    }
    Some(Hit {
        alpha,
        gauss,
        clamped,
        dx,
        dy,
    })
}

/// Pixel-index bounding box outside which the primitive cannot reach
/// `ALPHA_MIN`, or `None` if it never can.
fn pixel_bounds(prim: &SplatPrimitive, width: usize, height: usize) -> Option<[usize; 4]> {
    let o = prim.opacity;
    if !(o >= ALPHA_MIN) {
        return None;
    }
    let ln = (o / ALPHA_MIN).ln().max(0.0);
    let r = (2.0 * max_eigenvalue(&prim.cov2d) * ln).sqrt() + 1.0;
    let x0 = (prim.mean2d.x - r - 0.5).floor();
    let x1 = (prim.mean2d.x + r - 0.5).ceil();
    let y0 = (prim.mean2d.y - r - 0.5).floor();
    let y1 = (prim.mean2d.y + r - 0.5).ceil();
    if x1 < 0.0 || y1 < 0.0 || x0 > (width - 1) as f64 || y0 > (height - 1) as f64 {
        return None;
    }
    let clampi = |v: f64, hi: usize| v.max(0.0).min(hi as f64) as usize;
    Some([
        clampi(x0, width - 1),
        clampi(x1, width - 1),
        clampi(y0, height - 1),
        clampi(y1, height - 1),
    ])
}

struct TilePixels {
    color: Vec<[f64; 3]>,
    depth: Vec<f64>,
    transmittance: Vec<f64>,
    visited: Vec<u32>,
}

/// Tiled forward compositing. `primitives` must already be depth-sorted.
pub fn rasterize(primitives: &[SplatPrimitive], cam: &CameraModel) -> RenderOutput {
    let (width, height) = (cam.width, cam.height);
    let tiles_x = width.div_ceil(TILE_SIZE);
    let tiles_y = height.div_ceil(TILE_SIZE);
    let conics: Vec<[f64; 3]> = primitives.iter().map(|p| conic_of(&p.cov2d)).collect();

    let mut tile_lists = vec![Vec::<u32>::new(); tiles_x * tiles_y];
    for (k, p) in primitives.iter().enumerate() {
        let Some([x0, x1, y0, y1]) = pixel_bounds(p, width, height) else {
            continue;
        };
        for ty in y0 / TILE_SIZE..=y1 / TILE_SIZE {
            for tx in x0 / TILE_SIZE..=x1 / TILE_SIZE {
                tile_lists[ty * tiles_x + tx].push(k as u32);
            }
        }
    }

    let tiles: Vec<TilePixels> = (0..tiles_x * tiles_y)
        .into_par_iter()
        .map(|t| {
            let (tx, ty) = (t % tiles_x, t / tiles_x);
            let list = &tile_lists[t];
            let xs = tx * TILE_SIZE..((tx + 1) * TILE_SIZE).min(width);
            let ys = ty * TILE_SIZE..((ty + 1) * TILE_SIZE).min(height);
            let n = xs.len() * ys.len();
            let mut out = TilePixels {
                color: Vec::with_capacity(n),
                depth: Vec::with_capacity(n),
                transmittance: Vec::with_capacity(n),
                visited: Vec::with_capacity(n),
            };
            for y in ys {
                for x in xs.clone() {
                    let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                    let mut trans = 1.0;
                    let mut c = [0.0; 3];
                    let mut d = 0.0;
                    let mut visited = 0u32;
                    for (pos, &k) in list.iter().enumerate() {
                        let prim = &primitives[k as usize];
                        let Some(h) = hit(prim, &conics[k as usize], px, py) else {
                            continue;
                        };
                        let w = h.alpha * trans;
                        c[0] += prim.color.x * w;
                        c[1] += prim.color.y * w;
                        c[2] += prim.color.z * w;
                        d += prim.depth_z * w;
                        trans *= 1.0 - h.alpha;
                        visited = pos as u32 + 1;
                        if trans < TRANSMITTANCE_MIN {
                            break;
                        }
                    }
                    out.color.push(c);
                    out.depth.push(d);
                    out.transmittance.push(trans);
                    out.visited.push(visited);
                }
            }
            out
        })
        .collect();

    let mut color = Grid::filled(width, height, [0.0; 3]);
    let mut depth = Grid::filled(width, height, 0.0);
    let mut alpha = Grid::filled(width, height, 0.0);
    let mut final_transmittance = vec![1.0; width * height];
    let mut visited = vec![0u32; width * height];
    for (t, tile) in tiles.into_iter().enumerate() {
        let (tx, ty) = (t % tiles_x, t / tiles_x);
        let mut i = 0;
        for y in ty * TILE_SIZE..((ty + 1) * TILE_SIZE).min(height) {
            for x in tx * TILE_SIZE..((tx + 1) * TILE_SIZE).min(width) {
                let idx = y * width + x;
                color.as_mut_slice()[idx] = tile.color[i];
                depth.as_mut_slice()[idx] = tile.depth[i];
                alpha.as_mut_slice()[idx] = 1.0 - tile.transmittance[i];
                final_transmittance[idx] = tile.transmittance[i];
                visited[idx] = tile.visited[i];
                i += 1;
            }
        }
    }

    RenderOutput {
        color,
        depth,
        alpha,
        state: CompositingState {
            width,
            height,
            primitives: primitives.to_vec(),
            conics,
            tiles_x,
            tile_lists,
            final_transmittance,
            visited,
        },
    }
}

/// Exact gradients of the compositing w.r.t. every primitive field, given
/// upstream gradients of the colour and depth images.
pub fn rasterize_backward(
    state: &CompositingState,
    grad_color: &Grid<[f64; 3]>,
    grad_depth: &Grid<f64>,
) -> Result<Vec<SplatGrad>> {
    let (width, height) = (state.width, state.height);
    for (name, w, h) in [
        ("colour gradient", grad_color.width(), grad_color.height()),
        ("depth gradient", grad_depth.width(), grad_depth.height()),
    ] {
        if w != width || h != height {
            return Err(Error::InvalidState(format!(
                "{name} is {w}x{h}, render state is {width}x{height}"
            )));
        }
    }
    if state.conics.len() != state.primitives.len() || state.final_transmittance.len() != width * height {
        return Err(Error::InvalidState("inconsistent compositing state".into()));
    }

    let prims = &state.primitives;
    let conics = &state.conics;
    let tiles_x = state.tiles_x;

    let partials: Vec<Vec<SplatGrad>> = state
        .tile_lists
        .par_iter()
        .enumerate()
        .map(|(t, list)| {
            let mut local = vec![SplatGrad::default(); list.len()];
            if list.is_empty() {
                return local;
            }
            let (tx, ty) = (t % tiles_x, t / tiles_x);
            for y in ty * TILE_SIZE..((ty + 1) * TILE_SIZE).min(height) {
                for x in tx * TILE_SIZE..((tx + 1) * TILE_SIZE).min(width) {
                    let idx = y * width + x;
                    let gc = Vector3::from(grad_color.as_slice()[idx]);
                    let gd = grad_depth.as_slice()[idx];
                    if gc == Vector3::zeros() && gd == 0.0 {
                        continue;
                    }
                    let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                    let mut trans = state.final_transmittance[idx];
                    // colour / depth composited behind the current primitive
                    let mut behind_c = Vector3::zeros();
                    let mut behind_d = 0.0;
                    for pos in (0..state.visited[idx] as usize).rev() {
                        let k = list[pos] as usize;
                        let prim = &prims[k];
                        let Some(h) = hit(prim, &conics[k], px, py) else {
                            continue;
                        };
                        trans /= 1.0 - h.alpha;
                        let w = h.alpha * trans;
                        let g = &mut local[pos];
                        g.color += gc * w;
                        g.depth_z += gd * w;
                        let d_alpha = trans * ((prim.color - behind_c).dot(&gc) + (prim.depth_z - behind_d) * gd);
                        behind_c = prim.color * h.alpha + behind_c * (1.0 - h.alpha);
                        behind_d = prim.depth_z * h.alpha + behind_d * (1.0 - h.alpha);
                        if h.clamped {
                            continue;
                        }
                        g.opacity += d_alpha * h.gauss;
                        let d_power = d_alpha * prim.opacity * h.gauss;
                        let c = &conics[k];
                        // power = -½(A dx² + C dy²) - B dx dy, d = pixel - mean
                        g.mean2d.x += d_power * (c[0] * h.dx + c[1] * h.dy);
                        g.mean2d.y += d_power * (c[1] * h.dx + c[2] * h.dy);
                        let d_conic = Vector3::new(
                            -0.5 * h.dx * h.dx * d_power,
                            -h.dx * h.dy * d_power,
                            -0.5 * h.dy * h.dy * d_power,
                        );
                        // accumulate conic grads in the cov2d slot, converted below
                        g.cov2d += d_conic;
                    }
                }
            }
            local
        })
        .collect();

    let mut conic_grads = vec![SplatGrad::default(); prims.len()];
    for (list, local) in state.tile_lists.iter().zip(partials.iter()) {
        for (&k, g) in list.iter().zip(local.iter()) {
            conic_grads[k as usize].accumulate(g);
        }
    }

    Ok(conic_grads
        .into_iter()
        .zip(prims.iter().zip(conics.iter()))
        .map(|(mut g, (prim, conic))| {
            g.source_index = prim.source_index;
            g.cov2d = conic_to_cov_grad(conic, &g.cov2d);
            g
        })
        .collect())
}

/// Pulls a gradient w.r.t. conic parameters `(A, B, C)` back to the covariance
/// parameters `(a, b, c)`.
fn conic_to_cov_grad(conic: &[f64; 3], d_conic: &Vector3<f64>) -> Vector3<f64> {
    let inv = Matrix2::new(conic[0], conic[1], conic[1], conic[2]);
    let half = 0.5 * d_conic.y;
    let g = Matrix2::new(d_conic.x, half, half, d_conic.z);
    let d_cov = -(inv * g * inv);
    Vector3::new(d_cov[(0, 0)], d_cov[(0, 1)] + d_cov[(1, 0)], d_cov[(1, 1)])
}

/// Naive compositing over every primitive at every pixel without early
/// termination. Used as the ground truth for [`rasterize`].
pub fn reference_render(primitives: &[SplatPrimitive], cam: &CameraModel) -> RenderOutput {
    let (width, height) = (cam.width, cam.height);
    let conics: Vec<[f64; 3]> = primitives.iter().map(|p| conic_of(&p.cov2d)).collect();
    let mut color = Grid::filled(width, height, [0.0; 3]);
    let mut depth = Grid::filled(width, height, 0.0);
    let mut alpha = Grid::filled(width, height, 0.0);
    let mut final_transmittance = vec![1.0; width * height];
    let mut visited = vec![0u32; width * height];
    for y in 0..height {
        for x in 0..width {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut trans = 1.0;
            let mut c = [0.0; 3];
            let mut d = 0.0;
            let mut last = 0u32;
            for (k, prim) in primitives.iter().enumerate() {
                let Some(h) = hit(prim, &conics[k], px, py) else {
                    continue;
                };
                let w = h.alpha * trans;
                c[0] += prim.color.x * w;
                c[1] += prim.color.y * w;
                c[2] += prim.color.z * w;
                d += prim.depth_z * w;
                trans *= 1.0 - h.alpha;
                last = k as u32 + 1;
            }
            let idx = y * width + x;
            color.as_mut_slice()[idx] = c;
            depth.as_mut_slice()[idx] = d;
            alpha.as_mut_slice()[idx] = 1.0 - trans;
            final_transmittance[idx] = trans;
            visited[idx] = last;
        }
    }
    // every tile lists every primitive, so `rasterize_backward` accepts this state
    let tiles_x = width.div_ceil(TILE_SIZE);
    let tiles_y = height.div_ceil(TILE_SIZE);
    let all: Vec<u32> = (0..primitives.len() as u32).collect();
    RenderOutput {
        color,
        depth,
        alpha,
        state: CompositingState {
            width,
            height,
            primitives: primitives.to_vec(),
            conics,
            tiles_x,
            tile_lists: vec![all; tiles_x * tiles_y],
            final_transmittance,
            visited,
        },
    }
}
