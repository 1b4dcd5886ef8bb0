//! Synthetic deforming scenes rendered with the reference renderer.
//!
//! Tissue is one or two textured sheets of Gaussians (a back wall and an
//! optional raised patch in front of it) placed with a low-discrepancy
//! sequence. Positions follow analytic sinusoidal motion. A disk-shaped "tool"
//! can sweep across the image: it is painted into the image and stereo depth
//! and removed from the tissue mask.

use std::f64::consts::PI;
use std::path::Path;

use nalgebra::{Vector3, Vector4};
use rand::SeedableRng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::deform::DeformedAttributes;
use crate::error::{Error, Result};
use crate::gaussian::{CameraModel, Gaussian};
use crate::grid::{BinaryMask, DepthMap, Grid, RgbImage};
use crate::ingest::{frame_file_name, save_depth, write_dataset, Frame, FrameSequence};
use crate::render::{cull_and_project, reference_render};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OccluderSpec {
    /// Disk radius in pixels.
    pub radius: f64,
    /// Centre at `t = 0`, pixels.
    pub start: [f64; 2],
    /// Centre at `t = 1`, pixels.
    pub end: [f64; 2],
    /// Depth painted into the stereo map, scene units.
    pub depth: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub count: usize,
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    pub focal: f64,
    /// Distance of the back sheet, scene units.
    pub depth: f64,
    /// How far the sheets extend past the view frustum (1 = exactly the edges).
    pub margin: f64,
    /// Static surface relief amplitude, scene units.
    pub relief: f64,
    /// Slant of the sheet: depth gained over the view's width measured at the
    /// base depth, scene units. Perspective widens the range actually seen.
    pub tilt: f64,
    pub motion_amplitude: f64,
    /// 1 = single sheet; 2 adds a front patch.
    pub layers: usize,
    /// Front patch distance in front of the back sheet.
    pub layer_gap: f64,
    pub occluder: Option<OccluderSpec>,
    /// Standard deviation of Gaussian noise added to the stereo depth.
    pub noise_sigma: f64,
    pub seed: u64,
    pub depth_scale: f64,
    pub unit: String,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            count: 200,
            width: 64,
            height: 64,
            frames: 24,
            focal: 80.0,
            depth: 50.0,
            margin: 1.15,
            relief: 2.0,
            tilt: 0.0,
            motion_amplitude: 1.5,
            layers: 1,
            layer_gap: 8.0,
            occluder: None,
            noise_sigma: 0.0,
            seed: 0,
            depth_scale: 0.01,
            unit: "mm".into(),
        }
    }
}

impl SyntheticSpec {
    pub fn camera(&self) -> Result<CameraModel> {
        CameraModel::centered(self.focal, self.width, self.height, 0.1 * self.depth, 10.0 * self.depth)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidInput(format!("synthetic spec: {m}")));
        if self.count == 0 || self.frames == 0 {
            return bad("count and frames must be positive");
        }
        if !(1..=2).contains(&self.layers) {
            return bad("layers must be 1 or 2");
        }
        if self.layers == 2 && !(self.layer_gap > 0.0 && self.layer_gap < 0.5 * self.depth) {
            return bad("layer_gap must lie in (0, depth / 2)");
        }
        if !(self.depth > 0.0 && self.margin >= 1.0 && self.tilt.abs() < self.depth) {
            return bad("need depth > 0, margin >= 1 and |tilt| < depth");
        }
        // nearest point of the slanted sheet, see `generate_synthetic`
        let reach = 1.0 / (1.0 - 0.5 * self.tilt.abs() / self.depth);
        let nearest = self.depth - self.margin * reach * 0.5 * self.tilt.abs() - self.relief.abs();
        if !(nearest > 0.1 * self.depth) {
            return bad("tilt and relief would put the surface in front of the near plane");
        }
        if !(self.noise_sigma >= 0.0) || !(self.depth_scale > 0.0) {
            return bad("noise_sigma must be >= 0 and depth_scale > 0");
        }
        Ok(())
    }
}

/// Generated scene with its ground truth.
#[derive(Clone, Debug)]
pub struct SyntheticScene {
    pub spec: SyntheticSpec,
    /// Generating Gaussians in their `t = 0` rest state.
    pub generator: Vec<Gaussian>,
    /// Which layer each generator belongs to (0 = back).
    pub layer: Vec<usize>,
    pub sequence: FrameSequence,
    /// Noise-free rendered tissue depth (tool not painted).
    pub gt_depth: Vec<DepthMap>,
    /// Tissue colour without the tool.
    pub gt_images: Vec<RgbImage>,
    /// Pixels covered by the tool.
    pub occlusion: Vec<BinaryMask>,
}

const PLASTIC: f64 = 1.324_717_957_244_746;

/// Point `i` of the R2 low-discrepancy sequence in `[0, 1)²`.
fn r2(i: usize) -> (f64, f64) {
    let a1 = 1.0 / PLASTIC;
    let a2 = 1.0 / (PLASTIC * PLASTIC);
    ((0.5 + a1 * i as f64).fract(), (0.5 + a2 * i as f64).fract())
}

struct Layer {
    z: f64,
    half_x: f64,
    half_y: f64,
    count: usize,
    tint: [f64; 3],
}

/// Analytic displacement of a generator at time `t`.
fn motion(spec: &SyntheticSpec, rest: &Vector3<f64>, half: (f64, f64), layer: usize, t: f64) -> Vector3<f64> {
    let a = spec.motion_amplitude;
    let (u, v) = (rest.x / half.0, rest.y / half.1);
    let envelope = 0.5 + 0.5 * (0.5 * PI * u).cos() * (0.5 * PI * v).cos();
    let w = 2.0 * PI * t;
    let mut d = Vector3::new(
        0.3 * a * (w + 0.7 * u).sin() - 0.3 * a * (0.7 * u).sin(),
        0.2 * a * (w + 1.3 * v).sin() - 0.2 * a * (1.3 * v).sin(),
        a * w.sin() * envelope,
    );
    if layer == 1 {
        d.x += 0.5 * a * w.sin();
    }
    d
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticScene> {
    spec.validate()?;
    let cam = spec.camera()?;
    // view half-width per unit depth
    let kx = (spec.width as f64 / 2.0) / spec.focal;
    let ky = (spec.height as f64 / 2.0) / spec.focal;
    // the far side of a slanted sheet meets the frustum edge further out
    let reach = 1.0 / (1.0 - 0.5 * spec.tilt.abs() / spec.depth);
    let half_x = spec.margin * reach * spec.depth * kx;
    let half_y = spec.margin * reach * spec.depth * ky;
    let slope = 0.5 * spec.tilt / (spec.depth * kx);

    let mut layers = Vec::new();
    let front = if spec.layers == 2 { spec.count / 4 } else { 0 };
    layers.push(Layer {
        z: spec.depth,
        half_x,
        half_y,
        count: spec.count - front,
        tint: [1.0, 1.0, 1.0],
    });
    if front > 0 {
        let z = spec.depth - spec.layer_gap;
        // centre 40% of the view
        let fx = 0.4 * z * (spec.width as f64 / 2.0) / spec.focal;
        let fy = 0.4 * z * (spec.height as f64 / 2.0) / spec.focal;
        layers.push(Layer {
            z,
            half_x: fx,
            half_y: fy,
            count: front,
            tint: [1.2, 0.7, 0.75],
        });
    }

    let mut generator = Vec::with_capacity(spec.count);
    let mut layer_of = Vec::with_capacity(spec.count);
    let mut halves = Vec::with_capacity(spec.count);
    for (li, l) in layers.iter().enumerate() {
        let spacing = ((4.0 * l.half_x * l.half_y) / l.count as f64).sqrt();
        let sigma = 0.75 * spacing;
        for i in 0..l.count {
            let (a, b) = r2(i);
            let x = (2.0 * a - 1.0) * l.half_x;
            let y = (2.0 * b - 1.0) * l.half_y;
            let relief = if li == 0 {
                spec.relief * (PI * x / l.half_x).sin() * (0.5 * PI * y / l.half_y).cos()
            } else {
                0.3 * spec.relief * (PI * x / l.half_x).cos()
            };
            let (u, v) = (x / half_x, y / half_y);
            let base = [
                0.5 + 0.3 * (2.0 * PI * u + 0.3).sin(),
                0.5 + 0.3 * (1.5 * PI * v).cos(),
                0.45 + 0.25 * (PI * (u + v)).sin(),
            ];
            let color = Vector3::new(
                (base[0] * l.tint[0]).clamp(0.02, 0.98),
                (base[1] * l.tint[1]).clamp(0.02, 0.98),
                (base[2] * l.tint[2]).clamp(0.02, 0.98),
            );
            generator.push(Gaussian {
                position: Vector3::new(x, y, l.z + relief + slope * x),
                rotation: Vector4::new(1.0, 0.0, 0.0, 0.0),
                log_scale: Vector3::new(sigma.ln(), sigma.ln(), (0.3 * sigma).ln()),
                opacity_logit: crate::gaussian::logit(0.95),
                color,
            });
            layer_of.push(li);
            halves.push((half_x, half_y));
        }
    }

    let mut rng = rand::rngs::StdRng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise_sigma.max(0.0)).expect("valid normal");

    let mut frames = Vec::with_capacity(spec.frames);
    let mut gt_depth = Vec::with_capacity(spec.frames);
    let mut gt_images = Vec::with_capacity(spec.frames);
    let mut occlusion = Vec::with_capacity(spec.frames);
    for fi in 0..spec.frames {
        let t = crate::ingest::normalized_time(fi, spec.frames);
        let attrs = DeformedAttributes {
            time: t,
            positions: generator
                .iter()
                .zip(&layer_of)
                .zip(&halves)
                .map(|((g, &l), &h)| g.position + motion(spec, &g.position, h, l, t))
                .collect(),
            raw_rotations: generator.iter().map(|g| g.rotation).collect(),
            rotations: generator.iter().map(|g| g.rotation).collect(),
            log_scales: generator.iter().map(|g| g.log_scale).collect(),
            scales: generator.iter().map(|g| g.scale()).collect(),
            opacities: generator.iter().map(|g| g.opacity()).collect(),
            colors: generator.iter().map(|g| g.color).collect(),
        };
        let render = reference_render(&cull_and_project(&attrs, &cam), &cam);
        let tissue_img = render.color.map(|c| c.map(|v| v.clamp(0.0, 1.0)));
        let tissue_depth = render.depth.clone();

        let occluded = match &spec.occluder {
            Some(o) => {
                let cx = o.start[0] + (o.end[0] - o.start[0]) * t;
                let cy = o.start[1] + (o.end[1] - o.start[1]) * t;
                Grid::from_fn(spec.width, spec.height, |x, y| {
                    let dx = x as f64 + 0.5 - cx;
                    let dy = y as f64 + 0.5 - cy;
                    dx * dx + dy * dy < o.radius * o.radius
                })
            }
            None => Grid::filled(spec.width, spec.height, false),
        };
        let tool_depth = spec.occluder.as_ref().map_or(0.0, |o| o.depth);

        let mut image = tissue_img.clone();
        let mut depth = tissue_depth.clone();
        for i in 0..image.len() {
            if occluded.as_slice()[i] {
                let shade = 0.55 + 0.1 * ((i % spec.width) as f64 / spec.width as f64);
                image.as_mut_slice()[i] = [shade, shade, shade + 0.05];
                depth.as_mut_slice()[i] = tool_depth;
            } else if spec.noise_sigma > 0.0 && depth.as_slice()[i] > 0.0 {
                let d = depth.as_slice()[i] + noise.sample(&mut rng);
                depth.as_mut_slice()[i] = d.max(spec.depth_scale);
            }
        }
        let tissue_mask = occluded.map(|&o| !o);
        frames.push(Frame::new(image, depth, tissue_mask, t)?);
        gt_depth.push(tissue_depth);
        gt_images.push(tissue_img);
        occlusion.push(occluded);
    }

    Ok(SyntheticScene {
        spec: spec.clone(),
        generator,
        layer: layer_of,
        sequence: FrameSequence::new(frames, cam, spec.depth_scale)?,
        gt_depth,
        gt_images,
        occlusion,
    })
}

/// Writes the dataset layout plus `gt_depth/` and `synthetic.json`.
pub fn write_synthetic(scene: &SyntheticScene, root: &Path) -> Result<()> {
    write_dataset(&scene.sequence, root, Some(scene.spec.unit.clone()))?;
    for (i, d) in scene.gt_depth.iter().enumerate() {
        save_depth(
            d,
            scene.spec.depth_scale,
            &root.join("gt_depth").join(frame_file_name(i)),
        )?;
    }
    let path = root.join("synthetic.json");
    let text = serde_json::to_string_pretty(&scene.spec).expect("spec serializes");
    std::fs::write(&path, text).map_err(|source| Error::Write { path, source })
}
