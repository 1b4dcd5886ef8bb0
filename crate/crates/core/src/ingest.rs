//! Dataset loading and file export.
//!
//! Dataset layout:
//!
//! ```text
//! root/camera.json        fx fy cx cy width height near far depth_scale extrinsics[16]
//! root/images/000000.png  8-bit RGB
//! root/depth/000000.png   16-bit grayscale, scene depth = value * depth_scale, 0 = invalid
//! root/masks/000000.png   8-bit grayscale, >= 128 marks tissue
//! ```

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageBuffer, Luma};
use nalgebra::{Matrix4, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::CameraModel;
use crate::grid::{ensure_same_shape, BinaryMask, DepthMap, Grid, RgbImage};

/// Every `TEST_STRIDE`-th frame (0-indexed `7, 15, ...`) is held out.
pub const TEST_STRIDE: usize = 8;
pub const MASK_THRESHOLD: u8 = 128;

#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub image: RgbImage,
    pub depth: DepthMap,
    pub tissue_mask: BinaryMask,
    /// Normalized timestamp in `[0, 1]`.
    pub time: f64,
}

impl Frame {
    pub fn new(image: RgbImage, depth: DepthMap, tissue_mask: BinaryMask, time: f64) -> Result<Self> {
        ensure_same_shape(&image, &depth, "depth map")?;
        ensure_same_shape(&image, &tissue_mask, "tissue mask")?;
        if depth.as_slice().iter().any(|&d| !(d >= 0.0) || !d.is_finite()) {
            return Err(Error::InvalidInput("depth values must be finite and >= 0".into()));
        }
        Ok(Self {
            image,
            depth,
            tissue_mask,
            time,
        })
    }

    pub fn width(&self) -> usize {
        self.image.width()
    }

    pub fn height(&self) -> usize {
        self.image.height()
    }

    /// Tissue pixels carrying a usable depth value.
    pub fn valid_mask(&self) -> BinaryMask {
        self.tissue_mask.zip_map(&self.depth, |&m, &d| m && d > 0.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Train/test tag for frame `index` under the 7:1 rule.
pub fn split_for(index: usize) -> Split {
    if index % TEST_STRIDE == TEST_STRIDE - 1 {
        Split::Test
    } else {
        Split::Train
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameSequence {
    pub frames: Vec<Frame>,
    pub camera: CameraModel,
    pub split: Vec<Split>,
    pub depth_scale: f64,
}

impl FrameSequence {
    /// Builds a sequence, assigning evenly spaced times and the 7:1 split.
    pub fn new(mut frames: Vec<Frame>, camera: CameraModel, depth_scale: f64) -> Result<Self> {
        let n = frames.len();
        for (i, f) in frames.iter_mut().enumerate() {
            if f.width() != camera.width || f.height() != camera.height {
                return Err(Error::InvalidInput(format!(
                    "frame {i} is {}x{}, camera is {}x{}",
                    f.width(),
                    f.height(),
                    camera.width,
                    camera.height
                )));
            }
            f.time = normalized_time(i, n);
        }
        Ok(Self {
            frames,
            camera,
            split: (0..n).map(split_for).collect(),
            depth_scale,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn train_indices(&self) -> Vec<usize> {
        self.indices(Split::Train)
    }

    pub fn test_indices(&self) -> Vec<usize> {
        self.indices(Split::Test)
    }

    fn indices(&self, which: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.split[i] == which).collect()
    }
}

/// `i / (n - 1)`, or `0` for a single frame.
pub fn normalized_time(i: usize, n: usize) -> f64 {
    if n <= 1 {
        0.0
    } else {
        i as f64 / (n - 1) as f64
    }
}

/// `camera.json` contents.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraConfig {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub near: f64,
    pub far: f64,
    /// Scene units per raw depth count.
    pub depth_scale: f64,
    /// Row-major world-to-camera transform.
    pub extrinsics: [f64; 16],
    /// Name of the scene unit, informational.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unit: Option<String>,
}

impl CameraConfig {
    pub fn from_camera(cam: &CameraModel, depth_scale: f64, unit: Option<String>) -> Self {
        let mut extrinsics = [0.0; 16];
        for r in 0..4 {
            for c in 0..4 {
                extrinsics[r * 4 + c] = cam.world_to_camera[(r, c)];
            }
        }
        Self {
            fx: cam.fx,
            fy: cam.fy,
            cx: cam.cx,
            cy: cam.cy,
            width: cam.width,
            height: cam.height,
            near: cam.near,
            far: cam.far,
            depth_scale,
            extrinsics,
            unit,
        }
    }

    pub fn camera(&self) -> Result<CameraModel> {
        CameraModel::new(
            self.fx,
            self.fy,
            self.cx,
            self.cy,
            self.width,
            self.height,
            self.near,
            self.far,
            Matrix4::from_row_slice(&self.extrinsics),
        )
    }
}

fn load_err(path: &Path, reason: impl ToString) -> Error {
    Error::Load {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    }
}

pub fn read_camera_config(path: &Path) -> Result<CameraConfig> {
    let text = fs::read_to_string(path).map_err(|e| load_err(path, e))?;
    let cfg: CameraConfig = serde_json::from_str(&text).map_err(|e| load_err(path, e))?;
    if !(cfg.depth_scale > 0.0) {
        return Err(load_err(path, "depth_scale must be positive"));
    }
    cfg.camera().map_err(|e| load_err(path, e))?;
    Ok(cfg)
}

/// Loads `root` into a time-ordered sequence. Frames are ordered by image
/// filename and read in parallel.
pub fn load_dataset(root: &Path) -> Result<FrameSequence> {
    if !root.is_dir() {
        return Err(load_err(root, "dataset directory does not exist"));
    }
    let cfg = read_camera_config(&root.join("camera.json"))?;
    let camera = cfg.camera()?;
    let images_dir = root.join("images");
    let mut names: Vec<String> = fs::read_dir(&images_dir)
        .map_err(|e| load_err(&images_dir, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".png"))
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(load_err(&images_dir, "no PNG frames found"));
    }

    let frames = names
        .par_iter()
        .map(|name| {
            let image = load_image(&images_dir.join(name))?;
            let depth = load_depth(&root.join("depth").join(name), cfg.depth_scale)?;
            let mask = load_mask(&root.join("masks").join(name))?;
            for (what, w, h) in [
                ("depth", depth.width(), depth.height()),
                ("mask", mask.width(), mask.height()),
                ("image", image.width(), image.height()),
            ] {
                if w != camera.width || h != camera.height {
                    return Err(load_err(
                        &root.join(what).join(name),
                        format!("{what} is {w}x{h}, camera expects {}x{}", camera.width, camera.height),
                    ));
                }
            }
            Frame::new(image, depth, mask, 0.0)
        })
        .collect::<Result<Vec<_>>>()?;

    FrameSequence::new(frames, camera, cfg.depth_scale)
}

pub fn load_image(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).map_err(|e| load_err(path, e))?.to_rgb8();
    let (w, h) = img.dimensions();
    let data = img
        .pixels()
        .map(|p| [p[0] as f64 / 255.0, p[1] as f64 / 255.0, p[2] as f64 / 255.0])
        .collect();
    Grid::from_vec(w as usize, h as usize, data)
}

pub fn load_depth(path: &Path, depth_scale: f64) -> Result<DepthMap> {
    let img = image::open(path).map_err(|e| load_err(path, e))?;
    let img = match img {
        image::DynamicImage::ImageLuma16(i) => i,
        other => {
            return Err(load_err(
                path,
                format!("expected 16-bit grayscale depth, found {:?}", other.color()),
            ))
        }
    };
    let (w, h) = img.dimensions();
    let data = img.pixels().map(|p| p[0] as f64 * depth_scale).collect();
    Grid::from_vec(w as usize, h as usize, data)
}

pub fn load_mask(path: &Path) -> Result<BinaryMask> {
    let img = image::open(path).map_err(|e| load_err(path, e))?.to_luma8();
    let (w, h) = img.dimensions();
    let data = img.pixels().map(|p| p[0] >= MASK_THRESHOLD).collect();
    Grid::from_vec(w as usize, h as usize, data)
}

fn encode_err(path: &Path, e: impl ToString) -> Error {
    Error::Encode {
        path: path.to_path_buf(),
        reason: e.to_string(),
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|source| Error::Write {
                path: parent.to_path_buf(),
                source,
            })?;
        }
    }
    Ok(())
}

#[inline]
fn quantize_unit(v: f64, clamped: &mut usize) -> u8 {
    if !(0.0..=1.0).contains(&v) {
        *clamped += 1;
    }
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes an 8-bit RGB PNG. Returns the number of channel values that had to
/// be clamped into `[0, 1]`.
pub fn save_image(img: &RgbImage, path: &Path) -> Result<usize> {
    let mut clamped = 0;
    let mut buf = Vec::with_capacity(img.len() * 3);
    for px in img.as_slice() {
        for &v in px {
            buf.push(quantize_unit(v, &mut clamped));
        }
    }
    let out = image::RgbImage::from_raw(img.width() as u32, img.height() as u32, buf)
        .ok_or_else(|| encode_err(path, "buffer size mismatch"))?;
    ensure_parent(path)?;
    out.save(path).map_err(|e| encode_err(path, e))?;
    if clamped > 0 {
        log::warn!("{}: clamped {clamped} colour values", path.display());
    }
    Ok(clamped)
}

/// Writes a 16-bit PNG storing `round(depth / depth_scale)`. Returns the
/// number of values clamped into `[0, 65535]`.
pub fn save_depth(depth: &DepthMap, depth_scale: f64, path: &Path) -> Result<usize> {
    let mut clamped = 0;
    let buf: Vec<u16> = depth
        .as_slice()
        .iter()
        .map(|&d| {
            let q = (d / depth_scale).round();
            if !(0.0..=65535.0).contains(&q) {
                clamped += 1;
            }
            if q.is_nan() {
                0
            } else {
                q.clamp(0.0, 65535.0) as u16
            }
        })
        .collect();
    let out: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_raw(depth.width() as u32, depth.height() as u32, buf)
        .ok_or_else(|| encode_err(path, "buffer size mismatch"))?;
    ensure_parent(path)?;
    out.save(path).map_err(|e| encode_err(path, e))?;
    if clamped > 0 {
        log::warn!("{}: clamped {clamped} depth values", path.display());
    }
    Ok(clamped)
}

/// Writes a binary mask as an 8-bit PNG (255 = set).
pub fn save_mask(mask: &BinaryMask, path: &Path) -> Result<()> {
    let buf = mask.as_slice().iter().map(|&b| if b { 255 } else { 0 }).collect();
    let out = GrayImage::from_raw(mask.width() as u32, mask.height() as u32, buf)
        .ok_or_else(|| encode_err(path, "buffer size mismatch"))?;
    ensure_parent(path)?;
    out.save(path).map_err(|e| encode_err(path, e))
}

/// Writes a sequence in the dataset layout.
pub fn write_dataset(seq: &FrameSequence, root: &Path, unit: Option<String>) -> Result<()> {
    fs::create_dir_all(root).map_err(|source| Error::Write {
        path: root.to_path_buf(),
        source,
    })?;
    let cfg = CameraConfig::from_camera(&seq.camera, seq.depth_scale, unit);
    let cam_path = root.join("camera.json");
    let text = serde_json::to_string_pretty(&cfg).expect("camera config serializes");
    fs::write(&cam_path, text).map_err(|source| Error::Write { path: cam_path, source })?;
    seq.frames.par_iter().enumerate().try_for_each(|(i, f)| -> Result<()> {
        let name = frame_file_name(i);
        save_image(&f.image, &root.join("images").join(&name))?;
        save_depth(&f.depth, seq.depth_scale, &root.join("depth").join(&name))?;
        save_mask(&f.tissue_mask, &root.join("masks").join(&name))
    })
}

pub fn frame_file_name(index: usize) -> String {
    format!("{index:06}.png")
}

/// A coloured point as stored in PLY files.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlyPoint {
    pub position: Vector3<f32>,
    pub color: [u8; 3],
}

impl PlyPoint {
    pub fn new(position: &Vector3<f64>, color: &[f64; 3]) -> Self {
        Self {
            position: position.map(|v| v as f32),
            color: color.map(|c| (c.clamp(0.0, 1.0) * 255.0).round() as u8),
        }
    }
}

const PLY_PROPERTIES: [&str; 6] = [
    "property float x",
    "property float y",
    "property float z",
    "property uchar red",
    "property uchar green",
    "property uchar blue",
];

/// Binary little-endian PLY with `x y z` float32 and `red green blue` uint8.
pub fn write_ply<W: Write>(mut w: W, points: &[PlyPoint]) -> std::io::Result<()> {
    writeln!(w, "ply")?;
    writeln!(w, "format binary_little_endian 1.0")?;
    writeln!(w, "element vertex {}", points.len())?;
    for p in PLY_PROPERTIES {
        writeln!(w, "{p}")?;
    }
    writeln!(w, "end_header")?;
    for p in points {
        for v in p.position.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&p.color)?;
    }
    w.flush()
}

pub fn export_ply(points: &[PlyPoint], path: &Path) -> Result<()> {
    ensure_parent(path)?;
    let f = fs::File::create(path).map_err(|source| Error::Write {
        path: path.to_path_buf(),
        source,
    })?;
    write_ply(BufWriter::new(f), points).map_err(|source| Error::Write {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_ply<R: Read>(r: R, path: &Path) -> Result<Vec<PlyPoint>> {
    let mut r = BufReader::new(r);
    let mut line = String::new();
    let mut header = Vec::new();
    loop {
        line.clear();
        if r.read_line(&mut line).map_err(|e| load_err(path, e))? == 0 {
            return Err(load_err(path, "unterminated PLY header"));
        }
        let l = line.trim_end().to_string();
        if l == "end_header" {
            break;
        }
        header.push(l);
    }
    if header.first().map(String::as_str) != Some("ply")
        || header.get(1).map(String::as_str) != Some("format binary_little_endian 1.0")
    {
        return Err(load_err(path, "not a binary little-endian PLY"));
    }
    let count: usize = header
        .get(2)
        .and_then(|l| l.strip_prefix("element vertex "))
        .and_then(|n| n.parse().ok())
        .ok_or_else(|| load_err(path, "missing vertex count"))?;
    if header[3..] != PLY_PROPERTIES {
        return Err(load_err(path, "unsupported vertex properties"));
    }
    let mut buf = [0u8; 15];
    let mut points = Vec::with_capacity(count);
    for _ in 0..count {
        r.read_exact(&mut buf).map_err(|e| load_err(path, e))?;
        let f = |i: usize| f32::from_le_bytes(buf[i..i + 4].try_into().unwrap());
        points.push(PlyPoint {
            position: Vector3::new(f(0), f(4), f(8)),
            color: [buf[12], buf[13], buf[14]],
        });
    }
    Ok(points)
}

pub fn load_ply(path: &Path) -> Result<Vec<PlyPoint>> {
    let f = fs::File::open(path).map_err(|e| load_err(path, e))?;
    read_ply(f, path)
}

/// Resolves `path` against `base` unless it is already absolute.
pub fn resolve(base: &Path, path: &Path) -> PathBuf {
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        base.join(path)
    }
}
