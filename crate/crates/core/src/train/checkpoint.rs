//! Versioned little-endian binary checkpoints. The byte layout is documented
//! in `docs/checkpoint.md`.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{Vector3, Vector4};

use crate::deform::DeformParams;
use crate::error::{Error, Result};
use crate::gaussian::{Gaussian, GaussianCloud};

use super::adam::{AdamState, Group, Moments};
use super::density::DensityState;

pub const MAGIC: &[u8; 8] = b"DSPLATCK";
pub const VERSION: u32 = 1;

/// Everything needed to continue training bit-for-bit.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Completed iterations.
    pub iteration: u64,
    pub cloud: GaussianCloud,
    pub adam: AdamState,
    pub density: DensityState,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64s<'a>(&mut self, v: impl IntoIterator<Item = &'a f64>) {
        for x in v {
            self.f64(*x);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| self.f64()).collect()
    }
    fn count(&mut self, what: &str) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| Error::Checkpoint(format!("{what} {v} too large")))
    }
}

pub fn encode(ck: &Checkpoint) -> Vec<u8> {
    let cloud = &ck.cloud;
    let b = cloud.basis_count();
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.u32(VERSION);
    w.u64(cloud.len() as u64);
    w.u32(b as u32);
    w.u64(ck.iteration);
    for (g, p) in cloud.iter() {
        w.f64s(g.position.iter());
        w.f64s(g.rotation.iter());
        w.f64s(g.log_scale.iter());
        w.f64(g.opacity_logit);
        w.f64s(g.color.iter());
        w.f64s(&p.weights);
        w.f64s(&p.centers);
        w.f64s(&p.widths);
    }
    w.u64(ck.adam.step);
    for (mom, skipped) in ck.adam.moments.iter().zip(&ck.adam.skipped) {
        w.u64(*skipped);
        w.f64s(&mom.m);
        w.f64s(&mom.v);
    }
    w.f64(ck.density.extent);
    w.u32(ck.density.enabled as u32);
    w.f64s(&ck.density.grad_accum);
    for c in &ck.density.counts {
        w.u64(*c);
    }
    w.0
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let n = r.count("gaussian count")?;
    let b = r.u32()? as usize;
    if b == 0 {
        return Err(Error::Checkpoint("basis count must be positive".into()));
    }
    let iteration = r.u64()?;
    let k = crate::deform::DEFORMED_COORDS * b;
    // a Gaussian takes (14 + 3k) f64 values, reject absurd counts early
    if n.saturating_mul((14 + 3 * k) * 8) > bytes.len() {
        return Err(Error::Checkpoint(format!("count {n} does not fit in the file")));
    }
    let mut gaussians = Vec::with_capacity(n);
    let mut params = Vec::with_capacity(n);
    for _ in 0..n {
        let v = r.f64s(14)?;
        gaussians.push(Gaussian {
            position: Vector3::new(v[0], v[1], v[2]),
            rotation: Vector4::new(v[3], v[4], v[5], v[6]),
            log_scale: Vector3::new(v[7], v[8], v[9]),
            opacity_logit: v[10],
            color: Vector3::new(v[11], v[12], v[13]),
        });
        let mut p = DeformParams::identity(b);
        p.weights = r.f64s(k)?;
        p.centers = r.f64s(k)?;
        p.widths = r.f64s(k)?;
        params.push(p);
    }
    let cloud = GaussianCloud::from_parts(gaussians, params, b)?;

    let step = r.u64()?;
    let mut moments = Vec::with_capacity(Group::ALL.len());
    let mut skipped = Vec::with_capacity(Group::ALL.len());
    for g in Group::ALL {
        let len = n * g.width(b);
        skipped.push(r.u64()?);
        let m = r.f64s(len)?;
        let v = r.f64s(len)?;
        moments.push(Moments { m, v });
    }
    let extent = r.f64()?;
    let enabled = r.u32()? != 0;
    let grad_accum = r.f64s(n)?;
    let counts = (0..n).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(Checkpoint {
        iteration,
        cloud,
        adam: AdamState { step, moments, skipped },
        density: DensityState {
            grad_accum,
            counts,
            enabled,
            extent,
        },
    })
}

/// Writes to a sibling temp file, then renames over `path`.
pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = encode(ck);
    let tmp = path.with_extension("tmp");
    let write = || -> std::io::Result<()> {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)
    };
    write().map_err(|source| Error::Write {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::Load {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
    decode(&bytes).map_err(|e| Error::Load {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}
