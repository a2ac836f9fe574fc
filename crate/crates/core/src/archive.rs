//! Framed binary time series of parcel (and optionally carrier) state.
//!
//! Layout, little-endian: magic `ELGN`, `u16` version, `u32` length plus
//! metadata JSON, `u32` frame count, then per frame `f64` time, `u32` parcel
//! count, per parcel `u32` orig_id, `f64 x2` position, `f64 x2` velocity,
//! `f64` diameter, `u8` alive, and finally a `u8` Eulerian flag followed by
//! `u32` cells and `5 x cells` f64 when set.

use crate::error::{Error, Result};
use crate::mesh::graph::N_STATE;
use crate::parcel::Frame;
use crate::geom::Vec2;
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"ELGN";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchiveMeta {
    pub v_in: f64,
    pub u_mag: f64,
    pub theta: f64,
    pub seed: u64,
    /// `reference`, `M0` or `ELGIN`.
    pub variant: String,
    /// Parcels whose orig_id is below this value form the tracked subset.
    #[serde(default)]
    pub tracked: u32,
    /// Free-form producer details (flow parameters, config).
    #[serde(default)]
    pub extra: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutArchive {
    pub meta: ArchiveMeta,
    pub frames: Vec<Frame>,
}

impl RolloutArchive {
    pub fn new(meta: ArchiveMeta) -> Self {
        Self { meta, frames: Vec::new() }
    }

    pub fn times(&self) -> Vec<f64> {
        self.frames.iter().map(|f| f.time).collect()
    }

    /// Frame times strictly increasing, constant parcel count, and dead
    /// parcels never revived.
    pub fn validate(&self) -> Result<()> {
        for w in self.frames.windows(2) {
            let (a, b) = (&w[0], &w[1]);
            if !(b.time > a.time) {
                return Err(Error::Data(format!("frame times not increasing at t = {}", b.time)));
            }
            if a.len() != b.len() {
                return Err(Error::Data(format!("parcel count changes at t = {}", b.time)));
            }
            if a.orig_id != b.orig_id {
                return Err(Error::Data(format!("parcel ordering changes at t = {}", b.time)));
            }
            if a.alive.iter().zip(&b.alive).any(|(&x, &y)| !x && y) {
                return Err(Error::Data(format!("dead parcel revived at t = {}", b.time)));
            }
        }
        for f in &self.frames {
            if f.position.len() != f.len() || f.velocity.len() != f.len() || f.diameter.len() != f.len() || f.alive.len() != f.len() {
                return Err(Error::Shape("frame arrays differ in length".into()));
            }
        }
        Ok(())
    }

    /// Indices of parcels in the tracked subset.
    pub fn tracked_indices(&self) -> Vec<usize> {
        match self.frames.first() {
            Some(f) => (0..f.len()).filter(|&i| f.orig_id[i] < self.meta.tracked).collect(),
            None => Vec::new(),
        }
    }

    /// Copy restricted to the given parcel indices.
    pub fn subset(&self, idx: &[usize]) -> Self {
        let frames = self
            .frames
            .iter()
            .map(|f| Frame {
                time: f.time,
                orig_id: idx.iter().map(|&i| f.orig_id[i]).collect(),
                position: idx.iter().map(|&i| f.position[i]).collect(),
                velocity: idx.iter().map(|&i| f.velocity[i]).collect(),
                diameter: idx.iter().map(|&i| f.diameter[i]).collect(),
                alive: idx.iter().map(|&i| f.alive[i]).collect(),
                eulerian: f.eulerian.clone(),
            })
            .collect();
        Self {
            meta: self.meta.clone(),
            frames,
        }
    }

    pub fn write<W: Write>(&self, w: &mut W) -> Result<()> {
        self.validate()?;
        w.write_all(MAGIC)?;
        w.write_u16::<LittleEndian>(VERSION)?;
        let meta = serde_json::to_vec(&self.meta)?;
        w.write_u32::<LittleEndian>(meta.len() as u32)?;
        w.write_all(&meta)?;
        w.write_u32::<LittleEndian>(self.frames.len() as u32)?;
        for f in &self.frames {
            w.write_f64::<LittleEndian>(f.time)?;
            w.write_u32::<LittleEndian>(f.len() as u32)?;
            for i in 0..f.len() {
                w.write_u32::<LittleEndian>(f.orig_id[i])?;
                for v in [f.position[i].x, f.position[i].y, f.velocity[i].x, f.velocity[i].y, f.diameter[i]] {
                    w.write_f64::<LittleEndian>(v)?;
                }
                w.write_u8(f.alive[i] as u8)?;
            }
            match &f.eulerian {
                Some(q) => {
                    w.write_u8(1)?;
                    w.write_u32::<LittleEndian>(q.len() as u32)?;
                    for row in q {
                        for v in row {
                            w.write_f64::<LittleEndian>(*v)?;
                        }
                    }
                }
                None => w.write_u8(0)?,
            }
        }
        Ok(())
    }

    pub fn read<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a rollout archive (bad magic)".into()));
        }
        let version = r.read_u16::<LittleEndian>()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported archive version {version}")));
        }
        let n = r.read_u32::<LittleEndian>()? as usize;
        let mut meta = vec![0u8; n];
        r.read_exact(&mut meta)?;
        let meta: ArchiveMeta = serde_json::from_slice(&meta)?;
        let nf = r.read_u32::<LittleEndian>()? as usize;
        let mut frames = Vec::with_capacity(nf.min(1 << 16));
        for _ in 0..nf {
            let time = r.read_f64::<LittleEndian>()?;
            let np = r.read_u32::<LittleEndian>()? as usize;
            let mut f = Frame {
                time,
                orig_id: Vec::with_capacity(np),
                position: Vec::with_capacity(np),
                velocity: Vec::with_capacity(np),
                diameter: Vec::with_capacity(np),
                alive: Vec::with_capacity(np),
                eulerian: None,
            };
            for _ in 0..np {
                f.orig_id.push(r.read_u32::<LittleEndian>()?);
                let mut v = [0.0; 5];
                r.read_f64_into::<LittleEndian>(&mut v)?;
                f.position.push(Vec2::new(v[0], v[1]));
                f.velocity.push(Vec2::new(v[2], v[3]));
                f.diameter.push(v[4]);
                f.alive.push(match r.read_u8()? {
                    0 => false,
                    1 => true,
                    b => return Err(Error::Format(format!("bad alive byte {b}"))),
                });
            }
            match r.read_u8()? {
                0 => {}
                1 => {
                    let nc = r.read_u32::<LittleEndian>()? as usize;
                    let mut q = vec![[0.0; N_STATE]; nc];
                    for row in &mut q {
                        r.read_f64_into::<LittleEndian>(row)?;
                    }
                    f.eulerian = Some(q);
                }
                b => return Err(Error::Format(format!("bad Eulerian flag {b}"))),
            }
            frames.push(f);
        }
        let a = Self { meta, frames };
        a.validate()?;
        Ok(a)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        self.write(&mut buf)?;
        Ok(buf)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let b = self.to_bytes()?;
        std::fs::write(path, b).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let b = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::read(&mut b.as_slice())
    }
}
