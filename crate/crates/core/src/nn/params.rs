//! Named parameter storage and the checkpoint file.

use super::tape::Mat;
use crate::error::{Error, Result};
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Mat>,
    trainable: Vec<bool>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: Mat) -> usize {
        assert!(!self.index.contains_key(name), "duplicate parameter '{name}'");
        let id = self.names.len();
        self.names.push(name.to_string());
        self.values.push(value);
        self.trainable.push(true);
        self.index.insert(name.to_string(), id);
        id
    }

    /// Weight matrix with entries uniform in `+-1/sqrt(fan_in)`.
    pub fn add_uniform<R: Rng + ?Sized>(&mut self, name: &str, rows: usize, cols: usize, rng: &mut R) -> usize {
        let b = 1.0 / (rows.max(1) as f64).sqrt();
        let data = (0..rows * cols).map(|_| rng.random_range(-b..b)).collect();
        self.add(name, Mat::from_vec(rows, cols, data))
    }

    pub fn add_normal<R: Rng + ?Sized>(&mut self, name: &str, rows: usize, cols: usize, std: f64, rng: &mut R) -> usize {
        let n = Normal::new(0.0, std).expect("positive std");
        let data = (0..rows * cols).map(|_| n.sample(rng)).collect();
        self.add(name, Mat::from_vec(rows, cols, data))
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn value(&self, id: usize) -> &Mat {
        &self.values[id]
    }

    pub fn value_mut(&mut self, id: usize) -> &mut Mat {
        &mut self.values[id]
    }

    pub fn get(&self, name: &str) -> Option<&Mat> {
        self.id(name).map(|i| &self.values[i])
    }

    pub fn is_trainable(&self, id: usize) -> bool {
        self.trainable[id]
    }

    /// Freeze or unfreeze every parameter whose name starts with `prefix`.
    pub fn set_trainable(&mut self, prefix: &str, on: bool) {
        for (i, n) in self.names.iter().enumerate() {
            if n.starts_with(prefix) {
                self.trainable[i] = on;
            }
        }
    }

    pub fn n_scalars(&self) -> usize {
        self.values.iter().map(|m| m.data.len()).sum()
    }

    /// Snapshot of all values (used to restore after a divergent step).
    pub fn values(&self) -> Vec<Mat> {
        self.values.clone()
    }

    pub fn restore(&mut self, values: Vec<Mat>) {
        assert_eq!(values.len(), self.values.len());
        self.values = values;
    }
}

const MAGIC: &[u8; 4] = b"EGNN";
const VERSION: u16 = 1;

/// Write `config` (any JSON) and every parameter, little-endian.
pub fn write_checkpoint<W: Write>(w: &mut W, config: &serde_json::Value, store: &ParamStore) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_u16::<LittleEndian>(VERSION)?;
    let cfg = serde_json::to_vec(config)?;
    w.write_u32::<LittleEndian>(cfg.len() as u32)?;
    w.write_all(&cfg)?;
    w.write_u32::<LittleEndian>(store.len() as u32)?;
    for id in 0..store.len() {
        let name = store.name(id).as_bytes();
        w.write_u16::<LittleEndian>(name.len() as u16)?;
        w.write_all(name)?;
        let m = store.value(id);
        w.write_u32::<LittleEndian>(m.rows as u32)?;
        w.write_u32::<LittleEndian>(m.cols as u32)?;
        for v in &m.data {
            w.write_f64::<LittleEndian>(*v)?;
        }
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<(serde_json::Value, ParamStore)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("not a model checkpoint (bad magic)".into()));
    }
    let version = r.read_u16::<LittleEndian>()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let n = r.read_u32::<LittleEndian>()? as usize;
    let mut cfg = vec![0u8; n];
    r.read_exact(&mut cfg)?;
    let config = serde_json::from_slice(&cfg)?;
    let np = r.read_u32::<LittleEndian>()? as usize;
    let mut store = ParamStore::new();
    for _ in 0..np {
        let ln = r.read_u16::<LittleEndian>()? as usize;
        let mut name = vec![0u8; ln];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| Error::Format("parameter name is not UTF-8".into()))?;
        let rows = r.read_u32::<LittleEndian>()? as usize;
        let cols = r.read_u32::<LittleEndian>()? as usize;
        let mut data = vec![0.0; rows * cols];
        r.read_f64_into::<LittleEndian>(&mut data)?;
        store.add(&name, Mat::from_vec(rows, cols, data));
    }
    Ok((config, store))
}

pub fn save_checkpoint(path: &Path, config: &serde_json::Value, store: &ParamStore) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, config, store)?;
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(serde_json::Value, ParamStore)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&mut bytes.as_slice())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = ParamStore::new();
        s.add_uniform("a.w", 3, 4, &mut rng);
        s.add_normal("b.emb", 16, 8, 0.02, &mut rng);
        s.add("c", Mat::scalar(f64::MIN_POSITIVE));
        let cfg = serde_json::json!({"d_h": 64});
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &cfg, &s).unwrap();
        let (c2, s2) = read_checkpoint(&mut buf.as_slice()).unwrap();
        assert_eq!(c2, cfg);
        assert_eq!(s2, s);
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_checkpoint(&mut bad.as_slice()).is_err());
    }

    #[test]
    fn freezing_by_prefix() {
        let mut s = ParamStore::new();
        s.add("eul.a", Mat::scalar(1.0));
        s.add("lag.a", Mat::scalar(1.0));
        s.set_trainable("lag.", false);
        assert!(s.is_trainable(0) && !s.is_trainable(1));
    }
}
