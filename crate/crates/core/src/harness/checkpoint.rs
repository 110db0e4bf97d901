//! Versioned little-endian checkpoint files.
//!
//! Layout: magic `JSALCKPT`, format version (u32), config text (u32 length +
//! UTF-8), step (u64), seed (u64), optimizer step count (u64), learning rate
//! and weight decay (f64), parameter count (u32), then per parameter: name
//! (u32 length + UTF-8), trainable flag (u8), rows and cols (u32), values,
//! first and second moments (f64 each).

use std::fs;
use std::path::Path;

use crate::diffcore::{ParamStore, Shape};
use crate::error::{Error, Result};

use super::config::TrainConfig;
use super::model::Model;
use super::optim::AdamW;

pub const MAGIC: &[u8; 8] = b"JSALCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub step: u64,
    /// The run seed; together with `step` it fully determines the batch
    /// and masking streams of every later step.
    pub seed: u64,
    pub store: ParamStore,
    pub optimizer: AdamW,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let out = self
            .bytes
            .get(self.pos..self.pos + n)
            .ok_or_else(|| Error::format(self.path, "truncated checkpoint"))?;
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_bits(self.u64()?))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::format(self.path, "invalid UTF-8"))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| self.f64()).collect()
    }
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    buf.extend_from_slice(&(s.len() as u32).to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
}

fn put_f64s(buf: &mut Vec<u8>, v: &[f64]) {
    for x in v {
        buf.extend_from_slice(&x.to_bits().to_le_bytes());
    }
}

impl Checkpoint {
    pub fn capture(model: &Model, optimizer: &AdamW, step: u64) -> Self {
        Checkpoint {
            config: model.config.clone(),
            step,
            seed: model.config.seed,
            store: model.store.clone(),
            optimizer: optimizer.clone(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        put_str(&mut buf, &self.config.to_text());
        buf.extend_from_slice(&self.step.to_le_bytes());
        buf.extend_from_slice(&self.seed.to_le_bytes());
        buf.extend_from_slice(&self.optimizer.t.to_le_bytes());
        buf.extend_from_slice(&self.optimizer.lr.to_bits().to_le_bytes());
        buf.extend_from_slice(&self.optimizer.weight_decay.to_bits().to_le_bytes());
        buf.extend_from_slice(&(self.store.len() as u32).to_le_bytes());
        for (id, p) in self.store.iter() {
            put_str(&mut buf, &p.name);
            buf.push(p.trainable as u8);
            buf.extend_from_slice(&(p.shape.rows as u32).to_le_bytes());
            buf.extend_from_slice(&(p.shape.cols as u32).to_le_bytes());
            put_f64s(&mut buf, &p.data);
            put_f64s(&mut buf, &self.optimizer.m[id.index()]);
            put_f64s(&mut buf, &self.optimizer.v[id.index()]);
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(Error::format(path, "not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::format(path, format!("unsupported checkpoint version {version}")));
        }
        let config = TrainConfig::parse_text(&r.string()?)?;
        let step = r.u64()?;
        let seed = r.u64()?;
        let t = r.u64()?;
        let lr = r.f64()?;
        let weight_decay = r.f64()?;
        let n = r.u32()? as usize;
        let mut store = ParamStore::new();
        let (mut m, mut v) = (Vec::with_capacity(n), Vec::with_capacity(n));
        for _ in 0..n {
            let name = r.string()?;
            let trainable = r.u8()? != 0;
            let shape = Shape::new(r.u32()? as usize, r.u32()? as usize);
            let data = r.f64s(shape.numel())?;
            let id = store.add(name, shape, data)?;
            store.set_trainable(id, trainable);
            m.push(r.f64s(shape.numel())?);
            v.push(r.f64s(shape.numel())?);
        }
        if r.pos != bytes.len() {
            return Err(Error::format(path, "trailing bytes after checkpoint"));
        }
        Ok(Checkpoint {
            config,
            step,
            seed,
            store,
            optimizer: AdamW {
                lr,
                weight_decay,
                t,
                m,
                v,
            },
        })
    }

    /// Writes through a temporary file so an interrupted save never leaves a
    /// truncated checkpoint behind.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes())?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::Missing(path.to_path_buf()));
        }
        Self::from_bytes(&fs::read(path)?, path)
    }

    /// Rebuilds the model. Parameter names and shapes must match a freshly
    /// initialized model of the stored configuration.
    pub fn model(&self) -> Result<Model> {
        let mut model = Model::new(&self.config)?;
        if model.store.len() != self.store.len() {
            return Err(Error::Config(format!(
                "checkpoint has {} parameters, model expects {}",
                self.store.len(),
                model.store.len()
            )));
        }
        for ((_, want), (_, have)) in model.store.iter().zip(self.store.iter()) {
            if want.name != have.name || want.shape != have.shape {
                return Err(Error::Config(format!(
                    "checkpoint parameter {} {} does not match model parameter {} {}",
                    have.name, have.shape, want.name, want.shape
                )));
            }
        }
        model.store = self.store.clone();
        Ok(model)
    }

    /// Rejects a checkpoint whose architecture differs from `expected`.
    pub fn check_compatible(&self, expected: &TrainConfig) -> Result<()> {
        let diff = self.config.architecture_mismatch(expected);
        if diff.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!("checkpoint config mismatch: {}", diff.join(", "))))
        }
    }
}
