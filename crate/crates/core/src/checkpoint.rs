//! Named-tensor archive.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "RSDH"            4 bytes magic
//! version           u32
//! tensor count      u32
//! per tensor:
//!   name length     u32, then UTF-8 name bytes
//!   rank            u32
//!   dims            u64 x rank
//!   data            f32 x product(dims)
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::dsm::ScanPaths;
use crate::error::{Error, Result};
use crate::network::{Model, ModelConfig};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"RSDH";
pub const VERSION: u32 = 1;

/// Name of the tensor holding the encoded [`ModelConfig`].
pub const CONFIG_KEY: &str = "__config";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub entries: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor<f32>) {
        self.entries.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for (name, t) in &self.entries {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.rank() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            w.write_all(&t.to_bits_le())?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic, "magic")?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint(format!("bad magic {magic:?}")));
        }
        let version = read_u32(&mut r, "version")?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let count = read_u32(&mut r, "tensor count")? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for i in 0..count {
            let len = read_u32(&mut r, "name length")? as usize;
            if len > r.len() {
                return Err(Error::Checkpoint(format!("tensor {i}: name length {len} exceeds file")));
            }
            let mut name = vec![0u8; len];
            read_exact(&mut r, &mut name, "name")?;
            let name = String::from_utf8(name).map_err(|_| Error::Checkpoint(format!("tensor {i}: name is not UTF-8")))?;
            let rank = read_u32(&mut r, "rank")? as usize;
            let mut shape = Vec::with_capacity(rank.min(16));
            for _ in 0..rank {
                let d = read_u64(&mut r, "dim")?;
                shape.push(usize::try_from(d).map_err(|_| Error::Checkpoint(format!("{name}: dim {d} too large")))?);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .filter(|&n| n.checked_mul(4).is_some_and(|b| b <= r.len()))
                .ok_or_else(|| Error::Checkpoint(format!("{name}: shape {shape:?} exceeds file")))?;
            let (raw, rest) = r.split_at(n * 4);
            r = rest;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            let t = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
            entries.push((name, t));
        }
        if !r.is_empty() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", r.len())));
        }
        Ok(Self { entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes();
        // write-then-rename so an interrupted save never clobbers the previous file
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Model parameters plus the encoded config.
    pub fn from_model(model: &Model<f32>) -> Self {
        let mut ck = Self::new();
        ck.push(CONFIG_KEY, encode_config(&model.cfg));
        for (name, t) in model.params.iter() {
            ck.push(name, t.clone());
        }
        ck
    }

    /// Rebuilds a model from [`Checkpoint::from_model`] output; entries
    /// with a `__` prefix other than the config are ignored.
    pub fn to_model(&self) -> Result<Model<f32>> {
        let cfg = decode_config(self.get(CONFIG_KEY).ok_or_else(|| Error::Checkpoint("missing model config".into()))?)?;
        let mut store = ParamStore::new();
        for (name, t) in &self.entries {
            if !name.starts_with("__") {
                store.insert(name.clone(), t.clone())?;
            }
        }
        Model::from_params(&cfg, store)
    }
}

fn read_exact(r: &mut &[u8], buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|_| Error::Checkpoint(format!("truncated while reading {what}")))
}

fn read_u32(r: &mut &[u8], what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut &[u8], what: &str) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b, what)?;
    Ok(u64::from_le_bytes(b))
}

fn flag(b: bool) -> f32 {
    if b {
        1.0
    } else {
        0.0
    }
}

/// `[C, N1, N2, N3, state_dim, paths, dconv, silu, hadamard, ffn, ffn_expand]`
pub fn encode_config(cfg: &ModelConfig) -> Tensor<f32> {
    let [n1, n2, n3] = cfg.block_counts;
    let v = vec![
        cfg.base_channels as f32,
        n1 as f32,
        n2 as f32,
        n3 as f32,
        cfg.state_dim as f32,
        cfg.paths.count() as f32,
        flag(cfg.use_dconv),
        flag(cfg.use_silu),
        flag(cfg.use_hadamard),
        flag(cfg.use_ffn),
        cfg.ffn_expand as f32,
    ];
    Tensor::from_parts(vec![v.len()], v)
}

pub fn decode_config(t: &Tensor<f32>) -> Result<ModelConfig> {
    let v = t.data();
    if v.len() != 11 {
        return Err(Error::Checkpoint(format!("config tensor has {} entries, expected 11", v.len())));
    }
    let int = |x: f32| -> Result<usize> {
        if x >= 0.0 && x.fract() == 0.0 {
            Ok(x as usize)
        } else {
            Err(Error::Checkpoint(format!("config entry {x} is not a count")))
        }
    };
    let cfg = ModelConfig {
        base_channels: int(v[0])?,
        block_counts: [int(v[1])?, int(v[2])?, int(v[3])?],
        state_dim: int(v[4])?,
        paths: ScanPaths::try_from(int(v[5])?)?,
        use_dconv: v[6] != 0.0,
        use_silu: v[7] != 0.0,
        use_hadamard: v[8] != 0.0,
        use_ffn: v[9] != 0.0,
        ffn_expand: v[10] as f64,
    };
    cfg.validate()?;
    Ok(cfg)
}
