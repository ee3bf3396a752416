//! `TVLM` checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "TVLM" | u32 version | u32 entry count
//! per entry: u32 name length | name (UTF-8) | u32 ndim | ndim x u32 dims
//!            | f32 payload | u64 FNV-1a of the payload bytes
//! ```
//!
//! Model checkpoints store one entry per parameter tensor plus a leading
//! `config` entry holding the model dimensions.

use std::io::{Read, Write};

use crate::error::{Error, Result};

use super::model::{Fnv1a, ParamId, ToyModelConfig, ToyVlmParams};
use super::tensor::Matrix;

pub const MAGIC: &[u8; 4] = b"TVLM";
pub const VERSION: u32 = 1;
const CONFIG_ENTRY: &str = "config";

#[derive(Debug, Clone, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl TensorEntry {
    pub fn new(name: impl Into<String>, dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(Error::Format(format!(
                "dims {dims:?} need {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self {
            name: name.into(),
            dims,
            data,
        })
    }
}

fn payload_checksum(data: &[f32]) -> u64 {
    let mut h = Fnv1a::new();
    for v in data {
        h.write(&v.to_le_bytes());
    }
    h.finish()
}

fn u32_of(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Format(format!("{what} {n} does not fit in u32")))
}

pub fn write_entries<W: Write>(mut w: W, entries: &[TensorEntry]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&u32_of(entries.len(), "entry count")?.to_le_bytes())?;
    for e in entries {
        w.write_all(&u32_of(e.name.len(), "name length")?.to_le_bytes())?;
        w.write_all(e.name.as_bytes())?;
        w.write_all(&u32_of(e.dims.len(), "rank")?.to_le_bytes())?;
        for &d in &e.dims {
            w.write_all(&u32_of(d, "dimension")?.to_le_bytes())?;
        }
        for v in &e.data {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&payload_checksum(&e.data).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

fn take<R: Read, const N: usize>(r: &mut R, what: &str) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Format(format!("truncated {what}: {e}")))?;
    Ok(buf)
}

fn take_u32<R: Read>(r: &mut R, what: &str) -> Result<usize> {
    Ok(u32::from_le_bytes(take::<R, 4>(r, what)?) as usize)
}

pub fn read_entries<R: Read>(mut r: R) -> Result<Vec<TensorEntry>> {
    if &take::<R, 4>(&mut r, "magic")? != MAGIC {
        return Err(Error::Format("bad magic, not a TVLM file".into()));
    }
    let version = take_u32(&mut r, "version")?;
    if version != VERSION as usize {
        return Err(Error::Format(format!("unsupported TVLM version {version}")));
    }
    let count = take_u32(&mut r, "entry count")?;
    let mut out = Vec::with_capacity(count.min(1024));
    for i in 0..count {
        let len = take_u32(&mut r, "name length")?;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)
            .map_err(|e| Error::Format(format!("truncated name of entry {i}: {e}")))?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Format(format!("entry {i} name is not UTF-8")))?;
        let ndim = take_u32(&mut r, "rank")?;
        let dims = (0..ndim)
            .map(|_| take_u32(&mut r, "dimension"))
            .collect::<Result<Vec<_>>>()?;
        let n = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Format(format!("entry {name} is too large")))?;
        let mut data = Vec::with_capacity(n.min(1 << 24));
        for _ in 0..n {
            data.push(f32::from_le_bytes(take::<R, 4>(&mut r, "payload")?));
        }
        let stored = u64::from_le_bytes(take::<R, 8>(&mut r, "checksum")?);
        if stored != payload_checksum(&data) {
            return Err(Error::Format(format!("checksum mismatch in entry {name}")));
        }
        out.push(TensorEntry { name, dims, data });
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Format("trailing bytes after last entry".into()));
    }
    Ok(out)
}

fn config_entry(cfg: &ToyModelConfig) -> Result<TensorEntry> {
    let vals = [
        cfg.image_size,
        cfg.patch_size,
        cfg.channels,
        cfg.embed_dim,
        cfg.heads,
        cfg.vocab,
        cfg.max_text_len,
    ];
    // Dimensions are small integers and exact in f32.
    TensorEntry::new(
        CONFIG_ENTRY,
        vec![vals.len()],
        vals.iter().map(|&v| v as f32).collect(),
    )
}

/// Entries for a model, values narrowed to `f32`.
pub fn params_to_entries(params: &ToyVlmParams) -> Result<Vec<TensorEntry>> {
    let mut out = vec![config_entry(params.config())?];
    for id in ParamId::ALL {
        let t = params.get(id);
        out.push(TensorEntry::new(
            id.name(),
            vec![t.rows(), t.cols()],
            t.data().iter().map(|&v| v as f32).collect(),
        )?);
    }
    Ok(out)
}

pub fn params_from_entries(entries: &[TensorEntry]) -> Result<ToyVlmParams> {
    let cfg_entry = entries
        .iter()
        .find(|e| e.name == CONFIG_ENTRY)
        .ok_or_else(|| Error::Format("checkpoint has no config entry".into()))?;
    if cfg_entry.data.len() != 7 {
        return Err(Error::Format("config entry must hold 7 values".into()));
    }
    let v: Vec<usize> = cfg_entry.data.iter().map(|&x| x as usize).collect();
    let cfg = ToyModelConfig {
        image_size: v[0],
        patch_size: v[1],
        channels: v[2],
        embed_dim: v[3],
        heads: v[4],
        vocab: v[5],
        max_text_len: v[6],
    };
    let tensors = ParamId::ALL
        .iter()
        .map(|id| {
            let e = entries
                .iter()
                .find(|e| e.name == id.name())
                .ok_or_else(|| Error::Format(format!("checkpoint lacks {}", id.name())))?;
            if e.dims.len() != 2 {
                return Err(Error::Format(format!("{} must be rank 2", e.name)));
            }
            Matrix::new(
                e.dims[0],
                e.dims[1],
                e.data.iter().map(|&x| f64::from(x)).collect(),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    ToyVlmParams::from_tensors(&cfg, tensors)
}

pub fn save_params<W: Write>(w: W, params: &ToyVlmParams) -> Result<()> {
    write_entries(w, &params_to_entries(params)?)
}

pub fn load_params<R: Read>(r: R) -> Result<ToyVlmParams> {
    params_from_entries(&read_entries(r)?)
}
