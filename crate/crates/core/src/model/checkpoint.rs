//! Single-file checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "HVDK" | u32 version | u64 n | n bytes of canonical config JSON
//! then for every parameter in store order:
//!   u32 name length | name (UTF-8) | u32 rank | rank × u64 extents | f64 data
//! ```

use std::io::{Read, Write};
use std::path::Path;

use super::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const MAGIC: &[u8; 4] = b"HVDK";
pub const VERSION: u32 = 1;

const MAX_NAME: usize = 1 << 12;
const MAX_RANK: usize = 8;
const MAX_CONFIG: usize = 1 << 20;

/// Sorted-key JSON; identical configs always give identical bytes.
pub fn canonical_json(config: &ModelConfig) -> Result<String> {
    Ok(serde_json::to_string(&serde_json::to_value(config)?)?)
}

pub fn write<W: Write>(mut out: W, model: &Model) -> Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    let cfg = canonical_json(model.config())?;
    out.write_all(&(cfg.len() as u64).to_le_bytes())?;
    out.write_all(cfg.as_bytes())?;
    for (_, name, t) in model.store.iter() {
        out.write_all(&(name.len() as u32).to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        out.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &e in t.shape() {
            out.write_all(&(e as u64).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(t.len() * 8);
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&buf)?;
    }
    out.flush()?;
    Ok(())
}

pub fn to_bytes(model: &Model) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write(&mut buf, model)?;
    Ok(buf)
}

fn u32_of<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn u64_of<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn bounded(v: u64, max: usize, what: &str) -> Result<usize> {
    usize::try_from(v).ok().filter(|&n| n <= max).ok_or_else(|| Error::Format(format!("{what} {v} exceeds {max}")))
}

/// Reads a checkpoint; parameter names and shapes must match the layout
/// implied by the stored config.
pub fn read<R: Read>(mut r: R) -> Result<Model> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}, expected {MAGIC:?}")));
    }
    let version = u32_of(&mut r)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let n = bounded(u64_of(&mut r)?, MAX_CONFIG, "config length")?;
    let mut cfg = vec![0u8; n];
    r.read_exact(&mut cfg)?;
    let config: ModelConfig = serde_json::from_slice(&cfg)?;
    let mut model = Model::new(config, 0)?;
    let ids: Vec<_> = model.store.ids().collect();
    for id in ids {
        let len = bounded(u32_of(&mut r)? as u64, MAX_NAME, "name length")?;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| Error::Format(format!("parameter name: {e}")))?;
        let expected = model.store.name(id).to_string();
        if name != expected {
            return Err(Error::Format(format!("parameter {name:?} found where {expected:?} was expected")));
        }
        let rank = bounded(u32_of(&mut r)? as u64, MAX_RANK, "rank")?;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(bounded(u64_of(&mut r)?, usize::MAX >> 4, "extent")?);
        }
        let want = model.store.get(id).shape().to_vec();
        if shape != want {
            return Err(Error::Format(format!("parameter {name} has shape {shape:?}, the config implies {want:?}")));
        }
        let count: usize = shape.iter().product();
        let mut bytes = vec![0u8; count * 8];
        r.read_exact(&mut bytes)?;
        let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        model.store.set(id, Tensor::new(&shape, data)?)?;
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Format("trailing bytes after the last parameter".into()));
    }
    Ok(model)
}

pub fn save(path: &Path, model: &Model) -> Result<()> {
    let f = std::fs::File::create(path)?;
    write(std::io::BufWriter::new(f), model)
}

pub fn load(path: &Path) -> Result<Model> {
    let f = std::fs::File::open(path)?;
    read(std::io::BufReader::new(f))
}

/// Differences between two configs as `key: a != b` lines.
pub fn config_diff(a: &ModelConfig, b: &ModelConfig) -> Result<Vec<String>> {
    let (va, vb) = (serde_json::to_value(a)?, serde_json::to_value(b)?);
    let (Some(ma), Some(mb)) = (va.as_object(), vb.as_object()) else {
        return Ok(Vec::new());
    };
    Ok(ma.iter().filter(|(k, v)| mb.get(*k) != Some(*v)).map(|(k, v)| format!("model.{k}: {v} != {}", mb[k])).collect())
}

/// Fails with the differing keys when a checkpoint was trained under another config.
pub fn ensure_compatible(expected: &ModelConfig, found: &ModelConfig) -> Result<()> {
    let diff = config_diff(expected, found)?;
    if diff.is_empty() {
        Ok(())
    } else {
        Err(Error::Config(format!("checkpoint does not match the config: {}", diff.join("; "))))
    }
}
