//! Binary checkpoint format.
//!
//! ```text
//! "MGCK" | u32 version | u32 header length | header (key=value lines)
//! u32 tensor count | per tensor: u32 name length, name, u32 ndim,
//! ndim x u32 dims, f32 values
//! ```
//! All integers and floats are little-endian. The header carries every
//! model config field plus free-form `meta.*` entries.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MGCK";
pub const CHECKPOINT_VERSION: u32 = 1;

const META_PREFIX: &str = "meta.";

/// Writes `model` with extra metadata entries (for example the producing
/// command line and seed).
pub fn write_checkpoint<W: Write>(
    w: &mut W,
    model: &Model,
    meta: &BTreeMap<String, String>,
) -> Result<()> {
    let mut header = String::new();
    for (k, v) in model.config().to_pairs() {
        header.push_str(&format!("{k}={v}\n"));
    }
    for (k, v) in meta {
        if k.contains('=') || k.contains('\n') || v.contains('\n') {
            return Err(Error::Format(format!(
                "metadata entry {k:?} cannot be encoded"
            )));
        }
        header.push_str(&format!("{META_PREFIX}{k}={v}\n"));
    }
    w.write_all(CHECKPOINT_MAGIC)?;
    write_u32(w, CHECKPOINT_VERSION)?;
    write_u32(w, header.len() as u32)?;
    w.write_all(header.as_bytes())?;
    write_u32(w, model.params().len() as u32)?;
    for (_, p) in model.params().iter() {
        write_u32(w, p.name.len() as u32)?;
        w.write_all(p.name.as_bytes())?;
        write_u32(w, p.value.shape().len() as u32)?;
        for &dim in p.value.shape() {
            write_u32(w, dim as u32)?;
        }
        let mut buf = Vec::with_capacity(p.value.len() * 4);
        for &v in p.value.data() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

/// Reads a checkpoint, returning the model and its `meta.*` entries.
pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<(Model, BTreeMap<String, String>)> {
    let mut magic = [0u8; 4];
    read_exact(r, &mut magic, "magic")?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Format(format!("bad checkpoint magic {magic:?}")));
    }
    let version = read_u32(r, "version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let header_len = read_u32(r, "header length")? as usize;
    let mut header = vec![0u8; header_len];
    read_exact(r, &mut header, "header")?;
    let header =
        String::from_utf8(header).map_err(|_| Error::Format("header is not UTF-8".into()))?;
    let mut fields = BTreeMap::new();
    let mut meta = BTreeMap::new();
    for line in header.lines() {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("header line {line:?} has no '='")))?;
        match k.strip_prefix(META_PREFIX) {
            Some(m) => meta.insert(m.to_string(), v.to_string()),
            None => fields.insert(k.to_string(), v.to_string()),
        };
    }
    let config = ModelConfig::from_pairs(&fields)?;
    let count = read_u32(r, "tensor count")? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(r, "tensor name length")? as usize;
        let mut name = vec![0u8; name_len];
        read_exact(r, &mut name, "tensor name")?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        let ndim = read_u32(r, "tensor rank")? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u32(r, "tensor dims")? as usize);
        }
        let n: usize = shape.iter().product();
        let mut raw = vec![0u8; n * 4];
        read_exact(r, &mut raw, &name)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        tensors.push((name, Tensor::new(shape, data)?));
    }
    let mut next = tensors.into_iter();
    let model = Model::build(config, |name, _, _| {
        let (stored, t) = next
            .next()
            .ok_or_else(|| Error::Format(format!("checkpoint lacks parameter {name}")))?;
        if stored != name {
            return Err(Error::Format(format!(
                "expected parameter {name}, found {stored}"
            )));
        }
        Ok(t)
    })?;
    if next.next().is_some() {
        return Err(Error::Format("checkpoint has extra parameters".into()));
    }
    Ok((model, meta))
}

pub fn save_checkpoint(path: &Path, model: &Model, meta: &BTreeMap<String, String>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(&mut w, model, meta)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(Model, BTreeMap<String, String>)> {
    let mut r = BufReader::new(File::open(path)?);
    read_checkpoint(&mut r)
}

fn write_u32<W: Write>(w: &mut W, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => {
            Error::Truncated(format!("checkpoint ends inside {what}"))
        }
        _ => Error::Io(e),
    })
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}
