//! Binary parameter checkpoints.
//!
//! Layout (all integers little-endian):
//! `b"DUNETCKP"`, `u32` version, `u32` metadata length, metadata bytes
//! (JSON model config), `u32` entry count, then per entry `u32` name length,
//! name bytes, `u32` rank, `u64` dims, raw `f64` values.

use std::fs;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::model::{build_dunet, Dunet, DunetConfig};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"DUNETCKP";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] io::Error),
    #[error("corrupt checkpoint: {0}")]
    Format(String),
    #[error("incompatible checkpoint: {0}")]
    Incompatible(String),
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

pub fn write_checkpoint(w: &mut impl Write, metadata: &str, params: &[(&str, &Tensor)]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(metadata.len() as u32).to_le_bytes())?;
    w.write_all(metadata.as_bytes())?;
    w.write_all(&(params.len() as u32).to_le_bytes())?;
    for (name, t) in params {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(t.len() * 8);
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u64::from_le_bytes(b))
}

fn truncated(e: io::Error) -> CheckpointError {
    if e.kind() == io::ErrorKind::UnexpectedEof {
        CheckpointError::Format("unexpected end of file".into())
    } else {
        CheckpointError::Io(e)
    }
}

fn read_string(r: &mut impl Read, len: u32, what: &str) -> Result<String> {
    let mut buf = Vec::new();
    r.take(len as u64).read_to_end(&mut buf)?;
    if buf.len() != len as usize {
        return Err(CheckpointError::Format(format!("truncated {what}")));
    }
    String::from_utf8(buf).map_err(|_| CheckpointError::Format(format!("{what} is not UTF-8")))
}

/// Reads metadata and named tensors back.
pub fn read_checkpoint(r: &mut impl Read) -> Result<(String, Vec<(String, Tensor)>)> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(truncated)?;
    if &magic != MAGIC {
        return Err(CheckpointError::Format("bad magic".into()));
    }
    let version = read_u32(r)?;
    if version != VERSION {
        return Err(CheckpointError::Incompatible(format!("version {version}, expected {VERSION}")));
    }
    let meta_len = read_u32(r)?;
    let metadata = read_string(r, meta_len, "metadata")?;
    let count = read_u32(r)?;
    let mut params = Vec::new();
    for _ in 0..count {
        let name_len = read_u32(r)?;
        let name = read_string(r, name_len, "parameter name")?;
        let rank = read_u32(r)?;
        if rank > 8 {
            return Err(CheckpointError::Format(format!("{name}: rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            shape.push(read_u64(r)? as usize);
        }
        let n: usize = shape.iter().product();
        let mut raw = Vec::new();
        r.take(n as u64 * 8).read_to_end(&mut raw)?;
        if raw.len() != n * 8 {
            return Err(CheckpointError::Format(format!("{name}: truncated values")));
        }
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let t = Tensor::new(shape, data).map_err(|e| CheckpointError::Format(format!("{name}: {e}")))?;
        params.push((name, t));
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(CheckpointError::Format("trailing bytes".into()));
    }
    Ok((metadata, params))
}

/// Writes every parameter and running statistic of the model.
pub fn save_model(path: &Path, model: &Dunet) -> Result<()> {
    let meta = serde_json::to_string(&model.cfg).expect("config serialize");
    let leaves: Vec<(&str, &Tensor)> = model.graph.named_leaves().into_iter().map(|(_, n, t)| (n, t)).collect();
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    // Write then rename so a crash never leaves a half-written checkpoint.
    let tmp = path.with_extension("tmp");
    {
        let mut w = BufWriter::new(fs::File::create(&tmp)?);
        write_checkpoint(&mut w, &meta, &leaves)?;
        w.flush()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<Dunet> {
    let mut r = BufReader::new(fs::File::open(path)?);
    let (meta, params) = read_checkpoint(&mut r)?;
    let cfg: DunetConfig =
        serde_json::from_str(&meta).map_err(|e| CheckpointError::Format(format!("metadata: {e}")))?;
    let mut model = build_dunet(&cfg, 0).map_err(|e| CheckpointError::Incompatible(e.to_string()))?;
    let slots: Vec<(crate::graph::NodeId, String)> =
        model.graph.named_leaves().into_iter().map(|(id, n, _)| (id, n.to_string())).collect();
    if slots.len() != params.len() {
        return Err(CheckpointError::Incompatible(format!("{} tensors, model has {}", params.len(), slots.len())));
    }
    for ((id, want), (name, t)) in slots.into_iter().zip(params) {
        if want != name {
            return Err(CheckpointError::Incompatible(format!("found {name}, expected {want}")));
        }
        model
            .graph
            .set_leaf_value(id, t)
            .map_err(|e| CheckpointError::Incompatible(format!("{name}: {e}")))?;
    }
    Ok(model)
}
