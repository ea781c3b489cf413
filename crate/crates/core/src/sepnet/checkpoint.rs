//! Binary checkpoint format.
//!
//! ```text
//! magic "QSEPCKPT" | version u32
//! depth k embed_dim base_channels max_channels u32 | leaky_slope f64
//! tensor count u32
//! per tensor: name (u32 length + UTF-8) | rank u32 | dims u32* | f32 data
//! ```
//! All integers and floats are little-endian.

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use super::{SepNetHyper, SeparationModel};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"QSEPCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn save_checkpoint(model: &SeparationModel<f32>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(model)).map_err(|e| Error::io(path, e))
}

fn encode(model: &SeparationModel<f32>) -> Vec<u8> {
    let h = model.hyper();
    let mut buf = Vec::with_capacity(64 + 4 * model.param_count());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for v in [h.depth, h.k, h.embed_dim, h.base_channels, h.max_channels] {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    buf.extend_from_slice(&h.leaky_slope.to_le_bytes());
    buf.extend_from_slice(&(model.tensors().len() as u32).to_le_bytes());
    for t in model.tensors() {
        buf.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
        buf.extend_from_slice(t.name.as_bytes());
        buf.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for &d in &t.shape {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for p in &model.params()[t.offset..t.offset + t.len] {
            buf.extend_from_slice(&p.to_le_bytes());
        }
    }
    buf
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<SeparationModel<f32>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

fn decode(bytes: &[u8], path: &Path) -> Result<SeparationModel<f32>> {
    let corrupt = |reason: String| Error::Corrupt {
        path: path.to_path_buf(),
        reason,
    };
    let mut r = Cursor::new(bytes);
    let mut take = |n: usize| -> Result<Vec<u8>> {
        let mut b = vec![0u8; n];
        r.read_exact(&mut b)
            .map_err(|_| corrupt("unexpected end of file".into()))?;
        Ok(b)
    };
    if take(8)? != MAGIC {
        return Err(corrupt("not a checkpoint (bad magic)".into()));
    }
    let u32_of = |b: Vec<u8>| u32::from_le_bytes(b.try_into().expect("4 bytes"));
    let version = u32_of(take(4)?);
    if version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch {
            path: path.to_path_buf(),
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let mut dims = [0usize; 5];
    for d in &mut dims {
        *d = u32_of(take(4)?) as usize;
    }
    let slope = f64::from_le_bytes(take(8)?.try_into().expect("8 bytes"));
    let hyper = SepNetHyper {
        depth: dims[0],
        k: dims[1],
        embed_dim: dims[2],
        base_channels: dims[3],
        max_channels: dims[4],
        leaky_slope: slope,
    };
    hyper
        .validate()
        .map_err(|e| corrupt(format!("bad hyperparameters: {e}")))?;
    let mut model = SeparationModel::<f32>::init(hyper, 0)?;
    let count = u32_of(take(4)?) as usize;
    if count != model.tensors().len() {
        return Err(corrupt(format!(
            "{count} tensors, architecture needs {}",
            model.tensors().len()
        )));
    }
    let expected = model.tensors().to_vec();
    let mut params = vec![0f32; model.param_count()];
    for info in &expected {
        let name_len = u32_of(take(4)?) as usize;
        if name_len > 256 {
            return Err(corrupt("tensor name too long".into()));
        }
        let name = String::from_utf8(take(name_len)?)
            .map_err(|_| corrupt("tensor name is not UTF-8".into()))?;
        let rank = u32_of(take(4)?) as usize;
        if rank > 8 {
            return Err(corrupt("tensor rank too large".into()));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32_of(take(4)?) as usize);
        }
        if name != info.name || shape != info.shape {
            return Err(corrupt(format!(
                "tensor {name} {shape:?} does not match expected {} {:?}",
                info.name, info.shape
            )));
        }
        let raw = take(4 * info.len)?;
        for (dst, chunk) in params[info.offset..info.offset + info.len]
            .iter_mut()
            .zip(raw.chunks_exact(4))
        {
            *dst = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
            if !dst.is_finite() {
                return Err(corrupt(format!("non-finite value in {name}")));
            }
        }
    }
    if r.position() as usize != bytes.len() {
        return Err(corrupt("trailing bytes after last tensor".into()));
    }
    model.params_mut().copy_from_slice(&params);
    Ok(model)
}
