use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

use super::model::{CnnModel, ModelConfig};
use super::Real;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SQRM";
pub const CHECKPOINT_VERSION: u32 = 1;

const MAX_HEADER: usize = 1 << 20;

fn put_u32(w: &mut impl Write, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn get_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Serializes the architecture, every parameter tensor and the batch-norm
/// running statistics as little-endian `f32`.
pub fn write_checkpoint<T: Real>(model: &CnnModel<T>, w: &mut impl Write) -> std::io::Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    put_u32(w, CHECKPOINT_VERSION)?;
    let header = serde_json::to_vec(model.config()).map_err(std::io::Error::other)?;
    put_u32(w, header.len() as u32)?;
    w.write_all(&header)?;
    let mut tensors: Vec<(Vec<usize>, &[T])> = model.params().iter().map(|p| (p.shape.clone(), p.value.as_slice())).collect();
    tensors.extend(model.buffers().into_iter().map(|b| (vec![b.len()], b.as_slice())));
    put_u32(w, tensors.len() as u32)?;
    for (shape, data) in tensors {
        put_u32(w, shape.len() as u32)?;
        for d in shape {
            put_u32(w, d as u32)?;
        }
        let mut buf = Vec::with_capacity(data.len() * 4);
        for v in data {
            buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

pub fn read_checkpoint<T: Real>(r: &mut impl Read, origin: &Path) -> Result<CnnModel<T>> {
    let bad = |detail: String| Error::format(origin, detail);
    let io = |e: std::io::Error| Error::format(origin, format!("truncated or unreadable: {e}"));
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(bad(format!("bad magic {magic:?}")));
    }
    let version = get_u32(r).map_err(io)?;
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let len = get_u32(r).map_err(io)? as usize;
    if len > MAX_HEADER {
        return Err(bad(format!("header length {len} too large")));
    }
    let mut header = vec![0u8; len];
    r.read_exact(&mut header).map_err(io)?;
    let config: ModelConfig = serde_json::from_slice(&header).map_err(|e| bad(format!("architecture header: {e}")))?;
    let mut model = CnnModel::<T>::new(config, 0).map_err(|e| bad(e.to_string()))?;
    let count = get_u32(r).map_err(io)? as usize;
    let n_params = model.params().len();
    let n_buffers = model.buffers().len();
    if count != n_params + n_buffers {
        return Err(bad(format!("expected {} tensors, found {count}", n_params + n_buffers)));
    }
    let mut read_tensor = |expected: &[usize]| -> Result<Vec<T>> {
        let ndims = get_u32(r).map_err(io)? as usize;
        let mut shape = Vec::with_capacity(ndims.min(8));
        for _ in 0..ndims {
            shape.push(get_u32(r).map_err(io)? as usize);
        }
        if shape != expected {
            return Err(bad(format!("tensor shape {shape:?} does not match {expected:?}")));
        }
        let n: usize = shape.iter().product();
        let mut buf = vec![0u8; n * 4];
        r.read_exact(&mut buf).map_err(io)?;
        let data: Vec<T> = buf
            .chunks_exact(4)
            .map(|c| T::of_f64(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(bad("non-finite value in tensor".into()));
        }
        Ok(data)
    };
    for p in model.params_mut() {
        let shape = p.shape.clone();
        p.value = read_tensor(&shape)?;
    }
    for b in model.buffers_mut() {
        let shape = vec![b.len()];
        *b = read_tensor(&shape)?;
    }
    let mut extra = [0u8; 1];
    if r.read(&mut extra).map_err(io)? != 0 {
        return Err(bad("trailing bytes after last tensor".into()));
    }
    Ok(model)
}

/// Writes to a temporary sibling file and renames it into place, so an
/// interrupted save never leaves a partial checkpoint at `path`.
pub fn save_checkpoint<T: Real>(model: &CnnModel<T>, path: &Path) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let file_name = path.file_name().ok_or_else(|| Error::format(path, "not a file path"))?;
    let tmp = dir.join(format!(".{}.tmp", file_name.to_string_lossy()));
    let result = (|| {
        let mut f = std::io::BufWriter::new(fs::File::create(&tmp)?);
        write_checkpoint(model, &mut f)?;
        f.into_inner().map_err(|e| e.into_error())?.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<CnnModel<T>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&mut std::io::BufReader::new(f), path)
}
