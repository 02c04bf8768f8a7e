//! Checkpoint container: named tensors in a little-endian binary file.
//!
//! Layout: magic `SGMN`, format version (u16), tensor count (u32), then per
//! tensor: name length (u16) + UTF-8 name, rank (u8), extents (u32 each),
//! and the f32 payload. Round-trips are bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SGMN";
pub const VERSION: u16 = 1;

/// Serialize named tensors into the container byte format.
pub fn to_bytes(tensors: &[(String, &Tensor)]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let count = u32::try_from(tensors.len())
        .map_err(|_| Error::InvalidArgument("checkpoint: too many tensors".into()))?;
    out.extend_from_slice(&count.to_le_bytes());
    for (name, tensor) in tensors {
        let name_bytes = name.as_bytes();
        let len = u16::try_from(name_bytes.len()).map_err(|_| {
            Error::InvalidArgument(format!("checkpoint: tensor name too long: {name}"))
        })?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name_bytes);
        let rank = u8::try_from(tensor.shape().len()).map_err(|_| {
            Error::InvalidArgument(format!("checkpoint: rank too large for `{name}`"))
        })?;
        out.push(rank);
        for extent in tensor.shape() {
            let e = u32::try_from(*extent).map_err(|_| {
                Error::InvalidArgument(format!("checkpoint: extent too large for `{name}`"))
            })?;
            out.extend_from_slice(&e.to_le_bytes());
        }
        for v in tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Parse the container byte format back into named tensors.
pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Vec<(String, Tensor)>> {
    let bad = |msg: &str| Error::data(origin, msg);
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        let end = pos.checked_add(n).ok_or_else(|| bad("length overflow"))?;
        if end > bytes.len() {
            return Err(bad("truncated checkpoint"));
        }
        let s = &bytes[pos..end];
        pos = end;
        Ok(s)
    };
    if take(4)? != MAGIC {
        return Err(bad("bad magic, not a checkpoint file"));
    }
    let version = u16::from_le_bytes(take(2)?.try_into().unwrap());
    if version != VERSION {
        return Err(bad(&format!("unsupported checkpoint version {version}")));
    }
    let count = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = u16::from_le_bytes(take(2)?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(take(name_len)?)
            .map_err(|_| bad("tensor name is not UTF-8"))?
            .to_string();
        let rank = take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize);
        }
        let numel: usize = shape.iter().product();
        let payload = take(numel.checked_mul(4).ok_or_else(|| bad("extent overflow"))?)?;
        let data: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push((
            name,
            Tensor::new(shape, data).map_err(|e| bad(&e.to_string()))?,
        ));
    }
    if pos != bytes.len() {
        return Err(bad("trailing bytes after last tensor"));
    }
    Ok(tensors)
}

/// Write a checkpoint atomically (temp file in the target directory, then
/// rename over the destination).
pub fn save(path: &Path, tensors: &[(String, &Tensor)]) -> Result<()> {
    let bytes = to_bytes(tensors)?;
    crate::image_io::atomic_write(path, &bytes)
}

pub fn load(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(file);
    let mut bytes = Vec::new();
    reader
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes, path)
}

/// Name -> tensor lookup with strict presence and shape checks, for loading
/// checkpoints into typed parameter structs.
pub struct TensorMap {
    origin: std::path::PathBuf,
    entries: Vec<(String, Tensor)>,
    taken: Vec<bool>,
}

impl TensorMap {
    pub fn new(origin: &Path, entries: Vec<(String, Tensor)>) -> Self {
        let taken = vec![false; entries.len()];
        TensorMap {
            origin: origin.to_path_buf(),
            entries,
            taken,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(Self::new(path, load(path)?))
    }

    /// Remove a tensor by name, checking its shape.
    pub fn take(&mut self, name: &str, shape: &[usize]) -> Result<Tensor> {
        for (i, (n, t)) in self.entries.iter().enumerate() {
            if n == name && !self.taken[i] {
                if t.shape() != shape {
                    return Err(Error::data(
                        &self.origin,
                        format!("tensor `{name}` has shape {:?}, expected {:?}", t.shape(), shape),
                    ));
                }
                self.taken[i] = true;
                return Ok(self.entries[i].1.clone());
            }
        }
        Err(Error::data(&self.origin, format!("missing tensor `{name}`")))
    }

    /// Remove a tensor by name, accepting any shape. Used where layer widths
    /// are reconstructed from the stored shapes themselves.
    pub fn take_any(&mut self, name: &str) -> Result<Tensor> {
        for (i, (n, _)) in self.entries.iter().enumerate() {
            if n == name && !self.taken[i] {
                self.taken[i] = true;
                return Ok(self.entries[i].1.clone());
            }
        }
        Err(Error::data(&self.origin, format!("missing tensor `{name}`")))
    }

    /// Error if any entry was never taken (guards against loading a
    /// checkpoint from the wrong phase or configuration).
    pub fn finish(self) -> Result<()> {
        for (i, (n, _)) in self.entries.iter().enumerate() {
            if !self.taken[i] {
                return Err(Error::data(
                    &self.origin,
                    format!("unexpected tensor `{n}` in checkpoint"),
                ));
            }
        }
        Ok(())
    }
}

pub fn save_to_writer<W: Write>(w: &mut W, tensors: &[(String, &Tensor)]) -> Result<()> {
    let bytes = to_bytes(tensors)?;
    w.write_all(&bytes)
        .map_err(|e| Error::io("<writer>", e))
}

pub fn save_buffered(path: &Path, tensors: &[(String, &Tensor)]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut writer = BufWriter::new(file);
    save_to_writer(&mut writer, tensors)
}
