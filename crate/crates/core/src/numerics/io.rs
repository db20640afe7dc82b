//! Binary tensor files.
//!
//! A single tensor (`RIHF`) is the magic, a `u32` version (1), a `u32` rank,
//! one `u32` per dimension and the row-major payload as little-endian `f64`.
//! A container (`RIHM`) is the magic, a `u32` count, then for every entry a
//! `u16` name length, the UTF-8 name, and one full `RIHF` block.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const TENSOR_MAGIC: &[u8; 4] = b"RIHF";
pub const CONTAINER_MAGIC: &[u8; 4] = b"RIHM";
pub const VERSION: u32 = 1;

pub fn write_tensor<W: Write>(w: &mut W, t: &Tensor) -> std::io::Result<()> {
    w.write_all(TENSOR_MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(t.ndim() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for &v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|e| Error::Format(format!("truncated tensor data: {e}")))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_tensor<R: Read>(r: &mut R) -> Result<Tensor> {
    let mut magic = [0u8; 4];
    read_exact(r, &mut magic)?;
    if &magic != TENSOR_MAGIC {
        return Err(Error::Format(format!("bad tensor magic {magic:?}")));
    }
    let version = read_u32(r)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported tensor version {version}")));
    }
    let ndim = read_u32(r)? as usize;
    if ndim == 0 || ndim > 8 {
        return Err(Error::Format(format!("implausible rank {ndim}")));
    }
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        shape.push(read_u32(r)? as usize);
    }
    let n: usize = shape.iter().product();
    let mut bytes = vec![0u8; n * 8];
    read_exact(r, &mut bytes)?;
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::new(shape, data).map_err(|e| Error::Format(e.to_string()))
}

pub fn write_container<W: Write>(w: &mut W, entries: &[(String, Tensor)]) -> std::io::Result<()> {
    w.write_all(CONTAINER_MAGIC)?;
    w.write_all(&(entries.len() as u32).to_le_bytes())?;
    for (name, t) in entries {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u16).to_le_bytes())?;
        w.write_all(bytes)?;
        write_tensor(w, t)?;
    }
    Ok(())
}

pub fn read_container<R: Read>(r: &mut R) -> Result<Vec<(String, Tensor)>> {
    let mut magic = [0u8; 4];
    read_exact(r, &mut magic)?;
    if &magic != CONTAINER_MAGIC {
        return Err(Error::Format(format!("bad container magic {magic:?}")));
    }
    let count = read_u32(r)? as usize;
    let mut out = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let mut lb = [0u8; 2];
        read_exact(r, &mut lb)?;
        let mut name = vec![0u8; u16::from_le_bytes(lb) as usize];
        read_exact(r, &mut name)?;
        let name =
            String::from_utf8(name).map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        out.push((name, read_tensor(r)?));
    }
    Ok(out)
}

pub fn save_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let mut buf = Vec::new();
    write_tensor(&mut buf, t).expect("write to Vec");
    fs::write(&path, buf).map_err(|e| Error::io(&path, e))
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    read_tensor(&mut bytes.as_slice())
}

pub fn save_container(path: impl AsRef<Path>, entries: &[(String, Tensor)]) -> Result<()> {
    let mut buf = Vec::new();
    write_container(&mut buf, entries).expect("write to Vec");
    fs::write(&path, buf).map_err(|e| Error::io(&path, e))
}

pub fn load_container(path: impl AsRef<Path>) -> Result<Vec<(String, Tensor)>> {
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    read_container(&mut bytes.as_slice())
}
