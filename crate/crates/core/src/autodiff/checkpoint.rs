//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "PCDK"  u32 version  u32 count
//! count × { u32 name_len, name (UTF-8), u32 rank, rank × u64 extent, f64 payload }
//! optional trailer: u64 text_len, UTF-8 key=value text
//! ```

use std::io::{Read, Write};

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"PCDK";
pub const VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(mut w: W, params: &ParamStore, config_text: Option<&str>) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(params.len() as u32).to_le_bytes())?;
    for (name, t) in params.iter() {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &e in t.shape() {
            w.write_all(&(e as u64).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(t.len() * 8);
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    if let Some(text) = config_text {
        w.write_all(&(text.len() as u64).to_le_bytes())?;
        w.write_all(text.as_bytes())?;
    }
    w.flush()?;
    Ok(())
}

fn read_exact<R: Read, const N: usize>(r: &mut R, what: &str) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Format(format!("truncated while reading {what}: {e}")))?;
    Ok(buf)
}

/// Reads tensors and the optional config trailer.
pub fn read_checkpoint<R: Read>(mut r: R) -> Result<(ParamStore, Option<String>)> {
    let magic: [u8; 4] = read_exact(&mut r, "magic")?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}")));
    }
    let version = u32::from_le_bytes(read_exact(&mut r, "version")?);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let count = u32::from_le_bytes(read_exact(&mut r, "tensor count")?);
    let mut params = ParamStore::new();
    for _ in 0..count {
        let name_len = u32::from_le_bytes(read_exact(&mut r, "name length")?) as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)
            .map_err(|e| Error::Format(format!("truncated name: {e}")))?;
        let name = String::from_utf8(name).map_err(|e| Error::Format(format!("name is not UTF-8: {e}")))?;
        let rank = u32::from_le_bytes(read_exact(&mut r, "rank")?) as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u64::from_le_bytes(read_exact(&mut r, "extent")?) as usize);
        }
        let n: usize = shape.iter().product();
        let mut raw = vec![0u8; n * 8];
        r.read_exact(&mut raw)
            .map_err(|e| Error::Format(format!("truncated payload of '{name}': {e}")))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        params.insert(name, Tensor::new(shape, data)?);
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    let config = if rest.is_empty() {
        None
    } else {
        if rest.len() < 8 {
            return Err(Error::Format("truncated config trailer".into()));
        }
        let len = u64::from_le_bytes(rest[..8].try_into().unwrap()) as usize;
        let body = rest
            .get(8..8 + len)
            .ok_or_else(|| Error::Format("config trailer shorter than declared".into()))?;
        Some(String::from_utf8(body.to_vec()).map_err(|e| Error::Format(format!("config is not UTF-8: {e}")))?)
    };
    Ok((params, config))
}
