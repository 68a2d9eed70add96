//! Binary parameter checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      5 bytes   "XLSR\0"
//! version    u8        1
//! config_len u32       length of the JSON segmentor config that follows
//! config     bytes     UTF-8 JSON
//! count      u32       number of tensors
//! per tensor:
//!   name_len u32, name bytes (UTF-8)
//!   ndim     u32, ndim × u64 dimensions
//!   values   f64 × product(dims), row-major
//! ```

use std::io::{Read, Write};

use super::model::{Param, Segmentor, SegmentorConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"XLSR\0";
pub const CHECKPOINT_VERSION: u8 = 1;

pub fn write_checkpoint<W: Write>(mut out: W, net: &Segmentor) -> Result<()> {
    out.write_all(CHECKPOINT_MAGIC)?;
    out.write_all(&[CHECKPOINT_VERSION])?;
    let cfg = serde_json::to_vec(net.config())?;
    write_u32(&mut out, cfg.len())?;
    out.write_all(&cfg)?;
    write_u32(&mut out, net.params().len())?;
    for p in net.params() {
        write_u32(&mut out, p.name.len())?;
        out.write_all(p.name.as_bytes())?;
        write_u32(&mut out, p.value.shape().len())?;
        for &d in p.value.shape() {
            out.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in p.value.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut input: R) -> Result<Segmentor> {
    let mut magic = [0u8; 5];
    input.read_exact(&mut magic).map_err(truncated)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = read_bytes(&mut input, 1)?[0];
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let cfg_len = read_u32(&mut input)?;
    let config: SegmentorConfig = serde_json::from_slice(&read_bytes(&mut input, cfg_len)?)
        .map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
    let count = read_u32(&mut input)?;
    let mut params = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let name_len = read_u32(&mut input)?;
        let name = String::from_utf8(read_bytes(&mut input, name_len)?)
            .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?;
        let ndim = read_u32(&mut input)?;
        let mut shape = Vec::with_capacity(ndim.min(8));
        for _ in 0..ndim {
            let d = u64::from_le_bytes(read_bytes(&mut input, 8)?.try_into().expect("8 bytes"));
            shape.push(usize::try_from(d).map_err(|_| Error::Format("dimension overflows usize".into()))?);
        }
        let len: usize = shape.iter().product();
        let raw = read_bytes(&mut input, len.checked_mul(8).ok_or_else(|| Error::Format("tensor too large".into()))?)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let value = Tensor::new(&shape, data).map_err(|e| Error::Format(e.to_string()))?;
        params.push(Param { name, value });
    }
    let mut rest = Vec::new();
    input.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(Error::Format(format!("{} trailing bytes after checkpoint", rest.len())));
    }
    Segmentor::from_params(&config, params).map_err(|e| Error::Format(e.to_string()))
}

fn write_u32<W: Write>(out: &mut W, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::InvalidArgument(format!("{v} does not fit in u32")))?;
    out.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_u32<R: Read>(input: &mut R) -> Result<usize> {
    Ok(u32::from_le_bytes(read_bytes(input, 4)?.try_into().expect("4 bytes")) as usize)
}

fn read_bytes<R: Read>(input: &mut R, n: usize) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    input.take(n as u64).read_to_end(&mut buf)?;
    if buf.len() != n {
        return Err(Error::Format("checkpoint is truncated".into()));
    }
    Ok(buf)
}

fn truncated(e: std::io::Error) -> Error {
    match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format("checkpoint is truncated".into()),
        _ => Error::Io(e),
    }
}
