//! Binary tensor serialization.
//!
//! Layout: `b"LWAT"`, `u8` version (1), `u8` rank, `rank × u32` little-endian
//! extents, then the elements as raw little-endian floats of the tensor's
//! precision.

use std::io::{Read, Write};

use super::{check_shape, Real, Tensor};
use crate::error::{Error, Result};

pub const TENSOR_MAGIC: &[u8; 4] = b"LWAT";
pub const TENSOR_VERSION: u8 = 1;

pub fn write_tensor<T: Real, W: Write>(out: &mut W, t: &Tensor<T>) -> std::io::Result<()> {
    let mut buf = Vec::with_capacity(6 + 4 * t.rank() + T::BYTES * t.len());
    buf.extend_from_slice(TENSOR_MAGIC);
    buf.push(TENSOR_VERSION);
    buf.push(t.rank() as u8);
    for &d in t.shape() {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(&mut buf);
    }
    out.write_all(&buf)
}

/// Reads one tensor. `base` is the stream offset of the first byte, used
/// only for error reporting.
pub fn read_tensor<T: Real, R: Read>(input: &mut R, base: u64) -> Result<Tensor<T>> {
    let mut at = base;
    let mut take = |n: usize, what: &str| -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        input.read_exact(&mut buf).map_err(|e| Error::Format {
            offset: at,
            msg: format!("truncated {what}: {e}"),
        })?;
        at += n as u64;
        Ok(buf)
    };
    let head = take(6, "tensor header")?;
    if &head[..4] != TENSOR_MAGIC {
        return Err(Error::Format {
            offset: base,
            msg: format!("bad tensor magic {:?}", &head[..4]),
        });
    }
    if head[4] != TENSOR_VERSION {
        return Err(Error::Format {
            offset: base + 4,
            msg: format!("unsupported tensor version {}", head[4]),
        });
    }
    let rank = head[5] as usize;
    let dims = take(4 * rank, "tensor extents")?;
    let shape: Vec<usize> = dims
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    let len = check_shape(&shape).map_err(|e| Error::Format {
        offset: base + 6,
        msg: e.to_string(),
    })?;
    let raw = take(len * T::BYTES, "tensor data")?;
    let data = raw.chunks_exact(T::BYTES).map(T::read_le).collect();
    Ok(Tensor::from_parts(shape, data))
}

impl<T: Real> Tensor<T> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        write_tensor(&mut out, self).expect("writing to a Vec cannot fail");
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cursor = bytes;
        let t = read_tensor(&mut cursor, 0)?;
        if !cursor.is_empty() {
            return Err(Error::Format {
                offset: (bytes.len() - cursor.len()) as u64,
                msg: format!("{} trailing bytes after tensor", cursor.len()),
            });
        }
        Ok(t)
    }
}
