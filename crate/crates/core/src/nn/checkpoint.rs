//! Model checkpoints.
//!
//! Layout: `b"LWCK"`, `u8` version (1), `u8` float width in bytes, `u32`
//! length plus UTF-8 architecture descriptor, `u32` tensor count, then the
//! parameter tensors in model order followed by each batch-norm layer's
//! running mean and variance (all in the tensor serialization format).
//! Gradient-accumulation caches are never stored.

use std::path::Path;

use super::arch::ArchSpec;
use super::model::Model;
use crate::error::{Error, Result};
use crate::tensor::{read_tensor, write_tensor, Real, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"LWCK";
pub const CHECKPOINT_VERSION: u8 = 1;

fn fmt_err(offset: usize, msg: impl Into<String>) -> Error {
    Error::Format {
        offset: offset as u64,
        msg: msg.into(),
    }
}

impl<T: Real> Model<T> {
    pub fn to_checkpoint_bytes(&self) -> Result<Vec<u8>> {
        let arch = self
            .arch()
            .ok_or_else(|| {
                Error::Config("only models built from an architecture can be saved".into())
            })?
            .to_string();
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.push(CHECKPOINT_VERSION);
        out.push(T::BYTES as u8);
        out.extend_from_slice(&(arch.len() as u32).to_le_bytes());
        out.extend_from_slice(arch.as_bytes());
        let stats: Vec<Tensor<T>> = self
            .running_list()
            .flat_map(|r| [r.mean.clone(), r.var.clone()])
            .map(|v| Tensor::vector(v).expect("bn has channels"))
            .collect();
        let count = self.params().len() + stats.len();
        out.extend_from_slice(&(count as u32).to_le_bytes());
        for t in self.params().iter().chain(&stats) {
            write_tensor(&mut out, t).expect("writing to a Vec cannot fail");
        }
        Ok(out)
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 10 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(fmt_err(0, "not a checkpoint (bad magic)"));
        }
        if bytes[4] != CHECKPOINT_VERSION {
            return Err(fmt_err(
                4,
                format!("unsupported checkpoint version {}", bytes[4]),
            ));
        }
        if bytes[5] as usize != T::BYTES {
            return Err(fmt_err(
                5,
                format!(
                    "checkpoint stores {}-byte floats, expected {}",
                    bytes[5],
                    T::BYTES
                ),
            ));
        }
        let u32_at = |at: usize| -> Result<usize> {
            bytes
                .get(at..at + 4)
                .map(|b| u32::from_le_bytes(b.try_into().unwrap()) as usize)
                .ok_or_else(|| fmt_err(at, "truncated header"))
        };
        let len = u32_at(6)?;
        let desc = bytes
            .get(10..10 + len)
            .ok_or_else(|| fmt_err(10, "truncated architecture descriptor"))?;
        let desc = std::str::from_utf8(desc).map_err(|e| fmt_err(10, e.to_string()))?;
        let arch: ArchSpec = desc.parse()?;
        let mut model = Model::new(&arch, 0)?;

        let mut at = 10 + len;
        let count = u32_at(at)?;
        at += 4;
        let n_params = model.params().len();
        let n_stats = 2 * model.running_list().count();
        if count != n_params + n_stats {
            return Err(fmt_err(
                at - 4,
                format!("expected {} tensors, found {count}", n_params + n_stats),
            ));
        }
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let mut rest = &bytes[at..];
            let before = rest.len();
            let t: Tensor<T> = read_tensor(&mut rest, at as u64)?;
            tensors.push((at, t));
            at += before - rest.len();
        }
        if at != bytes.len() {
            return Err(fmt_err(at, "trailing bytes after checkpoint"));
        }
        let mut iter = tensors.into_iter();
        for p in model.params_mut() {
            let (off, t) = iter.next().expect("counted");
            if t.shape() != p.shape() {
                return Err(fmt_err(
                    off,
                    format!(
                        "tensor shape {:?} does not match {:?}",
                        t.shape(),
                        p.shape()
                    ),
                ));
            }
            *p = t;
        }
        for rs in model.running_list_mut() {
            for slot in [&mut rs.mean, &mut rs.var] {
                let (off, t) = iter.next().expect("counted");
                if t.len() != slot.len() {
                    return Err(fmt_err(off, "batch-norm statistics length mismatch"));
                }
                *slot = t.into_data();
            }
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let bytes = self.to_checkpoint_bytes()?;
        std::fs::write(path.as_ref(), bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = std::fs::read(path.as_ref()).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint_bytes(&bytes)
    }
}
