//! Named-tensor wire format used by checkpoints and dataset records.
//!
//! One record, all little-endian:
//!
//! ```text
//! u32  name length          (bytes)
//! ...  name                 (UTF-8)
//! u8   dtype tag            (0 = single, 1 = double)
//! u32  rank                 (always 4 here)
//! u32  extents[rank]        (N, C, H, W)
//! ...  raw values           (f32/f64 little-endian, row-major)
//! ```

use super::{DType, Scalar, Shape, Tensor};
use crate::error::{Error, Result};

pub fn write_named_tensor<T: Scalar>(out: &mut Vec<u8>, name: &str, t: &Tensor<T>) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(T::DTYPE.tag());
    out.extend_from_slice(&4u32.to_le_bytes());
    let s = t.shape();
    for extent in [s.n, s.c, s.h, s.w] {
        out.extend_from_slice(&(extent as u32).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(out);
    }
}

/// Cursor-style reader that remembers the byte offset for diagnostics.
pub struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    pub fn new(buf: &'a [u8]) -> Cursor<'a> {
        Cursor { buf, pos: 0 }
    }

    pub fn offset(&self) -> usize {
        self.pos
    }

    pub fn is_empty(&self) -> bool {
        self.pos >= self.buf.len()
    }

    pub fn take(&mut self, len: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + len > self.buf.len() {
            return Err(Error::Parse {
                offset: self.pos,
                msg: format!(
                    "truncated while reading {} ({} bytes wanted, {} left)",
                    what,
                    len,
                    self.buf.len() - self.pos
                ),
            });
        }
        let s = &self.buf[self.pos..self.pos + len];
        self.pos += len;
        Ok(s)
    }

    pub fn read_u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub fn read_u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
}

/// Read one named tensor. Rejects a record whose dtype tag does not match
/// the requested element type.
pub fn read_named_tensor<T: Scalar>(cur: &mut Cursor<'_>) -> Result<(String, Tensor<T>)> {
    let name_len = cur.read_u32("name length")? as usize;
    let name_off = cur.offset();
    let name_bytes = cur.take(name_len, "name")?;
    let name = std::str::from_utf8(name_bytes)
        .map_err(|e| Error::Parse {
            offset: name_off,
            msg: format!("name is not UTF-8: {e}"),
        })?
        .to_string();
    let tag_off = cur.offset();
    let tag = cur.read_u8("dtype tag")?;
    let dtype = DType::from_tag(tag).ok_or_else(|| Error::Parse {
        offset: tag_off,
        msg: format!("unknown dtype tag {tag}"),
    })?;
    if dtype != T::DTYPE {
        return Err(Error::Parse {
            offset: tag_off,
            msg: format!(
                "tensor '{name}' is stored as {dtype} but {} was requested",
                T::DTYPE
            ),
        });
    }
    let rank_off = cur.offset();
    let rank = cur.read_u32("rank")?;
    if rank != 4 {
        return Err(Error::Parse {
            offset: rank_off,
            msg: format!("only rank-4 tensors are supported, got rank {rank}"),
        });
    }
    let mut ext = [0usize; 4];
    for e in ext.iter_mut() {
        *e = cur.read_u32("extent")? as usize;
    }
    let shape = Shape::new(ext[0], ext[1], ext[2], ext[3]);
    let bytes = cur.take(shape.count() * T::BYTES, "tensor data")?;
    let data = bytes
        .chunks_exact(T::BYTES)
        .map(|c| T::read_le(c))
        .collect::<Vec<T>>();
    Ok((name, Tensor::from_vec(shape, data)?))
}
