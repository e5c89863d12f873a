//! Tensor block format: for each block, name, dtype tag, shape and a raw
//! little-endian payload.
//!
//! ```text
//! u32 block_count
//! repeat:
//!   u32 name_len, name (utf-8)
//!   u8  dtype (0 = f32, 1 = f64)
//!   u32 ndim, u64 dims[ndim]
//!   u64 payload_len, payload
//! ```

use std::io::{Read, Write};

use super::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    fn tag(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(DType::F32),
            1 => Ok(DType::F64),
            t => Err(Error::Format(format!("unknown dtype tag {t}"))),
        }
    }

    fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TensorBlock {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub payload: Vec<u8>,
}

impl TensorBlock {
    pub fn from_tensor<T: Real>(name: &str, t: &Tensor<T>) -> Self {
        let mut payload = Vec::with_capacity(t.len() * T::DTYPE.width());
        for &x in t.data() {
            x.write_le(&mut payload);
        }
        Self {
            name: name.to_owned(),
            dtype: T::DTYPE,
            shape: t.shape().to_vec(),
            payload,
        }
    }

    /// Decodes the payload; converts when the stored dtype differs from `T`.
    pub fn to_tensor<T: Real>(&self) -> Result<Tensor<T>> {
        let w = self.dtype.width();
        let data = self
            .payload
            .chunks_exact(w)
            .map(|c| match self.dtype {
                DType::F32 => T::lit(f32::read_le(c) as f64),
                DType::F64 => T::lit(f64::read_le(c)),
            })
            .collect();
        Tensor::new(&self.shape, data)
    }
}

pub fn write_blocks<W: Write>(w: &mut W, blocks: &[TensorBlock]) -> Result<()> {
    w.write_all(&(blocks.len() as u32).to_le_bytes())?;
    for b in blocks {
        w.write_all(&(b.name.len() as u32).to_le_bytes())?;
        w.write_all(b.name.as_bytes())?;
        w.write_all(&[b.dtype.tag()])?;
        w.write_all(&(b.shape.len() as u32).to_le_bytes())?;
        for &d in &b.shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        w.write_all(&(b.payload.len() as u64).to_le_bytes())?;
        w.write_all(&b.payload)?;
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

pub fn read_blocks<R: Read>(r: &mut R) -> Result<Vec<TensorBlock>> {
    let count = read_u32(r)? as usize;
    let mut blocks = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| Error::Format(e.to_string()))?;
        let mut tag = [0u8; 1];
        r.read_exact(&mut tag)?;
        let dtype = DType::from_tag(tag[0])?;
        let ndim = read_u32(r)? as usize;
        let shape = (0..ndim)
            .map(|_| read_u64(r).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let len = read_u64(r)? as usize;
        if len != shape.iter().product::<usize>() * dtype.width() {
            return Err(Error::Format(format!(
                "block {name}: payload length {len} does not match shape {shape:?}"
            )));
        }
        let mut payload = vec![0u8; len];
        r.read_exact(&mut payload)?;
        blocks.push(TensorBlock {
            name,
            dtype,
            shape,
            payload,
        });
    }
    Ok(blocks)
}
