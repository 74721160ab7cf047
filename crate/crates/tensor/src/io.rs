//! FTensor v1 binary format.
//!
//! Layout: magic `FTSR`, `u8` version (1), `u8` dtype code (0 = f32, 1 = f64),
//! `u8` rank, `rank` little-endian `u64` extents, then the row-major data in
//! little-endian byte order.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Result, TensorError};
use crate::real::{DType, Real};
use crate::tensor::{numel, Tensor};

pub const MAGIC: &[u8; 4] = b"FTSR";
pub const VERSION: u8 = 1;

pub fn encode<T: Real>(tensor: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(7 + 8 * tensor.rank() + tensor.numel() * T::DTYPE.size_of());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(T::DTYPE.code());
    out.push(tensor.rank() as u8);
    for &e in tensor.shape() {
        out.extend_from_slice(&(e as u64).to_le_bytes());
    }
    for &v in tensor.data() {
        v.write_le(&mut out);
    }
    out
}

/// Parsed header: dtype, shape and the byte offset where data begins.
pub struct Header {
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub data_offset: usize,
}

pub fn parse_header(bytes: &[u8]) -> Result<Header> {
    if bytes.len() < 7 || &bytes[..4] != MAGIC {
        return Err(TensorError::Format("missing FTSR magic".into()));
    }
    if bytes[4] != VERSION {
        return Err(TensorError::Format(format!("unsupported version {}", bytes[4])));
    }
    let dtype = DType::from_code(bytes[5])
        .ok_or_else(|| TensorError::Format(format!("unknown dtype code {}", bytes[5])))?;
    let rank = bytes[6] as usize;
    let data_offset = 7 + 8 * rank;
    if bytes.len() < data_offset {
        return Err(TensorError::Format("truncated header".into()));
    }
    let shape = (0..rank)
        .map(|i| {
            let raw = u64::from_le_bytes(bytes[7 + 8 * i..15 + 8 * i].try_into().expect("8 bytes"));
            usize::try_from(raw).map_err(|_| TensorError::Format(format!("extent {raw} too large")))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Header {
        dtype,
        shape,
        data_offset,
    })
}

/// Decodes one tensor from the front of `bytes`; returns it with the number
/// of bytes consumed.
pub fn decode<T: Real>(bytes: &[u8]) -> Result<(Tensor<T>, usize)> {
    let header = parse_header(bytes)?;
    if header.dtype != T::DTYPE {
        return Err(TensorError::Format(format!(
            "stored dtype {} but {} requested",
            header.dtype.name(),
            T::DTYPE.name()
        )));
    }
    let width = T::DTYPE.size_of();
    let count = numel(&header.shape);
    let end = header.data_offset + count * width;
    if bytes.len() < end {
        return Err(TensorError::Format(format!(
            "expected {} data bytes, found {}",
            count * width,
            bytes.len() - header.data_offset
        )));
    }
    let data = bytes[header.data_offset..end].chunks_exact(width).map(T::read_le).collect();
    Ok((Tensor::new(header.shape, data)?, end))
}

pub fn write<T: Real>(mut w: impl Write, tensor: &Tensor<T>) -> Result<()> {
    w.write_all(&encode(tensor))?;
    Ok(())
}

pub fn read<T: Real>(mut r: impl Read) -> Result<Tensor<T>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let (tensor, used) = decode(&bytes)?;
    if used != bytes.len() {
        return Err(TensorError::Format(format!("{} trailing bytes", bytes.len() - used)));
    }
    Ok(tensor)
}

pub fn save<T: Real>(path: impl AsRef<Path>, tensor: &Tensor<T>) -> Result<()> {
    fs::write(path, encode(tensor))?;
    Ok(())
}

pub fn load<T: Real>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    read(fs::File::open(path)?)
}
