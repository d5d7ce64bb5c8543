//! `NRT1` tensor dumps: magic, dtype code (u8), rank (u8), extents (u64 LE),
//! then the raw little-endian payload.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::{DType, Scalar, Tensor};
use crate::error::{NernError, Result};

pub const TENSOR_MAGIC: &[u8; 4] = b"NRT1";

pub fn write_tensor<T: Scalar, W: Write>(tensor: &Tensor<T>, mut out: W) -> Result<()> {
    let mut buf = Vec::with_capacity(6 + 8 * tensor.rank() + tensor.len() * T::DTYPE.size());
    buf.extend_from_slice(TENSOR_MAGIC);
    buf.push(T::DTYPE as u8);
    buf.push(u8::try_from(tensor.rank()).map_err(|_| NernError::Codec("rank exceeds 255".into()))?);
    for &e in tensor.shape() {
        buf.extend_from_slice(&(e as u64).to_le_bytes());
    }
    for &v in tensor.data() {
        v.write_le(&mut buf);
    }
    out.write_all(&buf)?;
    Ok(())
}

pub fn read_tensor<T: Scalar, R: Read>(mut input: R) -> Result<Tensor<T>> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    let truncated = || NernError::Codec("truncated tensor dump".into());
    if bytes.len() < 6 {
        return Err(truncated());
    }
    if &bytes[..4] != TENSOR_MAGIC {
        return Err(NernError::Codec("bad tensor magic".into()));
    }
    let dtype = DType::from_code(bytes[4])
        .ok_or_else(|| NernError::Codec(format!("unknown dtype code {}", bytes[4])))?;
    if dtype != T::DTYPE {
        return Err(NernError::Codec(format!(
            "dtype {dtype:?} does not match requested {:?}",
            T::DTYPE
        )));
    }
    let rank = bytes[5] as usize;
    let mut pos = 6;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let chunk = bytes.get(pos..pos + 8).ok_or_else(truncated)?;
        shape.push(u64::from_le_bytes(chunk.try_into().unwrap()) as usize);
        pos += 8;
    }
    let n: usize = shape.iter().product();
    let width = dtype.size();
    let payload = bytes.get(pos..pos + n * width).ok_or_else(truncated)?;
    if bytes.len() != pos + n * width {
        return Err(NernError::Codec("trailing bytes after tensor payload".into()));
    }
    let data = payload.chunks_exact(width).map(T::read_le).collect();
    Tensor::new(shape, data)
}

pub fn write_tensor_file<T: Scalar>(tensor: &Tensor<T>, path: impl AsRef<Path>) -> Result<()> {
    let file = fs::File::create(path)?;
    write_tensor(tensor, std::io::BufWriter::new(file))
}

pub fn read_tensor_file<T: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    read_tensor(fs::File::open(path)?)
}
