//! Binary tensor files ("GKTN" format).
//!
//! Layout: magic bytes `GKTN`, version byte `0x01`, one byte ndim, then
//! ndim little-endian u64 extents, then the row-major data as 32-bit
//! little-endian IEEE-754. Used by the CLI to exchange features, weights,
//! and predictions.

use super::Tensor;
use crate::error::{Error, Result};
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"GKTN";
const VERSION: u8 = 0x01;
const MAX_NDIM: u8 = 8;

pub fn write_tensor_to(writer: &mut impl Write, tensor: &Tensor<f32>) -> Result<()> {
    let shape = tensor.shape();
    if shape.len() > MAX_NDIM as usize {
        return Err(Error::TensorFile(format!(
            "tensor rank {} exceeds format maximum {MAX_NDIM}",
            shape.len()
        )));
    }
    writer.write_all(MAGIC)?;
    writer.write_all(&[VERSION, shape.len() as u8])?;
    for &e in shape {
        writer.write_all(&(e as u64).to_le_bytes())?;
    }
    for &v in tensor.data() {
        writer.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_tensor_from(reader: &mut impl Read) -> Result<Tensor<f32>> {
    let mut header = [0u8; 6];
    reader.read_exact(&mut header)?;
    if &header[..4] != MAGIC {
        return Err(Error::TensorFile(format!(
            "bad magic {:02x?}, expected \"GKTN\"",
            &header[..4]
        )));
    }
    if header[4] != VERSION {
        return Err(Error::TensorFile(format!(
            "unsupported version {}, expected {VERSION}",
            header[4]
        )));
    }
    let ndim = header[5];
    if ndim == 0 || ndim > MAX_NDIM {
        return Err(Error::TensorFile(format!(
            "ndim {ndim} outside supported range 1..={MAX_NDIM}"
        )));
    }
    let mut shape = Vec::with_capacity(ndim as usize);
    let mut extent = [0u8; 8];
    for _ in 0..ndim {
        reader.read_exact(&mut extent)?;
        let e = u64::from_le_bytes(extent);
        if e == 0 {
            return Err(Error::TensorFile("zero extent in tensor file".into()));
        }
        shape.push(e as usize);
    }
    let count: usize = shape.iter().product();
    let mut bytes = vec![0u8; count * 4];
    reader.read_exact(&mut bytes)?;
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor::new(shape, data)
}

pub fn write_tensor(path: impl AsRef<Path>, tensor: &Tensor<f32>) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_tensor_to(&mut file, tensor)?;
    file.flush()?;
    Ok(())
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
    read_tensor_from(&mut file)
}
