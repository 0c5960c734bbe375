//! Portable binary tensor format: header {magic "EPCT", version u32, rank u32,
//! dims u64[rank]} followed by a little-endian f64 payload. Checkpoints, the
//! dataset files and the oracle fixtures all use it.

use super::Tensor;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;
use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"EPCT";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TensorIoError {
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic bytes (not a tensor file)")]
    BadMagic,
    #[error("unsupported tensor format version {0}")]
    BadVersion(u32),
    #[error("tensor file truncated")]
    Truncated,
    #[error("unreasonable tensor header: rank {rank}, {elements} elements")]
    BadHeader { rank: u64, elements: u128 },
}

pub fn write_tensor<W: Write>(mut w: W, t: &Tensor) -> Result<(), TensorIoError> {
    w.write_all(&MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for &x in t.data() {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_tensor<R: Read>(mut r: R) -> Result<Tensor, TensorIoError> {
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic)?;
    if magic != MAGIC {
        return Err(TensorIoError::BadMagic);
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(TensorIoError::BadVersion(version));
    }
    let rank = read_u32(&mut r)? as u64;
    if rank > 8 {
        return Err(TensorIoError::BadHeader {
            rank,
            elements: 0,
        });
    }
    let mut shape = Vec::with_capacity(rank as usize);
    let mut elements: u128 = 1;
    for _ in 0..rank {
        let mut buf = [0u8; 8];
        read_exact(&mut r, &mut buf)?;
        let d = u64::from_le_bytes(buf);
        elements = elements.saturating_mul(d as u128);
        shape.push(d as usize);
    }
    if elements > (1 << 32) {
        return Err(TensorIoError::BadHeader { rank, elements });
    }
    let mut data = Vec::with_capacity(elements as usize);
    for _ in 0..elements {
        let mut buf = [0u8; 8];
        read_exact(&mut r, &mut buf)?;
        data.push(f64::from_le_bytes(buf));
    }
    Ok(Tensor::new(shape, data).expect("element count derived from shape"))
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<(), TensorIoError> {
    match r.read_exact(buf) {
        Ok(()) => Ok(()),
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => Err(TensorIoError::Truncated),
        Err(e) => Err(e.into()),
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, TensorIoError> {
    let mut buf = [0u8; 4];
    read_exact(r, &mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

pub fn save_tensor(path: &Path, t: &Tensor) -> Result<(), TensorIoError> {
    write_tensor(BufWriter::new(File::create(path)?), t)
}

pub fn load_tensor(path: &Path) -> Result<Tensor, TensorIoError> {
    read_tensor(BufReader::new(File::open(path)?))
}
