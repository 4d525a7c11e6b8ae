//! The `TCT1` on-disk tensor format.
//!
//! Layout, all little-endian: 4-byte magic `TCT1`, `u32` rank, one `u32` per
//! dimension, then the payload as row-major `f32`. The element type on disk
//! is always `f32` regardless of the in-memory scalar, so checkpoints are
//! interchangeable between precisions (and bit-exact in the default `f32`
//! pipeline).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::Tensor;

pub const TCT1_MAGIC: &[u8; 4] = b"TCT1";

/// Guards against absurd headers in corrupt files.
const MAX_RANK: u32 = 8;
const MAX_NUMEL: u64 = 1 << 30;

/// Serializes one tensor into a stream.
pub fn write_tensor<S: Scalar, W: Write>(w: &mut W, t: &Tensor<S>) -> Result<()> {
    w.write_all(TCT1_MAGIC)?;
    w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
    for d in t.shape() {
        w.write_all(&(*d as u32).to_le_bytes())?;
    }
    for v in t.data() {
        w.write_all(&v.as_f32().to_le_bytes())?;
    }
    Ok(())
}

/// Reads one tensor from a stream, leaving the cursor right after its
/// payload (tensors can be concatenated back to back).
pub fn read_tensor<S: Scalar, R: Read>(r: &mut R) -> Result<Tensor<S>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|e| Error::malformed("tensor header", format!("missing magic: {e}")))?;
    if &magic != TCT1_MAGIC {
        return Err(Error::malformed(
            "tensor header",
            format!("bad magic {magic:?}, expected {TCT1_MAGIC:?}"),
        ));
    }
    let rank = read_u32(r)?;
    if rank > MAX_RANK {
        return Err(Error::malformed("tensor header", format!("rank {rank} exceeds {MAX_RANK}")));
    }
    let mut shape = Vec::with_capacity(rank as usize);
    let mut numel: u64 = 1;
    for _ in 0..rank {
        let d = read_u32(r)?;
        numel = numel.saturating_mul(u64::from(d.max(1)));
        shape.push(d as usize);
    }
    if numel > MAX_NUMEL {
        return Err(Error::malformed(
            "tensor header",
            format!("{numel} elements exceed the {MAX_NUMEL} limit"),
        ));
    }
    let count: usize = shape.iter().product();
    let mut payload = vec![0u8; count * 4];
    r.read_exact(&mut payload)
        .map_err(|e| Error::malformed("tensor payload", format!("truncated: {e}")))?;
    let data = payload
        .chunks_exact(4)
        .map(|b| S::of_f32(f32::from_le_bytes([b[0], b[1], b[2], b[3]])))
        .collect();
    Tensor::new(shape, data)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|e| Error::malformed("tensor header", format!("truncated: {e}")))?;
    Ok(u32::from_le_bytes(b))
}

/// Writes a single tensor to a file.
pub fn save_tensor<S: Scalar>(path: &Path, t: &Tensor<S>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_tensor(&mut w, t)?;
    w.flush()?;
    Ok(())
}

/// Reads a single tensor from a file, rejecting trailing bytes.
pub fn load_tensor<S: Scalar>(path: &Path) -> Result<Tensor<S>> {
    let mut r = BufReader::new(File::open(path)?);
    let t = read_tensor(&mut r)?;
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::malformed("tensor file", "trailing bytes after payload".to_string()));
    }
    Ok(t)
}
