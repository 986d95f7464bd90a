//! AOTN binary tensor files.
//!
//! Layout: magic `AOTN`, `u8` version (1), `u8` dtype code (1 = f64), `u8`
//! rank, `rank` little-endian `u64` extents, then the row-major little-endian
//! payload. Round trips are bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"AOTN";
pub const VERSION: u8 = 1;
pub const DTYPE_F64: u8 = 1;

pub fn write_tensor<W: Write>(mut w: W, t: &Tensor) -> Result<()> {
    let rank = u8::try_from(t.shape().len())
        .map_err(|_| TensorError::Format(format!("rank {} too large", t.shape().len())))?;
    w.write_all(MAGIC)?;
    w.write_all(&[VERSION, DTYPE_F64, rank])?;
    for &e in t.shape() {
        w.write_all(&(e as u64).to_le_bytes())?;
    }
    for &v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_tensor<R: Read>(mut r: R) -> Result<Tensor> {
    let mut head = [0u8; 7];
    r.read_exact(&mut head)?;
    if &head[..4] != MAGIC {
        return Err(TensorError::Format("bad magic".into()));
    }
    if head[4] != VERSION {
        return Err(TensorError::Format(format!("unsupported version {}", head[4])));
    }
    if head[5] != DTYPE_F64 {
        return Err(TensorError::Format(format!("unsupported dtype code {}", head[5])));
    }
    let rank = head[6] as usize;
    let mut shape = Vec::with_capacity(rank);
    let mut buf = [0u8; 8];
    for _ in 0..rank {
        r.read_exact(&mut buf)?;
        let e = u64::from_le_bytes(buf);
        shape.push(usize::try_from(e).map_err(|_| TensorError::Format("extent overflow".into()))?);
    }
    let numel = shape
        .iter()
        .try_fold(1usize, |acc, &e| acc.checked_mul(e))
        .ok_or_else(|| TensorError::Format("element count overflow".into()))?;
    let mut data = Vec::with_capacity(numel);
    for _ in 0..numel {
        r.read_exact(&mut buf)?;
        data.push(f64::from_le_bytes(buf));
    }
    Tensor::new(shape, data).map_err(|e| TensorError::Format(e.to_string()))
}

pub fn save(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_tensor(&mut w, t)?;
    w.flush()?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Tensor> {
    read_tensor(BufReader::new(File::open(path)?))
}

/// Serialized bytes of a tensor.
pub fn to_bytes(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(7 + 8 * (t.shape().len() + t.numel()));
    write_tensor(&mut out, t).expect("writing to a Vec cannot fail");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let t = Tensor::new(vec![2, 1], vec![1.5, -0.0]).unwrap();
        let b = to_bytes(&t);
        assert_eq!(&b[..4], b"AOTN");
        assert_eq!(&b[4..7], &[1, 1, 2]);
        assert_eq!(u64::from_le_bytes(b[7..15].try_into().unwrap()), 2);
        assert_eq!(b.len(), 7 + 16 + 16);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let t = Tensor::vector(vec![1.0, 2.0]);
        let mut b = to_bytes(&t);
        assert!(read_tensor(&b[..b.len() - 1]).is_err());
        b[0] = b'X';
        assert!(matches!(read_tensor(&b[..]), Err(TensorError::Format(_))));
    }
}
