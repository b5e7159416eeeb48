//! Flat binary parameter checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    [u8; 4]  = b"SGCK"
//! version  u32      = 1
//! count    u32
//! count records:
//!   name_len u32, name bytes (UTF-8)
//!   rank     u32, rank x u64 dims
//!   values   product(dims) x f64
//! ```
//!
//! Records are written in name order, so identical sets give identical bytes.

use std::io::{Read, Write};
use std::path::Path;

use super::{ParamSet, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"SGCK";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(params: &ParamSet, mut out: W) -> Result<()> {
    out.write_all(&CHECKPOINT_MAGIC)?;
    out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    out.write_all(&(params.len() as u32).to_le_bytes())?;
    for (name, t) in params.iter() {
        out.write_all(&(name.len() as u32).to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        out.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &d in t.shape() {
            out.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in t.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// Reads a checkpoint; `origin` only labels errors.
pub fn read_checkpoint<R: Read>(mut input: R, origin: &Path) -> Result<ParamSet> {
    let bad = |reason: &str| Error::format(origin, reason);
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(bad("bad magic"));
    }
    let version = read_u32(&mut input)?;
    if version != CHECKPOINT_VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let count = read_u32(&mut input)?;
    let mut set = ParamSet::new();
    for _ in 0..count {
        let len = read_u32(&mut input)? as usize;
        if len > 4096 {
            return Err(bad("parameter name too long"));
        }
        let mut name = vec![0u8; len];
        input.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| bad("name is not UTF-8"))?;
        let rank = read_u32(&mut input)? as usize;
        if rank > 8 {
            return Err(bad("rank too large"));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u64(&mut input)? as usize);
        }
        let n: usize = shape.iter().product();
        let mut raw = vec![0u8; n * 8];
        input.read_exact(&mut raw)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        set.insert(name, Tensor::new(shape, data)?)
            .map_err(|_| bad("duplicate parameter name"))?;
    }
    let mut rest = [0u8; 1];
    if input.read(&mut rest)? != 0 {
        return Err(bad("trailing bytes"));
    }
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut set = ParamSet::new();
        set.insert("a.w", Tensor::new(vec![2, 2], vec![1.0, -0.0, f64::MIN_POSITIVE, 1e300]).unwrap())
            .unwrap();
        set.insert("b", Tensor::scalar(std::f64::consts::PI)).unwrap();
        let mut bytes = Vec::new();
        write_checkpoint(&set, &mut bytes).unwrap();
        let back = read_checkpoint(bytes.as_slice(), Path::new("mem")).unwrap();
        let mut again = Vec::new();
        write_checkpoint(&back, &mut again).unwrap();
        assert_eq!(bytes, again);
        for ((_, a), (_, b)) in set.iter().zip(back.iter()) {
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
    }

    #[test]
    fn rejects_corruption() {
        let mut set = ParamSet::new();
        set.insert("w", Tensor::vector(vec![1.0, 2.0])).unwrap();
        let mut bytes = Vec::new();
        write_checkpoint(&set, &mut bytes).unwrap();
        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(read_checkpoint(bad_magic.as_slice(), Path::new("m")).is_err());
        assert!(read_checkpoint(&bytes[..bytes.len() - 3], Path::new("m")).is_err());
        let mut trailing = bytes.clone();
        trailing.push(0);
        assert!(read_checkpoint(trailing.as_slice(), Path::new("m")).is_err());
    }
}
