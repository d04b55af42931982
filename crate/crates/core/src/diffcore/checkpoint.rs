//! Binary parameter checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "CCLTCKPT"
//! version  u32      currently 1
//! count    u32      number of entries
//! entry*:
//!   kind   u8       0 = parameter, 1 = buffer
//!   group  u8       parameter group code (0 for buffers)
//!   name   u32 length + UTF-8 bytes
//!   ndim   u32, then ndim x u64 dimensions
//!   data   product(dims) x f64 (IEEE-754 bits, little-endian)
//! ```

use std::io::{Read, Write};

use super::params::{ParamGroup, ParameterStore};
use super::tensor::Tensor;
use super::TensorError;

pub const MAGIC: &[u8; 8] = b"CCLTCKPT";
pub const VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(store: &ParameterStore, mut w: W) -> Result<(), TensorError> {
    let count = store.len() + store.buffers().count();
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(count as u32).to_le_bytes())?;
    for (name, p) in store.iter() {
        write_entry(&mut w, 0, p.group.code(), name, &p.value)?;
    }
    for (name, t) in store.buffers() {
        write_entry(&mut w, 1, 0, name, t)?;
    }
    Ok(())
}

fn write_entry<W: Write>(w: &mut W, kind: u8, group: u8, name: &str, t: &Tensor) -> Result<(), TensorError> {
    w.write_all(&[kind, group])?;
    w.write_all(&(name.len() as u32).to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, TensorError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<ParameterStore, TensorError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(TensorError::Checkpoint("bad magic".into()));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(TensorError::Checkpoint(format!("unsupported version {version}")));
    }
    let count = read_u32(&mut r)?;
    let mut store = ParameterStore::new();
    for _ in 0..count {
        let mut kg = [0u8; 2];
        r.read_exact(&mut kg)?;
        let len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| TensorError::Checkpoint(e.to_string()))?;
        let ndim = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            shape.push(u64::from_le_bytes(b) as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            data.push(f64::from_le_bytes(b));
        }
        let t = Tensor::new(shape, data)?;
        match kg[0] {
            0 => {
                let group = ParamGroup::from_code(kg[1])
                    .ok_or_else(|| TensorError::Checkpoint(format!("unknown group {}", kg[1])))?;
                store.insert(name, group, t)?;
            }
            1 => store.insert_buffer(name, t)?,
            k => return Err(TensorError::Checkpoint(format!("unknown entry kind {k}"))),
        }
    }
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut s = ParameterStore::new();
        s.insert("a", ParamGroup::Encoder, Tensor::matrix(2, 2, vec![1.0, -0.0, f64::MIN_POSITIVE, 1e300]).unwrap())
            .unwrap();
        s.insert("b", ParamGroup::Scheduler, Tensor::row(&[std::f64::consts::PI])).unwrap();
        s.insert_buffer("a.running_mean", Tensor::row(&[0.1, 0.2])).unwrap();
        let mut bytes = Vec::new();
        write_checkpoint(&s, &mut bytes).unwrap();
        let back = read_checkpoint(bytes.as_slice()).unwrap();
        assert_eq!(back, s);
        let bits: Vec<u64> = back.value("a").unwrap().data().iter().map(|v| v.to_bits()).collect();
        let orig: Vec<u64> = s.value("a").unwrap().data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(bits, orig);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(read_checkpoint(&b"NOTACKPT\x01\0\0\0\0\0\0\0"[..]).is_err());
        let mut s = ParameterStore::new();
        s.insert("a", ParamGroup::Head, Tensor::row(&[1.0, 2.0])).unwrap();
        let mut bytes = Vec::new();
        write_checkpoint(&s, &mut bytes).unwrap();
        bytes.truncate(bytes.len() - 3);
        assert!(read_checkpoint(bytes.as_slice()).is_err());
    }
}
