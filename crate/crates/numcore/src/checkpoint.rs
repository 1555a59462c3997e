//! Named-tensor container.
//!
//! Layout (all integers little-endian):
//! `"T2TDCKPT"`, version `u8`, record count `u64`, then per record:
//! name length `u32`, UTF-8 name, rank `u32`, dims `u64 x rank`, data `f32 x n`.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{NumError, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"T2TDCKPT";
pub const CHECKPOINT_VERSION: u8 = 1;

pub fn encode_tensors<'a, I>(tensors: I) -> Vec<u8>
where
    I: IntoIterator<Item = (&'a str, &'a Tensor)>,
{
    let records: Vec<_> = tensors.into_iter().collect();
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.push(CHECKPOINT_VERSION);
    out.extend_from_slice(&(records.len() as u64).to_le_bytes());
    for (name, t) in records {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(NumError::Format("truncated checkpoint".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode_tensors(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != CHECKPOINT_MAGIC {
        return Err(NumError::Format("bad magic, not a checkpoint".into()));
    }
    let version = r.take(1)?[0];
    if version != CHECKPOINT_VERSION {
        return Err(NumError::Format(format!("unsupported checkpoint version {version}")));
    }
    let count = r.u64()?;
    let mut out = Vec::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|e| NumError::Format(format!("tensor name: {e}")))?
            .to_string();
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = r.take(n * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(NumError::Format("trailing bytes after last record".into()));
    }
    Ok(out)
}

/// Writes to a sibling temp file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn save_store(store: &ParamStore, path: &Path) -> Result<()> {
    write_atomic(path, &encode_tensors(store.iter()))
}

pub fn read_tensors(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_tensors(&bytes)
}

/// Overwrites the tensors of `store` from a checkpoint. Every stored name must
/// exist with the same shape; names missing from the file are an error too.
pub fn load_into(store: &mut ParamStore, path: &Path) -> Result<()> {
    let records = read_tensors(path)?;
    let mut seen = vec![false; store.len()];
    for (name, t) in records {
        let id = store.id(&name)?;
        if store.get(id).shape() != t.shape() {
            return Err(NumError::Shape {
                op: "load checkpoint",
                lhs: store.get(id).shape().to_vec(),
                rhs: t.shape().to_vec(),
            });
        }
        *store.get_mut(id) = t;
        seen[id.index()] = true;
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(NumError::Format(format!(
            "checkpoint {} lacks parameter `{}`",
            path.display(),
            store.name(crate::params::ParamId(missing))
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_names_shapes_and_f32_values() {
        let mut store = ParamStore::new();
        store
            .add(
                "a.w",
                Tensor::matrix(2, 3, vec![0.1, -2.0, 3.5, 1e-8, 7.0, -0.25]).unwrap(),
            )
            .unwrap();
        store.add("b", Tensor::scalar(std::f64::consts::PI)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_store(&store, &path).unwrap();
        let mut other = store.clone();
        other.get_mut(other.id("b").unwrap()).data_mut()[0] = 0.0;
        load_into(&mut other, &path).unwrap();
        for ((n1, t1), (n2, t2)) in store.iter().zip(other.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(t1.shape(), t2.shape());
            for (a, b) in t1.data().iter().zip(t2.data()) {
                assert_eq!((*a as f32).to_bits(), (*b as f32).to_bits());
            }
        }
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..8], CHECKPOINT_MAGIC);
        assert_eq!(bytes[8], CHECKPOINT_VERSION);
    }

    #[test]
    fn bad_magic_and_truncation_are_rejected() {
        assert!(matches!(decode_tensors(b"NOTACKPT\x01"), Err(NumError::Format(_))));
        let mut store = ParamStore::new();
        store.add("x", Tensor::zeros(&[4])).unwrap();
        let bytes = encode_tensors(store.iter());
        assert!(decode_tensors(&bytes[..bytes.len() - 2]).is_err());
    }

    #[test]
    fn missing_or_misshapen_parameters_fail_to_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut small = ParamStore::new();
        small.add("x", Tensor::zeros(&[4])).unwrap();
        save_store(&small, &path).unwrap();
        let mut big = ParamStore::new();
        big.add("x", Tensor::zeros(&[4])).unwrap();
        big.add("y", Tensor::zeros(&[1])).unwrap();
        assert!(load_into(&mut big, &path).is_err());
        let mut wrong = ParamStore::new();
        wrong.add("x", Tensor::zeros(&[5])).unwrap();
        assert!(load_into(&mut wrong, &path).is_err());
    }
}
