//! Versioned binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "TNCKPT\0\0"
//! version  u32
//! meta     u64 length + UTF-8 JSON
//! count    u64
//! repeated count times:
//!   name   u32 length + UTF-8
//!   ndim   u32, then ndim x u64 dims
//!   data   prod(dims) x f64
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde_json::Value;

use crate::array::NumArray;
use crate::error::{NetError, Result};
use crate::params::ParameterStore;

pub const MAGIC: &[u8; 8] = b"TNCKPT\0\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: Value,
    pub tensors: Vec<(String, NumArray)>,
}

impl Checkpoint {
    /// Snapshot of every parameter whose name starts with `prefix`.
    pub fn from_store(store: &ParameterStore, prefix: &str, meta: Value) -> Self {
        let tensors = store
            .group(prefix)
            .map(|p| (p.name.clone(), p.value.clone()))
            .collect();
        Self { meta, tensors }
    }

    /// Writes values back into `store`. Every parameter of `store` under
    /// `prefix` must be present with an identical shape.
    pub fn restore_into(&self, store: &mut ParameterStore, prefix: &str) -> Result<usize> {
        let mut restored = 0;
        for p in store.group_mut(prefix) {
            let (_, arr) = self
                .tensors
                .iter()
                .find(|(n, _)| *n == p.name)
                .ok_or_else(|| NetError::Checkpoint(format!("missing parameter `{}`", p.name)))?;
            if arr.shape() != p.value.shape() {
                return Err(NetError::Checkpoint(format!(
                    "parameter `{}` has shape {:?}, model expects {:?}",
                    p.name,
                    arr.shape(),
                    p.value.shape()
                )));
            }
            p.value = arr.clone();
            restored += 1;
        }
        Ok(restored)
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        let meta = serde_json::to_vec(&self.meta)?;
        w.write_all(&(meta.len() as u64).to_le_bytes())?;
        w.write_all(&meta)?;
        w.write_all(&(self.tensors.len() as u64).to_le_bytes())?;
        for (name, arr) in &self.tensors {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(arr.shape().len() as u32).to_le_bytes())?;
            for &d in arr.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            let mut buf = Vec::with_capacity(arr.len() * 8);
            for v in arr.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(NetError::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = read_u32(&mut r)?;
        if version != FORMAT_VERSION {
            return Err(NetError::Checkpoint(format!(
                "unsupported format version {version} (expected {FORMAT_VERSION})"
            )));
        }
        let meta_len = read_u64(&mut r)? as usize;
        let mut meta = vec![0u8; meta_len];
        r.read_exact(&mut meta)?;
        let meta: Value = serde_json::from_slice(&meta)?;
        let count = read_u64(&mut r)? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = read_u32(&mut r)? as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| NetError::Checkpoint("parameter name is not UTF-8".into()))?;
            let ndim = read_u32(&mut r)? as usize;
            let shape = (0..ndim)
                .map(|_| read_u64(&mut r).map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let len: usize = shape.iter().product();
            let mut raw = vec![0u8; len * 8];
            r.read_exact(&mut raw)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push((name, NumArray::from_vec(&shape, data)?));
        }
        Ok(Self { meta, tensors })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    /// Writes to a sibling temporary file and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes())?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::read_from(bytes.as_slice())
    }
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

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use serde_json::json;

    proptest! {
        #[test]
        fn bytes_round_trip(values in prop::collection::vec(any::<f64>(), 1..40), rows in 1usize..4) {
            let cols = values.len();
            let data: Vec<f64> = (0..rows).flat_map(|_| values.iter().copied()).collect();
            let ck = Checkpoint {
                meta: json!({"arch": "x", "dim": cols}),
                tensors: vec![("t.w".into(), NumArray::matrix(rows, cols, data).unwrap())],
            };
            let back = Checkpoint::read_from(ck.to_bytes().as_slice()).unwrap();
            let a: Vec<u64> = ck.tensors[0].1.data().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u64> = back.tensors[0].1.data().iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(a, b);
            prop_assert_eq!(back.meta, ck.meta);
        }
    }

    #[test]
    fn restore_rejects_shape_mismatch() {
        let mut s = ParameterStore::new();
        s.add("m.w", NumArray::zeros(&[2, 3])).unwrap();
        let ck = Checkpoint {
            meta: json!({}),
            tensors: vec![("m.w".into(), NumArray::zeros(&[3, 2]))],
        };
        assert!(matches!(ck.restore_into(&mut s, "m."), Err(NetError::Checkpoint(_))));
    }

    #[test]
    fn restore_rejects_missing_parameter() {
        let mut s = ParameterStore::new();
        s.add("m.w", NumArray::zeros(&[2])).unwrap();
        s.add("m.b", NumArray::zeros(&[2])).unwrap();
        let ck = Checkpoint::from_store(&s, "m.w", json!({}));
        assert!(ck.restore_into(&mut s, "m.").is_err());
        assert_eq!(ck.restore_into(&mut s, "m.w").unwrap(), 1);
    }

    #[test]
    fn rejects_bad_magic_and_version() {
        assert!(Checkpoint::read_from(&b"NOTACKPT\x01\0\0\0"[..]).is_err());
        let mut bytes = Checkpoint { meta: json!({}), tensors: vec![] }.to_bytes();
        bytes[8] = 9;
        assert!(Checkpoint::read_from(bytes.as_slice()).is_err());
    }
}
