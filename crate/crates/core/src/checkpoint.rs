//! Binary parameter checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      4 bytes   "LCKP"
//! version    u32       1
//! meta_len   u32       length of the metadata block
//! meta       bytes     UTF-8 text (the model configuration as TOML)
//! count      u32       number of parameters
//! count × {
//!   name_len u32
//!   name     bytes     UTF-8
//!   ndim     u32
//!   dims     u64 × ndim
//!   data     f64 × prod(dims)
//! }
//! ```

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"LCKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: String,
    pub entries: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore, meta: impl Into<String>) -> Self {
        Checkpoint {
            meta: meta.into(),
            entries: store
                .iter()
                .map(|(_, p)| (p.name.clone(), p.value().clone()))
                .collect(),
        }
    }

    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(self.meta.len() as u32).to_le_bytes())?;
        w.write_all(self.meta.as_bytes())?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for (name, t) in &self.entries {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.ndim() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("bad magic bytes".into()));
        }
        let version = read_u32(&mut r)?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let meta = read_string(&mut r)?;
        let count = read_u32(&mut r)?;
        let mut entries = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let name = read_string(&mut r)?;
            let ndim = read_u32(&mut r)? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                let mut b = [0u8; 8];
                read_exact(&mut r, &mut b)?;
                shape.push(u64::from_le_bytes(b) as usize);
            }
            let numel: usize = shape.iter().product();
            let mut raw = vec![0u8; numel * 8];
            read_exact(&mut r, &mut raw)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            entries.push((name, Tensor::new(&shape, data)?));
        }
        Ok(Checkpoint { meta, entries })
    }

    /// Copies every stored tensor into the parameter of the same name.
    pub fn load_into(&self, store: &mut ParamStore) -> Result<()> {
        if self.entries.len() != store.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} parameters, model has {}",
                self.entries.len(),
                store.len()
            )));
        }
        for (name, t) in &self.entries {
            let id = store
                .id(name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown parameter `{name}`")))?;
            store.set_value(id, t.clone())?;
        }
        Ok(())
    }
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|e| Error::Checkpoint(format!("truncated checkpoint: {e}")))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_string(r: &mut impl Read) -> Result<String> {
    let len = read_u32(r)? as usize;
    let mut buf = vec![0u8; len];
    read_exact(r, &mut buf)?;
    String::from_utf8(buf).map_err(|_| Error::Checkpoint("invalid UTF-8 string".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout_is_stable() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::new(&[2], vec![1.0, -0.5]).unwrap()).unwrap();
        let bytes = Checkpoint::from_store(&store, "k=1").to_bytes();
        assert_eq!(&bytes[..4], b"LCKP");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &3u32.to_le_bytes());
        assert_eq!(&bytes[12..15], b"k=1");
        // 4 magic + 4 version + 4 + 3 meta + 4 count + 4 + 1 name + 4 ndim + 8 dim + 16 data
        assert_eq!(bytes.len(), 52);
        assert_eq!(&bytes[36..44], &1.0f64.to_le_bytes());
    }

    #[test]
    fn rejects_corrupt_input() {
        assert!(Checkpoint::read_from(&b"XXXX"[..]).is_err());
        let mut store = ParamStore::new();
        store.add("w", Tensor::zeros(&[3])).unwrap();
        let bytes = Checkpoint::from_store(&store, "").to_bytes();
        assert!(Checkpoint::read_from(&bytes[..bytes.len() - 1]).is_err());
    }
}
