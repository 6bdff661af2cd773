//! Binary container shared by model checkpoints and optimizer state.
//!
//! Layout (little-endian):
//!
//! ```text
//! "HG3DCKPT"  u32 version
//! u32 len, utf-8 "key=value\n" metadata
//! u32 entry count
//!   per entry: u32 name len, name, u8 kind (0 param, 1 buffer), u8 width,
//!              u32 ndim, u64 dims..., raw element bytes
//! 32-byte SHA-256 of everything above
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{HourglassConfig, HourglassModel};
use crate::error::{Error, Result};
use crate::tensor::{LayerParams, Real, Tensor};

const MAGIC: &[u8; 8] = b"HG3DCKPT";
const VERSION: u32 = 1;

/// One named blob.
#[derive(Clone, Debug, PartialEq)]
pub struct Entry<T> {
    pub name: String,
    pub trainable: bool,
    pub tensor: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Container<T> {
    pub meta: BTreeMap<String, String>,
    pub entries: Vec<Entry<T>>,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::CorruptCheckpoint(msg.into())
}

impl<T: Real> Container<T> {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let mut meta = String::new();
        for (k, v) in &self.meta {
            meta.push_str(&format!("{k}={v}\n"));
        }
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(meta.as_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.push(if e.trainable { 0 } else { 1 });
            out.push(T::WIDTH);
            out.extend_from_slice(&(e.tensor.shape().len() as u32).to_le_bytes());
            for &d in e.tensor.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in e.tensor.values() {
                v.write_le(&mut out);
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 4 + 32 {
            return Err(corrupt("file too short"));
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != trailer {
            return Err(corrupt("checksum mismatch"));
        }
        let mut r = Reader { buf: body, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(corrupt(format!("unsupported version {version}")));
        }
        let n = r.u32()? as usize;
        let text = std::str::from_utf8(r.take(n)?).map_err(|_| corrupt("metadata is not utf-8"))?;
        let mut meta = BTreeMap::new();
        for line in text.lines() {
            let (k, v) = line.split_once('=').ok_or_else(|| corrupt(format!("bad metadata line `{line}`")))?;
            meta.insert(k.to_string(), v.to_string());
        }
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let n = r.u32()? as usize;
            let name = String::from_utf8(r.take(n)?.to_vec()).map_err(|_| corrupt("entry name is not utf-8"))?;
            let trainable = match r.take(1)?[0] {
                0 => true,
                1 => false,
                k => return Err(corrupt(format!("`{name}` has unknown kind {k}"))),
            };
            let width = r.take(1)?[0];
            if width != T::WIDTH {
                return Err(Error::config(format!(
                    "`{name}` is stored with {width}-byte elements, requested {} ({}-byte)",
                    T::NAME,
                    T::WIDTH
                )));
            }
            let ndim = r.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim.min(8));
            for _ in 0..ndim {
                shape.push(usize::try_from(r.u64()?).map_err(|_| corrupt("dimension overflow"))?);
            }
            let len = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .and_then(|l| l.checked_mul(width as usize))
                .ok_or_else(|| corrupt("blob size overflow"))?;
            let raw = r.take(len)?;
            let values = raw.chunks_exact(width as usize).map(T::read_le).collect();
            let tensor = Tensor::from_vec(&shape, values).map_err(|e| corrupt(format!("`{name}`: {e}")))?;
            entries.push(Entry { name, trainable, tensor });
        }
        if r.pos != body.len() {
            return Err(corrupt("trailing bytes after last entry"));
        }
        Ok(Container { meta, entries })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("partial");
        fs::write(&tmp, self.encode())?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }
}

/// Verified metadata only, without decoding any blob.
pub fn read_meta(path: &Path) -> Result<BTreeMap<String, String>> {
    let bytes = fs::read(path)?;
    if bytes.len() < MAGIC.len() + 8 + 32 {
        return Err(corrupt("file too short"));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != trailer {
        return Err(corrupt("checksum mismatch"));
    }
    let mut r = Reader { buf: body, pos: 0 };
    if r.take(8)? != MAGIC || r.u32()? != VERSION {
        return Err(corrupt("bad magic or version"));
    }
    let n = r.u32()? as usize;
    let text = std::str::from_utf8(r.take(n)?).map_err(|_| corrupt("metadata is not utf-8"))?;
    Ok(text
        .lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| corrupt("truncated"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Stores `params` with `meta`; used for models and optimizer state alike.
pub fn params_to_container<T: Real>(params: &LayerParams<T>, meta: BTreeMap<String, String>) -> Container<T> {
    let entries = params
        .iter()
        .map(|(id, name, t)| Entry {
            name: name.to_string(),
            trainable: params.is_trainable(id),
            tensor: Tensor::from_vec(t.shape(), t.values().to_vec()).expect("shape already validated"),
        })
        .collect();
    Container { meta, entries }
}

/// Copies container entries into `params`, requiring the same names, kinds and shapes in order.
pub fn load_into<T: Real>(params: &mut LayerParams<T>, entries: &[Entry<T>]) -> Result<()> {
    if entries.len() != params.len() {
        return Err(corrupt(format!("{} entries stored, architecture has {}", entries.len(), params.len())));
    }
    let ids: Vec<_> = params.iter().map(|(id, _, _)| id).collect();
    for (id, e) in ids.into_iter().zip(entries) {
        let name = params.name(id);
        if name != e.name || params.is_trainable(id) != e.trainable {
            return Err(corrupt(format!("entry `{}` where `{name}` was expected", e.name)));
        }
        let t = params.get_mut(id);
        if t.shape() != e.tensor.shape() {
            return Err(corrupt(format!("`{}` has shape {:?}, expected {:?}", e.name, e.tensor.shape(), t.shape())));
        }
        t.values_mut().copy_from_slice(e.tensor.values());
    }
    Ok(())
}

const KIND_KEY: &str = "kind";

impl<T: Real> HourglassModel<T> {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut meta = self.config().to_pairs();
        meta.insert(KIND_KEY.into(), "model".into());
        meta.insert("precision".into(), T::NAME.into());
        params_to_container(self.params(), meta).write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c = Container::<T>::read(path)?;
        if c.meta.get(KIND_KEY).map(String::as_str) != Some("model") {
            return Err(corrupt("not a model checkpoint"));
        }
        let config = HourglassConfig::from_pairs(&c.meta)?;
        let mut model = HourglassModel::build(&config, 0)?;
        load_into(model.params_mut(), &c.entries)?;
        Ok(model)
    }

    /// Loads and checks the joint/bone layout in one step.
    pub fn load_expecting(path: &Path, joints: usize, bones: usize) -> Result<Self> {
        let m = Self::load(path)?;
        m.expect_layout(joints, bones)?;
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> HourglassModel<f32> {
        HourglassModel::build(&HourglassConfig { batchnorm: true, ..HourglassConfig::miniature() }, 4).unwrap()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let m = model();
        m.save(&path).unwrap();
        let back = HourglassModel::<f32>::load(&path).unwrap();
        assert_eq!(back.config(), m.config());
        assert_eq!(back.params(), m.params());
    }

    #[test]
    fn flipped_byte_is_detected() {
        let m = model();
        let mut bytes = params_to_container(m.params(), m.config().to_pairs()).encode();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 1;
        assert!(matches!(Container::<f32>::decode(&bytes), Err(Error::CorruptCheckpoint(_))));
        assert!(matches!(Container::<f32>::decode(&bytes[..20]), Err(Error::CorruptCheckpoint(_))));
    }

    #[test]
    fn shape_mismatch_is_corrupt() {
        let m = model();
        let mut c = params_to_container(m.params(), BTreeMap::new());
        c.entries[0].tensor = Tensor::zeros(&[1]);
        let mut fresh = model();
        assert!(matches!(load_into(fresh.params_mut(), &c.entries), Err(Error::CorruptCheckpoint(_))));
    }

    #[test]
    fn joint_count_mismatch_is_explicit() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        model().save(&path).unwrap();
        assert!(matches!(HourglassModel::<f32>::load_expecting(&path, 14, 1), Err(Error::Dimension(_))));
        HourglassModel::<f32>::load_expecting(&path, 2, 1).unwrap();
    }

    #[test]
    fn precision_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        model().save(&path).unwrap();
        assert!(HourglassModel::<f64>::load(&path).is_err());
        assert_eq!(read_meta(&path).unwrap().get("precision").map(String::as_str), Some("narrow"));
    }
}
