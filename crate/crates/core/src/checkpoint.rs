//! Single-file checkpoint container.
//!
//! Layout: the magic line `a3gan-ckpt-v1\n`, a little-endian u64 header
//! length, a JSON header (metadata plus a tensor table with dtype, shape and
//! byte offset), then the raw little-endian tensor data.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{DType, Element, ParamStore, Tensor};

pub const CHECKPOINT_VERSION: &str = "a3gan-ckpt-v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    dtype: DType,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    version: String,
    metadata: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

/// Values are held widened to f64, which is exact for f32 sources.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredTensor {
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl StoredTensor {
    pub fn from_slice<E: Element>(shape: &[usize], data: &[E]) -> Self {
        StoredTensor {
            dtype: E::DTYPE,
            shape: shape.to_vec(),
            data: data.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect(),
        }
    }

    pub fn to_vec<E: Element>(&self) -> Vec<E> {
        self.data.iter().map(|&v| E::from_f64_lossy(v)).collect()
    }

    pub fn to_tensor<E: Element>(&self) -> Result<Tensor<E>> {
        Tensor::from_vec(self.to_vec(), &self.shape)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub metadata: serde_json::Value,
    pub tensors: BTreeMap<String, StoredTensor>,
}

impl Checkpoint {
    pub fn new(metadata: serde_json::Value) -> Self {
        Checkpoint {
            metadata,
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: StoredTensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn insert_params<E: Element>(&mut self, params: &ParamStore<E>) {
        for (name, t) in params.iter() {
            self.insert(name.clone(), StoredTensor::from_slice(t.shape(), t.data()));
        }
    }

    pub fn get(&self, name: &str) -> Result<&StoredTensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Configuration(format!("checkpoint has no tensor `{name}`")))
    }

    /// All tensors whose name starts with `prefix`, as parameters.
    pub fn params<E: Element>(&self, prefix: &str) -> Result<ParamStore<E>> {
        let mut store = ParamStore::new();
        for (name, t) in self.tensors.range(prefix.to_string()..) {
            if !name.starts_with(prefix) {
                break;
            }
            store.insert(name.clone(), t.to_tensor()?);
        }
        Ok(store)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut blob = Vec::new();
        for (name, t) in &self.tensors {
            entries.push(TensorEntry {
                name: name.clone(),
                dtype: t.dtype,
                shape: t.shape.clone(),
                offset: blob.len() as u64,
            });
            match t.dtype {
                DType::F32 => t.data.iter().for_each(|&v| (v as f32).write_le(&mut blob)),
                DType::F64 => t.data.iter().for_each(|&v| v.write_le(&mut blob)),
            }
        }
        let header = serde_json::to_vec(&Header {
            version: CHECKPOINT_VERSION.into(),
            metadata: self.metadata.clone(),
            tensors: entries,
        })?;
        let mut out = Vec::with_capacity(CHECKPOINT_VERSION.len() + 9 + header.len() + blob.len());
        out.extend_from_slice(CHECKPOINT_VERSION.as_bytes());
        out.push(b'\n');
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&blob);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |m: &str| Error::Data(format!("not a {CHECKPOINT_VERSION} checkpoint: {m}"));
        let magic_len = CHECKPOINT_VERSION.len() + 1;
        if bytes.len() < magic_len + 8 || &bytes[..magic_len - 1] != CHECKPOINT_VERSION.as_bytes() {
            return Err(corrupt("bad magic"));
        }
        let hlen = u64::from_le_bytes(bytes[magic_len..magic_len + 8].try_into().expect("8 bytes")) as usize;
        let hstart = magic_len + 8;
        let data = bytes.get(hstart + hlen..).ok_or_else(|| corrupt("truncated header"))?;
        let header: Header = serde_json::from_slice(&bytes[hstart..hstart + hlen])?;
        if header.version != CHECKPOINT_VERSION {
            return Err(corrupt(&format!("version {}", header.version)));
        }
        let mut tensors = BTreeMap::new();
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let end = start + n * e.dtype.size();
            let raw = data.get(start..end).ok_or_else(|| corrupt(&format!("tensor `{}` truncated", e.name)))?;
            let values: Vec<f64> = match e.dtype {
                DType::F32 => raw.chunks_exact(4).map(|c| f32::read_le(c) as f64).collect(),
                DType::F64 => raw.chunks_exact(8).map(f64::read_le).collect(),
            };
            tensors.insert(
                e.name,
                StoredTensor {
                    dtype: e.dtype,
                    shape: e.shape,
                    data: values,
                },
            );
        }
        Ok(Checkpoint {
            metadata: header.metadata,
            tensors,
        })
    }

    /// Writes through a temporary file and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("ckpt.tmp");
        let bytes = self.to_bytes()?;
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut p32 = ParamStore::<f32>::new();
        p32.insert_normal("generator/conv1/weight", &[4, 3, 7, 7], 0.02, &mut rng);
        p32.insert_zeros("generator/conv1/bias", &[4]);
        let mut p64 = ParamStore::<f64>::new();
        p64.insert_normal("embedder/fc/weight", &[3, 5], 1.0, &mut rng);
        let mut ck = Checkpoint::new(serde_json::json!({"step": 12, "subbands": ["LL", "LH", "HL", "HH"]}));
        ck.insert_params(&p32);
        ck.insert_params(&p64);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub/x.ckpt");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        assert!(back.params::<f32>("generator/").unwrap().bit_identical(&p32));
        assert!(back.params::<f64>("embedder/").unwrap().bit_identical(&p64));
        assert_eq!(back.metadata["step"], 12);
    }

    #[test]
    fn rejects_garbage_and_missing_files() {
        assert!(matches!(Checkpoint::from_bytes(b"hello world, not a checkpoint"), Err(Error::Data(_))));
        assert!(matches!(Checkpoint::load(Path::new("/nonexistent/missing.ckpt")), Err(Error::Io { .. })));
    }
}
