//! Tensor store: a JSON manifest plus one little-endian blob.
//!
//! `<stem>.json` lists every tensor with its shape, dtype and byte offset into
//! `<stem>.bin`. Both files are written to temporaries and renamed, manifest
//! last, so a reader never sees a manifest pointing at a half-written blob.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const STORE_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq)]
enum Data {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    dtype: DType,
    offset: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    kind: String,
    tensors: Vec<Entry>,
    #[serde(default)]
    attrs: BTreeMap<String, serde_json::Value>,
}

/// In-memory set of named tensors.
#[derive(Clone, Debug, Default)]
pub struct TensorStore {
    kind: String,
    tensors: BTreeMap<String, (Vec<usize>, Data)>,
    attrs: BTreeMap<String, serde_json::Value>,
}

impl TensorStore {
    pub fn new(kind: impl Into<String>) -> Self {
        Self {
            kind: kind.into(),
            ..Default::default()
        }
    }

    pub fn kind(&self) -> &str {
        &self.kind
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(|s| s.as_str())
    }

    pub fn put(&mut self, name: impl Into<String>, t: &Tensor<f32>) {
        self.tensors
            .insert(name.into(), (t.shape().to_vec(), Data::F32(t.data().to_vec())));
    }

    pub fn put_f64(&mut self, name: impl Into<String>, shape: &[usize], data: Vec<f64>) {
        self.tensors
            .insert(name.into(), (shape.to_vec(), Data::F64(data)));
    }

    pub fn set_attr(&mut self, key: impl Into<String>, value: serde_json::Value) {
        self.attrs.insert(key.into(), value);
    }

    pub fn attr(&self, key: &str) -> Option<&serde_json::Value> {
        self.attrs.get(key)
    }

    pub fn get(&self, name: &str) -> Result<Tensor<f32>> {
        match self.tensors.get(name) {
            Some((shape, Data::F32(d))) => Tensor::new(shape, d.clone()),
            Some(_) => Err(Error::Data(format!("tensor {name} is not f32"))),
            None => Err(Error::Data(format!("missing tensor {name}"))),
        }
    }

    pub fn get_f64(&self, name: &str) -> Result<(Vec<usize>, Vec<f64>)> {
        match self.tensors.get(name) {
            Some((shape, Data::F64(d))) => Ok((shape.clone(), d.clone())),
            Some(_) => Err(Error::Data(format!("tensor {name} is not f64"))),
            None => Err(Error::Data(format!("missing tensor {name}"))),
        }
    }

    fn encode(&self) -> (Manifest, Vec<u8>) {
        let mut blob = Vec::new();
        let mut entries = Vec::new();
        for (name, (shape, data)) in &self.tensors {
            let offset = blob.len();
            let dtype = match data {
                Data::F32(d) => {
                    d.iter().for_each(|x| blob.extend_from_slice(&x.to_le_bytes()));
                    DType::F32
                }
                Data::F64(d) => {
                    d.iter().for_each(|x| blob.extend_from_slice(&x.to_le_bytes()));
                    DType::F64
                }
            };
            entries.push(Entry {
                name: name.clone(),
                shape: shape.clone(),
                dtype,
                offset,
            });
        }
        let manifest = Manifest {
            version: STORE_VERSION,
            kind: self.kind.clone(),
            tensors: entries,
            attrs: self.attrs.clone(),
        };
        (manifest, blob)
    }

    /// SHA-256 over the encoded blob and manifest.
    pub fn digest(&self) -> String {
        let (manifest, blob) = self.encode();
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&manifest).unwrap_or_default());
        h.update(&blob);
        hex::encode(h.finalize())
    }

    pub fn save(&self, dir: &Path, stem: &str) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let (manifest, blob) = self.encode();
        let bin = dir.join(format!("{stem}.bin"));
        let json = dir.join(format!("{stem}.json"));
        write_atomic(&bin, &blob)?;
        write_atomic(&json, serde_json::to_string_pretty(&manifest)?.as_bytes())?;
        Ok(json)
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Self> {
        let json = dir.join(format!("{stem}.json"));
        let bin = dir.join(format!("{stem}.bin"));
        let text = fs::read_to_string(&json).map_err(|e| Error::io(&json, e))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        if manifest.version != STORE_VERSION {
            return Err(Error::Data(format!(
                "{}: store version {} (expected {STORE_VERSION})",
                json.display(),
                manifest.version
            )));
        }
        let blob = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
        let mut tensors = BTreeMap::new();
        for e in manifest.tensors {
            let n: usize = e.shape.iter().product();
            let width = match e.dtype {
                DType::F32 => 4,
                DType::F64 => 8,
            };
            let bytes = blob
                .get(e.offset..e.offset + n * width)
                .ok_or_else(|| Error::Data(format!("tensor {} runs past the blob", e.name)))?;
            let data = match e.dtype {
                DType::F32 => Data::F32(
                    bytes
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                DType::F64 => Data::F64(
                    bytes
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
            };
            tensors.insert(e.name, (e.shape, data));
        }
        Ok(Self {
            kind: manifest.kind,
            tensors,
            attrs: manifest.attrs,
        })
    }
}

/// Write via a sibling temp file and rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
