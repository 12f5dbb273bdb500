//! Checkpoint directories.
//!
//! Layout: `manifest.json` plus `tensors/<index>.bin` per stored array, raw
//! little-endian row-major values of the manifest's element type. Adam
//! moments are stored next to their parameter as `<index>.m.bin` and
//! `<index>.v.bin`. Every file carries a SHA-256 in the manifest so that a
//! damaged file is reported by tensor name.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::kspace::io::{read_json, write_json};
use crate::rng::StreamState;
use crate::tensor::{DType, ParamSet, Parameter, Real, Tensor};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileRef {
    pub file: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub buffer: bool,
    pub data: FileRef,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adam: Option<AdamEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamEntry {
    pub step_count: u64,
    pub m: FileRef,
    pub v: FileRef,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    /// What the checkpoint holds, e.g. `recon`, `refine`, `segment`.
    pub kind: String,
    pub dtype: DType,
    /// Architecture configuration, as written by the owning network.
    pub arch: Value,
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub rng: BTreeMap<String, StreamState>,
    /// Trainer state needed for exact resumption.
    #[serde(default)]
    pub state: Value,
}

/// In-memory form of a checkpoint directory.
#[derive(Debug, Clone)]
pub struct Checkpoint<T> {
    pub kind: String,
    pub arch: Value,
    pub params: ParamSet<T>,
    pub rng: BTreeMap<String, StreamState>,
    pub state: Value,
}

fn sha(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn to_bytes<T: Real>(values: &[T]) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * T::DTYPE.size_of());
    values.iter().for_each(|v| v.write_le(&mut out));
    out
}

fn write_file(dir: &Path, file: String, bytes: &[u8]) -> Result<FileRef> {
    let path = dir.join(&file);
    fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    Ok(FileRef { file, sha256: sha(bytes) })
}

impl<T: Real> Checkpoint<T> {
    pub fn new(kind: impl Into<String>, arch: Value, params: ParamSet<T>) -> Self {
        Self { kind: kind.into(), arch, params, rng: BTreeMap::new(), state: Value::Null }
    }

    /// Writes the checkpoint; `with_optimizer` also stores Adam moments.
    pub fn save(&self, dir: &Path, with_optimizer: bool) -> Result<()> {
        let tdir = dir.join("tensors");
        fs::create_dir_all(&tdir).map_err(|e| Error::io(&tdir, e))?;
        let mut tensors = Vec::new();
        for (i, p) in self.params.params().enumerate() {
            let data = write_file(&tdir, format!("p{i}.bin"), &to_bytes(p.tensor.data()))?;
            let adam = if with_optimizer {
                Some(AdamEntry {
                    step_count: p.step_count,
                    m: write_file(&tdir, format!("p{i}.m.bin"), &to_bytes(&p.adam_m))?,
                    v: write_file(&tdir, format!("p{i}.v.bin"), &to_bytes(&p.adam_v))?,
                })
            } else {
                None
            };
            tensors.push(TensorEntry { name: p.name.clone(), shape: p.tensor.shape().to_vec(), buffer: false, data, adam });
        }
        for (i, (name, t)) in self.params.buffers().enumerate() {
            let data = write_file(&tdir, format!("b{i}.bin"), &to_bytes(t.data()))?;
            tensors.push(TensorEntry { name: name.clone(), shape: t.shape().to_vec(), buffer: true, data, adam: None });
        }
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            kind: self.kind.clone(),
            dtype: T::DTYPE,
            arch: self.arch.clone(),
            tensors,
            rng: self.rng.clone(),
            state: self.state.clone(),
        };
        write_json(&dir.join("manifest.json"), &manifest)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = dir.join("manifest.json");
        let manifest: Manifest = read_json(&mpath)?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::load(
                &mpath,
                format!("format version {} (supported: {FORMAT_VERSION})", manifest.format_version),
            ));
        }
        if manifest.dtype != T::DTYPE {
            return Err(Error::load(&mpath, format!("element type {:?}, expected {:?}", manifest.dtype, T::DTYPE)));
        }
        let tdir = dir.join("tensors");
        let read = |entry: &TensorEntry, f: &FileRef, what: &str| -> Result<Vec<T>> {
            let path = tdir.join(&f.file);
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            let width = T::DTYPE.size_of();
            let n: usize = entry.shape.iter().product();
            if bytes.len() != n * width {
                return Err(Error::load(
                    &path,
                    format!("{what} of tensor '{}' has {} bytes, expected {}", entry.name, bytes.len(), n * width),
                ));
            }
            if sha(&bytes) != f.sha256 {
                return Err(Error::load(&path, format!("{what} of tensor '{}' fails its checksum", entry.name)));
            }
            Ok(bytes.chunks_exact(width).map(T::read_le).collect())
        };
        let mut params = ParamSet::new();
        for entry in &manifest.tensors {
            let tensor = Tensor::new(entry.shape.clone(), read(entry, &entry.data, "data")?)
                .map_err(|e| Error::load(&mpath, format!("tensor '{}': {e}", entry.name)))?;
            if entry.buffer {
                params.insert_buffer(entry.name.clone(), tensor);
                continue;
            }
            let mut p = Parameter::new(entry.name.clone(), tensor);
            if let Some(adam) = &entry.adam {
                p.adam_m = read(entry, &adam.m, "first moment")?;
                p.adam_v = read(entry, &adam.v, "second moment")?;
                p.step_count = adam.step_count;
            }
            params.insert_parameter(p);
        }
        Ok(Self { kind: manifest.kind, arch: manifest.arch, params, rng: manifest.rng, state: manifest.state })
    }

    /// Loads and checks that the checkpoint holds the expected kind.
    pub fn load_kind(dir: &Path, kind: &str) -> Result<Self> {
        let ck = Self::load(dir)?;
        if ck.kind != kind {
            return Err(Error::load(dir, format!("checkpoint holds '{}', expected '{kind}'", ck.kind)));
        }
        Ok(ck)
    }
}

/// Parameters that `actual` lacks or holds with a different shape, relative
/// to `expected`.
pub fn check_compatible<T: Real>(expected: &ParamSet<T>, actual: &ParamSet<T>, path: &Path) -> Result<()> {
    for p in expected.params() {
        match actual.get(&p.name) {
            None => return Err(Error::load(path, format!("missing tensor '{}'", p.name))),
            Some(q) if q.tensor.shape() != p.tensor.shape() => {
                return Err(Error::load(
                    path,
                    format!("tensor '{}' has shape {:?}, expected {:?}", p.name, q.tensor.shape(), p.tensor.shape()),
                ))
            }
            _ => {}
        }
    }
    for (name, t) in expected.buffers() {
        match actual.buffer(name) {
            Some(b) if b.shape() == t.shape() => {}
            _ => return Err(Error::load(path, format!("missing or misshapen buffer '{name}'"))),
        }
    }
    Ok(())
}
