//! Single-file checkpoint container.
//!
//! Layout: magic `FOSECKPT1`, `u64` manifest length, UTF-8 manifest, `u64`
//! blob count, then per blob: `u32` name length, name, kind byte, dtype byte
//! (0 = f32, 1 = f64), `u32` rank, `u64` dims, little-endian values. All
//! integers are little-endian. The manifest is `key = value` lines, then a
//! `--- config ---` line followed by the canonical configuration text.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use sha2::{Digest, Sha256};

use crate::nn::{ParamKind, ParamStore};
use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 9] = b"FOSECKPT1";
const CONFIG_MARK: &str = "--- config ---";
const AUX_KIND: u8 = 255;

#[derive(Debug, Clone)]
pub struct Blob {
    pub name: String,
    /// `None` for auxiliary arrays (optimizer moments, histories).
    pub kind: Option<ParamKind>,
    pub tensor: Tensor,
}

#[derive(Debug, Clone, Default)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub config: String,
    pub blobs: Vec<Blob>,
}

impl Checkpoint {
    pub fn new(stage: u8, step: usize, config: String, config_hash: &str) -> Self {
        let mut c = Self {
            config,
            ..Default::default()
        };
        c.set("stage", stage);
        c.set("step", step);
        c.set("config_hash", config_hash);
        c
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        let v = value.to_string();
        debug_assert!(!v.contains('\n'));
        self.meta.insert(key.to_string(), v);
    }

    pub fn get(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::format("checkpoint", format!("manifest lacks `{key}`")))
    }

    pub fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let v = self.get(key)?;
        v.parse()
            .map_err(|_| Error::format("checkpoint", format!("bad value `{v}` for `{key}`")))
    }

    pub fn stage(&self) -> Result<u8> {
        self.parse("stage")
    }

    pub fn step(&self) -> Result<usize> {
        self.parse("step")
    }

    pub fn push(&mut self, name: &str, kind: Option<ParamKind>, tensor: &Tensor) -> Result<()> {
        if self.blobs.iter().any(|b| b.name == name) {
            return Err(Error::format("checkpoint", format!("duplicate blob `{name}`")));
        }
        self.blobs.push(Blob {
            name: name.to_string(),
            kind,
            tensor: tensor.detach().copy()?,
        });
        Ok(())
    }

    pub fn blob(&self, name: &str) -> Result<&Tensor> {
        self.blobs
            .iter()
            .find(|b| b.name == name)
            .map(|b| &b.tensor)
            .ok_or_else(|| Error::format("checkpoint", format!("missing blob `{name}`")))
    }

    pub fn has_blob(&self, name: &str) -> bool {
        self.blobs.iter().any(|b| b.name == name)
    }

    /// Adds every store entry under `prefix/`.
    pub fn push_store(&mut self, prefix: &str, store: &ParamStore) -> Result<()> {
        for (name, var, kind) in store.iter() {
            self.push(&format!("{prefix}/{name}"), Some(kind), var.as_tensor())?;
        }
        Ok(())
    }

    /// Rebuilds the store saved under `prefix/`.
    pub fn load_store(&self, prefix: &str, dtype: DType) -> Result<ParamStore> {
        let mut store = ParamStore::new(dtype);
        let p = format!("{prefix}/");
        for b in &self.blobs {
            if let (Some(name), Some(kind)) = (b.name.strip_prefix(&p), b.kind) {
                store.insert(name, &b.tensor, kind)?;
            }
        }
        if store.is_empty() {
            return Err(Error::format("checkpoint", format!("no parameters under `{prefix}`")));
        }
        Ok(store)
    }

    /// Auxiliary blobs under `prefix/`, prefix stripped.
    pub fn aux(&self, prefix: &str) -> Vec<(String, Tensor)> {
        let p = format!("{prefix}/");
        self.blobs
            .iter()
            .filter(|b| b.kind.is_none())
            .filter_map(|b| b.name.strip_prefix(&p).map(|n| (n.to_string(), b.tensor.clone())))
            .collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut manifest = String::new();
        for (k, v) in &self.meta {
            manifest.push_str(&format!("{k} = {v}\n"));
        }
        manifest.push_str(CONFIG_MARK);
        manifest.push('\n');
        manifest.push_str(&self.config);
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(manifest.as_bytes());
        out.extend_from_slice(&(self.blobs.len() as u64).to_le_bytes());
        for b in &self.blobs {
            out.extend_from_slice(&(b.name.len() as u32).to_le_bytes());
            out.extend_from_slice(b.name.as_bytes());
            out.push(b.kind.map(ParamKind::code).unwrap_or(AUX_KIND));
            let dims = b.tensor.dims();
            let flat = b.tensor.flatten_all()?;
            match b.tensor.dtype() {
                DType::F64 => {
                    out.push(1);
                    push_dims(&mut out, dims);
                    for v in flat.to_vec1::<f64>()? {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
                _ => {
                    out.push(0);
                    push_dims(&mut out, dims);
                    for v in flat.to_dtype(DType::F32)?.to_vec1::<f32>()? {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(CHECKPOINT_MAGIC.len())? != CHECKPOINT_MAGIC {
            return Err(Error::format("checkpoint", "bad magic"));
        }
        let mlen = r.u64()? as usize;
        let manifest = std::str::from_utf8(r.take(mlen)?)
            .map_err(|_| Error::format("checkpoint", "manifest is not UTF-8"))?;
        let (head, config) = manifest
            .split_once(&format!("{CONFIG_MARK}\n"))
            .ok_or_else(|| Error::format("checkpoint", "manifest lacks config section"))?;
        let mut meta = BTreeMap::new();
        for line in head.lines() {
            let (k, v) = line
                .split_once(" = ")
                .ok_or_else(|| Error::format("checkpoint", format!("bad manifest line `{line}`")))?;
            meta.insert(k.to_string(), v.to_string());
        }
        let n = r.u64()? as usize;
        let mut blobs = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let nlen = r.u32()? as usize;
            let name = String::from_utf8(r.take(nlen)?.to_vec())
                .map_err(|_| Error::format("checkpoint", "blob name is not UTF-8"))?;
            let kind = match r.take(1)?[0] {
                AUX_KIND => None,
                c => Some(ParamKind::from_code(c)?),
            };
            let dtype = r.take(1)?[0];
            let rank = r.u32()? as usize;
            let dims = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let count: usize = dims.iter().product();
            let tensor = match dtype {
                0 => {
                    let raw = r.take(count * 4)?;
                    let v: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
                    Tensor::from_vec(v, dims, &Device::Cpu)?
                }
                1 => {
                    let raw = r.take(count * 8)?;
                    let v: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
                    Tensor::from_vec(v, dims, &Device::Cpu)?
                }
                d => return Err(Error::format("checkpoint", format!("unknown dtype code {d} for `{name}`"))),
            };
            blobs.push(Blob { name, kind, tensor });
        }
        if r.pos != bytes.len() {
            return Err(Error::format("checkpoint", "trailing bytes"));
        }
        Ok(Self {
            meta,
            config: config.to_string(),
            blobs,
        })
    }

    /// Writes through a temporary file so an interrupted write never
    /// replaces a good checkpoint. Returns the SHA-256 of the file.
    pub fn save(&self, path: &Path) -> Result<String> {
        let bytes = self.to_bytes()?;
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
        Ok(hex::encode(Sha256::digest(&bytes)))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// SHA-256 of a file's bytes.
pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn push_dims(out: &mut Vec<u8>, dims: &[usize]) {
    out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for d in dims {
        out.extend_from_slice(&(*d as u64).to_le_bytes());
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::format("checkpoint", "truncated file")),
        }
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}
