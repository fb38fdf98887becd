use std::collections::BTreeMap;

use candle_core::{DType, Device, Shape, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use super::layers::LoraConfig;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Updated by the optimiser.
    Trainable,
    /// Part of the model but never updated; forward passes see detached copies.
    Frozen,
    /// Non-parameter state such as normalisation running statistics.
    Buffer,
}

impl ParamKind {
    pub fn code(self) -> u8 {
        match self {
            ParamKind::Trainable => 0,
            ParamKind::Frozen => 1,
            ParamKind::Buffer => 2,
        }
    }

    pub fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(ParamKind::Trainable),
            1 => Ok(ParamKind::Frozen),
            2 => Ok(ParamKind::Buffer),
            _ => Err(Error::format("parameter kind", format!("unknown code {c}"))),
        }
    }
}

/// Named tensors backing a model. Names are hierarchical, dot-separated.
#[derive(Clone)]
pub struct ParamStore {
    entries: BTreeMap<String, (Var, ParamKind)>,
    dtype: DType,
    device: Device,
}

impl std::fmt::Debug for ParamStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ParamStore")
            .field("entries", &self.entries.len())
            .field("dtype", &self.dtype)
            .finish()
    }
}

impl ParamStore {
    pub fn new(dtype: DType) -> Self {
        Self {
            entries: BTreeMap::new(),
            dtype,
            device: Device::Cpu,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    /// Inserts or replaces an entry. The tensor is copied and cast to the
    /// store dtype.
    pub fn insert(&mut self, name: &str, value: &Tensor, kind: ParamKind) -> Result<()> {
        let t = value.to_dtype(self.dtype)?.copy()?;
        self.entries
            .insert(name.to_string(), (Var::from_tensor(&t)?, kind));
        Ok(())
    }

    pub fn var(&self, name: &str) -> Result<&Var> {
        self.entries
            .get(name)
            .map(|(v, _)| v)
            .ok_or_else(|| Error::InvalidArgument(format!("no parameter named `{name}`")))
    }

    pub fn kind(&self, name: &str) -> Option<ParamKind> {
        self.entries.get(name).map(|(_, k)| *k)
    }

    pub fn set_kind(&mut self, name: &str, kind: ParamKind) -> Result<()> {
        match self.entries.get_mut(name) {
            Some(e) => {
                e.1 = kind;
                Ok(())
            }
            None => Err(Error::InvalidArgument(format!("no parameter named `{name}`"))),
        }
    }

    /// Marks every trainable entry as frozen.
    pub fn freeze_all(&mut self) {
        for (_, k) in self.entries.values_mut() {
            if *k == ParamKind::Trainable {
                *k = ParamKind::Frozen;
            }
        }
    }

    /// Tensor view for use in a forward pass. Only trainable entries are
    /// tracked for gradients.
    pub fn tensor(&self, name: &str) -> Result<Tensor> {
        let (v, k) = self
            .entries
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("no parameter named `{name}`")))?;
        Ok(match k {
            ParamKind::Trainable => v.as_tensor().clone(),
            _ => v.as_tensor().detach(),
        })
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Var, ParamKind)> {
        self.entries.iter().map(|(n, (v, k))| (n.as_str(), v, *k))
    }

    pub fn trainable(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.iter()
            .filter(|(_, _, k)| *k == ParamKind::Trainable)
            .map(|(n, v, _)| (n, v))
    }

    /// Element count over entries of the given kinds.
    pub fn count(&self, kinds: &[ParamKind]) -> usize {
        self.iter()
            .filter(|(_, _, k)| kinds.contains(k))
            .map(|(_, v, _)| v.elem_count())
            .sum()
    }

    /// Parameters (trainable and frozen), excluding buffers.
    pub fn num_params(&self) -> usize {
        self.count(&[ParamKind::Trainable, ParamKind::Frozen])
    }

    pub fn num_trainable(&self) -> usize {
        self.count(&[ParamKind::Trainable])
    }

    /// SHA-256 over names, shapes and little-endian values of the selected
    /// entries, hex encoded.
    pub fn digest_filtered(&self, mut keep: impl FnMut(&str, ParamKind) -> bool) -> Result<String> {
        let mut h = Sha256::new();
        for (name, var, kind) in self.iter() {
            if !keep(name, kind) {
                continue;
            }
            h.update(name.as_bytes());
            h.update([0u8]);
            for d in var.dims() {
                h.update((*d as u64).to_le_bytes());
            }
            let flat = var.as_tensor().flatten_all()?;
            match self.dtype {
                DType::F64 => {
                    for x in flat.to_vec1::<f64>()? {
                        h.update(x.to_le_bytes());
                    }
                }
                _ => {
                    for x in flat.to_dtype(DType::F32)?.to_vec1::<f32>()? {
                        h.update(x.to_le_bytes());
                    }
                }
            }
        }
        Ok(hex::encode(h.finalize()))
    }

    /// Digest of every entry.
    pub fn digest(&self) -> Result<String> {
        self.digest_filtered(|_, _| true)
    }

    /// Independent copy with its own storage, optionally cast.
    pub fn deep_copy(&self, dtype: DType) -> Result<Self> {
        let mut out = ParamStore::new(dtype);
        for (name, var, kind) in self.iter() {
            out.insert(name, var.as_tensor(), kind)?;
        }
        Ok(out)
    }

    pub fn remove(&mut self, name: &str) -> Option<(Var, ParamKind)> {
        self.entries.remove(name)
    }
}

/// Initialisation rule for a new parameter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Const(f64),
    /// Uniform on `[-bound, bound]`.
    Uniform(f64),
    Normal(f64),
}

/// Hierarchical parameter factory. Existing entries are reused so that a
/// model can be rebuilt over loaded or copied weights.
pub struct Builder<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
    lora: Option<LoraConfig>,
}

impl<'a> Builder<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
            lora: None,
        }
    }

    pub fn with_lora(mut self, lora: Option<LoraConfig>) -> Self {
        self.lora = lora;
        self
    }

    pub fn lora(&self) -> Option<LoraConfig> {
        self.lora
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn device(&self) -> Device {
        self.store.device().clone()
    }

    pub fn pp(&mut self, name: &str) -> Builder<'_> {
        let prefix = self.path(name);
        Builder {
            store: self.store,
            rng: self.rng,
            prefix,
            lora: self.lora,
        }
    }

    pub fn path(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn get(&mut self, name: &str, shape: impl Into<Shape>, init: Init) -> Result<Tensor> {
        self.get_kind(name, shape, init, ParamKind::Trainable)
    }

    pub fn get_kind(
        &mut self,
        name: &str,
        shape: impl Into<Shape>,
        init: Init,
        kind: ParamKind,
    ) -> Result<Tensor> {
        let shape = shape.into();
        let full = self.path(name);
        if let Some(k) = self.store.kind(&full) {
            let v = self.store.var(&full)?;
            if v.shape() != &shape {
                return Err(Error::Dimension(format!(
                    "parameter `{full}` has shape {:?}, model expects {:?}",
                    v.dims(),
                    shape.dims()
                )));
            }
            let _ = k;
            return self.store.tensor(&full);
        }
        let n = shape.elem_count();
        let data: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Const(c) => vec![c; n],
            Init::Uniform(b) => (0..n).map(|_| self.rng.random_range(-b..=b)).collect(),
            Init::Normal(s) => (0..n)
                .map(|_| s * self.rng.sample::<f64, _>(StandardNormal))
                .collect(),
        };
        let t = Tensor::from_vec(data, shape, self.store.device())?;
        self.store.insert(&full, &t, kind)?;
        self.store.tensor(&full)
    }

    /// Raw access to the variable behind an already created entry.
    pub fn var(&self, name: &str) -> Result<Var> {
        Ok(self.store.var(&self.path(name))?.clone())
    }
}
