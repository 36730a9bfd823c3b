//! Named learnable parameters and the `KINO1` container format.
//!
//! Container layout (all integers little-endian):
//!
//! ```text
//! offset 0      5 bytes   magic "KINO1"
//! offset 5      u64       manifest length M in bytes
//! offset 13     M bytes   JSON manifest (entries in store order)
//! offset 13+M   ...       raw element data, entries back to back
//! ```
//!
//! Each manifest entry records `name`, `shape`, the byte `offset` relative to
//! the start of the data section and the element `count`.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{KinoError, Result};
use crate::tensor::{Precision, Scalar, Tensor};

pub const CONTAINER_MAGIC: &[u8; 5] = b"KINO1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Parameter<T: Scalar> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T: Scalar> {
    params: Vec<Parameter<T>>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn register(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(KinoError::Argument(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.params.len());
        let grad = Tensor::zeros(value.shape().to_vec())?;
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter { name, value, grad });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].grad
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn set_value(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(KinoError::shape("set_value", p.value.shape(), value.shape()));
        }
        p.value = value;
        Ok(())
    }

    pub fn set_by_name(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let id = self
            .find(name)
            .ok_or_else(|| KinoError::Argument(format!("unknown parameter {name}")))?;
        self.set_value(id, value)
    }

    pub(crate) fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, g: &Tensor<T>) {
        self.params[id.0].grad.add_assign(g);
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = p.grad.map(|_| T::zero());
        }
    }

    pub fn total_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Elements of all parameters whose name starts with `prefix`.
    pub fn count_with_prefix(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|p| p.name.starts_with(prefix))
            .map(|p| p.value.numel())
            .sum()
    }

    /// Same names and shapes in another precision; grads reset to zero.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for p in &self.params {
            out.register(p.name.clone(), p.value.cast())
                .expect("names already unique");
        }
        out
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::with_capacity(self.params.len());
        let mut payload = Vec::new();
        for p in &self.params {
            entries.push(ManifestEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                offset: payload.len() as u64,
                count: p.value.numel() as u64,
            });
            for &v in p.value.data() {
                v.write_le(&mut payload);
            }
        }
        let manifest = Manifest {
            format: "KINO1".into(),
            precision: T::PRECISION,
            entries,
        };
        let json = serde_json::to_vec(&manifest)?;
        let mut out = Vec::with_capacity(13 + json.len() + payload.len());
        out.extend_from_slice(CONTAINER_MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 13 || &bytes[..5] != CONTAINER_MAGIC {
            return Err(KinoError::Format("missing KINO1 magic header".into()));
        }
        let m = u64::from_le_bytes(bytes[5..13].try_into().expect("8 bytes")) as usize;
        let data_start = 13usize
            .checked_add(m)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| KinoError::Format("manifest length exceeds file".into()))?;
        let manifest: Manifest = serde_json::from_slice(&bytes[13..data_start])?;
        if manifest.precision != T::PRECISION {
            return Err(KinoError::Format(format!(
                "container holds {} values, expected {}",
                manifest.precision.tag(),
                T::PRECISION.tag()
            )));
        }
        let payload = &bytes[data_start..];
        let mut store = Self::new();
        for e in manifest.entries {
            let start = e.offset as usize;
            let end = start + e.count as usize * T::BYTES;
            if end > payload.len() {
                return Err(KinoError::Format(format!("entry {} truncated", e.name)));
            }
            let values = payload[start..end]
                .chunks_exact(T::BYTES)
                .map(T::read_le)
                .collect();
            store.register(e.name, Tensor::new(e.shape, values)?)?;
        }
        Ok(store)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Copies values from `other` by name. Every parameter of `self` must be
    /// present in `other` with the same shape.
    pub fn load_values_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        for p in &mut self.params {
            let id = other
                .find(&p.name)
                .ok_or_else(|| KinoError::Format(format!("checkpoint lacks {}", p.name)))?;
            let v = other.value(id);
            if v.shape() != p.value.shape() {
                return Err(KinoError::shape("load_values_from", p.value.shape(), v.shape()));
            }
            p.value = v.clone();
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    precision: Precision,
    entries: Vec<ManifestEntry>,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    count: u64,
}
