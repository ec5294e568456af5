//! Named parameter storage and the JSON checkpoint format.
//!
//! A checkpoint is a JSON object
//! `{"format": "preprune-checkpoint-v1", "params": {name: {"shape": [..], "values": [..]}}}`.
//! Values are written as shortest round-trip decimals and parsed with exact
//! rounding, so a save/load cycle reproduces every bit.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const CHECKPOINT_FORMAT: &str = "preprune-checkpoint-v1";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    map: BTreeMap<String, Tensor<T>>,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    shape: Vec<usize>,
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    params: BTreeMap<String, Entry>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            map: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.map.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.map
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.map.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.map.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Total number of scalar values.
    pub fn count(&self) -> usize {
        self.map.values().map(|t| t.len()).sum()
    }

    /// Merge another store, prefixing its names.
    pub fn extend_prefixed(&mut self, prefix: &str, other: &ParamStore<T>) {
        for (k, v) in other.iter() {
            self.insert(format!("{prefix}{k}"), v.clone());
        }
    }

    /// Sub-store of entries whose name starts with `prefix`, prefix stripped.
    pub fn strip_prefix(&self, prefix: &str) -> ParamStore<T> {
        let mut out = ParamStore::new();
        for (k, v) in self.iter() {
            if let Some(rest) = k.strip_prefix(prefix) {
                out.insert(rest, v.clone());
            }
        }
        out
    }

    /// Register every entry as a trainable leaf of `g`.
    pub fn bind_trainable(&self, g: &mut Graph<T>) -> BTreeMap<String, Var> {
        self.map
            .iter()
            .map(|(k, v)| (k.clone(), g.param(k, v.clone())))
            .collect()
    }

    /// Register every entry as a frozen named leaf of `g`.
    pub fn bind_frozen(&self, g: &mut Graph<T>) -> BTreeMap<String, Var> {
        self.map
            .iter()
            .map(|(k, v)| (k.clone(), g.frozen(k, v.clone())))
            .collect()
    }

    /// Bind every entry under `prefix + name`, returning vars keyed by the
    /// unprefixed name.
    pub fn bind_prefixed(&self, g: &mut Graph<T>, prefix: &str, trainable: bool) -> BTreeMap<String, Var> {
        self.map
            .iter()
            .map(|(k, v)| {
                let full = format!("{prefix}{k}");
                let var = if trainable {
                    g.param(&full, v.clone())
                } else {
                    g.frozen(&full, v.clone())
                };
                (k.clone(), var)
            })
            .collect()
    }

    /// Order-sensitive FNV-1a checksum over names, shapes and value bits.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        for (k, v) in &self.map {
            feed(k.as_bytes());
            for &s in v.shape() {
                feed(&(s as u64).to_le_bytes());
            }
            for &x in v.data() {
                feed(&x.to_f64_exact().to_bits().to_le_bytes());
            }
        }
        h
    }

    pub fn to_json(&self) -> Result<String> {
        let params = self
            .map
            .iter()
            .map(|(k, v)| {
                (
                    k.clone(),
                    Entry {
                        shape: v.shape().to_vec(),
                        values: v.to_f64_vec(),
                    },
                )
            })
            .collect();
        Ok(serde_json::to_string(&Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            params,
        })?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(s)?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("unknown format {:?}", ck.format)));
        }
        let mut out = ParamStore::new();
        for (k, e) in ck.params {
            let t = Tensor::new(
                e.shape,
                e.values.into_iter().map(T::from_f64_lossy).collect(),
            )
            .map_err(|err| Error::Checkpoint(format!("{k}: {err}")))?;
            out.insert(k, t);
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}
