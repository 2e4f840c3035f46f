use std::fs;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn from_index(i: usize) -> Self {
        ParamId(i)
    }

    pub fn index(self) -> usize {
        self.0
    }
}

/// Named trainable tensors, in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> Result<ParamId> {
        if self.names.iter().any(|n| n == name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        self.names.push(name.to_string());
        self.tensors.push(value);
        Ok(ParamId(self.tensors.len() - 1))
    }

    /// Registers an `fan_in×fan_out` tensor drawn from U(-1/√fan_in, 1/√fan_in).
    pub fn add_uniform(&mut self, name: &str, rows: usize, cols: usize, fan_in: usize, rng: &mut Rng) -> Result<ParamId> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let data = (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect();
        self.add(name, Tensor::from_vec(rows, cols, data)?)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.tensors.iter().enumerate().map(|(i, t)| (ParamId(i), t))
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    /// Copies values from `other`, which must have identical names and shapes.
    /// Moves every value toward `current`: `self = decay·self + (1 − decay)·current`.
    pub fn ema_update(&mut self, current: &ParamStore, decay: f64) {
        for (shadow, live) in self.tensors.iter_mut().zip(&current.tensors) {
            for (s, &c) in shadow.data_mut().iter_mut().zip(live.data()) {
                *s = decay * *s + (1.0 - decay) * c;
            }
        }
    }

    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        if self.names != other.names {
            return Err(Error::UntrainedParams("parameter names differ".into()));
        }
        for (i, (mine, theirs)) in self.tensors.iter().zip(&other.tensors).enumerate() {
            if mine.shape() != theirs.shape() {
                return Err(Error::UntrainedParams(format!(
                    "{} has shape {:?}, expected {:?}",
                    self.names[i],
                    theirs.shape(),
                    mine.shape()
                )));
            }
        }
        self.tensors.clone_from(&other.tensors);
        Ok(())
    }
}

/// Parameter gradients, dense per touched tensor.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    pub fn new(params: &ParamStore) -> Self {
        Self {
            grads: vec![None; params.len()],
            shapes: params.tensors.iter().map(Tensor::shape).collect(),
        }
    }

    pub(crate) fn accumulate(&mut self, id: ParamId, g: &[f64]) {
        let (r, c) = self.shapes[id.0];
        let slot = self.grads[id.0].get_or_insert_with(|| Tensor::zeros(r, c));
        for (o, v) in slot.data_mut().iter_mut().zip(g) {
            *o += v;
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }

    pub fn scale(&mut self, c: f64) {
        for t in self.grads.iter_mut().flatten() {
            for v in t.data_mut() {
                *v *= c;
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .flat_map(|t| t.data())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().flatten().all(Tensor::is_finite)
    }
}

pub const CHECKPOINT_FORMAT: &str = "rearrange-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedTensor {
    pub name: String,
    pub shape: [usize; 2],
    pub data: Vec<f64>,
}

/// On-disk model: parameters plus free-form metadata (the model config and
/// training progress).
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub meta: serde_json::Value,
    pub params: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore, meta: serde_json::Value) -> Self {
        let params = store
            .names
            .iter()
            .zip(&store.tensors)
            .map(|(name, t)| NamedTensor {
                name: name.clone(),
                shape: [t.rows(), t.cols()],
                data: t.data().to_vec(),
            })
            .collect();
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            meta,
            params,
        }
    }

    pub fn to_store(&self) -> Result<ParamStore> {
        if self.format != CHECKPOINT_FORMAT || self.version != CHECKPOINT_VERSION {
            return Err(Error::IncompatibleCheckpoint(format!(
                "format {} version {}",
                self.format, self.version
            )));
        }
        let mut store = ParamStore::new();
        for p in &self.params {
            let t = Tensor::from_vec(p.shape[0], p.shape[1], p.data.clone())
                .map_err(|e| Error::IncompatibleCheckpoint(format!("{}: {e}", p.name)))?;
            if !t.is_finite() {
                return Err(Error::IncompatibleCheckpoint(format!("{} has non-finite values", p.name)));
            }
            store.add(&p.name, t)?;
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })?;
        fs::write(path, text).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })
    }
}
