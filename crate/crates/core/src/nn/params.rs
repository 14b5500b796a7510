//! Named learnable parameters and the checkpoint format.
//!
//! A checkpoint is one JSON header line
//! `{"version":1,"tensors":[{"name":..,"shape":[..]},..]}` followed by the raw
//! little-endian `f32` values of every tensor, in header order.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

/// Storage precision of parameter values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    /// Values are rounded to `f32` after every update and on load.
    #[default]
    F32,
    /// Full `f64` storage, used for gradient checking.
    F64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
struct Entry {
    name: String,
    value: Tensor,
    grad: Tensor,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
    index: HashMap<String, ParamId>,
    precision: Precision,
}

/// Per-parameter gradient buffers produced by one backward pass.
#[derive(Debug, Clone, Default)]
pub struct Grads {
    slots: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn new(n_params: usize) -> Self {
        Self {
            slots: vec![None; n_params],
        }
    }

    pub(crate) fn add(&mut self, id: ParamId, grad: &Tensor) {
        if self.slots.len() <= id.0 {
            self.slots.resize(id.0 + 1, None);
        }
        match &mut self.slots[id.0] {
            Some(t) => t.add_assign(grad),
            slot @ None => *slot = Some(grad.clone()),
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.slots.get(id.0).and_then(Option::as_ref)
    }

    /// Sums `other` into `self`.
    pub fn merge(&mut self, other: &Grads) {
        for (i, g) in other.slots.iter().enumerate() {
            if let Some(g) = g {
                self.add(ParamId(i), g);
            }
        }
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_precision(precision: Precision) -> Self {
        Self {
            precision,
            ..Self::default()
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn set_precision(&mut self, precision: Precision) {
        self.precision = precision;
        self.round_to_storage();
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::InvalidInput(format!("duplicate parameter `{name}`")));
        }
        let id = ParamId(self.entries.len());
        let grad = Tensor::zeros(value.shape());
        let mut value = value;
        if self.precision == Precision::F32 {
            round_f32(value.data_mut());
        }
        self.entries.push(Entry {
            name: name.to_string(),
            value,
            grad,
        });
        self.index.insert(name.to_string(), id);
        Ok(id)
    }

    /// Truncated normal (cut at two standard deviations).
    pub fn add_normal(
        &mut self,
        name: &str,
        shape: &[usize],
        std: f64,
        rng: &mut impl Rng,
    ) -> Result<ParamId> {
        let normal = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| loop {
                let v: f64 = normal.sample(rng);
                if v.abs() <= 2.0 * std {
                    break v;
                }
            })
            .collect();
        self.add(name, Tensor::new(shape.to_vec(), data)?)
    }

    pub fn add_zeros(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn add_ones(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        self.add(name, Tensor::full(shape, 1.0))
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        Ok(self.value(self.id(name)?))
    }

    /// Replaces a parameter value, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let id = self.id(name)?;
        let entry = &mut self.entries[id.0];
        if entry.value.shape() != value.shape() {
            return Err(Error::shape(
                "ParamStore::set",
                format!(
                    "`{name}` has shape {:?}, got {:?}",
                    entry.value.shape(),
                    value.shape()
                ),
            ));
        }
        entry.value = value;
        if self.precision == Precision::F32 {
            round_f32(entry.value.data_mut());
        }
        Ok(())
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].grad
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    /// The value to update and its accumulated gradient.
    pub fn value_and_grad_mut(&mut self, id: ParamId) -> (&mut Tensor, &Tensor) {
        let e = &mut self.entries[id.0];
        (&mut e.value, &e.grad)
    }

    pub fn scale_grad(&mut self, id: ParamId, s: f64) {
        self.entries[id.0].grad.data_mut().iter_mut().for_each(|g| *g *= s);
    }

    pub fn zero_grad(&mut self) {
        for e in &mut self.entries {
            e.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Adds a backward pass's gradients into the accumulators.
    pub fn accumulate(&mut self, grads: &Grads) -> Result<()> {
        for (i, g) in grads.slots.iter().enumerate() {
            let Some(g) = g else { continue };
            let entry = self
                .entries
                .get_mut(i)
                .ok_or_else(|| Error::InvalidInput(format!("gradient for unknown param #{i}")))?;
            if entry.grad.len() != g.len() {
                return Err(Error::shape("ParamStore::accumulate", entry.name.clone()));
            }
            entry.grad.add_assign(g);
        }
        Ok(())
    }

    pub fn round_to_storage(&mut self) {
        if self.precision == Precision::F32 {
            for e in &mut self.entries {
                round_f32(e.value.data_mut());
            }
        }
    }

    /// Copies every parameter of `other` whose name exists here (shapes must match).
    /// Returns the number of tensors copied.
    pub fn load_matching(&mut self, other: &ParamStore) -> Result<usize> {
        let mut copied = 0;
        for e in &other.entries {
            if self.contains(&e.name) {
                self.set(&e.name, e.value.clone())?;
                copied += 1;
            }
        }
        Ok(copied)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        self.write_to(&mut bytes)?;
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let header = CheckpointHeader {
            version: CHECKPOINT_VERSION,
            tensors: self
                .entries
                .iter()
                .map(|e| TensorHeader {
                    name: e.name.clone(),
                    shape: e.value.shape().to_vec(),
                })
                .collect(),
        };
        let io = |e| Error::io("<checkpoint>", e);
        serde_json::to_writer(&mut *w, &header)?;
        w.write_all(b"\n").map_err(io)?;
        for e in &self.entries {
            for &v in e.value.data() {
                w.write_all(&(v as f32).to_le_bytes()).map_err(io)?;
            }
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(BufReader::new(file), path)
    }

    pub fn read_from(mut r: impl BufRead, path: &Path) -> Result<Self> {
        let parse = |line, msg: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let mut header_line = String::new();
        r.read_line(&mut header_line)
            .map_err(|e| Error::io(path, e))?;
        let header: CheckpointHeader = serde_json::from_str(header_line.trim_end())
            .map_err(|e| parse(1, format!("bad checkpoint header: {e}")))?;
        if header.version != CHECKPOINT_VERSION {
            return Err(parse(1, format!("unsupported version {}", header.version)));
        }
        let mut payload = Vec::new();
        r.read_to_end(&mut payload).map_err(|e| Error::io(path, e))?;
        let expected: usize = header
            .tensors
            .iter()
            .map(|t| t.shape.iter().product::<usize>() * 4)
            .sum();
        if payload.len() != expected {
            return Err(parse(
                2,
                format!("payload has {} bytes, header needs {expected}", payload.len()),
            ));
        }
        let mut store = ParamStore::new();
        let mut chunks = payload.chunks_exact(4);
        for t in header.tensors {
            let n: usize = t.shape.iter().product();
            let data = chunks
                .by_ref()
                .take(n)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            store.add(&t.name, Tensor::new(t.shape, data)?)?;
        }
        Ok(store)
    }
}

fn round_f32(data: &mut [f64]) {
    for v in data {
        *v = *v as f32 as f64;
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    version: u32,
    tensors: Vec<TensorHeader>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorHeader {
    name: String,
    shape: Vec<usize>,
}
