use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Gradients, RngStream, Tape, Tensor, TensorError, Var};

const CHECKPOINT_FORMAT: &str = "mcbmn-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("parameter shapes differ from the model:\n{0}")]
    ShapeMismatch(String),
}

/// Named parameter tensors in deterministic (sorted) order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    params: BTreeMap<String, StoredTensor>,
}

#[derive(Serialize, Deserialize)]
struct StoredTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.params.insert(name.into(), value.with_requires_grad());
    }

    /// Registers a tensor initialised uniformly in `±1/sqrt(fan_in)`.
    pub fn init_uniform(&mut self, name: &str, shape: &[usize], fan_in: usize, rng: &mut RngStream) {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.uniform_range(-bound, bound)).collect();
        self.insert(name, Tensor::from_parts(shape.to_vec(), data));
    }

    /// Registers an `in × out` matrix initialised uniformly in
    /// `±sqrt(6 / (in + out))`.
    pub fn init_glorot(&mut self, name: &str, shape: [usize; 2], rng: &mut RngStream) {
        let bound = (6.0 / (shape[0] + shape[1]).max(1) as f64).sqrt();
        let data = (0..shape[0] * shape[1]).map(|_| rng.uniform_range(-bound, bound)).collect();
        self.insert(name, Tensor::from_parts(shape.to_vec(), data));
    }

    pub fn init_constant(&mut self, name: &str, shape: &[usize], value: f64) {
        self.insert(name, Tensor::full(shape, value));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Places every parameter on `tape` as a differentiable leaf.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        Bound {
            vars: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), tape.leaf(v)))
                .collect(),
        }
    }

    /// All values concatenated in name order, as a `1 × n` row.
    pub fn flatten(&self) -> Tensor {
        let data: Vec<f64> = self.params.values().flat_map(|t| t.data().iter().copied()).collect();
        let n = data.len();
        Tensor::from_parts(vec![1, n.max(1)], if n == 0 { vec![0.0] } else { data })
    }

    /// Binds every parameter as a slice of `flat` (laid out as [`Self::flatten`]),
    /// so one variable carries the gradient of the whole model.
    pub fn bind_flat<'t>(&self, flat: Var<'t>) -> Result<Bound<'t>, TensorError> {
        let mut vars = BTreeMap::new();
        let mut offset = 0;
        for (name, t) in &self.params {
            let n = t.numel();
            let v = flat.slice_cols(offset, n)?.reshape(t.shape())?;
            vars.insert(name.clone(), v);
            offset += n;
        }
        if offset != flat.dims2().1 {
            return Err(TensorError::Shape {
                op: "bind_flat",
                left: vec![1, offset],
                right: flat.shape(),
            });
        }
        Ok(Bound { vars })
    }

    /// Adds `scale ×` this sweep's gradients into the parameters' grad buffers.
    pub fn accumulate(&mut self, bound: &Bound<'_>, grads: &Gradients, scale: f64) -> Result<(), TensorError> {
        for (name, var) in &bound.vars {
            if let Some(p) = self.params.get_mut(name) {
                grads.accumulate_into(*var, p, scale)?;
            }
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.params.values_mut().for_each(Tensor::zero_grad);
    }

    pub fn shapes(&self) -> BTreeMap<String, Vec<usize>> {
        self.params
            .iter()
            .map(|(k, v)| (k.clone(), v.shape().to_vec()))
            .collect()
    }

    pub fn save<W: Write>(&self, writer: W) -> Result<(), CheckpointError> {
        let file = CheckpointFile {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            params: self
                .params
                .iter()
                .map(|(k, v)| {
                    (
                        k.clone(),
                        StoredTensor {
                            shape: v.shape().to_vec(),
                            data: v.data().to_vec(),
                        },
                    )
                })
                .collect(),
        };
        serde_json::to_writer(writer, &file).map_err(|e| CheckpointError::Malformed(e.to_string()))
    }

    pub fn load<R: Read>(reader: R) -> Result<Self, CheckpointError> {
        let file: CheckpointFile =
            serde_json::from_reader(reader).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        if file.format != CHECKPOINT_FORMAT || file.version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Malformed(format!(
                "unsupported format {} v{}",
                file.format, file.version
            )));
        }
        let mut store = Self::new();
        for (name, t) in file.params {
            let tensor = Tensor::new(t.shape, t.data)
                .map_err(|e| CheckpointError::Malformed(format!("{name}: {e}")))?;
            store.insert(name, tensor);
        }
        Ok(store)
    }

    /// Replaces values with those of `loaded` after checking names and shapes agree.
    pub fn load_values_from(&mut self, loaded: &ParamStore) -> Result<(), CheckpointError> {
        let diff = shape_diff(&self.shapes(), &loaded.shapes());
        if !diff.is_empty() {
            return Err(CheckpointError::ShapeMismatch(diff.join("\n")));
        }
        for (name, t) in &loaded.params {
            self.params.insert(name.clone(), t.clone().with_requires_grad());
        }
        Ok(())
    }
}

/// Human-readable differences between expected and found parameter shapes.
pub fn shape_diff(
    expected: &BTreeMap<String, Vec<usize>>,
    found: &BTreeMap<String, Vec<usize>>,
) -> Vec<String> {
    let mut out = Vec::new();
    for (name, shape) in expected {
        match found.get(name) {
            None => out.push(format!("  missing {name}: expected {shape:?}")),
            Some(s) if s != shape => out.push(format!("  {name}: expected {shape:?}, found {s:?}")),
            _ => {}
        }
    }
    for (name, shape) in found {
        if !expected.contains_key(name) {
            out.push(format!("  unexpected {name}: found {shape:?}"));
        }
    }
    out
}

/// Parameters placed on one tape.
pub struct Bound<'t> {
    vars: BTreeMap<String, Var<'t>>,
}

impl<'t> Bound<'t> {
    /// Panics if `name` was never registered; parameter names are fixed at model construction.
    pub fn get(&self, name: &str) -> Var<'t> {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} is not registered"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var<'t>)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Same bindings with `name` replaced by `var`.
    pub fn with_override(mut self, name: &str, var: Var<'t>) -> Self {
        self.vars.insert(name.to_string(), var);
        self
    }
}
