//! Named trainable parameters, their gradient accumulators, and checkpoints.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub grad: Tensor,
    pub velocity: Tensor,
}

/// Parameters in insertion order. Names are unique and shapes fixed after
/// registration.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

/// Tape leaves for every parameter of a store, in store order.
#[derive(Debug, Clone)]
pub struct Bindings {
    vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl Bindings {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointEntry {
    name: String,
    shape: Vec<usize>,
    values: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Checkpoint {
    params: Vec<CheckpointEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter {name}")));
        }
        let zeros = Tensor::zeros(value.shape());
        self.index.insert(name.clone(), self.params.len());
        self.names.push(name);
        self.params.push(Param {
            value,
            grad: zeros.clone(),
            velocity: zeros,
        });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))
    }

    /// Replaces a parameter's values; the shape must match.
    pub fn set_value(&mut self, name: &str, value: Tensor) -> Result<()> {
        let &i = self
            .index
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))?;
        if self.params[i].value.shape() != value.shape() {
            return Err(Error::shape(
                "set_value",
                format!("{name}: {:?} vs {:?}", self.params[i].value.shape(), value.shape()),
            ));
        }
        self.params[i].value = value;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.names.iter().map(String::as_str).zip(&self.params)
    }

    pub(crate) fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.names.iter().map(String::as_str).zip(self.params.iter_mut())
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Registers every parameter as a trainable leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> Bindings {
        Bindings {
            vars: self.params.iter().map(|p| tape.param(p.value.clone())).collect(),
            index: self.index.clone(),
        }
    }

    /// Registers every parameter as a constant leaf, for inference.
    pub fn bind_constants(&self, tape: &mut Tape) -> Bindings {
        Bindings {
            vars: self.params.iter().map(|p| tape.constant(p.value.clone())).collect(),
            index: self.index.clone(),
        }
    }

    /// Wraps existing tape leaves (one per parameter, in store order) as
    /// bindings for this store.
    pub fn bind_vars(&self, vars: Vec<Var>) -> Result<Bindings> {
        if vars.len() != self.len() {
            return Err(Error::Config(format!(
                "{} variables for {} parameters",
                vars.len(),
                self.len()
            )));
        }
        Ok(Bindings {
            vars,
            index: self.index.clone(),
        })
    }

    /// Adds the tape's accumulated gradients into the store's accumulators.
    pub fn accumulate_grads(&mut self, tape: &Tape, bindings: &Bindings) {
        for (p, v) in self.params.iter_mut().zip(&bindings.vars) {
            if let Some(g) = tape.grad(*v) {
                p.grad
                    .data_mut()
                    .iter_mut()
                    .zip(g.data())
                    .for_each(|(a, b)| *a += b);
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }

    /// All values flattened in store order.
    pub fn flat_values(&self) -> Vec<f64> {
        self.params
            .iter()
            .flat_map(|p| p.value.data().iter().copied())
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        let ckpt = Checkpoint {
            params: self
                .iter()
                .map(|(name, p)| CheckpointEntry {
                    name: name.to_string(),
                    shape: p.value.shape().to_vec(),
                    values: p.value.data().to_vec(),
                })
                .collect(),
        };
        Ok(serde_json::to_string(&ckpt)?)
    }

    /// Parses a checkpoint into a fresh store.
    pub fn from_json(text: &str) -> Result<Self> {
        let ckpt: Checkpoint = serde_json::from_str(text)?;
        let mut store = ParamStore::new();
        for e in ckpt.params {
            let t = Tensor::new(e.shape, e.values)
                .map_err(|err| Error::Checkpoint(format!("{}: {err}", e.name)))?;
            store.insert(e.name, t)?;
        }
        Ok(store)
    }

    /// Overwrites values from a checkpoint. Every name must exist here with
    /// the same shape.
    pub fn load_json(&mut self, text: &str) -> Result<()> {
        let loaded = ParamStore::from_json(text)?;
        if loaded.len() != self.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, checkpoint has {}",
                self.len(),
                loaded.len()
            )));
        }
        for (name, p) in loaded.iter() {
            let mine = self
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("unexpected parameter {name}")))?;
            if mine.value.shape() != p.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "{name}: shape {:?} does not match {:?}",
                    p.value.shape(),
                    mine.value.shape()
                )));
            }
        }
        for (name, p) in loaded.iter() {
            self.set_value(name, p.value.clone())?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}
