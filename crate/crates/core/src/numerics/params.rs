use std::collections::BTreeMap;
use std::fs;
use std::ops::Index;
use std::path::Path;

use super::io::{read_tensor, write_tensor};
use super::tape::{Gradients, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct ParamId(pub usize);

/// Named, ordered parameter tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

/// A store's parameters registered on one tape.
pub struct Bound {
    vars: Vec<Var>,
}

impl Index<ParamId> for Bound {
    type Output = Var;
    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}

impl Bound {
    /// Binding from variables created elsewhere, in the store's parameter order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let cur = &self.values[id.0];
        if cur.shape() != value.shape() {
            return Err(Error::Shape {
                op: "ParamStore::set",
                lhs: cur.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        self.values[id.0] = value;
        Ok(())
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Registers every parameter on `tape`, tracked for gradients iff `trainable`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Result<Bound> {
        let vars = self
            .values
            .iter()
            .map(|v| tape.leaf(v.clone(), trainable))
            .collect::<Result<Vec<_>>>()?;
        Ok(Bound { vars })
    }

    /// Combined checksum of every parameter, in order.
    pub fn checksum(&self) -> u64 {
        self.values
            .iter()
            .fold(0u64, |h, t| h.rotate_left(7) ^ t.checksum())
    }

    /// Writes one tensor file per parameter into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for (name, v) in self.names.iter().zip(&self.values) {
            write_tensor(&dir.join(format!("{name}.wvt")), v)?;
        }
        Ok(())
    }

    /// Loads values for every parameter already declared in `self` from `dir`.
    pub fn load_into(&mut self, dir: &Path) -> Result<()> {
        for i in 0..self.values.len() {
            let path = dir.join(format!("{}.wvt", self.names[i]));
            if !path.exists() {
                return Err(Error::Checkpoint(format!("missing parameter file {}", path.display())));
            }
            let t = read_tensor(&path)?;
            if t.shape() != self.values[i].shape() {
                return Err(Error::Checkpoint(format!(
                    "{}: stored shape {:?} does not match model shape {:?}",
                    self.names[i],
                    t.shape(),
                    self.values[i].shape()
                )));
            }
            self.values[i] = t;
        }
        Ok(())
    }

    /// Copies values of same-named, same-shaped parameters from `other`.
    pub fn copy_matching(&mut self, other: &ParamStore) -> usize {
        let lookup: BTreeMap<&str, &Tensor> = other.iter().map(|(_, n, v)| (n, v)).collect();
        let mut copied = 0;
        for (name, v) in self.names.iter().zip(self.values.iter_mut()) {
            if let Some(src) = lookup.get(name.as_str()) {
                if src.shape() == v.shape() {
                    *v = (*src).clone();
                    copied += 1;
                }
            }
        }
        copied
    }
}

/// Running sum of per-sample gradients for one store.
#[derive(Clone, Debug)]
pub struct GradAccum {
    sums: Vec<Vec<f64>>,
    count: usize,
}

impl GradAccum {
    pub fn new(store: &ParamStore) -> Self {
        Self {
            sums: store.values().iter().map(|v| vec![0.0; v.len()]).collect(),
            count: 0,
        }
    }

    /// Adds the gradients of `bound`'s parameters.
    pub fn add(&mut self, bound: &Bound, grads: &Gradients) -> Result<()> {
        for (sum, v) in self.sums.iter_mut().zip(bound.vars()) {
            let g = grads.wrt(*v)?;
            for (a, b) in sum.iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        self.count += 1;
        Ok(())
    }

    /// Merges another accumulator (same store layout).
    pub fn merge(&mut self, other: &GradAccum) {
        for (a, b) in self.sums.iter_mut().zip(&other.sums) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        self.count += other.count;
    }

    pub fn count(&self) -> usize {
        self.count
    }

    /// Mean gradient per parameter.
    pub fn mean(&self) -> Vec<Vec<f64>> {
        let c = self.count.max(1) as f64;
        self.sums
            .iter()
            .map(|s| s.iter().map(|v| v / c).collect())
            .collect()
    }
}
