//! Trainable parameters keyed by module path, and the session that binds them
//! onto a tape.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::matrix::DenseMatrix;
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub value: DenseMatrix,
    pub gradient: DenseMatrix,
    pub requires_grad: bool,
}

impl Parameter {
    pub fn new(value: DenseMatrix) -> Self {
        let gradient = DenseMatrix::zeros(value.rows(), value.cols());
        Self {
            value,
            gradient,
            requires_grad: true,
        }
    }

    pub fn frozen(value: DenseMatrix) -> Self {
        Self {
            requires_grad: false,
            ..Self::new(value)
        }
    }

    pub fn reset_grad(&mut self) {
        self.gradient.fill(0.0);
    }
}

/// All parameters of a model, ordered by path so iteration is stable.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Parameter>,
}

/// Serialized form of one tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub rows: usize,
    pub cols: usize,
    pub requires_grad: bool,
    pub data: Vec<f64>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, key: impl Into<String>, param: Parameter) {
        self.params.insert(key.into(), param);
    }

    pub fn get(&self, key: &str) -> Result<&Parameter> {
        self.params
            .get(key)
            .ok_or_else(|| Error::UnknownParameter(key.to_string()))
    }

    pub fn get_mut(&mut self, key: &str) -> Result<&mut Parameter> {
        self.params
            .get_mut(key)
            .ok_or_else(|| Error::UnknownParameter(key.to_string()))
    }

    pub fn value(&self, key: &str) -> Result<&DenseMatrix> {
        Ok(&self.get(key)?.value)
    }

    pub fn contains(&self, key: &str) -> bool {
        self.params.contains_key(key)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Parameter)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Parameter)> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar entries.
    pub fn numel(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        self.params.values_mut().for_each(Parameter::reset_grad);
    }

    /// Adds gradients produced by [`Session::backward`].
    pub fn accumulate(&mut self, grads: Vec<(String, DenseMatrix)>) -> Result<()> {
        for (key, g) in grads {
            self.get_mut(&key)?.gradient.add_assign(&g)?;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: ParamStore) {
        self.params.extend(other.params);
    }

    pub fn to_records(&self) -> BTreeMap<String, TensorRecord> {
        self.params
            .iter()
            .map(|(k, p)| {
                (
                    k.clone(),
                    TensorRecord {
                        rows: p.value.rows(),
                        cols: p.value.cols(),
                        requires_grad: p.requires_grad,
                        data: p.value.data().to_vec(),
                    },
                )
            })
            .collect()
    }

    pub fn from_records(records: BTreeMap<String, TensorRecord>) -> Result<Self> {
        let mut store = Self::new();
        for (k, r) in records {
            let value = DenseMatrix::from_vec(r.rows, r.cols, r.data)?;
            let mut p = Parameter::new(value);
            p.requires_grad = r.requires_grad;
            store.insert(k, p);
        }
        Ok(store)
    }
}

/// A tape plus lazily bound parameter leaves.
pub struct Session<'a> {
    pub tape: Tape,
    store: &'a ParamStore,
    bound: BTreeMap<String, Var>,
}

impl<'a> Session<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Self {
            tape: Tape::new(),
            store,
            bound: BTreeMap::new(),
        }
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    /// Leaf for the parameter at `key`, created on first use.
    pub fn param(&mut self, key: &str) -> Result<Var> {
        if let Some(v) = self.bound.get(key) {
            return Ok(*v);
        }
        let p = self.store.get(key)?;
        let v = if p.requires_grad {
            self.tape.leaf(p.value.clone())
        } else {
            self.tape.constant(p.value.clone())
        };
        self.bound.insert(key.to_string(), v);
        Ok(v)
    }

    pub fn constant(&mut self, value: DenseMatrix) -> Var {
        self.tape.constant(value)
    }

    pub fn value(&self, v: Var) -> &DenseMatrix {
        self.tape.value(v)
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.tape.scalar(v)
    }

    /// Gradients of `loss` for every bound trainable parameter.
    pub fn backward(&self, loss: Var) -> Result<Vec<(String, DenseMatrix)>> {
        let loss_value = self.tape.scalar(loss);
        if !loss_value.is_finite() {
            return Err(Error::NonFinite {
                context: format!("loss value {loss_value}"),
            });
        }
        let mut grads = self.tape.backward(loss)?;
        let mut out = Vec::with_capacity(self.bound.len());
        for (k, v) in &self.bound {
            if let Some(g) = grads.take(*v) {
                out.push((k.clone(), g));
            }
        }
        Ok(out)
    }
}
