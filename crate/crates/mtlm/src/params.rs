use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::numeric::{Matrix, NamedGrads};

/// Ordered collection of named parameter matrices. Insertion order is the
/// canonical order for checkpoints and for the flattened vector used by
/// gradient checking, so it must stay stable for a given model config.
#[derive(Debug, Clone)]
pub struct ParamSet {
    entries: Vec<(String, Matrix)>,
    index: HashMap<String, usize>,
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet { entries: Vec::new(), index: HashMap::new() }
    }

    pub fn insert(&mut self, name: &str, value: Matrix) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name {name:?}")));
        }
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push((name.to_string(), value));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Matrix> {
        self.index
            .get(name)
            .map(|&i| &self.entries[i].1)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name:?}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Matrix> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.entries[i].1),
            None => Err(Error::Config(format!("unknown parameter {name:?}"))),
        }
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.entries.iter().map(|(n, m)| (n.as_str(), m))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Matrix)> {
        self.entries.iter_mut().map(|(n, m)| (n.as_str(), m))
    }

    /// Replace the value of an existing entry, keeping its position.
    pub fn set(&mut self, name: &str, value: Matrix) -> Result<()> {
        let slot = self.get_mut(name)?;
        if slot.shape() != value.shape() {
            return Err(Error::Dimension(format!(
                "parameter {name:?} is {:?}, replacement is {:?}",
                slot.shape(),
                value.shape()
            )));
        }
        *slot = value;
        Ok(())
    }

    pub fn total_len(&self) -> usize {
        self.entries.iter().map(|(_, m)| m.len()).sum()
    }

    /// All entries concatenated in insertion order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.total_len());
        for (_, m) in &self.entries {
            out.extend_from_slice(m.data());
        }
        out
    }

    /// Inverse of `flatten`; the vector length must match exactly.
    pub fn unflatten(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.total_len() {
            return Err(Error::Dimension(format!(
                "flat vector of {} for {} parameters",
                flat.len(),
                self.total_len()
            )));
        }
        let mut at = 0;
        for (_, m) in self.entries.iter_mut() {
            let n = m.len();
            m.data_mut().copy_from_slice(&flat[at..at + n]);
            at += n;
        }
        Ok(())
    }

    /// Gradient application: p -= lr * g for every named entry present here.
    pub fn apply_grads(&mut self, grads: &NamedGrads, lr: f64) -> Result<()> {
        for (name, g) in grads.iter() {
            let slot = self.get_mut(name)?;
            slot.add_scaled(g, -lr)?;
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|(_, m)| m.all_finite())
    }
}

/// Global L2 norm across a set of gradients.
pub fn global_grad_norm(grads: &NamedGrads) -> f64 {
    grads.iter().map(|(_, g)| g.sum_squares()).sum::<f64>().sqrt()
}
