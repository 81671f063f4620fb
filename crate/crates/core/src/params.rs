//! Named parameter groups.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Result};
use crate::tensor::{Gradients, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub tensor: Tensor,
}

/// An ordered list of named, shaped arrays. Networks address entries by
/// position; names exist for checkpoints and diagnostics.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    entries: Vec<NamedTensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) -> usize {
        self.entries.push(NamedTensor { name: name.into(), tensor });
        self.entries.len() - 1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, i: usize) -> &Tensor {
        &self.entries[i].tensor
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.entries[i].tensor
    }

    pub fn name(&self, i: usize) -> &str {
        &self.entries[i].name
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|e| e.name == name).map(|e| &e.tensor)
    }

    pub fn iter(&self) -> impl Iterator<Item = &NamedTensor> {
        self.entries.iter()
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.entries.iter().map(|e| &e.tensor)
    }

    /// Records every entry on the tape as a differentiable leaf.
    pub fn load(&self, tape: &mut Tape) -> Vec<Var> {
        self.tensors().map(|t| tape.param(t.clone())).collect()
    }

    /// Records every entry as a constant (no gradients flow back).
    pub fn load_frozen(&self, tape: &mut Tape) -> Vec<Var> {
        self.tensors().map(|t| tape.constant(t.clone())).collect()
    }

    pub fn zeros_like(&self) -> ParamSet {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|e| NamedTensor { name: e.name.clone(), tensor: Tensor::zeros(e.tensor.shape()) })
                .collect(),
        }
    }

    /// Collects the gradients of `vars` (as returned by [`ParamSet::load`]).
    pub fn grads_from(&self, vars: &[Var], grads: &Gradients) -> Result<ParamSet> {
        let mut out = self.zeros_like();
        out.accumulate(vars, grads)?;
        Ok(out)
    }

    /// Adds the gradients of `vars` into this buffer.
    pub fn accumulate(&mut self, vars: &[Var], grads: &Gradients) -> Result<()> {
        if vars.len() != self.entries.len() {
            return dim_err(format!("{} vars for {} params", vars.len(), self.entries.len()));
        }
        for (e, v) in self.entries.iter_mut().zip(vars) {
            e.tensor.axpy(1.0, grads.wrt(*v)?)?;
        }
        Ok(())
    }

    pub fn zero(&mut self) {
        for e in &mut self.entries {
            e.tensor.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// `self += scale * other`
    pub fn axpy(&mut self, scale: f64, other: &ParamSet) -> Result<()> {
        if other.len() != self.len() {
            return dim_err("parameter sets differ in length");
        }
        for (a, b) in self.entries.iter_mut().zip(&other.entries) {
            a.tensor.axpy(scale, &b.tensor)?;
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        for e in &mut self.entries {
            e.tensor.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn sq_norm(&self) -> f64 {
        self.tensors().map(Tensor::sq_norm).sum()
    }

    pub fn dot(&self, other: &ParamSet) -> f64 {
        self.tensors()
            .zip(other.tensors())
            .map(|(a, b)| a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum::<f64>())
            .sum()
    }

    /// Rescales so the global L2 norm is at most `max_norm`. Returns the norm before clipping.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.sq_norm().sqrt();
        if norm > max_norm {
            self.scale(max_norm / norm);
        }
        norm
    }

    pub fn numel(&self) -> usize {
        self.tensors().map(Tensor::numel).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.tensors().flat_map(|t| t.data().iter().copied()).collect()
    }

    /// Inverse of [`ParamSet::flatten`], reusing this set's names and shapes.
    pub fn unflatten(&self, flat: &[f64]) -> Result<ParamSet> {
        if flat.len() != self.numel() {
            return dim_err(format!("{} values for {} parameters", flat.len(), self.numel()));
        }
        let mut off = 0;
        let mut out = ParamSet::new();
        for e in &self.entries {
            let n = e.tensor.numel();
            out.push(e.name.clone(), Tensor::new(e.tensor.shape().to_vec(), flat[off..off + n].to_vec())?);
            off += n;
        }
        Ok(out)
    }
}
