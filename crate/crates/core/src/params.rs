//! Flat parameter storage shared by every model.
//!
//! A model keeps its tensors in a [`ParamStore`] and a typed layout of
//! indices into it; the same layout mapped to [`NodeId`]s drives graph
//! construction.

use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, GraphError, NodeId};
use crate::math;
use crate::tensor::Tensor;

/// Feasible set of a parameter tensor, enforced by [`ParamStore::project`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Constraint {
    Free,
    NonNegative,
    /// `[-bound, bound]` elementwise.
    Box(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    pub constraint: Constraint,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor, constraint: Constraint) -> usize {
        self.entries.push(ParamEntry { name: name.into(), value, constraint });
        self.entries.len() - 1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    pub fn get(&self, i: usize) -> &Tensor {
        &self.entries[i].value
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.entries[i].value
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|e| e.name == name).map(|e| &e.value)
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_scalars());
        for e in &self.entries {
            out.extend_from_slice(e.value.data());
        }
        out
    }

    /// Panics if `flat` has the wrong length.
    pub fn assign_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.num_scalars());
        let mut off = 0;
        for e in &mut self.entries {
            let n = e.value.len();
            e.value.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
    }

    /// Projects every tensor onto its feasible set: `max(0, ·)` for
    /// non-negative blocks, clamping for boxed blocks.
    pub fn project(&mut self) {
        for e in &mut self.entries {
            match e.constraint {
                Constraint::Free => {}
                Constraint::NonNegative => e.value.map_inplace(math::relu),
                Constraint::Box(b) => e.value.map_inplace(|v| v.clamp(-b, b)),
            }
        }
    }

    pub fn is_feasible(&self) -> bool {
        self.entries.iter().all(|e| match e.constraint {
            Constraint::Free => true,
            Constraint::NonNegative => e.value.data().iter().all(|&v| v >= 0.0),
            Constraint::Box(b) => e.value.data().iter().all(|&v| v.abs() <= b),
        })
    }

    /// Declares one graph input per tensor, named `prefix` + entry name.
    pub fn declare(&self, g: &mut Graph, prefix: &str) -> Result<Vec<NodeId>, GraphError> {
        self.entries
            .iter()
            .map(|e| {
                let mut name = String::from(prefix);
                name.push_str(&e.name);
                g.input(&name, e.value.shape())
            })
            .collect()
    }

    /// Binds current values to previously declared inputs.
    pub fn bind(&self, g: &mut Graph, ids: &[NodeId]) -> Result<(), GraphError> {
        for (e, &id) in self.entries.iter().zip(ids) {
            g.bind_from(id, &e.value)?;
        }
        Ok(())
    }

    pub fn max_abs_where(&self, pred: impl Fn(Constraint) -> bool) -> f64 {
        self.entries.iter().filter(|e| pred(e.constraint)).fold(0.0, |m, e| m.max(e.value.max_abs()))
    }
}

/// Models expose their parameters through this trait.
pub trait Parameterized {
    fn store(&self) -> &ParamStore;
    fn store_mut(&mut self) -> &mut ParamStore;
}

/// Uniform `(-a, a)` with `a = sqrt(6 / (fan_in + fan_out))`; `fan_in` is
/// the column count. With `nonneg`, entries are folded to `|·|`.
pub fn glorot_uniform<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, nonneg: bool) -> Tensor {
    let a = math::sqrt(6.0 / (rows + cols) as f64);
    Tensor::from_fn(rows, cols, |_, _| {
        let u = a * (2.0 * rng.random::<f64>() - 1.0);
        if nonneg {
            u.abs()
        } else {
            u
        }
    })
}
