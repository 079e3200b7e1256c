use alloc::format;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::error::{CoreError, Result};
use crate::params::{glorot_uniform, Constraint, ParamStore};
use crate::tensor::Tensor;

/// Architecture of a fully input-convex network on `R^m`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FicnnDims {
    pub m: usize,
    pub depth: usize,
    pub width: usize,
}

impl FicnnDims {
    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.depth == 0 || self.width == 0 {
            return Err(CoreError::invalid(format!(
                "FICNN dims must be positive (m={}, depth={}, width={})",
                self.m, self.depth, self.width
            )));
        }
        Ok(())
    }
}

/// One FICNN layer; `lw` (non-negative) is absent at layer 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FicnnLayer<T> {
    pub lw: Option<T>,
    pub ly: T,
    pub b: T,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FicnnLayout {
    pub dims: FicnnDims,
    pub layers: Vec<FicnnLayer<usize>>,
}

impl FicnnLayout {
    pub fn init<R: Rng + ?Sized>(dims: FicnnDims, store: &mut ParamStore, prefix: &str, rng: &mut R) -> Result<Self> {
        dims.validate()?;
        let mut layers = Vec::with_capacity(dims.depth);
        for k in 0..dims.depth {
            let out = if k + 1 == dims.depth { 1 } else { dims.width };
            let lw = (k > 0).then(|| {
                store.push(format!("{prefix}{k}.lw"), glorot_uniform(rng, out, dims.width, true), Constraint::NonNegative)
            });
            let ly = store.push(format!("{prefix}{k}.ly"), glorot_uniform(rng, out, dims.m, false), Constraint::Free);
            let b = store.push(format!("{prefix}{k}.b"), Tensor::zeros(1, out), Constraint::Free);
            layers.push(FicnnLayer { lw, ly, b });
        }
        Ok(Self { dims, layers })
    }

    /// Builds `s_K` for batched rows `y: (B, m)`; returns `(B, 1)`.
    pub fn build(&self, g: &mut Graph, ids: &[NodeId], y: NodeId) -> Result<NodeId> {
        let mut s = y;
        for layer in &self.layers {
            let mut z = g.linear(y, ids[layer.ly])?;
            if let Some(lw) = layer.lw {
                let t = g.linear(s, ids[lw])?;
                z = g.add(z, t)?;
            }
            z = g.add(z, ids[layer.b])?;
            s = g.softplus(z);
        }
        Ok(s)
    }
}
