use alloc::format;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::error::{CoreError, Result};
use crate::params::{glorot_uniform, Constraint, ParamStore};
use crate::tensor::{Shape, Tensor};

/// Architecture of a partially input-convex network: convex in `x ∈ R^n`
/// for every context `y ∈ R^m`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PicnnDims {
    pub n: usize,
    pub m: usize,
    /// Number of layers `K`.
    pub depth: usize,
    /// Feature width `w`.
    pub width: usize,
    /// Context width `u`.
    pub context: usize,
}

impl PicnnDims {
    /// Dims with the default context width.
    pub fn new(n: usize, m: usize, depth: usize, width: usize) -> Self {
        Self { n, m, depth, width, context: default_context_width(width, m) }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.m == 0 {
            return Err(CoreError::invalid(format!("input dims must be positive (n={}, m={})", self.n, self.m)));
        }
        if self.depth < 2 {
            return Err(CoreError::invalid(format!("PICNN depth must be at least 2, got {}", self.depth)));
        }
        if self.width == 0 || self.context == 0 {
            return Err(CoreError::invalid("PICNN widths must be positive"));
        }
        Ok(())
    }

    /// Shapes of every block of layer `k`; absent blocks are `None`.
    pub fn layer_shapes(&self, k: usize) -> PicnnLayer<Shape> {
        let (n, m, w, u, last) = (self.n, self.m, self.width, self.context, self.depth - 1);
        let ctx_in = if k == 0 { m } else { u };
        let w_in = if k == 0 { n } else { w };
        let out = if k == last { 1 } else { w };
        PicnnLayer {
            lv: (k < last).then_some((u, ctx_in)),
            bv: (k < last).then_some((1, u)),
            lvw: (out, ctx_in),
            lw: (out, w_in),
            bw: (1, out),
            lwv: (w_in, ctx_in),
            bwv: (1, w_in),
            lxv: (k > 0).then_some((n, ctx_in)),
            bxv: (k > 0).then_some((1, n)),
            lx: (k > 0).then_some((out, n)),
        }
    }
}

/// `min(w, next power of two ≥ m)`.
pub fn default_context_width(width: usize, m: usize) -> usize {
    width.min(m.max(1).next_power_of_two())
}

/// The blocks of one PICNN layer. Biases are row vectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PicnnLayer<T> {
    pub lv: Option<T>,
    pub bv: Option<T>,
    pub lvw: T,
    /// Non-negative block.
    pub lw: T,
    pub bw: T,
    pub lwv: T,
    pub bwv: T,
    pub lxv: Option<T>,
    pub bxv: Option<T>,
    pub lx: Option<T>,
}

impl<T: Copy> PicnnLayer<T> {
    pub fn map<U>(&self, mut f: impl FnMut(&'static str, T) -> U) -> PicnnLayer<U> {
        PicnnLayer {
            lv: self.lv.map(|v| f("lv", v)),
            bv: self.bv.map(|v| f("bv", v)),
            lvw: f("lvw", self.lvw),
            lw: f("lw", self.lw),
            bw: f("bw", self.bw),
            lwv: f("lwv", self.lwv),
            bwv: f("bwv", self.bwv),
            lxv: self.lxv.map(|v| f("lxv", v)),
            bxv: self.bxv.map(|v| f("bxv", v)),
            lx: self.lx.map(|v| f("lx", v)),
        }
    }
}

/// Indices of a PICNN's tensors inside a [`ParamStore`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PicnnLayout {
    pub dims: PicnnDims,
    pub layers: Vec<PicnnLayer<usize>>,
}

impl PicnnLayout {
    /// Pushes freshly initialized blocks into `store` under `prefix`.
    pub fn init<R: Rng + ?Sized>(dims: PicnnDims, store: &mut ParamStore, prefix: &str, rng: &mut R) -> Result<Self> {
        dims.validate()?;
        let mut layers = Vec::with_capacity(dims.depth);
        for k in 0..dims.depth {
            let shapes = dims.layer_shapes(k);
            let layer = shapes.map(|name, (r, c)| {
                let is_bias = name.starts_with('b');
                let nonneg = name == "lw";
                let value = if is_bias { Tensor::zeros(r, c) } else { glorot_uniform(rng, r, c, nonneg) };
                let constraint = if nonneg { Constraint::NonNegative } else { Constraint::Free };
                store.push(format!("{prefix}{k}.{name}"), value, constraint)
            });
            layers.push(layer);
        }
        Ok(Self { dims, layers })
    }

    /// Checks that `store` holds tensors of the declared shapes.
    pub fn check(&self, store: &ParamStore) -> Result<()> {
        self.dims.validate()?;
        if self.layers.len() != self.dims.depth {
            return Err(CoreError::invalid("PICNN layer count does not match depth"));
        }
        for (k, layer) in self.layers.iter().enumerate() {
            let shapes = self.dims.layer_shapes(k);
            let mut bad = None;
            let pairs = [
                (layer.lv, shapes.lv),
                (layer.bv, shapes.bv),
                (Some(layer.lvw), Some(shapes.lvw)),
                (Some(layer.lw), Some(shapes.lw)),
                (Some(layer.bw), Some(shapes.bw)),
                (Some(layer.lwv), Some(shapes.lwv)),
                (Some(layer.bwv), Some(shapes.bwv)),
                (layer.lxv, shapes.lxv),
                (layer.bxv, shapes.bxv),
                (layer.lx, shapes.lx),
            ];
            for (idx, shape) in pairs {
                match (idx, shape) {
                    (None, None) => {}
                    (Some(i), Some(s)) if i < store.len() && store.get(i).shape() == s => {}
                    _ => bad = Some(k),
                }
            }
            if let Some(k) = bad {
                return Err(CoreError::invalid(format!("PICNN layer {k} does not match its declared shapes")));
            }
        }
        Ok(())
    }

    /// Builds `w_K` for batched rows `x: (B, n)`, `y: (B, m)`; `ids` maps
    /// store indices to graph inputs. Returns a `(B, 1)` node.
    pub fn build(&self, g: &mut Graph, ids: &[NodeId], x: NodeId, y: NodeId) -> Result<NodeId> {
        let last = self.dims.depth - 1;
        let mut v = y;
        let mut w = x;
        for (k, layer) in self.layers.iter().enumerate() {
            let p = layer.map(|_, i| ids[i]);
            let lwv_v = g.linear(v, p.lwv)?;
            let gate_pre = g.add(lwv_v, p.bwv)?;
            let gate = g.relu(gate_pre);
            let gated = g.mul(w, gate)?;
            let lw_pos = g.relu(p.lw);
            let mut z = g.linear(gated, lw_pos)?;
            let vw = g.linear(v, p.lvw)?;
            z = g.add(z, vw)?;
            z = g.add(z, p.bw)?;
            if let (Some(lxv), Some(bxv), Some(lx)) = (p.lxv, p.bxv, p.lx) {
                let s = g.linear(v, lxv)?;
                let s = g.add(s, bxv)?;
                let xs = g.mul(x, s)?;
                let t = g.linear(xs, lx)?;
                z = g.add(z, t)?;
            }
            let w_next = g.softplus(z);
            if k < last {
                if let (Some(lv), Some(bv)) = (p.lv, p.bv) {
                    let a = g.linear(v, lv)?;
                    let a = g.add(a, bv)?;
                    v = g.elu(a);
                }
            }
            w = w_next;
        }
        Ok(w)
    }
}

/// A standalone PICNN with its own storage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PicnnParams {
    pub layout: PicnnLayout,
    pub store: ParamStore,
}

impl PicnnParams {
    pub fn init<R: Rng + ?Sized>(dims: PicnnDims, rng: &mut R) -> Result<Self> {
        let mut store = ParamStore::new();
        let layout = PicnnLayout::init(dims, &mut store, "picnn.", rng)?;
        Ok(Self { layout, store })
    }

    pub fn dims(&self) -> PicnnDims {
        self.layout.dims
    }

    pub fn layer(&self, k: usize) -> PicnnLayer<&Tensor> {
        let l = self.layout.layers[k];
        PicnnLayer {
            lv: l.lv.map(|i| self.store.get(i)),
            bv: l.bv.map(|i| self.store.get(i)),
            lvw: self.store.get(l.lvw),
            lw: self.store.get(l.lw),
            bw: self.store.get(l.bw),
            lwv: self.store.get(l.lwv),
            bwv: self.store.get(l.bwv),
            lxv: l.lxv.map(|i| self.store.get(i)),
            bxv: l.bxv.map(|i| self.store.get(i)),
            lx: l.lx.map(|i| self.store.get(i)),
        }
    }
}

impl crate::params::Parameterized for PicnnParams {
    fn store(&self) -> &ParamStore {
        &self.store
    }
    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }
}
