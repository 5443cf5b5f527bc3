//! Reverse-mode automatic differentiation over `f64` ndarrays.
//!
//! A [`Graph`] is a tape of immutable node values plus one backward closure
//! per non-leaf node. Nodes are appended in topological order during the
//! forward pass, so a single reverse sweep propagates gradients. Everything
//! is computed at 64-bit precision and single-threaded, which keeps forward
//! and backward bit-deterministic for a fixed input.
//!
//! Parameters live outside the graph in a [`ParamStore`]; each forward pass
//! leafs them in via [`Graph::param`] and [`Graph::param_grads`] reads the
//! accumulated gradients back out after [`Graph::backward`].

use ndarray::{concatenate, ArrayD, ArrayViewD, Axis, Ix1, Ix2, IxDyn};

pub mod check;
mod ops;

pub use ops::conv::{conv2d_output_side, Conv2dSpec};

/// Index of a node on the tape.
pub type NodeId = usize;

/// Handle to a parameter in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// A named, trainable array. `decay` marks whether decoupled weight decay
/// applies to it (norm scales/shifts and biases opt out).
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: ArrayD<f64>,
    pub decay: bool,
}

/// Flat container for every trainable array of a model.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    /// Registers a parameter. Names must be unique; they key checkpoints.
    pub fn add(&mut self, name: impl Into<String>, value: ArrayD<f64>, decay: bool) -> ParamId {
        let name = name.into();
        debug_assert!(
            !self.params.iter().any(|p| p.name == name),
            "duplicate parameter name {name}"
        );
        self.params.push(Param { name, value, decay });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Total number of scalar entries across all parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params
            .iter()
            .all(|p| p.value.iter().all(|v| v.is_finite()))
    }

    /// All parameter values concatenated in registration order (gradient
    /// checks and optimizer tests drive the store through this view).
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_scalars());
        for p in &self.params {
            out.extend(p.value.iter());
        }
        out
    }

    /// Inverse of [`ParamStore::flatten`].
    pub fn load_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.num_scalars());
        let mut off = 0;
        for p in &mut self.params {
            for v in p.value.iter_mut() {
                *v = flat[off];
                off += 1;
            }
        }
    }
}

type BackwardFn = Box<dyn Fn(&[ArrayD<f64>], &ArrayD<f64>) -> Vec<(NodeId, ArrayD<f64>)>>;

/// Tape of forward values with per-node backward closures.
#[derive(Default)]
pub struct Graph {
    values: Vec<ArrayD<f64>>,
    backward_fns: Vec<Option<BackwardFn>>,
    param_of: Vec<Option<ParamId>>,
    grads: Vec<Option<ArrayD<f64>>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub(crate) fn push(
        &mut self,
        value: ArrayD<f64>,
        backward: Option<BackwardFn>,
        param: Option<ParamId>,
    ) -> NodeId {
        self.values.push(value);
        self.backward_fns.push(backward);
        self.param_of.push(param);
        self.values.len() - 1
    }

    /// Leafs a constant (non-trainable) value into the graph.
    pub fn constant(&mut self, value: ArrayD<f64>) -> NodeId {
        self.push(value, None, None)
    }

    /// Leafs a parameter value into the graph, remembering its identity so
    /// its gradient can be collected after the backward pass.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        self.push(store.get(id).value.clone(), None, Some(id))
    }

    pub fn value(&self, id: NodeId) -> &ArrayD<f64> {
        &self.values[id]
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.values[id].shape()
    }

    /// Gradient of the last `backward` root w.r.t. node `id`, if it was reached.
    pub fn grad(&self, id: NodeId) -> Option<&ArrayD<f64>> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Runs the reverse sweep from a scalar root node.
    pub fn backward(&mut self, root: NodeId) {
        assert_eq!(
            self.values[root].len(),
            1,
            "backward root must be a scalar, got shape {:?}",
            self.values[root].shape()
        );
        self.grads = vec![None; self.values.len()];
        self.grads[root] = Some(ArrayD::ones(IxDyn(self.values[root].shape())));
        for i in (0..=root).rev() {
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            if let Some(f) = &self.backward_fns[i] {
                for (parent, contrib) in f(&self.values, &g) {
                    debug_assert!(parent < i, "backward edge must point to an earlier node");
                    match &mut self.grads[parent] {
                        Some(acc) => *acc += &contrib,
                        slot @ None => *slot = Some(contrib),
                    }
                }
            }
            self.grads[i] = Some(g);
        }
    }

    /// Collects parameter gradients after [`Graph::backward`], summing over
    /// repeated uses of the same parameter.
    pub fn param_grads(&self) -> Vec<(ParamId, ArrayD<f64>)> {
        let mut out: Vec<(ParamId, ArrayD<f64>)> = Vec::new();
        for (node, pid) in self.param_of.iter().enumerate() {
            let (Some(pid), Some(g)) = (pid, self.grads.get(node).and_then(|g| g.as_ref()))
            else {
                continue;
            };
            match out.iter_mut().find(|(existing, _)| existing == pid) {
                Some((_, acc)) => *acc += g,
                None => out.push((*pid, g.clone())),
            }
        }
        out
    }
}

pub(crate) fn as2(v: &ArrayD<f64>) -> ndarray::ArrayView2<'_, f64> {
    v.view().into_dimensionality::<Ix2>().expect("rank-2 value")
}

pub(crate) fn as1(v: &ArrayD<f64>) -> ndarray::ArrayView1<'_, f64> {
    v.view().into_dimensionality::<Ix1>().expect("rank-1 value")
}

pub(crate) fn reshaped(v: ArrayD<f64>, shape: &[usize]) -> ArrayD<f64> {
    let n: usize = shape.iter().product();
    assert_eq!(v.len(), n, "reshape {:?} -> {:?}", v.shape(), shape);
    v.into_shape_with_order(IxDyn(shape))
        .expect("contiguous reshape")
}

pub(crate) fn standard(v: ArrayViewD<'_, f64>) -> ArrayD<f64> {
    v.as_standard_layout().to_owned()
}

/// Concatenates host arrays along `axis`, always in standard layout.
pub(crate) fn concat_host(axis: usize, parts: &[ArrayViewD<'_, f64>]) -> ArrayD<f64> {
    standard(concatenate(Axis(axis), parts).expect("concatenable shapes").view())
}
