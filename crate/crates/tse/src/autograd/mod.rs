//! Minimal reverse-mode automatic differentiation over `f64` ndarrays.
//!
//! A [`Graph`] is a tape of nodes in topological order; each non-leaf node
//! keeps the boxed [`Op`] that produced it. Backward walks the tape in
//! reverse, handing each op its upstream gradient and accumulating into the
//! parents. Everything is `f64` and single-allocation-per-op, so two runs
//! with the same inputs are bitwise identical; the fused kernels only
//! parallelize over disjoint output slices, which keeps that guarantee under
//! rayon.
//!
//! Parameters live outside the tape in a [`ParamStore`]; a fresh graph is
//! built per step and parameters are injected as leaves tied to their
//! [`ParamId`], so optimizer state and checkpoints never touch tape
//! internals.

pub(crate) mod fastmath;
mod init;
mod ops_attn;
mod ops_audio;
mod ops_basic;
mod ops_chunk;
mod ops_conv;
mod ops_norm;
mod ops_rnn;
mod optim;

pub use init::{orthogonal_init, uniform_fan_in};
pub use ops_attn::MhaWeights;
pub use ops_chunk::chunk_count;
pub use ops_rnn::RnnWeights;
pub use optim::{clip_grad_norm, AdamConfig, AdamOptimizer};

use ndarray::{ArrayD, IxDyn};

pub type Arr = ArrayD<f64>;

#[derive(Copy, Clone, PartialEq, Eq, Debug)]
pub struct NodeId(pub(crate) usize);

#[derive(Copy, Clone, PartialEq, Eq, PartialOrd, Ord, Debug, Hash)]
pub struct ParamId(pub(crate) usize);

/// Backward rule of a single tape node.
pub(crate) trait Op {
    /// Gradients w.r.t. each parent, given parent values, the node's own
    /// output and the upstream gradient. Entries where `wants` is false may
    /// be `None`.
    fn backward(
        &self,
        inputs: &[&Arr],
        output: &Arr,
        grad: &Arr,
        wants: &[bool],
    ) -> Vec<Option<Arr>>;

    fn name(&self) -> &'static str;
}

struct Node {
    value: Arr,
    parents: Vec<NodeId>,
    op: Option<Box<dyn Op>>,
    needs_grad: bool,
}

/// Named parameter set, the single owner of all trainable state.
#[derive(Clone, Default)]
pub struct ParamStore {
    params: Vec<(String, Arr)>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Arr) -> ParamId {
        let name = name.into();
        assert!(
            !self.params.iter().any(|(n, _)| *n == name),
            "duplicate parameter name {name}"
        );
        self.params.push((name, value));
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Arr {
        &self.params[id.0].1
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Arr {
        &mut self.params[id.0].1
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].0
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn id_by_name(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|(n, _)| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Arr)> {
        self.params
            .iter()
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }
}

/// Per-backward-pass gradient table, keyed by tape node.
pub struct Gradients {
    grads: Vec<Option<Arr>>,
    param_nodes: Vec<(ParamId, NodeId)>,
}

impl Gradients {
    pub fn wrt(&self, id: NodeId) -> Option<&Arr> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Accumulated gradient per parameter, summed over every tape leaf bound
    /// to that parameter (a parameter may be injected more than once).
    pub fn by_param(&self) -> Vec<(ParamId, Arr)> {
        let mut out: Vec<(ParamId, Arr)> = Vec::new();
        for &(pid, nid) in &self.param_nodes {
            if let Some(g) = self.wrt(nid) {
                match out.iter_mut().find(|(p, _)| *p == pid) {
                    Some((_, acc)) => *acc += g,
                    None => out.push((pid, g.clone())),
                }
            }
        }
        out.sort_by_key(|(p, _)| *p);
        out
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_nodes: Vec<(ParamId, NodeId)>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn value(&self, id: NodeId) -> &Arr {
        &self.nodes[id.0].value
    }

    pub fn scalar_value(&self, id: NodeId) -> f64 {
        let v = self.value(id);
        debug_assert_eq!(v.len(), 1, "expected scalar node");
        v.iter().next().copied().unwrap()
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Arr) -> NodeId {
        self.push_leaf(value, false)
    }

    /// Differentiable leaf that is not a parameter (for gradient checks and
    /// loss inputs whose gradient is inspected directly).
    pub fn leaf(&mut self, value: Arr) -> NodeId {
        self.push_leaf(value, true)
    }

    /// Injects a parameter value as a leaf. `trainable: false` detaches it
    /// (used to freeze the speaker encoder).
    pub fn param(&mut self, store: &ParamStore, id: ParamId, trainable: bool) -> NodeId {
        let nid = self.push_leaf(store.value(id).clone(), trainable);
        if trainable {
            self.param_nodes.push((id, nid));
        }
        nid
    }

    pub fn scalar(&mut self, v: f64) -> NodeId {
        self.constant(Arr::from_elem(IxDyn(&[]), v))
    }

    fn push_leaf(&mut self, value: Arr, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            op: None,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub(crate) fn push_op(
        &mut self,
        value: Arr,
        parents: Vec<NodeId>,
        op: Box<dyn Op>,
    ) -> NodeId {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        debug_assert!(
            parents.iter().all(|p| p.0 < self.nodes.len()),
            "parent out of range"
        );
        self.nodes.push(Node {
            value,
            parents,
            op: Some(op),
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Reverse-mode sweep from a scalar root. Returns gradients for every
    /// differentiable leaf; interior gradients are dropped as soon as they
    /// have been consumed.
    pub fn backward(&self, root: NodeId) -> Gradients {
        assert_eq!(
            self.nodes[root.0].value.len(),
            1,
            "backward root must be scalar"
        );
        let mut grads: Vec<Option<Arr>> = Vec::new();
        grads.resize_with(self.nodes.len(), || None);
        grads[root.0] = Some(Arr::from_elem(self.nodes[root.0].value.raw_dim(), 1.0));

        for i in (0..=root.0).rev() {
            if !self.nodes[i].needs_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if let Some(op) = &node.op {
                let inputs: Vec<&Arr> = node.parents.iter().map(|p| &self.nodes[p.0].value).collect();
                let wants: Vec<bool> = node
                    .parents
                    .iter()
                    .map(|p| self.nodes[p.0].needs_grad)
                    .collect();
                let pgrads = op.backward(&inputs, &node.value, &g, &wants);
                debug_assert_eq!(pgrads.len(), node.parents.len(), "{}", op.name());
                for (pid, pg) in node.parents.iter().zip(pgrads) {
                    let Some(pg) = pg else { continue };
                    if !self.nodes[pid.0].needs_grad {
                        continue;
                    }
                    debug_assert_eq!(
                        pg.shape(),
                        self.nodes[pid.0].value.shape(),
                        "gradient shape mismatch out of {}",
                        op.name()
                    );
                    match &mut grads[pid.0] {
                        Some(acc) => *acc += &pg,
                        slot => *slot = Some(pg),
                    }
                }
            } else {
                // leaf: keep the accumulated gradient
                grads[i] = Some(g);
            }
        }
        Gradients {
            grads,
            param_nodes: self.param_nodes.clone(),
        }
    }
}

// ============================================================================
// Finite-difference probing (shared by unit tests and the acceptance suite)
// ============================================================================

/// Worst relative error over random coordinate probes of `eval`'s gradient
/// against the provided analytic gradients. `eval` receives perturbed copies
/// of `inputs`.
pub fn finite_diff_max_rel_err(
    eval: &dyn Fn(&[Arr]) -> f64,
    inputs: &[Arr],
    analytic: &[Arr],
    n_probes: usize,
    step: f64,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> f64 {
    use rand::Rng;
    assert_eq!(inputs.len(), analytic.len());
    let mut worst = 0.0f64;
    for _ in 0..n_probes {
        let which = rng.random_range(0..inputs.len());
        let flat = rng.random_range(0..inputs[which].len());
        let mut plus: Vec<Arr> = inputs.to_vec();
        let mut minus: Vec<Arr> = inputs.to_vec();
        {
            let p = plus[which].as_slice_mut().unwrap();
            p[flat] += step;
            let m = minus[which].as_slice_mut().unwrap();
            m[flat] -= step;
        }
        let fd = (eval(&plus) - eval(&minus)) / (2.0 * step);
        let an = analytic[which].as_slice().unwrap()[flat];
        let denom = an.abs().max(fd.abs());
        let rel = if denom < 1e-8 {
            if (fd - an).abs() < 1e-8 {
                0.0
            } else {
                1.0
            }
        } else {
            (fd - an).abs() / denom
        };
        worst = worst.max(rel);
    }
    worst
}
