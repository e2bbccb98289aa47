//! Reverse-mode automatic differentiation on dynamic-rank `f64` arrays.
//!
//! A [`Tensor`] is a node in a dynamically built computation graph. Operations
//! record their inputs and enough saved state to run the chain rule backwards;
//! [`Tensor::backward`] walks the graph in reverse creation order and accumulates
//! gradients into every node that requires them.
//!
//! Graphs are cheap, thread-local, and dropped after each use. Trainable
//! parameters live outside the graph in [`Param`] cells; a [`Tape`] maps each
//! parameter to the leaf tensor it contributed to the current pass, which is how
//! the trainer collects gradients in a deterministic order.

mod ops;
pub mod fd;

pub use ops::Op;

use ndarray::{ArrayD, IxDyn};
use std::cell::{Cell, RefCell};
use std::rc::Rc;
use std::sync::{Arc, RwLock};

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
}

fn fresh_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

pub(crate) struct Node {
    id: u64,
    data: Arc<ArrayD<f64>>,
    grad: RefCell<Option<ArrayD<f64>>>,
    parents: Vec<Tensor>,
    op: Op,
    needs_grad: bool,
}

/// A value in the computation graph. Cloning is cheap (reference counted).
#[derive(Clone)]
pub struct Tensor(pub(crate) Rc<Node>);

impl Tensor {
    fn from_node(node: Node) -> Self {
        Tensor(Rc::new(node))
    }

    /// A constant: participates in forward computation, receives no gradient.
    pub fn constant(data: impl Into<ArrayD<f64>>) -> Self {
        Tensor::from_node(Node {
            id: fresh_id(),
            data: Arc::new(data.into()),
            grad: RefCell::new(None),
            parents: Vec::new(),
            op: Op::Leaf,
            needs_grad: false,
        })
    }

    /// A differentiable leaf (free variable). Gradients accumulate on it.
    pub fn variable(data: impl Into<ArrayD<f64>>) -> Self {
        Tensor::from_node(Node {
            id: fresh_id(),
            data: Arc::new(data.into()),
            grad: RefCell::new(None),
            parents: Vec::new(),
            op: Op::Leaf,
            needs_grad: true,
        })
    }

    /// Leaf sharing a parameter's storage without copying.
    fn leaf_shared(data: Arc<ArrayD<f64>>) -> Self {
        Tensor::from_node(Node {
            id: fresh_id(),
            data,
            grad: RefCell::new(None),
            parents: Vec::new(),
            op: Op::Leaf,
            needs_grad: true,
        })
    }

    pub fn scalar_value(v: f64) -> Self {
        Tensor::constant(ndarray::arr0(v).into_dyn())
    }

    pub(crate) fn new_op(data: ArrayD<f64>, parents: Vec<Tensor>, op: Op) -> Self {
        let needs_grad = parents.iter().any(|p| p.0.needs_grad);
        Tensor::from_node(Node {
            id: fresh_id(),
            data: Arc::new(data),
            grad: RefCell::new(None),
            parents,
            op,
            needs_grad,
        })
    }

    pub fn value(&self) -> &ArrayD<f64> {
        &self.0.data
    }

    pub fn shape(&self) -> &[usize] {
        self.0.data.shape()
    }

    /// The contained value of a 0-d tensor.
    pub fn scalar(&self) -> f64 {
        debug_assert_eq!(self.0.data.ndim(), 0, "scalar() on non-0d tensor");
        *self.0.data.first().expect("empty tensor")
    }

    pub fn needs_grad(&self) -> bool {
        self.0.needs_grad
    }

    /// Gradient accumulated on this node by the latest `backward` call.
    pub fn grad(&self) -> Option<ArrayD<f64>> {
        self.0.grad.borrow().clone()
    }

    /// Accumulate `g` into this node's gradient buffer.
    pub(crate) fn acc_grad(&self, g: &ArrayD<f64>) {
        let mut slot = self.0.grad.borrow_mut();
        match slot.as_mut() {
            Some(buf) => *buf += g,
            None => *slot = Some(g.clone()),
        }
    }

    /// Accumulate an owned contribution, avoiding a copy on first touch.
    pub(crate) fn acc_grad_owned(&self, g: ArrayD<f64>) {
        let mut slot = self.0.grad.borrow_mut();
        match slot.as_mut() {
            Some(buf) => *buf += &g,
            None => *slot = Some(g),
        }
    }

    /// Accumulate into a region of the gradient buffer via `write`, creating a
    /// zero buffer on first touch. Used by slicing ops to avoid temporaries.
    pub(crate) fn acc_grad_with(&self, write: impl FnOnce(&mut ArrayD<f64>)) {
        let mut slot = self.0.grad.borrow_mut();
        let buf = slot.get_or_insert_with(|| ArrayD::zeros(IxDyn(self.0.data.shape())));
        write(buf);
    }

    /// Reverse-mode sweep from this 0-d tensor. Gradients of all reachable
    /// nodes with `needs_grad` are (re)accumulated; call once per graph.
    pub fn backward(&self) {
        assert_eq!(self.0.data.ndim(), 0, "backward() requires a scalar output");
        self.backward_seeded(1.0);
    }

    /// Backward with a custom seed gradient; `seed` scales the whole sweep.
    pub fn backward_seeded(&self, seed: f64) {
        if !self.0.needs_grad {
            return;
        }
        // Node ids increase with creation order, so descending id is a valid
        // reverse topological order.
        let mut nodes: Vec<Rc<Node>> = Vec::new();
        let mut stack: Vec<Rc<Node>> = vec![self.0.clone()];
        let mut seen = std::collections::HashSet::new();
        while let Some(n) = stack.pop() {
            if !n.needs_grad || !seen.insert(n.id) {
                continue;
            }
            for p in &n.parents {
                stack.push(p.0.clone());
            }
            nodes.push(n);
        }
        nodes.sort_unstable_by(|a, b| b.id.cmp(&a.id));

        self.acc_grad(&ndarray::arr0(seed).into_dyn());
        for node in &nodes {
            // Holding the borrow during the op's backward is fine: gradients
            // are only ever written into strictly earlier (parent) nodes.
            let grad = node.grad.borrow();
            if let Some(g) = grad.as_ref() {
                node.op.backward(node, g);
            }
        }
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.0.id)
            .field("shape", &self.shape())
            .field("needs_grad", &self.0.needs_grad)
            .finish()
    }
}

/// A named trainable parameter. The value is shared into graphs without
/// copying; the optimizer swaps in a new array on update.
pub struct Param {
    name: String,
    index: usize,
    value: RwLock<Arc<ArrayD<f64>>>,
}

pub type ParamRef = Arc<Param>;

impl Param {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn index(&self) -> usize {
        self.index
    }

    pub fn value(&self) -> Arc<ArrayD<f64>> {
        self.value.read().expect("param lock").clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn len(&self) -> usize {
        self.value().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn set_value(&self, v: ArrayD<f64>) {
        *self.value.write().expect("param lock") = Arc::new(v);
    }
}

/// Ordered registry of a model's parameters. Construction order is the
/// canonical order for gradient buffers, optimizer state, and checkpoints.
#[derive(Default)]
pub struct ParamSet {
    params: Vec<ParamRef>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, value: ArrayD<f64>) -> ParamRef {
        let p = Arc::new(Param {
            name: name.into(),
            index: self.params.len(),
            value: RwLock::new(Arc::new(value)),
        });
        self.params.push(p.clone());
        p
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamRef> {
        self.params.iter()
    }

    pub fn get(&self, i: usize) -> &ParamRef {
        &self.params[i]
    }

    pub fn total_elements(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }
}

/// Per-pass map from parameters to their graph leaves.
pub struct Tape {
    entries: Vec<Option<(ParamRef, Tensor)>>,
}

impl Tape {
    pub fn new(param_count: usize) -> Self {
        Self {
            entries: (0..param_count).map(|_| None).collect(),
        }
    }

    /// The leaf tensor for `p` in this pass (created on first use, then shared,
    /// so multiple uses of one parameter accumulate into a single gradient).
    pub fn leaf(&mut self, p: &ParamRef) -> Tensor {
        if let Some((_, t)) = &self.entries[p.index()] {
            return t.clone();
        }
        let t = Tensor::leaf_shared(p.value());
        self.entries[p.index()] = Some((p.clone(), t.clone()));
        t
    }

    /// Add `scale * grad(param)` into `buf` (indexed like the ParamSet) for
    /// every parameter touched by this pass. Iteration order is fixed.
    pub fn scaled_grads_into(&self, scale: f64, buf: &mut [ArrayD<f64>]) {
        for entry in self.entries.iter().flatten() {
            let (p, t) = entry;
            if let Some(g) = t.0.grad.borrow().as_ref() {
                buf[p.index()].scaled_add(scale, g);
            }
        }
    }
}
