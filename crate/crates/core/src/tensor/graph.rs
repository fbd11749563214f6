//! Reverse-mode tape.
//!
//! A [`Graph`] records one node per differentiable operation, in execution
//! order, whenever at least one input is connected to a `requires_grad` leaf.
//! [`Graph::backward`] drains the tape once, in reverse topological order, and
//! deposits gradients into the leaves' gradient slots. A second call on the
//! same recording fails with [`TensorError::GraphConsumed`].

use super::{Tensor, TensorError};
use std::cell::RefCell;
use std::collections::{HashMap, HashSet};

/// Arithmetic dtype used for matrix-product inner loops: f32 products, or
/// f16-converted operands with exact-in-f32 products. Accumulation is always
/// f32.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Compute {
    F32,
    F16,
}

/// Gradient accumulator keyed by tensor id, live only during one backward.
#[derive(Default)]
pub struct GradStore {
    grads: HashMap<usize, Vec<f32>>,
}

impl GradStore {
    pub fn get(&self, id: usize) -> Option<&[f32]> {
        self.grads.get(&id).map(Vec::as_slice)
    }

    /// Adds `contribution` into the gradient buffer for tensor `id`,
    /// creating a zero buffer of `len` elements on first touch.
    pub fn accumulate_with(&mut self, id: usize, len: usize, contribution: impl FnOnce(&mut [f32])) {
        let buf = self.grads.entry(id).or_insert_with(|| vec![0.0; len]);
        contribution(buf);
    }

    fn remove(&mut self, id: usize) -> Option<Vec<f32>> {
        self.grads.remove(&id)
    }

    fn insert(&mut self, id: usize, g: Vec<f32>) {
        self.grads.insert(id, g);
    }
}

type BackwardFn = Box<dyn FnOnce(&[f32], &mut GradStore)>;

struct Node {
    out_id: usize,
    backward: BackwardFn,
}

struct GraphInner {
    recording: bool,
    consumed: bool,
    nodes: Vec<Node>,
    traced: HashSet<usize>,
    leaves: Vec<Tensor>,
    leaf_ids: HashSet<usize>,
}

/// Recording tape for one forward/backward pair. Confined to one thread.
pub struct Graph {
    inner: RefCell<GraphInner>,
}

impl Graph {
    /// A recording graph: operations with traced inputs append tape nodes.
    pub fn new() -> Self {
        Self::with_recording(true)
    }

    /// A non-recording graph for inference; `backward` is a no-op on it.
    pub fn inference() -> Self {
        Self::with_recording(false)
    }

    fn with_recording(recording: bool) -> Self {
        Graph {
            inner: RefCell::new(GraphInner {
                recording,
                consumed: false,
                nodes: Vec::new(),
                traced: HashSet::new(),
                leaves: Vec::new(),
                leaf_ids: HashSet::new(),
            }),
        }
    }

    pub fn is_recording(&self) -> bool {
        self.inner.borrow().recording
    }

    /// True when `t` is a `requires_grad` leaf or was produced from one on
    /// this tape — i.e. gradients must flow through it.
    pub fn is_traced(&self, t: &Tensor) -> bool {
        t.requires_grad() || self.inner.borrow().traced.contains(&t.id())
    }

    /// Appends a tape node for an operation that produced `output` from
    /// `inputs`. No-op when not recording or when no input is traced.
    pub fn record(&self, inputs: &[&Tensor], output: &Tensor, backward: BackwardFn) {
        if !self.is_recording() || !inputs.iter().any(|t| self.is_traced(t)) {
            return;
        }
        let mut inner = self.inner.borrow_mut();
        for &input in inputs {
            if input.requires_grad() && inner.leaf_ids.insert(input.id()) {
                inner.leaves.push(input.clone());
            }
        }
        let out_id = output.id();
        inner.traced.insert(out_id);
        inner.nodes.push(Node { out_id, backward });
    }

    /// Number of recorded tape nodes (diagnostic).
    pub fn node_count(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    /// Replays the tape in reverse, filling gradient slots of every
    /// `requires_grad` leaf that `loss` depends on. Consumes the recording.
    pub fn backward(&self, loss: &Tensor) -> Result<(), TensorError> {
        assert_eq!(loss.element_count(), 1, "backward requires a scalar loss");
        let (nodes, leaves) = {
            let mut inner = self.inner.borrow_mut();
            if inner.consumed {
                return Err(TensorError::GraphConsumed);
            }
            inner.consumed = true;
            (
                std::mem::take(&mut inner.nodes),
                std::mem::take(&mut inner.leaves),
            )
        };
        let mut store = GradStore::default();
        store.insert(loss.id(), vec![1.0]);
        for node in nodes.into_iter().rev() {
            if let Some(dy) = store.remove(node.out_id) {
                (node.backward)(&dy, &mut store);
            }
        }
        for leaf in leaves {
            if let Some(g) = store.remove(leaf.id()) {
                leaf.accumulate_grad(&g);
            }
        }
        Ok(())
    }
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}
