//! Eager reverse-mode differentiation graph.
//!
//! Every differentiable operation computes its forward value immediately and,
//! when the graph is recording and at least one input is tracked, appends a
//! node holding a backward closure. Nodes are appended in execution order, so
//! index order is a topological order and [`Graph::backward`] is a single
//! reverse sweep.
//!
//! A graph is confined to one thread. Batch parallelism uses one graph per
//! sample and merges the resulting [`Gradients`].

use std::cell::{Cell, RefCell};
use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::scalar::Scalar;
use crate::tensor::dense::DenseTensor;
use crate::tensor::params::{BufferId, ParamId, ParamStore};
use crate::tensor::TensorError;

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// Link from a tensor to the node that produced it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeRef {
    graph: u64,
    index: usize,
}

/// Backward closure: receives the output gradient and, per input slot,
/// whether that input needs a gradient. Returns one entry per input slot.
pub type BackwardFn<T> = Box<dyn Fn(&[T], &[bool]) -> Vec<Option<Vec<T>>>>;

enum Origin<T> {
    Leaf,
    Param(ParamId),
    Op {
        /// (input slot, node index) for every tracked input.
        parents: Vec<(usize, usize)>,
        slots: usize,
        backward: BackwardFn<T>,
    },
}

struct Node<T> {
    len: usize,
    origin: Origin<T>,
}

/// Batch statistics observed by a training-mode batch-norm, to be folded into
/// the running buffers after the optimizer step.
#[derive(Clone, Debug)]
pub struct StatUpdate<T> {
    pub running_mean: BufferId,
    pub running_var: BufferId,
    pub batch_mean: Vec<T>,
    /// Unbiased variance estimate.
    pub batch_var: Vec<T>,
}

pub struct Graph<T> {
    id: u64,
    recording: bool,
    nodes: RefCell<Vec<Node<T>>>,
    param_cache: RefCell<BTreeMap<ParamId, DenseTensor<T>>>,
    consumed: Cell<bool>,
    stat_updates: RefCell<Vec<StatUpdate<T>>>,
    pattern: Option<Cell<u64>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    /// Recording graph for training and gradient checks.
    pub fn new() -> Self {
        Self::build(true)
    }

    /// Non-recording graph: operations run forward only and no node is kept.
    pub fn inference() -> Self {
        Self::build(false)
    }

    fn build(recording: bool) -> Self {
        Self {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            recording,
            nodes: RefCell::new(Vec::new()),
            param_cache: RefCell::new(BTreeMap::new()),
            consumed: Cell::new(false),
            stat_updates: RefCell::new(Vec::new()),
            pattern: None,
        }
    }

    /// Enables the activation-pattern fingerprint (ReLU signs, max-pool
    /// winners, sort orders). Two evaluations with equal fingerprints lie on
    /// the same linear piece of every piecewise op.
    pub fn with_pattern_tracking(mut self) -> Self {
        self.pattern = Some(Cell::new(0xcbf2_9ce4_8422_2325));
        self
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn node_count(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn pattern_fingerprint(&self) -> Option<u64> {
        self.pattern.as_ref().map(Cell::get)
    }

    pub fn tracks_pattern(&self) -> bool {
        self.pattern.is_some()
    }

    /// Mixes piecewise-selection data into the fingerprint (FNV-1a).
    pub fn note_pattern(&self, items: impl IntoIterator<Item = u64>) {
        if let Some(cell) = &self.pattern {
            let mut h = cell.get();
            for v in items {
                for byte in v.to_le_bytes() {
                    h ^= u64::from(byte);
                    h = h.wrapping_mul(0x0000_0100_0000_01b3);
                }
            }
            cell.set(h);
        }
    }

    fn push_node(&self, len: usize, origin: Origin<T>) -> NodeRef {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { len, origin });
        NodeRef {
            graph: self.id,
            index: nodes.len() - 1,
        }
    }

    fn check_owner(&self, node: NodeRef) {
        assert_eq!(
            node.graph, self.id,
            "tensor belongs to a different differentiation graph"
        );
    }

    /// Tracks an input tensor so its gradient is reported by
    /// [`Gradients::wrt`]. No-op on a non-recording graph.
    pub fn leaf(&self, tensor: &DenseTensor<T>) -> DenseTensor<T> {
        if !self.recording {
            return tensor.detach();
        }
        let node = self.push_node(tensor.len(), Origin::Leaf);
        DenseTensor::from_parts(tensor.shape().to_vec(), Arc::clone(tensor.shared()), Some(node))
    }

    /// Loads a parameter. Repeated loads within one graph return the same
    /// node, so gradients of shared parameters accumulate in one place.
    pub fn param(&self, store: &ParamStore<T>, id: ParamId) -> DenseTensor<T> {
        if let Some(t) = self.param_cache.borrow().get(&id) {
            return t.clone();
        }
        let entry = store.get(id);
        let node = self
            .recording
            .then(|| self.push_node(entry.len(), Origin::Param(id)));
        let t = DenseTensor::from_parts(entry.shape.clone(), Arc::clone(store.shared(id)), node);
        self.param_cache.borrow_mut().insert(id, t.clone());
        t
    }

    /// Parameters loaded into this graph so far, in registry order.
    pub fn used_params(&self) -> Vec<ParamId> {
        self.param_cache.borrow().keys().copied().collect()
    }

    /// Appends an operation result. `backward` is only kept when the graph
    /// records and some input is tracked; otherwise the result is a constant.
    pub fn record<F>(
        &self,
        shape: Vec<usize>,
        data: Vec<T>,
        inputs: &[&DenseTensor<T>],
        backward: F,
    ) -> DenseTensor<T>
    where
        F: Fn(&[T], &[bool]) -> Vec<Option<Vec<T>>> + 'static,
    {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let mut parents = Vec::new();
        if self.recording {
            for (slot, t) in inputs.iter().enumerate() {
                if let Some(node) = t.node() {
                    self.check_owner(node);
                    parents.push((slot, node.index));
                }
            }
        }
        if parents.is_empty() {
            return DenseTensor::from_parts(shape, Arc::new(data), None);
        }
        let node = self.push_node(
            data.len(),
            Origin::Op {
                parents,
                slots: inputs.len(),
                backward: Box::new(backward),
            },
        );
        DenseTensor::from_parts(shape, Arc::new(data), Some(node))
    }

    pub fn push_stat_update(&self, update: StatUpdate<T>) {
        self.stat_updates.borrow_mut().push(update);
    }

    pub fn take_stat_updates(&self) -> Vec<StatUpdate<T>> {
        std::mem::take(&mut self.stat_updates.borrow_mut())
    }

    /// Reverse sweep from a scalar loss.
    ///
    /// A graph can be differentiated once: a second call returns
    /// [`TensorError::AlreadyBackpropagated`]. Build a fresh graph per step.
    pub fn backward(&self, loss: &DenseTensor<T>) -> Result<Gradients<T>, TensorError> {
        if loss.len() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: loss.shape().to_vec(),
            });
        }
        let root = loss.node().ok_or(TensorError::NotRecorded)?;
        self.check_owner(root);
        if self.consumed.replace(true) {
            return Err(TensorError::AlreadyBackpropagated);
        }

        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(root.index + 1);
        grads.resize_with(root.index + 1, || None);
        grads[root.index] = Some(vec![T::one()]);

        let mut out = Gradients {
            params: BTreeMap::new(),
            leaves: HashMap::new(),
            graph: self.id,
        };

        for index in (0..=root.index).rev() {
            let Some(grad) = grads[index].take() else {
                continue;
            };
            let node = &nodes[index];
            debug_assert_eq!(grad.len(), node.len);
            match &node.origin {
                Origin::Leaf => {
                    out.leaves.insert(index, grad);
                }
                Origin::Param(id) => {
                    out.params.insert(*id, grad);
                }
                Origin::Op {
                    parents,
                    slots,
                    backward,
                } => {
                    let mut needs = vec![false; *slots];
                    for &(slot, _) in parents {
                        needs[slot] = true;
                    }
                    let mut input_grads = backward(&grad, &needs);
                    for &(slot, parent) in parents {
                        let Some(g) = input_grads[slot].take() else {
                            continue;
                        };
                        debug_assert_eq!(g.len(), nodes[parent].len, "gradient length");
                        match &mut grads[parent] {
                            Some(acc) => {
                                for (a, v) in acc.iter_mut().zip(&g) {
                                    *a += *v;
                                }
                            }
                            slot @ None => *slot = Some(g),
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Result of a backward pass: gradients for every reachable parameter and
/// tracked leaf.
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    params: BTreeMap<ParamId, Vec<T>>,
    leaves: HashMap<usize, Vec<T>>,
    graph: u64,
}

impl<T: Scalar> Gradients<T> {
    pub fn param(&self, id: ParamId) -> Option<&[T]> {
        self.params.get(&id).map(Vec::as_slice)
    }

    /// Gradient of a tensor created with [`Graph::leaf`].
    pub fn wrt(&self, tensor: &DenseTensor<T>) -> Option<&[T]> {
        let node = tensor.node()?;
        if node.graph != self.graph {
            return None;
        }
        self.leaves.get(&node.index).map(Vec::as_slice)
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.params.keys().copied()
    }

    pub fn into_params(self) -> BTreeMap<ParamId, Vec<T>> {
        self.params
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square_sum(g: &Graph<f64>, x: &DenseTensor<f64>) -> DenseTensor<f64> {
        let xs = Arc::clone(x.shared());
        let v: f64 = xs.iter().map(|a| a * a).sum();
        g.record(vec![1], vec![v], &[x], move |go, _| {
            vec![Some(xs.iter().map(|a| 2.0 * a * go[0]).collect())]
        })
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let g = Graph::<f64>::new();
        let x = g.leaf(&DenseTensor::from_values(&[2], vec![1.0, 2.0]).unwrap());
        assert!(matches!(
            g.backward(&x),
            Err(TensorError::NonScalarLoss { .. })
        ));
    }

    #[test]
    fn second_backward_rejected() {
        let g = Graph::<f64>::new();
        let x = g.leaf(&DenseTensor::from_values(&[2], vec![1.0, 2.0]).unwrap());
        let l = square_sum(&g, &x);
        let grads = g.backward(&l).unwrap();
        assert_eq!(grads.wrt(&x).unwrap(), &[2.0, 4.0]);
        assert_eq!(g.backward(&l).unwrap_err(), TensorError::AlreadyBackpropagated);
    }

    #[test]
    fn constant_loss_not_recorded() {
        let g = Graph::<f64>::new();
        let c = DenseTensor::scalar(3.0);
        assert_eq!(g.backward(&c).unwrap_err(), TensorError::NotRecorded);
    }

    #[test]
    fn inference_graph_keeps_no_nodes() {
        let g = Graph::<f64>::inference();
        let x = g.leaf(&DenseTensor::from_values(&[2], vec![1.0, 2.0]).unwrap());
        let l = square_sum(&g, &x);
        assert_eq!(l.values(), &[5.0]);
        assert_eq!(g.node_count(), 0);
    }

    #[test]
    fn shared_param_loads_one_node() {
        let mut store = ParamStore::<f64>::new(0);
        let p = store.constant("p", &[2], 1.5);
        let g = Graph::new();
        let a = g.param(&store, p);
        let b = g.param(&store, p);
        assert_eq!(a.node(), b.node());
        assert_eq!(g.used_params(), vec![p]);
    }
}
