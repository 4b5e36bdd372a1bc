//! Tape of recorded operations and the reverse sweep over it.
//!
//! Every op appends one node holding its output value and, when the graph is
//! recording and some input needs a gradient, a closure mapping the output
//! gradient to input gradients. Node ids are assigned in creation order, so
//! the tape is topologically sorted by construction and the reverse sweep is
//! a single descending pass.

use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;

use crate::array::DenseArray;
use crate::error::{invalid, Result, TensorError};
use crate::param::{ParamId, ParamStore};
use crate::scalar::Scalar;

pub type BackwardFn<T> = Box<dyn Fn(&DenseArray<T>) -> Vec<Option<DenseArray<T>>>>;

struct Node<T: Scalar> {
    op: &'static str,
    value: Rc<DenseArray<T>>,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
    param: Option<ParamId>,
}

pub struct Graph<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
    param_nodes: RefCell<HashMap<ParamId, usize>>,
    recording: bool,
    check_finite: Cell<bool>,
    consumed: Cell<bool>,
}

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g, T: Scalar> {
    pub(crate) graph: &'g Graph<T>,
    pub(crate) id: usize,
}

impl<T: Scalar> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    /// A graph that records backward closures.
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            param_nodes: RefCell::new(HashMap::new()),
            recording: true,
            check_finite: Cell::new(cfg!(debug_assertions)),
            consumed: Cell::new(false),
        }
    }

    /// A graph that only evaluates values; nothing can be differentiated.
    pub fn inference() -> Self {
        Self {
            recording: false,
            ..Self::new()
        }
    }

    pub fn with_finite_checks(self, on: bool) -> Self {
        self.check_finite.set(on);
        self
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push_node(&self, node: Node<T>) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    /// A value that never receives a gradient.
    pub fn constant(&self, value: DenseArray<T>) -> Var<'_, T> {
        self.constant_rc(Rc::new(value))
    }

    pub fn constant_rc(&self, value: Rc<DenseArray<T>>) -> Var<'_, T> {
        self.push_node(Node {
            op: "constant",
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad: false,
            param: None,
        })
    }

    /// An input whose gradient is reported by [`Graph::gradients`].
    pub fn leaf(&self, value: DenseArray<T>) -> Var<'_, T> {
        self.push_node(Node {
            op: "leaf",
            value: Rc::new(value),
            parents: Vec::new(),
            backward: None,
            requires_grad: self.recording,
            param: None,
        })
    }

    /// The node for a stored parameter; repeated calls return the same node.
    pub fn param(&self, store: &ParamStore<T>, id: ParamId) -> Var<'_, T> {
        if let Some(&node) = self.param_nodes.borrow().get(&id) {
            return Var {
                graph: self,
                id: node,
            };
        }
        let v = self.push_node(Node {
            op: "param",
            value: Rc::new(store.get(id).value.clone()),
            parents: Vec::new(),
            backward: None,
            requires_grad: self.recording,
            param: Some(id),
        });
        self.param_nodes.borrow_mut().insert(id, v.id);
        v
    }

    pub(crate) fn value_of(&self, id: usize) -> Rc<DenseArray<T>> {
        self.nodes.borrow()[id].value.clone()
    }

    fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Records an op. `backward` maps the output gradient to one optional
    /// gradient per input, in input order.
    pub fn custom<'g>(
        &'g self,
        op: &'static str,
        inputs: &[Var<'g, T>],
        value: DenseArray<T>,
        backward: impl Fn(&DenseArray<T>) -> Vec<Option<DenseArray<T>>> + 'static,
    ) -> Result<Var<'g, T>> {
        if self.check_finite.get() {
            for v in inputs {
                let val = self.value_of(v.id);
                if !val.all_finite() {
                    return Err(TensorError::NonFinite {
                        op,
                        shape: val.shape().to_vec(),
                    });
                }
            }
        }
        let requires_grad = self.recording && inputs.iter().any(|v| self.requires_grad(v.id));
        Ok(self.push_node(Node {
            op,
            value: Rc::new(value),
            parents: inputs.iter().map(|v| v.id).collect(),
            backward: if requires_grad {
                Some(Box::new(backward))
            } else {
                None
            },
            requires_grad,
            param: None,
        }))
    }

    fn sweep(&self, loss: Var<'_, T>) -> Result<Vec<Option<DenseArray<T>>>> {
        let loss_shape = loss.shape();
        if loss_shape.iter().product::<usize>() != 1 {
            return Err(TensorError::NotScalar(loss_shape));
        }
        if self.consumed.replace(true) {
            return Err(TensorError::GraphConsumed);
        }
        if !self.requires_grad(loss.id) {
            return Err(invalid("backward", "loss does not depend on any differentiable input"));
        }
        let mut nodes = self.nodes.borrow_mut();
        let n = loss.id + 1;
        let mut grads: Vec<Option<DenseArray<T>>> = (0..n).map(|_| None).collect();
        grads[loss.id] = Some(DenseArray::ones(&loss_shape));
        for id in (0..n).rev() {
            if !nodes[id].requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            debug_assert_eq!(
                g.shape(),
                nodes[id].value.shape(),
                "gradient shape for {}",
                nodes[id].op
            );
            match nodes[id].backward.take() {
                Some(bw) => {
                    let parent_grads = bw(&g);
                    let parents = std::mem::take(&mut nodes[id].parents);
                    for (&p, pg) in parents.iter().zip(parent_grads) {
                        let Some(pg) = pg else { continue };
                        if !nodes[p].requires_grad {
                            continue;
                        }
                        match &mut grads[p] {
                            Some(acc) => acc.add_assign(&pg),
                            slot => *slot = Some(pg),
                        }
                    }
                }
                None => grads[id] = Some(g),
            }
        }
        Ok(grads)
    }

    /// Reverse sweep from `loss`, accumulating into every reachable
    /// parameter's gradient. Returns gradients of the graph's leaves.
    pub fn backward(&self, loss: Var<'_, T>, store: &mut ParamStore<T>) -> Result<Gradients<T>> {
        let mut grads = self.sweep(loss)?;
        let nodes = self.nodes.borrow();
        let mut leaves = HashMap::new();
        for (id, g) in grads.iter_mut().enumerate() {
            let Some(g) = g.take() else { continue };
            match nodes[id].param {
                Some(pid) => store.get_mut(pid).grad.add_assign(&g),
                None => {
                    leaves.insert(id, g);
                }
            }
        }
        Ok(Gradients { leaves })
    }

    /// Reverse sweep for graphs whose differentiable inputs are leaves only.
    pub fn gradients(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        let grads = self.sweep(loss)?;
        let leaves = grads
            .into_iter()
            .enumerate()
            .filter_map(|(id, g)| g.map(|g| (id, g)))
            .collect();
        Ok(Gradients { leaves })
    }
}

/// Gradients of leaf inputs produced by a reverse sweep.
pub struct Gradients<T: Scalar> {
    leaves: HashMap<usize, DenseArray<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: Var<'_, T>) -> Option<&DenseArray<T>> {
        self.leaves.get(&var.id)
    }
}

impl<'g, T: Scalar> Var<'g, T> {
    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn value(&self) -> Rc<DenseArray<T>> {
        self.graph.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn len(&self) -> usize {
        self.graph.nodes.borrow()[self.id].value.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.requires_grad(self.id)
    }

    /// Same value, cut from the gradient flow.
    pub fn detach(&self) -> Var<'g, T> {
        self.graph.constant_rc(self.value())
    }

    pub fn item(&self) -> T {
        self.value().item()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loss_must_be_scalar() {
        let g = Graph::<f64>::new();
        let x = g.leaf(DenseArray::ones(&[3]));
        let y = x.mul_scalar(2.0).unwrap();
        assert!(matches!(g.gradients(y), Err(TensorError::NotScalar(_))));
    }

    #[test]
    fn graph_is_consumed_once() {
        let g = Graph::<f64>::new();
        let x = g.leaf(DenseArray::ones(&[3]));
        let y = x.sum_all().unwrap();
        assert!(g.gradients(y).is_ok());
        assert!(matches!(g.gradients(y), Err(TensorError::GraphConsumed)));
    }

    #[test]
    fn non_finite_input_rejected_in_debug_mode() {
        let g = Graph::<f64>::new().with_finite_checks(true);
        let x = g.constant(DenseArray::from_f64(&[2], &[1.0, f64::NAN]).unwrap());
        assert!(matches!(x.exp(), Err(TensorError::NonFinite { .. })));
    }

    #[test]
    fn shared_subexpression_accumulates() {
        let g = Graph::<f64>::new();
        let x = g.leaf(DenseArray::from_f64(&[1], &[3.0]).unwrap());
        let y = x.mul(x).unwrap().add(x).unwrap().sum_all().unwrap();
        let gr = g.gradients(y).unwrap();
        assert_eq!(gr.get(x).unwrap().data(), &[7.0]);
    }

    #[test]
    fn parameters_receive_gradients() {
        let mut store = ParamStore::<f64>::new();
        let p = store
            .add("w", DenseArray::from_f64(&[2], &[1.0, -2.0]).unwrap())
            .unwrap();
        let g = Graph::new();
        let w = g.param(&store, p);
        let w2 = g.param(&store, p);
        assert_eq!(w.id, w2.id);
        let loss = w.mul(w).unwrap().sum_all().unwrap();
        g.backward(loss, &mut store).unwrap();
        assert_eq!(store.get(p).grad.data(), &[2.0, -4.0]);
    }
}
