//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s. Each node
//! keeps its forward value and a closure that maps the gradient of the node
//! to gradient contributions on its parents. Parents always have smaller
//! node ids than their children, so a single reverse sweep over the node
//! list is a valid topological order.

use std::cell::RefCell;
use std::rc::Rc;

use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;

pub(crate) type BackwardFn = Box<dyn Fn(&Tensor, &mut GradSink)>;

struct Node {
    value: Rc<Tensor>,
    backward: Option<BackwardFn>,
    param: Option<ParamId>,
}

/// Recording tape. Create one per forward pass.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    pub(crate) graph: &'g Graph,
    pub(crate) id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Gradient accumulator handed to backward closures.
pub struct GradSink {
    grads: Vec<Option<Tensor>>,
}

impl GradSink {
    pub(crate) fn add(&mut self, id: usize, grad: Tensor) {
        match &mut self.grads[id] {
            Some(g) => g.add_assign(&grad),
            slot @ None => *slot = Some(grad),
        }
    }
}

/// Result of a backward sweep.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(usize, ParamId)>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub(crate) fn push(&self, value: Tensor, backward: Option<BackwardFn>) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            backward,
            param: None,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    /// A leaf that receives no gradient bookkeeping beyond its own slot.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, None)
    }

    /// A leaf bound to a parameter of `store`; its gradient is reported by
    /// [`Gradients::for_params`].
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var<'_> {
        let var = self.push(store.value(id).clone(), None);
        self.nodes.borrow_mut()[var.id].param = Some(id);
        var
    }

    pub(crate) fn value_of(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, output: Var<'_>) -> Gradients {
        assert!(std::ptr::eq(self, output.graph), "variable from another graph");
        let nodes = self.nodes.borrow();
        assert_eq!(
            nodes[output.id].value.len(),
            1,
            "backward requires a scalar output"
        );
        let mut sink = GradSink {
            grads: (0..nodes.len()).map(|_| None).collect(),
        };
        let seed_shape = nodes[output.id].value.shape().to_vec();
        sink.grads[output.id] = Some(Tensor::full(&seed_shape, 1.0));
        for id in (0..=output.id).rev() {
            let Some(back) = &nodes[id].backward else {
                continue;
            };
            if let Some(g) = sink.grads[id].take() {
                back(&g, &mut sink);
            }
        }
        let params = nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.param.map(|p| (i, p)))
            .collect();
        Gradients {
            grads: sink.grads,
            params,
        }
    }
}

impl Gradients {
    /// Gradient of a leaf variable (zeros are reported as `None`).
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    /// Dense per-parameter gradients, zero-filled for parameters that did
    /// not take part in the graph. Multiple registrations accumulate.
    pub fn for_params(&self, store: &ParamStore) -> Vec<Tensor> {
        let mut out: Vec<Tensor> = store.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        for &(node, pid) in &self.params {
            if let Some(g) = &self.grads[node] {
                out[pid.0].add_assign(g);
            }
        }
        out
    }
}

impl<'g> Var<'g> {
    pub fn value(&self) -> Rc<Tensor> {
        self.graph.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn id(&self) -> usize {
        self.id
    }
}
