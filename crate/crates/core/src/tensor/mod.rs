// SPDX-License-Identifier: Apache-2.0

//! Reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! Every backward rule is written in terms of other differentiable tensor
//! operations, so gradients computed with `create_graph = true` are
//! themselves part of the graph and can be differentiated again. This is
//! what lets the Grad-CAM channel weights (first derivatives of a logit)
//! appear inside a training loss whose parameter gradient is then taken.
//!
//! Graphs are built eagerly and reference-counted; a `Tensor` is cheap to
//! clone. Tensors are not `Send`: each thread builds its own graph.

mod conv;
mod ops;

use std::cell::Cell;
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;

use ndarray::{ArrayD, IxDyn};

pub use conv::{conv2d_forward, conv2d_input_grad, conv2d_weight_grad};
use ops::Op;

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

pub fn is_grad_enabled() -> bool {
    GRAD_ENABLED.with(|c| c.get())
}

/// Runs `f` with graph recording switched on or off, restoring the previous mode.
pub fn with_grad_mode<R>(enabled: bool, f: impl FnOnce() -> R) -> R {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|c| c.set(self.0));
        }
    }
    let _restore = Restore(GRAD_ENABLED.with(|c| c.replace(enabled)));
    f()
}

pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    with_grad_mode(false, f)
}

#[derive(Clone)]
pub struct Tensor(Rc<Node>);

struct Node {
    id: u64,
    value: ArrayD<f64>,
    op: Option<Op>,
    requires_grad: bool,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape())
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

impl Tensor {
    fn leaf(value: ArrayD<f64>, requires_grad: bool) -> Self {
        Tensor(Rc::new(Node {
            id: next_id(),
            value,
            op: None,
            requires_grad,
        }))
    }

    fn from_op(value: ArrayD<f64>, op: Op) -> Self {
        let track = is_grad_enabled() && op.parents().iter().any(|p| p.requires_grad());
        Tensor(Rc::new(Node {
            id: next_id(),
            value,
            op: if track { Some(op) } else { None },
            requires_grad: track,
        }))
    }

    /// A value that gradients never flow into.
    pub fn constant(value: ArrayD<f64>) -> Self {
        Self::leaf(value, false)
    }

    /// A leaf whose gradient can be requested.
    pub fn variable(value: ArrayD<f64>) -> Self {
        Self::leaf(value, true)
    }

    pub fn scalar(v: f64) -> Self {
        Self::constant(ArrayD::from_elem(IxDyn(&[]), v))
    }

    pub fn value(&self) -> &ArrayD<f64> {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn ndim(&self) -> usize {
        self.0.value.ndim()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// The single element of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.0.value.len(), 1, "item() on tensor of shape {:?}", self.shape());
        *self.0.value.iter().next().unwrap()
    }

    pub fn detach(&self) -> Tensor {
        Tensor::constant(self.0.value.clone())
    }

    fn id(&self) -> u64 {
        self.0.id
    }

    fn op(&self) -> Option<&Op> {
        self.0.op.as_ref()
    }
}

/// Gradients of `output` (any shape; seeded with ones) with respect to `inputs`.
///
/// With `create_graph` the returned tensors are recorded in the graph and may
/// be differentiated again. Inputs that `output` does not depend on yield `None`.
pub fn grad(output: &Tensor, inputs: &[&Tensor], create_graph: bool) -> Vec<Option<Tensor>> {
    let seed = Tensor::constant(ArrayD::ones(IxDyn(output.shape())));
    grad_with(output, seed, inputs, create_graph)
}

pub fn grad_with(
    output: &Tensor,
    seed: Tensor,
    inputs: &[&Tensor],
    create_graph: bool,
) -> Vec<Option<Tensor>> {
    assert_eq!(seed.shape(), output.shape(), "seed shape must match output");
    if !output.requires_grad() {
        return vec![None; inputs.len()];
    }

    // Collect the recorded subgraph reachable from the output.
    let mut nodes: HashMap<u64, Tensor> = HashMap::new();
    let mut stack = vec![output.clone()];
    while let Some(t) = stack.pop() {
        if !t.requires_grad() || nodes.contains_key(&t.id()) {
            continue;
        }
        if let Some(op) = t.op() {
            for p in op.parents() {
                if p.requires_grad() && !nodes.contains_key(&p.id()) {
                    stack.push(p.clone());
                }
            }
        }
        nodes.insert(t.id(), t);
    }
    let mut order: Vec<u64> = nodes.keys().copied().collect();
    order.sort_unstable();

    // Ids grow monotonically, so ascending id order is a topological order.
    let targets: std::collections::HashSet<u64> = inputs.iter().map(|t| t.id()).collect();
    let mut relevant: std::collections::HashSet<u64> = std::collections::HashSet::new();
    for id in &order {
        let t = &nodes[id];
        let hit = targets.contains(id)
            || t.op()
                .map(|op| op.parents().iter().any(|p| relevant.contains(&p.id())))
                .unwrap_or(false);
        if hit {
            relevant.insert(*id);
        }
    }

    let mut grads: HashMap<u64, Tensor> = HashMap::new();
    grads.insert(output.id(), seed);

    with_grad_mode(create_graph, || {
        for id in order.iter().rev() {
            if !relevant.contains(id) {
                continue;
            }
            let node = &nodes[id];
            let Some(op) = node.op() else { continue };
            // Inputs keep their gradient but are not expanded further unless
            // something upstream of them is also requested.
            let Some(g) = grads.get(id).cloned() else { continue };
            let parents = op.parents();
            let needs: Vec<bool> = parents
                .iter()
                .map(|p| p.requires_grad() && relevant.contains(&p.id()))
                .collect();
            if !needs.iter().any(|&n| n) {
                continue;
            }
            let pgrads = op.backward(node, &g, &needs);
            for ((p, pg), need) in parents.iter().zip(pgrads).zip(needs) {
                if !need {
                    continue;
                }
                if let Some(pg) = pg {
                    debug_assert_eq!(pg.shape(), p.shape());
                    let acc = match grads.remove(&p.id()) {
                        Some(prev) => prev.add(&pg),
                        None => pg,
                    };
                    grads.insert(p.id(), acc);
                }
            }
        }
    });

    inputs
        .iter()
        .map(|t| {
            grads.get(&t.id()).map(|g| if create_graph { g.clone() } else { g.detach() })
        })
        .collect()
}

#[cfg(test)]
mod tests;
