//! Dynamic tape for reverse-mode differentiation.
//!
//! Every differentiable operation appends one node holding its output value
//! and a closure that maps the output gradient to gradients of its parents.
//! [`Tape::backward`] walks the nodes in exact reverse execution order, so
//! gradient accumulation happens in a fixed order and repeated runs are
//! bit-identical.

mod ops;

use std::cell::RefCell;
use std::collections::HashMap;

use crate::error::{KinoError, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

pub use ops::{gelu_scalar, sigmoid_scalar, silu_scalar, softplus_scalar, PadMode};

/// Maps the gradient of a node's output to gradients of its parents.
/// The mask tells which parents need a gradient at all.
pub type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &[bool]) -> Result<Vec<Option<Tensor<T>>>>>;

struct Node<T: Scalar> {
    op: &'static str,
    value: Tensor<T>,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
    param: Option<ParamId>,
    requires_grad: bool,
}

pub struct Tape<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
    leaves: RefCell<HashMap<ParamId, usize>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Scalar> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Scalar> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            leaves: RefCell::new(HashMap::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Names of recorded operations in execution order.
    pub fn op_names(&self) -> Vec<&'static str> {
        self.nodes.borrow().iter().map(|n| n.op).collect()
    }

    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push_node(Node {
            op: "constant",
            value,
            parents: Vec::new(),
            backward: None,
            param: None,
            requires_grad: false,
        })
    }

    /// Leaf for a stored parameter. Repeated calls with the same id return the
    /// same leaf so its gradient is collected once.
    pub fn param<'t>(&'t self, store: &ParamStore<T>, id: ParamId) -> Var<'t, T> {
        if let Some(&node) = self.leaves.borrow().get(&id) {
            return Var { tape: self, id: node };
        }
        let v = self.push_node(Node {
            op: "param",
            value: store.value(id).clone(),
            parents: Vec::new(),
            backward: None,
            param: Some(id),
            requires_grad: true,
        });
        self.leaves.borrow_mut().insert(id, v.id);
        v
    }

    fn push_node(&self, node: Node<T>) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Records a custom differentiable operation. The output is rejected if it
    /// holds non-finite values.
    pub fn push_op<'t>(
        &'t self,
        op: &'static str,
        value: Tensor<T>,
        parents: &[Var<'t, T>],
        backward: BackwardFn<T>,
    ) -> Result<Var<'t, T>> {
        value.check_finite(op)?;
        let parent_ids: Vec<usize> = parents.iter().map(|p| p.id).collect();
        let requires_grad = {
            let nodes = self.nodes.borrow();
            parent_ids.iter().any(|&p| nodes[p].requires_grad)
        };
        Ok(self.push_node(Node {
            op,
            value,
            parents: parent_ids,
            backward: requires_grad.then_some(backward),
            param: None,
            requires_grad,
        }))
    }

    fn value_of(&self, id: usize) -> Tensor<T> {
        self.nodes.borrow()[id].value.clone()
    }

    /// Reverse sweep from a scalar `loss`. Returns per-parameter gradients and
    /// the order in which op nodes were visited.
    fn sweep(&self, loss: Var<'_, T>) -> Result<(Vec<(ParamId, Tensor<T>)>, Vec<usize>)> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(KinoError::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(Tensor::from_raw(root.value.shape().to_vec(), vec![T::one()]));
        let mut visited = Vec::new();
        let mut out = Vec::new();
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if let Some(pid) = node.param {
                out.push((pid, g));
                continue;
            }
            let Some(backward) = &node.backward else { continue };
            visited.push(id);
            let mask: Vec<bool> = node
                .parents
                .iter()
                .map(|&p| nodes[p].requires_grad)
                .collect();
            let parent_grads = backward(&g, &mask)?;
            debug_assert_eq!(parent_grads.len(), node.parents.len(), "op {}", node.op);
            for ((&p, pg), &needed) in node.parents.iter().zip(parent_grads).zip(&mask) {
                let Some(pg) = pg else { continue };
                if !needed {
                    continue;
                }
                if pg.shape() != nodes[p].value.shape() {
                    return Err(KinoError::shape(node.op, nodes[p].value.shape(), pg.shape()));
                }
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&pg),
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        out.sort_by_key(|(pid, _)| *pid);
        Ok((out, visited))
    }

    /// Gradients of `loss` with respect to every reachable parameter.
    pub fn gradients(&self, loss: Var<'_, T>) -> Result<Vec<(ParamId, Tensor<T>)>> {
        Ok(self.sweep(loss)?.0)
    }

    /// Adds gradients of `loss` into `Parameter::grad` for every reachable
    /// parameter.
    pub fn backward(&self, loss: Var<'_, T>, store: &mut ParamStore<T>) -> Result<()> {
        for (pid, g) in self.gradients(loss)? {
            store.accumulate_grad(pid, &g);
        }
        Ok(())
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Tensor<T> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn item(&self) -> Result<T> {
        self.value().item()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_on_non_scalar_is_contract_error() {
        let mut store = ParamStore::<f64>::new();
        let p = store.register("p", Tensor::ones([3]).unwrap()).unwrap();
        let tape = Tape::new();
        let v = tape.param(&store, p).exp().unwrap();
        assert!(matches!(tape.backward(v, &mut store), Err(KinoError::Contract(_))));
    }

    #[test]
    fn sum_and_square_gradients() {
        let mut store = ParamStore::<f64>::new();
        let p = store
            .register("p", Tensor::new([3], vec![1.0, -2.0, 0.5]).unwrap())
            .unwrap();
        let tape = Tape::new();
        let v = tape.param(&store, p);
        let loss = v.sum().unwrap();
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(store.grad(p).data(), &[1.0, 1.0, 1.0]);

        store.zero_grad();
        let tape = Tape::new();
        let v = tape.param(&store, p);
        let loss = v.mul(v).unwrap().sum().unwrap();
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(store.grad(p).data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn sweep_visits_ops_in_reverse_order() {
        let mut store = ParamStore::<f64>::new();
        let p = store.register("p", Tensor::ones([2]).unwrap()).unwrap();
        let tape = Tape::new();
        let a = tape.param(&store, p);
        let b = a.exp().unwrap();
        let c = b.mul(a).unwrap();
        let d = c.add(b).unwrap();
        let loss = d.sum().unwrap();
        let (_, visited) = tape.sweep(loss).unwrap();
        assert!(visited.windows(2).all(|w| w[0] > w[1]));
        assert_eq!(visited.len(), 4);
    }

    #[test]
    fn shared_param_leaf_collects_once() {
        let mut store = ParamStore::<f64>::new();
        let p = store.register("p", Tensor::full([1], 3.0).unwrap()).unwrap();
        let tape = Tape::new();
        let a = tape.param(&store, p);
        let b = tape.param(&store, p);
        let loss = a.mul(b).unwrap().sum().unwrap();
        let grads = tape.gradients(loss).unwrap();
        assert_eq!(grads.len(), 1);
        assert_eq!(grads[0].1.data(), &[6.0]);
    }

    #[test]
    fn non_finite_output_surfaces_as_error() {
        let tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::full([2], 100.0).unwrap());
        assert!(matches!(x.exp(), Err(KinoError::NonFinite { .. })));
    }
}
