use std::cell::RefCell;
use std::fmt;

use super::{Precision, Result, Tensor, TensorError};

/// Inputs handed to a recorded backward rule.
pub(crate) struct BackwardArgs<'a> {
    /// Gradient of the loss with respect to this node's output.
    pub grad: &'a Tensor,
    pub inputs: Vec<&'a Tensor>,
    pub output: &'a Tensor,
    /// Whether each input participates in differentiation.
    pub needs: Vec<bool>,
}

/// Returns one optional gradient per input, in input order.
pub(crate) type BackwardFn = Box<dyn Fn(&BackwardArgs<'_>) -> Vec<Option<Tensor>>>;

struct Node {
    op: &'static str,
    value: Tensor,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

/// Records a single forward pass.
///
/// Node ids are assigned monotonically, so every input of node `k` has an id
/// below `k`. A tape is used for one forward/backward pair and then dropped.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    precision: Precision,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl Tape {
    pub fn new(precision: Precision) -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            precision,
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A differentiable input.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.insert("leaf", value, Vec::new(), None, true)
    }

    /// A non-differentiable input.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.insert("constant", value, Vec::new(), None, false)
    }

    fn insert(
        &self,
        op: &'static str,
        value: Tensor,
        parents: Vec<usize>,
        backward: Option<BackwardFn>,
        requires_grad: bool,
    ) -> Var<'_> {
        let value = match self.precision {
            Precision::Double => value,
            Precision::Single => {
                let shape = value.shape().to_vec();
                let mut data = value.into_vec();
                Precision::Single.round_slice(&mut data);
                Tensor::from_parts(shape, data)
            }
        };
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            op,
            value,
            parents,
            backward,
            requires_grad,
        });
        Var { tape: self, id }
    }

    /// Records the output of an operation over `inputs`.
    pub(crate) fn push(
        &self,
        op: &'static str,
        value: Tensor,
        inputs: &[Var<'_>],
        backward: BackwardFn,
    ) -> Var<'_> {
        let (requires_grad, parents) = {
            let nodes = self.nodes.borrow();
            let parents: Vec<usize> = inputs.iter().map(|v| v.id).collect();
            if cfg!(debug_assertions) && !value.is_finite() {
                let finite_inputs = parents.iter().all(|&p| nodes[p].value.is_finite());
                assert!(
                    !finite_inputs,
                    "{op} produced a non-finite value from finite inputs"
                );
            }
            let rg = parents.iter().any(|&p| nodes[p].requires_grad);
            (rg, parents)
        };
        let backward = requires_grad.then_some(backward);
        self.insert(op, value, parents, backward, requires_grad)
    }

    pub(crate) fn value_of(&self, id: usize) -> Tensor {
        self.nodes.borrow()[id].value.clone()
    }

    fn shape_of(&self, id: usize) -> Vec<usize> {
        self.nodes.borrow()[id].value.shape().to_vec()
    }

    fn requires_grad_of(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Reverse-mode sweep from a scalar `loss`.
    ///
    /// Gradients accumulate additively where a value fans out to several
    /// consumers.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(TensorError::Contract(
                "loss was recorded on a different tape".into(),
            ));
        }
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.id + 1];
        let mut visited = Vec::new();
        grads[loss.id] = Some(Tensor::ones(root.value.shape().to_vec()));

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(grad) = grads[id].take() else {
                continue;
            };
            visited.push(id);
            let args = BackwardArgs {
                grad: &grad,
                inputs: node.parents.iter().map(|&p| &nodes[p].value).collect(),
                output: &node.value,
                needs: node.parents.iter().map(|&p| nodes[p].requires_grad).collect(),
            };
            let parent_grads = backward(&args);
            debug_assert_eq!(parent_grads.len(), node.parents.len(), "{}", node.op);
            for (&p, g) in node.parents.iter().zip(parent_grads) {
                let Some(g) = g else { continue };
                if !nodes[p].requires_grad {
                    continue;
                }
                debug_assert_eq!(g.shape(), nodes[p].value.shape(), "grad of {}", node.op);
                let g = g.rounded(self.precision);
                grads[p] = Some(match grads[p].take() {
                    None => g,
                    Some(acc) => {
                        let mut data = acc.into_vec();
                        for (a, b) in data.iter_mut().zip(g.data()) {
                            *a = self.precision.round(*a + b);
                        }
                        Tensor::from_parts(g.shape().to_vec(), data)
                    }
                });
            }
        }
        Ok(Gradients { grads, visited })
    }
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("nodes", &self.len())
            .field("precision", &self.precision)
            .finish()
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Tensor {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.shape_of(self.id)
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad_of(self.id)
    }
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    visited: Vec<usize>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`.
    ///
    /// A value the loss does not depend on (for example a detached constant)
    /// gets a zero gradient, and a warning is logged.
    pub fn get(&self, var: Var<'_>) -> Tensor {
        match self.try_get(var) {
            Some(g) => g.clone(),
            None => {
                log::warn!(
                    "no gradient reached node {} (detached or unused); returning zeros",
                    var.id()
                );
                Tensor::zeros(var.shape())
            }
        }
    }

    pub fn try_get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id()).and_then(Option::as_ref)
    }

    /// Ids of the nodes whose backward rule ran, in visiting order.
    pub fn visit_order(&self) -> &[usize] {
        &self.visited
    }
}
