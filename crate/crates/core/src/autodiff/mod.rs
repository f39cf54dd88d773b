//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every primitive in creation order, which is also a
//! topological order, so the reverse pass is a single backwards sweep with
//! a fixed accumulation order. A tape is consumed by one backward pass;
//! running a second one without [`Tape::reset`] is an error.

mod backward;
mod ops;

use std::cell::{Cell, RefCell};
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{ConvGeometry, Tensor};

pub use ops::BatchNormOutput;

#[derive(Debug)]
pub(crate) enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    GradScale(usize, f64),
    Offset(usize),
    Exp(usize),
    Sqrt(usize),
    Abs(usize),
    Clip {
        x: usize,
        lo: f64,
        hi: f64,
    },
    RoundSte(usize),
    Relu(usize),
    MatMul(usize, usize),
    Sum(usize),
    Mean(usize),
    Reshape(usize),
    SoftmaxCrossEntropy {
        logits: usize,
        labels: Rc<[usize]>,
        probs: Rc<Tensor>,
    },
    Conv2d {
        x: usize,
        w: usize,
        geom: ConvGeometry,
        cols: Rc<Vec<f64>>,
    },
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Rc<Tensor>,
        inv_std: Rc<Vec<f64>>,
        batch_stats: bool,
    },
    GlobalAvgPool(usize),
}

#[derive(Debug)]
pub(crate) struct Node {
    pub(crate) value: Rc<Tensor>,
    pub(crate) op: Op,
    pub(crate) requires_grad: bool,
    pub(crate) is_param: bool,
}

/// Ordered record of primitive operations for one forward/backward cycle.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    consumed: Cell<bool>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.value().shape())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A leaf that receives a gradient.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push_node(value, Op::Leaf, true, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push_node(value, Op::Leaf, false, false)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Clears all recorded nodes and re-arms the tape.
    pub fn reset(&mut self) {
        self.nodes.get_mut().clear();
        self.consumed.set(false);
    }

    fn push_node(&self, value: Tensor, op: Op, requires_grad: bool, is_param: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
            is_param,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    pub(crate) fn push(&self, value: Tensor, op: Op, inputs: &[usize]) -> Var<'_> {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|&i| nodes[i].requires_grad)
        };
        self.push_node(value, op, requires_grad, false)
    }

    pub(crate) fn value_of(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    /// Runs the reverse pass from a one-element `root`.
    ///
    /// Every parameter leaf gets a fully populated gradient, zero-filled when
    /// it does not influence `root`.
    pub fn backward(&self, root: Var<'_>) -> Result<Gradients> {
        if self.consumed.replace(true) {
            return Err(Error::TapeConsumed);
        }
        let nodes = self.nodes.borrow();
        let root_value = &nodes[root.id].value;
        if root_value.len() != 1 {
            return Err(Error::NonScalarRoot(root_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        if nodes[root.id].requires_grad {
            grads[root.id] = Some(vec![1.0]);
        }
        for id in (0..=root.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            backward::propagate(&nodes, id, &g, &mut grads);
            grads[id] = Some(g);
        }
        let grads = nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| {
                if !node.is_param {
                    return g.map(|g| Tensor::new(node.value.shape().to_vec(), g).expect("grad shape"));
                }
                let shape = node.value.shape().to_vec();
                Some(match g {
                    Some(g) => Tensor::new(shape, g).expect("grad shape"),
                    None => Tensor::zeros(&shape),
                })
            })
            .collect();
        Ok(Gradients { grads })
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }
}

/// Gradients produced by one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    /// Gradient of a parameter leaf; always present after `backward`.
    pub fn wrt(&self, var: Var<'_>) -> &Tensor {
        self.get(var)
            .expect("gradient requested for a value that does not require grad")
    }
}
