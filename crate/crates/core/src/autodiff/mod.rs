//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] owns every tensor produced during a forward pass. Operations
//! return [`Var`] handles into the tape; [`Tape::backward`] replays the
//! recorded operations in reverse and accumulates gradients into every
//! tensor that requires them.
//!
//! ```
//! use spcl::autodiff::Tape;
//!
//! let mut tape = Tape::new();
//! let x = tape.param(&[3], vec![1.0, 2.0, 3.0]).unwrap();
//! let y = tape.mul(x, x).unwrap();
//! let s = tape.sum_all(y);
//! tape.backward(s).unwrap();
//! assert_eq!(tape.grad(x).unwrap(), &[2.0, 4.0, 6.0]);
//! ```
//!
//! Only the operations needed by the segmentation pipeline are provided.
//! Spatial tensors use channels-last layout: `[H, W, C]` or `[B, H, W, C]`.

mod conv;
mod ops;

use crate::error::{Error, Result};

/// Dense row-major tensor with an optional gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: &[usize], values: Vec<f64>) -> Result<Self> {
        let expected = shape.iter().product::<usize>();
        if expected != values.len() {
            return Err(Error::ValueCount {
                shape: shape.to_vec(),
                expected,
                got: values.len(),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            values,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            values: vec![0.0; n],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }
}

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Conv2d {
        input: Var,
        kernel: Var,
        stride: usize,
        padding: usize,
    },
    AddChannelBias(Var, Var),
    Relu(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Log(Var),
    Upsample(Var, usize),
    L2Normalize(Var, f64),
    Sum(Var, Vec<usize>),
    Mean(Var, Vec<usize>),
    Reshape(Var),
    Nll {
        logp: Var,
        targets: Vec<Option<usize>>,
        count: usize,
    },
}

#[derive(Debug)]
struct Node {
    tensor: Tensor,
    op: Op,
}

/// Ordered record of executed operations.
///
/// Node ids increase with execution order, so walking ids downward visits
/// operations in exact reverse order.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an existing tensor as a leaf, keeping its `requires_grad` flag.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        self.nodes.push(Node {
            tensor,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives gradients.
    pub fn param(&mut self, shape: &[usize], values: Vec<f64>) -> Result<Var> {
        Ok(self.leaf(Tensor::new(shape, values)?.with_requires_grad(true)))
    }

    /// Leaf that never receives gradients.
    pub fn constant(&mut self, shape: &[usize], values: Vec<f64>) -> Result<Var> {
        Ok(self.leaf(Tensor::new(shape, values)?))
    }

    pub fn tensor(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].tensor
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].tensor.shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].tensor.values
    }

    /// Value of a single-element tensor.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].tensor.values[0]
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].tensor.grad.as_deref()
    }

    /// Gradient, or zeros when none has been accumulated.
    pub fn grad_or_zeros(&self, v: Var) -> Vec<f64> {
        match self.grad(v) {
            Some(g) => g.to_vec(),
            None => vec![0.0; self.tensor(v).numel()],
        }
    }

    /// Activity (`input > 0`) of every ReLU input on the tape, in execution
    /// order. Two evaluations with equal patterns lie on the same linear piece.
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(x) => Some(x),
                _ => None,
            })
            .flat_map(|x| self.value(x).iter().map(|&v| v > 0.0))
            .collect()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.tensor.grad = None;
        }
    }

    fn push(&mut self, shape: Vec<usize>, values: Vec<f64>, op: Op, inputs: &[Var]) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].tensor.requires_grad);
        self.nodes.push(Node {
            tensor: Tensor {
                shape,
                values,
                grad: None,
                requires_grad,
            },
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Accumulates d(root)/d(t) into `grad` of every tensor `t` that requires
    /// gradients and is reachable from `root`.
    ///
    /// Gradients add to whatever is already stored; call [`Tape::zero_grad`]
    /// to reset.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let root_tensor = self.tensor(root);
        if root_tensor.numel() != 1 {
            return Err(Error::NonScalarRoot(root_tensor.shape.clone()));
        }
        if !root_tensor.requires_grad {
            return Ok(());
        }
        let mut adjoints: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        adjoints[root.0] = Some(vec![1.0]);
        for id in (0..=root.0).rev() {
            let Some(g) = adjoints[id].take() else {
                continue;
            };
            if !self.nodes[id].tensor.requires_grad {
                continue;
            }
            self.backprop(id, &g, &mut adjoints);
            adjoints[id] = Some(g);
        }
        for (id, adj) in adjoints.into_iter().enumerate() {
            let Some(adj) = adj else { continue };
            let tensor = &mut self.nodes[id].tensor;
            if !tensor.requires_grad {
                continue;
            }
            match &mut tensor.grad {
                Some(grad) => grad.iter_mut().zip(&adj).for_each(|(a, b)| *a += b),
                None => tensor.grad = Some(adj),
            }
        }
        Ok(())
    }
}

/// Adds `contribution` into the adjoint slot of `v`, if `v` needs gradients.
fn accumulate(
    nodes: &[Node],
    adjoints: &mut [Option<Vec<f64>>],
    v: Var,
    contribution: impl FnOnce() -> Vec<f64>,
) {
    if !nodes[v.0].tensor.requires_grad {
        return;
    }
    let c = contribution();
    match &mut adjoints[v.0] {
        Some(acc) => acc.iter_mut().zip(&c).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(c),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_rejects_bad_value_count() {
        assert!(Tensor::new(&[2, 3], vec![0.0; 5]).is_err());
        assert_eq!(Tensor::new(&[2, 3], vec![0.0; 6]).unwrap().numel(), 6);
    }

    #[test]
    fn backward_of_sum_is_all_ones() {
        let mut tape = Tape::new();
        let x = tape.param(&[2, 2], vec![1.0, -2.0, 3.5, 0.0]).unwrap();
        let s = tape.sum_all(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0; 4]);
    }

    #[test]
    fn backward_twice_doubles_gradients() {
        let mut tape = Tape::new();
        let x = tape.param(&[3], vec![0.5, -1.0, 2.0]).unwrap();
        let y = tape.mul(x, x).unwrap();
        let y = tape.log_softmax(y);
        let s = tape.sum_all(y);
        tape.backward(s).unwrap();
        let once = tape.grad(x).unwrap().to_vec();
        tape.backward(s).unwrap();
        let twice = tape.grad(x).unwrap();
        for (a, b) in once.iter().zip(twice) {
            assert_eq!(2.0 * a, *b);
        }
        tape.zero_grad();
        assert!(tape.grad(x).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut tape = Tape::new();
        let x = tape.param(&[2], vec![1.0, 2.0]).unwrap();
        assert!(matches!(tape.backward(x), Err(Error::NonScalarRoot(_))));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(&[2], vec![1.0, 2.0]).unwrap();
        let c = tape.constant(&[2], vec![3.0, 4.0]).unwrap();
        let y = tape.mul(x, c).unwrap();
        let s = tape.sum_all(y);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[3.0, 4.0]);
        assert!(tape.grad(c).is_none());
        assert_eq!(tape.grad_or_zeros(c), vec![0.0, 0.0]);
    }
}
