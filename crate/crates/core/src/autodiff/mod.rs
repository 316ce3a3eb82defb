//! Reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every operation applied to values that require a gradient, in
//! application order. [`Tape::backward`] walks that record once, newest entry first,
//! and leaves an accumulated gradient on every leaf created with `requires_grad`.

mod gemm;
mod ops;

pub use ops::{Attrs, Function, Op};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Norm floor of [`Op::L2Normalize`].
pub const L2_EPS: f64 = 1e-12;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

struct Node {
    value: Tensor,
    op: Op,
    inputs: Vec<Var>,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Record an input value. Its `requires_grad` flag decides whether it receives a gradient.
    pub fn leaf(&mut self, mut value: Tensor) -> Var {
        value.zero_grad();
        let requires_grad = value.requires_grad();
        self.push(value, Op::Leaf, Vec::new(), requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated on `v` by the last backward pass.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    /// Name of the operation that produced `v` (`"leaf"` for inputs and constants).
    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: Vec<Var>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            inputs,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Evaluate `op` on `inputs`. The entry is kept for the reverse pass only when some
    /// input requires a gradient; otherwise the result is stored as a constant.
    pub fn apply(&mut self, op: Op, inputs: &[Var]) -> Result<Var> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        if let Some(bad) = inputs.iter().find(|v| v.0 >= self.nodes.len()) {
            return Err(Error::invalid(format!("variable {} is not on this tape", bad.0)));
        }
        let values: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
        let out = op.forward(&values)?;
        if !out.all_finite() {
            return Err(Error::NonFinite(format!("{op:?}")));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        if requires_grad {
            Ok(self.push(out, op, inputs.to_vec(), true))
        } else {
            Ok(self.push(out, Op::Leaf, Vec::new(), false))
        }
    }

    /// String-addressed form of [`Tape::apply`].
    pub fn op_forward(&mut self, kind: &str, inputs: &[Var], attrs: &Attrs) -> Result<Var> {
        let op = Op::parse(kind, attrs)?;
        self.apply(op, inputs)
    }

    pub fn apply_custom(&mut self, f: Box<dyn Function>, inputs: &[Var]) -> Result<Var> {
        self.apply(Op::Custom(f), inputs)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::MatMul, &[a, b])
    }

    pub fn bias_add(&mut self, x: Var, bias: Var) -> Result<Var> {
        self.apply(Op::BiasAdd, &[x, bias])
    }

    /// `x · weight + bias` for `x: [n, in]`, `weight: [in, out]`, `bias: [out]`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let y = self.matmul(x, weight)?;
        self.bias_add(y, bias)
    }

    pub fn conv2d(&mut self, x: Var, kernel: Var, stride: usize, pad: usize) -> Result<Var> {
        self.apply(Op::Conv2d { stride, pad }, &[x, kernel])
    }

    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        self.apply(Op::UpsampleNearest { factor }, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Relu, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Sigmoid, &[x])
    }

    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        self.apply(Op::Concat, xs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Add, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Mul, &[a, b])
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        self.apply(Op::Scale { factor }, &[x])
    }

    pub fn pow(&mut self, x: Var, exponent: f64) -> Result<Var> {
        self.apply(Op::Pow { exponent }, &[x])
    }

    pub fn clamp_zero(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::ClampZero, &[x])
    }

    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::L2Normalize { eps: L2_EPS }, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Mean, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Sum, &[x])
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::GlobalAvgPool, &[x])
    }

    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Flatten, &[x])
    }

    pub fn binary_cross_entropy(&mut self, prediction: Var, target: Var) -> Result<Var> {
        self.apply(Op::BinaryCrossEntropy, &[prediction, target])
    }

    pub fn cosine_loss(&mut self, prediction: Var, target: Var) -> Result<Var> {
        self.apply(Op::CosineLoss, &[prediction, target])
    }

    /// Propagate gradients from the scalar `loss` back to every leaf.
    ///
    /// Leaves that require a gradient but do not contribute to `loss` receive zeros.
    /// A tape supports a single backward pass.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let loss_node = self
            .nodes
            .get(loss.0)
            .ok_or_else(|| Error::invalid("loss is not on this tape"))?;
        if !loss_node.value.is_scalar() {
            return Err(Error::NotScalar(loss_node.value.shape().to_vec()));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let inputs: Vec<&Tensor> = node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            let needs: Vec<bool> = node.inputs.iter().map(|v| self.nodes[v.0].requires_grad).collect();
            let input_grads = node.op.backward(&inputs, &node.value, &g, &needs)?;
            for ((var, need), ig) in node.inputs.iter().zip(&needs).zip(input_grads) {
                let (true, Some(ig)) = (*need, ig) else { continue };
                if ig.len() != self.nodes[var.0].value.len() {
                    return Err(Error::shape(
                        "backward",
                        format!("{} produced a gradient of the wrong length", node.op.name()),
                    ));
                }
                match &mut grads[var.0] {
                    Some(acc) => acc.iter_mut().zip(&ig).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(ig),
                }
            }
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if matches!(node.op, Op::Leaf) && node.requires_grad {
                let n = node.value.len();
                node.value.set_grad(g.unwrap_or_else(|| vec![0.0; n]))?;
            }
        }
        Ok(())
    }
}
