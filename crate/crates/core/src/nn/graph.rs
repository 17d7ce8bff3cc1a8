//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends a node holding its forward value. Nodes are only
//! ever appended, so the tape is topologically ordered and
//! [`Graph::backward`] walks it once from the root towards the leaves,
//! accumulating gradients in a fixed order. Nodes that cannot reach a
//! trainable leaf are skipped entirely.

use super::conv::{self, ConvShape};
use super::Tensor4;
use crate::error::{invalid_arg, Result};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Var,
        shape: ConvShape,
    },
    Relu(Var),
    Add(Var, Var),
    Sub(Var, Var),
    /// `scale · Σ (a − b)²`
    SqDiff {
        a: Var,
        b: Var,
        scale: f64,
    },
    Scale(Var, f64),
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor4,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor4, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A trainable leaf; receives a gradient on [`backward`](Self::backward).
    pub fn leaf(&mut self, value: Tensor4) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor4) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor4 {
        &self.nodes[v.0].value
    }

    /// Gradient of the last [`backward`](Self::backward) root with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad.as_deref()
    }

    pub fn take_value(&mut self, v: Var) -> Tensor4 {
        std::mem::replace(&mut self.nodes[v.0].value, Tensor4::scalar(0.0))
    }

    /// Convolution (or transposed convolution, per `shape.transposed`) with
    /// weights `w` and bias `b`; see [`conv`](super::conv) for layouts.
    pub fn conv(&mut self, x: Var, w: Var, b: Var, shape: ConvShape) -> Result<Var> {
        let y = conv::forward(&shape, self.value(x), self.value(w), self.value(b))?;
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(y, Op::Conv { x, w, b, shape }, needs))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let data = src.data().iter().map(|&v| v.max(0.0)).collect();
        let y = Tensor4::from_parts(src.dims(), data);
        let needs = self.needs(x);
        self.push(y, Op::Relu(x), needs)
    }

    fn zip_with(&self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor4> {
        let (ta, tb) = (self.value(a), self.value(b));
        ta.expect_same_dims(tb, what)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&p, &q)| f(p, q)).collect();
        Ok(Tensor4::from_parts(ta.dims(), data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.zip_with(a, b, "add", |p, q| p + q)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(y, Op::Add(a, b), needs))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.zip_with(a, b, "subtract", |p, q| p - q)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(y, Op::Sub(a, b), needs))
    }

    /// Scalar `scale · Σ (a − b)²`.
    pub fn sq_diff(&mut self, a: Var, b: Var, scale: f64) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        ta.expect_same_dims(tb, "squared difference")?;
        let sse: f64 = ta.data().iter().zip(tb.data()).map(|(p, q)| (p - q) * (p - q)).sum();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor4::scalar(scale * sse), Op::SqDiff { a, b, scale }, needs))
    }

    /// Scalar mean of squared differences.
    pub fn mean_sq_diff(&mut self, a: Var, b: Var) -> Result<Var> {
        let n = self.value(a).len() as f64;
        self.sq_diff(a, b, 1.0 / n)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let src = self.value(x);
        let y = Tensor4::from_parts(src.dims(), src.data().iter().map(|v| c * v).collect());
        let needs = self.needs(x);
        self.push(y, Op::Scale(x, c), needs)
    }

    /// Scalar sum of all elements.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let needs = self.needs(x);
        self.push(Tensor4::scalar(s), Op::Sum(x), needs)
    }

    /// Fills the gradient slot of every node that can reach a trainable leaf
    /// with `∂root/∂node`. Previous gradients are discarded.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if !self.value(root).is_scalar() {
            return Err(invalid_arg!(
                "backward needs a scalar root, got dims {:?}",
                self.value(root).dims()
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {}
                &Op::Conv { x, w, b, shape } => {
                    let g_out = Tensor4::from_parts(node.value.dims(), g.clone());
                    if self.needs(x) {
                        let gx = conv::backward_input(&shape, &g_out, self.value(w), self.value(x).dims());
                        accumulate(&mut grads, x, gx);
                    }
                    if self.needs(w) || self.needs(b) {
                        let (gw, gb) = conv::backward_params(&shape, &g_out, self.value(x));
                        accumulate(&mut grads, w, gw);
                        accumulate(&mut grads, b, gb);
                    }
                }
                &Op::Relu(x) => {
                    let gx = g
                        .iter()
                        .zip(node.value.data())
                        .map(|(&gv, &y)| if y > 0.0 { gv } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, x, gx);
                }
                &Op::Add(a, b) => {
                    accumulate(&mut grads, a, g.clone());
                    accumulate(&mut grads, b, g.clone());
                }
                &Op::Sub(a, b) => {
                    accumulate(&mut grads, a, g.clone());
                    accumulate(&mut grads, b, g.iter().map(|v| -v).collect());
                }
                &Op::SqDiff { a, b, scale } => {
                    let k = 2.0 * scale * g[0];
                    let diff: Vec<f64> = self
                        .value(a)
                        .data()
                        .iter()
                        .zip(self.value(b).data())
                        .map(|(p, q)| k * (p - q))
                        .collect();
                    if self.needs(b) {
                        accumulate(&mut grads, b, diff.iter().map(|v| -v).collect());
                    }
                    accumulate(&mut grads, a, diff);
                }
                &Op::Scale(x, c) => accumulate(&mut grads, x, g.iter().map(|v| c * v).collect()),
                &Op::Sum(x) => {
                    let n = self.value(x).len();
                    accumulate(&mut grads, x, vec![g[0]; n]);
                }
            }
            grads[idx] = Some(g);
        }
        for (node, g) in self
            .nodes
            .iter_mut()
            .zip(grads.into_iter().chain(std::iter::repeat(None)))
        {
            node.value.grad = if node.needs_grad { g } else { None };
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
    match &mut grads[v.0] {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(g),
    }
}
