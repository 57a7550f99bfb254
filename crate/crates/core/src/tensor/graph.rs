use std::borrow::Cow;

use super::ops::{self, Padding};
use super::{Result, Tensor, TensorError};

/// Handle to a node recorded in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        x: Var,
        kernels: Var,
        bias: Var,
        padding: Padding,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    MeanPool {
        x: Var,
        n: usize,
    },
    Relu {
        x: Var,
    },
    Flatten {
        x: Var,
    },
    Dense {
        x: Var,
        weights: Var,
        bias: Var,
    },
    Mse {
        a: Var,
        b: Var,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        label: usize,
        probs: Vec<f64>,
    },
    Sum {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        factor: f64,
    },
}

#[derive(Debug)]
struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// A single-use reverse-mode tape.
///
/// Nodes are appended in evaluation order, so the node list is always
/// topologically sorted. Leaves may borrow their tensors, which lets one
/// network's weights back many graphs without copies. A node requires a
/// gradient iff one of its inputs does; backward skips everything else.
#[derive(Debug, Default)]
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an owned leaf.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push_leaf(Cow::Owned(value), requires_grad)
    }

    /// Records a borrowed leaf (weights, fixed targets).
    pub fn leaf_ref(&mut self, value: &'a Tensor, requires_grad: bool) -> Var {
        self.push_leaf(Cow::Borrowed(value), requires_grad)
    }

    fn push_leaf(&mut self, value: Cow<'a, Tensor>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` loss with respect to `v`, if `v`
    /// required one.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<f64>> {
        self.nodes[v.0].grad.take()
    }

    /// Copy of a node's value with its gradient slot populated.
    pub fn tensor_with_grad(&self, v: Var) -> Tensor {
        let node = &self.nodes[v.0];
        let mut t = node.value.clone().into_owned();
        t.clear_grad();
        if let Some(g) = &node.grad {
            t.set_grad(g.clone()).expect("gradient matches node shape");
        }
        t
    }

    pub fn conv2d(&mut self, x: Var, kernels: Var, bias: Var, padding: Padding) -> Result<Var> {
        let y = ops::conv2d(
            self.value(x),
            self.value(kernels),
            self.value(bias),
            padding,
        )?;
        Ok(self.push(
            y,
            Op::Conv2d {
                x,
                kernels,
                bias,
                padding,
            },
            &[x, kernels, bias],
        ))
    }

    pub fn maxpool2d(&mut self, x: Var, n: usize) -> Result<Var> {
        let (y, argmax) = ops::maxpool2d(self.value(x), n)?;
        Ok(self.push(y, Op::MaxPool { x, argmax }, &[x]))
    }

    pub fn meanpool2d(&mut self, x: Var, n: usize) -> Result<Var> {
        let y = ops::meanpool2d(self.value(x), n)?;
        Ok(self.push(y, Op::MeanPool { x, n }, &[x]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = ops::relu(self.value(x));
        self.push(y, Op::Relu { x }, &[x])
    }

    pub fn flatten(&mut self, x: Var) -> Var {
        let y = self.value(x).clone().flatten();
        self.push(y, Op::Flatten { x }, &[x])
    }

    pub fn dense(&mut self, x: Var, weights: Var, bias: Var) -> Result<Var> {
        let y = ops::dense(self.value(x), self.value(weights), self.value(bias))?;
        Ok(self.push(y, Op::Dense { x, weights, bias }, &[x, weights, bias]))
    }

    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = ops::mse(self.value(a), self.value(b))?;
        Ok(self.push(Tensor::scalar(y), Op::Mse { a, b }, &[a, b]))
    }

    pub fn softmax_cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let (loss, probs) = ops::softmax_cross_entropy(self.value(logits), label)?;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                label,
                probs,
            },
            &[logits],
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum { x }, &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.value(a).check_same_shape("add", self.value(b))?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let y = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(y, Op::Add { a, b }, &[a, b]))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let y = self.value(x).map(|v| v * factor);
        self.push(y, Op::Scale { x, factor }, &[x])
    }

    /// Reverse pass from a scalar `loss`.
    ///
    /// Afterwards every node that requires a gradient has one; leaves that the
    /// loss does not depend on receive zeros.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.value(loss).shape().to_vec();
        if self.value(loss).len() != 1 {
            return Err(TensorError::NonScalarLoss(shape));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        for (idx, node) in self.nodes.iter_mut().enumerate() {
            node.grad = if node.requires_grad {
                Some(
                    grads[idx]
                        .take()
                        .unwrap_or_else(|| vec![0.0; node.value.len()]),
                )
            } else {
                None
            };
        }
        for node in &self.nodes {
            if let Some(g) = &node.grad {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(TensorError::NonFinite("backward"));
                }
            }
        }
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                x,
                kernels,
                bias,
                padding,
            } => {
                let (gx, gk, gb) = ops::conv2d_backward(
                    self.value(*x),
                    self.value(*kernels),
                    self.value(*bias),
                    *padding,
                    g,
                    self.needs(*x),
                    self.needs(*kernels),
                )?;
                if let Some(gx) = gx {
                    accumulate(grads, *x, gx);
                }
                if let Some(gk) = gk {
                    accumulate(grads, *kernels, gk);
                }
                if self.needs(*bias) {
                    accumulate(grads, *bias, gb);
                }
            }
            Op::MaxPool { x, argmax } => {
                if self.needs(*x) {
                    let gx = ops::maxpool2d_backward(self.value(*x).len(), argmax, g);
                    accumulate(grads, *x, gx);
                }
            }
            Op::MeanPool { x, n } => {
                if self.needs(*x) {
                    let gx = ops::meanpool2d_backward(self.value(*x).shape(), *n, g);
                    accumulate(grads, *x, gx);
                }
            }
            Op::Relu { x } => {
                if self.needs(*x) {
                    accumulate(grads, *x, ops::relu_backward(self.value(*x), g));
                }
            }
            Op::Flatten { x } => {
                if self.needs(*x) {
                    accumulate(grads, *x, g.to_vec());
                }
            }
            Op::Dense { x, weights, bias } => {
                let (gx, gw, gb) = ops::dense_backward(
                    self.value(*x),
                    self.value(*weights),
                    self.value(*bias),
                    g,
                    self.needs(*x),
                    self.needs(*weights),
                )?;
                if let Some(gx) = gx {
                    accumulate(grads, *x, gx);
                }
                if let Some(gw) = gw {
                    accumulate(grads, *weights, gw);
                }
                if self.needs(*bias) {
                    accumulate(grads, *bias, gb);
                }
            }
            Op::Mse { a, b } => {
                let da = ops::mse_grad(self.value(*a), self.value(*b));
                if self.needs(*b) {
                    accumulate(grads, *b, da.iter().map(|v| -v * g[0]).collect());
                }
                if self.needs(*a) {
                    accumulate(grads, *a, da.iter().map(|v| v * g[0]).collect());
                }
            }
            Op::SoftmaxCrossEntropy {
                logits,
                label,
                probs,
            } => {
                if self.needs(*logits) {
                    let mut gl: Vec<f64> = probs.iter().map(|p| p * g[0]).collect();
                    gl[*label] -= g[0];
                    accumulate(grads, *logits, gl);
                }
            }
            Op::Sum { x } => {
                if self.needs(*x) {
                    accumulate(grads, *x, vec![g[0]; self.value(*x).len()]);
                }
            }
            Op::Add { a, b } => {
                if self.needs(*a) {
                    accumulate(grads, *a, g.to_vec());
                }
                if self.needs(*b) {
                    accumulate(grads, *b, g.to_vec());
                }
            }
            Op::Scale { x, factor } => {
                if self.needs(*x) {
                    accumulate(grads, *x, g.iter().map(|v| v * factor).collect());
                }
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, d) in existing.iter_mut().zip(g) {
                *e += d;
            }
        }
        slot @ None => *slot = Some(g),
    }
}
