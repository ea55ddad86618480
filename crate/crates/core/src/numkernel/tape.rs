//! Reverse-mode tape over coarse tensor operations.
//!
//! Every recorded node keeps its forward value. [`Tape::backward`] walks the
//! nodes in reverse, applies each op's vector-Jacobian product and adds the
//! result into the gradients of the [`Parameter`]s that were read via
//! [`Tape::param`].

use crate::error::{Error, Result};
use crate::loss;

use super::{ops, Parameter, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(usize),
    Conv1d { input: Var, kernel: Var, bias: Var, stride: usize },
    Dense { input: Var, weight: Var, bias: Var },
    Relu(Var),
    MeanPool(Var),
    Mask { input: Var, mask: Tensor },
    Stack(Vec<Var>),
    Reshape(Var),
    Sum(Var),
    Invariance(Var, Var),
    Variance { input: Var, gamma: f64, eps: f64 },
    Covariance(Var),
    WeightedSum(Vec<(Var, f64)>),
    SoftmaxCrossEntropy { logits: Var, grad: Tensor },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A constant input.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Input, false)
    }

    /// Reads parameter `index`. Frozen parameters are recorded as constants and
    /// receive no gradient.
    pub fn param(&mut self, index: usize, p: &Parameter) -> Var {
        self.push(p.value.clone(), Op::Param(index), p.trainable)
    }

    pub fn conv1d(&mut self, input: Var, kernel: Var, bias: Var, stride: usize) -> Result<Var> {
        let value = ops::conv1d_forward(self.value(input), self.value(kernel), self.value(bias), stride)?;
        let rg = self.rg(&[input, kernel, bias]);
        Ok(self.push(value, Op::Conv1d { input, kernel, bias, stride }, rg))
    }

    pub fn dense(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let value = ops::dense_forward(self.value(input), self.value(weight), self.value(bias))?;
        let rg = self.rg(&[input, weight, bias]);
        Ok(self.push(value, Op::Dense { input, weight, bias }, rg))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let value = ops::relu(self.value(input));
        let rg = self.rg(&[input]);
        self.push(value, Op::Relu(input), rg)
    }

    pub fn mean_pool(&mut self, input: Var) -> Result<Var> {
        let value = ops::global_mean_pool(self.value(input))?;
        let rg = self.rg(&[input]);
        Ok(self.push(value, Op::MeanPool(input), rg))
    }

    /// Elementwise product with a constant tensor (a 0/1 mask in practice).
    pub fn mask(&mut self, input: Var, mask: &Tensor) -> Result<Var> {
        let x = self.value(input);
        x.same_shape(mask, "mask")?;
        let values = x.values().iter().zip(mask.values()).map(|(a, b)| a * b).collect();
        let value = Tensor::new(x.shape().to_vec(), values)?;
        let rg = self.rg(&[input]);
        Ok(self.push(value, Op::Mask { input, mask: mask.clone() }, rg))
    }

    /// Stacks `M` tensors of shape `[N, K]` into `[N, M, K]`.
    pub fn stack(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or(Error::shape("stack", "no inputs"))?;
        let shape = self.value(*first).shape().to_vec();
        if shape.len() != 2 {
            return Err(Error::shape("stack", format!("expected [N, K], got {shape:?}")));
        }
        for p in parts {
            if self.value(*p).shape() != shape.as_slice() {
                return Err(Error::shape(
                    "stack",
                    format!("{:?} vs {shape:?}", self.value(*p).shape()),
                ));
            }
        }
        let (n, k, m) = (shape[0], shape[1], parts.len());
        let mut values = vec![0.0; n * m * k];
        for (mi, p) in parts.iter().enumerate() {
            let src = self.value(*p).values();
            for s in 0..n {
                values[(s * m + mi) * k..(s * m + mi + 1) * k].copy_from_slice(&src[s * k..(s + 1) * k]);
            }
        }
        let value = Tensor::new(vec![n, m, k], values)?;
        let rg = self.rg(parts);
        Ok(self.push(value, Op::Stack(parts.to_vec()), rg))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(input).clone().reshape(shape)?;
        let rg = self.rg(&[input]);
        Ok(self.push(value, Op::Reshape(input), rg))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let value = Tensor::scalar(self.value(input).sum());
        let rg = self.rg(&[input]);
        self.push(value, Op::Sum(input), rg)
    }

    pub fn invariance(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = loss::invariance_term(self.value(a), self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::scalar(value), Op::Invariance(a, b), rg))
    }

    pub fn variance(&mut self, input: Var, gamma: f64, eps: f64) -> Result<Var> {
        let value = loss::variance_term(self.value(input), gamma, eps)?;
        let rg = self.rg(&[input]);
        Ok(self.push(Tensor::scalar(value), Op::Variance { input, gamma, eps }, rg))
    }

    pub fn covariance(&mut self, input: Var) -> Result<Var> {
        let value = loss::covariance_term(self.value(input))?;
        let rg = self.rg(&[input]);
        Ok(self.push(Tensor::scalar(value), Op::Covariance(input), rg))
    }

    /// `Σ w_i · x_i` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut total = 0.0;
        for (v, w) in terms {
            let t = self.value(*v);
            if t.len() != 1 {
                return Err(Error::shape("weighted_sum", format!("non-scalar term {:?}", t.shape())));
            }
            total += w * t.values()[0];
        }
        let vars: Vec<Var> = terms.iter().map(|(v, _)| *v).collect();
        let rg = self.rg(&vars);
        Ok(self.push(Tensor::scalar(total), Op::WeightedSum(terms.to_vec()), rg))
    }

    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (loss, grad) = ops::softmax_cross_entropy(self.value(logits), labels)?;
        let rg = self.rg(&[logits]);
        Ok(self.push(Tensor::scalar(loss), Op::SoftmaxCrossEntropy { logits, grad }, rg))
    }

    /// Propagates `d loss / d node` back to every parameter leaf and adds it
    /// into `params[index].grad`.
    pub fn backward(&self, loss: Var, params: &mut [Parameter]) -> Result<()> {
        if self.nodes.is_empty() || loss.0 >= self.nodes.len() {
            return Err(Error::EmptyTape);
        }
        let root = &self.nodes[loss.0].value;
        if root.len() != 1 {
            return Err(Error::shape("backward", format!("loss must be scalar, got {:?}", root.shape())));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(root.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let send = |v: Var, t: Tensor, grads: &mut Vec<Option<Tensor>>| {
                if !self.nodes[v.0].requires_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&t).expect("gradient shape"),
                    slot @ None => *slot = Some(t),
                }
            };
            match &node.op {
                Op::Input => {}
                Op::Param(i) => {
                    let p = params.get_mut(*i).ok_or_else(|| {
                        Error::shape("backward", format!("parameter index {i} out of range"))
                    })?;
                    p.grad.add_assign(&g)?;
                }
                Op::Conv1d { input, kernel, bias, stride } => {
                    let (dx, dk, db) =
                        ops::conv1d_backward(self.value(*input), self.value(*kernel), &g, *stride);
                    send(*input, dx, &mut grads);
                    send(*kernel, dk, &mut grads);
                    send(*bias, db, &mut grads);
                }
                Op::Dense { input, weight, bias } => {
                    let (dx, dw, db) = ops::dense_backward(self.value(*input), self.value(*weight), &g);
                    send(*input, dx, &mut grads);
                    send(*weight, dw, &mut grads);
                    send(*bias, db, &mut grads);
                }
                Op::Relu(x) => {
                    let dx = ops::relu_backward(self.value(*x), &g);
                    send(*x, dx, &mut grads);
                }
                Op::MeanPool(x) => {
                    let dx = ops::global_mean_pool_backward(self.value(*x).shape(), &g);
                    send(*x, dx, &mut grads);
                }
                Op::Mask { input, mask } => {
                    let values = g.values().iter().zip(mask.values()).map(|(a, b)| a * b).collect();
                    send(*input, Tensor::new(g.shape().to_vec(), values)?, &mut grads);
                }
                Op::Stack(parts) => {
                    let (n, m, k) = (g.dim(0), g.dim(1), g.dim(2));
                    for (mi, p) in parts.iter().enumerate() {
                        let mut part = Vec::with_capacity(n * k);
                        for s in 0..n {
                            part.extend_from_slice(&g.values()[(s * m + mi) * k..(s * m + mi + 1) * k]);
                        }
                        send(*p, Tensor::new(vec![n, k], part)?, &mut grads);
                    }
                }
                Op::Reshape(x) => {
                    let shape = self.value(*x).shape().to_vec();
                    send(*x, g.reshape(&shape)?, &mut grads);
                }
                Op::Sum(x) => {
                    let up = g.values()[0];
                    send(*x, Tensor::full(self.value(*x).shape(), up), &mut grads);
                }
                Op::Invariance(a, b) => {
                    let up = g.values()[0];
                    let (ga, gb) = loss::invariance_grad(self.value(*a), self.value(*b));
                    send(*a, ga.map(|v| v * up), &mut grads);
                    send(*b, gb.map(|v| v * up), &mut grads);
                }
                Op::Variance { input, gamma, eps } => {
                    let up = g.values()[0];
                    let gx = loss::variance_grad(self.value(*input), *gamma, *eps);
                    send(*input, gx.map(|v| v * up), &mut grads);
                }
                Op::Covariance(x) => {
                    let up = g.values()[0];
                    let gx = loss::covariance_grad(self.value(*x));
                    send(*x, gx.map(|v| v * up), &mut grads);
                }
                Op::WeightedSum(terms) => {
                    let up = g.values()[0];
                    for (v, w) in terms {
                        send(*v, Tensor::scalar(up * w), &mut grads);
                    }
                }
                Op::SoftmaxCrossEntropy { logits, grad } => {
                    let up = g.values()[0];
                    send(*logits, grad.map(|v| v * up), &mut grads);
                }
            }
        }
        Ok(())
    }
}
