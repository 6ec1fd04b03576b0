//! Eager reverse-mode autodiff tape.
//!
//! Every op computes its value immediately and appends a node; node order is
//! therefore a topological order and [`Graph::backward`] walks it in reverse.

use crate::error::{Error, Result};
use crate::kernels::{self, BnHyper, BnSaved, Mode, RunningStats};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    },
    MaxPool2d {
        input: Var,
        argmax: Vec<usize>,
    },
    GlobalAvgPool {
        input: Var,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        saved: BnSaved<T>,
        mode: Mode,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    Relu {
        input: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Scale {
        input: Var,
        factor: T,
    },
    Square {
        input: Var,
    },
    Sum {
        input: Var,
    },
    /// Concatenation of two `[N, *]` matrices along axis 1.
    Concat {
        a: Var,
        b: Var,
    },
    Reshape {
        input: Var,
    },
    MseLoss {
        pred: Var,
        target: Var,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Tape of executed ops plus, after [`Graph::backward`], leaf gradients.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Input tensor; `requires_grad` marks it as a trainable parameter.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let value = kernels::conv2d(self.value(input), self.value(weight), bias.map(|b| self.value(b)), stride, padding)?;
        let mut deps = vec![input, weight];
        deps.extend(bias);
        let rg = self.needs(&deps);
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
            },
            rg,
        ))
    }

    pub fn max_pool2d(&mut self, input: Var, kernel: usize, stride: usize, padding: usize) -> Result<Var> {
        let (value, argmax) = kernels::max_pool2d(self.value(input), kernel, stride, padding)?;
        let rg = self.needs(&[input]);
        Ok(self.push(value, Op::MaxPool2d { input, argmax }, rg))
    }

    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let value = kernels::global_avg_pool(self.value(input))?;
        let rg = self.needs(&[input]);
        Ok(self.push(value, Op::GlobalAvgPool { input }, rg))
    }

    /// Batch norm over `[N,C,H,W]` (or `[N,C]`); train mode updates `running`.
    pub fn batch_norm2d(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        running: &mut RunningStats<T>,
        mode: Mode,
        hyper: BnHyper,
    ) -> Result<Var> {
        let (value, saved) = kernels::batch_norm(self.value(input), self.value(gamma), self.value(beta), running, mode, hyper)?;
        let rg = self.needs(&[input, gamma, beta]);
        Ok(self.push(
            value,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                saved,
                mode,
            },
            rg,
        ))
    }

    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let value = kernels::linear(self.value(input), self.value(weight), bias.map(|b| self.value(b)))?;
        let mut deps = vec![input, weight];
        deps.extend(bias);
        let rg = self.needs(&deps);
        Ok(self.push(value, Op::Linear { input, weight, bias }, rg))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let value = self.value(input).map(|x| if x > T::zero() { x } else { T::zero() });
        let rg = self.needs(&[input]);
        self.push(value, Op::Relu { input }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.dims() != vb.dims() {
            return Err(Error::dim("add", "all", format!("{:?} vs {:?}", va.dims(), vb.dims())));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(va.dims().to_vec(), data)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, Op::Add { a, b }, rg))
    }

    pub fn scale(&mut self, input: Var, factor: T) -> Var {
        let value = self.value(input).map(|x| x * factor);
        let rg = self.needs(&[input]);
        self.push(value, Op::Scale { input, factor }, rg)
    }

    pub fn square(&mut self, input: Var) -> Var {
        let value = self.value(input).map(|x| x * x);
        let rg = self.needs(&[input]);
        self.push(value, Op::Square { input }, rg)
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let s = self.value(input).data().iter().copied().sum();
        let rg = self.needs(&[input]);
        self.push(Tensor::scalar(s), Op::Sum { input }, rg)
    }

    /// `[N, A] ++ [N, B] -> [N, A + B]`.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        va.expect_rank("concat", 2)?;
        vb.expect_rank("concat", 2)?;
        if va.dims()[0] != vb.dims()[0] {
            return Err(Error::dim("concat", "N", format!("{:?} vs {:?}", va.dims(), vb.dims())));
        }
        let (n, wa, wb) = (va.dims()[0], va.dims()[1], vb.dims()[1]);
        let mut data = Vec::with_capacity(n * (wa + wb));
        for i in 0..n {
            data.extend_from_slice(va.outer(i));
            data.extend_from_slice(vb.outer(i));
        }
        let value = Tensor::new(vec![n, wa + wb], data)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, Op::Concat { a, b }, rg))
    }

    pub fn reshape(&mut self, input: Var, dims: &[usize]) -> Result<Var> {
        let value = self.value(input).clone().reshape(dims)?;
        let rg = self.needs(&[input]);
        Ok(self.push(value, Op::Reshape { input }, rg))
    }

    /// Mean of squared differences.
    pub fn mse_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (p, t) = (self.value(pred), self.value(target));
        if p.numel() != t.numel() {
            return Err(Error::dim("mse_loss", "N", format!("{} predictions vs {} targets", p.numel(), t.numel())));
        }
        let n = T::from_usize_lossy(p.numel());
        let s: T = p.data().iter().zip(t.data()).map(|(&a, &b)| (a - b) * (a - b)).sum();
        let rg = self.needs(&[pred, target]);
        Ok(self.push(Tensor::scalar(s / n), Op::MseLoss { pred, target }, rg))
    }

    /// Gradient of the last [`backward`](Self::backward) with respect to a leaf.
    pub fn grad(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    /// Like [`grad`](Self::grad) but zeros for leaves the loss does not reach.
    pub fn grad_or_zeros(&self, var: Var) -> Tensor<T> {
        self.grad(var).cloned().unwrap_or_else(|| Tensor::zeros(self.value(var).dims()))
    }

    /// Populates gradients of the scalar `loss` for every leaf that requires them.
    ///
    /// Intermediate gradients are released once propagated; only leaf
    /// gradients remain queryable.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Graph(format!("backward needs a scalar loss, got dims {:?}", self.value(loss).dims())));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).dims(), T::one()));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            for (target, contrib) in self.local_grads(i, &g)? {
                accumulate(&mut grads[target.0], contrib);
            }
        }
        for (i, slot) in grads.iter_mut().enumerate() {
            if !matches!(self.nodes[i].op, Op::Leaf) || !self.nodes[i].requires_grad {
                *slot = None;
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn local_grads(&self, i: usize, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        let mut out = Vec::new();
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
            } => {
                let cg = kernels::conv2d_backward(self.value(*input), self.value(*weight), g, *stride, *padding, rg(*input))?;
                if let Some(dx) = cg.input {
                    out.push((*input, dx));
                }
                if rg(*weight) {
                    out.push((*weight, cg.weight));
                }
                if let Some(b) = bias.filter(|b| rg(*b)) {
                    out.push((b, cg.bias));
                }
            }
            Op::MaxPool2d { input, argmax } => {
                if rg(*input) {
                    out.push((*input, kernels::max_pool2d_backward(self.value(*input).dims(), argmax, g)));
                }
            }
            Op::GlobalAvgPool { input } => {
                if rg(*input) {
                    out.push((*input, kernels::global_avg_pool_backward(self.value(*input).dims(), g)));
                }
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                saved,
                mode,
            } => {
                let bg = kernels::batch_norm_backward(self.value(*input).dims(), self.value(*gamma), saved, *mode, g);
                if rg(*input) {
                    out.push((*input, bg.input));
                }
                if rg(*gamma) {
                    out.push((*gamma, bg.gamma));
                }
                if rg(*beta) {
                    out.push((*beta, bg.beta));
                }
            }
            Op::Linear { input, weight, bias } => {
                let lg = kernels::linear_backward(self.value(*input), self.value(*weight), g)?;
                if rg(*input) {
                    out.push((*input, lg.input));
                }
                if rg(*weight) {
                    out.push((*weight, lg.weight));
                }
                if let Some(b) = bias.filter(|b| rg(*b)) {
                    out.push((b, lg.bias));
                }
            }
            Op::Relu { input } => {
                let x = self.value(*input);
                let data = x
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&xv, &gv)| if xv > T::zero() { gv } else { T::zero() })
                    .collect();
                out.push((*input, Tensor::new(x.dims().to_vec(), data)?));
            }
            Op::Add { a, b } => {
                if rg(*a) {
                    out.push((*a, g.clone()));
                }
                if rg(*b) {
                    out.push((*b, g.clone()));
                }
            }
            Op::Scale { input, factor } => {
                let f = *factor;
                out.push((*input, g.map(|v| v * f)));
            }
            Op::Square { input } => {
                let x = self.value(*input);
                let two = T::from_f64_lossy(2.0);
                let data = x.data().iter().zip(g.data()).map(|(&xv, &gv)| two * xv * gv).collect();
                out.push((*input, Tensor::new(x.dims().to_vec(), data)?));
            }
            Op::Sum { input } => {
                out.push((*input, Tensor::full(self.value(*input).dims(), g.data()[0])));
            }
            Op::Concat { a, b } => {
                let (wa, wb) = (self.value(*a).dims()[1], self.value(*b).dims()[1]);
                let n = g.dims()[0];
                let mut ga = Vec::with_capacity(n * wa);
                let mut gb = Vec::with_capacity(n * wb);
                for row in g.data().chunks_exact(wa + wb) {
                    ga.extend_from_slice(&row[..wa]);
                    gb.extend_from_slice(&row[wa..]);
                }
                if rg(*a) {
                    out.push((*a, Tensor::new(vec![n, wa], ga)?));
                }
                if rg(*b) {
                    out.push((*b, Tensor::new(vec![n, wb], gb)?));
                }
            }
            Op::Reshape { input } => {
                out.push((*input, g.clone().reshape(self.value(*input).dims())?));
            }
            Op::MseLoss { pred, target } => {
                let (p, t) = (self.value(*pred), self.value(*target));
                let k = g.data()[0] * T::from_f64_lossy(2.0) / T::from_usize_lossy(p.numel());
                let diff: Vec<T> = p.data().iter().zip(t.data()).map(|(&a, &b)| k * (a - b)).collect();
                if rg(*target) {
                    out.push((*target, Tensor::new(t.dims().to_vec(), diff.iter().map(|&d| -d).collect())?));
                }
                if rg(*pred) {
                    out.push((*pred, Tensor::new(p.dims().to_vec(), diff)?));
                }
            }
        }
        Ok(out)
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, contrib: Tensor<T>) {
    match slot {
        Some(acc) => {
            for (a, c) in acc.data_mut().iter_mut().zip(contrib.data()) {
                *a += *c;
            }
        }
        None => *slot = Some(contrib),
    }
}
