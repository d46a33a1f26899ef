//! A small reverse-mode tape over the crate's operation set.
//!
//! Each call appends a node holding the forward value and whatever the
//! backward rule needs. [`Tape::backward`] walks the nodes in reverse and
//! accumulates gradients into every node reachable from the loss. Values are
//! checked for NaN/Inf as they are produced.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::ops::{self, ConvGeom, RowColMax};
use crate::qim::{qim_batch_backward, qim_batch_forward, BoundQim, QimBatch, QimKernel, QimParams};
use crate::tensor::{Scalar, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// A user-supplied differentiable operation.
pub trait CustomOp<T: Scalar>: Send + Sync {
    fn name(&self) -> &str;
    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>>;
    /// One gradient per input, each shaped like that input.
    fn backward(&self, inputs: &[&Tensor<T>], output: &Tensor<T>, grad: &Tensor<T>) -> Result<Vec<Tensor<T>>>;
}

enum Op<T> {
    Leaf,
    Conv2dValid { input: Var, kernel: Var },
    ConvLayer { input: Var, weight: Var, bias: Var, geom: ConvGeom, cols: Vec<T> },
    Relu { input: Var },
    MaxPool2 { input: Var, argmax: Vec<usize> },
    Reshape { input: Var },
    Affine { x: Var, w: Var, b: Var },
    SoftmaxCe { logits: Var, grad: Tensor<T> },
    RowColMax { input: Var, pooled: RowColMax<T> },
    WeightedSum { input: Var, weights: Tensor<T> },
    Mul { a: Var, b: Var },
    Dyad { input: Var, normalize: bool },
    Qim { vectors: Var, kernels: Var, biases: Var, logits: Option<Var>, bound: BoundQim, state: QimBatch<T> },
    Custom { inputs: Vec<Var>, op: Arc<dyn CustomOp<T>> },
}

impl<T: Scalar> Op<T> {
    fn name(&self) -> &str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2dValid { .. } => "conv2d_valid",
            Op::ConvLayer { .. } => "conv2d_layer",
            Op::Relu { .. } => "relu",
            Op::MaxPool2 { .. } => "max_pool2",
            Op::Reshape { .. } => "reshape",
            Op::Affine { .. } => "affine",
            Op::SoftmaxCe { .. } => "softmax_cross_entropy",
            Op::RowColMax { .. } => "row_col_max",
            Op::WeightedSum { .. } => "weighted_sum",
            Op::Mul { .. } => "mul",
            Op::Dyad { .. } => "dyad",
            Op::Qim { .. } => "qim",
            Op::Custom { op, .. } => op.name(),
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    needs_grad: bool,
    op: Op<T>,
}

/// Records operations for one forward/backward pass.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    retain: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> fmt::Debug for Tape<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.nodes.iter().map(|n| n.op.name())).finish()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), retain: true }
    }

    /// A tape that keeps no backward state; [`Tape::backward`] will fail.
    pub fn inference() -> Self {
        Self { nodes: Vec::new(), retain: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, self.retain)
    }

    /// A leaf that is never differentiated.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    fn leaf(&mut self, value: Tensor<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, grad: None, needs_grad, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Gradient of the last backward pass, `None` if `v` was unreachable.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn grad_or_zeros(&self, v: Var) -> Tensor<T> {
        self.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(self.value(v).shape()))
    }

    fn push(&mut self, value: Tensor<T>, inputs: &[Var], op: Op<T>) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op.name().to_string() });
        }
        let needs_grad = self.retain && inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value, grad: None, needs_grad, op });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn conv2d_valid(&mut self, input: Var, kernel: Var) -> Result<Var> {
        let out = ops::conv2d_valid(self.value(input), self.value(kernel))?;
        self.push(out, &[input, kernel], Op::Conv2dValid { input, kernel })
    }

    /// Batched multi-channel convolution, see [`ops::conv2d_layer`].
    pub fn conv_layer(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (out, geom, cols) = ops::conv2d_layer(self.value(input), self.value(weight), self.value(bias))?;
        let cols = if self.retain { cols } else { Vec::new() };
        self.push(out, &[input, weight, bias], Op::ConvLayer { input, weight, bias, geom, cols })
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let out = ops::relu(self.value(input));
        self.push(out, &[input], Op::Relu { input })
    }

    pub fn max_pool2(&mut self, input: Var) -> Result<Var> {
        let (out, argmax) = ops::max_pool2(self.value(input))?;
        let argmax = if self.retain { argmax } else { Vec::new() };
        self.push(out, &[input], Op::MaxPool2 { input, argmax })
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(input).clone().reshape(shape)?;
        self.push(out, &[input], Op::Reshape { input })
    }

    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let out = ops::affine(self.value(x), self.value(w), self.value(b))?;
        self.push(out, &[x, w, b], Op::Affine { x, w, b })
    }

    /// Mean cross-entropy of `logits` (length C, or B×C) against `labels`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (loss, grad) = ops::softmax_cross_entropy(self.value(logits), labels)?;
        self.push(Tensor::scalar(loss), &[logits], Op::SoftmaxCe { logits, grad })
    }

    /// Row and column maxima of a square matrix, as a 2×s tensor whose first
    /// row is the row maxima and second row the column maxima.
    pub fn row_col_max(&mut self, input: Var) -> Result<Var> {
        let pooled = ops::row_col_max(self.value(input))?;
        let s = pooled.row_max.len();
        let mut data = pooled.row_max.clone();
        data.extend_from_slice(&pooled.col_max);
        let out = Tensor::from_vec(&[2, s], data)?;
        self.push(out, &[input], Op::RowColMax { input, pooled })
    }

    /// `Σ weights ⊙ input`, a scalar.
    pub fn weighted_sum(&mut self, input: Var, weights: Tensor<T>) -> Result<Var> {
        if weights.len() != self.value(input).len() {
            return Err(Error::dim(format!(
                "weighted_sum: {} weights for {:?}",
                weights.len(),
                self.value(input).shape()
            )));
        }
        let s: T = self.value(input).data().iter().zip(weights.data()).map(|(&a, &b)| a * b).sum();
        self.push(Tensor::scalar(s), &[input], Op::WeightedSum { input, weights })
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::dim(format!("mul {:?} by {:?}", x.shape(), y.shape())));
        }
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p * q).collect();
        let out = Tensor::from_vec(x.shape(), data)?;
        self.push(out, &[a, b], Op::Mul { a, b })
    }

    /// `û·ûᵀ` of a vector (or `u·uᵀ` with `normalize` off).
    pub fn dyad(&mut self, input: Var, normalize: bool) -> Result<Var> {
        let u = self.value(input).data().to_vec();
        let rho = crate::density::dyad(&u, normalize)?;
        self.push(rho.entries().clone(), &[input], Op::Dyad { input, normalize })
    }

    /// QIM block on B×channels×d vectors, producing B×2cs features.
    pub fn qim(
        &mut self,
        vectors: Var,
        kernels: Var,
        biases: Var,
        logits: Option<Var>,
        bound: &BoundQim,
        kernel: QimKernel,
    ) -> Result<Var> {
        let params = self.qim_params(kernels, biases, logits);
        let (out, state) = qim_batch_forward(self.value(vectors), &params, bound, kernel, self.retain)?;
        let mut inputs = vec![vectors, kernels, biases];
        inputs.extend(logits);
        self.push(out, &inputs, Op::Qim { vectors, kernels, biases, logits, bound: bound.clone(), state })
    }

    fn qim_params(&self, kernels: Var, biases: Var, logits: Option<Var>) -> QimParams<T> {
        QimParams {
            kernels: self.value(kernels).clone(),
            biases: self.value(biases).clone(),
            logits: logits.map(|l| self.value(l).clone()),
        }
    }

    pub fn custom(&mut self, op: Arc<dyn CustomOp<T>>, inputs: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor<T>> = inputs.iter().map(|v| self.value(*v)).collect();
        let out = op.forward(&values)?;
        self.push(out, inputs, Op::Custom { inputs: inputs.to_vec(), op })
    }

    /// Distance from the nearest switch of a recorded piecewise op: the
    /// smallest `|x|` entering a ReLU and the smallest gap between a max and
    /// its runner-up in pooling or row/column maxima. A central difference
    /// whose step moves no switch input by this much sees a smooth function.
    pub fn kink_margin(&self) -> T {
        let mut margin = T::infinity();
        for node in &self.nodes {
            let m = match &node.op {
                Op::Relu { input } => self.value(*input).data().iter().fold(T::infinity(), |m, &x| m.min(x.abs())),
                Op::MaxPool2 { input, .. } => {
                    let x = self.value(*input);
                    let &[batch, ch, h, w] = x.shape() else { unreachable!() };
                    let d = x.data();
                    let mut m = T::infinity();
                    for plane in 0..batch * ch {
                        for a in 0..h / 2 {
                            for b in 0..w / 2 {
                                let i = plane * h * w + 2 * a * w + 2 * b;
                                m = m.min(ops::top_gap([d[i], d[i + 1], d[i + w], d[i + w + 1]].into_iter()));
                            }
                        }
                    }
                    m
                }
                Op::RowColMax { input, .. } => {
                    let x = self.value(*input);
                    let s = x.shape()[0];
                    let d = x.data();
                    (0..s).fold(T::infinity(), |m, a| {
                        m.min(ops::top_gap((0..s).map(|b| d[a * s + b])))
                            .min(ops::top_gap((0..s).map(|b| d[b * s + a])))
                    })
                }
                Op::Qim { state, .. } => {
                    state.outputs.iter().filter_map(|o| o.kink_margin()).fold(T::infinity(), |m, x| m.min(x))
                }
                _ => T::infinity(),
            };
            margin = margin.min(m);
        }
        margin
    }

    /// Reverse pass from a scalar `loss`; gradients of earlier passes are
    /// cleared first.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.retain {
            return Err(Error::MissingForwardState);
        }
        if self.value(loss).len() != 1 {
            return Err(Error::dim(format!("backward needs a scalar loss, got {:?}", self.value(loss).shape())));
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.nodes[loss.0].grad = Some(Tensor::full(self.value(loss).shape(), T::one()));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else { continue };
            let contribs = self.vjp(i, &g)?;
            self.nodes[i].grad = Some(g);
            for (v, t) in contribs {
                let node = &mut self.nodes[v.0];
                if !node.needs_grad {
                    continue;
                }
                match node.grad.as_mut() {
                    Some(acc) => acc.add_assign(&t)?,
                    None => node.grad = Some(t),
                }
            }
        }
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn vjp(&self, i: usize, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let node = &self.nodes[i];
        Ok(match &node.op {
            Op::Leaf => Vec::new(),
            Op::Conv2dValid { input, kernel } => {
                let (gi, gk) = ops::conv2d_valid_backward(self.value(*input), self.value(*kernel), g)?;
                vec![(*input, gi), (*kernel, gk)]
            }
            Op::ConvLayer { input, weight, bias, geom, cols } => {
                let (gi, gw, gb) = ops::conv2d_layer_backward(geom, cols, self.value(*weight), g, self.needs(*input))?;
                let mut out = vec![(*weight, gw), (*bias, gb)];
                out.extend(gi.map(|gi| (*input, gi)));
                out
            }
            Op::Relu { input } => vec![(*input, ops::relu_backward(self.value(*input), g))],
            Op::MaxPool2 { input, argmax } => {
                vec![(*input, ops::max_pool2_backward(self.value(*input).shape(), argmax, g)?)]
            }
            Op::Reshape { input } => vec![(*input, g.clone().reshape(self.value(*input).shape())?)],
            Op::Affine { x, w, b } => {
                let (gx, gw, gb) = ops::affine_backward(self.value(*x), self.value(*w), g)?;
                vec![(*x, gx), (*w, gw), (*b, gb)]
            }
            Op::SoftmaxCe { logits, grad } => {
                let scale = g.data()[0];
                vec![(*logits, grad.map(|v| v * scale))]
            }
            Op::RowColMax { input, pooled } => {
                let s = pooled.row_max.len();
                let (gr, gc) = g.data().split_at(s);
                vec![(*input, ops::row_col_max_backward(s, pooled, gr, gc))]
            }
            Op::WeightedSum { input, weights } => {
                let scale = g.data()[0];
                vec![(*input, weights.map(|w| w * scale))]
            }
            Op::Mul { a, b } => {
                let ga = mul(g, self.value(*b))?;
                let gb = mul(g, self.value(*a))?;
                vec![(*a, ga), (*b, gb)]
            }
            Op::Dyad { input, normalize } => {
                let u = self.value(*input);
                vec![(*input, dyad_backward(u.data(), *normalize, g)?)]
            }
            Op::Qim { vectors, kernels, biases, logits, bound, state } => {
                let params = self.qim_params(*kernels, *biases, *logits);
                let grads = qim_batch_backward(g, state, &params, bound)?;
                let mut out = vec![(*vectors, grads.vectors), (*kernels, grads.kernels), (*biases, grads.biases)];
                if let (Some(l), Some(gl)) = (logits, grads.logits) {
                    out.push((*l, gl));
                }
                out
            }
            Op::Custom { inputs, op } => {
                let values: Vec<&Tensor<T>> = inputs.iter().map(|v| self.value(*v)).collect();
                let grads = op.backward(&values, &node.value, g)?;
                if grads.len() != inputs.len() {
                    return Err(Error::dim(format!(
                        "{} returned {} gradients for {} inputs",
                        op.name(),
                        grads.len(),
                        inputs.len()
                    )));
                }
                inputs.iter().copied().zip(grads).collect()
            }
        })
    }
}

fn mul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    Tensor::from_vec(a.shape(), a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect())
}

/// Gradient of `u ↦ û·ûᵀ` given `G = ∂L/∂ρ`.
fn dyad_backward<T: Scalar>(u: &[T], normalize: bool, g: &Tensor<T>) -> Result<Tensor<T>> {
    let d = u.len();
    let (unit, zero) = if normalize { crate::density::normalize_vec(u) } else { (u.to_vec(), false) };
    if zero {
        return Ok(Tensor::zeros(&[d]));
    }
    let gd = g.data();
    let mut gu = vec![T::zero(); d];
    for x in 0..d {
        for y in 0..d {
            gu[x] += (gd[x * d + y] + gd[y * d + x]) * unit[y];
        }
    }
    if normalize {
        let norm = u.iter().map(|&x| x * x).sum::<T>().sqrt();
        let proj: T = unit.iter().zip(&gu).map(|(&a, &b)| a * b).sum();
        for (gi, &ui) in gu.iter_mut().zip(&unit) {
            *gi = (*gi - ui * proj) / norm;
        }
    }
    Tensor::from_vec(&[d], gu)
}
