//! Minimal reverse-mode automatic differentiation.
//!
//! A [`Graph`] is a Wengert list: every op appends a node holding its value and
//! whatever it needs for the backward pass. Nodes are appended in topological
//! order, so [`Graph::backward`] is a single reverse sweep over the list.

use rand::Rng;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeometry};
use crate::tensor::Tensor;

/// Lower/upper clamp applied to probabilities before any logarithm.
pub const PROB_EPS: f32 = 1e-7;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d { input: Var, kernel: Var, geom: ConvGeometry },
    BiasAdd { input: Var, bias: Var },
    Silu { input: Var },
    Relu { input: Var },
    Sigmoid { input: Var },
    /// `mask` already carries the inverted-dropout scale.
    Dropout { input: Var, mask: Vec<f32> },
    Upsample { input: Var, factor: usize },
    AvgPool { input: Var, size: usize },
    Concat { a: Var, b: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    MulConst { input: Var, factor: Tensor },
    Affine { input: Var, scale: f32 },
    Clamp { input: Var, lo: f32, hi: f32 },
    Ln { input: Var },
    Sum { input: Var },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss with respect to every node that influenced it.
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of `v`, or `None` if `v` did not influence the loss.
    pub fn get(&self, v: Var) -> Option<Tensor> {
        self.grads
            .get(v.0)?
            .as_ref()
            .map(|g| Tensor::from_parts_unchecked(self.shapes[v.0].clone(), g.clone()))
    }

    /// Gradient of `v`, zero-filled if `v` did not influence the loss.
    pub fn get_or_zeros(&self, v: Var) -> Tensor {
        self.get(v)
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

fn elementwise(a: &Tensor, b: &Tensor, what: &str, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
    a.expect_same_shape(b, what)?;
    Ok(Tensor::from_parts_unchecked(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    ))
}

/// Logistic function, kept strictly inside `(0, 1)` even where `f32`
/// would saturate.
#[inline]
fn sigmoid(x: f32) -> f32 {
    let y = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    y.clamp(f32::MIN_POSITIVE, 1.0 - f32::EPSILON / 2.0)
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, what: &str) -> Result<Var> {
        value.check_finite(what)?;
        let requires_grad = match &op {
            Op::Leaf => false,
            Op::Conv2d { input, kernel, .. } => self.rg(*input) || self.rg(*kernel),
            Op::BiasAdd { input, bias } => self.rg(*input) || self.rg(*bias),
            Op::Concat { a, b } | Op::Add { a, b } | Op::Sub { a, b } | Op::Mul { a, b } => {
                self.rg(*a) || self.rg(*b)
            }
            Op::Silu { input }
            | Op::Relu { input }
            | Op::Sigmoid { input }
            | Op::Dropout { input, .. }
            | Op::Upsample { input, .. }
            | Op::AvgPool { input, .. }
            | Op::MulConst { input, .. }
            | Op::Affine { input, .. }
            | Op::Clamp { input, .. }
            | Op::Ln { input }
            | Op::Sum { input } => self.rg(*input),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant input; receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let geom = ConvGeometry::new(self.value(input).shape(), self.value(kernel).shape(), stride, padding)?;
        let out = kernels::conv2d_forward(self.value(input), self.value(kernel), stride, padding)?;
        self.push(out, Op::Conv2d { input, kernel, geom }, "conv2d")
    }

    /// Adds a per-channel bias of shape `[C]` to a `[N, C, H, W]` input.
    pub fn bias_add(&mut self, input: Var, bias: Var) -> Result<Var> {
        let [_, c, h, w] = self.value(input).dims4()?;
        let b = self.value(bias);
        if b.shape() != [c] {
            return Err(Error::Shape(format!(
                "bias of shape {:?} for {c} channels",
                b.shape()
            )));
        }
        let mut out = self.value(input).data().to_vec();
        for (i, plane) in out.chunks_exact_mut(h * w).enumerate() {
            let bv = b.data()[i % c];
            plane.iter_mut().for_each(|v| *v += bv);
        }
        let shape = self.value(input).shape().to_vec();
        self.push(Tensor::from_parts_unchecked(shape, out), Op::BiasAdd { input, bias }, "bias_add")
    }

    pub fn silu(&mut self, input: Var) -> Result<Var> {
        let out = self.value(input).map(|x| x * sigmoid(x))?;
        self.push(out, Op::Silu { input }, "silu")
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let out = self.value(input).map(|x| x.max(0.0))?;
        self.push(out, Op::Relu { input }, "relu")
    }

    pub fn sigmoid(&mut self, input: Var) -> Result<Var> {
        let out = self.value(input).map(sigmoid)?;
        self.push(out, Op::Sigmoid { input }, "sigmoid")
    }

    /// Inverted dropout. With `stochastic == false` this is the identity.
    pub fn dropout(&mut self, input: Var, rate: f32, stochastic: bool, rng: &mut impl Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Param(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !stochastic || rate == 0.0 {
            return Ok(input);
        }
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f32> = (0..self.value(input).numel())
            .map(|_| if rng.random::<f32>() < rate { 0.0 } else { keep })
            .collect();
        let x = self.value(input);
        let out = Tensor::from_parts_unchecked(
            x.shape().to_vec(),
            x.data().iter().zip(&mask).map(|(a, m)| a * m).collect(),
        );
        self.push(out, Op::Dropout { input, mask }, "dropout")
    }

    pub fn upsample_nearest(&mut self, input: Var, factor: usize) -> Result<Var> {
        let out = kernels::upsample_nearest(self.value(input), factor)?;
        self.push(out, Op::Upsample { input, factor }, "upsample")
    }

    pub fn avg_pool(&mut self, input: Var, size: usize) -> Result<Var> {
        let out = kernels::avg_pool(self.value(input), size)?;
        self.push(out, Op::AvgPool { input, size }, "avg_pool")
    }

    /// Concatenates two `[N, C*, H, W]` tensors along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let [na, ca, ha, wa] = self.value(a).dims4()?;
        let [nb, cb, hb, wb] = self.value(b).dims4()?;
        if (na, ha, wa) != (nb, hb, wb) {
            return Err(Error::Shape("concat of mismatched batch/spatial dims".into()));
        }
        let plane = ha * wa;
        let mut out = Vec::with_capacity(na * (ca + cb) * plane);
        for n in 0..na {
            out.extend_from_slice(&self.value(a).data()[n * ca * plane..(n + 1) * ca * plane]);
            out.extend_from_slice(&self.value(b).data()[n * cb * plane..(n + 1) * cb * plane]);
        }
        self.push(
            Tensor::from_parts_unchecked(vec![na, ca + cb, ha, wa], out),
            Op::Concat { a, b },
            "concat",
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = elementwise(self.value(a), self.value(b), "add", |x, y| x + y)?;
        self.push(out, Op::Add { a, b }, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = elementwise(self.value(a), self.value(b), "sub", |x, y| x - y)?;
        self.push(out, Op::Sub { a, b }, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = elementwise(self.value(a), self.value(b), "mul", |x, y| x * y)?;
        self.push(out, Op::Mul { a, b }, "mul")
    }

    /// Element-wise product with a constant tensor of the same shape.
    pub fn mul_const(&mut self, input: Var, factor: &Tensor) -> Result<Var> {
        let out = elementwise(self.value(input), factor, "mul_const", |x, y| x * y)?;
        self.push(out, Op::MulConst { input, factor: factor.clone() }, "mul_const")
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, input: Var, scale: f32, shift: f32) -> Result<Var> {
        let out = self.value(input).map(|x| scale * x + shift)?;
        self.push(out, Op::Affine { input, scale }, "affine")
    }

    pub fn clamp(&mut self, input: Var, lo: f32, hi: f32) -> Result<Var> {
        let out = self.value(input).map(|x| x.clamp(lo, hi))?;
        self.push(out, Op::Clamp { input, lo, hi }, "clamp")
    }

    /// Natural logarithm; the input must be strictly positive.
    pub fn ln(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        if x.data().iter().any(|&v| v <= 0.0) {
            return Err(Error::NonFinite("ln of non-positive value".into()));
        }
        let out = x.map(f32::ln)?;
        self.push(out, Op::Ln { input }, "ln")
    }

    /// Sum of all elements as a rank-0 tensor (accumulated in `f64`).
    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let s = self.value(input).sum() as f32;
        self.push(Tensor::from_parts_unchecked(vec![], vec![s]), Op::Sum { input }, "sum")
    }

    /// Clamps probabilities to `[PROB_EPS, 1 - PROB_EPS]`.
    pub fn clamp_prob(&mut self, input: Var) -> Result<Var> {
        self.clamp(input, PROB_EPS, 1.0 - PROB_EPS)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward() needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                grads[idx] = Some(g);
                continue;
            }
            let send = |grads: &mut Vec<Option<Vec<f32>>>, v: Var, contrib: Vec<f32>| {
                if !self.nodes[v.0].requires_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.iter_mut().zip(contrib).for_each(|(a, c)| *a += c),
                    slot @ None => *slot = Some(contrib),
                }
            };
            match &node.op {
                Op::Leaf => {}
                Op::Conv2d { input, kernel, geom } => {
                    if self.rg(*input) {
                        let gi = kernels::conv2d_backward_input(&g, self.value(*kernel), geom);
                        send(&mut grads, *input, gi);
                    }
                    if self.rg(*kernel) {
                        let gk = kernels::conv2d_backward_kernel(&g, self.value(*input), geom);
                        send(&mut grads, *kernel, gk);
                    }
                }
                Op::BiasAdd { input, bias } => {
                    let [_, c, h, w] = self.value(*input).dims4()?;
                    if self.rg(*bias) {
                        let mut gb = vec![0f64; c];
                        for (i, plane) in g.chunks_exact(h * w).enumerate() {
                            gb[i % c] += plane.iter().map(|&v| v as f64).sum::<f64>();
                        }
                        send(&mut grads, *bias, gb.into_iter().map(|v| v as f32).collect());
                    }
                    send(&mut grads, *input, g.clone());
                }
                Op::Silu { input } => {
                    let x = self.value(*input).data();
                    let gi = g
                        .iter()
                        .zip(x)
                        .map(|(&gv, &xv)| {
                            let s = sigmoid(xv);
                            gv * s * (1.0 + xv * (1.0 - s))
                        })
                        .collect();
                    send(&mut grads, *input, gi);
                }
                Op::Relu { input } => {
                    let x = self.value(*input).data();
                    let gi = g
                        .iter()
                        .zip(x)
                        .map(|(&gv, &xv)| if xv > 0.0 { gv } else { 0.0 })
                        .collect();
                    send(&mut grads, *input, gi);
                }
                Op::Sigmoid { input } => {
                    let y = node.value.data();
                    let gi = g.iter().zip(y).map(|(&gv, &yv)| gv * yv * (1.0 - yv)).collect();
                    send(&mut grads, *input, gi);
                }
                Op::Dropout { input, mask } => {
                    let gi = g.iter().zip(mask).map(|(a, m)| a * m).collect();
                    send(&mut grads, *input, gi);
                }
                Op::Upsample { input, factor } => {
                    let gi = kernels::upsample_nearest_backward(&g, self.value(*input).shape(), *factor);
                    send(&mut grads, *input, gi);
                }
                Op::AvgPool { input, size } => {
                    let gi = kernels::avg_pool_backward(&g, self.value(*input).shape(), *size);
                    send(&mut grads, *input, gi);
                }
                Op::Concat { a, b } => {
                    let [n, ca, h, w] = self.value(*a).dims4()?;
                    let cb = self.value(*b).shape()[1];
                    let plane = h * w;
                    let mut ga = Vec::with_capacity(n * ca * plane);
                    let mut gb = Vec::with_capacity(n * cb * plane);
                    for chunk in g.chunks_exact((ca + cb) * plane) {
                        ga.extend_from_slice(&chunk[..ca * plane]);
                        gb.extend_from_slice(&chunk[ca * plane..]);
                    }
                    send(&mut grads, *a, ga);
                    send(&mut grads, *b, gb);
                }
                Op::Add { a, b } => {
                    send(&mut grads, *a, g.clone());
                    send(&mut grads, *b, g.clone());
                }
                Op::Sub { a, b } => {
                    send(&mut grads, *b, g.iter().map(|v| -v).collect());
                    send(&mut grads, *a, g.clone());
                }
                Op::Mul { a, b } => {
                    let av = self.value(*a).data();
                    let bv = self.value(*b).data();
                    send(&mut grads, *a, g.iter().zip(bv).map(|(x, y)| x * y).collect());
                    send(&mut grads, *b, g.iter().zip(av).map(|(x, y)| x * y).collect());
                }
                Op::MulConst { input, factor } => {
                    let gi = g.iter().zip(factor.data()).map(|(x, y)| x * y).collect();
                    send(&mut grads, *input, gi);
                }
                Op::Affine { input, scale } => {
                    send(&mut grads, *input, g.iter().map(|v| v * scale).collect());
                }
                Op::Clamp { input, lo, hi } => {
                    let x = self.value(*input).data();
                    let gi = g
                        .iter()
                        .zip(x)
                        .map(|(&gv, &xv)| if xv >= *lo && xv <= *hi { gv } else { 0.0 })
                        .collect();
                    send(&mut grads, *input, gi);
                }
                Op::Ln { input } => {
                    let x = self.value(*input).data();
                    send(&mut grads, *input, g.iter().zip(x).map(|(gv, xv)| gv / xv).collect());
                }
                Op::Sum { input } => {
                    let n = self.value(*input).numel();
                    send(&mut grads, *input, vec![g[0]; n]);
                }
            }
            grads[idx] = Some(g);
        }
        for (i, g) in grads.iter_mut().enumerate() {
            if !self.nodes[i].requires_grad {
                *g = None;
            } else if let Some(g) = g {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(format!("gradient of node {i}")));
                }
            }
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }
}
