//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation in the order it is applied, so the
//! node list is already topologically sorted. [`Graph::backward`] walks it in
//! reverse from a scalar root and accumulates one gradient per node.

use crate::loss::clamp_probability;
use crate::tensor::{Tensor, TensorError};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    /// Normalizes along the last axis.
    Softmax,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Affine { x: Var, w: Var, b: Var },
    Act(Var, Activation),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Abs(Var),
    Square(Var),
    Scale(Var, f64),
    Sum(Var),
    WeightedBce {
        p: Var,
        targets: Vec<f64>,
        w_pos: f64,
        w_neg: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Per-node gradients produced by one backward pass.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_rows(t: &Tensor) -> Tensor {
    let cols = *t.shape().last().unwrap_or(&1);
    let mut out = t.clone();
    for row in out.data_mut().chunks_mut(cols) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    out
}

/// Forward evaluation of an activation outside any graph.
pub fn activate(t: &Tensor, kind: Activation) -> Result<Tensor, TensorError> {
    if !t.is_finite() {
        return Err(TensorError::NonFinite { op: "activation" });
    }
    Ok(match kind {
        Activation::Relu => t.map(|v| v.max(0.0)),
        Activation::Sigmoid => t.map(sigmoid),
        Activation::Softmax => softmax_rows(t),
    })
}

/// Forward evaluation of `x * w + b` outside any graph.
pub fn affine_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
    let (_, d_in) = x.matrix_dims("affine")?;
    let (w_in, d_out) = w.matrix_dims("affine")?;
    if d_in != w_in || b.len() != d_out {
        return Err(TensorError::ShapeMismatch {
            op: "affine",
            left: x.shape().to_vec(),
            right: w.shape().to_vec(),
        });
    }
    let mut out = x.matmul(w)?;
    for row in out.data_mut().chunks_mut(d_out) {
        for (o, &bias) in row.iter_mut().zip(b.data()) {
            *o += bias;
        }
    }
    Ok(out)
}

fn weighted_bce_value(p: &[f64], targets: &[f64], w_pos: f64, w_neg: f64) -> f64 {
    p.iter()
        .zip(targets)
        .map(|(&p, &y)| {
            let p = clamp_probability(p);
            -(w_pos * y * p.ln() + w_neg * (1.0 - y) * (1.0 - p).ln())
        })
        .sum()
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Constant leaf.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var, TensorError> {
        let out = affine_forward(self.value(x), self.value(w), self.value(b))?;
        let rg = self.needs(&[x, w, b]);
        Ok(self.push(out, Op::Affine { x, w, b }, rg))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var, TensorError> {
        let out = activate(self.value(x), kind)?;
        let rg = self.needs(&[x]);
        Ok(self.push(out, Op::Act(x, kind), rg))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, TensorError> {
        self.activation(x, Activation::Relu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var, TensorError> {
        self.activation(x, Activation::Sigmoid)
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var, TensorError> {
        self.activation(x, Activation::Softmax)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let out = self.value(a).zip_map(self.value(b), "add", |x, y| x + y)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let out = self.value(a).zip_map(self.value(b), "sub", |x, y| x - y)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let out = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::abs);
        let rg = self.needs(&[a]);
        self.push(out, Op::Abs(a), rg)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v * v);
        let rg = self.needs(&[a]);
        self.push(out, Op::Square(a), rg)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a).map(|v| v * factor);
        let rg = self.needs(&[a]);
        self.push(out, Op::Scale(a, factor), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        let rg = self.needs(&[a]);
        self.push(out, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Summed binary cross-entropy with separate weights on the positive and
    /// negative terms: `-sum(w_pos * y * ln p + w_neg * (1 - y) * ln(1 - p))`.
    ///
    /// Probabilities are clamped before the log; the clamp has zero slope
    /// outside its range.
    pub fn weighted_bce(
        &mut self,
        p: Var,
        targets: &[f64],
        w_pos: f64,
        w_neg: f64,
    ) -> Result<Var, TensorError> {
        let pv = self.value(p);
        if pv.len() != targets.len() {
            return Err(TensorError::ShapeMismatch {
                op: "weighted_bce",
                left: pv.shape().to_vec(),
                right: vec![targets.len()],
            });
        }
        let value = weighted_bce_value(pv.data(), targets, w_pos, w_neg);
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: "weighted_bce" });
        }
        let rg = self.needs(&[p]);
        Ok(self.push(
            Tensor::scalar(value),
            Op::WeightedBce {
                p,
                targets: targets.to_vec(),
                w_pos,
                w_neg,
            },
            rg,
        ))
    }

    /// Gradients of the scalar `root` with respect to every node that
    /// requires them.
    pub fn backward(&self, root: Var) -> Result<Gradients, TensorError> {
        let root_value = self.value(root);
        if !root_value.is_scalar() {
            return Err(TensorError::NonScalarRoot(root_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::filled(root_value.shape().to_vec(), 1.0));

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let mut contributions: Vec<(Var, Tensor)> = Vec::with_capacity(3);
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::Affine { x, w, b } => {
                    let xv = self.value(*x);
                    let wv = self.value(*w);
                    if self.nodes[x.0].requires_grad {
                        contributions.push((*x, g.matmul(&wv.transpose()?)?));
                    }
                    if self.nodes[w.0].requires_grad {
                        contributions.push((*w, xv.transpose()?.matmul(&g)?));
                    }
                    if self.nodes[b.0].requires_grad {
                        let (_, cols) = g.matrix_dims("affine backward")?;
                        let mut gb = vec![0.0; cols];
                        for row in g.data().chunks(cols) {
                            for (acc, v) in gb.iter_mut().zip(row) {
                                *acc += v;
                            }
                        }
                        let shape = self.value(*b).shape().to_vec();
                        contributions.push((*b, Tensor::new(shape, gb)?));
                    }
                }
                Op::Act(x, kind) => {
                    let y = &node.value;
                    let gx = match kind {
                        Activation::Relu => {
                            g.zip_map(self.value(*x), "relu", |g, x| if x > 0.0 { g } else { 0.0 })?
                        }
                        Activation::Sigmoid => g.zip_map(y, "sigmoid", |g, y| g * y * (1.0 - y))?,
                        Activation::Softmax => {
                            let cols = *y.shape().last().unwrap_or(&1);
                            let mut out = g.clone();
                            for (o, yr) in out.data_mut().chunks_mut(cols).zip(y.data().chunks(cols)) {
                                let dot: f64 = o.iter().zip(yr).map(|(a, b)| a * b).sum();
                                for (ov, yv) in o.iter_mut().zip(yr) {
                                    *ov = yv * (*ov - dot);
                                }
                            }
                            out
                        }
                    };
                    contributions.push((*x, gx));
                }
                Op::Add(a, b) => {
                    contributions.push((*a, g.clone()));
                    contributions.push((*b, g));
                }
                Op::Sub(a, b) => {
                    contributions.push((*b, g.map(|v| -v)));
                    contributions.push((*a, g));
                }
                Op::Mul(a, b) => {
                    contributions.push((*a, g.zip_map(self.value(*b), "mul", |g, y| g * y)?));
                    contributions.push((*b, g.zip_map(self.value(*a), "mul", |g, x| g * x)?));
                }
                Op::Abs(a) => {
                    contributions.push((*a, g.zip_map(self.value(*a), "abs", |g, x| g * sign(x))?));
                }
                Op::Square(a) => {
                    contributions.push((*a, g.zip_map(self.value(*a), "square", |g, x| 2.0 * g * x)?));
                }
                Op::Scale(a, f) => contributions.push((*a, g.map(|v| v * f))),
                Op::Sum(a) => {
                    let upstream = g.data()[0];
                    let shape = self.value(*a).shape().to_vec();
                    contributions.push((*a, Tensor::filled(shape, upstream)));
                }
                Op::WeightedBce {
                    p,
                    targets,
                    w_pos,
                    w_neg,
                } => {
                    let upstream = g.data()[0];
                    let pv = self.value(*p);
                    let data = pv
                        .data()
                        .iter()
                        .zip(targets)
                        .map(|(&p, &y)| {
                            if clamp_probability(p) != p {
                                return 0.0;
                            }
                            upstream * (-w_pos * y / p + w_neg * (1.0 - y) / (1.0 - p))
                        })
                        .collect();
                    contributions.push((*p, Tensor::new(pv.shape().to_vec(), data)?));
                }
            }
            for (target, grad) in contributions {
                if !self.nodes[target.0].requires_grad {
                    continue;
                }
                match &mut grads[target.0] {
                    Some(existing) => existing.add_assign(&grad),
                    slot @ None => *slot = Some(grad),
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}
