//! Reverse-mode autodiff over whole-tensor operations.
//!
//! A [`Tape`] records each forward op together with its output value.
//! [`Tape::backward`] walks the record in reverse, producing a gradient for
//! every node and adding the gradients of parameter leaves into a
//! [`ParamStore`].

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::ops::{self, ConvSpec};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Input,
    Param(String),
    Linear { x: Var, w: Var, b: Option<Var> },
    Conv2d { x: Var, w: Var, b: Option<Var>, spec: ConvSpec },
    LayerNorm { x: Var, gamma: Var, beta: Var, eps: f64 },
    Gelu(Var),
    Softmax(Var),
    AvgPool { x: Var, r: usize },
    Smooth3(Var),
    Upsample(Var),
    Concat(Vec<Var>),
    Add(Var, Var),
    Mul(Var, Var),
    Scores { q: Var, k: Var, heads: usize, scale: f64 },
    Apply { a: Var, v: Var },
    CrossEntropy { logits: Var, labels: Vec<usize> },
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
}

/// Per-node gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient reaching `var`, if any path connects it to the output.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }
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

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Constant leaf; receives a gradient but is not written back anywhere.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Input)
    }

    /// Leaf bound to a named parameter. Repeated requests for the same name
    /// return the same node.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let value = store.value(name)?.clone();
        let v = self.push(value, Op::Param(name.to_string()));
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let value = ops::linear(self.value(x), self.value(w), b.map(|b| self.value(b)))?;
        Ok(self.push(value, Op::Linear { x, w, b }))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let value = ops::conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)), spec)?;
        Ok(self.push(value, Op::Conv2d { x, w, b, spec }))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let value = ops::layer_norm(self.value(x), self.value(gamma), self.value(beta), eps)?;
        Ok(self.push(value, Op::LayerNorm { x, gamma, beta, eps }))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let value = ops::gelu(self.value(x));
        self.push(value, Op::Gelu(x))
    }

    pub fn softmax_lastdim(&mut self, x: Var) -> Var {
        let value = ops::softmax_lastdim(self.value(x));
        self.push(value, Op::Softmax(x))
    }

    pub fn avg_pool(&mut self, x: Var, r: usize) -> Result<Var> {
        let value = ops::avg_pool(self.value(x), r)?;
        Ok(self.push(value, Op::AvgPool { x, r }))
    }

    pub fn smooth3(&mut self, x: Var) -> Var {
        let value = ops::smooth3(self.value(x));
        self.push(value, Op::Smooth3(x))
    }

    pub fn upsample_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let value = ops::upsample_bilinear(self.value(x), out_h, out_w)?;
        Ok(self.push(value, Op::Upsample(x)))
    }

    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let parts: Vec<&Tensor> = xs.iter().map(|&v| self.value(v)).collect();
        let value = ops::concat_channels(&parts)?;
        Ok(self.push(value, Op::Concat(xs.to_vec())))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = ops::add(self.value(a), self.value(b))?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = ops::mul(self.value(a), self.value(b))?;
        Ok(self.push(value, Op::Mul(a, b)))
    }

    pub fn attention_scores(&mut self, q: Var, k: Var, heads: usize, scale: f64) -> Result<Var> {
        let value = ops::attention_scores(self.value(q), self.value(k), heads, scale)?;
        Ok(self.push(value, Op::Scores { q, k, heads, scale }))
    }

    pub fn attention_apply(&mut self, a: Var, v: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let value = ops::attention_apply(self.value(a), self.value(v), out_h, out_w)?;
        Ok(self.push(value, Op::Apply { a, v }))
    }

    /// Mean per-pixel cross-entropy; produces a scalar node.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let loss = ops::cross_entropy(self.value(logits), labels)?;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
            },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).sum();
        self.push(Tensor::scalar(total), Op::Sum(x))
    }

    /// `Σ x ⊙ weights` with `weights` held constant.
    pub fn weighted_sum(&mut self, x: Var, weights: Tensor) -> Result<Var> {
        let w = self.input(weights);
        let prod = self.mul(x, w)?;
        Ok(self.sum(prod))
    }

    /// Backward from a scalar output with seed 1.
    pub fn backward_scalar(&self, output: Var, store: &mut ParamStore) -> Result<Gradients> {
        self.backward(output, &Tensor::scalar(1.0), store)
    }

    /// Reverse pass seeded with `seed` at `output`. Parameter-leaf gradients
    /// are added into `store`; existing grad contents are kept.
    pub fn backward(&self, output: Var, seed: &Tensor, store: &mut ParamStore) -> Result<Gradients> {
        if output.0 >= self.nodes.len() {
            return Err(Error::State(format!(
                "backward from node {} but the tape has recorded {} nodes",
                output.0,
                self.nodes.len()
            )));
        }
        if seed.shape() != self.value(output).shape() {
            return Err(Error::State(format!(
                "seed {} does not match output {}",
                seed.shape(),
                self.value(output).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        grads[output.0] = Some(seed.clone());

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input => {}
                Op::Param(name) => store.accumulate_grad(name, &g)?,
                Op::Linear { x, w, b } => {
                    let (gx, gw, gb) = ops::linear_backward(self.value(*x), self.value(*w), &g);
                    accumulate(&mut grads, *x, gx)?;
                    accumulate(&mut grads, *w, gw)?;
                    if let Some(b) = b {
                        accumulate(&mut grads, *b, gb)?;
                    }
                }
                Op::Conv2d { x, w, b, spec } => {
                    let (gx, gw, gb) =
                        ops::conv2d_backward(self.value(*x), self.value(*w), *spec, &g)?;
                    accumulate(&mut grads, *x, gx)?;
                    accumulate(&mut grads, *w, gw)?;
                    if let Some(b) = b {
                        accumulate(&mut grads, *b, gb)?;
                    }
                }
                Op::LayerNorm { x, gamma, beta, eps } => {
                    let (gx, gg, gb) =
                        ops::layer_norm_backward(self.value(*x), self.value(*gamma), *eps, &g);
                    accumulate(&mut grads, *x, gx)?;
                    accumulate(&mut grads, *gamma, gg)?;
                    accumulate(&mut grads, *beta, gb)?;
                }
                Op::Gelu(x) => {
                    let gx = ops::gelu_backward(self.value(*x), &g);
                    accumulate(&mut grads, *x, gx)?;
                }
                Op::Softmax(x) => {
                    let gx = ops::softmax_lastdim_backward(&node.value, &g);
                    accumulate(&mut grads, *x, gx)?;
                }
                Op::AvgPool { x, r } => {
                    let gx = ops::avg_pool_backward(self.value(*x).shape(), *r, &g);
                    accumulate(&mut grads, *x, gx)?;
                }
                Op::Smooth3(x) => accumulate(&mut grads, *x, ops::smooth3_backward(&g))?,
                Op::Upsample(x) => {
                    let gx = ops::upsample_bilinear_backward(self.value(*x).shape(), &g);
                    accumulate(&mut grads, *x, gx)?;
                }
                Op::Concat(xs) => {
                    let parts: Vec<usize> = xs.iter().map(|&v| self.value(v).shape().c).collect();
                    for (v, gx) in xs.iter().zip(ops::concat_channels_backward(&parts, &g)?) {
                        accumulate(&mut grads, *v, gx)?;
                    }
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone())?;
                    accumulate(&mut grads, *b, g.clone())?;
                }
                Op::Mul(a, b) => {
                    let ga = ops::mul(&g, self.value(*b))?;
                    let gb = ops::mul(&g, self.value(*a))?;
                    accumulate(&mut grads, *a, ga)?;
                    accumulate(&mut grads, *b, gb)?;
                }
                Op::Scores { q, k, heads, scale } => {
                    let (gq, gk) = ops::attention_scores_backward(
                        self.value(*q),
                        self.value(*k),
                        *heads,
                        *scale,
                        &g,
                    );
                    accumulate(&mut grads, *q, gq)?;
                    accumulate(&mut grads, *k, gk)?;
                }
                Op::Apply { a, v } => {
                    let (ga, gv) = ops::attention_apply_backward(self.value(*a), self.value(*v), &g);
                    accumulate(&mut grads, *a, ga)?;
                    accumulate(&mut grads, *v, gv)?;
                }
                Op::CrossEntropy { logits, labels } => {
                    let gx = ops::cross_entropy_backward(self.value(*logits), labels, g.item()?);
                    accumulate(&mut grads, *logits, gx)?;
                }
                Op::Sum(x) => {
                    let gx = Tensor::full(self.value(*x).shape(), g.item()?);
                    accumulate(&mut grads, *x, gx)?;
                }
            }
            grads[idx] = Some(g);
        }
        grads.resize(self.nodes.len(), None);
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) -> Result<()> {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

