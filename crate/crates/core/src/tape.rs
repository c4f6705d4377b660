//! Reverse-mode automatic differentiation over an append-only tape.
//!
//! Every op method evaluates eagerly, appends a node, and returns a [`Var`]
//! handle. Nodes only reference earlier nodes, so reverse index order is a
//! valid topological order for [`Tape::backward`].

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::ops::{self, Activation, Binary, ConvGeometry, Padding, PoolMode, PoolScope};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Constant,
    Variable,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        geometry: ConvGeometry,
    },
    Pool {
        input: Var,
        mode: PoolMode,
        scope: PoolScope,
        argmax: Option<Vec<usize>>,
    },
    Dense {
        input: Var,
        weights: Var,
        bias: Option<Var>,
    },
    Activation {
        input: Var,
        kind: Activation,
    },
    Softmax {
        input: Var,
    },
    Binary {
        a: Var,
        b: Var,
        op: Binary,
    },
    Concat {
        inputs: Vec<Var>,
    },
    Reshape {
        input: Var,
    },
    Upsample {
        input: Var,
        factor: usize,
    },
    Sum {
        input: Var,
    },
    CrossEntropy {
        logits: Var,
        probs: Tensor,
        targets: Arc<[u8]>,
        ignore: Option<u8>,
        count: usize,
        /// The mean before rounding to the stored `f32` value.
        exact: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], keyed by variable handle.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of a variable leaf. Variables unreachable from the loss
    /// report zeros; constants and intermediates report `None`.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
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

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    /// Value of a scalar node in `f64`. Losses reduced in `f64` report the
    /// unrounded mean; other nodes widen their `f32` value.
    pub fn scalar_f64(&self, var: Var) -> Result<f64> {
        self.check(var)?;
        match &self.nodes[var.0].op {
            Op::CrossEntropy { exact, .. } => Ok(*exact),
            _ => Ok(self.value(var).item()? as f64),
        }
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_unchecked(value, Op::Constant, false)
    }

    /// A leaf whose gradient is reported by [`Tape::backward`].
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push_unchecked(value, Op::Variable, true)
    }

    fn push_unchecked(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite {
                op: name.to_string(),
            });
        }
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        Ok(self.push_unchecked(value, op, needs_grad))
    }

    fn check(&self, var: Var) -> Result<()> {
        if var.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(Error::contract(
                "tape",
                format!("handle {} does not belong to this tape", var.0),
            ))
        }
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        padding: Padding,
    ) -> Result<Var> {
        for v in [Some(input), Some(kernel), bias].into_iter().flatten() {
            self.check(v)?;
        }
        let (out, geometry) = ops::conv2d(
            self.value(input),
            self.value(kernel),
            bias.map(|b| self.value(b)),
            stride,
            padding,
        )?;
        let mut inputs = vec![input, kernel];
        inputs.extend(bias);
        self.push(
            "conv2d",
            out,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geometry,
            },
            &inputs,
        )
    }

    pub fn pool2d(&mut self, input: Var, mode: PoolMode, scope: PoolScope) -> Result<Var> {
        self.check(input)?;
        let pooled = ops::pool2d(self.value(input), mode, scope)?;
        self.push(
            "pool2d",
            pooled.output,
            Op::Pool {
                input,
                mode,
                scope,
                argmax: pooled.argmax,
            },
            &[input],
        )
    }

    pub fn dense(&mut self, input: Var, weights: Var, bias: Option<Var>) -> Result<Var> {
        for v in [Some(input), Some(weights), bias].into_iter().flatten() {
            self.check(v)?;
        }
        let out = ops::dense(
            self.value(input),
            self.value(weights),
            bias.map(|b| self.value(b)),
        )?;
        let mut inputs = vec![input, weights];
        inputs.extend(bias);
        self.push(
            "dense",
            out,
            Op::Dense {
                input,
                weights,
                bias,
            },
            &inputs,
        )
    }

    pub fn activation(&mut self, input: Var, kind: Activation) -> Result<Var> {
        self.check(input)?;
        let out = ops::activation(self.value(input), kind);
        self.push("activation", out, Op::Activation { input, kind }, &[input])
    }

    pub fn sigmoid(&mut self, input: Var) -> Result<Var> {
        self.activation(input, Activation::Sigmoid)
    }

    /// Sigmoid confined to the open interval (0, 1).
    pub fn gate_sigmoid(&mut self, input: Var) -> Result<Var> {
        self.activation(input, Activation::GateSigmoid)
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        self.activation(input, Activation::Relu)
    }

    pub fn softmax_channels(&mut self, input: Var) -> Result<Var> {
        self.check(input)?;
        let out = ops::softmax_channels(self.value(input))?;
        self.push("softmax_channels", out, Op::Softmax { input }, &[input])
    }

    /// Elementwise sum with same-rank broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Add)
    }

    /// Elementwise product with same-rank broadcasting.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Mul)
    }

    fn binary(&mut self, a: Var, b: Var, op: Binary) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let out = ops::binary(self.value(a), self.value(b), op)?;
        self.push("binary", out, Op::Binary { a, b, op }, &[a, b])
    }

    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var> {
        for &v in inputs {
            self.check(v)?;
        }
        let parts: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
        let out = ops::concat_channels(&parts)?;
        self.push(
            "concat",
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
            },
            inputs,
        )
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        self.check(input)?;
        let out = self.value(input).reshape(shape)?;
        self.push("reshape", out, Op::Reshape { input }, &[input])
    }

    pub fn upsample_nearest(&mut self, input: Var, factor: usize) -> Result<Var> {
        self.check(input)?;
        let out = ops::upsample_nearest(self.value(input), factor)?;
        self.push("upsample", out, Op::Upsample { input, factor }, &[input])
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        self.check(input)?;
        let out = ops::sum(self.value(input));
        self.push("sum", out, Op::Sum { input }, &[input])
    }

    /// Mean pixelwise cross-entropy; `targets` holds N·H·W class indices.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[u8],
        ignore: Option<u8>,
    ) -> Result<Var> {
        self.check(logits)?;
        let (loss, probs, count) = ops::cross_entropy(self.value(logits), targets, ignore)?;
        self.push(
            "cross_entropy",
            Tensor::scalar(loss as f32),
            Op::CrossEntropy {
                logits,
                probs,
                targets: targets.into(),
                ignore,
                count,
                exact: loss,
            },
            &[logits],
        )
    }

    /// Hash of every piecewise branch taken so far: max-pool argmax choices
    /// and relu input signs. Two evaluations with equal signatures lie in the
    /// same smooth region of every non-differentiable op.
    pub fn branch_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Pool {
                    argmax: Some(idx), ..
                } => idx.hash(&mut h),
                Op::Activation {
                    input,
                    kind: Activation::Relu,
                } => {
                    for &v in self.value(*input).data() {
                        (v > 0.0).hash(&mut h);
                    }
                }
                _ => {}
            }
        }
        h.finish()
    }

    /// Back-propagates from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        self.check(loss)?;
        let value = self.value(loss);
        if !value.is_scalar() {
            return Err(Error::contract(
                "backward",
                format!("loss must be a scalar, got shape {:?}", value.shape()),
            ));
        }
        let seed = Tensor::new(value.shape(), vec![1.0]).expect("scalar");
        self.backward_with(loss, seed)
    }

    /// Back-propagates an arbitrary upstream gradient `seed` from `output`.
    pub fn backward_with(&self, output: Var, seed: Tensor) -> Result<Gradients> {
        self.check(output)?;
        if seed.shape() != self.value(output).shape() {
            return Err(Error::contract(
                "backward",
                format!(
                    "seed shape {:?} differs from output shape {:?}",
                    seed.shape(),
                    self.value(output).shape()
                ),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(seed);

        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Variable | Op::Constant) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            for (var, contribution) in self.vjp(node, &g) {
                if !self.nodes[var.0].needs_grad {
                    continue;
                }
                match &mut grads[var.0] {
                    Some(acc) => {
                        for (a, c) in acc.data_mut().iter_mut().zip(contribution.data()) {
                            *a += c;
                        }
                    }
                    slot @ None => *slot = Some(contribution),
                }
            }
        }

        for (i, node) in self.nodes.iter().enumerate() {
            match node.op {
                Op::Variable => {
                    if grads[i].is_none() {
                        grads[i] = Some(Tensor::zeros(node.value.shape()));
                    }
                }
                _ => grads[i] = None,
            }
        }
        Ok(Gradients { grads })
    }

    fn vjp(&self, node: &Node, g: &Tensor) -> Vec<(Var, Tensor)> {
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Constant | Op::Variable => Vec::new(),
            Op::Conv2d {
                input,
                kernel,
                bias,
                geometry,
            } => {
                let (gi, gk, gb) = ops::conv2d_backward(
                    geometry,
                    val(*input),
                    val(*kernel),
                    g,
                    wants(*input),
                    bias.is_some(),
                );
                let mut out = vec![(*kernel, gk)];
                out.extend(gi.map(|gi| (*input, gi)));
                if let (Some(b), Some(gb)) = (bias, gb) {
                    out.push((*b, gb));
                }
                out
            }
            Op::Pool {
                input,
                mode,
                scope,
                argmax,
            } => {
                vec![(
                    *input,
                    ops::pool2d_backward(val(*input).shape(), *mode, *scope, argmax.as_deref(), g),
                )]
            }
            Op::Dense {
                input,
                weights,
                bias,
            } => {
                let (gi, gw, gb) =
                    ops::dense_backward(val(*input), val(*weights), g, bias.is_some());
                let mut out = vec![(*input, gi), (*weights, gw)];
                if let (Some(b), Some(gb)) = (bias, gb) {
                    out.push((*b, gb));
                }
                out
            }
            Op::Activation { input, kind } => {
                vec![(
                    *input,
                    ops::activation_backward(*kind, val(*input), &node.value, g),
                )]
            }
            Op::Softmax { input } => vec![(*input, ops::softmax_channels_backward(&node.value, g))],
            Op::Binary { a, b, op } => {
                if !wants(*a) && !wants(*b) {
                    return Vec::new();
                }
                let (ga, gb) = ops::binary_backward(val(*a), val(*b), *op, g);
                vec![(*a, ga), (*b, gb)]
            }
            Op::Concat { inputs } => {
                let channels: Vec<usize> = inputs.iter().map(|&v| val(v).shape()[1]).collect();
                inputs
                    .iter()
                    .copied()
                    .zip(ops::concat_channels_backward(&channels, g))
                    .collect()
            }
            Op::Reshape { input } => {
                vec![(
                    *input,
                    g.reshape(val(*input).shape()).expect("reshape grad"),
                )]
            }
            Op::Upsample { input, factor } => {
                vec![(
                    *input,
                    ops::upsample_nearest_backward(val(*input).shape(), *factor, g),
                )]
            }
            Op::Sum { input } => vec![(*input, Tensor::full(val(*input).shape(), g.data()[0]))],
            Op::CrossEntropy {
                logits,
                probs,
                targets,
                ignore,
                count,
                ..
            } => {
                vec![(
                    *logits,
                    ops::cross_entropy_backward(probs, targets, *ignore, *count, g.data()[0]),
                )]
            }
        }
    }
}
