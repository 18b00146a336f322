//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Each primitive executed through a [`Tape`] appends one node holding its
//! output and the indices of its inputs. [`Tape::backward`] walks the nodes
//! once, in reverse execution order, and leaves a gradient on every leaf
//! created with [`Tape::param`].

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::ops::{self, BatchStats, SignConvention};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a particular tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d {
        x: usize,
        w: usize,
        stride: usize,
    },
    Depthwise {
        x: usize,
        w: usize,
        stride: usize,
    },
    BatchNormTrain {
        x: usize,
        gamma: usize,
        beta: usize,
        stats: BatchStats<T>,
    },
    BatchNormEval {
        x: usize,
        gamma: usize,
        beta: usize,
        mean: Vec<T>,
        inv_std: Vec<T>,
    },
    Relu6 {
        x: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    Slice {
        x: usize,
        start: usize,
    },
    Concat {
        parts: Vec<usize>,
    },
    Dfwt {
        x: usize,
        depth: u32,
        sign: SignConvention,
    },
    AvgPool {
        x: usize,
    },
    SoftmaxCe {
        logits: usize,
        labels: Vec<usize>,
        probs: Tensor<T>,
    },
    Sum {
        x: usize,
    },
    Dot {
        x: usize,
        weights: Tensor<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Ordered record of executed primitives.
#[derive(Debug)]
pub struct Tape<T> {
    id: u64,
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::ForeignVar);
        }
        Ok(v.index)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[usize]) -> Var {
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    /// Constant input; receives no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, &[])
    }

    /// Trainable leaf; receives a gradient on [`Tape::backward`].
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        let v = self.push(value, Op::Leaf, &[]);
        self.nodes[v.index].requires_grad = true;
        v
    }

    pub fn value(&self, v: Var) -> Result<&Tensor<T>> {
        Ok(&self.nodes[self.idx(v)?].value)
    }

    /// Gradient left on a parameter leaf by the last backward pass.
    pub fn grad(&self, v: Var) -> Result<Option<&[T]>> {
        Ok(self.nodes[self.idx(v)?].value.grad())
    }

    pub fn take_grad(&mut self, v: Var) -> Result<Option<Tensor<T>>> {
        let i = self.idx(v)?;
        let node = &mut self.nodes[i];
        let shape = node.value.shape();
        Ok(node
            .value
            .take_grad()
            .map(|g| Tensor::from_vec(shape, g).expect("grad has value shape")))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize) -> Result<Var> {
        let (xi, wi) = (self.idx(x)?, self.idx(w)?);
        let y = ops::conv2d_forward(&self.nodes[xi].value, &self.nodes[wi].value, stride)?;
        Ok(self.push(
            y,
            Op::Conv2d {
                x: xi,
                w: wi,
                stride,
            },
            &[xi, wi],
        ))
    }

    pub fn depthwise_conv2d(&mut self, x: Var, w: Var, stride: usize) -> Result<Var> {
        let (xi, wi) = (self.idx(x)?, self.idx(w)?);
        let y = ops::depthwise_conv2d(&self.nodes[xi].value, &self.nodes[wi].value, stride)?;
        Ok(self.push(
            y,
            Op::Depthwise {
                x: xi,
                w: wi,
                stride,
            },
            &[xi, wi],
        ))
    }

    /// Batch norm with batch statistics; the statistics are returned so the
    /// caller can update running estimates.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
    ) -> Result<(Var, BatchStats<T>)> {
        let (xi, gi, bi) = (self.idx(x)?, self.idx(gamma)?, self.idx(beta)?);
        let (y, stats) = ops::batch_norm_train(
            &self.nodes[xi].value,
            &self.nodes[gi].value,
            &self.nodes[bi].value,
        )?;
        let out = self.push(
            y,
            Op::BatchNormTrain {
                x: xi,
                gamma: gi,
                beta: bi,
                stats: stats.clone(),
            },
            &[xi, gi, bi],
        );
        Ok((out, stats))
    }

    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
    ) -> Result<Var> {
        let (xi, gi, bi) = (self.idx(x)?, self.idx(gamma)?, self.idx(beta)?);
        let (y, _) = ops::batch_norm_eval(
            &self.nodes[xi].value,
            &self.nodes[gi].value,
            &self.nodes[bi].value,
            running_mean,
            running_var,
        )?;
        let eps = T::of(ops::BN_EPS);
        let inv_std = running_var
            .iter()
            .map(|&v| T::one() / (v + eps).sqrt())
            .collect();
        Ok(self.push(
            y,
            Op::BatchNormEval {
                x: xi,
                gamma: gi,
                beta: bi,
                mean: running_mean.to_vec(),
                inv_std,
            },
            &[xi, gi, bi],
        ))
    }

    pub fn relu6(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let y = ops::relu6(&self.nodes[xi].value);
        Ok(self.push(y, Op::Relu6 { x: xi }, &[xi]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        let (va, vb) = (&self.nodes[ai].value, &self.nodes[bi].value);
        if va.shape() != vb.shape() {
            return Err(Error::ShapeMismatch {
                op: "add",
                left: va.shape(),
                right: vb.shape(),
            });
        }
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&p, &q)| p + q)
            .collect();
        let y = Tensor::from_vec(va.shape(), data)?;
        Ok(self.push(y, Op::Add { a: ai, b: bi }, &[ai, bi]))
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xi = self.idx(x)?;
        let y = self.nodes[xi].value.slice_channels(start, len)?;
        Ok(self.push(y, Op::Slice { x: xi, start }, &[xi]))
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let idx = parts
            .iter()
            .map(|&p| self.idx(p))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Tensor<T>> = idx.iter().map(|&i| &self.nodes[i].value).collect();
        let y = Tensor::concat_channels(&refs)?;
        Ok(self.push(y, Op::Concat { parts: idx.clone() }, &idx))
    }

    pub fn dfwt(&mut self, x: Var, depth: u32, sign: SignConvention) -> Result<Var> {
        let xi = self.idx(x)?;
        let y = ops::dfwt(&self.nodes[xi].value, depth, sign)?;
        Ok(self.push(y, Op::Dfwt { x: xi, depth, sign }, &[xi]))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let y = ops::global_avg_pool(&self.nodes[xi].value);
        Ok(self.push(y, Op::AvgPool { x: xi }, &[xi]))
    }

    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let li = self.idx(logits)?;
        let (loss, probs) = ops::softmax_cross_entropy(&self.nodes[li].value, labels)?;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCe {
                logits: li,
                labels: labels.to_vec(),
                probs,
            },
            &[li],
        ))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let s = self.nodes[xi].value.sum();
        Ok(self.push(Tensor::scalar(s), Op::Sum { x: xi }, &[xi]))
    }

    /// Region of every recorded clamp input: 0 below the lower kink, 1
    /// between the kinks, 2 above the upper kink.
    pub fn activation_pattern(&self) -> Vec<u8> {
        let (lo, hi) = (T::zero(), T::of(6.0));
        let mut out = Vec::new();
        for node in &self.nodes {
            if let Op::Relu6 { x } = node.op {
                out.extend(self.nodes[x].value.data().iter().map(|&v| {
                    if v <= lo {
                        0
                    } else if v >= hi {
                        2
                    } else {
                        1
                    }
                }));
            }
        }
        out
    }

    /// `Σ x ⊙ weights` for a constant `weights` of the same shape.
    pub fn dot(&mut self, x: Var, weights: &Tensor<T>) -> Result<Var> {
        let xi = self.idx(x)?;
        let xv = &self.nodes[xi].value;
        if xv.shape() != weights.shape() {
            return Err(Error::ShapeMismatch {
                op: "dot",
                left: xv.shape(),
                right: weights.shape(),
            });
        }
        let s = xv
            .data()
            .iter()
            .zip(weights.data())
            .fold(T::zero(), |acc, (&a, &b)| acc + a * b);
        Ok(self.push(
            Tensor::scalar(s),
            Op::Dot {
                x: xi,
                weights: weights.clone(),
            },
            &[xi],
        ))
    }

    /// Reverse pass from a single-element `loss`.
    ///
    /// Every parameter leaf ends up with a gradient; leaves the loss does
    /// not depend on get zeros.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let li = self.idx(loss)?;
        let ls = self.nodes[li].value.shape();
        if ls.numel() != 1 {
            return Err(Error::NonScalarLoss(ls));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[li] = Some(Tensor::scalar(T::one()));

        for i in (0..=li).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            for (target, contribution) in self.local_grads(i, &g) {
                if !self.nodes[target].requires_grad {
                    continue;
                }
                match &mut grads[target] {
                    Some(acc) => acc
                        .data_mut()
                        .iter_mut()
                        .zip(contribution.data())
                        .for_each(|(a, &c)| *a += c),
                    slot => *slot = Some(contribution),
                }
            }
        }

        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if node.requires_grad && matches!(node.op, Op::Leaf) {
                let g = g
                    .map(Tensor::into_data)
                    .unwrap_or_else(|| vec![T::zero(); node.value.numel()]);
                node.value.set_grad(g)?;
            }
        }
        Ok(())
    }

    /// Contributions of node `i`'s output gradient to each of its inputs.
    fn local_grads(&self, i: usize, g: &Tensor<T>) -> Vec<(usize, Tensor<T>)> {
        let val = |j: usize| &self.nodes[j].value;
        match &self.nodes[i].op {
            Op::Leaf => Vec::new(),
            &Op::Conv2d { x, w, stride } => {
                let (gx, gw) = ops::conv2d_backward(val(x), val(w), stride, g);
                vec![(x, gx), (w, gw)]
            }
            &Op::Depthwise { x, w, stride } => {
                let (gx, gw) = ops::depthwise_conv2d_backward(val(x), val(w), stride, g);
                vec![(x, gx), (w, gw)]
            }
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                stats,
            } => {
                let (gx, gg, gb) = ops::batch_norm_train_backward(val(*x), val(*gamma), stats, g);
                vec![(*x, gx), (*gamma, gg), (*beta, gb)]
            }
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let xv = val(*x);
                let c = xv.shape().channels();
                let gam = val(*gamma).data();
                let mut gx = Tensor::zeros(xv.shape());
                let mut gg = vec![T::zero(); c];
                let mut gb = vec![T::zero(); c];
                for ((gxp, xp), gp) in gx
                    .data_mut()
                    .chunks_exact_mut(c)
                    .zip(xv.data().chunks_exact(c))
                    .zip(g.data().chunks_exact(c))
                {
                    for ch in 0..c {
                        gxp[ch] = gp[ch] * gam[ch] * inv_std[ch];
                        gg[ch] += gp[ch] * (xp[ch] - mean[ch]) * inv_std[ch];
                        gb[ch] += gp[ch];
                    }
                }
                let ps = val(*gamma).shape();
                vec![
                    (*x, gx),
                    (*gamma, Tensor::from_vec(ps, gg).expect("gamma shape")),
                    (*beta, Tensor::from_vec(ps, gb).expect("beta shape")),
                ]
            }
            &Op::Relu6 { x } => vec![(x, ops::relu6_backward(val(x), g))],
            &Op::Add { a, b } => vec![(a, g.clone()), (b, g.clone())],
            &Op::Slice { x, start } => {
                let xs = val(x).shape();
                let (c, len) = (xs.channels(), g.shape().channels());
                let mut gx = Tensor::zeros(xs);
                for (dst, src) in gx
                    .data_mut()
                    .chunks_exact_mut(c)
                    .zip(g.data().chunks_exact(len))
                {
                    dst[start..start + len].copy_from_slice(src);
                }
                vec![(x, gx)]
            }
            Op::Concat { parts } => {
                let mut start = 0;
                parts
                    .iter()
                    .map(|&p| {
                        let len = val(p).shape().channels();
                        let part = g.slice_channels(start, len).expect("concat grad slice");
                        start += len;
                        (p, part)
                    })
                    .collect()
            }
            &Op::Dfwt { x, depth, sign } => vec![(x, ops::dfwt_backward(g, depth, sign))],
            &Op::AvgPool { x } => vec![(x, ops::global_avg_pool_backward(val(x).shape(), g))],
            Op::SoftmaxCe {
                logits,
                labels,
                probs,
            } => {
                let up = g.data()[0];
                vec![(
                    *logits,
                    ops::softmax_cross_entropy_backward(probs, labels, up),
                )]
            }
            &Op::Sum { x } => {
                let up = g.data()[0];
                vec![(x, Tensor::full(val(x).shape(), up))]
            }
            Op::Dot { x, weights } => {
                let up = g.data()[0];
                vec![(*x, weights.map(|w| w * up))]
            }
        }
    }
}

/// Shape of a recorded value, for callers that only hold a [`Var`].
pub fn shape_of<T: Scalar>(tape: &Tape<T>, v: Var) -> Result<Shape> {
    Ok(tape.value(v)?.shape())
}
