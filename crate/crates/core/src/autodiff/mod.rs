//! Define-by-run reverse-mode differentiation over dense tensors.
//!
//! A [`Tape`] records every operation of one forward pass in creation order,
//! which is already a topological order. [`Tape::backward`] walks the records
//! in reverse exactly once, routing gradients into scratch buffers and
//! accumulating the final values into persistent per-leaf gradients. Calling
//! `backward` again without [`Tape::zero_grad`] adds a second contribution.
//!
//! The tape is meant to be thrown away after each step; parameters live
//! outside of it and are bound as leaves at the start of every forward pass.

mod conv;
mod gradcheck;
mod norm;
mod ops;

pub use conv::{conv2d_reference, ConvAlgo, ConvGeometry};
pub use gradcheck::{grad_check, GradCheckReport};
pub use norm::{BnMode, RunningStats};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Counters collected while recording and differentiating.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TapeStats {
    /// Number of `conv2d` evaluations recorded.
    pub conv_evals: u64,
    /// Multiply-accumulates performed by forward `conv2d` and `linear`.
    pub macs: u64,
    /// Bytes held by recorded values, saved buffers and gradient scratch.
    pub live_bytes: usize,
    pub peak_bytes: usize,
}

impl TapeStats {
    fn alloc(&mut self, bytes: usize) {
        self.live_bytes += bytes;
        self.peak_bytes = self.peak_bytes.max(self.live_bytes);
    }

    fn free(&mut self, bytes: usize) {
        self.live_bytes = self.live_bytes.saturating_sub(bytes);
    }
}

pub(crate) enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        kernel: Var,
        geom: ConvGeometry,
    },
    ChannelScale {
        x: Var,
        s: Var,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    Relu {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        factor: T,
    },
    Offset {
        x: Var,
    },
    Softmax {
        x: Var,
    },
    ReverseCumsum {
        x: Var,
    },
    ExpandBlocks {
        x: Var,
        bounds: Vec<usize>,
    },
    Dot {
        x: Var,
        weights: Vec<T>,
    },
    Sum {
        x: Var,
    },
    Pick {
        x: Var,
        index: usize,
    },
    ScaleBy {
        x: Var,
        s: Var,
    },
    Ln {
        x: Var,
    },
    Combine {
        xs: Vec<Var>,
        coeffs: Vec<T>,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    GlobalAvgPool {
        x: Var,
    },
    AvgPool2 {
        x: Var,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    Mae {
        pred: Var,
        target: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
    saved_bytes: usize,
}

/// Recording of one forward pass.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    conv_algo: ConvAlgo,
    stats: TapeStats,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self::with_conv_algo(ConvAlgo::Im2col)
    }

    pub fn with_conv_algo(conv_algo: ConvAlgo) -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            conv_algo,
            stats: TapeStats::default(),
        }
    }

    pub fn conv_algo(&self) -> ConvAlgo {
        self.conv_algo
    }

    pub fn stats(&self) -> &TapeStats {
        &self.stats
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input. Leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf, 0)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn zero_grad(&mut self) {
        for g in self.grads.iter_mut() {
            *g = None;
        }
    }

    pub(crate) fn push(
        &mut self,
        value: Tensor<T>,
        requires_grad: bool,
        op: Op<T>,
        saved_bytes: usize,
    ) -> Var {
        self.stats.alloc(value.nbytes() + saved_bytes);
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
            saved_bytes,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn any_requires_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Back-propagates from a scalar `loss` into every reachable leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let loss_value = &self.nodes[loss.0].value;
        if loss_value.numel() != 1 {
            return Err(Error::Rank(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss_value.shape()
            )));
        }
        let elem = T::DTYPE.size();
        let mut scratch: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        scratch[loss.0] = Some(vec![T::one()]);
        self.stats.alloc(elem);

        for i in (0..=loss.0).rev() {
            let Some(upstream) = scratch[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            if !node.requires_grad {
                self.stats.free(upstream.len() * elem);
                continue;
            }
            if let Op::Leaf = node.op {
                let bytes = upstream.len() * elem;
                match &mut self.grads[i] {
                    Some(g) => {
                        add_into(g, &upstream);
                        self.stats.free(bytes);
                    }
                    slot @ None => *slot = Some(upstream),
                }
                continue;
            }
            let contributions = self.backward_node(i, &upstream)?;
            self.stats.free(upstream.len() * elem);
            for (var, g) in contributions {
                if !self.nodes[var.0].requires_grad {
                    continue;
                }
                match &mut scratch[var.0] {
                    Some(existing) => add_into(existing, &g),
                    slot @ None => {
                        self.stats.alloc(g.len() * elem);
                        *slot = Some(g);
                    }
                }
            }
        }
        Ok(())
    }

    fn backward_node(&mut self, i: usize, dy: &[T]) -> Result<Vec<(Var, Vec<T>)>> {
        let nodes = &self.nodes;
        let node = &nodes[i];
        let needs = |v: &Var| nodes[v.0].requires_grad;
        let out = match &node.op {
            Op::Leaf => Vec::new(),
            Op::Conv2d { x, kernel, geom } => {
                let (dx, dk) = conv::conv2d_backward(
                    self.conv_algo,
                    nodes[x.0].value.data(),
                    nodes[kernel.0].value.data(),
                    dy,
                    geom,
                    needs(x),
                    needs(kernel),
                );
                let mut out = Vec::new();
                if let Some(dx) = dx {
                    out.push((*x, dx));
                }
                if let Some(dk) = dk {
                    out.push((*kernel, dk));
                }
                out
            }
            Op::ChannelScale { x, s } => {
                ops::channel_scale_backward(&nodes[x.0].value, &nodes[s.0].value, dy, *x, *s)
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                batch_stats,
            } => norm::batchnorm_backward(
                &nodes[x.0].value,
                &nodes[gamma.0].value,
                mean,
                inv_std,
                *batch_stats,
                dy,
                (*x, *gamma, *beta),
            ),
            Op::Relu { x } => {
                let xv = nodes[x.0].value.data();
                let g = xv
                    .iter()
                    .zip(dy)
                    .map(|(&xi, &d)| if xi > T::zero() { d } else { T::zero() })
                    .collect();
                vec![(*x, g)]
            }
            Op::Add { a, b } => vec![(*a, dy.to_vec()), (*b, dy.to_vec())],
            Op::Mul { a, b } => {
                let av = nodes[a.0].value.data();
                let bv = nodes[b.0].value.data();
                vec![
                    (*a, dy.iter().zip(bv).map(|(&d, &bi)| d * bi).collect()),
                    (*b, dy.iter().zip(av).map(|(&d, &ai)| d * ai).collect()),
                ]
            }
            Op::Scale { x, factor } => vec![(*x, dy.iter().map(|&d| d * *factor).collect())],
            Op::Offset { x } => vec![(*x, dy.to_vec())],
            Op::Softmax { x } => {
                let p = node.value.data();
                let dot: T = p.iter().zip(dy).map(|(&pi, &di)| pi * di).sum();
                vec![(*x, p.iter().zip(dy).map(|(&pi, &di)| pi * (di - dot)).collect())]
            }
            Op::ReverseCumsum { x } => {
                // out_k = sum_{j >= k} x_j, so dx_j = sum_{k <= j} dy_k
                let mut acc = T::zero();
                let g = dy
                    .iter()
                    .map(|&d| {
                        acc = acc + d;
                        acc
                    })
                    .collect();
                vec![(*x, g)]
            }
            Op::ExpandBlocks { x, bounds } => {
                let mut g = Vec::with_capacity(bounds.len());
                let mut start = 0;
                for &end in bounds {
                    g.push(dy[start..end].iter().copied().sum());
                    start = end;
                }
                vec![(*x, g)]
            }
            Op::Dot { x, weights } => {
                vec![(*x, weights.iter().map(|&w| w * dy[0]).collect())]
            }
            Op::Sum { x } => vec![(*x, vec![dy[0]; nodes[x.0].value.numel()])],
            Op::Pick { x, index } => {
                let mut g = vec![T::zero(); nodes[x.0].value.numel()];
                g[*index] = dy[0];
                vec![(*x, g)]
            }
            Op::ScaleBy { x, s } => {
                let sv = nodes[s.0].value.item();
                let xv = nodes[x.0].value.data();
                let ds: T = xv.iter().zip(dy).map(|(&a, &d)| a * d).sum();
                vec![(*x, dy.iter().map(|&d| d * sv).collect()), (*s, vec![ds])]
            }
            Op::Ln { x } => {
                let xv = nodes[x.0].value.data();
                vec![(*x, xv.iter().zip(dy).map(|(&xi, &d)| d / xi).collect())]
            }
            Op::Combine { xs, coeffs } => xs
                .iter()
                .zip(coeffs)
                .map(|(v, &c)| (*v, vec![c * dy[0]]))
                .collect(),
            Op::Linear { x, w, b } => ops::linear_backward(
                &nodes[x.0].value,
                &nodes[w.0].value,
                dy,
                (*x, *w, *b),
                (needs(x), needs(w), needs(b)),
            ),
            Op::GlobalAvgPool { x } => ops::global_avg_pool_backward(&nodes[x.0].value, dy, *x),
            Op::AvgPool2 { x } => ops::avg_pool2_backward(&nodes[x.0].value, dy, *x),
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let classes = nodes[logits.0].value.shape()[1];
                let n = labels.len();
                let scale = dy[0] / T::from_usize(n).unwrap();
                let mut g: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (row, &label) in labels.iter().enumerate() {
                    g[row * classes + label] = g[row * classes + label] - scale;
                }
                vec![(*logits, g)]
            }
            Op::Mae { pred, target } => {
                let pv = nodes[pred.0].value.data();
                let scale = dy[0] / T::from_usize(pv.len()).unwrap();
                let g = pv
                    .iter()
                    .zip(target)
                    .map(|(&p, &t)| {
                        let d = p - t;
                        if d > T::zero() {
                            scale
                        } else if d < T::zero() {
                            -scale
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                vec![(*pred, g)]
            }
        };
        Ok(out)
    }

    /// Bytes of recorded values plus saved buffers, excluding gradients.
    pub fn recorded_bytes(&self) -> usize {
        self.nodes
            .iter()
            .map(|n| n.value.nbytes() + n.saved_bytes)
            .sum()
    }
}

pub(crate) fn add_into<T: Element>(acc: &mut [T], g: &[T]) {
    for (a, &b) in acc.iter_mut().zip(g) {
        *a = *a + b;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn sum_gives_ones() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, 4.0]), true);
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn half_square_gives_identity() {
        let mut tape = Tape::<f64>::new();
        let data = [1.0, -2.0, 3.5];
        let x = tape.leaf(t(&[3], &data), true);
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        let half = tape.scale(s, 0.5);
        tape.backward(half).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &data);
    }

    #[test]
    fn two_consumers_accumulate() {
        // f = sum(relu(x)) + sum(3x): grad = 1[x>0] + 3
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[3], &[1.0, -1.0, 2.0]), true);
        let r = tape.relu(x);
        let a = tape.sum(r);
        let s = tape.scale(x, 3.0);
        let b = tape.sum(s);
        let f = tape.add(a, b).unwrap();
        tape.backward(f).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[4.0, 3.0, 4.0]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        tape.backward(s).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[4.0, 8.0]);
        tape.zero_grad();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn non_scalar_loss_is_rank_error() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        assert!(matches!(tape.backward(x), Err(Error::Rank(_))));
    }

    #[test]
    fn add_routes_identity_to_both() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        let b = tape.leaf(t(&[2], &[5.0, -1.0]), true);
        let c = tape.add(a, b).unwrap();
        let w = tape.dot(c, &[2.0, -3.0]).unwrap();
        tape.backward(w).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[2.0, -3.0]);
        assert_eq!(tape.grad(b).unwrap(), &[2.0, -3.0]);
    }

    #[test]
    fn constants_get_no_grad() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        let b = tape.constant(t(&[2], &[5.0, -1.0]));
        let c = tape.mul(a, b).unwrap();
        let s = tape.sum(c);
        tape.backward(s).unwrap();
        assert!(tape.grad(b).is_none());
        assert_eq!(tape.grad(a).unwrap(), &[5.0, -1.0]);
    }
}
