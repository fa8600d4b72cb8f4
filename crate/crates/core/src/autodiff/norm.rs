use super::{Op, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Batch statistics, running statistics updated.
    Train,
    /// Batch statistics, running statistics left alone.
    TrainFrozenStats,
    /// Running statistics.
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub initialized: bool,
}

impl<T: Element> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
            initialized: false,
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    /// Keeps only the listed channels, in order.
    pub fn select(&self, keep: usize) -> Self {
        RunningStats {
            mean: self.mean[..keep].to_vec(),
            var: self.var[..keep].to_vec(),
            initialized: self.initialized,
        }
    }
}

impl<T: Element> Tape<T> {
    /// Per-channel normalization of `[N,C,H,W]` followed by `gamma * x + beta`.
    #[allow(clippy::too_many_arguments)]
    pub fn batchnorm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &mut RunningStats<T>,
        mode: BnMode,
        eps: T,
        momentum: T,
    ) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        if shape.len() != 4 {
            return Err(Error::Dimension(format!(
                "batchnorm2d expects [N,C,H,W], got {shape:?}"
            )));
        }
        let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.value(v).numel() != c || stats.channels() != c {
                return Err(Error::Dimension(format!(
                    "batchnorm2d {name} has {} entries and stats {}, input has {c} channels",
                    self.value(v).numel(),
                    stats.channels()
                )));
            }
        }
        let xs = self.value(x).data();
        let count = n * hw;
        let batch_stats = mode != BnMode::Eval;
        let (mean, var) = if batch_stats {
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            let inv = T::one() / T::from_usize(count).unwrap();
            for ch in 0..c {
                let mut s = T::zero();
                for b in 0..n {
                    let base = (b * c + ch) * hw;
                    s = s + xs[base..base + hw].iter().copied().sum::<T>();
                }
                let m = s * inv;
                let mut sq = T::zero();
                for b in 0..n {
                    let base = (b * c + ch) * hw;
                    sq = sq + xs[base..base + hw].iter().map(|&v| (v - m) * (v - m)).sum::<T>();
                }
                mean[ch] = m;
                var[ch] = sq * inv;
            }
            (mean, var)
        } else {
            if !stats.initialized {
                return Err(Error::UninitializedStats(
                    "eval mode needs at least one training-mode update".into(),
                ));
            }
            (stats.mean.clone(), stats.var.clone())
        };
        if mode == BnMode::Train {
            let unbias = if count > 1 {
                T::from_usize(count).unwrap() / T::from_usize(count - 1).unwrap()
            } else {
                T::one()
            };
            for ch in 0..c {
                stats.mean[ch] = (T::one() - momentum) * stats.mean[ch] + momentum * mean[ch];
                stats.var[ch] = (T::one() - momentum) * stats.var[ch] + momentum * var[ch] * unbias;
            }
            stats.initialized = true;
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let gs = self.value(gamma).data();
        let bs = self.value(beta).data();
        let mut out = vec![T::zero(); xs.len()];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * hw;
                let (m, is, g, bt) = (mean[ch], inv_std[ch], gs[ch], bs[ch]);
                for (o, &v) in out[base..base + hw].iter_mut().zip(&xs[base..base + hw]) {
                    *o = g * (v - m) * is + bt;
                }
            }
        }
        let value = Tensor::new(shape, out)?;
        let rg = self.any_requires_grad(&[x, gamma, beta]);
        let saved = 2 * c * T::DTYPE.size();
        Ok(self.push(
            value,
            rg,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                batch_stats,
            },
            saved,
        ))
    }
}

pub(super) fn batchnorm_backward<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    mean: &[T],
    inv_std: &[T],
    batch_stats: bool,
    dy: &[T],
    (xv, gv, bv): (Var, Var, Var),
) -> Vec<(Var, Vec<T>)> {
    let shape = x.shape();
    let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
    let xs = x.data();
    let gs = gamma.data();
    let count = T::from_usize(n * hw).unwrap();
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * hw;
            for i in base..base + hw {
                let xhat = (xs[i] - mean[ch]) * inv_std[ch];
                dgamma[ch] = dgamma[ch] + dy[i] * xhat;
                dbeta[ch] = dbeta[ch] + dy[i];
            }
        }
    }
    let mut dx = vec![T::zero(); xs.len()];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * hw;
            let scale = gs[ch] * inv_std[ch];
            for i in base..base + hw {
                dx[i] = if batch_stats {
                    // dxhat = dy * gamma; dx = inv_std/M * (M dxhat - sum dxhat - xhat sum(dxhat xhat))
                    let xhat = (xs[i] - mean[ch]) * inv_std[ch];
                    scale * (dy[i] - dbeta[ch] / count - xhat * dgamma[ch] / count)
                } else {
                    scale * dy[i]
                };
            }
        }
    }
    vec![(xv, dx), (gv, dgamma), (bv, dbeta)]
}
