//! Prunable convolution with weight sharing inside one kernel.
//!
//! Candidate `k` of a layer is the convolution with the first `c_k` filters
//! of the shared kernel `W` (the rest zeroed). The probability-weighted sum
//! of all candidate outputs therefore only needs `y = W * x` once: every
//! channel of `y` is scaled by the total probability of the candidates that
//! contain it. [`PrunableConv::forward_shared`] does exactly that;
//! [`PrunableConv::forward_multipath_oracle`] evaluates the `K` masked
//! convolutions literally and exists to check the shared path.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::gates::{expand_to_channels, make_candidates, tail_weights, CandidateSet, GateSample, GateVector};
use crate::tensor::{Element, Tensor};

/// Copy of `w` with filters `c_k..Cout` set to zero.
pub fn masked_kernel<T: Element>(w: &Tensor<T>, c_k: usize) -> Result<Tensor<T>> {
    let cout = w.shape()[0];
    if c_k < 1 || c_k > cout {
        return Err(Error::Argument(format!(
            "masked_kernel keeps {c_k} of {cout} filters"
        )));
    }
    let per_filter = w.numel() / cout;
    let mut out = w.clone();
    out.data_mut()[c_k * per_filter..]
        .iter_mut()
        .for_each(|v| *v = T::zero());
    Ok(out)
}

#[cfg(feature = "oracle")]
fn filter_mask<T: Element>(shape: &[usize], c_k: usize) -> Tensor<T> {
    let per_filter: usize = shape[1..].iter().product();
    let mut m = Tensor::zeros(shape.to_vec());
    m.data_mut()[..c_k * per_filter]
        .iter_mut()
        .for_each(|v| *v = T::one());
    m
}

#[derive(Debug)]
pub struct PrunableConv<T> {
    pub name: String,
    /// Shared weight `[Cout, Cin, h, w]`, no bias.
    pub kernel: Tensor<T>,
    pub candidates: CandidateSet,
    pub gate: GateVector<T>,
    pub stride: usize,
    pub padding: usize,
    conv_evals: AtomicU64,
}

impl<T: Clone> Clone for PrunableConv<T> {
    fn clone(&self) -> Self {
        PrunableConv {
            name: self.name.clone(),
            kernel: self.kernel.clone(),
            candidates: self.candidates.clone(),
            gate: self.gate.clone(),
            stride: self.stride,
            padding: self.padding,
            conv_evals: AtomicU64::new(self.conv_evals.load(Ordering::Relaxed)),
        }
    }
}

impl<T: Element> PrunableConv<T> {
    pub fn new(
        name: impl Into<String>,
        kernel: Tensor<T>,
        n_groups: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let cout = kernel.shape()[0];
        Self::with_candidates(name, kernel, make_candidates(cout, n_groups)?, stride, padding)
    }

    pub fn with_candidates(
        name: impl Into<String>,
        kernel: Tensor<T>,
        candidates: CandidateSet,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let name = name.into();
        if kernel.shape().len() != 4 || candidates.full() != kernel.shape()[0] {
            return Err(Error::structural(
                &name,
                format!(
                    "kernel {:?} does not match candidates {:?}",
                    kernel.shape(),
                    candidates.counts()
                ),
            ));
        }
        Ok(PrunableConv {
            gate: GateVector::zeros(name.clone(), candidates.len()),
            name,
            kernel,
            candidates,
            stride,
            padding,
            conv_evals: AtomicU64::new(0),
        })
    }

    /// Convolutions evaluated by this layer so far.
    pub fn conv_eval_count(&self) -> u64 {
        self.conv_evals.load(Ordering::Relaxed)
    }

    fn check_sample(&self, tape: &Tape<T>, sample: &GateSample<T>) -> Result<()> {
        if tape.value(sample.probs).numel() != self.candidates.len() {
            return Err(Error::Dimension(format!(
                "layer {} has {} candidates, sample has {} probabilities",
                self.name,
                self.candidates.len(),
                tape.value(sample.probs).numel()
            )));
        }
        Ok(())
    }

    /// The full-width convolution, without gating.
    pub fn conv(&self, tape: &mut Tape<T>, x: Var, kernel: Var) -> Result<Var> {
        let y = tape.conv2d(x, kernel, self.stride, self.padding)?;
        self.conv_evals.fetch_add(1, Ordering::Relaxed);
        Ok(y)
    }

    /// One convolution, then per-channel tail-probability weighting.
    pub fn forward_shared(
        &self,
        tape: &mut Tape<T>,
        x: Var,
        kernel: Var,
        sample: &GateSample<T>,
    ) -> Result<Var> {
        self.check_sample(tape, sample)?;
        let y = self.conv(tape, x, kernel)?;
        let weights = self.channel_weights(tape, sample)?;
        tape.channel_scale(y, weights)
    }

    /// Per-channel weights `S_k` expanded over the output channels.
    pub fn channel_weights(&self, tape: &mut Tape<T>, sample: &GateSample<T>) -> Result<Var> {
        self.check_sample(tape, sample)?;
        let tail = tail_weights(tape, sample.probs);
        expand_to_channels(tape, tail, &self.candidates)
    }

    /// `sum_k p_k * (masked_kernel(W, c_k) * x)` with `K` separate
    /// convolutions.
    #[cfg(feature = "oracle")]
    pub fn forward_multipath_oracle(
        &self,
        tape: &mut Tape<T>,
        x: Var,
        kernel: Var,
        sample: &GateSample<T>,
    ) -> Result<Var> {
        self.check_sample(tape, sample)?;
        let shape = tape.value(kernel).shape().to_vec();
        let mut acc: Option<Var> = None;
        for (k, &c_k) in self.candidates.counts().iter().enumerate() {
            let mask = tape.constant(filter_mask(&shape, c_k));
            let masked = tape.mul(kernel, mask)?;
            let y_k = tape.conv2d(x, masked, self.stride, self.padding)?;
            self.conv_evals.fetch_add(1, Ordering::Relaxed);
            let p_k = tape.pick(sample.probs, k)?;
            let term = tape.scale_by(y_k, p_k)?;
            acc = Some(match acc {
                Some(a) => tape.add(a, term)?,
                None => term,
            });
        }
        Ok(acc.expect("candidate sets are never empty"))
    }
}
