//! Multiply-accumulate accounting for convolutions and the log-FLOPs
//! regularizer built on top of it.
//!
//! A convolution without bias producing `C` channels of size `H x W` from
//! `n` input channels with an `h x w` kernel costs `h * w * n * H * W * C`.
//! The search objective uses `eta = h * w * n * H * W` with the *unpruned*
//! input width, which makes the cost linear in each layer's own width.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::gates::{expected_channels, CandidateSet};
use crate::tensor::Element;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCostSpec {
    pub kernel_h: usize,
    pub kernel_w: usize,
    /// Input channels of the unpruned layer.
    pub in_channels: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub full_out: usize,
}

impl LayerCostSpec {
    pub fn eta(&self) -> u64 {
        (self.kernel_h * self.kernel_w * self.in_channels * self.out_h * self.out_w) as u64
    }

    pub fn layer_flops(&self, channels: usize) -> u64 {
        self.eta() * channels as u64
    }

    pub fn full_flops(&self) -> u64 {
        self.layer_flops(self.full_out)
    }
}

/// `constant + sum_i eta_i * E[C_i]`, recorded on the tape.
pub fn expected_flops<T: Element>(
    tape: &mut Tape<T>,
    specs: &[LayerCostSpec],
    probs: &[Var],
    candidates: &[CandidateSet],
    constant: f64,
) -> Result<Var> {
    if specs.len() != probs.len() || specs.len() != candidates.len() {
        return Err(Error::Config(format!(
            "cost inputs misaligned: {} specs, {} probability vectors, {} candidate sets",
            specs.len(),
            probs.len(),
            candidates.len()
        )));
    }
    let mut expectations = Vec::with_capacity(specs.len());
    for ((spec, &p), cands) in specs.iter().zip(probs).zip(candidates) {
        if cands.full() != spec.full_out {
            return Err(Error::Config(format!(
                "candidate set {:?} does not end at layer width {}",
                cands.counts(),
                spec.full_out
            )));
        }
        expectations.push(expected_channels(tape, p, cands)?);
    }
    let etas: Vec<T> = specs
        .iter()
        .map(|s| T::from_f64_lossy(s.eta() as f64))
        .collect();
    tape.combine(&expectations, &etas, T::from_f64_lossy(constant))
}

/// `lambda * ln(total)`.
pub fn cost_term<T: Element>(tape: &mut Tape<T>, total: Var, lambda: f64) -> Result<Var> {
    if lambda < 0.0 || lambda.is_nan() {
        return Err(Error::Argument(format!("lambda must be nonnegative, got {lambda}")));
    }
    let value = tape.value(total);
    if value.numel() != 1 {
        return Err(Error::Rank("cost_term needs a scalar total".into()));
    }
    let log = tape.ln(total)?;
    Ok(tape.scale(log, T::from_f64_lossy(lambda)))
}

/// Plain-value expected FLOPs for fixed probabilities.
pub fn expected_flops_value(
    specs: &[LayerCostSpec],
    probs: &[Vec<f64>],
    candidates: &[CandidateSet],
    constant: f64,
) -> f64 {
    specs
        .iter()
        .zip(probs)
        .zip(candidates)
        .map(|((s, p), c)| {
            let e: f64 = p.iter().zip(c.counts()).map(|(pk, &ck)| pk * ck as f64).sum();
            s.eta() as f64 * e
        })
        .sum::<f64>()
        + constant
}
