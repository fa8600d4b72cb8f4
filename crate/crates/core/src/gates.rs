//! Candidate channel counts and the Gumbel-Softmax gates that choose
//! between them.
//!
//! Every prunable layer owns a strictly increasing list of candidate output
//! widths `c_1 < ... < c_K = n` and a logit vector `theta` of length `K`.
//! A forward pass turns `theta` plus fresh Gumbel noise into a relaxed
//! one-hot `p` at temperature `tau`. Because candidate `k` keeps the first
//! `c_k` filters of one shared kernel, mixing the `K` candidate outputs with
//! weights `p` equals scaling output channel `c` by the tail mass
//! `S_k = sum_{j >= k} p_j` of the block `(c_{k-1}, c_k]` it belongs to.

use log::warn;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Lower/upper clamp applied to uniform draws before the double logarithm.
pub const UNIFORM_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateSet {
    counts: Vec<usize>,
}

impl CandidateSet {
    pub fn new(counts: Vec<usize>) -> Result<Self> {
        if counts.is_empty() {
            return Err(Error::Argument("candidate set is empty".into()));
        }
        if counts[0] == 0 || counts.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Argument(format!(
                "candidate counts {counts:?} must be positive and strictly increasing"
            )));
        }
        Ok(CandidateSet { counts })
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn full(&self) -> usize {
        *self.counts.last().unwrap()
    }

    pub fn smallest(&self) -> usize {
        self.counts[0]
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn as_weights<T: Element>(&self) -> Vec<T> {
        self.counts.iter().map(|&c| T::from_usize(c).unwrap()).collect()
    }

    /// Index of the block a 0-based channel belongs to.
    pub fn block_of(&self, channel: usize) -> usize {
        self.counts.partition_point(|&c| c <= channel)
    }
}

/// Splits `n_filters` into `min(n_groups, n_filters)` nearly equal groups
/// and returns the cumulative counts `ceil(k * n / K)`.
pub fn make_candidates(n_filters: usize, n_groups: usize) -> Result<CandidateSet> {
    if n_filters < 1 {
        return Err(Error::Argument("a layer needs at least one filter".into()));
    }
    if n_groups < 1 {
        return Err(Error::Argument("n_groups must be at least 1".into()));
    }
    let k = n_groups.min(n_filters);
    let mut counts: Vec<usize> = (1..=k).map(|i| (i * n_filters).div_ceil(k)).collect();
    counts.dedup();
    CandidateSet::new(counts)
}

/// `-ln(-ln(u))` with `u` clamped away from 0 and 1.
pub fn gumbel_from_uniform(u: f64) -> f64 {
    let u = u.clamp(UNIFORM_CLAMP, 1.0 - UNIFORM_CLAMP);
    -(-u.ln()).ln()
}

pub fn sample_gumbel<T: Element, R: Rng + ?Sized>(rng: &mut R, k: usize) -> Vec<T> {
    (0..k)
        .map(|_| T::from_f64_lossy(gumbel_from_uniform(rng.gen::<f64>())))
        .collect()
}

/// Learnable logits for one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct GateVector<T> {
    pub layer: String,
    pub theta: Tensor<T>,
}

impl<T: Element> GateVector<T> {
    pub fn zeros(layer: impl Into<String>, k: usize) -> Self {
        GateVector {
            layer: layer.into(),
            theta: Tensor::zeros(vec![k]),
        }
    }

    pub fn len(&self) -> usize {
        self.theta.numel()
    }

    pub fn is_empty(&self) -> bool {
        self.theta.numel() == 0
    }
}

/// Exponential anneal shared by every gate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TemperatureSchedule {
    pub tau_start: f64,
    pub tau_end: f64,
    pub total_steps: u64,
}

impl Default for TemperatureSchedule {
    fn default() -> Self {
        TemperatureSchedule {
            tau_start: 10.0,
            tau_end: 0.1,
            total_steps: 1,
        }
    }
}

impl TemperatureSchedule {
    pub fn new(tau_start: f64, tau_end: f64, total_steps: u64) -> Result<Self> {
        if !(tau_start > tau_end && tau_end > 0.0) {
            return Err(Error::Argument(format!(
                "temperature must decrease to a positive value, got {tau_start} -> {tau_end}"
            )));
        }
        if total_steps == 0 {
            return Err(Error::Argument("temperature schedule needs at least one step".into()));
        }
        Ok(TemperatureSchedule {
            tau_start,
            tau_end,
            total_steps,
        })
    }

    /// `tau_start * (tau_end / tau_start)^(step / total_steps)`.
    pub fn temperature_at(&self, step: u64) -> f64 {
        let step = if step > self.total_steps {
            warn!(
                "temperature step {step} beyond schedule length {}, clamping",
                self.total_steps
            );
            self.total_steps
        } else {
            step
        };
        if step == 0 {
            return self.tau_start;
        }
        if step == self.total_steps {
            return self.tau_end;
        }
        let frac = step as f64 / self.total_steps as f64;
        self.tau_start * (self.tau_end / self.tau_start).powf(frac)
    }
}

/// Relaxed sample of one layer's gate, recorded on the tape.
#[derive(Debug, Clone)]
pub struct GateSample<T> {
    pub probs: Var,
    pub noise: Vec<T>,
    pub tau: T,
}

/// Softmax of `(theta + g) / tau`, differentiable in `theta` with the noise
/// held fixed.
pub fn gate_probs<T: Element>(
    tape: &mut Tape<T>,
    theta: Var,
    noise: &[T],
    tau: T,
) -> Result<GateSample<T>> {
    if !(tau > T::zero()) {
        return Err(Error::Argument(format!("temperature must be positive, got {tau}")));
    }
    if noise.len() != tape.value(theta).numel() {
        return Err(Error::Dimension(format!(
            "{} noise values for {} gates",
            noise.len(),
            tape.value(theta).numel()
        )));
    }
    let shifted = tape.offset(theta, noise)?;
    let scaled = tape.scale(shifted, T::one() / tau);
    let probs = tape.softmax(scaled);
    Ok(GateSample {
        probs,
        noise: noise.to_vec(),
        tau,
    })
}

/// Plain-value version of [`gate_probs`].
pub fn probs_value(theta: &[f64], noise: Option<&[f64]>, tau: f64) -> Vec<f64> {
    let z: Vec<f64> = theta
        .iter()
        .enumerate()
        .map(|(k, &t)| (t + noise.map_or(0.0, |g| g[k])) / tau)
        .collect();
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// `S_k = sum_{j >= k} p_j`.
pub fn tail_weights<T: Element>(tape: &mut Tape<T>, probs: Var) -> Var {
    tape.reverse_cumsum(probs)
}

/// Per-channel weights: channel `c` in block `(c_{k-1}, c_k]` gets `S_k`.
pub fn expand_to_channels<T: Element>(
    tape: &mut Tape<T>,
    tail: Var,
    candidates: &CandidateSet,
) -> Result<Var> {
    tape.expand_blocks(tail, candidates.counts())
}

/// `sum_k c_k p_k`.
pub fn expected_channels<T: Element>(
    tape: &mut Tape<T>,
    probs: Var,
    candidates: &CandidateSet,
) -> Result<Var> {
    tape.dot(probs, &candidates.as_weights())
}
