//! Warm-up and alternating weight/gate optimization.

mod history;
mod optim;

pub use history::{HistoryRow, SearchHistory, CSV_COLUMNS};
pub use optim::{adam_step, sgd_momentum_step, Adam, AdamParams, Sgd};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BnMode, Tape};
use crate::cost::{cost_term, expected_flops, expected_flops_value};
use crate::data::{batches, Dataset, Task};
use crate::error::{Error, Result};
use crate::gates::{probs_value, TemperatureSchedule};
use crate::model::{ForwardOptions, GatePolicy, Network, ParamKind, Targets, Trainable};
use crate::rng::{Purpose, SeedTree};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub lambda: f64,
    pub warmup_epochs: usize,
    pub search_epochs: usize,
    pub batch_size: usize,
    /// Initial weight learning rate of warm-up and full training.
    pub lr: f64,
    /// Epochs (within the search stage) at which the search learning rates drop 10x.
    pub search_lr_decay_epochs: Vec<usize>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub val_fraction: f64,
    pub tau_start: f64,
    pub tau_end: f64,
    pub warmup_noise: bool,
    pub cost_uses_sampled_probs: bool,
    pub scale_before_bn: bool,
    /// Weight batches per gate batch.
    pub weight_steps_per_gate_step: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            lambda: 1.0,
            warmup_epochs: 5,
            search_epochs: 5,
            batch_size: 32,
            lr: 0.1,
            search_lr_decay_epochs: Vec::new(),
            momentum: 0.9,
            weight_decay: 5e-4,
            val_fraction: 0.1,
            tau_start: 10.0,
            tau_end: 0.1,
            warmup_noise: true,
            cost_uses_sampled_probs: true,
            scale_before_bn: false,
            weight_steps_per_gate_step: 1,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Config(format!("lambda must be nonnegative, got {}", self.lambda)));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::Config(format!("val_fraction must be in (0, 1), got {}", self.val_fraction)));
        }
        if self.batch_size == 0 || self.weight_steps_per_gate_step == 0 {
            return Err(Error::Config("batch_size and weight_steps_per_gate_step must be positive".into()));
        }
        if !(self.lr >= 0.0) || !(self.momentum >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("learning rate, momentum and weight decay must be nonnegative".into()));
        }
        TemperatureSchedule::new(self.tau_start, self.tau_end, 1)
            .map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    pub fn search_lr(&self) -> f64 {
        self.lr / 10.0
    }
}

/// `initial * (1/10)^(number of decay epochs <= epoch)`.
pub fn lr_at(initial: f64, decay_epochs: &[usize], epoch: usize) -> f64 {
    let passed = decay_epochs.iter().filter(|&&d| epoch >= d).count();
    initial * 0.1f64.powi(passed as i32)
}

fn assert_disjoint(train: &[usize], val: &[usize], n: usize) -> Result<()> {
    let mut seen = vec![false; n];
    for &i in train {
        if i >= n {
            return Err(Error::Index(format!("sample {i} of {n}")));
        }
        seen[i] = true;
    }
    if let Some(&i) = val.iter().find(|&&i| i >= n || seen[i]) {
        return Err(Error::Invariant(format!("sample {i} is in both the weight and the gate split")));
    }
    Ok(())
}

fn check_loss(v: f64, stage: &str, epoch: usize, step: usize) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{stage} loss is {v} at epoch {epoch}, step {step}")))
    }
}

fn expected_c<T: Element>(net: &Network<T>, tau: f64) -> Vec<f64> {
    net.gate_logits()
        .iter()
        .zip(net.candidates())
        .map(|(theta, cands)| {
            let theta: Vec<f64> = theta.iter().map(|v| v.as_f64()).collect();
            let p = probs_value(&theta, None, tau);
            p.iter().zip(cands.counts()).map(|(p, &c)| p * c as f64).sum()
        })
        .collect()
}

/// Noise-free expected FLOPs of a supernet at temperature `tau`.
pub fn expected_flops_at<T: Element>(net: &Network<T>, tau: f64) -> Result<f64> {
    let probs: Vec<Vec<f64>> = net
        .gate_logits()
        .iter()
        .map(|theta| {
            let theta: Vec<f64> = theta.iter().map(|v| v.as_f64()).collect();
            probs_value(&theta, None, tau)
        })
        .collect();
    Ok(expected_flops_value(net.cost_specs(), &probs, &net.candidates(), net.constant_flops()? as f64))
}

/// Trains weights only with gates frozen at zero.
pub fn warmup<T: Element>(
    net: &mut Network<T>,
    data: &Dataset,
    train: &[usize],
    cfg: &SearchConfig,
    seeds: &SeedTree,
    history: &mut SearchHistory,
) -> Result<()> {
    cfg.validate()?;
    if net.gate_logits().iter().flatten().any(|&t| t != T::zero()) {
        return Err(Error::Invariant("warm-up needs zero-initialized gates".into()));
    }
    let mut shuffle = seeds.fork(Purpose::WarmupShuffle);
    let mut noise = seeds.fork(Purpose::WarmupNoise);
    let mut sgd = Sgd::new(net, net.param_indices(ParamKind::Weight), cfg.momentum, cfg.weight_decay);
    let opts = ForwardOptions {
        mode: BnMode::Train,
        scale_before_bn: cfg.scale_before_bn,
    };
    let tau = cfg.tau_start;
    for _ in 0..cfg.warmup_epochs {
        let epoch = history.next_epoch();
        let mut losses = Vec::new();
        for (step, batch) in batches(train, cfg.batch_size, &mut shuffle).iter().enumerate() {
            let (x, y) = data.batch::<T>(batch)?;
            let policy = if cfg.warmup_noise {
                GatePolicy::Sample { rng: &mut noise, tau }
            } else {
                GatePolicy::NoiseFree { tau }
            };
            let loss = weight_step(net, &mut sgd, &x, &y, opts, policy, cfg.lr)?;
            check_loss(loss, "warm-up", epoch, step)?;
            losses.push(loss);
        }
        let gates = expected_c(net, tau);
        history.rows.push(HistoryRow {
            epoch,
            split: "warmup".into(),
            task_loss: mean(&losses),
            cost_term: 0.0,
            expected_mflops: expected_flops_at(net, tau)? / 1e6,
            temperature: tau,
            lr_weights: cfg.lr,
            lr_gates: 0.0,
            expected_c: gates,
        });
    }
    if net.gate_logits().iter().flatten().any(|&t| t != T::zero()) {
        return Err(Error::Invariant("gate logits drifted during warm-up".into()));
    }
    Ok(())
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// One SGD step on the weights; returns the task loss.
fn weight_step<T: Element>(
    net: &mut Network<T>,
    sgd: &mut Sgd<T>,
    x: &Tensor<T>,
    y: &Targets<T>,
    opts: ForwardOptions,
    policy: GatePolicy<'_, T>,
    lr: f64,
) -> Result<f64> {
    let gates_before = net.checksum(ParamKind::Gate);
    let mut tape = Tape::new();
    let out = net.forward(&mut tape, x, opts, policy, Trainable::Weights)?;
    let loss = net.task_loss(&mut tape, &out, y)?;
    let value = tape.value(loss).item().as_f64();
    if !value.is_finite() {
        return Ok(value);
    }
    tape.backward(loss)?;
    net.zero_grads();
    net.accumulate_grads(&tape, &out);
    sgd.step(net, lr)?;
    if net.checksum(ParamKind::Gate) != gates_before {
        return Err(Error::Invariant("a weight step changed gate logits".into()));
    }
    Ok(value)
}

/// Gate-step loss terms.
struct GateStep {
    task: f64,
    cost: f64,
}

#[allow(clippy::too_many_arguments)]
fn gate_step<T: Element, R: Rng>(
    net: &mut Network<T>,
    adam: &mut Adam<T>,
    x: &Tensor<T>,
    y: &Targets<T>,
    cfg: &SearchConfig,
    noise: &mut R,
    tau: f64,
    lr: f64,
) -> Result<GateStep> {
    let weights_before = net.checksum(ParamKind::Weight);
    let stats_before: Vec<_> = net.running_stats().iter().map(|(_, s)| (*s).clone()).collect();
    let mut tape = Tape::new();
    let opts = ForwardOptions {
        mode: BnMode::TrainFrozenStats,
        scale_before_bn: cfg.scale_before_bn,
    };
    let out = net.forward(&mut tape, x, opts, GatePolicy::Sample { rng: noise, tau }, Trainable::Gates)?;
    let task = net.task_loss(&mut tape, &out, y)?;
    let inputs = net.collect_cost_inputs(&out)?;
    let probs = if cfg.cost_uses_sampled_probs {
        inputs.probs.clone()
    } else {
        net.noise_free_probs(&mut tape, &out, tau)?
    };
    let total = expected_flops(&mut tape, &inputs.specs, &probs, &inputs.candidates, inputs.constant)?;
    let cost = cost_term(&mut tape, total, cfg.lambda)?;
    let loss = tape.add(task, cost)?;
    let step = GateStep {
        task: tape.value(task).item().as_f64(),
        cost: tape.value(cost).item().as_f64(),
    };
    if !(step.task + step.cost).is_finite() {
        return Ok(step);
    }
    tape.backward(loss)?;
    net.zero_grads();
    net.accumulate_grads(&tape, &out);
    adam.step(net, lr)?;
    if net.checksum(ParamKind::Weight) != weights_before {
        return Err(Error::Invariant("a gate step changed weights".into()));
    }
    let stats_after: Vec<_> = net.running_stats().iter().map(|(_, s)| (*s).clone()).collect();
    if stats_after != stats_before {
        return Err(Error::Invariant("a gate step changed batch-norm statistics".into()));
    }
    Ok(step)
}

/// Number of gate steps one search epoch performs.
pub fn gate_steps_per_epoch(n_train: usize, cfg: &SearchConfig) -> usize {
    n_train.div_ceil(cfg.batch_size.max(1)) / cfg.weight_steps_per_gate_step.max(1)
}

/// Temperature schedule of the whole search stage: the first gate step runs
/// at `tau_start`, the last at `tau_end`.
pub fn search_schedule(n_train: usize, cfg: &SearchConfig) -> Result<TemperatureSchedule> {
    let total = gate_steps_per_epoch(n_train, cfg) * cfg.search_epochs;
    TemperatureSchedule::new(cfg.tau_start, cfg.tau_end, total.saturating_sub(1).max(1) as u64)
}

/// Alternates weight steps on `train` and gate steps on `val`.
pub fn search<T: Element>(
    net: &mut Network<T>,
    data: &Dataset,
    train: &[usize],
    val: &[usize],
    cfg: &SearchConfig,
    seeds: &SeedTree,
    history: &mut SearchHistory,
) -> Result<()> {
    cfg.validate()?;
    if !net.is_gated() {
        return Err(Error::State("search needs a gated network".into()));
    }
    let per_epoch = gate_steps_per_epoch(train.len(), cfg);
    if per_epoch == 0 && cfg.search_epochs > 0 {
        return Err(Error::Config(format!(
            "{} training samples give no gate step at batch size {} and ratio {}",
            train.len(),
            cfg.batch_size,
            cfg.weight_steps_per_gate_step
        )));
    }
    let schedule = search_schedule(train.len(), cfg)?;
    let mut train_shuffle = seeds.fork_indexed(Purpose::SearchShuffle, 0);
    let mut val_shuffle = seeds.fork_indexed(Purpose::SearchShuffle, 1);
    let mut noise = seeds.fork(Purpose::SearchNoise);
    let mut sgd = Sgd::new(net, net.param_indices(ParamKind::Weight), cfg.momentum, cfg.weight_decay);
    let mut adam = Adam::new(net, net.param_indices(ParamKind::Gate), AdamParams::default());
    let weight_opts = ForwardOptions {
        mode: BnMode::Train,
        scale_before_bn: cfg.scale_before_bn,
    };
    let mut gate_step_index = 0u64;
    let mut val_queue: Vec<Vec<usize>> = Vec::new();
    for search_epoch in 0..cfg.search_epochs {
        assert_disjoint(train, val, data.len())?;
        let epoch = history.next_epoch();
        let lr_w = lr_at(cfg.search_lr(), &cfg.search_lr_decay_epochs, search_epoch);
        let lr_g = lr_w / 10.0;
        let (mut w_losses, mut g_losses, mut costs) = (Vec::new(), Vec::new(), Vec::new());
        let mut tau = schedule.temperature_at(gate_step_index);
        let train_batches = batches(train, cfg.batch_size, &mut train_shuffle);
        let mut gates_done = 0;
        for (step, batch) in train_batches.iter().enumerate() {
            let (x, y) = data.batch::<T>(batch)?;
            let policy = GatePolicy::Sample { rng: &mut noise, tau };
            let loss = weight_step(net, &mut sgd, &x, &y, weight_opts, policy, lr_w)?;
            check_loss(loss, "weight", epoch, step)?;
            w_losses.push(loss);
            if (step + 1) % cfg.weight_steps_per_gate_step != 0 || gates_done == per_epoch {
                continue;
            }
            if val_queue.is_empty() {
                val_queue = batches(val, cfg.batch_size, &mut val_shuffle);
                val_queue.reverse();
            }
            let vb = val_queue.pop().expect("validation split is nonempty");
            let (x, y) = data.batch::<T>(&vb)?;
            let g = gate_step(net, &mut adam, &x, &y, cfg, &mut noise, tau, lr_g)?;
            check_loss(g.task + g.cost, "gate", epoch, step)?;
            history.temperatures.push(tau);
            g_losses.push(g.task);
            costs.push(g.cost);
            gates_done += 1;
            gate_step_index += 1;
            tau = schedule.temperature_at(gate_step_index.min(schedule.total_steps));
        }
        let t_report = *history.temperatures.last().unwrap_or(&cfg.tau_start);
        let mflops = expected_flops_at(net, t_report)? / 1e6;
        let ec = expected_c(net, t_report);
        history.rows.push(HistoryRow {
            epoch,
            split: "train".into(),
            task_loss: mean(&w_losses),
            cost_term: 0.0,
            expected_mflops: mflops,
            temperature: t_report,
            lr_weights: lr_w,
            lr_gates: lr_g,
            expected_c: ec.clone(),
        });
        history.rows.push(HistoryRow {
            epoch,
            split: "val".into(),
            task_loss: mean(&g_losses),
            cost_term: mean(&costs),
            expected_mflops: mflops,
            temperature: t_report,
            lr_weights: lr_w,
            lr_gates: lr_g,
            expected_c: ec,
        });
    }
    assert_disjoint(train, val, data.len())?;
    Ok(())
}

/// Schedule of plain (gate-free) training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSchedule {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub decay_epochs: Vec<usize>,
    pub momentum: f64,
    pub weight_decay: f64,
}

/// Trains all weights with gates off; returns the mean loss of every epoch.
pub fn train_weights<T: Element, R: Rng>(
    net: &mut Network<T>,
    data: &Dataset,
    indices: &[usize],
    schedule: &TrainSchedule,
    shuffle: &mut R,
) -> Result<Vec<f64>> {
    if schedule.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let mut sgd = Sgd::new(net, net.param_indices(ParamKind::Weight), schedule.momentum, schedule.weight_decay);
    let mut curve = Vec::with_capacity(schedule.epochs);
    for epoch in 0..schedule.epochs {
        let lr = lr_at(schedule.lr, &schedule.decay_epochs, epoch);
        let mut losses = Vec::new();
        for (step, batch) in batches(indices, schedule.batch_size, shuffle).iter().enumerate() {
            let (x, y) = data.batch::<T>(batch)?;
            let loss = weight_step(net, &mut sgd, &x, &y, ForwardOptions::train(), GatePolicy::Off, lr)?;
            check_loss(loss, "training", epoch, step)?;
            losses.push(loss);
        }
        curve.push(mean(&losses));
    }
    Ok(curve)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub loss: f64,
    /// Top-1 accuracy in percent, classification only.
    pub accuracy: Option<f64>,
    pub samples: usize,
}

/// Eval-mode loss (and accuracy) over `indices`. Gated networks run with
/// noise-free gates at `tau`; gate-free ones ignore it.
pub fn evaluate<T: Element>(
    net: &mut Network<T>,
    data: &Dataset,
    indices: &[usize],
    batch_size: usize,
    tau: f64,
) -> Result<Metrics> {
    if indices.is_empty() {
        return Err(Error::EmptyDataset("nothing to evaluate".into()));
    }
    let (mut loss, mut correct) = (0.0, 0usize);
    for chunk in indices.chunks(batch_size.max(1)) {
        let (x, y) = data.batch::<T>(chunk)?;
        let mut tape = Tape::new();
        let policy = if net.is_gated() {
            GatePolicy::NoiseFree { tau }
        } else {
            GatePolicy::Off
        };
        let out = net.forward(&mut tape, &x, ForwardOptions::with_mode(BnMode::Eval), policy, Trainable::None)?;
        let l = net.task_loss(&mut tape, &out, &y)?;
        loss += tape.value(l).item().as_f64() * chunk.len() as f64;
        if let Targets::Labels(labels) = &y {
            let logits = tape.value(out.output);
            let k = logits.shape()[1];
            for (row, &label) in logits.data().chunks_exact(k).zip(labels) {
                let best = row
                    .iter()
                    .enumerate()
                    .fold(0, |b, (i, v)| if *v > row[b] { i } else { b });
                correct += (best == label) as usize;
            }
        }
    }
    Ok(Metrics {
        loss: loss / indices.len() as f64,
        accuracy: (data.task() == Task::Classify).then(|| 100.0 * correct as f64 / indices.len() as f64),
        samples: indices.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn step_decay() {
        assert_eq!(lr_at(0.1, &[100], 50), 0.1);
        assert!((lr_at(0.1, &[100], 100) - 0.01).abs() < 1e-15);
        assert!((lr_at(0.1, &[50, 100], 120) - 0.001).abs() < 1e-15);
    }

    #[test]
    fn overlapping_splits_are_rejected() {
        assert!(assert_disjoint(&[0, 1], &[2], 3).is_ok());
        assert!(matches!(assert_disjoint(&[0, 1], &[1], 3), Err(Error::Invariant(_))));
    }
}
