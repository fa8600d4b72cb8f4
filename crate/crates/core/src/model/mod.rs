//! Desk-scale prunable networks.
//!
//! Two architectures are provided. `plain_cnn6` stacks six 3x3
//! conv-BN-ReLU units (widths `b, b, 2b, 2b, 4b, 4b`, 2x2 average pooling
//! after the second and fourth) with every convolution prunable.
//! `mini_resnet` has a stem convolution and three residual blocks of widths
//! `b, 2b, 4b`; only the first convolution inside each block is prunable, so
//! block outputs and shortcuts always keep their full width.
//!
//! A [`Network`] with `spec.widths == None` is a gated supernet; with
//! explicit widths it is a plain slim network (no gates).

mod checkpoint;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{BnMode, RunningStats, Tape, Var};
use crate::cost::LayerCostSpec;
use crate::error::{Error, Result};
use crate::gates::{gate_probs, sample_gumbel, CandidateSet, GateSample};
use crate::shared_conv::PrunableConv;
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    PlainCnn6,
    MiniResnet,
}

impl std::str::FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plain_cnn6" => Ok(Arch::PlainCnn6),
            "mini_resnet" => Ok(Arch::MiniResnet),
            other => Err(Error::Config(format!("unknown architecture `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Head {
    Classify { num_classes: usize },
    Regress { out_channels: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub arch: Arch,
    pub base_channels: usize,
    pub in_channels: usize,
    pub image_h: usize,
    pub image_w: usize,
    pub head: Head,
    pub n_groups: usize,
    /// Output widths of the prunable layers of an extracted network.
    #[serde(default)]
    pub widths: Option<Vec<usize>>,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl ModelSpec {
    pub fn new(arch: Arch, base_channels: usize, in_channels: usize, image: (usize, usize), head: Head) -> Self {
        ModelSpec {
            arch,
            base_channels,
            in_channels,
            image_h: image.0,
            image_w: image.1,
            head,
            n_groups: 8,
            widths: None,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        }
    }

    pub fn is_gated(&self) -> bool {
        self.widths.is_none()
    }

    /// Full widths of the prunable layers, in forward order.
    pub fn full_widths(&self) -> Vec<usize> {
        let b = self.base_channels;
        match self.arch {
            Arch::PlainCnn6 => vec![b, b, 2 * b, 2 * b, 4 * b, 4 * b],
            Arch::MiniResnet => vec![b, 2 * b, 4 * b],
        }
    }

    pub fn with_widths(&self, widths: Vec<usize>) -> Self {
        ModelSpec {
            widths: Some(widths),
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamKind {
    Weight,
    Gate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Slot {
    PrunableKernel(usize),
    Gate(usize),
    Kernel(usize),
    Gamma(usize),
    Beta(usize),
    LinearWeight,
    LinearBias,
}

#[derive(Debug, Clone)]
struct RegistryEntry {
    name: String,
    kind: ParamKind,
    slot: Slot,
}

#[derive(Debug, Clone)]
struct PlainConv<T> {
    kernel: Tensor<T>,
    stride: usize,
    padding: usize,
}

#[derive(Debug, Clone)]
struct BatchNormLayer<T> {
    name: String,
    gamma: Tensor<T>,
    beta: Tensor<T>,
    stats: RunningStats<T>,
}

#[derive(Debug, Clone)]
struct LinearLayer<T> {
    weight: Tensor<T>,
    bias: Tensor<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ConvRef {
    Prunable(usize),
    Plain(usize),
}

#[derive(Debug, Clone, Copy)]
struct Unit {
    conv: ConvRef,
    bn: Option<usize>,
    relu: bool,
}

#[derive(Debug, Clone, Copy)]
enum Stage {
    Unit(Unit),
    Pool,
    Residual {
        a: Unit,
        b: Unit,
        shortcut: Option<Unit>,
    },
    LinearHead,
}

/// Geometry of one convolution as built (actual widths).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct ConvShape {
    kernel: usize,
    in_channels: usize,
    out_channels: usize,
    out_h: usize,
    out_w: usize,
}

impl ConvShape {
    fn flops(&self) -> u64 {
        (self.kernel * self.kernel * self.in_channels * self.out_h * self.out_w * self.out_channels)
            as u64
    }
}

/// Forward-pass settings that do not involve gates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ForwardOptions {
    pub mode: BnMode,
    /// Weight channels before batch norm instead of after it.
    pub scale_before_bn: bool,
}

impl ForwardOptions {
    pub fn train() -> Self {
        ForwardOptions {
            mode: BnMode::Train,
            scale_before_bn: false,
        }
    }

    pub fn with_mode(mode: BnMode) -> Self {
        ForwardOptions {
            mode,
            scale_before_bn: false,
        }
    }
}

/// How prunable layers obtain their gate probabilities in one forward pass.
pub enum GatePolicy<'a, T> {
    /// Fresh Gumbel noise per layer from `rng`.
    Sample { rng: &'a mut dyn rand::RngCore, tau: f64 },
    /// Given noise per layer (gradient checks, replay).
    Noise { noise: &'a [Vec<T>], tau: f64 },
    /// Plain softmax of `theta / tau`.
    NoiseFree { tau: f64 },
    /// Constant probabilities per layer, not differentiable.
    FixedProbs(&'a [Vec<T>]),
    /// No gating at all: plain convolutions.
    Off,
}

pub struct ForwardOut<T> {
    pub output: Var,
    /// One sample per prunable layer, in layer order; empty when gates are off.
    pub samples: Vec<GateSample<T>>,
    params: Vec<Var>,
}

impl<T> ForwardOut<T> {
    /// Leaves bound to the parameters, in registry order.
    pub fn param_vars(&self) -> &[Var] {
        &self.params
    }
}

/// Aligned inputs of the expected-FLOPs term.
#[derive(Debug, Clone)]
pub struct CostInputs {
    pub specs: Vec<LayerCostSpec>,
    pub probs: Vec<Var>,
    pub candidates: Vec<CandidateSet>,
    /// FLOPs of non-prunable layers at their fixed width.
    pub constant: f64,
}

/// Which parameters are bound with `requires_grad`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Trainable {
    Weights,
    Gates,
    All,
    None,
}

impl Trainable {
    fn includes(self, kind: ParamKind) -> bool {
        matches!(
            (self, kind),
            (Trainable::All, _) | (Trainable::Weights, ParamKind::Weight) | (Trainable::Gates, ParamKind::Gate)
        )
    }
}

#[derive(Debug, Clone)]
pub enum Targets<T> {
    Labels(Vec<usize>),
    Values(Tensor<T>),
}

#[derive(Debug, Clone)]
pub struct Network<T> {
    spec: ModelSpec,
    prunable: Vec<PrunableConv<T>>,
    prunable_shapes: Vec<ConvShape>,
    prunable_costs: Vec<LayerCostSpec>,
    convs: Vec<PlainConv<T>>,
    conv_shapes: Vec<ConvShape>,
    bns: Vec<BatchNormLayer<T>>,
    linear: Option<LinearLayer<T>>,
    stages: Vec<Stage>,
    registry: Vec<RegistryEntry>,
    grads: Vec<Vec<T>>,
}

/// Builder state while laying out a network.
struct Layout<'r, T, R: Rng> {
    net: Network<T>,
    rng: &'r mut R,
    channels: usize,
    h: usize,
    w: usize,
    widths: Vec<usize>,
    full_widths: Vec<usize>,
    full_channels: usize,
    gated: bool,
}

fn gaussian<T: Element, R: Rng>(rng: &mut R, shape: Vec<usize>, std: f64) -> Tensor<T> {
    let normal = Normal::new(0.0, std).expect("positive std");
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::from_f64_lossy(normal.sample(rng))).collect();
    Tensor::new(shape, data).expect("shape matches")
}

impl<'r, T: Element, R: Rng> Layout<'r, T, R> {
    fn register(&mut self, name: String, kind: ParamKind, slot: Slot) {
        self.net.registry.push(RegistryEntry { name, kind, slot });
    }

    fn kernel(&mut self, out: usize, input: usize, k: usize) -> Tensor<T> {
        let fan_in = (input * k * k) as f64;
        gaussian(self.rng, vec![out, input, k, k], (2.0 / fan_in).sqrt())
    }

    fn batchnorm(&mut self, name: &str, channels: usize) -> usize {
        let idx = self.net.bns.len();
        self.net.bns.push(BatchNormLayer {
            name: name.to_string(),
            gamma: Tensor::full(vec![channels], T::one()),
            beta: Tensor::zeros(vec![channels]),
            stats: RunningStats::new(channels),
        });
        self.register(format!("{name}.gamma"), ParamKind::Weight, Slot::Gamma(idx));
        self.register(format!("{name}.beta"), ParamKind::Weight, Slot::Beta(idx));
        idx
    }

    fn out_size(&self, k: usize, stride: usize, padding: usize) -> Result<(usize, usize)> {
        let f = |s: usize| -> Result<usize> {
            let padded = s + 2 * padding;
            if padded < k || !(padded - k).is_multiple_of(stride) {
                return Err(Error::Config(format!(
                    "spatial size {s} incompatible with kernel {k}, stride {stride}, padding {padding}"
                )));
            }
            Ok((padded - k) / stride + 1)
        };
        Ok((f(self.h)?, f(self.w)?))
    }

    /// Plain (never gated) convolution with batch norm.
    fn plain_unit(&mut self, name: &str, out: usize, k: usize, bn: bool, relu: bool) -> Result<Unit> {
        let padding = k / 2;
        let (oh, ow) = self.out_size(k, 1, padding)?;
        let kernel = self.kernel(out, self.channels, k);
        let idx = self.net.convs.len();
        self.net.convs.push(PlainConv {
            kernel,
            stride: 1,
            padding,
        });
        self.net.conv_shapes.push(ConvShape {
            kernel: k,
            in_channels: self.channels,
            out_channels: out,
            out_h: oh,
            out_w: ow,
        });
        self.register(format!("{name}.weight"), ParamKind::Weight, Slot::Kernel(idx));
        let bn = bn.then(|| self.batchnorm(&format!("{name}.bn"), out));
        self.channels = out;
        self.full_channels = out;
        self.h = oh;
        self.w = ow;
        Ok(Unit {
            conv: ConvRef::Plain(idx),
            bn,
            relu,
        })
    }

    /// The `i`-th prunable 3x3 convolution with batch norm and ReLU.
    fn prunable_unit(&mut self, name: &str, i: usize) -> Result<Unit> {
        let (full, width) = (self.full_widths[i], self.widths[i]);
        let (oh, ow) = self.out_size(3, 1, 1)?;
        let kernel = self.kernel(width, self.channels, 3);
        let cost = LayerCostSpec {
            kernel_h: 3,
            kernel_w: 3,
            in_channels: self.full_channels,
            out_h: oh,
            out_w: ow,
            full_out: full,
        };
        let shape = ConvShape {
            kernel: 3,
            in_channels: self.channels,
            out_channels: width,
            out_h: oh,
            out_w: ow,
        };
        let conv = if self.gated {
            let idx = self.net.prunable.len();
            let layer = PrunableConv::new(name, kernel, self.net.spec.n_groups, 1, 1)?;
            self.net.prunable.push(layer);
            self.net.prunable_shapes.push(shape);
            self.net.prunable_costs.push(cost);
            self.register(format!("{name}.weight"), ParamKind::Weight, Slot::PrunableKernel(idx));
            self.register(format!("{name}.gate"), ParamKind::Gate, Slot::Gate(idx));
            ConvRef::Prunable(idx)
        } else {
            let idx = self.net.convs.len();
            self.net.convs.push(PlainConv {
                kernel,
                stride: 1,
                padding: 1,
            });
            self.net.conv_shapes.push(shape);
            self.net.prunable_costs.push(cost);
            self.register(format!("{name}.weight"), ParamKind::Weight, Slot::Kernel(idx));
            ConvRef::Plain(idx)
        };
        let bn = self.batchnorm(&format!("{name}.bn"), width);
        self.channels = width;
        self.full_channels = full;
        self.h = oh;
        self.w = ow;
        Ok(Unit {
            conv,
            bn: Some(bn),
            relu: true,
        })
    }

    fn pool(&mut self) -> Result<Stage> {
        if !self.h.is_multiple_of(2) || !self.w.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "cannot pool a {}x{} feature map",
                self.h, self.w
            )));
        }
        self.h /= 2;
        self.w /= 2;
        Ok(Stage::Pool)
    }

    fn head(&mut self) -> Result<Stage> {
        match self.net.spec.head {
            Head::Classify { num_classes } => {
                let fan_in = self.channels as f64;
                let weight = gaussian(self.rng, vec![num_classes, self.channels], (1.0 / fan_in).sqrt());
                self.net.linear = Some(LinearLayer {
                    weight,
                    bias: Tensor::zeros(vec![num_classes]),
                });
                self.register("fc.weight".into(), ParamKind::Weight, Slot::LinearWeight);
                self.register("fc.bias".into(), ParamKind::Weight, Slot::LinearBias);
                Ok(Stage::LinearHead)
            }
            Head::Regress { out_channels } => {
                Ok(Stage::Unit(self.plain_unit("head", out_channels, 3, false, false)?))
            }
        }
    }
}

/// Lays out the network described by `spec`, drawing initial weights from
/// `rng`. Gates start at zero.
pub fn build_model<T: Element, R: Rng>(spec: &ModelSpec, rng: &mut R) -> Result<Network<T>> {
    if spec.base_channels == 0 || spec.in_channels == 0 || spec.image_h == 0 || spec.image_w == 0 {
        return Err(Error::Config(format!("degenerate model spec {spec:?}")));
    }
    if spec.n_groups == 0 {
        return Err(Error::Config("n_groups must be at least 1".into()));
    }
    match spec.head {
        Head::Classify { num_classes: 0 } | Head::Regress { out_channels: 0 } => {
            return Err(Error::Config("model head needs at least one output".into()))
        }
        _ => {}
    }
    let full_widths = spec.full_widths();
    let widths = spec.widths.clone().unwrap_or_else(|| full_widths.clone());
    if widths.len() != full_widths.len()
        || widths.iter().zip(&full_widths).any(|(&w, &f)| w == 0 || w > f)
    {
        return Err(Error::Config(format!(
            "widths {widths:?} do not fit full widths {full_widths:?}"
        )));
    }
    let mut l = Layout {
        net: Network {
            spec: spec.clone(),
            prunable: Vec::new(),
            prunable_shapes: Vec::new(),
            prunable_costs: Vec::new(),
            convs: Vec::new(),
            conv_shapes: Vec::new(),
            bns: Vec::new(),
            linear: None,
            stages: Vec::new(),
            registry: Vec::new(),
            grads: Vec::new(),
        },
        rng,
        channels: spec.in_channels,
        h: spec.image_h,
        w: spec.image_w,
        widths,
        full_widths,
        full_channels: spec.in_channels,
        gated: spec.is_gated(),
    };
    let classify = matches!(spec.head, Head::Classify { .. });
    let mut stages = Vec::new();
    match spec.arch {
        Arch::PlainCnn6 => {
            for i in 0..6 {
                stages.push(Stage::Unit(l.prunable_unit(&format!("conv{}", i + 1), i)?));
                if classify && (i == 1 || i == 3) {
                    stages.push(l.pool()?);
                }
            }
        }
        Arch::MiniResnet => {
            let b = spec.base_channels;
            stages.push(Stage::Unit(l.plain_unit("stem", b, 3, true, true)?));
            for i in 0..3 {
                if classify && i > 0 {
                    stages.push(l.pool()?);
                }
                let name = format!("block{}", i + 1);
                let block_in = l.channels;
                let out = l.full_widths[i];
                let a = l.prunable_unit(&format!("{name}.conv_a"), i)?;
                let b_unit = l.plain_unit(&format!("{name}.conv_b"), out, 3, true, false)?;
                let shortcut = if block_in != out {
                    l.channels = block_in;
                    Some(l.plain_unit(&format!("{name}.shortcut"), out, 1, true, false)?)
                } else {
                    None
                };
                let skip_width = shortcut
                    .map(|u| l.net.unit_out_channels(&u))
                    .unwrap_or(block_in);
                if skip_width != l.net.unit_out_channels(&b_unit) {
                    return Err(Error::structural(
                        &name,
                        format!(
                            "residual add of {skip_width} and {} channels",
                            l.net.unit_out_channels(&b_unit)
                        ),
                    ));
                }
                l.channels = out;
                stages.push(Stage::Residual {
                    a,
                    b: b_unit,
                    shortcut,
                });
            }
        }
    }
    stages.push(l.head()?);
    let mut net = l.net;
    net.stages = stages;
    net.grads = net
        .registry
        .iter()
        .map(|e| vec![T::zero(); net.slot(e.slot).numel()])
        .collect();
    Ok(net)
}

impl<T: Element> Network<T> {
    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn is_gated(&self) -> bool {
        !self.prunable.is_empty()
    }

    pub fn prunable_layers(&self) -> &[PrunableConv<T>] {
        &self.prunable
    }

    /// Names of the prunable layers (supernet) or their slim counterparts.
    pub fn prunable_names(&self) -> Vec<String> {
        if self.is_gated() {
            self.prunable.iter().map(|p| p.name.clone()).collect()
        } else {
            let n = self.spec.full_widths().len();
            match self.spec.arch {
                Arch::PlainCnn6 => (1..=n).map(|i| format!("conv{i}")).collect(),
                Arch::MiniResnet => (1..=n).map(|i| format!("block{i}.conv_a")).collect(),
            }
        }
    }

    pub fn candidates(&self) -> Vec<CandidateSet> {
        self.prunable.iter().map(|p| p.candidates.clone()).collect()
    }

    /// Cost specs of the prunable layers (built with unpruned widths).
    pub fn cost_specs(&self) -> &[LayerCostSpec] {
        &self.prunable_costs
    }

    fn unit_out_channels(&self, u: &Unit) -> usize {
        match u.conv {
            ConvRef::Prunable(i) => self.prunable_shapes[i].out_channels,
            ConvRef::Plain(i) => self.conv_shapes[i].out_channels,
        }
    }

    fn slot(&self, slot: Slot) -> &Tensor<T> {
        match slot {
            Slot::PrunableKernel(i) => &self.prunable[i].kernel,
            Slot::Gate(i) => &self.prunable[i].gate.theta,
            Slot::Kernel(i) => &self.convs[i].kernel,
            Slot::Gamma(i) => &self.bns[i].gamma,
            Slot::Beta(i) => &self.bns[i].beta,
            Slot::LinearWeight => &self.linear.as_ref().expect("linear head").weight,
            Slot::LinearBias => &self.linear.as_ref().expect("linear head").bias,
        }
    }

    fn slot_mut(&mut self, slot: Slot) -> &mut Tensor<T> {
        match slot {
            Slot::PrunableKernel(i) => &mut self.prunable[i].kernel,
            Slot::Gate(i) => &mut self.prunable[i].gate.theta,
            Slot::Kernel(i) => &mut self.convs[i].kernel,
            Slot::Gamma(i) => &mut self.bns[i].gamma,
            Slot::Beta(i) => &mut self.bns[i].beta,
            Slot::LinearWeight => &mut self.linear.as_mut().expect("linear head").weight,
            Slot::LinearBias => &mut self.linear.as_mut().expect("linear head").bias,
        }
    }

    pub fn num_params(&self) -> usize {
        self.registry.len()
    }

    pub fn param_name(&self, i: usize) -> &str {
        &self.registry[i].name
    }

    pub fn param_kind(&self, i: usize) -> ParamKind {
        self.registry[i].kind
    }

    /// Parameter values in registry order.
    pub fn params(&self) -> Vec<Tensor<T>> {
        (0..self.num_params()).map(|i| self.param(i).clone()).collect()
    }

    pub fn param(&self, i: usize) -> &Tensor<T> {
        self.slot(self.registry[i].slot)
    }

    pub fn param_mut(&mut self, i: usize) -> &mut Tensor<T> {
        let slot = self.registry[i].slot;
        self.slot_mut(slot)
    }

    pub fn grad(&self, i: usize) -> &[T] {
        &self.grads[i]
    }

    /// Runs `f(value, grad)` on parameter `i`.
    pub fn update_param(&mut self, i: usize, f: impl FnOnce(&mut [T], &[T])) {
        let grad = std::mem::take(&mut self.grads[i]);
        f(self.param_mut(i).data_mut(), &grad);
        self.grads[i] = grad;
    }

    pub fn param_indices(&self, kind: ParamKind) -> Vec<usize> {
        (0..self.registry.len())
            .filter(|&i| self.registry[i].kind == kind)
            .collect()
    }

    pub fn find_param(&self, name: &str) -> Option<usize> {
        self.registry.iter().position(|e| e.name == name)
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            g.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    /// Adds the tape gradients of a finished backward pass.
    pub fn accumulate_grads(&mut self, tape: &Tape<T>, out: &ForwardOut<T>) {
        for (g, &v) in self.grads.iter_mut().zip(&out.params) {
            if let Some(tg) = tape.grad(v) {
                for (a, &b) in g.iter_mut().zip(tg) {
                    *a = *a + b;
                }
            }
        }
    }

    pub fn gate_logits(&self) -> Vec<Vec<T>> {
        self.prunable.iter().map(|p| p.gate.theta.data().to_vec()).collect()
    }

    pub fn set_gate_logits(&mut self, logits: &[Vec<T>]) -> Result<()> {
        if logits.len() != self.prunable.len() {
            return Err(Error::Dimension(format!(
                "{} gate vectors for {} prunable layers",
                logits.len(),
                self.prunable.len()
            )));
        }
        for (p, l) in self.prunable.iter_mut().zip(logits) {
            if l.len() != p.gate.len() {
                return Err(Error::Dimension(format!(
                    "layer {} has {} gates, got {}",
                    p.name,
                    p.gate.len(),
                    l.len()
                )));
            }
            p.gate.theta.data_mut().copy_from_slice(l);
        }
        Ok(())
    }

    pub fn running_stats(&self) -> Vec<(&str, &RunningStats<T>)> {
        self.bns.iter().map(|b| (b.name.as_str(), &b.stats)).collect()
    }

    pub fn running_stats_mut(&mut self) -> Vec<(&str, &mut RunningStats<T>)> {
        self.bns
            .iter_mut()
            .map(|b| (b.name.as_str(), &mut b.stats))
            .collect()
    }

    /// Total convolution evaluations counted by the prunable layers.
    pub fn prunable_conv_evals(&self) -> Vec<u64> {
        self.prunable.iter().map(|p| p.conv_eval_count()).collect()
    }

    /// Per-sample FLOPs of every convolution and the linear head at the
    /// actual (possibly pruned) widths, input coupling included.
    pub fn true_flops(&self) -> u64 {
        let convs: u64 = self
            .prunable_shapes
            .iter()
            .chain(&self.conv_shapes)
            .map(ConvShape::flops)
            .sum();
        convs + self.linear_flops()
    }

    fn linear_flops(&self) -> u64 {
        self.linear
            .as_ref()
            .map(|l| l.weight.numel() as u64)
            .unwrap_or(0)
    }

    /// FLOPs of layers that are not searched (non-prunable convolutions and
    /// the linear head) in the unpruned network.
    pub fn constant_flops(&self) -> Result<u64> {
        if !self.is_gated() {
            return self.unpruned()?.constant_flops();
        }
        let plain: u64 = self.conv_shapes.iter().map(ConvShape::flops).sum();
        Ok(plain + self.linear_flops())
    }

    /// Per-sample FLOPs of the unpruned network.
    pub fn unpruned_flops(&self) -> Result<u64> {
        if self.is_gated() {
            return Ok(self.true_flops());
        }
        Ok(self.unpruned()?.true_flops())
    }

    fn unpruned(&self) -> Result<Network<T>> {
        let spec = ModelSpec {
            widths: None,
            ..self.spec.clone()
        };
        build_model(&spec, &mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0))
    }

    /// Binds every parameter as a leaf, in registry order.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: Trainable) -> Vec<Var> {
        self.registry
            .iter()
            .map(|e| tape.leaf(self.slot(e.slot).clone(), trainable.includes(e.kind)))
            .collect()
    }

    fn var_of(&self, vars: &[Var], slot: Slot) -> Var {
        let i = self
            .registry
            .iter()
            .position(|e| e.slot == slot)
            .expect("every slot is registered");
        vars[i]
    }

    /// Runs the network on `input` (`[N, C, H, W]`).
    pub fn forward(
        &mut self,
        tape: &mut Tape<T>,
        input: &Tensor<T>,
        opts: ForwardOptions,
        gates: GatePolicy<'_, T>,
        trainable: Trainable,
    ) -> Result<ForwardOut<T>> {
        let params = self.bind(tape, trainable);
        self.forward_with_params(tape, input, opts, gates, params)
    }

    /// [`Network::forward`] with parameter values taken from `params`,
    /// already on the tape in registry order.
    pub fn forward_with_params(
        &mut self,
        tape: &mut Tape<T>,
        input: &Tensor<T>,
        opts: ForwardOptions,
        mut gates: GatePolicy<'_, T>,
        params: Vec<Var>,
    ) -> Result<ForwardOut<T>> {
        if params.len() != self.registry.len() {
            return Err(Error::Dimension(format!(
                "{} bound parameters for {} registered",
                params.len(),
                self.registry.len()
            )));
        }
        for (v, e) in params.iter().zip(&self.registry) {
            if tape.value(*v).shape() != self.slot(e.slot).shape() {
                return Err(Error::Dimension(format!("bound value for `{}` has the wrong shape", e.name)));
            }
        }
        let s = input.shape();
        if s.len() != 4
            || s[1] != self.spec.in_channels
            || s[2] != self.spec.image_h
            || s[3] != self.spec.image_w
        {
            return Err(Error::Dimension(format!(
                "input {s:?} does not match model input [N, {}, {}, {}]",
                self.spec.in_channels, self.spec.image_h, self.spec.image_w
            )));
        }
        if let GatePolicy::Noise { noise, .. } | GatePolicy::FixedProbs(noise) = &gates {
            if noise.len() != self.prunable.len() {
                return Err(Error::Dimension(format!(
                    "{} gate vectors for {} prunable layers",
                    noise.len(),
                    self.prunable.len()
                )));
            }
        }
        let mut x = tape.constant(input.clone());
        let mut samples = Vec::new();
        let stages = self.stages.clone();
        for stage in &stages {
            x = match *stage {
                Stage::Unit(u) => self.unit(tape, &params, x, u, opts, &mut gates, &mut samples)?,
                Stage::Pool => tape.avg_pool2(x)?,
                Stage::Residual { a, b, shortcut } => {
                    let h = self.unit(tape, &params, x, a, opts, &mut gates, &mut samples)?;
                    let h = self.unit(tape, &params, h, b, opts, &mut gates, &mut samples)?;
                    let skip = match shortcut {
                        Some(sc) => self.unit(tape, &params, x, sc, opts, &mut gates, &mut samples)?,
                        None => x,
                    };
                    let sum = tape.add(h, skip)?;
                    tape.relu(sum)
                }
                Stage::LinearHead => {
                    let pooled = tape.global_avg_pool(x)?;
                    let w = self.var_of(&params, Slot::LinearWeight);
                    let b = self.var_of(&params, Slot::LinearBias);
                    tape.linear(pooled, w, b)?
                }
            };
        }
        Ok(ForwardOut {
            output: x,
            samples,
            params,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn unit(
        &mut self,
        tape: &mut Tape<T>,
        params: &[Var],
        x: Var,
        u: Unit,
        opts: ForwardOptions,
        gates: &mut GatePolicy<'_, T>,
        samples: &mut Vec<GateSample<T>>,
    ) -> Result<Var> {
        let (y, weights) = match u.conv {
            ConvRef::Plain(i) => {
                let k = self.var_of(params, Slot::Kernel(i));
                let c = &self.convs[i];
                (tape.conv2d(x, k, c.stride, c.padding)?, None)
            }
            ConvRef::Prunable(i) => {
                let k = self.var_of(params, Slot::PrunableKernel(i));
                let theta = self.var_of(params, Slot::Gate(i));
                match self.sample_gate(tape, i, theta, gates)? {
                    Some(sample) => {
                        let layer = &self.prunable[i];
                        let out = if opts.scale_before_bn {
                            (layer.forward_shared(tape, x, k, &sample)?, None)
                        } else {
                            let y = layer.conv(tape, x, k)?;
                            (y, Some(layer.channel_weights(tape, &sample)?))
                        };
                        samples.push(sample);
                        out
                    }
                    None => (self.prunable[i].conv(tape, x, k)?, None),
                }
            }
        };
        let mut h = y;
        if let Some(b) = u.bn {
            let mut gamma = self.var_of(params, Slot::Gamma(b));
            let mut beta = self.var_of(params, Slot::Beta(b));
            if let Some(w) = weights {
                // channel weighting after normalization folds into the affine part
                gamma = tape.mul(gamma, w)?;
                beta = tape.mul(beta, w)?;
            }
            let eps = T::from_f64_lossy(self.spec.bn_eps);
            let momentum = T::from_f64_lossy(self.spec.bn_momentum);
            let stats = &mut self.bns[b].stats;
            h = tape.batchnorm2d(h, gamma, beta, stats, opts.mode, eps, momentum)?;
        } else if let Some(w) = weights {
            h = tape.channel_scale(h, w)?;
        }
        if u.relu {
            h = tape.relu(h);
        }
        Ok(h)
    }

    fn sample_gate(
        &self,
        tape: &mut Tape<T>,
        layer: usize,
        theta: Var,
        gates: &mut GatePolicy<'_, T>,
    ) -> Result<Option<GateSample<T>>> {
        let k = self.prunable[layer].candidates.len();
        let sample = match gates {
            GatePolicy::Sample { rng, tau } => {
                let noise: Vec<T> = sample_gumbel(&mut **rng, k);
                gate_probs(tape, theta, &noise, T::from_f64_lossy(*tau))?
            }
            GatePolicy::Noise { noise, tau } => {
                gate_probs(tape, theta, &noise[layer], T::from_f64_lossy(*tau))?
            }
            GatePolicy::NoiseFree { tau } => {
                gate_probs(tape, theta, &vec![T::zero(); k], T::from_f64_lossy(*tau))?
            }
            GatePolicy::FixedProbs(probs) => {
                let p = &probs[layer];
                if p.len() != k {
                    return Err(Error::Dimension(format!(
                        "{} fixed probabilities for {k} candidates",
                        p.len()
                    )));
                }
                GateSample {
                    probs: tape.constant(Tensor::from_vec(p.clone())),
                    noise: vec![T::zero(); k],
                    tau: T::one(),
                }
            }
            GatePolicy::Off => return Ok(None),
        };
        Ok(Some(sample))
    }

    /// Noise-free gate probabilities of every prunable layer, recorded on
    /// the tape from the logits bound by `out`.
    pub fn noise_free_probs(&self, tape: &mut Tape<T>, out: &ForwardOut<T>, tau: f64) -> Result<Vec<Var>> {
        self.param_indices(ParamKind::Gate)
            .into_iter()
            .map(|i| {
                let theta = out.params[i];
                let zeros = vec![T::zero(); tape.value(theta).numel()];
                Ok(gate_probs(tape, theta, &zeros, T::from_f64_lossy(tau))?.probs)
            })
            .collect()
    }

    /// Cross-entropy for classification heads, MAE for regression heads.
    pub fn task_loss(&self, tape: &mut Tape<T>, out: &ForwardOut<T>, targets: &Targets<T>) -> Result<Var> {
        match (self.spec.head, targets) {
            (Head::Classify { .. }, Targets::Labels(l)) => tape.softmax_cross_entropy(out.output, l),
            (Head::Regress { .. }, Targets::Values(v)) => tape.mae_loss(out.output, v),
            _ => Err(Error::Config("targets do not match the model head".into())),
        }
    }

    /// Aligned expected-FLOPs inputs from the gate samples of `out`.
    pub fn collect_cost_inputs(&self, out: &ForwardOut<T>) -> Result<CostInputs> {
        if !self.is_gated() {
            return Err(Error::State("network has no gates".into()));
        }
        if out.samples.len() != self.prunable.len() {
            return Err(Error::State(format!(
                "forward pass produced {} gate samples for {} prunable layers",
                out.samples.len(),
                self.prunable.len()
            )));
        }
        Ok(CostInputs {
            specs: self.prunable_costs.clone(),
            probs: out.samples.iter().map(|s| s.probs).collect(),
            candidates: self.candidates(),
            constant: self.constant_flops()? as f64,
        })
    }

    /// Canonical parameter checksum, for frozen-parameter assertions.
    pub fn checksum(&self, kind: ParamKind) -> u64 {
        use std::hash::Hasher;
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for i in self.param_indices(kind) {
            for v in self.param(i).data() {
                h.write_u64(v.as_f64().to_bits());
            }
        }
        h.finish()
    }

    /// Per-channel slice lookup used by extraction: the parameter with the
    /// same name in `self`, cut down to `shape` by keeping leading indices.
    pub(crate) fn leading_block(&self, name: &str, shape: &[usize]) -> Result<Tensor<T>> {
        let i = self
            .find_param(name)
            .ok_or_else(|| Error::structural(name, "missing in source network"))?;
        leading_block(self.param(i), shape).map_err(|e| Error::structural(name, e.to_string()))
    }

    pub(crate) fn install_param(&mut self, i: usize, value: Tensor<T>) -> Result<()> {
        let dst = self.param_mut(i);
        if dst.shape() != value.shape() {
            return Err(Error::Dimension(format!(
                "parameter shape {:?} vs {:?}",
                dst.shape(),
                value.shape()
            )));
        }
        *dst = value;
        Ok(())
    }
}

/// Leading sub-block of `t` with the given (elementwise smaller) shape.
pub(crate) fn leading_block<T: Element>(t: &Tensor<T>, shape: &[usize]) -> Result<Tensor<T>> {
    let src = t.shape();
    if src.len() != shape.len() || src.iter().zip(shape).any(|(&s, &d)| d > s || d == 0) {
        return Err(Error::Dimension(format!("cannot cut {shape:?} out of {src:?}")));
    }
    let n: usize = shape.iter().product();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; shape.len()];
    for _ in 0..n {
        let mut off = 0;
        for (d, &i) in idx.iter().enumerate() {
            off = off * src[d] + i;
        }
        out.push(t.data()[off]);
        for d in (0..shape.len()).rev() {
            idx[d] += 1;
            if idx[d] < shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Tensor::new(shape.to_vec(), out)
}
