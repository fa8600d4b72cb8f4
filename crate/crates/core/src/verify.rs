//! Self-checks behind `dcss verify`: the weight-sharing identity against the
//! multi-path oracle, and finite-difference gradient checks of every
//! differentiable operation and of the full search loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{grad_check, GradCheckReport, BnMode, RunningStats, Tape, Var};
use crate::cost::{cost_term, expected_flops};
use crate::error::Result;
use crate::gates::{gate_probs, make_candidates, sample_gumbel};
use crate::model::{build_model, Arch, ForwardOptions, GatePolicy, Head, ModelSpec, Targets};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn random<T: Element, R: Rng>(rng: &mut R, shape: &[usize], lo: f64, hi: f64) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::from_f64_lossy(rng.gen_range(lo..hi))).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

/// Values with magnitude in `[0.1, 1)` and random sign (away from kinks).
fn away_from_zero<R: Rng>(rng: &mut R, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(0.1..1.0);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

/// Random geometry accepted by the strict output-size rule.
pub struct RandomLayer<T> {
    pub input: Tensor<T>,
    pub kernel: Tensor<T>,
    pub stride: usize,
    pub padding: usize,
    pub probs: Vec<f64>,
    pub n_groups: usize,
}

pub fn random_layer<T: Element, R: Rng>(rng: &mut R) -> RandomLayer<T> {
    let cout = rng.gen_range(4..=32);
    let cin = rng.gen_range(1..=8);
    let n_groups = rng.gen_range(1..=8);
    let stride = rng.gen_range(1..=2);
    let k = [1, 3][rng.gen_range(0..2)];
    let padding = k / 2;
    let out = rng.gen_range(1..=4);
    let size = (out - 1) * stride + k - 2 * padding;
    let batch = rng.gen_range(1..=2);
    let kk = make_candidates(cout, n_groups).expect("valid").len();
    let raw: Vec<f64> = (0..kk).map(|_| rng.gen_range(0.01..1.0)).collect();
    let total: f64 = raw.iter().sum();
    RandomLayer {
        input: random(rng, &[batch, cin, size.max(1), size.max(1)], -1.0, 1.0),
        kernel: random(rng, &[cout, cin, k, k], -1.0, 1.0),
        stride,
        padding,
        probs: raw.iter().map(|p| p / total).collect(),
        n_groups,
    }
}

/// Max |shared - oracle| over `configs` random layers, and whether the
/// convolution counts were exactly 1 and K.
#[cfg(feature = "oracle")]
pub fn weight_sharing_campaign<T: Element>(configs: usize, seed: u64) -> Result<(f64, bool)> {
    use crate::gates::GateSample;
    use crate::shared_conv::PrunableConv;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut worst, mut counts_ok) = (0.0f64, true);
    for _ in 0..configs {
        let l = random_layer::<T, _>(&mut rng);
        let layer = PrunableConv::new("layer", l.kernel.clone(), l.n_groups, l.stride, l.padding)?;
        let k = layer.candidates.len();
        let mut tape = Tape::new();
        let x = tape.constant(l.input.clone());
        let w = tape.constant(l.kernel.clone());
        let probs = tape.constant(Tensor::from_vec(l.probs.iter().map(|&p| T::from_f64_lossy(p)).collect()));
        let sample = GateSample {
            probs,
            noise: vec![T::zero(); k],
            tau: T::one(),
        };
        let before = layer.conv_eval_count();
        let a = layer.forward_shared(&mut tape, x, w, &sample)?;
        let mid = layer.conv_eval_count();
        let b = layer.forward_multipath_oracle(&mut tape, x, w, &sample)?;
        let after = layer.conv_eval_count();
        counts_ok &= mid - before == 1 && after - mid == k as u64;
        worst = worst.max(tape.value(a).max_abs_diff(tape.value(b))?);
    }
    Ok((worst, counts_ok))
}

/// `sum(y * r)` for a fixed random `r`, turning any output into a scalar.
fn scalarize<R: Rng>(tape: &mut Tape<f64>, y: Var, rng: &mut R) -> Result<Var> {
    let shape = tape.value(y).shape().to_vec();
    let r = tape.constant(random(rng, &shape, -1.0, 1.0));
    let p = tape.mul(y, r)?;
    Ok(tape.sum(p))
}

type OpCase = Box<dyn Fn(&mut ChaCha8Rng) -> Result<GradCheckReport>>;

fn check<F>(params: Vec<Tensor<f64>>, seed: u64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var], &mut ChaCha8Rng) -> Result<Var>,
{
    let g = |tape: &mut Tape<f64>, v: &[Var]| f(tape, v, &mut ChaCha8Rng::seed_from_u64(seed));
    grad_check(g, &params, 1e-5)
}

/// Every differentiable operation as a named gradient-check case.
pub fn op_cases() -> Vec<(&'static str, OpCase)> {
    let mut cases: Vec<(&'static str, OpCase)> = Vec::new();
    cases.push((
        "conv2d",
        Box::new(|rng| {
            let stride = rng.gen_range(1..=2);
            let k = 3;
            let size = stride * 2 + 1;
            let x = random(rng, &[2, 2, size, size], -1.0, 1.0);
            let w = random(rng, &[3, 2, k, k], -1.0, 1.0);
            let seed = rng.gen();
            check(vec![x, w], seed, move |t, v, r| {
                let y = t.conv2d(v[0], v[1], stride, 1)?;
                scalarize(t, y, r)
            })
        }),
    ));
    cases.push((
        "channel_scale",
        Box::new(|rng| {
            let x = random(rng, &[2, 3, 2, 2], -1.0, 1.0);
            let s = random(rng, &[3], -1.0, 1.0);
            check(vec![x, s], rng.gen(), |t, v, r| {
                let y = t.channel_scale(v[0], v[1])?;
                scalarize(t, y, r)
            })
        }),
    ));
    cases.push((
        "batchnorm2d",
        Box::new(|rng| {
            let x = random(rng, &[3, 2, 2, 2], -2.0, 2.0);
            let g = random(rng, &[2], 0.5, 1.5);
            let b = random(rng, &[2], -1.0, 1.0);
            check(vec![x, g, b], rng.gen(), |t, v, r| {
                let mut stats = RunningStats::new(2);
                let y = t.batchnorm2d(v[0], v[1], v[2], &mut stats, BnMode::Train, 1e-5, 0.1)?;
                scalarize(t, y, r)
            })
        }),
    ));
    cases.push((
        "relu",
        Box::new(|rng| {
            let x = away_from_zero(rng, &[2, 3, 2]);
            check(vec![x], rng.gen(), |t, v, r| {
                let y = t.relu(v[0]);
                scalarize(t, y, r)
            })
        }),
    ));
    cases.push((
        "add",
        Box::new(|rng| {
            let a = random(rng, &[2, 3], -1.0, 1.0);
            let b = random(rng, &[2, 3], -1.0, 1.0);
            check(vec![a, b], rng.gen(), |t, v, r| {
                let y = t.add(v[0], v[1])?;
                scalarize(t, y, r)
            })
        }),
    ));
    cases.push((
        "mul",
        Box::new(|rng| {
            let a = random(rng, &[4], -1.0, 1.0);
            let b = random(rng, &[4], -1.0, 1.0);
            check(vec![a, b], rng.gen(), |t, v, r| {
                let y = t.mul(v[0], v[1])?;
                scalarize(t, y, r)
            })
        }),
    ));
    cases.push((
        "gate_probs",
        Box::new(|rng| {
            let theta = random(rng, &[5], -1.0, 1.0);
            let noise: Vec<f64> = sample_gumbel(rng, 5);
            let tau = rng.gen_range(0.5..3.0);
            check(vec![theta], rng.gen(), move |t, v, r| {
                let s = gate_probs(t, v[0], &noise, tau)?;
                scalarize(t, s.probs, r)
            })
        }),
    ));
    cases.push((
        "tail_expand_dot",
        Box::new(|rng| {
            let p = random(rng, &[4], 0.1, 1.0);
            check(vec![p], rng.gen(), |t, v, r| {
                let tail = t.reverse_cumsum(v[0]);
                let w = t.expand_blocks(tail, &[2, 3, 5, 8])?;
                let a = scalarize(t, w, r)?;
                let e = t.dot(v[0], &[2.0, 3.0, 5.0, 8.0])?;
                t.add(a, e)
            })
        }),
    ));
    cases.push((
        "pick_scale_by",
        Box::new(|rng| {
            let x = random(rng, &[2, 3], -1.0, 1.0);
            let p = random(rng, &[3], -1.0, 1.0);
            check(vec![x, p], rng.gen(), |t, v, r| {
                let s = t.pick(v[1], 1)?;
                let y = t.scale_by(v[0], s)?;
                scalarize(t, y, r)
            })
        }),
    ));
    cases.push((
        "ln_combine",
        Box::new(|rng| {
            let a = random(rng, &[1], 0.5, 2.0);
            let b = random(rng, &[1], 0.5, 2.0);
            check(vec![a, b], rng.gen(), |t, v, _| {
                let c = t.combine(&[v[0], v[1]], &[3.0, 0.5], 1.0)?;
                let l = t.ln(c)?;
                Ok(t.scale(l, 0.7))
            })
        }),
    ));
    cases.push((
        "linear",
        Box::new(|rng| {
            let x = random(rng, &[3, 4], -1.0, 1.0);
            let w = random(rng, &[2, 4], -1.0, 1.0);
            let b = random(rng, &[2], -1.0, 1.0);
            check(vec![x, w, b], rng.gen(), |t, v, r| {
                let y = t.linear(v[0], v[1], v[2])?;
                scalarize(t, y, r)
            })
        }),
    ));
    cases.push((
        "pooling",
        Box::new(|rng| {
            let x = random(rng, &[2, 2, 4, 4], -1.0, 1.0);
            check(vec![x], rng.gen(), |t, v, r| {
                let p = t.avg_pool2(v[0])?;
                let g = t.global_avg_pool(p)?;
                scalarize(t, g, r)
            })
        }),
    ));
    cases.push((
        "softmax_cross_entropy",
        Box::new(|rng| {
            let x = random(rng, &[3, 4], -2.0, 2.0);
            let labels: Vec<usize> = (0..3).map(|_| rng.gen_range(0..4)).collect();
            check(vec![x], rng.gen(), move |t, v, _| t.softmax_cross_entropy(v[0], &labels))
        }),
    ));
    cases.push((
        "mae_loss",
        Box::new(|rng| {
            let x = away_from_zero(rng, &[2, 1, 2, 2]);
            let target = Tensor::zeros(vec![2, 1, 2, 2]);
            check(vec![x], rng.gen(), move |t, v, _| t.mae_loss(v[0], &target))
        }),
    ));
    cases
}

/// Gradient check of `task loss + lambda * ln(expected FLOPs)` through every
/// weight and gate of a small supernet, with frozen Gumbel noise.
pub fn search_loss_grad_check(arch: Arch, seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut spec = ModelSpec::new(arch, 4, 2, (8, 8), Head::Classify { num_classes: 3 });
    spec.n_groups = 2;
    let mut net = build_model::<f64, _>(&spec, &mut rng)?;
    let logits: Vec<Vec<f64>> = net
        .gate_logits()
        .iter()
        .map(|g| g.iter().map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();
    net.set_gate_logits(&logits)?;
    let noise: Vec<Vec<f64>> = logits.iter().map(|g| sample_gumbel(&mut rng, g.len())).collect();
    let x = random(&mut rng, &[4, 2, 8, 8], -1.0, 1.0);
    let labels = Targets::Labels(vec![0, 2, 1, 1]);
    let params = net.params();
    let f = |tape: &mut Tape<f64>, vars: &[Var]| {
        let policy = GatePolicy::Noise { noise: &noise, tau: 1.5 };
        let out = net.forward_with_params(tape, &x, ForwardOptions::train(), policy, vars.to_vec())?;
        let task = net.task_loss(tape, &out, &labels)?;
        let ci = net.collect_cost_inputs(&out)?;
        let total = expected_flops(tape, &ci.specs, &ci.probs, &ci.candidates, ci.constant)?;
        let cost = cost_term(tape, total, 0.5)?;
        tape.add(task, cost)
    };
    grad_check(f, &params, 1e-5)
}

/// Runs every suite; `instances` random cases per gradient check.
pub fn run_all(seed: u64, instances: usize) -> Vec<SuiteResult> {
    let mut out = Vec::new();
    let mut push = |name: &str, r: Result<(bool, String)>| {
        let (passed, detail) = r.unwrap_or_else(|e| (false, format!("error: {e}")));
        out.push(SuiteResult {
            name: name.to_string(),
            passed,
            detail,
        });
    };
    #[cfg(feature = "oracle")]
    {
        push(
            "weight-sharing identity (f64)",
            weight_sharing_campaign::<f64>(200, seed).map(|(d, c)| (d <= 1e-10 && c, format!("max diff {d:.3e}, counts exact: {c}"))),
        );
        push(
            "weight-sharing identity (f32)",
            weight_sharing_campaign::<f32>(200, seed).map(|(d, c)| (d <= 1e-5 && c, format!("max diff {d:.3e}, counts exact: {c}"))),
        );
    }
    #[cfg(not(feature = "oracle"))]
    push("weight-sharing identity", Ok((false, "built without the `oracle` feature".into())));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (name, case) in op_cases() {
        let r = (0..instances)
            .map(|_| case(&mut rng))
            .try_fold((0.0f64, 0.0f64), |(m, raw), r| r.map(|r| (m.max(r.max_rel_error), raw.max(r.max_raw_rel_error))))
            .map(|(e, raw)| (e < 1e-4, format!("max rel err {e:.3e} (raw {raw:.3e})")));
        push(&format!("gradient: {name}"), r);
    }
    for arch in [Arch::PlainCnn6, Arch::MiniResnet] {
        let r = search_loss_grad_check(arch, seed).map(|r| {
            (
                r.max_rel_error < 1e-4,
                format!(
                    "max rel err {:.3e} (raw {:.3e}), max abs err {:.1e} (roundoff floor {:.1e})",
                    r.max_rel_error, r.max_raw_rel_error, r.max_abs_error, r.noise_floor
                ),
            )
        });
        push(&format!("gradient: search loss ({arch:?})"), r);
    }
    out
}
