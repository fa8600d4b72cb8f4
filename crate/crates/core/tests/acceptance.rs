//! Acceptance criteria 1-9. Runs without the test harness and prints one
//! `PASS`/`FAIL` line per criterion; exits nonzero if any fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use dcss::autodiff::{BnMode, ConvAlgo};
use dcss::config::ExperimentConfig;
use dcss::cost::{expected_flops, LayerCostSpec};
use dcss::extract::{extract_slim, plan_from_widths, PlanLayer};
use dcss::model::{build_model, Arch, ForwardOptions, GatePolicy, Head, ModelSpec, Network, ParamKind, Trainable};
use dcss::pipeline::{run_pipeline, Experiment};
use dcss::rng::SeedTree;
use dcss::search::{expected_flops_at, search, search_schedule, SearchHistory};
use dcss::verify::{op_cases, search_loss_grad_check, weight_sharing_campaign};
use dcss::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v[v.len() / 2]
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn supernet(arch: Arch, base: usize, seed: u64) -> Network<f64> {
    let spec = ModelSpec::new(arch, base, 3, (8, 8), Head::Classify { num_classes: 10 });
    build_model(&spec, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn one_hot_full(net: &Network<f64>) -> Vec<Vec<f64>> {
    net.candidates()
        .iter()
        .map(|c| (0..c.len()).map(|k| if k + 1 == c.len() { 1.0 } else { 0.0 }).collect())
        .collect()
}

fn criterion_1() -> Outcome {
    let (d64, c64) = weight_sharing_campaign::<f64>(250, 1).map_err(|e| e.to_string())?;
    let (d32, c32) = weight_sharing_campaign::<f32>(250, 2).map_err(|e| e.to_string())?;
    ensure(
        d64 <= 1e-10 && d32 <= 1e-5 && c64 && c32,
        format!("250 configs each: f64 max diff {d64:.2e}, f32 max diff {d32:.2e}"),
    )
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut worst, mut raw) = (0.0f64, (0.0f64, ""));
    let cases = op_cases();
    for (name, case) in &cases {
        for _ in 0..20 {
            let r = case(&mut rng).map_err(|e| format!("{name}: {e}"))?;
            worst = worst.max(r.max_rel_error);
            if r.max_raw_rel_error > raw.0 {
                raw = (r.max_raw_rel_error, name);
            }
        }
    }
    let (mut loss_worst, mut loss_raw, mut abs_worst, mut floor) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for arch in [Arch::PlainCnn6, Arch::MiniResnet] {
        for seed in 0..3 {
            let r = search_loss_grad_check(arch, seed).map_err(|e| e.to_string())?;
            loss_worst = loss_worst.max(r.max_rel_error);
            loss_raw = loss_raw.max(r.max_raw_rel_error);
            abs_worst = abs_worst.max(r.max_abs_error);
            floor = floor.max(r.noise_floor);
        }
    }
    ensure(
        worst < 1e-4 && loss_worst < 1e-4,
        format!(
            "{} ops x 20: rel err {worst:.2e} (raw {:.2e}, {}); search loss, 2 archs x 3 seeds: rel err {loss_worst:.2e} (raw {loss_raw:.2e}), max abs err {abs_worst:.1e}, roundoff floor {floor:.1e}",
            cases.len(),
            raw.0,
            raw.1
        ),
    )
}

fn criterion_3() -> Outcome {
    let mut details = Vec::new();
    let mut ok = true;
    for arch in [Arch::PlainCnn6, Arch::MiniResnet] {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&mut rng, &[8, 3, 8, 8]);
        let mut net = supernet(arch, 8, 0);
        let k: Vec<u64> = net.candidates().iter().map(|c| c.len() as u64).collect();

        let before = net.prunable_conv_evals();
        let mut shared = Tape::new();
        net.forward(&mut shared, &x, ForwardOptions::train(), GatePolicy::Sample { rng: &mut rng, tau: 1.0 }, Trainable::All)
            .map_err(|e| e.to_string())?;
        let after = net.prunable_conv_evals();
        ok &= after.iter().zip(&before).all(|(a, b)| a - b == 1);

        for (layer, kk) in net.prunable_layers().iter().zip(&k) {
            let mut t = Tape::new();
            let xin = t.constant(random(&mut rng, &[2, layer.kernel.shape()[1], 4, 4]));
            let w = t.constant(layer.kernel.clone());
            let theta = t.leaf(Tensor::zeros(vec![*kk as usize]), true);
            let s = dcss::gates::gate_probs(&mut t, theta, &vec![0.0; *kk as usize], 1.0).unwrap();
            let c0 = layer.conv_eval_count();
            layer.forward_multipath_oracle(&mut t, xin, w, &s).map_err(|e| e.to_string())?;
            ok &= layer.conv_eval_count() - c0 == *kk;
        }

        let mut plain = Tape::new();
        net.forward(&mut plain, &x, ForwardOptions::train(), GatePolicy::Off, Trainable::All)
            .map_err(|e| e.to_string())?;
        let ratio = shared.stats().peak_bytes as f64 / plain.stats().peak_bytes as f64;
        ok &= ratio <= 1.2;
        details.push(format!("{arch:?}: 1 vs K={k:?} convs, peak ratio {ratio:.4}"));
    }
    ensure(ok, details.join("; "))
}

fn criterion_4() -> Outcome {
    let spot = LayerCostSpec { kernel_h: 3, kernel_w: 3, in_channels: 16, out_h: 32, out_w: 32, full_out: 32 }.full_flops();
    let mut ok = spot == 4_718_592;
    let mut details = vec![format!("spot value {spot}")];
    for arch in [Arch::PlainCnn6, Arch::MiniResnet] {
        let mut net = supernet(arch, 8, 0);
        let probs = one_hot_full(&net);
        let n = 5;
        let mut tape = Tape::with_conv_algo(ConvAlgo::Direct);
        let out = net
            .forward(&mut tape, &Tensor::zeros(vec![n, 3, 8, 8]), ForwardOptions::train(), GatePolicy::FixedProbs(&probs), Trainable::None)
            .map_err(|e| e.to_string())?;
        let counted = tape.stats().macs;
        let ci = net.collect_cost_inputs(&out).map_err(|e| e.to_string())?;
        let total = expected_flops(&mut tape, &ci.specs, &ci.probs, &ci.candidates, ci.constant).map_err(|e| e.to_string())?;
        let model = tape.value(total).item();
        ok &= model * n as f64 == counted as f64;
        details.push(format!("{arch:?}: model {model} x {n} = counter {counted}"));
    }
    ensure(ok, details.join("; "))
}

fn search_config(seed: u64, lambda: f64) -> ExperimentConfig {
    ExperimentConfig {
        seed,
        lambda,
        warmup_epochs: 5,
        search_epochs: 20,
        train_baseline: false,
        uniform_baseline: false,
        ..ExperimentConfig::default()
    }
}

/// Warm-up and search only; returns the network.
fn searched(cfg: ExperimentConfig) -> Result<Network<f32>, String> {
    let exp = Experiment::new(cfg).map_err(|e| e.to_string())?;
    let (mut net, mut history) = exp.warmup_stage::<f32>().map_err(|e| e.to_string())?;
    exp.search_stage(&mut net, &mut history).map_err(|e| e.to_string())?;
    Ok(net)
}

fn criterion_5() -> Outcome {
    let lambdas = [0.1, 1.0, 10.0];
    let mut medians = Vec::new();
    for &lambda in &lambdas {
        let mut runs = Vec::new();
        for seed in 0..3 {
            let net = searched(search_config(seed, lambda))?;
            runs.push(expected_flops_at(&net, 0.1).map_err(|e| e.to_string())?);
        }
        medians.push(median(runs));
    }
    let decreasing = medians.windows(2).all(|w| w[1] < w[0]);

    let net = searched(search_config(0, 1e3))?;
    let mut limit_ok = true;
    let mut ec = Vec::new();
    for layer in net.prunable_layers() {
        let theta: Vec<f64> = layer.gate.theta.data().iter().map(|&v| v as f64).collect();
        let p = dcss::gates::probs_value(&theta, None, 0.1);
        let counts = layer.candidates.counts();
        let e: f64 = p.iter().zip(counts).map(|(p, &c)| p * c as f64).sum();
        let group = counts.get(1).map_or(counts[0], |c2| c2 - counts[0]);
        limit_ok &= e - counts[0] as f64 <= group as f64;
        ec.push(format!("{e:.2}/{}", counts[0]));
    }
    ensure(
        decreasing && limit_ok,
        format!(
            "median expected MFLOPs at lambda 0.1/1/10: {}; lambda 1e3 E[c]/c1: [{}]",
            medians.iter().map(|m| format!("{:.4}", m / 1e6)).collect::<Vec<_>>().join(" > "),
            ec.join(", ")
        ),
    )
}

fn criterion_6() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (mut slim, mut uniform, mut gaps) = (Vec::new(), Vec::new(), Vec::new());
    for seed in 0..3 {
        let cfg = ExperimentConfig {
            seed,
            lambda: 1.0,
            warmup_epochs: 5,
            search_epochs: 10,
            noise: 0.6,
            train_baseline: false,
            out_dir: dir.path().join(format!("s{seed}")),
            ..ExperimentConfig::default()
        };
        let r = run_pipeline(cfg, false).map_err(|e| e.to_string())?;
        let u = r.uniform.ok_or("no uniform baseline")?;
        gaps.push((u.plan.predicted_flops / r.predicted_flops - 1.0).abs());
        slim.push(r.slim.metrics.accuracy.ok_or("no accuracy")?);
        uniform.push(u.metrics.accuracy.ok_or("no accuracy")?);
    }
    let worst_gap = gaps.iter().copied().fold(0.0, f64::max);
    let (ms, mu) = (median(slim.clone()), median(uniform.clone()));
    ensure(
        ms >= mu - 0.5 && worst_gap <= 0.05,
        format!("median acc slim {ms:.2}% vs uniform {mu:.2}% (slim {slim:?}, uniform {uniform:?}); FLOPs mismatch <= {:.2}%", worst_gap * 100.0),
    )
}

fn criterion_7() -> Outcome {
    let mut ok = true;
    let mut worst = 0.0f64;
    for arch in [Arch::PlainCnn6, Arch::MiniResnet] {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut sup = supernet(arch, 8, 1);
        let x = random(&mut rng, &[4, 3, 8, 8]);
        let probs = one_hot_full(&sup);
        sup.forward(&mut Tape::new(), &x, ForwardOptions::train(), GatePolicy::FixedProbs(&probs), Trainable::None)
            .map_err(|e| e.to_string())?;
        let full = sup.spec().full_widths();
        let plan = |widths: &[usize]| {
            let layers = sup
                .prunable_names()
                .into_iter()
                .zip(&full)
                .zip(widths)
                .map(|((name, &f), &c)| PlanLayer { name, expected_c: c as f64, chosen_c: c, full: f })
                .collect();
            plan_from_widths(&sup, layers)
        };
        let p = plan(&full).map_err(|e| e.to_string())?;
        let slim = extract_slim(&sup, &p, true, &mut rng).map_err(|e| e.to_string())?;
        for mode in [BnMode::Train, BnMode::Eval] {
            let opts = ForwardOptions::with_mode(mode);
            let mut a = Tape::new();
            let ya = sup.clone().forward(&mut a, &x, opts, GatePolicy::FixedProbs(&probs), Trainable::None).map_err(|e| e.to_string())?;
            let mut b = Tape::new();
            let yb = slim.clone().forward(&mut b, &x, opts, GatePolicy::Off, Trainable::None).map_err(|e| e.to_string())?;
            worst = worst.max(a.value(ya.output).max_abs_diff(b.value(yb.output)).map_err(|e| e.to_string())?);
        }
        ok &= p.true_flops as f64 == p.predicted_flops;

        for _ in 0..50 {
            let widths: Vec<usize> = full.iter().map(|&f| rng.gen_range(1..=f)).collect();
            let p = plan(&widths).map_err(|e| e.to_string())?;
            let s = extract_slim(&sup, &p, true, &mut rng).map_err(|e| e.to_string())?;
            let is_full = widths == full;
            ok &= (p.true_flops as f64) <= p.predicted_flops;
            ok &= ((p.true_flops as f64) == p.predicted_flops) == is_full;
            // the input width of each prunable conv is the output width of its producer
            let names = sup.prunable_names();
            for (i, name) in names.iter().enumerate() {
                let shape = s.param(s.find_param(&format!("{name}.weight")).unwrap()).shape().to_vec();
                ok &= shape[0] == widths[i];
                if arch == Arch::PlainCnn6 {
                    ok &= shape[1] == if i == 0 { 3 } else { widths[i - 1] };
                }
            }
            // a forward pass succeeds, which checks every remaining coupling
            let mut t = Tape::new();
            ok &= s.clone().forward(&mut t, &x, ForwardOptions::train(), GatePolicy::Off, Trainable::None).is_ok();
        }
    }
    ensure(ok && worst <= 1e-10, format!("full-width max diff {worst:.2e}; 100 random plans coupled, true <= predicted"))
}

fn stripped_report(dir: &Path) -> Result<serde_json::Value, String> {
    let bytes = std::fs::read(dir.join("report.json")).map_err(|e| e.to_string())?;
    let mut v: serde_json::Value = serde_json::from_slice(&bytes).map_err(|e| e.to_string())?;
    let obj = v.as_object_mut().ok_or("report is not an object")?;
    obj.remove("wall_time_s");
    obj["config"].as_object_mut().ok_or("config")?.remove("out_dir");
    Ok(v)
}

fn criterion_8() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = |name: &str| ExperimentConfig {
        seed: 8,
        warmup_epochs: 2,
        search_epochs: 2,
        train_epochs: 2,
        lr_decay_epochs: vec![1],
        out_dir: dir.path().join(name),
        ..ExperimentConfig::default()
    };
    run_pipeline(cfg("a"), false).map_err(|e| e.to_string())?;
    run_pipeline(cfg("b"), false).map_err(|e| e.to_string())?;
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let mut same = stripped_report(&a)? == stripped_report(&b)?;
    let mut files = 0;
    for entry in std::fs::read_dir(&a).map_err(|e| e.to_string())? {
        let name = entry.map_err(|e| e.to_string())?.file_name();
        if name == "report.json" {
            continue;
        }
        let fa = std::fs::read(a.join(&name)).map_err(|e| e.to_string())?;
        let fb = std::fs::read(b.join(&name)).map_err(|e| e.to_string())?;
        same &= fa == fb;
        files += 1;
    }
    ensure(same, format!("report (minus wall time) and {files} other artifacts byte-identical"))
}

fn criterion_9() -> Outcome {
    let cfg = ExperimentConfig { seed: 9, warmup_epochs: 2, search_epochs: 3, ..ExperimentConfig::default() };
    let exp = Experiment::new(cfg.clone()).map_err(|e| e.to_string())?;
    let (mut net, mut history) = exp.warmup_stage::<f32>().map_err(|e| e.to_string())?;
    let theta_zero = net.gate_logits().iter().flatten().all(|&t| t == 0.0);
    let gates_before = net.checksum(ParamKind::Gate);
    exp.search_stage(&mut net, &mut history).map_err(|e| e.to_string())?;
    let sched = search_schedule(exp.data.d_train.len(), &cfg.search_config()).map_err(|e| e.to_string())?;
    let mut trace_err = 0.0f64;
    for (i, t) in history.temperatures.iter().enumerate() {
        let want = 10.0 * (0.1f64 / 10.0).powf(i as f64 / sched.total_steps as f64);
        trace_err = trace_err.max((t - want).abs());
    }
    let ends = history.temperatures.first() == Some(&10.0) && history.temperatures.last() == Some(&0.1);

    // the search asserts disjointness each epoch; an overlapping split must trip it
    let mut d_val = exp.data.d_val.clone();
    d_val.push(exp.data.d_train[0]);
    let mut probe = net.clone();
    let tripped = search(
        &mut probe,
        &exp.data.train,
        &exp.data.d_train,
        &d_val,
        &cfg.search_config(),
        &SeedTree::new(9),
        &mut SearchHistory::new(net.prunable_names()),
    )
    .is_err();
    let disjoint = exp.data.d_train.iter().all(|i| !exp.data.d_val.contains(i));
    ensure(
        trace_err <= 1e-12 && ends && theta_zero && gates_before != net.checksum(ParamKind::Gate) && tripped && disjoint,
        format!(
            "{} gate steps, temperature trace max err {trace_err:.1e}; theta after warm-up all zero: {theta_zero}; overlap rejected: {tripped}",
            history.temperatures.len()
        ),
    )
}

type Criterion = fn() -> Outcome;

fn main() {
    let criteria: [(&str, Criterion); 9] = [
        ("weight-sharing identity", criterion_1),
        ("gradient correctness", criterion_2),
        ("one convolution per layer, bounded memory", criterion_3),
        ("FLOPs accounting", criterion_4),
        ("lambda controls expected FLOPs", criterion_5),
        ("search vs uniform pruning", criterion_6),
        ("extraction soundness", criterion_7),
        ("determinism", criterion_8),
        ("search protocol", criterion_9),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let id = format!("criterion {}", i + 1);
        if !filter.is_empty() && !filter.iter().any(|f| id.ends_with(f.as_str()) || name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(d) => println!("PASS {id} ({name}): {d} [{secs:.1}s]"),
            Err(d) => {
                failed += 1;
                println!("FAIL {id} ({name}): {d} [{secs:.1}s]");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
