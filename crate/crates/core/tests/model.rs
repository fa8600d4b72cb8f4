use dcss::autodiff::{BnMode, ConvAlgo};
use dcss::cost::{cost_term, expected_flops, expected_flops_value, LayerCostSpec};
use dcss::gates::{gate_probs, make_candidates, GateSample};
use dcss::model::{build_model, Arch, ForwardOptions, GatePolicy, Head, ModelSpec, Network, ParamKind, Targets, Trainable};
use dcss::shared_conv::PrunableConv;
use dcss::{Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn net(arch: Arch, seed: u64) -> Network<f64> {
    let spec = ModelSpec::new(arch, 8, 3, (8, 8), Head::Classify { num_classes: 4 });
    build_model(&spec, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn one_hot_full(net: &Network<f64>) -> Vec<Vec<f64>> {
    net.candidates()
        .iter()
        .map(|c| {
            let mut p = vec![0.0; c.len()];
            p[c.len() - 1] = 1.0;
            p
        })
        .collect()
}

fn run(net: &mut Network<f64>, tape: &mut Tape<f64>, x: &Tensor<f64>, policy: GatePolicy<'_, f64>) -> Tensor<f64> {
    let out = net.forward(tape, x, ForwardOptions::train(), policy, Trainable::All).unwrap();
    tape.value(out.output).clone()
}

#[test]
fn one_hot_full_gates_match_gate_free_network() {
    for arch in [Arch::PlainCnn6, Arch::MiniResnet] {
        for scale_before_bn in [false, true] {
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let x = random(&mut rng, &[4, 3, 8, 8]);
            let mut a = net(arch, 1);
            let mut b = a.clone();
            let probs = one_hot_full(&a);
            let opts = ForwardOptions { mode: BnMode::Train, scale_before_bn };
            let mut t1 = Tape::new();
            let o1 = a.forward(&mut t1, &x, opts, GatePolicy::FixedProbs(&probs), Trainable::None).unwrap();
            let mut t2 = Tape::new();
            let o2 = b.forward(&mut t2, &x, opts, GatePolicy::Off, Trainable::None).unwrap();
            let d = t1.value(o1.output).max_abs_diff(t2.value(o2.output)).unwrap();
            assert!(d <= 1e-10, "{arch:?} {scale_before_bn}: {d}");
        }
    }
}

#[test]
fn forward_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random(&mut rng, &[2, 3, 8, 8]);
    let outs: Vec<Tensor<f64>> = (0..2)
        .map(|_| {
            let mut n = net(Arch::MiniResnet, 9);
            let mut tape = Tape::new();
            run(&mut n, &mut tape, &x, GatePolicy::Sample { rng: &mut ChaCha8Rng::seed_from_u64(4), tau: 2.0 })
        })
        .collect();
    assert_eq!(outs[0], outs[1]);
}

#[test]
fn losses_stay_finite_over_many_batches() {
    let mut n = net(Arch::PlainCnn6, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for i in 0..100 {
        let scale = 10f64.powi(i % 5 - 2);
        let mut x = random(&mut rng, &[4, 3, 8, 8]);
        x.data_mut().iter_mut().for_each(|v| *v *= scale);
        let mut tape = Tape::new();
        let tau = 10f64 * 0.01f64.powf(i as f64 / 99.0);
        let out = n.forward(&mut tape, &x, ForwardOptions::train(), GatePolicy::Sample { rng: &mut rng, tau }, Trainable::All).unwrap();
        let loss = n.task_loss(&mut tape, &out, &Targets::Labels(vec![0, 1, 2, 3])).unwrap();
        assert!(tape.value(loss).item().is_finite());
        tape.backward(loss).unwrap();
        n.zero_grads();
        n.accumulate_grads(&tape, &out);
        for i in 0..n.num_params() {
            assert!(n.grad(i).iter().all(|g| g.is_finite()), "{}", n.param_name(i));
        }
    }
}

#[test]
fn cost_constant_matches_instrumented_counts() {
    for arch in [Arch::PlainCnn6, Arch::MiniResnet] {
        let mut n = net(arch, 0);
        let x = Tensor::zeros(vec![3, 3, 8, 8]);
        let probs = one_hot_full(&n);
        let mut tape = Tape::with_conv_algo(ConvAlgo::Direct);
        let out = n.forward(&mut tape, &x, ForwardOptions::train(), GatePolicy::FixedProbs(&probs), Trainable::None).unwrap();
        let ci = n.collect_cost_inputs(&out).unwrap();
        let total = expected_flops(&mut tape, &ci.specs, &ci.probs, &ci.candidates, ci.constant).unwrap();
        let macs = tape.stats().macs;
        assert_eq!(tape.value(total).item(), (macs / 3) as f64);
        assert_eq!(macs, 3 * n.true_flops());

        // the same count with every prunable layer removed from the model
        let mut plain = Tape::with_conv_algo(ConvAlgo::Direct);
        let prunable: u64 = n.cost_specs().iter().map(LayerCostSpec::full_flops).sum();
        let _ = n.forward(&mut plain, &x, ForwardOptions::train(), GatePolicy::Off, Trainable::None).unwrap();
        assert_eq!(plain.stats().macs / 3 - prunable, n.constant_flops().unwrap());
    }
}

#[test]
fn cost_term_gradient_scales_with_lambda_over_total() {
    let n = net(Arch::PlainCnn6, 0);
    let specs = n.cost_specs().to_vec();
    let cands = n.candidates();
    for lambda in [0.5, 1.0, 4.0] {
        let mut tape = Tape::<f64>::new();
        let probs: Vec<_> = cands.iter().map(|c| tape.leaf(Tensor::from_vec(vec![1.0 / c.len() as f64; c.len()]), true)).collect();
        let total = expected_flops(&mut tape, &specs, &probs, &cands, 100.0).unwrap();
        let t = tape.value(total).item();
        let c = cost_term(&mut tape, total, lambda).unwrap();
        tape.backward(c).unwrap();
        for ((p, s), cs) in probs.iter().zip(&specs).zip(&cands) {
            for (g, &ck) in tape.grad(*p).unwrap().iter().zip(cs.counts()) {
                let want = lambda / t * s.eta() as f64 * ck as f64;
                assert!((g - want).abs() <= 1e-12 * want.abs().max(1.0));
            }
        }
    }
}

#[test]
fn param_registry_partitions_weights_and_gates() {
    let n = net(Arch::MiniResnet, 0);
    let w = n.param_indices(ParamKind::Weight);
    let g = n.param_indices(ParamKind::Gate);
    assert_eq!(w.len() + g.len(), n.num_params());
    assert_eq!(g.len(), n.prunable_layers().len());
    assert!(w.iter().all(|i| !g.contains(i)));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn shared_path_matches_oracle(seed in any::<u64>(), groups in 1usize..=8, stride in 1usize..=2) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cout = rng.gen_range(4..=24);
        let layer = PrunableConv::new("l", random(&mut rng, &[cout, 3, 3, 3]), groups, stride, 1).unwrap();
        let k = layer.candidates.len();
        let size = 2 * stride + 1;
        let xs = random(&mut rng, &[2, 3, size, size]);
        let mut tape = Tape::new();
        let x = tape.leaf(xs, true);
        let w = tape.leaf(layer.kernel.clone(), true);
        let theta = tape.leaf(random(&mut rng, &[k]), true);
        let noise: Vec<f64> = (0..k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let s = gate_probs(&mut tape, theta, &noise, 0.8).unwrap();
        let a = layer.forward_shared(&mut tape, x, w, &s).unwrap();
        let b = layer.forward_multipath_oracle(&mut tape, x, w, &s).unwrap();
        prop_assert!(tape.value(a).max_abs_diff(tape.value(b)).unwrap() <= 1e-10);
        prop_assert_eq!(layer.conv_eval_count(), 1 + k as u64);

        // gradients of a random projection agree through both paths
        let r = random(&mut rng, tape.value(a).shape());
        let mut grads = Vec::new();
        for shared in [true, false] {
            let mut t = Tape::new();
            let x2 = t.leaf(tape.value(x).clone(), true);
            let w2 = t.leaf(layer.kernel.clone(), true);
            let th = t.leaf(tape.value(theta).clone(), true);
            let s = gate_probs(&mut t, th, &noise, 0.8).unwrap();
            let y = if shared { layer.forward_shared(&mut t, x2, w2, &s) } else { layer.forward_multipath_oracle(&mut t, x2, w2, &s) }.unwrap();
            let rc = t.constant(r.clone());
            let p = t.mul(y, rc).unwrap();
            let l = t.sum(p);
            t.backward(l).unwrap();
            grads.push([x2, w2, th].map(|v| t.grad(v).unwrap().to_vec()));
        }
        for (ga, gb) in grads[0].iter().zip(&grads[1]) {
            let d = ga.iter().zip(gb).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            prop_assert!(d <= 1e-8, "{}", d);
        }
    }

    #[test]
    fn channel_weights_are_monotone(seed in any::<u64>(), groups in 1usize..=8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layer = PrunableConv::new("l", random(&mut rng, &[16, 1, 1, 1]), groups, 1, 0).unwrap();
        let k = layer.candidates.len();
        let mut tape = Tape::new();
        let probs = tape.constant(Tensor::from_vec({
            let raw: Vec<f64> = (0..k).map(|_| rng.gen_range(0.0..1.0)).collect();
            let s: f64 = raw.iter().sum::<f64>().max(1e-9);
            raw.iter().map(|p| p / s).collect()
        }));
        let sample = GateSample { probs, noise: vec![0.0; k], tau: 1.0 };
        let w = layer.channel_weights(&mut tape, &sample).unwrap();
        let w = tape.value(w).data();
        prop_assert!((w[0] - 1.0).abs() < 1e-12);
        prop_assert!(w.windows(2).all(|p| p[1] <= p[0] + 1e-15));
    }

    #[test]
    fn expected_flops_monotone_in_probability_mass(seed in any::<u64>(), shift in 0.0f64..0.5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = LayerCostSpec { kernel_h: 3, kernel_w: 3, in_channels: 4, out_h: 5, out_w: 5, full_out: 16 };
        let c = make_candidates(16, 4).unwrap();
        let mut p: Vec<f64> = (0..4).map(|_| rng.gen_range(0.1..1.0)).collect();
        let s: f64 = p.iter().sum();
        p.iter_mut().for_each(|v| *v /= s);
        let before = expected_flops_value(&[spec], &[p.clone()], std::slice::from_ref(&c), 7.0);
        // moving mass from the smallest candidate to the largest never lowers the cost
        let moved = shift.min(p[0]);
        p[0] -= moved;
        p[3] += moved;
        let after = expected_flops_value(&[spec], &[p], &[c], 7.0);
        prop_assert!(after >= before);
    }
}
