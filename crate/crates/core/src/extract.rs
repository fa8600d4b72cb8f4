//! Turning searched gates into a slim, gate-free network.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gates::probs_value;
use crate::model::{build_model, Network, ParamKind};
use crate::tensor::Element;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanLayer {
    pub name: String,
    pub expected_c: f64,
    pub chosen_c: usize,
    pub full: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlimPlan {
    pub layers: Vec<PlanLayer>,
    /// Cost-model FLOPs of the chosen widths (unpruned input widths).
    pub predicted_flops: f64,
    /// FLOPs of the extracted network with coupled input widths.
    pub true_flops: u64,
    /// `1 - true_flops / unpruned_flops`.
    pub prune_ratio: f64,
}

/// Finishes a plan from chosen widths: fills in the FLOPs fields.
pub fn plan_from_widths<T: Element>(net: &Network<T>, layers: Vec<PlanLayer>) -> Result<SlimPlan> {
    let specs = net.cost_specs();
    if layers.len() != specs.len() {
        return Err(Error::structural(
            "plan",
            format!("{} plan layers for {} prunable layers", layers.len(), specs.len()),
        ));
    }
    let names = net.prunable_names();
    for (l, name) in layers.iter().zip(&names) {
        if &l.name != name || l.chosen_c == 0 || l.chosen_c > l.full {
            return Err(Error::structural(
                &l.name,
                format!("plan entry {l:?} does not fit prunable layer `{name}`"),
            ));
        }
    }
    let predicted_flops = specs
        .iter()
        .zip(&layers)
        .map(|(s, l)| s.layer_flops(l.chosen_c) as f64)
        .sum::<f64>()
        + net.constant_flops()? as f64;
    let widths: Vec<usize> = layers.iter().map(|l| l.chosen_c).collect();
    let slim: Network<T> = build_model(&net.spec().with_widths(widths), &mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0))?;
    let true_flops = slim.true_flops();
    let unpruned = net.unpruned_flops()?;
    Ok(SlimPlan {
        layers,
        predicted_flops,
        true_flops,
        prune_ratio: 1.0 - true_flops as f64 / unpruned as f64,
    })
}

/// `chosen_c = round_half_up(sum_k c_k p_k)` with noise-free probabilities
/// at `tau_final`, clamped to `[1, full]`.
pub fn derive_plan<T: Element>(net: &Network<T>, tau_final: f64) -> Result<SlimPlan> {
    if !net.is_gated() {
        return Err(Error::State("plans are derived from a gated network".into()));
    }
    let layers = net
        .prunable_layers()
        .iter()
        .map(|layer| {
            let theta: Vec<f64> = layer.gate.theta.data().iter().map(|v| v.as_f64()).collect();
            let p = probs_value(&theta, None, tau_final);
            let expected_c: f64 = p.iter().zip(layer.candidates.counts()).map(|(p, &c)| p * c as f64).sum();
            let full = layer.candidates.full();
            PlanLayer {
                name: layer.name.clone(),
                expected_c,
                chosen_c: ((expected_c + 0.5).floor() as usize).clamp(1, full),
                full,
            }
        })
        .collect();
    plan_from_widths(net, layers)
}

/// Widths from one global keep ratio, rounded half up and clamped to `[1, full]`.
pub fn uniform_plan<T: Element>(net: &Network<T>, keep: f64) -> Result<SlimPlan> {
    let layers = net
        .prunable_names()
        .into_iter()
        .zip(net.cost_specs())
        .map(|(name, s)| {
            let c = s.full_out as f64 * keep;
            PlanLayer {
                name,
                expected_c: c,
                chosen_c: ((c + 0.5).floor() as usize).clamp(1, s.full_out),
                full: s.full_out,
            }
        })
        .collect();
    plan_from_widths(net, layers)
}

/// The uniform plan whose predicted FLOPs come closest to `target`.
pub fn uniform_plan_matching<T: Element>(net: &Network<T>, target: f64) -> Result<SlimPlan> {
    let (mut lo, mut hi) = (0.0, 1.0);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if uniform_plan(net, mid)?.predicted_flops < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let a = uniform_plan(net, lo)?;
    let b = uniform_plan(net, hi)?;
    Ok(if (a.predicted_flops - target).abs() <= (b.predicted_flops - target).abs() { a } else { b })
}

/// Builds the gate-free network of `plan`. With `inherit`, every parameter
/// and running statistic is the leading block of its supernet counterpart;
/// otherwise weights are freshly initialized from `rng`.
pub fn extract_slim<T: Element, R: Rng>(
    supernet: &Network<T>,
    plan: &SlimPlan,
    inherit: bool,
    rng: &mut R,
) -> Result<Network<T>> {
    // validates names and widths
    plan_from_widths(supernet, plan.layers.clone())?;
    let widths = plan.layers.iter().map(|l| l.chosen_c).collect();
    let mut slim: Network<T> = build_model(&supernet.spec().with_widths(widths), rng)?;
    if !inherit {
        return Ok(slim);
    }
    for i in 0..slim.num_params() {
        debug_assert_eq!(slim.param_kind(i), ParamKind::Weight);
        let name = slim.param_name(i).to_string();
        let shape = slim.param(i).shape().to_vec();
        let value = supernet.leading_block(&name, &shape)?;
        slim.install_param(i, value)?;
    }
    let source: Vec<_> = supernet
        .running_stats()
        .into_iter()
        .map(|(n, s)| (n.to_string(), s.clone()))
        .collect();
    for (name, stats) in slim.running_stats_mut() {
        let (_, src) = source
            .iter()
            .find(|(n, _)| n == name)
            .ok_or_else(|| Error::structural(name, "missing in supernet"))?;
        if src.channels() < stats.channels() {
            return Err(Error::structural(name, "slim layer is wider than the supernet"));
        }
        *stats = src.select(stats.channels());
    }
    Ok(slim)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Arch, Head, ModelSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn net() -> Network<f64> {
        let spec = ModelSpec::new(Arch::PlainCnn6, 32, 3, (8, 8), Head::Classify { num_classes: 4 });
        let mut spec = spec;
        spec.n_groups = 4;
        build_model(&spec, &mut ChaCha8Rng::seed_from_u64(0)).unwrap()
    }

    #[test]
    fn uniform_gates_give_the_candidate_mean() {
        let n = net();
        let plan = derive_plan(&n, 0.1).unwrap();
        // candidates [8, 16, 24, 32]
        assert!((plan.layers[0].expected_c - 20.0).abs() < 1e-12);
        assert_eq!(plan.layers[0].chosen_c, 20);
    }

    #[test]
    fn weighted_and_one_hot_gates() {
        let mut n = net();
        let mut logits = n.gate_logits();
        logits[0] = [0.1f64, 0.2, 0.3, 0.4].iter().map(|p| p.ln()).collect();
        logits[1] = vec![-1e3, -1e3, 0.0, -1e3];
        n.set_gate_logits(&logits).unwrap();
        let plan = derive_plan(&n, 1.0).unwrap();
        assert!((plan.layers[0].expected_c - 24.0).abs() < 1e-9);
        assert_eq!(plan.layers[0].chosen_c, 24);
        assert_eq!(plan.layers[1].chosen_c, 24);
    }

    #[test]
    fn full_plan_flops_agree() {
        let n = net();
        let plan = uniform_plan(&n, 1.0).unwrap();
        assert_eq!(plan.predicted_flops, plan.true_flops as f64);
        assert_eq!(plan.prune_ratio, 0.0);
        let half = uniform_plan(&n, 0.5).unwrap();
        assert!((half.true_flops as f64) < half.predicted_flops);
    }

    #[test]
    fn inconsistent_plans_name_the_layer() {
        let n = net();
        let mut plan = uniform_plan(&n, 1.0).unwrap();
        plan.layers[2].chosen_c = 99;
        match extract_slim(&n, &plan, true, &mut ChaCha8Rng::seed_from_u64(0)) {
            Err(Error::Structural { layer, .. }) => assert_eq!(layer, "conv3"),
            other => panic!("{other:?}"),
        }
    }
}
