//! SGD with momentum for weights, Adam for gate logits.

use crate::error::{Error, Result};
use crate::model::Network;
use crate::tensor::Element;

fn check_finite<T: Element>(grads: &[T], what: &str) -> Result<()> {
    match grads.iter().position(|g| !g.is_finite()) {
        Some(i) => Err(Error::NonFinite(format!("gradient of {what}[{i}] is {}", grads[i]))),
        None => Ok(()),
    }
}

/// `v <- momentum * v + (grad + weight_decay * param); param <- param - lr * v`.
pub fn sgd_momentum_step<T: Element>(
    params: &mut [T],
    grads: &[T],
    velocity: &mut [T],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(Error::Dimension(format!(
            "sgd step over {} params, {} grads, {} buffers",
            params.len(),
            grads.len(),
            velocity.len()
        )));
    }
    check_finite(grads, "parameter")?;
    let (lr, mu, wd) = (T::from_f64_lossy(lr), T::from_f64_lossy(momentum), T::from_f64_lossy(weight_decay));
    for ((p, &g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = mu * *v + (g + wd * *p);
        *p = *p - lr * *v;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update; `step` is the 1-based step count.
pub fn adam_step<T: Element>(
    params: &mut [T],
    grads: &[T],
    m: &mut [T],
    v: &mut [T],
    step: u64,
    lr: f64,
    hp: AdamParams,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != m.len() || params.len() != v.len() {
        return Err(Error::Dimension("adam buffers do not match parameters".into()));
    }
    if step == 0 {
        return Err(Error::Argument("adam step count starts at 1".into()));
    }
    check_finite(grads, "gate")?;
    let c1 = 1.0 - hp.beta1.powi(step as i32);
    let c2 = 1.0 - hp.beta2.powi(step as i32);
    for i in 0..params.len() {
        let g = grads[i].as_f64();
        let mi = hp.beta1 * m[i].as_f64() + (1.0 - hp.beta1) * g;
        let vi = hp.beta2 * v[i].as_f64() + (1.0 - hp.beta2) * g * g;
        m[i] = T::from_f64_lossy(mi);
        v[i] = T::from_f64_lossy(vi);
        let update = lr * (mi / c1) / ((vi / c2).sqrt() + hp.eps);
        params[i] = T::from_f64_lossy(params[i].as_f64() - update);
    }
    Ok(())
}

/// Momentum buffers for a subset of a network's parameters.
#[derive(Debug, Clone)]
pub struct Sgd<T> {
    pub momentum: f64,
    pub weight_decay: f64,
    indices: Vec<usize>,
    velocity: Vec<Vec<T>>,
}

impl<T: Element> Sgd<T> {
    pub fn new(net: &Network<T>, indices: Vec<usize>, momentum: f64, weight_decay: f64) -> Self {
        let velocity = indices.iter().map(|&i| vec![T::zero(); net.param(i).numel()]).collect();
        Sgd {
            momentum,
            weight_decay,
            indices,
            velocity,
        }
    }

    pub fn step(&mut self, net: &mut Network<T>, lr: f64) -> Result<()> {
        let (mu, wd) = (self.momentum, self.weight_decay);
        for (&i, v) in self.indices.iter().zip(&mut self.velocity) {
            let mut out = Ok(());
            net.update_param(i, |p, g| out = sgd_momentum_step(p, g, v, lr, mu, wd));
            out.map_err(|e| Error::NonFinite(format!("{} ({e})", net.param_name(i))))?;
        }
        Ok(())
    }
}

/// Adam moments for a subset of a network's parameters.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub hp: AdamParams,
    indices: Vec<usize>,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    t: u64,
}

impl<T: Element> Adam<T> {
    pub fn new(net: &Network<T>, indices: Vec<usize>, hp: AdamParams) -> Self {
        let zeros: Vec<Vec<T>> = indices.iter().map(|&i| vec![T::zero(); net.param(i).numel()]).collect();
        Adam {
            hp,
            indices,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn step(&mut self, net: &mut Network<T>, lr: f64) -> Result<()> {
        self.t += 1;
        let (t, hp) = (self.t, self.hp);
        for ((&i, m), v) in self.indices.iter().zip(&mut self.m).zip(&mut self.v) {
            let mut out = Ok(());
            net.update_param(i, |p, g| out = adam_step(p, g, m, v, t, lr, hp));
            out.map_err(|e| Error::NonFinite(format!("{} ({e})", net.param_name(i))))?;
        }
        Ok(())
    }
}
