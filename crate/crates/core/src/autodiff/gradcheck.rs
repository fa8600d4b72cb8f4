use super::{Tape, Var};
use crate::error::Result;
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(parameter index, element index)` of the worst element.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub elements_checked: usize,
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|)` over
    /// elements above `noise_floor`, without the roundoff allowance.
    pub max_raw_rel_error: f64,
    /// Largest `|analytic - numeric|` over all elements.
    pub max_abs_error: f64,
    /// Elements whose analytic and numeric values are both below
    /// `noise_floor`.
    pub below_noise_floor: usize,
    /// Roundoff bound of the central difference,
    /// `8 * machine_eps * max(|f|, 1) / epsilon`.
    pub noise_floor: f64,
}

/// Compares reverse-mode gradients of `f` against central differences.
///
/// `f` builds a scalar on the tape from leaves bound to `params` and must be
/// deterministic. The error per element is the discrepancy beyond the
/// roundoff of the difference quotient, relative to the gradient:
/// `max(|analytic - numeric| - noise_floor, 0) / max(|analytic|, |numeric|)`.
/// A check at relative tolerance `r` thus passes an element iff
/// `|analytic - numeric| <= r * max(|analytic|, |numeric|) + noise_floor`.
pub fn grad_check<T, F>(mut f: F, params: &[Tensor<T>], epsilon: f64) -> Result<GradCheckReport>
where
    T: Element,
    F: FnMut(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let mut eval = |values: &[Tensor<T>], with_grad: bool| -> Result<(f64, Vec<Vec<T>>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|p| tape.leaf(p.clone(), with_grad)).collect();
        let loss = f(&mut tape, &vars)?;
        let value = tape.value(loss).item().as_f64();
        if !with_grad {
            return Ok((value, Vec::new()));
        }
        tape.backward(loss)?;
        let grads = vars
            .iter()
            .zip(values)
            .map(|(v, p)| {
                tape.grad(*v)
                    .map(|g| g.to_vec())
                    .unwrap_or_else(|| vec![T::zero(); p.numel()])
            })
            .collect();
        Ok((value, grads))
    };

    let (value, analytic) = eval(params, true)?;
    let noise_floor = 8.0 * T::epsilon().as_f64() * value.abs().max(1.0) / epsilon;
    let mut work: Vec<Tensor<T>> = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        elements_checked: 0,
        max_raw_rel_error: 0.0,
        max_abs_error: 0.0,
        below_noise_floor: 0,
        noise_floor,
    };
    let eps = T::from_f64_lossy(epsilon);
    for p in 0..params.len() {
        #[allow(clippy::needless_range_loop)]
        for e in 0..params[p].numel() {
            let orig = work[p].data()[e];
            work[p].data_mut()[e] = orig + eps;
            let (plus, _) = eval(&work, false)?;
            work[p].data_mut()[e] = orig - eps;
            let (minus, _) = eval(&work, false)?;
            work[p].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * epsilon);
            let a = analytic[p][e].as_f64();
            let scale = a.abs().max(numeric.abs());
            report.elements_checked += 1;
            if scale < noise_floor {
                report.below_noise_floor += 1;
            } else {
                report.max_raw_rel_error = report.max_raw_rel_error.max((a - numeric).abs() / scale);
            }
            report.max_abs_error = report.max_abs_error.max((a - numeric).abs());
            let excess = ((a - numeric).abs() - noise_floor).max(0.0);
            let rel = if excess == 0.0 { 0.0 } else { excess / scale };
            if report.elements_checked == 1 || rel > report.max_rel_error || !rel.is_finite() {
                report.max_rel_error = rel;
                report.worst = (p, e);
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let w = Tensor::<f64>::scalar(3.0);
        let r = grad_check(
            |t, v| {
                let sq = t.mul(v[0], v[0])?;
                Ok(t.sum(sq))
            },
            &[w],
            1e-5,
        )
        .unwrap();
        assert!((r.analytic - 6.0).abs() < 1e-12);
        assert!(r.max_rel_error <= 1e-9);
    }

    #[test]
    fn zero_gradient_is_within_noise_floor() {
        // d/dx of relu(x) at x = -1 is exactly zero
        let w = Tensor::<f64>::from_vec(vec![-1.0, 2.0]);
        let r = grad_check(
            |t, v| {
                let y = t.relu(v[0]);
                Ok(t.sum(y))
            },
            &[w],
            1e-5,
        )
        .unwrap();
        assert_eq!(r.below_noise_floor, 1);
        assert!(r.max_rel_error <= 1e-9);
    }

    #[test]
    fn linear_function_is_exact() {
        let w = Tensor::<f64>::from_vec(vec![0.3, -1.2, 2.0]);
        let r = grad_check(|t, v| t.dot(v[0], &[1.5, -2.0, 0.25]), &[w], 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-9);
    }
}
