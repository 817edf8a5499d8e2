//! Central-difference gradient verification.

use crate::autograd::{Tape, Var};
use crate::error::{invalid, PifError, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    /// Component attaining the maximum.
    pub worst_index: usize,
    pub components: usize,
    /// Components whose stencil straddled a kink and was re-taken at a smaller step.
    pub refined: usize,
}

fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Agreement required between central differences at `h` and `h / 10`.
const CONSISTENT: f64 = 1e-6;

/// Roundoff resolution of a difference quotient at step `h` for a function
/// of magnitude `f`: summation error in the loss is taken as 1000 ulps.
fn resolution(f: f64, h: f64) -> f64 {
    (1e3 * f64::EPSILON * f.abs() / h).max(1e-8)
}

struct Quotient {
    value: f64,
    /// Gradients smaller than this are compared absolutely.
    floor: f64,
    /// The step was shrunk because the stencil crossed a kink.
    refined: bool,
}

/// Central difference of `eval` (the function at a signed offset) at step `eps`.
///
/// A smooth function gives the same quotient at `eps` and `eps / 10` up to
/// roundoff. When they disagree by more than that, the stencil crosses a
/// nondifferentiable point (a ReLU or absolute-value kink), so the step
/// shrinks until two successive quotients agree. If none do, the quotient
/// at `eps` is kept.
fn central(mut eval: impl FnMut(f64) -> Result<f64>, eps: f64) -> Result<Quotient> {
    let mut at = |h: f64| -> Result<(f64, f64)> {
        let (fp, fm) = (eval(h)?, eval(-h)?);
        Ok(((fp - fm) / (2.0 * h), resolution(fp.abs().max(fm.abs()), h)))
    };
    let (first, first_floor) = at(eps)?;
    let (mut prev, mut prev_floor) = (first, first_floor);
    let mut h = eps;
    for step in 0..2 {
        h /= 10.0;
        let (next, floor) = at(h)?;
        if !next.is_finite() {
            break;
        }
        if (prev - next).abs() <= CONSISTENT * prev.abs().max(next.abs()) + floor {
            return Ok(Quotient { value: prev, floor: prev_floor, refined: step > 0 });
        }
        (prev, prev_floor) = (next, floor);
    }
    Ok(Quotient { value: first, floor: first_floor, refined: false })
}

fn scalar_of(v: Var<'_, f64>) -> Result<f64> {
    if v.len() != 1 {
        return Err(invalid("gradcheck", format!("function must be scalar, got {:?}", v.shape())));
    }
    Ok(v.item())
}

/// Compare the tape gradient of scalar `f` at `x` with central differences.
///
/// Returns max over components of `|analytic - numeric| / max(|analytic|, |numeric|, r)`,
/// where `r` is the roundoff resolution of the quotient (at least 1e-8).
pub fn gradcheck<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<GradcheckReport>
where
    F: for<'t> Fn(&'t Tape<f64>, Var<'t, f64>) -> Result<Var<'t, f64>>,
{
    let tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let y = f(&tape, xv)?;
    scalar_of(y)?;
    let grads = tape.backward(y)?;
    let analytic = grads.wrt(xv).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));

    let eval = |t: Tensor<f64>| -> Result<f64> {
        let tape = Tape::no_grad();
        let v = tape.constant(t);
        scalar_of(f(&tape, v)?)
    };
    let mut report = GradcheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        components: x.len(),
        refined: 0,
    };
    for i in 0..x.len() {
        let q = central(
            |d| {
                let mut t = x.clone();
                t.data_mut()[i] += d;
                eval(t)
            },
            eps,
        )?;
        if !q.value.is_finite() {
            return Err(PifError::NonFinite { index: i });
        }
        report.refined += q.refined as usize;
        let e = rel_err(analytic.data()[i], q.value, q.floor);
        if e > report.max_rel_error {
            report.max_rel_error = e;
            report.worst_index = i;
        }
    }
    Ok(report)
}

/// Gradcheck with respect to parameters. `components` limits, per
/// parameter, how many (evenly strided) scalars are perturbed.
pub fn gradcheck_params<F>(
    f: F,
    store: &ParamStore<f64>,
    ids: &[ParamId],
    eps: f64,
    components: usize,
) -> Result<GradcheckReport>
where
    F: for<'t> Fn(&'t Tape<f64>, &ParamStore<f64>) -> Result<Var<'t, f64>>,
{
    let tape = Tape::new();
    let y = f(&tape, store)?;
    scalar_of(y)?;
    let grads = tape.backward(y)?;

    let mut report = GradcheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        components: 0,
        refined: 0,
    };
    let mut flat = 0;
    let mut work = store.clone();
    for &id in ids {
        let base = store.value(id).clone();
        let n = base.len();
        let analytic = grads.param(id).cloned().unwrap_or_else(|| Tensor::zeros(base.shape()));
        let stride = (n / components.max(1)).max(1);
        for i in (0..n).step_by(stride).take(components) {
            let mut eval = |delta: f64| -> Result<f64> {
                let mut t = base.clone();
                t.data_mut()[i] += delta;
                if !work.set_value(id, t) {
                    return Err(invalid("gradcheck", "cannot perturb a frozen parameter"));
                }
                let tape = Tape::no_grad();
                scalar_of(f(&tape, &work)?)
            };
            let q = central(&mut eval, eps)?;
            if !q.value.is_finite() {
                return Err(PifError::NonFinite { index: flat + i });
            }
            report.refined += q.refined as usize;
            let e = rel_err(analytic.data()[i], q.value, q.floor);
            if e > report.max_rel_error {
                report.max_rel_error = e;
                report.worst_index = flat + i;
            }
            report.components += 1;
        }
        work.set_value(id, base);
        flat += n;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wrong_adjoint_is_caught() {
        // An adjoint off by 5% must not pass.
        let x = Tensor::from_vec(&[3], vec![0.7, -1.3, 2.0]).unwrap();
        let ok = gradcheck(|_, v| Ok(v.mul(v)?.sum_all()), &x, 1e-5).unwrap();
        assert!(ok.max_rel_error < 1e-8, "{ok:?}");
        let tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let y = xv.mul(xv).unwrap().sum_all();
        let g = tape.backward(y).unwrap();
        let analytic = g.wrt(xv).unwrap().data()[0] * 1.05;
        let q = central(|d| Ok((0.7 + d) * (0.7 + d)), 1e-5).unwrap();
        assert!(rel_err(analytic, q.value, q.floor) > 1e-2);
    }

    #[test]
    fn kink_inside_the_stencil_is_re_stepped() {
        // |t| has its kink 3e-6 left of the evaluation point, inside a 1e-5 stencil.
        let q = central(|d| Ok((3e-6 + d).abs()), 1e-5).unwrap();
        assert!(q.refined);
        assert!((q.value - 1.0).abs() < 1e-9, "{}", q.value);
        let smooth = central(|d| Ok((0.5 + d).sin()), 1e-5).unwrap();
        assert!(!smooth.refined);
        assert!((smooth.value - 0.5f64.cos()).abs() < 1e-9);
    }

    #[test]
    fn gradients_below_roundoff_compare_absolutely() {
        // A 1e-12 slope on top of a unit-size value is invisible to the quotient.
        let q = central(|d| Ok(1.0 + 1e-12 * d), 1e-5).unwrap();
        assert!(q.floor >= 1e-8);
        assert!(rel_err(1e-12, q.value, q.floor) < 1e-3);
        assert!(rel_err(1.0, q.value, q.floor) > 0.9);
    }
}
