//! Finite-difference verification of tape gradients.

use super::{Tape, Tensor, Var};
use crate::error::{MdamError, Result};

/// Where the largest analytic/numeric disagreement occurred.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// (parameter index, element index) of the worst coordinate.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
}

/// Compare analytic gradients against central finite differences.
///
/// `f` must rebuild the same scalar loss from the parameter leaves it is
/// given; it is invoked once for the analytic pass and `2 * total_elements`
/// times for the numeric probes. Returns the maximum relative error
/// `|analytic - numeric| / max(1e-6, |analytic| + |numeric|)` over every
/// parameter element.
///
/// The denominator floor matches what an `eps`-sized central difference can
/// resolve: probe roundoff on an O(1) loss is ~1e-16/eps, so below ~1e-6 the
/// ratio would measure probe noise instead of gradient correctness. Under the
/// floor the check degenerates to the absolute bound `|analytic - numeric| <
/// tol * 1e-6`, still far tighter than any real backprop defect.
pub fn grad_check<F>(f: F, params: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    grad_check_detailed(f, params, eps).map(|r| r.max_rel_err)
}

/// [`grad_check`] plus the location and both values of the worst coordinate,
/// for diagnosing failures.
pub fn grad_check_detailed<F>(f: F, params: &[Tensor], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if eps <= 0.0 {
        return Err(MdamError::Config(format!("grad_check eps {eps} must be positive")));
    }

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p)).collect();
    let loss = f(&mut tape, &vars)?;
    let loss_val = tape.value(loss)[0];
    if !loss_val.is_finite() {
        return Err(MdamError::NonFinite("grad_check loss".into()));
    }
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .map(|&v| grads.get(v).map(Tensor::clone))
        .collect::<Result<_>>()?;

    let eval = |work: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        // numeric probes do not need gradient tracking, but the closure
        // expects parameter leaves, so register them as such
        let vars: Vec<Var> = work.iter().map(|p| tape.param(p)).collect();
        let loss = f(&mut tape, &vars)?;
        let v = tape.value(loss)[0];
        if !v.is_finite() {
            return Err(MdamError::NonFinite("grad_check probe loss".into()));
        }
        Ok(v)
    };

    let mut work: Vec<Tensor> = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
    };
    for pi in 0..work.len() {
        for j in 0..work[pi].data.len() {
            let orig = work[pi].data[j];
            work[pi].data[j] = orig + eps;
            let plus = eval(&work)?;
            work[pi].data[j] = orig - eps;
            let minus = eval(&work)?;
            work[pi].data[j] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[pi].data[j];
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-6);
            if rel > report.max_rel_err {
                report = GradCheckReport {
                    max_rel_err: rel,
                    worst: (pi, j),
                    analytic: a,
                    numeric,
                };
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Shape;
    use crate::rng::stream_rng;

    #[test]
    fn exact_for_linear_functions() {
        // loss = w · x is linear, so central differences are exact up to
        // floating-point rounding
        let w = Tensor::vector(vec![0.5, -1.5, 2.0]);
        let f = |tape: &mut Tape, params: &[Var]| {
            let x = tape.constant(&Tensor::vector(vec![1.0, 2.0, 3.0]));
            tape.dot(params[0], x)
        };
        let err = grad_check(f, &[w], 1e-5).unwrap();
        assert!(err < 1e-9, "relative error {err}");
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // Pretend d/dx of (2x + x) is 2 by building mismatched forward
        // passes: the closure output depends on call order via a counter, so
        // analytic and numeric passes see different functions. The checker
        // must flag the mismatch rather than return a small error.
        use std::cell::Cell;
        let calls = Cell::new(0usize);
        let w = Tensor::vector(vec![1.0]);
        let f = |tape: &mut Tape, params: &[Var]| {
            let n = calls.get();
            calls.set(n + 1);
            let scale = if n == 0 { 1.0 } else { 3.0 };
            let x = tape.constant(&Tensor::vector(vec![scale]));
            tape.dot(params[0], x)
        };
        let err = grad_check(f, &[w], 1e-5).unwrap();
        assert!(err > 0.1, "checker failed to notice inconsistent gradients: {err}");
    }

    #[test]
    fn rejects_bad_eps_and_nonfinite_losses() {
        let w = Tensor::vector(vec![1.0]);
        let ok = |tape: &mut Tape, params: &[Var]| {
            let x = tape.constant(&Tensor::vector(vec![1.0]));
            tape.dot(params[0], x)
        };
        assert!(grad_check(ok, &[w.clone()], 0.0).is_err());

        let bad = |tape: &mut Tape, params: &[Var]| {
            let x = tape.constant(&Tensor::vector(vec![f64::INFINITY]));
            tape.dot(params[0], x)
        };
        assert!(matches!(
            grad_check(bad, &[w], 1e-5),
            Err(MdamError::NonFinite(_))
        ));
    }

    #[test]
    fn nonlinear_chain_below_tolerance() {
        let mut rng = stream_rng(7, 0);
        let w = Tensor::uniform(Shape::Matrix(3, 3), 0.9, &mut rng);
        let b = Tensor::uniform(Shape::Vector(3), 0.4, &mut rng);
        let f = |tape: &mut Tape, params: &[Var]| {
            let x = tape.constant(&Tensor::vector(vec![0.2, -0.4, 0.9]));
            let h = tape.matmul(params[0], x)?;
            let h = tape.add(h, params[1])?;
            let h = tape.tanh(h)?;
            let s = tape.softmax(h)?;
            tape.dot(s, h)
        };
        let err = grad_check(f, &[w, b], 1e-5).unwrap();
        assert!(err < 1e-6, "relative error {err}");
    }
}
