//! Central finite-difference gradient oracle.

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Absolute differences below this are indistinguishable from the
/// round-off of a central difference at `h = 1e-6` on O(10) losses
/// (`ε·|f| / h ≈ 1e-9`) and are not scored relatively.
pub const ABS_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Worst relative error among elements whose absolute error exceeds
    /// [`ABS_FLOOR`].
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// `(leaf, element)` where the worst relative error occurred.
    pub worst: (usize, usize),
    pub checked: usize,
    pub pass: bool,
}

/// Compares the tape gradient of `f` at `leaves` against
/// `(f(x + h) - f(x - h)) / 2h`, element by element.
///
/// The relative error of one element is
/// `|analytic - numeric| / max(|analytic|, |numeric|)`; elements whose
/// absolute error is below [`ABS_FLOOR`] count as exact. The check passes
/// when the maximum relative error stays below `tol`. `f` must return a one-element
/// value and be deterministic.
pub fn grad_check<'t, F>(f: F, leaves: &[Tensor], h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<'t>, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone(), false)).collect();
        let out = f(&mut tape, &vars)?;
        let v = tape.value(out);
        if v.len() != 1 {
            return Err(Error::Shape(format!("grad_check target has shape {:?}", v.shape())));
        }
        if !v.item().is_finite() {
            return Err(Error::NonFinite("grad_check function value".into()));
        }
        Ok(v.item())
    };

    let analytic: Vec<Tensor> = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = leaves.iter().map(|x| tape.leaf(x.clone(), true)).collect();
        let out = f(&mut tape, &vars)?;
        if !tape.value(out).is_finite() {
            return Err(Error::NonFinite("grad_check function value".into()));
        }
        tape.backward(out)?;
        vars.iter().map(|&v| tape.grad(v).expect("leaf requires grad")).collect()
    };
    if analytic.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("analytic gradient".into()));
    }

    let mut work: Vec<Tensor> = leaves.to_vec();
    let mut max_rel_err: f64 = 0.0;
    let mut max_abs_err: f64 = 0.0;
    let mut worst = (0, 0);
    let mut checked = 0;
    for li in 0..leaves.len() {
        for e in 0..leaves[li].len() {
            let x0 = leaves[li].data()[e];
            work[li].data_mut()[e] = x0 + h;
            let fp = eval(&work)?;
            work[li].data_mut()[e] = x0 - h;
            let fm = eval(&work)?;
            work[li].data_mut()[e] = x0;
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic[li].data()[e];
            let abs = (a - numeric).abs();
            let rel = if abs < ABS_FLOOR { 0.0 } else { abs / a.abs().max(numeric.abs()) };
            max_abs_err = max_abs_err.max(abs);
            checked += 1;
            if rel > max_rel_err {
                max_rel_err = rel;
                worst = (li, e);
            }
        }
    }
    Ok(GradCheckReport { max_rel_err, max_abs_err, worst, checked, pass: max_rel_err < tol })
}
