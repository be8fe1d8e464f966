use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckReport {
    pub passed: bool,
    pub max_rel_error: f64,
}

/// Compare the tape gradient of a scalar function against central differences.
///
/// The error of element `i` is `|analytic - numeric| / max(1, |analytic|)`;
/// the check passes when the largest such error is below `tol`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), true);
    let out = f(&mut tape, xv)?;
    if tape.value(out).numel() != 1 {
        return Err(Error::contract("grad_check needs a scalar-valued function"));
    }
    tape.backward(out)?;
    let analytic = tape
        .grad(xv)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; x.numel()]);

    let eval = |probe: Tensor| -> Result<f64> {
        let mut t = Tape::new();
        let v = t.leaf(probe, false);
        let o = f(&mut t, v)?;
        Ok(t.value(o).item())
    };

    let mut max_rel_error = 0.0f64;
    for (i, &a) in analytic.iter().enumerate() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let err = (a - numeric).abs() / a.abs().max(1.0);
        max_rel_error = max_rel_error.max(err);
    }
    Ok(GradCheckReport {
        passed: max_rel_error < tol,
        max_rel_error,
    })
}
