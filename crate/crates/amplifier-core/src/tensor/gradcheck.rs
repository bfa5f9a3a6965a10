//! Central finite-difference gradient checking.

use crate::error::{AmpError, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Per-entry comparison of tape gradients against central differences.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

/// Relative error with an absolute floor so near-zero pairs compare sanely.
pub fn rel_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Checks the tape gradient of the scalar function `f` at `x` against
/// `(f(x + eps*e_i) - f(x - eps*e_i)) / (2*eps)` for every entry `i`.
///
/// `f` must be pure; it is re-run on a fresh tape for every probe.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64, floor: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if eps <= 0.0 {
        return Err(AmpError::InvalidArgument(
            "grad_check: eps must be positive".into(),
        ));
    }

    let eval = |probe: &Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.leaf(probe.clone());
        let out = f(&mut tape, v)?;
        let t = tape.value(out);
        if t.numel() != 1 {
            return Err(AmpError::NonScalarLoss(t.shape().to_vec()));
        }
        Ok(t.data()[0])
    };

    let center = eval(x)?;
    if !center.is_finite() {
        return Err(AmpError::NonFinite {
            context: "grad_check: f(x)".into(),
        });
    }

    // analytic pass
    let mut tape = Tape::new();
    let mut xg = x.clone();
    xg.set_requires_grad(true);
    let v = tape.leaf(xg);
    let out = f(&mut tape, v)?;
    if tape.value(out).numel() != 1 {
        return Err(AmpError::NonScalarLoss(tape.value(out).shape().to_vec()));
    }
    let grads = tape.backward(out)?;
    let analytic = grads.wrt_or_zeros(v, x.shape()).into_data();

    let mut numeric = Vec::with_capacity(x.numel());
    let mut max_rel_error: f64 = 0.0;
    let mut worst_index = 0;
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let fd = (eval(&plus)? - eval(&minus)?) / (2.0 * eps);
        numeric.push(fd);
        let e = rel_error(analytic[i], fd, floor);
        if e > max_rel_error {
            max_rel_error = e;
            worst_index = i;
        }
    }

    Ok(GradCheckReport {
        max_rel_error,
        worst_index,
        analytic,
        numeric,
    })
}
