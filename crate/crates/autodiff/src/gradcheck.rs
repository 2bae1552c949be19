//! Central finite-difference gradient checking.

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Step used by [`grad_check`].
pub const FD_STEP: f64 = 1e-5;

/// Floor on the denominator of the relative error.
const REL_FLOOR: f64 = 1e-8;

/// Compares the tape gradient of a scalar function against central
/// differences at `point` and returns the largest element-wise relative
/// error `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
///
/// `f` receives a fresh tape and the input as a trainable leaf and must
/// return a `1 x 1` result recorded on that tape.
pub fn grad_check<F>(f: F, point: &Tensor) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let analytic = analytic_gradient(&f, point)?;
    let numeric = numeric_gradient(&f, point, FD_STEP)?;
    Ok(max_relative_error(&analytic, &numeric))
}

pub fn analytic_gradient<F>(f: &F, point: &Tensor) -> Result<Tensor>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let x = tape.leaf(point.clone())?;
    let y = f(&mut tape, x)?;
    let grads = tape.backward(y)?;
    Ok(grads.get_or_zeros(x, point.shape()))
}

pub fn numeric_gradient<F>(f: &F, point: &Tensor, h: f64) -> Result<Tensor>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let eval = |p: Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let x = tape.constant(p)?;
        let y = f(&mut tape, x)?;
        Ok(tape.value(y).item())
    };
    let mut out = Tensor::zeros(point.rows(), point.cols());
    for i in 0..point.len() {
        let mut plus = point.clone();
        plus.data_mut()[i] += h;
        let mut minus = point.clone();
        minus.data_mut()[i] -= h;
        out.data_mut()[i] = (eval(plus)? - eval(minus)?) / (2.0 * h);
    }
    Ok(out)
}

pub fn max_relative_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR))
        .fold(0.0, f64::max)
}
