use super::{Tape, Tensor, Var};
use crate::error::Result;

/// Compares the tape gradient of `f` at `x` with central differences.
///
/// Returns the maximum over components of
/// `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.param(x.clone());
    let loss = f(&mut tape, xv)?;
    tape.backward(loss)?;
    let analytic = tape.grad(xv)?.map(<[f64]>::to_vec).unwrap_or_else(|| alloc::vec![0.0; x.numel()]);

    let eval = |probe: Tensor<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.constant(probe);
        let out = f(&mut tape, v)?;
        tape.value(out)?.item()
    };

    let mut worst = 0.0f64;
    for (i, &a) in analytic.iter().enumerate() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let denom = 1.0f64.max(a.abs()).max(numeric.abs());
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}
