use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Compares the tape gradient of a scalar function against central
/// differences. Returns `max_i |analytic_i - numeric_i| / max(1, |analytic_i|)`.
pub fn grad_check<F>(f: F, input: &Tensor, eps: f32) -> Result<f32>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!("eps must be positive, got {eps}")));
    }
    let mut tape = Tape::new();
    let x = tape.var(input.clone());
    let y = f(&mut tape, x)?;
    if tape.value(y).len() != 1 {
        return Err(Error::shape("grad_check needs a scalar", tape.shape(y), &[1]));
    }
    if !tape.value(y).all_finite() {
        return Err(Error::NonFinite("grad_check: function value at input".into()));
    }
    let analytic = tape
        .backward(y)?
        .take(x)
        .unwrap_or_else(|| Tensor::zeros(input.shape().to_vec()));

    let eval = |data: Vec<f32>| -> Result<f64> {
        let mut t = Tape::new();
        let v = t.constant(Tensor::new(input.shape().to_vec(), data)?);
        let out = f(&mut t, v)?;
        Ok(t.value(out).item() as f64)
    };
    let mut worst = 0.0f64;
    for i in 0..input.len() {
        let mut plus = input.data().to_vec();
        plus[i] += eps;
        let mut minus = input.data().to_vec();
        minus[i] -= eps;
        let (fp, fm) = (eval(plus)?, eval(minus)?);
        let h = (input.data()[i] + eps) as f64 - (input.data()[i] - eps) as f64;
        let numeric = (fp - fm) / h;
        let a = analytic.data()[i] as f64;
        if !numeric.is_finite() || !a.is_finite() {
            return Err(Error::NonFinite(format!(
                "grad_check coordinate {i}: analytic {a}, numeric {numeric}"
            )));
        }
        worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
    }
    Ok(worst as f32)
}
