use super::{Tape, Tensor, Var};
use crate::error::{ensure, Error, Result};

/// Compare the tape gradient of a scalar function against central
/// differences.
///
/// `f` receives a fresh tape and the input registered as a trainable leaf.
/// Returns `max_i |analytic_i - numeric_i| / max(1, |analytic_i|)`.
pub fn finite_diff_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&Tape, Var) -> Result<Var>,
{
    ensure!(step > 0.0, "finite_diff_check: step must be positive, got {step}");
    let tape = Tape::new();
    let xv = tape.param(x.clone())?;
    let y = f(&tape, xv)?;
    tape.backward(y)?;
    let analytic = tape.grad(xv).expect("trainable leaf has a gradient");

    let eval = |t: &Tensor| -> Result<f64> {
        let tape = Tape::new();
        let v = tape.constant(t.clone())?;
        let out = tape.item(f(&tape, v)?)?;
        if !out.is_finite() {
            return Err(Error::numeric("finite_diff_check: non-finite value at probe point"));
        }
        Ok(out)
    };

    let mut probe = x.clone();
    let mut worst: f64 = 0.0;
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - step;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * step);
        let a = analytic.data()[i];
        worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}
