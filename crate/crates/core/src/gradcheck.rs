//! Central-difference verification of reverse-mode gradients.

use crate::autodiff::{Tape, Var};
use crate::tensor::{Tensor, TensorError};

pub const DEFAULT_STEP: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GradCheckError {
    #[error("function is not finite near the check point (coordinate {0:?})")]
    NonFinite(Option<usize>),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Outcome of one gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// max over coordinates of |analytic - numeric| / max(1, |analytic|)
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: Tensor,
    pub numeric: Tensor,
}

/// Compares the tape gradient of the scalar function `f` at `x` against
/// central differences with step `h`.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<GradCheckReport, GradCheckError>
where
    F: for<'t> Fn(Var<'t>) -> Var<'t>,
{
    let eval = |point: Tensor, coord: Option<usize>| -> Result<f64, GradCheckError> {
        let tape = Tape::new();
        let v = f(tape.leaf(point)).item();
        if v.is_finite() {
            Ok(v)
        } else {
            Err(GradCheckError::NonFinite(coord))
        }
    };

    let analytic = {
        let tape = Tape::new();
        let leaf = tape.leaf(x.clone());
        let out = f(leaf);
        if !out.item().is_finite() {
            return Err(GradCheckError::NonFinite(None));
        }
        tape.backward(out)?.wrt(leaf)
    };

    let mut numeric = Tensor::zeros(x.shape());
    let mut worst = (0.0f64, 0usize);
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let d = (eval(plus, Some(i))? - eval(minus, Some(i))?) / (2.0 * h);
        numeric.data_mut()[i] = d;
        let a = analytic.data()[i];
        let err = (a - d).abs() / a.abs().max(1.0);
        if err > worst.0 {
            worst = (err, i);
        }
    }
    Ok(GradCheckReport {
        max_rel_error: worst.0,
        worst_index: worst.1,
        analytic,
        numeric,
    })
}
