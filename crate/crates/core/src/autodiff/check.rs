use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Default central-difference step.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Smallest denominator used when forming relative errors, so coordinates
/// whose true gradient is ~0 are judged on absolute error at this scale.
pub const RELATIVE_FLOOR: f64 = 1e-6;

const MIN_PROBES: usize = 64;

/// Compares the tape gradient of a scalar program against central finite
/// differences and returns the worst relative error.
///
/// `program` receives a fresh tape and the leaf holding `theta`, and must
/// return a scalar. All coordinates are probed when `theta` has at most 64
/// entries; otherwise an evenly strided subset of at least 64.
pub fn finite_difference_check<P>(program: P, theta: &Tensor<f64>, step: f64) -> Result<f64>
where
    P: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let leaf = tape.leaf(theta.clone());
    let loss = program(&mut tape, leaf)?;
    let analytic = tape.backward(loss)?.get_or_zeros(leaf, theta.shape());

    let eval = |values: Tensor<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let leaf = tape.leaf(values);
        let out = program(&mut tape, leaf)?;
        let v = tape.value(out);
        if v.len() != 1 {
            return Err(Error::invalid(
                "finite-difference program must return a scalar",
            ));
        }
        Ok(v.data()[0])
    };

    let n = theta.len();
    let stride = if n <= MIN_PROBES { 1 } else { n / MIN_PROBES };
    let mut worst: f64 = 0.0;
    for i in (0..n).step_by(stride.max(1)) {
        let mut plus = theta.clone();
        plus.data_mut()[i] += step;
        let mut minus = theta.clone();
        minus.data_mut()[i] -= step;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * step);
        let a = analytic.data()[i];
        let denom = a.abs().max(numeric.abs()).max(RELATIVE_FLOOR);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}
