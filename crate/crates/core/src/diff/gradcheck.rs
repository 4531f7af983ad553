//! Central finite-difference gradient checking.

use super::{DiffError, Result, Tape, Var};
use crate::tensor::Tensor;

/// `|a − n| / max(1e-8, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Compares reverse-mode gradients of a scalar function against central
/// differences with step `h`, returning the largest relative error over all
/// input coordinates.
///
/// `f` receives a fresh tape and one leaf per input tensor, and must return a
/// `1×1` variable.
pub fn grad_check<F>(f: F, inputs: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<(Tape, Vec<Var>, Var)> {
        let mut tape = Tape::checked();
        let vars = values
            .iter()
            .map(|v| tape.leaf(v.clone()))
            .collect::<Result<Vec<_>>>()?;
        let out = f(&mut tape, &vars)?;
        let (rows, cols) = tape.value(out).shape();
        if (rows, cols) != (1, 1) {
            return Err(DiffError::NotScalar { rows, cols });
        }
        Ok((tape, vars, out))
    };

    let (tape, vars, out) = eval(inputs)?;
    let grads = tape.backward(out)?;

    let mut worst = 0.0f64;
    let mut probe = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(*var);
        for j in 0..inputs[i].len() {
            let base = inputs[i].data()[j];
            probe[i].data_mut()[j] = base + h;
            let (tp, _, op) = eval(&probe)?;
            let plus = tp.value(op).data()[0];
            probe[i].data_mut()[j] = base - h;
            let (tm, _, om) = eval(&probe)?;
            let minus = tm.value(om).data()[0];
            probe[i].data_mut()[j] = base;
            let numeric = (plus - minus) / (2.0 * h);
            worst = worst.max(relative_error(analytic.data()[j], numeric));
        }
    }
    Ok(worst)
}
