//! Standard LSTM baseline.
//!
//! Gate blocks are packed column-wise in the order input, forget, cell,
//! output: `[i | f | g | o] = x_t W_x + h_{t−1} W_h + b`.

use crate::diff::{DiffError, Result, Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct LstmParams {
    /// `n × 4m`.
    pub w_x: Tensor,
    /// `m × 4m`.
    pub w_h: Tensor,
    /// `1 × 4m`.
    pub b: Tensor,
}

#[derive(Debug, Clone, Copy)]
pub struct LstmVars {
    pub w_x: Var,
    pub w_h: Var,
    pub b: Var,
    hidden: usize,
}

impl LstmParams {
    pub fn zeros(n: usize, m: usize) -> Self {
        Self {
            w_x: Tensor::zeros(n, 4 * m),
            w_h: Tensor::zeros(m, 4 * m),
            b: Tensor::zeros(1, 4 * m),
        }
    }

    pub fn hidden_size(&self) -> usize {
        self.w_h.rows()
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.w_h.rows();
        if self.w_h.cols() != 4 * m || self.w_x.cols() != 4 * m || self.b.shape() != (1, 4 * m) {
            return Err(DiffError::Invalid {
                op: "lstm",
                reason: format!(
                    "inconsistent shapes w_x {:?}, w_h {:?}, b {:?}",
                    self.w_x.shape(),
                    self.w_h.shape(),
                    self.b.shape()
                ),
            });
        }
        Ok(())
    }

    pub fn bind(&self, tape: &mut Tape) -> Result<LstmVars> {
        self.validate()?;
        Ok(LstmVars {
            w_x: tape.leaf(self.w_x.clone())?,
            w_h: tape.leaf(self.w_h.clone())?,
            b: tape.leaf(self.b.clone())?,
            hidden: self.hidden_size(),
        })
    }

    pub fn named(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("lstm.w_x", &self.w_x),
            ("lstm.w_h", &self.w_h),
            ("lstm.b", &self.b),
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.w_x, &mut self.w_h, &mut self.b]
    }
}

impl LstmVars {
    pub fn new(w_x: Var, w_h: Var, b: Var, hidden: usize) -> Self {
        Self {
            w_x,
            w_h,
            b,
            hidden,
        }
    }

    pub fn all(&self) -> [Var; 3] {
        [self.w_x, self.w_h, self.b]
    }
}

/// One step. `None` states stand for the zero initial state.
pub fn lstm_step(
    tape: &mut Tape,
    vars: &LstmVars,
    x_t: Var,
    state: Option<(Var, Var)>,
) -> Result<(Var, Var)> {
    let m = vars.hidden;
    let mut pre = tape.affine(x_t, vars.w_x, vars.b)?;
    if let Some((h_prev, _)) = state {
        let rec = tape.matmul(h_prev, vars.w_h)?;
        pre = tape.add(pre, rec)?;
    }
    let i = tape.slice_cols(pre, 0, m)?;
    let f = tape.slice_cols(pre, m, m)?;
    let g = tape.slice_cols(pre, 2 * m, m)?;
    let o = tape.slice_cols(pre, 3 * m, m)?;
    let i = tape.sigmoid(i)?;
    let g = tape.tanh(g)?;
    let o = tape.sigmoid(o)?;
    let ig = tape.mul(i, g)?;
    let c = match state {
        Some((_, c_prev)) => {
            let f = tape.sigmoid(f)?;
            let fc = tape.mul(f, c_prev)?;
            tape.add(fc, ig)?
        }
        None => ig,
    };
    let tc = tape.tanh(c)?;
    let h = tape.mul(o, tc)?;
    Ok((h, c))
}

/// Runs the LSTM over a `T×n` sequence, returning `H` (`T×m`).
pub fn lstm_forward(tape: &mut Tape, x: Var, vars: &LstmVars) -> Result<Var> {
    let steps = tape.value(x).rows();
    let mut state = None;
    let mut hs = Vec::with_capacity(steps);
    for t in 0..steps {
        let x_t = tape.slice_rows(x, t, 1)?;
        let (h, c) = lstm_step(tape, vars, x_t, state)?;
        hs.push(h);
        state = Some((h, c));
    }
    if hs.is_empty() {
        return tape.leaf(Tensor::zeros(0, vars.hidden));
    }
    tape.stack_rows(&hs)
}

/// Convenience wrapper evaluating [`lstm_forward`] on a scratch tape.
pub fn lstm_forward_values(x: &Tensor, params: &LstmParams) -> Result<Tensor> {
    let mut tape = Tape::checked();
    let vars = params.bind(&mut tape)?;
    if x.cols() != params.w_x.rows() {
        return Err(DiffError::Shape {
            op: "lstm input",
            left: (x.rows(), params.w_x.rows()),
            right: x.shape(),
        });
    }
    let xv = tape.leaf(x.clone())?;
    let h = lstm_forward(&mut tape, xv, &vars)?;
    Ok(tape.value(h).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_weights_give_zero_output() {
        let p = LstmParams::zeros(3, 2);
        let x = Tensor::from_rows(&[[1.0, 2.0, 3.0], [-1.0, 0.5, 0.0]]);
        assert_eq!(lstm_forward_values(&x, &p).unwrap(), Tensor::zeros(2, 2));
    }

    #[test]
    fn output_shape() {
        let p = LstmParams::zeros(3, 5);
        let x = Tensor::zeros(7, 3);
        assert_eq!(lstm_forward_values(&x, &p).unwrap().shape(), (7, 5));
    }

    #[test]
    fn single_step_hand_example() {
        let p = LstmParams {
            w_x: Tensor::from_rows(&[[0.5, -0.4, 0.9, 0.2]]),
            w_h: Tensor::from_rows(&[[0.3, 0.1, -0.2, 0.7]]),
            b: Tensor::from_rows(&[[0.1, 1.0, 0.0, -0.1]]),
        };
        let s = |v: f64| 1.0 / (1.0 + (-v).exp());
        let x1 = 0.8;
        let i1 = s(0.5 * x1 + 0.1);
        let g1 = (0.9f64 * x1).tanh();
        let o1 = s(0.2 * x1 - 0.1);
        let c1 = i1 * g1;
        let h1 = o1 * c1.tanh();
        let x2 = -0.6;
        let i2 = s(0.5 * x2 + 0.3 * h1 + 0.1);
        let f2 = s(-0.4 * x2 + 0.1 * h1 + 1.0);
        let g2 = (0.9 * x2 - 0.2 * h1).tanh();
        let o2 = s(0.2 * x2 + 0.7 * h1 - 0.1);
        let c2 = f2 * c1 + i2 * g2;
        let h2 = o2 * c2.tanh();
        let h = lstm_forward_values(&Tensor::column_vector(vec![x1, x2]), &p).unwrap();
        assert!((h.get(0, 0) - h1).abs() < 1e-12);
        assert!((h.get(1, 0) - h2).abs() < 1e-12);
    }
}
