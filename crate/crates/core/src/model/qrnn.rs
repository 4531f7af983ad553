//! Quasi-recurrent layer with ifo-pooling.
//!
//! ```text
//! Z = tanh(W_z * X)   F = σ(W_f * X)   I = σ(W_i * X)   O = σ(W_o * X)
//! c_t = f_t ⊙ c_{t−1} + i_t ⊙ z_t,   h_t = o_t ⊙ c_t,   c_0 = 0
//! ```
//!
//! `*` is a causal convolution of width `k`. Each kernel is stored as `k`
//! stacked `n×m` taps (`(k·n) × m`), tap `j` applying to frame `t−j`.

use crate::diff::{DiffError, Result, Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct QrnnParams {
    pub kernel_width: usize,
    pub w_z: Tensor,
    pub w_f: Tensor,
    pub w_i: Tensor,
    pub w_o: Tensor,
    pub b_z: Tensor,
    pub b_f: Tensor,
    pub b_i: Tensor,
    pub b_o: Tensor,
}

#[derive(Debug, Clone, Copy)]
pub struct QrnnVars {
    pub kernel_width: usize,
    pub w_z: Var,
    pub w_f: Var,
    pub w_i: Var,
    pub w_o: Var,
    pub b_z: Var,
    pub b_f: Var,
    pub b_i: Var,
    pub b_o: Var,
}

impl QrnnParams {
    /// All-zero parameters for `n` inputs and `m` hidden units.
    pub fn zeros(kernel_width: usize, n: usize, m: usize) -> Self {
        let w = Tensor::zeros(kernel_width * n, m);
        let b = Tensor::zeros(1, m);
        Self {
            kernel_width,
            w_z: w.clone(),
            w_f: w.clone(),
            w_i: w.clone(),
            w_o: w,
            b_z: b.clone(),
            b_f: b.clone(),
            b_i: b.clone(),
            b_o: b,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w_z.rows() / self.kernel_width.max(1)
    }

    pub fn hidden_size(&self) -> usize {
        self.w_z.cols()
    }

    pub fn validate(&self) -> Result<()> {
        let shape = self.w_z.shape();
        if self.kernel_width == 0 || shape.0 % self.kernel_width != 0 {
            return Err(DiffError::Invalid {
                op: "qrnn",
                reason: format!(
                    "kernel rows {} not a multiple of width {}",
                    shape.0, self.kernel_width
                ),
            });
        }
        for w in [&self.w_f, &self.w_i, &self.w_o] {
            if w.shape() != shape {
                return Err(DiffError::Shape {
                    op: "qrnn kernels",
                    left: shape,
                    right: w.shape(),
                });
            }
        }
        for b in [&self.b_z, &self.b_f, &self.b_i, &self.b_o] {
            if b.shape() != (1, shape.1) {
                return Err(DiffError::Shape {
                    op: "qrnn biases",
                    left: (1, shape.1),
                    right: b.shape(),
                });
            }
        }
        Ok(())
    }

    pub fn bind(&self, tape: &mut Tape) -> Result<QrnnVars> {
        self.validate()?;
        Ok(QrnnVars {
            kernel_width: self.kernel_width,
            w_z: tape.leaf(self.w_z.clone())?,
            w_f: tape.leaf(self.w_f.clone())?,
            w_i: tape.leaf(self.w_i.clone())?,
            w_o: tape.leaf(self.w_o.clone())?,
            b_z: tape.leaf(self.b_z.clone())?,
            b_f: tape.leaf(self.b_f.clone())?,
            b_i: tape.leaf(self.b_i.clone())?,
            b_o: tape.leaf(self.b_o.clone())?,
        })
    }

    pub fn named(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("qrnn.w_z", &self.w_z),
            ("qrnn.w_f", &self.w_f),
            ("qrnn.w_i", &self.w_i),
            ("qrnn.w_o", &self.w_o),
            ("qrnn.b_z", &self.b_z),
            ("qrnn.b_f", &self.b_f),
            ("qrnn.b_i", &self.b_i),
            ("qrnn.b_o", &self.b_o),
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.w_z,
            &mut self.w_f,
            &mut self.w_i,
            &mut self.w_o,
            &mut self.b_z,
            &mut self.b_f,
            &mut self.b_i,
            &mut self.b_o,
        ]
    }
}

impl QrnnVars {
    pub fn all(&self) -> [Var; 8] {
        [
            self.w_z, self.w_f, self.w_i, self.w_o, self.b_z, self.b_f, self.b_i, self.b_o,
        ]
    }
}

/// Pools precomputed gate pre-activations (`1×m` each) into `(h_t, c_t)`.
fn pool(tape: &mut Tape, pre: [Var; 4], c_prev: Option<Var>) -> Result<(Var, Var)> {
    let z = tape.tanh(pre[0])?;
    let f = tape.sigmoid(pre[1])?;
    let i = tape.sigmoid(pre[2])?;
    let o = tape.sigmoid(pre[3])?;
    let iz = tape.mul(i, z)?;
    let c = match c_prev {
        Some(c_prev) => {
            let fc = tape.mul(f, c_prev)?;
            tape.add(fc, iz)?
        }
        None => iz,
    };
    let h = tape.mul(o, c)?;
    Ok((h, c))
}

/// One recurrence step.
///
/// `window` is `1 × (k·n)`: the current input followed by the `k−1` previous
/// inputs (zeros before the sequence start). `c_prev = None` means `c_0 = 0`.
pub fn qrnn_step(
    tape: &mut Tape,
    vars: &QrnnVars,
    window: Var,
    c_prev: Option<Var>,
) -> Result<(Var, Var)> {
    let pre = [
        tape.affine(window, vars.w_z, vars.b_z)?,
        tape.affine(window, vars.w_f, vars.b_f)?,
        tape.affine(window, vars.w_i, vars.b_i)?,
        tape.affine(window, vars.w_o, vars.b_o)?,
    ];
    pool(tape, pre, c_prev)
}

/// Runs the layer over a whole `T×n` sequence, returning `H` (`T×m`).
pub fn qrnn_forward(tape: &mut Tape, x: Var, vars: &QrnnVars) -> Result<Var> {
    let k = vars.kernel_width;
    let gates = [
        tape.causal_conv1d(x, vars.w_z, vars.b_z, k)?,
        tape.causal_conv1d(x, vars.w_f, vars.b_f, k)?,
        tape.causal_conv1d(x, vars.w_i, vars.b_i, k)?,
        tape.causal_conv1d(x, vars.w_o, vars.b_o, k)?,
    ];
    let steps = tape.value(x).rows();
    let mut c = None;
    let mut hs = Vec::with_capacity(steps);
    for t in 0..steps {
        let mut pre = gates;
        for g in &mut pre {
            *g = tape.slice_rows(*g, t, 1)?;
        }
        let (h, c_t) = pool(tape, pre, c)?;
        hs.push(h);
        c = Some(c_t);
    }
    if hs.is_empty() {
        let m = tape.value(vars.w_z).cols();
        return tape.leaf(Tensor::zeros(0, m));
    }
    tape.stack_rows(&hs)
}

/// Convenience wrapper evaluating [`qrnn_forward`] on a scratch tape.
pub fn qrnn_forward_values(x: &Tensor, params: &QrnnParams) -> Result<Tensor> {
    let mut tape = Tape::checked();
    let vars = params.bind(&mut tape)?;
    if x.cols() != params.input_dim() {
        return Err(DiffError::Shape {
            op: "qrnn input",
            left: (x.rows(), params.input_dim()),
            right: x.shape(),
        });
    }
    let xv = tape.leaf(x.clone())?;
    let h = qrnn_forward(&mut tape, xv, &vars)?;
    Ok(tape.value(h).clone())
}
