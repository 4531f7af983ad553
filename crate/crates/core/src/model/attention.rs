//! Additive soft attention over the per-frame local (object) features,
//! conditioned on the previous hidden state.
//!
//! `s_j = v · tanh(W_a l_j + W_h h_prev + b)`, weights are the masked softmax
//! of `s`, and the context is `Σ_j w_j l_j`. Masked-out slots get weight zero;
//! a frame with no present object yields a zero context.

use crate::diff::{Result, Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    /// `local_dim × attn_dim`.
    pub w_local: Tensor,
    /// `hidden × attn_dim`.
    pub w_hidden: Tensor,
    /// `1 × attn_dim`.
    pub bias: Tensor,
    /// `attn_dim × 1`.
    pub score: Tensor,
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionVars {
    pub w_local: Var,
    pub w_hidden: Var,
    pub bias: Var,
    pub score: Var,
}

impl AttentionParams {
    pub fn bind(&self, tape: &mut Tape) -> Result<AttentionVars> {
        Ok(AttentionVars {
            w_local: tape.leaf(self.w_local.clone())?,
            w_hidden: tape.leaf(self.w_hidden.clone())?,
            bias: tape.leaf(self.bias.clone())?,
            score: tape.leaf(self.score.clone())?,
        })
    }
}

impl AttentionVars {
    pub fn all(&self) -> [Var; 4] {
        [self.w_local, self.w_hidden, self.bias, self.score]
    }
}

/// Context vector (`1 × local_dim`) for one frame.
///
/// `locals` is `K × local_dim`, `h_prev` is `1 × hidden`.
pub fn attend_locals(
    tape: &mut Tape,
    vars: &AttentionVars,
    locals: Var,
    mask: &[bool],
    h_prev: Var,
) -> Result<Var> {
    let hidden_proj = tape.affine(h_prev, vars.w_hidden, vars.bias)?;
    let pre = tape.affine(locals, vars.w_local, hidden_proj)?;
    let act = tape.tanh(pre)?;
    let scores = tape.matmul(act, vars.score)?;
    let weights = tape.masked_softmax(scores, mask)?;
    let weights_row = tape.transpose(weights)?;
    tape.matmul(weights_row, locals)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> AttentionParams {
        AttentionParams {
            w_local: Tensor::from_rows(&[[0.5, -0.3], [0.2, 0.9], [-1.0, 0.4]]),
            w_hidden: Tensor::from_rows(&[[0.1, 0.2], [0.3, -0.4]]),
            bias: Tensor::from_rows(&[[0.05, -0.05]]),
            score: Tensor::from_rows(&[[1.5], [-0.7]]),
        }
    }

    fn context(locals: Tensor, mask: &[bool]) -> Tensor {
        let mut tape = Tape::checked();
        let vars = params().bind(&mut tape).unwrap();
        let l = tape.leaf(locals).unwrap();
        let h = tape.leaf(Tensor::from_rows(&[[0.4, -0.2]])).unwrap();
        let c = attend_locals(&mut tape, &vars, l, mask, h).unwrap();
        tape.value(c).clone()
    }

    #[test]
    fn single_unmasked_local_is_returned() {
        let l = Tensor::from_rows(&[[1.0, 2.0, 3.0]]);
        assert_eq!(context(l.clone(), &[true]), l);
    }

    #[test]
    fn all_masked_gives_zero() {
        let l = Tensor::from_rows(&[[0.0, 0.0, 0.0], [0.0, 0.0, 0.0]]);
        assert_eq!(context(l, &[false, false]), Tensor::zeros(1, 3));
    }

    #[test]
    fn identical_locals_give_that_local() {
        let row = [0.3, -1.2, 2.5];
        let c = context(Tensor::from_rows(&[row, row]), &[true, true]);
        for (a, b) in c.data().iter().zip(row) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn context_is_convex_combination_of_present_locals() {
        let l = Tensor::from_rows(&[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 0.0]]);
        let c = context(l, &[true, true, false]);
        let d = c.data();
        assert!(d[0] > 0.0 && d[1] > 0.0 && d[2] == 0.0);
        assert!((d[0] + d[1] - 1.0).abs() < 1e-12);
    }
}
