use crate::error::Result;
use crate::numerics::{NdArray, SeededRng, Var};
use crate::params::{glorot, ParamId, ParamStore, Session};

/// One LSTM direction. Gate blocks in every weight are ordered input,
/// forget, output, candidate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LstmParams {
    /// `input × 4·hidden`
    pub w_x: ParamId,
    /// `hidden × 4·hidden`
    pub w_h: ParamId,
    /// `4·hidden`; the forget block starts at 1.0.
    pub b: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl LstmParams {
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        input: usize,
        hidden: usize,
        rng: &mut SeededRng,
    ) -> Self {
        let w_x = store.add(format!("{prefix}.w_x"), glorot(rng, &[input, 4 * hidden]));
        let w_h = store.add(format!("{prefix}.w_h"), glorot(rng, &[hidden, 4 * hidden]));
        let mut bias = NdArray::zeros(&[4 * hidden]);
        bias.data_mut()[hidden..2 * hidden].fill(1.0);
        let b = store.add(format!("{prefix}.b"), bias);
        LstmParams {
            w_x,
            w_h,
            b,
            input,
            hidden,
        }
    }

    /// One step from a 1-D input vector. Returns `(h, c)`.
    pub fn step(&self, s: &mut Session, x: Var, h_prev: Var, c_prev: Var) -> Result<(Var, Var)> {
        let w_x = s.p(self.w_x);
        let b = s.p(self.b);
        let xp = s.g.matmul(x, w_x)?;
        let xp = s.g.add(xp, b)?;
        self.step_projected(s, xp, h_prev, c_prev)
    }

    /// One step given the precomputed `W_x·x + b` (length `4·hidden`).
    pub fn step_projected(
        &self,
        s: &mut Session,
        x_proj: Var,
        h_prev: Var,
        c_prev: Var,
    ) -> Result<(Var, Var)> {
        let w_h = s.p(self.w_h);
        let hp = s.g.matmul(h_prev, w_h)?;
        let pre = s.g.add(x_proj, hp)?;
        let hc = s.g.lstm_cell(pre, c_prev)?;
        let h = s.g.slice(hc, 0, self.hidden)?;
        let c = s.g.slice(hc, self.hidden, self.hidden)?;
        Ok((h, c))
    }

    /// Runs over the rows of `x` (`N × input`) in forward or reverse order.
    /// Rows with `valid == false` emit zeros and leave the state untouched.
    pub fn run(&self, s: &mut Session, x: Var, valid: &[bool], reverse: bool) -> Result<Var> {
        let w_x = s.p(self.w_x);
        let b = s.p(self.b);
        let proj = s.g.matmul(x, w_x)?;
        let proj = s.g.add_row(proj, b)?;
        let n = valid.len();
        let mut h = s.g.zeros(&[self.hidden]);
        let mut c = s.g.zeros(&[self.hidden]);
        let zero = h;
        let mut outputs = vec![zero; n];
        let order: Box<dyn Iterator<Item = usize>> = if reverse {
            Box::new((0..n).rev())
        } else {
            Box::new(0..n)
        };
        for t in order {
            if !valid[t] {
                continue;
            }
            let xp = s.g.row(proj, t)?;
            let (h_new, c_new) = self.step_projected(s, xp, h, c)?;
            h = h_new;
            c = c_new;
            outputs[t] = h;
        }
        s.g.stack_rows(&outputs)
    }
}
