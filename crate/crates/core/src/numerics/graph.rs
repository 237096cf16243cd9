//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation appends a node holding its value and a description of how
//! it was produced. Nodes only reference earlier nodes, so the tape is in
//! topological order by construction and [`Graph::backward`] is a single
//! reverse sweep that visits each node once.

use super::array::{dot, matmul_into, NdArray, ZERO_NORM};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    AddScalar(Var, Var),
    MulScalar(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    LogClamped(Var, f64),
    Sum(Var),
    Softmax(Var),
    MaxOverTime { x: Var, argmax: Vec<usize> },
    Reshape(Var),
    Transpose(Var),
    Concat(Vec<Var>),
    ConcatCols(Vec<Var>),
    StackRows(Vec<Var>),
    Slice { x: Var, start: usize },
    Rows { x: Var, start: usize },
    MaskRows { x: Var, valid: Vec<bool> },
    Gather { table: Var, ids: Vec<usize> },
    ScatterAdd { x: Var, ids: Vec<usize> },
    Index { x: Var, i: usize },
    LstmCell { pre: Var, c_prev: Var },
    MpCosine { h: Var, o: Var, w: Var },
    PairwiseDiff(Var, Var),
    RowWeightedSum { alpha: Var, t: Var },
    Mean(Vec<Var>),
}

#[derive(Debug)]
struct Node {
    value: NdArray,
    op: Op,
    requires_grad: bool,
}

/// A tape of recorded operations. Confined to one thread; independent
/// graphs may be evaluated concurrently.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    first_non_finite: Option<usize>,
}

/// Gradients of a scalar with respect to every leaf that requires them.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `v`, or `None` if `v` did not influence the loss.
    pub fn get(&self, v: Var) -> Option<NdArray> {
        self.grads[v.0]
            .as_ref()
            .map(|g| NdArray::new(self.shapes[v.0].clone(), g.clone()).expect("grad shape"))
    }

    pub fn get_slice(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Gradient for `v`, zero-filled when absent.
    pub fn get_or_zeros(&self, v: Var) -> NdArray {
        self.get(v)
            .unwrap_or_else(|| NdArray::zeros(&self.shapes[v.0]))
    }
}

fn acc<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> Option<&'a mut [f64]> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let n = nodes[v.0].value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]).as_mut_slice())
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn check_valid(valid: Option<&[bool]>, len: usize, op: &'static str) -> Result<()> {
    if let Some(v) = valid {
        if v.len() != len {
            return Err(Error::dim(op, &[len], &[v.len()]));
        }
        if !v.iter().any(|&b| b) {
            return Err(Error::Degenerate(format!("{op}: every position is masked")));
        }
    } else if len == 0 {
        return Err(Error::Degenerate(format!("{op}: empty input")));
    }
    Ok(())
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &NdArray {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: NdArray, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push_with(value, op, requires_grad)
    }

    fn push_with(&mut self, value: NdArray, op: Op, requires_grad: bool) -> Var {
        if cfg!(debug_assertions) && self.first_non_finite.is_none() && !value.all_finite() {
            self.first_non_finite = Some(self.nodes.len());
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Fails if any recorded value was NaN or infinite (checked in debug
    /// builds only).
    pub fn check_finite(&self) -> Result<()> {
        match self.first_non_finite {
            Some(i) => Err(Error::NonFinite(format!(
                "node {i} ({:?})",
                op_name(&self.nodes[i].op)
            ))),
            None => Ok(()),
        }
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: NdArray) -> Var {
        self.push_with(value, Op::Leaf, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: NdArray) -> Var {
        self.push_with(value, Op::Leaf, false)
    }

    pub fn zeros(&mut self, shape: &[usize]) -> Var {
        self.constant(NdArray::zeros(shape))
    }

    /// Matrix product. A 1-D left operand is treated as a row vector and the
    /// result is then 1-D as well.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (m, n, vec_lhs) = match sa.len() {
            1 => (1, sa[0], true),
            2 => (sa[0], sa[1], false),
            _ => return Err(Error::dim("matmul", sa, sb)),
        };
        if sb.len() != 2 || sb[0] != n {
            return Err(Error::dim("matmul", sa, sb));
        }
        let p = sb[1];
        let mut out = vec![0.0; m * p];
        matmul_into(self.value(a).data(), self.value(b).data(), &mut out, m, n, p);
        let shape = if vec_lhs { vec![p] } else { vec![m, p] };
        let value = NdArray::new(shape, out)?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> NdArray {
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| f(*x, *y)).collect();
        NdArray::new(va.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self.zip_with(a, b, |x, y| x + y);
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = self.zip_with(a, b, |x, y| x - y);
        Ok(self.push(value, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = self.zip_with(a, b, |x, y| x * y);
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    /// Adds vector `b` to every row of `x` (or to `x` itself when 1-D).
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(b));
        if sb.len() != 1 || sx.is_empty() || *sx.last().unwrap() != sb[0] {
            return Err(Error::dim("add_row", sx, sb));
        }
        let mut value = self.value(x).clone();
        let bias = self.value(b).data();
        for chunk in value.data_mut().chunks_mut(bias.len()) {
            for (o, v) in chunk.iter_mut().zip(bias) {
                *o += v;
            }
        }
        Ok(self.push(value, Op::AddRow(x, b), &[x, b]))
    }

    fn expect_scalar(&self, op: &'static str, s: Var) -> Result<f64> {
        if self.value(s).len() != 1 {
            return Err(Error::dim(op, self.shape(s), &[1]));
        }
        Ok(self.value(s).item())
    }

    /// Adds a one-element node to every entry of `x`.
    pub fn add_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        let c = self.expect_scalar("add_scalar", s)?;
        let mut value = self.value(x).clone();
        value.data_mut().iter_mut().for_each(|v| *v += c);
        Ok(self.push(value, Op::AddScalar(x, s), &[x, s]))
    }

    /// Multiplies every entry of `x` by a one-element node.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        let c = self.expect_scalar("mul_scalar", s)?;
        let mut value = self.value(x).clone();
        value.scale_assign(c);
        Ok(self.push(value, Op::MulScalar(x, s), &[x, s]))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let mut value = self.value(x).clone();
        value.scale_assign(c);
        self.push(value, Op::Scale(x, c), &[x])
    }

    fn map(&mut self, x: Var, f: impl Fn(f64) -> f64) -> NdArray {
        let vx = self.value(x);
        let data = vx.data().iter().map(|v| f(*v)).collect();
        NdArray::new(vx.shape().to_vec(), data).expect("same shape")
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.map(x, f64::tanh);
        self.push(value, Op::Tanh(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.map(x, sigmoid);
        self.push(value, Op::Sigmoid(x), &[x])
    }

    /// `ln(max(x, floor))`; the gradient is zero where the clamp is active.
    pub fn log_clamped(&mut self, x: Var, floor: f64) -> Var {
        let value = self.map(x, |v| v.max(floor).ln());
        self.push(value, Op::LogClamped(x, floor), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(NdArray::scalar(s), Op::Sum(x), &[x])
    }

    /// Softmax along the last axis (row-wise for 2-D input). Positions whose
    /// `valid` flag is false get exactly zero mass.
    pub fn softmax(&mut self, x: Var, valid: Option<&[bool]>) -> Result<Var> {
        let vx = self.value(x);
        let n = vx.cols();
        check_valid(valid, n, "softmax")?;
        let mut out = vec![0.0; vx.len()];
        for (row_in, row_out) in vx.data().chunks(n.max(1)).zip(out.chunks_mut(n.max(1))) {
            softmax_into(row_in, row_out, valid);
        }
        let value = NdArray::new(vx.shape().to_vec(), out)?;
        Ok(self.push(value, Op::Softmax(x), &[x]))
    }

    /// Element-wise maximum over the valid rows of a `T×d` array. Ties go
    /// to the first maximal row.
    pub fn max_over_time(&mut self, x: Var, valid: Option<&[bool]>) -> Result<Var> {
        let vx = self.value(x);
        if vx.rank() != 2 {
            return Err(Error::dim("max_over_time", vx.shape(), &[0, 0]));
        }
        let (t, d) = (vx.shape()[0], vx.shape()[1]);
        check_valid(valid, t, "max_over_time")?;
        let mut best = vec![f64::NEG_INFINITY; d];
        let mut argmax = vec![usize::MAX; d];
        for i in 0..t {
            if valid.is_some_and(|v| !v[i]) {
                continue;
            }
            for (j, &v) in vx.row(i).iter().enumerate() {
                if argmax[j] == usize::MAX || v > best[j] {
                    best[j] = v;
                    argmax[j] = i;
                }
            }
        }
        let value = NdArray::vector(best);
        Ok(self.push(value, Op::MaxOverTime { x, argmax }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshaped(shape)?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).transpose()?;
        Ok(self.push(value, Op::Transpose(x), &[x]))
    }

    /// Concatenates 1-D vectors.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let mut data = Vec::new();
        for &p in parts {
            if self.value(p).rank() != 1 {
                return Err(Error::dim("concat", self.shape(p), &[0]));
            }
            data.extend_from_slice(self.value(p).data());
        }
        Ok(self.push(NdArray::vector(data), Op::Concat(parts.to_vec()), parts))
    }

    /// Concatenates 2-D arrays with equal row counts along the columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Degenerate("concat_cols: no inputs".into()))?;
        let rows = self.value(first).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[0] != rows {
                return Err(Error::dim("concat_cols", self.shape(first), s));
            }
            widths.push(s[1]);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let value = NdArray::new(vec![rows, total], data)?;
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Stacks equal-length 1-D vectors into the rows of a matrix.
    pub fn stack_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Degenerate("stack_rows: no inputs".into()))?;
        let width = self.value(first).len();
        let mut data = Vec::with_capacity(parts.len() * width);
        for &p in parts {
            if self.shape(p) != [width] {
                return Err(Error::dim("stack_rows", &[width], self.shape(p)));
            }
            data.extend_from_slice(self.value(p).data());
        }
        let value = NdArray::new(vec![parts.len(), width], data)?;
        Ok(self.push(value, Op::StackRows(parts.to_vec()), parts))
    }

    /// Contiguous sub-range of a 1-D vector.
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let vx = self.value(x);
        if vx.rank() != 1 || start + len > vx.len() {
            return Err(Error::dim("slice", vx.shape(), &[start, len]));
        }
        let value = NdArray::vector(vx.data()[start..start + len].to_vec());
        Ok(self.push(value, Op::Slice { x, start }, &[x]))
    }

    /// Row `i` of a 2-D array as a 1-D vector.
    pub fn row(&mut self, x: Var, i: usize) -> Result<Var> {
        let vx = self.value(x);
        if vx.rank() != 2 || i >= vx.rows() {
            return Err(Error::dim("row", vx.shape(), &[i]));
        }
        let c = vx.cols();
        let value = NdArray::vector(vx.row(i).to_vec());
        Ok(self.push(value, Op::Slice { x, start: i * c }, &[x]))
    }

    /// Rows `start..start+len` of a 2-D array.
    pub fn rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let vx = self.value(x);
        if vx.rank() != 2 || start + len > vx.rows() {
            return Err(Error::dim("rows", vx.shape(), &[start, len]));
        }
        let c = vx.cols();
        let value = NdArray::new(vec![len, c], vx.data()[start * c..(start + len) * c].to_vec())?;
        Ok(self.push(value, Op::Rows { x, start }, &[x]))
    }

    /// Zeroes the rows whose `valid` flag is false.
    pub fn mask_rows(&mut self, x: Var, valid: &[bool]) -> Result<Var> {
        let vx = self.value(x);
        if vx.rank() != 2 || vx.rows() != valid.len() {
            return Err(Error::dim("mask_rows", vx.shape(), &[valid.len()]));
        }
        let mut value = vx.clone();
        let c = value.cols();
        for (r, &ok) in valid.iter().enumerate() {
            if !ok {
                value.data_mut()[r * c..(r + 1) * c].fill(0.0);
            }
        }
        Ok(self.push(
            value,
            Op::MaskRows {
                x,
                valid: valid.to_vec(),
            },
            &[x],
        ))
    }

    /// Rows of `table` selected by `ids`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let vt = self.value(table);
        if vt.rank() != 2 {
            return Err(Error::dim("gather_rows", vt.shape(), &[0, 0]));
        }
        let mut data = Vec::with_capacity(ids.len() * vt.cols());
        for &id in ids {
            if id >= vt.rows() {
                return Err(Error::dim("gather_rows", vt.shape(), &[id]));
            }
            data.extend_from_slice(vt.row(id));
        }
        let value = NdArray::new(vec![ids.len(), vt.cols()], data)?;
        Ok(self.push(
            value,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// `out[ids[i]] += x[i]` into a zero vector of length `size`.
    pub fn scatter_add(&mut self, x: Var, ids: &[usize], size: usize) -> Result<Var> {
        let vx = self.value(x);
        if vx.rank() != 1 || vx.len() != ids.len() {
            return Err(Error::dim("scatter_add", vx.shape(), &[ids.len()]));
        }
        let mut out = vec![0.0; size];
        for (&id, &v) in ids.iter().zip(vx.data()) {
            if id >= size {
                return Err(Error::dim("scatter_add", &[size], &[id]));
            }
            out[id] += v;
        }
        Ok(self.push(
            NdArray::vector(out),
            Op::ScatterAdd {
                x,
                ids: ids.to_vec(),
            },
            &[x],
        ))
    }

    /// Single entry of the flattened array as a one-element node.
    pub fn index(&mut self, x: Var, i: usize) -> Result<Var> {
        let vx = self.value(x);
        if i >= vx.len() {
            return Err(Error::dim("index", vx.shape(), &[i]));
        }
        let value = NdArray::scalar(vx.data()[i]);
        Ok(self.push(value, Op::Index { x, i }, &[x]))
    }

    /// Fused LSTM cell. `pre` holds the `4h` gate pre-activations in the
    /// order input, forget, output, candidate. Returns `[h, c]` (length `2h`).
    pub fn lstm_cell(&mut self, pre: Var, c_prev: Var) -> Result<Var> {
        let (vp, vc) = (self.value(pre), self.value(c_prev));
        let h = vc.len();
        if vp.rank() != 1 || vc.rank() != 1 || vp.len() != 4 * h {
            return Err(Error::dim("lstm_cell", vp.shape(), vc.shape()));
        }
        let z = vp.data();
        let mut out = vec![0.0; 2 * h];
        for k in 0..h {
            let i = sigmoid(z[k]);
            let f = sigmoid(z[h + k]);
            let o = sigmoid(z[2 * h + k]);
            let g = z[3 * h + k].tanh();
            let c = f * vc.data()[k] + i * g;
            out[k] = o * c.tanh();
            out[h + k] = c;
        }
        Ok(self.push(
            NdArray::vector(out),
            Op::LstmCell { pre, c_prev },
            &[pre, c_prev],
        ))
    }

    /// Multi-perspective cosine matching: `out[i, z] = cos(h_i ∘ w_z, o ∘ w_z)`
    /// for `h: n×d`, `o: d`, `w: Z×d`, with the zero-norm convention.
    pub fn mp_cosine(&mut self, h: Var, o: Var, w: Var) -> Result<Var> {
        let (vh, vo, vw) = (self.value(h), self.value(o), self.value(w));
        let d = vo.len();
        if vh.rank() != 2 || vh.cols() != d || vw.rank() != 2 || vw.cols() != d || vo.rank() != 1
        {
            return Err(Error::dim("mp_cosine", vh.shape(), vw.shape()));
        }
        let (n, z) = (vh.rows(), vw.rows());
        let mut out = vec![0.0; n * z];
        for i in 0..n {
            for p in 0..z {
                out[i * z + p] = weighted_cosine(vh.row(i), vo.data(), vw.row(p)).cos;
            }
        }
        let value = NdArray::new(vec![n, z], out)?;
        Ok(self.push(value, Op::MpCosine { h, o, w }, &[h, o, w]))
    }

    /// `out[i*m + j, z] = a[i, z] - b[j, z]` for `a: n×Z`, `b: m×Z`.
    pub fn pairwise_diff(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.rank() != 2 || vb.rank() != 2 || va.cols() != vb.cols() {
            return Err(Error::dim("pairwise_diff", va.shape(), vb.shape()));
        }
        let (n, m, z) = (va.rows(), vb.rows(), va.cols());
        let mut out = Vec::with_capacity(n * m * z);
        for i in 0..n {
            for j in 0..m {
                out.extend(va.row(i).iter().zip(vb.row(j)).map(|(x, y)| x - y));
            }
        }
        let value = NdArray::new(vec![n * m, z], out)?;
        Ok(self.push(value, Op::PairwiseDiff(a, b), &[a, b]))
    }

    /// `out[i, z] = Σ_j alpha[i, j] · t[i*m + j, z]` for `alpha: n×m`,
    /// `t: (n·m)×Z`.
    pub fn row_weighted_sum(&mut self, alpha: Var, t: Var) -> Result<Var> {
        let (va, vt) = (self.value(alpha), self.value(t));
        if va.rank() != 2 || vt.rank() != 2 || va.len() != vt.rows() {
            return Err(Error::dim("row_weighted_sum", va.shape(), vt.shape()));
        }
        let (n, m, z) = (va.rows(), va.cols(), vt.cols());
        let mut out = vec![0.0; n * z];
        for i in 0..n {
            let row_out = &mut out[i * z..(i + 1) * z];
            for j in 0..m {
                let w = va.get2(i, j);
                for (o, v) in row_out.iter_mut().zip(vt.row(i * m + j)) {
                    *o += w * v;
                }
            }
        }
        let value = NdArray::new(vec![n, z], out)?;
        Ok(self.push(value, Op::RowWeightedSum { alpha, t }, &[alpha, t]))
    }

    /// Element-wise mean of same-shape arrays. Each coordinate is summed in
    /// sorted order, so the result does not depend on the order of `parts`.
    pub fn mean(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Degenerate("mean: no inputs".into()))?;
        for &p in parts {
            self.same_shape("mean", first, p)?;
        }
        let len = self.value(first).len();
        let k = parts.len() as f64;
        let mut column = Vec::with_capacity(parts.len());
        let mut out = vec![0.0; len];
        for (idx, o) in out.iter_mut().enumerate() {
            column.clear();
            column.extend(parts.iter().map(|&p| self.value(p).data()[idx]));
            column.sort_by(f64::total_cmp);
            *o = column.iter().sum::<f64>() / k;
        }
        let value = NdArray::new(self.shape(first).to_vec(), out)?;
        Ok(self.push(value, Op::Mean(parts.to_vec()), parts))
    }

    /// Reverse sweep from a one-element `loss` node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.check_finite()?;
        let nodes = &self.nodes;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        if nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for idx in (0..=loss.0).rev() {
            let node = &nodes[idx];
            if matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            backprop(nodes, &mut grads, node, &g);
        }
        grads.resize(nodes.len(), None);
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }
}

pub(crate) fn softmax_into(x: &[f64], out: &mut [f64], valid: Option<&[bool]>) {
    let ok = |i: usize| valid.is_none_or(|v| v[i]);
    let max = x
        .iter()
        .enumerate()
        .filter(|(i, _)| ok(*i))
        .map(|(_, v)| *v)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (i, (o, v)) in out.iter_mut().zip(x).enumerate() {
        *o = if ok(i) { (v - max).exp() } else { 0.0 };
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

struct WeightedCosine {
    cos: f64,
    /// `1 / (|a| |b|)`, zero under the zero-norm convention.
    inv_ab: f64,
    inv_aa: f64,
    inv_bb: f64,
}

fn weighted_cosine(h: &[f64], o: &[f64], w: &[f64]) -> WeightedCosine {
    let (mut aa, mut bb, mut ab) = (0.0, 0.0, 0.0);
    for ((hv, ov), wv) in h.iter().zip(o).zip(w) {
        let (a, b) = (hv * wv, ov * wv);
        aa += a * a;
        bb += b * b;
        ab += a * b;
    }
    let (na, nb) = (aa.sqrt(), bb.sqrt());
    if na < ZERO_NORM || nb < ZERO_NORM {
        return WeightedCosine {
            cos: 0.0,
            inv_ab: 0.0,
            inv_aa: 0.0,
            inv_bb: 0.0,
        };
    }
    WeightedCosine {
        cos: ab / (na * nb),
        inv_ab: 1.0 / (na * nb),
        inv_aa: 1.0 / aa,
        inv_bb: 1.0 / bb,
    }
}

fn backprop(nodes: &[Node], grads: &mut [Option<Vec<f64>>], node: &Node, g: &[f64]) {
    let val = |v: Var| &nodes[v.0].value;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            let (n, p) = (vb.shape()[0], vb.shape()[1]);
            let m = va.len() / n;
            if let Some(da) = acc(grads, nodes, *a) {
                for i in 0..m {
                    for k in 0..n {
                        da[i * n + k] += dot(&g[i * p..(i + 1) * p], vb.row(k));
                    }
                }
            }
            if let Some(db) = acc(grads, nodes, *b) {
                let a_data = va.data();
                for i in 0..m {
                    let g_row = &g[i * p..(i + 1) * p];
                    for k in 0..n {
                        let aik = a_data[i * n + k];
                        if aik == 0.0 {
                            continue;
                        }
                        for (d, gv) in db[k * p..(k + 1) * p].iter_mut().zip(g_row) {
                            *d += aik * gv;
                        }
                    }
                }
            }
        }
        Op::Add(a, b) => {
            if let Some(da) = acc(grads, nodes, *a) {
                add_into(da, g);
            }
            if let Some(db) = acc(grads, nodes, *b) {
                add_into(db, g);
            }
        }
        Op::Sub(a, b) => {
            if let Some(da) = acc(grads, nodes, *a) {
                add_into(da, g);
            }
            if let Some(db) = acc(grads, nodes, *b) {
                db.iter_mut().zip(g).for_each(|(d, v)| *d -= v);
            }
        }
        Op::Mul(a, b) => {
            if let Some(da) = acc(grads, nodes, *a) {
                for ((d, gv), bv) in da.iter_mut().zip(g).zip(val(*b).data()) {
                    *d += gv * bv;
                }
            }
            if let Some(db) = acc(grads, nodes, *b) {
                for ((d, gv), av) in db.iter_mut().zip(g).zip(val(*a).data()) {
                    *d += gv * av;
                }
            }
        }
        Op::AddRow(x, b) => {
            if let Some(dx) = acc(grads, nodes, *x) {
                add_into(dx, g);
            }
            if let Some(db) = acc(grads, nodes, *b) {
                let n = db.len();
                for chunk in g.chunks(n) {
                    add_into(db, chunk);
                }
            }
        }
        Op::AddScalar(x, s) => {
            if let Some(dx) = acc(grads, nodes, *x) {
                add_into(dx, g);
            }
            if let Some(ds) = acc(grads, nodes, *s) {
                ds[0] += g.iter().sum::<f64>();
            }
        }
        Op::MulScalar(x, s) => {
            let c = val(*s).item();
            if let Some(dx) = acc(grads, nodes, *x) {
                dx.iter_mut().zip(g).for_each(|(d, v)| *d += c * v);
            }
            if let Some(ds) = acc(grads, nodes, *s) {
                ds[0] += dot(g, val(*x).data());
            }
        }
        Op::Scale(x, c) => {
            if let Some(dx) = acc(grads, nodes, *x) {
                dx.iter_mut().zip(g).for_each(|(d, v)| *d += c * v);
            }
        }
        Op::Tanh(x) => {
            if let Some(dx) = acc(grads, nodes, *x) {
                for ((d, gv), y) in dx.iter_mut().zip(g).zip(node.value.data()) {
                    *d += gv * (1.0 - y * y);
                }
            }
        }
        Op::Sigmoid(x) => {
            if let Some(dx) = acc(grads, nodes, *x) {
                for ((d, gv), y) in dx.iter_mut().zip(g).zip(node.value.data()) {
                    *d += gv * y * (1.0 - y);
                }
            }
        }
        Op::LogClamped(x, floor) => {
            let vx = val(*x);
            if let Some(dx) = acc(grads, nodes, *x) {
                for ((d, gv), xv) in dx.iter_mut().zip(g).zip(vx.data()) {
                    if *xv > *floor {
                        *d += gv / xv;
                    }
                }
            }
        }
        Op::Sum(x) => {
            if let Some(dx) = acc(grads, nodes, *x) {
                dx.iter_mut().for_each(|d| *d += g[0]);
            }
        }
        Op::Softmax(x) => {
            let y = &node.value;
            let n = y.cols().max(1);
            if let Some(dx) = acc(grads, nodes, *x) {
                for ((d_row, y_row), g_row) in dx.chunks_mut(n).zip(y.data().chunks(n)).zip(g.chunks(n))
                {
                    let s = dot(y_row, g_row);
                    for ((d, yv), gv) in d_row.iter_mut().zip(y_row).zip(g_row) {
                        *d += yv * (gv - s);
                    }
                }
            }
        }
        Op::MaxOverTime { x, argmax } => {
            let d = argmax.len();
            if let Some(dx) = acc(grads, nodes, *x) {
                for (j, &row) in argmax.iter().enumerate() {
                    dx[row * d + j] += g[j];
                }
            }
        }
        Op::Reshape(x) => {
            if let Some(dx) = acc(grads, nodes, *x) {
                add_into(dx, g);
            }
        }
        Op::Transpose(x) => {
            let s = val(*x).shape();
            let (r, c) = (s[0], s[1]);
            if let Some(dx) = acc(grads, nodes, *x) {
                for i in 0..r {
                    for j in 0..c {
                        dx[i * c + j] += g[j * r + i];
                    }
                }
            }
        }
        Op::Concat(parts) => {
            let mut offset = 0;
            for &p in parts {
                let n = val(p).len();
                if let Some(dp) = acc(grads, nodes, p) {
                    add_into(dp, &g[offset..offset + n]);
                }
                offset += n;
            }
        }
        Op::ConcatCols(parts) => {
            let total = node.value.cols();
            let mut offset = 0;
            for &p in parts {
                let w = val(p).cols();
                if let Some(dp) = acc(grads, nodes, p) {
                    for (r, d_row) in dp.chunks_mut(w.max(1)).enumerate() {
                        add_into(d_row, &g[r * total + offset..r * total + offset + w]);
                    }
                }
                offset += w;
            }
        }
        Op::StackRows(parts) => {
            let w = node.value.cols();
            for (r, &p) in parts.iter().enumerate() {
                if let Some(dp) = acc(grads, nodes, p) {
                    add_into(dp, &g[r * w..(r + 1) * w]);
                }
            }
        }
        Op::Slice { x, start } => {
            if let Some(dx) = acc(grads, nodes, *x) {
                add_into(&mut dx[*start..*start + g.len()], g);
            }
        }
        Op::Rows { x, start } => {
            let c = val(*x).cols();
            if let Some(dx) = acc(grads, nodes, *x) {
                add_into(&mut dx[start * c..start * c + g.len()], g);
            }
        }
        Op::MaskRows { x, valid } => {
            let c = val(*x).cols();
            if let Some(dx) = acc(grads, nodes, *x) {
                for (r, &ok) in valid.iter().enumerate() {
                    if ok {
                        add_into(&mut dx[r * c..(r + 1) * c], &g[r * c..(r + 1) * c]);
                    }
                }
            }
        }
        Op::Gather { table, ids } => {
            let c = val(*table).cols();
            if let Some(dt) = acc(grads, nodes, *table) {
                for (r, &id) in ids.iter().enumerate() {
                    add_into(&mut dt[id * c..(id + 1) * c], &g[r * c..(r + 1) * c]);
                }
            }
        }
        Op::ScatterAdd { x, ids } => {
            if let Some(dx) = acc(grads, nodes, *x) {
                for (d, &id) in dx.iter_mut().zip(ids) {
                    *d += g[id];
                }
            }
        }
        Op::Index { x, i } => {
            if let Some(dx) = acc(grads, nodes, *x) {
                dx[*i] += g[0];
            }
        }
        Op::LstmCell { pre, c_prev } => {
            let z = val(*pre).data();
            let cp = val(*c_prev).data();
            let h = cp.len();
            let out = node.value.data();
            let mut dz = vec![0.0; 4 * h];
            let mut dcp = vec![0.0; h];
            for k in 0..h {
                let i = sigmoid(z[k]);
                let f = sigmoid(z[h + k]);
                let o = sigmoid(z[2 * h + k]);
                let gc = z[3 * h + k].tanh();
                let c = out[h + k];
                let tc = c.tanh();
                let dh = g[k];
                let dc = g[h + k] + dh * o * (1.0 - tc * tc);
                dz[k] = dc * gc * i * (1.0 - i);
                dz[h + k] = dc * cp[k] * f * (1.0 - f);
                dz[2 * h + k] = dh * tc * o * (1.0 - o);
                dz[3 * h + k] = dc * i * (1.0 - gc * gc);
                dcp[k] = dc * f;
            }
            if let Some(d) = acc(grads, nodes, *pre) {
                add_into(d, &dz);
            }
            if let Some(d) = acc(grads, nodes, *c_prev) {
                add_into(d, &dcp);
            }
        }
        Op::MpCosine { h, o, w } => {
            let (vh, vo, vw) = (val(*h), val(*o), val(*w));
            let (n, z, d) = (vh.rows(), vw.rows(), vo.len());
            let mut dh = vec![0.0; n * d];
            let mut dov = vec![0.0; d];
            let mut dw = vec![0.0; z * d];
            for i in 0..n {
                let hi = vh.row(i);
                for p in 0..z {
                    let gv = g[i * z + p];
                    if gv == 0.0 {
                        continue;
                    }
                    let wp = vw.row(p);
                    let wc = weighted_cosine(hi, vo.data(), wp);
                    if wc.inv_ab == 0.0 {
                        continue;
                    }
                    for k in 0..d {
                        let (hv, ov, wv) = (hi[k], vo.data()[k], wp[k]);
                        // derivatives w.r.t. a = h∘w and b = o∘w, scaled by w
                        let da = wv * (ov * wc.inv_ab - wc.cos * hv * wc.inv_aa);
                        let db = wv * (hv * wc.inv_ab - wc.cos * ov * wc.inv_bb);
                        dh[i * d + k] += gv * da * wv;
                        dov[k] += gv * db * wv;
                        dw[p * d + k] += gv * (da * hv + db * ov);
                    }
                }
            }
            if let Some(x) = acc(grads, nodes, *h) {
                add_into(x, &dh);
            }
            if let Some(x) = acc(grads, nodes, *o) {
                add_into(x, &dov);
            }
            if let Some(x) = acc(grads, nodes, *w) {
                add_into(x, &dw);
            }
        }
        Op::PairwiseDiff(a, b) => {
            let (n, m, z) = (val(*a).rows(), val(*b).rows(), val(*a).cols());
            if let Some(da) = acc(grads, nodes, *a) {
                for i in 0..n {
                    for j in 0..m {
                        add_into(&mut da[i * z..(i + 1) * z], &g[(i * m + j) * z..(i * m + j + 1) * z]);
                    }
                }
            }
            if let Some(db) = acc(grads, nodes, *b) {
                for i in 0..n {
                    for j in 0..m {
                        let src = &g[(i * m + j) * z..(i * m + j + 1) * z];
                        db[j * z..(j + 1) * z]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(d, v)| *d -= v);
                    }
                }
            }
        }
        Op::RowWeightedSum { alpha, t } => {
            let (va, vt) = (val(*alpha), val(*t));
            let (n, m, z) = (va.rows(), va.cols(), vt.cols());
            if let Some(da) = acc(grads, nodes, *alpha) {
                for i in 0..n {
                    for j in 0..m {
                        da[i * m + j] += dot(&g[i * z..(i + 1) * z], vt.row(i * m + j));
                    }
                }
            }
            if let Some(dt) = acc(grads, nodes, *t) {
                for i in 0..n {
                    for j in 0..m {
                        let w = va.get2(i, j);
                        let r = i * m + j;
                        for (d, gv) in dt[r * z..(r + 1) * z].iter_mut().zip(&g[i * z..(i + 1) * z]) {
                            *d += w * gv;
                        }
                    }
                }
            }
        }
        Op::Mean(parts) => {
            let k = parts.len() as f64;
            for &p in parts {
                if let Some(dp) = acc(grads, nodes, p) {
                    dp.iter_mut().zip(g).for_each(|(d, v)| *d += v / k);
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::MatMul(..) => "matmul",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::AddRow(..) => "add_row",
        Op::AddScalar(..) => "add_scalar",
        Op::MulScalar(..) => "mul_scalar",
        Op::Scale(..) => "scale",
        Op::Tanh(_) => "tanh",
        Op::Sigmoid(_) => "sigmoid",
        Op::LogClamped(..) => "log",
        Op::Sum(_) => "sum",
        Op::Softmax(_) => "softmax",
        Op::MaxOverTime { .. } => "max_over_time",
        Op::Reshape(_) => "reshape",
        Op::Transpose(_) => "transpose",
        Op::Concat(_) => "concat",
        Op::ConcatCols(_) => "concat_cols",
        Op::StackRows(_) => "stack_rows",
        Op::Slice { .. } => "slice",
        Op::Rows { .. } => "rows",
        Op::MaskRows { .. } => "mask_rows",
        Op::Gather { .. } => "gather_rows",
        Op::ScatterAdd { .. } => "scatter_add",
        Op::Index { .. } => "index",
        Op::LstmCell { .. } => "lstm_cell",
        Op::MpCosine { .. } => "mp_cosine",
        Op::PairwiseDiff(..) => "pairwise_diff",
        Op::RowWeightedSum { .. } => "row_weighted_sum",
        Op::Mean(_) => "mean",
    }
}
