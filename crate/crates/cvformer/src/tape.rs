//! Reverse-mode autodiff on a linear tape.
//!
//! Ops append nodes holding the forward value and a record of how it was
//! produced; `backward` replays the tape in reverse, accumulating vector-
//! Jacobian products into each node's gradient buffer. All tape tensors are
//! rank-2 (scalars are 1 x 1). A tape is consumed by `backward`: recording or
//! differentiating after that is a contract error.
//!
//! Every op validates shapes, checks its output for NaN/Inf, and charges its
//! exact MAC cost (see `macs`).

use crate::error::{Error, Result};
use crate::kernels;
use crate::macs;
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op<S: Scalar> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    AddRow { x: Var, row: Var },
    Matmul(Var, Var),
    MatmulNT(Var, Var),
    Transpose(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows { x: Var, start: usize },
    MeanRows(Var),
    MeanCols(Var),
    SumAll(Var),
    Pick { x: Var, row: usize, col: usize },
    SoftmaxRows(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, eps: f64 },
    Gelu(Var),
    Exp(Var),
    LogEps { x: Var, eps: f64 },
    CosineRow { a: Var, b: Var, eps: f64 },
}

struct Node<S: Scalar> {
    rows: usize,
    cols: usize,
    value: Vec<S>,
    grad: Option<Vec<S>>,
    needs_grad: bool,
    param: Option<ParamId>,
    op: Op<S>,
}

pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
    consumed: bool,
}

/// Test hook: when set, the gelu backward rule is deliberately perturbed so a
/// corrupted-gradient path exists for the self-check to detect.
#[doc(hidden)]
pub fn set_backward_fault(on: bool) {
    BACKWARD_FAULT.with(|c| c.set(on));
}

thread_local! {
    static BACKWARD_FAULT: std::cell::Cell<bool> = std::cell::Cell::new(false);
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), consumed: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[S] {
        &self.nodes[v.0].value
    }

    /// Value of a 1 x 1 node.
    pub fn scalar_value(&self, v: Var) -> S {
        debug_assert_eq!(self.nodes[v.0].value.len(), 1);
        self.nodes[v.0].value[0]
    }

    pub fn dims(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn grad_of(&self, v: Var) -> Option<&[S]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Forward values of every node, in recording order. Used by verification
    /// tests that compare 32-bit and 64-bit passes node by node.
    pub fn node_values(&self) -> impl Iterator<Item = ((usize, usize), &[S])> {
        self.nodes.iter().map(|n| ((n.rows, n.cols), n.value.as_slice()))
    }

    /// Row sums of every softmax output on the tape.
    pub fn softmax_row_sums(&self) -> Vec<f64> {
        let mut sums = Vec::new();
        for n in &self.nodes {
            if matches!(n.op, Op::SoftmaxRows(_)) {
                for r in 0..n.rows {
                    sums.push(n.value[r * n.cols..(r + 1) * n.cols].iter().map(|v| v.to_f64()).sum());
                }
            }
        }
        sums
    }

    // ── leaves ──────────────────────────────────────────────────────────

    /// Records a tensor as a constant input (no gradient).
    pub fn input(&mut self, t: &Tensor<S>) -> Result<Var> {
        self.leaf(t.rows(), t.cols(), t.data().to_vec(), false, None)
    }

    pub fn input_matrix(&mut self, rows: usize, cols: usize, data: &[S]) -> Result<Var> {
        self.leaf(rows, cols, data.to_vec(), false, None)
    }

    /// Records a tensor as a differentiable leaf (honors `requires_grad`).
    pub fn variable(&mut self, t: &Tensor<S>) -> Result<Var> {
        self.leaf(t.rows(), t.cols(), t.data().to_vec(), t.requires_grad(), None)
    }

    /// Records a parameter leaf bound to a store slot, so its gradient can be
    /// accumulated back after `backward`.
    pub fn param(&mut self, id: ParamId, t: &Tensor<S>) -> Result<Var> {
        self.leaf(t.rows(), t.cols(), t.data().to_vec(), t.requires_grad(), Some(id))
    }

    fn leaf(
        &mut self,
        rows: usize,
        cols: usize,
        data: Vec<S>,
        needs_grad: bool,
        param: Option<ParamId>,
    ) -> Result<Var> {
        self.check_open()?;
        if rows * cols != data.len() {
            return Err(Error::Shape {
                op: "leaf",
                detail: format!("{rows}x{cols} does not describe {} values", data.len()),
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: "leaf" });
        }
        Ok(self.push(rows, cols, data, needs_grad, param, Op::Leaf))
    }

    fn check_open(&self) -> Result<()> {
        if self.consumed {
            Err(Error::Contract("tape already consumed by backward".into()))
        } else {
            Ok(())
        }
    }

    fn push(
        &mut self,
        rows: usize,
        cols: usize,
        value: Vec<S>,
        needs_grad: bool,
        param: Option<ParamId>,
        op: Op<S>,
    ) -> Var {
        self.nodes.push(Node { rows, cols, value, grad: None, needs_grad, param, op });
        Var(self.nodes.len() - 1)
    }

    fn finish(&mut self, op_name: &'static str, rows: usize, cols: usize, value: Vec<S>, op: Op<S>) -> Result<Var> {
        if !value.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: op_name });
        }
        let needs_grad = self.op_inputs(&op).iter().any(|v| self.nodes[v.0].needs_grad);
        Ok(self.push(rows, cols, value, needs_grad, None, op))
    }

    fn op_inputs(&self, op: &Op<S>) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Matmul(a, b) | Op::MatmulNT(a, b) => {
                vec![*a, *b]
            }
            Op::Scale(x, _)
            | Op::Transpose(x)
            | Op::SliceRows { x, .. }
            | Op::MeanRows(x)
            | Op::MeanCols(x)
            | Op::SumAll(x)
            | Op::Pick { x, .. }
            | Op::SoftmaxRows(x)
            | Op::Gelu(x)
            | Op::Exp(x)
            | Op::LogEps { x, .. } => vec![*x],
            Op::AddRow { x, row } => vec![*x, *row],
            Op::ConcatRows(vs) | Op::ConcatCols(vs) => vs.clone(),
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::CosineRow { a, b, .. } => vec![*a, *b],
        }
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(usize, usize)> {
        let (ra, ca) = self.dims(a);
        let (rb, cb) = self.dims(b);
        if (ra, ca) != (rb, cb) {
            return Err(Error::Shape { op, detail: format!("{ra}x{ca} vs {rb}x{cb}") });
        }
        Ok((ra, ca))
    }

    // ── elementwise and minor ops ───────────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_open()?;
        let (r, c) = self.same_shape("add", a, b)?;
        let value: Vec<S> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| *x + *y)
            .collect();
        self.finish("add", r, c, value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_open()?;
        let (r, c) = self.same_shape("sub", a, b)?;
        let value: Vec<S> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| *x - *y)
            .collect();
        self.finish("sub", r, c, value, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_open()?;
        let (r, c) = self.same_shape("mul", a, b)?;
        macs::add((r * c) as u64);
        let value: Vec<S> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| *x * *y)
            .collect();
        self.finish("mul", r, c, value, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, c: S) -> Result<Var> {
        self.check_open()?;
        let (r, cl) = self.dims(x);
        macs::add((r * cl) as u64);
        let value: Vec<S> = self.nodes[x.0].value.iter().map(|v| *v * c).collect();
        self.finish("scale", r, cl, value, Op::Scale(x, c))
    }

    /// Adds a 1 x n row vector to every row of an m x n matrix.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        self.check_open()?;
        let (m, n) = self.dims(x);
        let (rr, rc) = self.dims(row);
        if rr != 1 || rc != n {
            return Err(Error::Shape { op: "add_row", detail: format!("{m}x{n} plus row {rr}x{rc}") });
        }
        let rowv = &self.nodes[row.0].value;
        let mut value = Vec::with_capacity(m * n);
        for i in 0..m {
            let xr = &self.nodes[x.0].value[i * n..(i + 1) * n];
            value.extend(xr.iter().zip(rowv).map(|(a, b)| *a + *b));
        }
        self.finish("add_row", m, n, value, Op::AddRow { x, row })
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        self.check_open()?;
        let (m, n) = self.dims(x);
        let xv = &self.nodes[x.0].value;
        let mut value = vec![S::ZERO; m * n];
        for i in 0..m {
            for j in 0..n {
                value[j * m + i] = xv[i * n + j];
            }
        }
        self.finish("transpose", n, m, value, Op::Transpose(x))
    }

    /// Concatenation along rows (axis 0) or columns (axis 1).
    pub fn concat(&mut self, axis: usize, parts: &[Var]) -> Result<Var> {
        self.check_open()?;
        if parts.is_empty() {
            return Err(Error::Contract("concat of zero tensors".into()));
        }
        match axis {
            0 => {
                let cols = self.dims(parts[0]).1;
                let mut rows = 0;
                let mut value = Vec::new();
                for &p in parts {
                    let (r, c) = self.dims(p);
                    if c != cols {
                        return Err(Error::Shape {
                            op: "concat",
                            detail: format!("rows with {c} cols next to {cols}"),
                        });
                    }
                    rows += r;
                    value.extend_from_slice(&self.nodes[p.0].value);
                }
                self.finish("concat", rows, cols, value, Op::ConcatRows(parts.to_vec()))
            }
            1 => {
                let rows = self.dims(parts[0]).0;
                let mut cols = 0;
                for &p in parts {
                    let (r, c) = self.dims(p);
                    if r != rows {
                        return Err(Error::Shape {
                            op: "concat",
                            detail: format!("cols with {r} rows next to {rows}"),
                        });
                    }
                    cols += c;
                }
                let mut value = Vec::with_capacity(rows * cols);
                for i in 0..rows {
                    for &p in parts {
                        let (_, c) = self.dims(p);
                        value.extend_from_slice(&self.nodes[p.0].value[i * c..(i + 1) * c]);
                    }
                }
                self.finish("concat", rows, cols, value, Op::ConcatCols(parts.to_vec()))
            }
            _ => Err(Error::Contract(format!("concat axis {axis} out of range"))),
        }
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        self.check_open()?;
        let (m, n) = self.dims(x);
        if start + len > m || len == 0 {
            return Err(Error::Shape {
                op: "slice_rows",
                detail: format!("rows {start}..{} of a {m}x{n} tensor", start + len),
            });
        }
        let value = self.nodes[x.0].value[start * n..(start + len) * n].to_vec();
        self.finish("slice_rows", len, n, value, Op::SliceRows { x, start })
    }

    /// Mean over rows (axis 0 -> 1 x n) or over columns (axis 1 -> m x 1).
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_open()?;
        let (m, n) = self.dims(x);
        let xv = &self.nodes[x.0].value;
        match axis {
            0 => {
                macs::add(n as u64);
                let inv = S::from_f64(1.0 / m as f64);
                let mut value = vec![S::ZERO; n];
                for i in 0..m {
                    for j in 0..n {
                        value[j] += xv[i * n + j];
                    }
                }
                for v in &mut value {
                    *v = *v * inv;
                }
                self.finish("mean_axis", 1, n, value, Op::MeanRows(x))
            }
            1 => {
                macs::add(m as u64);
                let inv = S::from_f64(1.0 / n as f64);
                let value: Vec<S> = (0..m)
                    .map(|i| xv[i * n..(i + 1) * n].iter().copied().sum::<S>() * inv)
                    .collect();
                self.finish("mean_axis", m, 1, value, Op::MeanCols(x))
            }
            _ => Err(Error::Contract(format!("mean axis {axis} out of range"))),
        }
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        self.check_open()?;
        let total: S = self.nodes[x.0].value.iter().copied().sum();
        self.finish("sum_all", 1, 1, vec![total], Op::SumAll(x))
    }

    /// Selects one element as a 1 x 1 tensor.
    pub fn pick(&mut self, x: Var, row: usize, col: usize) -> Result<Var> {
        self.check_open()?;
        let (m, n) = self.dims(x);
        if row >= m || col >= n {
            return Err(Error::Shape { op: "pick", detail: format!("({row},{col}) of {m}x{n}") });
        }
        let value = vec![self.nodes[x.0].value[row * n + col]];
        self.finish("pick", 1, 1, value, Op::Pick { x, row, col })
    }

    // ── matrix products ─────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_open()?;
        let (m, ka) = self.dims(a);
        let (kb, n) = self.dims(b);
        if ka != kb {
            return Err(Error::Shape { op: "matmul", detail: format!("{m}x{ka} times {kb}x{n}") });
        }
        let mut value = vec![S::ZERO; m * n];
        kernels::matmul_nn(&self.nodes[a.0].value, &self.nodes[b.0].value, m, ka, n, &mut value);
        self.finish("matmul", m, n, value, Op::Matmul(a, b))
    }

    /// a * b^T without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_open()?;
        let (m, ka) = self.dims(a);
        let (n, kb) = self.dims(b);
        if ka != kb {
            return Err(Error::Shape {
                op: "matmul_nt",
                detail: format!("{m}x{ka} times transpose of {n}x{kb}"),
            });
        }
        let mut value = vec![S::ZERO; m * n];
        kernels::matmul_nt(&self.nodes[a.0].value, &self.nodes[b.0].value, m, ka, n, &mut value);
        self.finish("matmul_nt", m, n, value, Op::MatmulNT(a, b))
    }

    // ── nonlinearities ──────────────────────────────────────────────────

    /// Row-wise softmax with max subtraction; rows sum to one.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        self.check_open()?;
        let (m, n) = self.dims(x);
        macs::add((m * n) as u64);
        let xv = &self.nodes[x.0].value;
        let mut value = vec![S::ZERO; m * n];
        for i in 0..m {
            let row = &xv[i * n..(i + 1) * n];
            let mut mx = row[0];
            for &v in row {
                mx = mx.maxv(v);
            }
            let out = &mut value[i * n..(i + 1) * n];
            let mut total = S::ZERO;
            for (o, &v) in out.iter_mut().zip(row) {
                *o = (v - mx).exp();
                total += *o;
            }
            let inv = S::ONE / total;
            for o in out.iter_mut() {
                *o = *o * inv;
            }
        }
        self.finish("softmax_rows", m, n, value, Op::SoftmaxRows(x))
    }

    /// Per-token normalization with learned gain and bias:
    /// out = gain * (x - mean) / sqrt(var + eps) + bias, row-wise.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        self.check_open()?;
        let (m, n) = self.dims(x);
        let (gr, gc) = self.dims(gain);
        let (br, bc) = self.dims(bias);
        if n < 2 {
            return Err(Error::Contract(format!("layer_norm over width {n}; need at least 2")));
        }
        if gr != 1 || gc != n || br != 1 || bc != n {
            return Err(Error::Shape {
                op: "layer_norm",
                detail: format!("x {m}x{n} with gain {gr}x{gc}, bias {br}x{bc}"),
            });
        }
        macs::add((2 * m * n) as u64);
        let epss = S::from_f64(eps);
        let invn = S::from_f64(1.0 / n as f64);
        let mut value = vec![S::ZERO; m * n];
        {
            let xv = &self.nodes[x.0].value;
            let gv = &self.nodes[gain.0].value;
            let bv = &self.nodes[bias.0].value;
            for i in 0..m {
                let row = &xv[i * n..(i + 1) * n];
                let mean = row.iter().copied().sum::<S>() * invn;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() * invn;
                let inv = S::ONE / (var + epss).sqrt();
                let out = &mut value[i * n..(i + 1) * n];
                for j in 0..n {
                    out[j] = gv[j] * ((row[j] - mean) * inv) + bv[j];
                }
            }
        }
        self.finish("layer_norm", m, n, value, Op::LayerNorm { x, gain, bias, eps })
    }

    /// Exact GELU: x * Phi(x), with Phi the standard normal CDF via erf.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.check_open()?;
        let (m, n) = self.dims(x);
        macs::add((m * n) as u64);
        let value: Vec<S> = self.nodes[x.0]
            .value
            .iter()
            .map(|&v| v * S::from_f64(crate::scalar::normal_cdf(v.to_f64())))
            .collect();
        self.finish("gelu", m, n, value, Op::Gelu(x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.check_open()?;
        let (m, n) = self.dims(x);
        let value: Vec<S> = self.nodes[x.0].value.iter().map(|v| v.exp()).collect();
        self.finish("exp", m, n, value, Op::Exp(x))
    }

    /// ln(max(x, eps)): the clamp keeps log of probabilities finite.
    pub fn log_eps(&mut self, x: Var, eps: f64) -> Result<Var> {
        self.check_open()?;
        let (m, n) = self.dims(x);
        let epss = S::from_f64(eps);
        let value: Vec<S> = self.nodes[x.0].value.iter().map(|&v| v.maxv(epss).ln()).collect();
        self.finish("log_eps", m, n, value, Op::LogEps { x, eps })
    }

    /// Cosine similarity of two single-row tensors, denominator guarded by eps.
    pub fn cosine_row(&mut self, a: Var, b: Var, eps: f64) -> Result<Var> {
        self.check_open()?;
        let (ra, ca) = self.dims(a);
        let (rb, cb) = self.dims(b);
        if ra != 1 || rb != 1 || ca != cb {
            return Err(Error::Shape { op: "cosine", detail: format!("{ra}x{ca} vs {rb}x{cb}") });
        }
        macs::add(3 * ca as u64);
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let d = kernels::dot(av, bv);
        let na = kernels::dot(av, av).sqrt();
        let nb = kernels::dot(bv, bv).sqrt();
        let value = vec![d / (na * nb + S::from_f64(eps))];
        self.finish("cosine", 1, 1, value, Op::CosineRow { a, b, eps })
    }

    // ── reverse pass ────────────────────────────────────────────────────

    /// Seeds d(loss)/d(loss) = 1 and replays the tape in reverse, accumulating
    /// gradients into every leaf that requires them. Consumes the tape.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.check_open()?;
        let ln = &self.nodes[loss.0];
        if ln.rows != 1 || ln.cols != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got {}x{}",
                ln.rows, ln.cols
            )));
        }
        self.consumed = true;
        self.nodes[loss.0].grad = Some(vec![S::ONE]);
        for i in (0..self.nodes.len()).rev() {
            if self.nodes[i].grad.is_none() || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let op = self.nodes[i].op.clone();
            let g = self.nodes[i].grad.take().expect("checked above");
            self.backprop(i, &op, &g)?;
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn add_grad(&mut self, v: Var, delta: Vec<S>) {
        let node = &mut self.nodes[v.0];
        match &mut node.grad {
            Some(g) => {
                for (a, d) in g.iter_mut().zip(&delta) {
                    *a += *d;
                }
            }
            None => node.grad = Some(delta),
        }
    }

    fn backprop(&mut self, out: usize, op: &Op<S>, g: &[S]) -> Result<()> {
        match *op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.wants(a) {
                    self.add_grad(a, g.to_vec());
                }
                if self.wants(b) {
                    self.add_grad(b, g.to_vec());
                }
            }
            Op::Sub(a, b) => {
                if self.wants(a) {
                    self.add_grad(a, g.to_vec());
                }
                if self.wants(b) {
                    self.add_grad(b, g.iter().map(|&v| -v).collect());
                }
            }
            Op::Mul(a, b) => {
                if self.wants(a) {
                    let d = g.iter().zip(&self.nodes[b.0].value).map(|(&gv, &bv)| gv * bv).collect();
                    self.add_grad(a, d);
                }
                if self.wants(b) {
                    let d = g.iter().zip(&self.nodes[a.0].value).map(|(&gv, &av)| gv * av).collect();
                    self.add_grad(b, d);
                }
            }
            Op::Scale(x, c) => {
                if self.wants(x) {
                    self.add_grad(x, g.iter().map(|&v| v * c).collect());
                }
            }
            Op::AddRow { x, row } => {
                let n = self.nodes[out].cols;
                let m = self.nodes[out].rows;
                if self.wants(x) {
                    self.add_grad(x, g.to_vec());
                }
                if self.wants(row) {
                    let mut d = vec![S::ZERO; n];
                    for i in 0..m {
                        for j in 0..n {
                            d[j] += g[i * n + j];
                        }
                    }
                    self.add_grad(row, d);
                }
            }
            Op::Matmul(a, b) => {
                let (m, k) = self.dims(a);
                let n = self.dims(b).1;
                if self.wants(a) {
                    let mut d = vec![S::ZERO; m * k];
                    kernels::matmul_nt(g, &self.nodes[b.0].value, m, n, k, &mut d);
                    self.add_grad(a, d);
                }
                if self.wants(b) {
                    let mut d = vec![S::ZERO; k * n];
                    kernels::matmul_tn(&self.nodes[a.0].value, g, m, k, n, &mut d);
                    self.add_grad(b, d);
                }
            }
            Op::MatmulNT(a, b) => {
                let (m, k) = self.dims(a);
                let n = self.dims(b).0;
                if self.wants(a) {
                    let mut d = vec![S::ZERO; m * k];
                    kernels::matmul_nn(g, &self.nodes[b.0].value, m, n, k, &mut d);
                    self.add_grad(a, d);
                }
                if self.wants(b) {
                    let mut d = vec![S::ZERO; n * k];
                    kernels::matmul_tn(g, &self.nodes[a.0].value, m, n, k, &mut d);
                    self.add_grad(b, d);
                }
            }
            Op::Transpose(x) => {
                if self.wants(x) {
                    let (r, c) = self.dims(Var(out));
                    let mut d = vec![S::ZERO; r * c];
                    for i in 0..r {
                        for j in 0..c {
                            d[j * r + i] = g[i * c + j];
                        }
                    }
                    self.add_grad(x, d);
                }
            }
            Op::ConcatRows(ref parts) => {
                let cols = self.nodes[out].cols;
                let mut offset = 0;
                for &p in parts {
                    let r = self.dims(p).0;
                    if self.wants(p) {
                        self.add_grad(p, g[offset * cols..(offset + r) * cols].to_vec());
                    }
                    offset += r;
                }
            }
            Op::ConcatCols(ref parts) => {
                let rows = self.nodes[out].rows;
                let total = self.nodes[out].cols;
                let mut offset = 0;
                for &p in parts {
                    let c = self.dims(p).1;
                    if self.wants(p) {
                        let mut d = vec![S::ZERO; rows * c];
                        for i in 0..rows {
                            d[i * c..(i + 1) * c]
                                .copy_from_slice(&g[i * total + offset..i * total + offset + c]);
                        }
                        self.add_grad(p, d);
                    }
                    offset += c;
                }
            }
            Op::SliceRows { x, start } => {
                if self.wants(x) {
                    let (m, n) = self.dims(x);
                    let len = self.nodes[out].rows;
                    let mut d = vec![S::ZERO; m * n];
                    d[start * n..(start + len) * n].copy_from_slice(g);
                    self.add_grad(x, d);
                }
            }
            Op::MeanRows(x) => {
                if self.wants(x) {
                    let (m, n) = self.dims(x);
                    let inv = S::from_f64(1.0 / m as f64);
                    let mut d = vec![S::ZERO; m * n];
                    for i in 0..m {
                        for j in 0..n {
                            d[i * n + j] = g[j] * inv;
                        }
                    }
                    self.add_grad(x, d);
                }
            }
            Op::MeanCols(x) => {
                if self.wants(x) {
                    let (m, n) = self.dims(x);
                    let inv = S::from_f64(1.0 / n as f64);
                    let mut d = vec![S::ZERO; m * n];
                    for i in 0..m {
                        for j in 0..n {
                            d[i * n + j] = g[i] * inv;
                        }
                    }
                    self.add_grad(x, d);
                }
            }
            Op::SumAll(x) => {
                if self.wants(x) {
                    let (m, n) = self.dims(x);
                    self.add_grad(x, vec![g[0]; m * n]);
                }
            }
            Op::Pick { x, row, col } => {
                if self.wants(x) {
                    let (m, n) = self.dims(x);
                    let mut d = vec![S::ZERO; m * n];
                    d[row * n + col] = g[0];
                    self.add_grad(x, d);
                }
            }
            Op::SoftmaxRows(x) => {
                if self.wants(x) {
                    let (m, n) = self.dims(Var(out));
                    let y = &self.nodes[out].value;
                    let mut d = vec![S::ZERO; m * n];
                    for i in 0..m {
                        let yr = &y[i * n..(i + 1) * n];
                        let gr = &g[i * n..(i + 1) * n];
                        let inner: S = yr.iter().zip(gr).map(|(&yv, &gv)| yv * gv).sum();
                        for j in 0..n {
                            d[i * n + j] = yr[j] * (gr[j] - inner);
                        }
                    }
                    self.add_grad(x, d);
                }
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let (m, n) = self.dims(x);
                let invn = S::from_f64(1.0 / n as f64);
                let epss = S::from_f64(eps);
                // Recompute per-row statistics from the stored input.
                let mut dx = if self.wants(x) { Some(vec![S::ZERO; m * n]) } else { None };
                let mut dgain = if self.wants(gain) { Some(vec![S::ZERO; n]) } else { None };
                let mut dbias = if self.wants(bias) { Some(vec![S::ZERO; n]) } else { None };
                {
                    let xv = &self.nodes[x.0].value;
                    let gv = &self.nodes[gain.0].value;
                    for i in 0..m {
                        let row = &xv[i * n..(i + 1) * n];
                        let gr = &g[i * n..(i + 1) * n];
                        let mean = row.iter().copied().sum::<S>() * invn;
                        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() * invn;
                        let inv = S::ONE / (var + epss).sqrt();
                        if let Some(db) = dbias.as_mut() {
                            for j in 0..n {
                                db[j] += gr[j];
                            }
                        }
                        if let Some(dg) = dgain.as_mut() {
                            for j in 0..n {
                                dg[j] += gr[j] * ((row[j] - mean) * inv);
                            }
                        }
                        if let Some(dx) = dx.as_mut() {
                            let mut mean_gh = S::ZERO;
                            let mut mean_ghx = S::ZERO;
                            for j in 0..n {
                                let gh = gr[j] * gv[j];
                                let xh = (row[j] - mean) * inv;
                                mean_gh += gh;
                                mean_ghx += gh * xh;
                            }
                            mean_gh = mean_gh * invn;
                            mean_ghx = mean_ghx * invn;
                            for j in 0..n {
                                let gh = gr[j] * gv[j];
                                let xh = (row[j] - mean) * inv;
                                dx[i * n + j] = inv * (gh - mean_gh - xh * mean_ghx);
                            }
                        }
                    }
                }
                if let Some(d) = dx {
                    self.add_grad(x, d);
                }
                if let Some(d) = dgain {
                    self.add_grad(gain, d);
                }
                if let Some(d) = dbias {
                    self.add_grad(bias, d);
                }
            }
            Op::Gelu(x) => {
                if self.wants(x) {
                    let fault = BACKWARD_FAULT.with(std::cell::Cell::get);
                    let d: Vec<S> = self.nodes[x.0]
                        .value
                        .iter()
                        .zip(g)
                        .map(|(&v, &gv)| {
                            let xf = v.to_f64();
                            let mut slope =
                                crate::scalar::normal_cdf(xf) + xf * crate::scalar::normal_pdf(xf);
                            if fault {
                                slope += 0.05;
                            }
                            gv * S::from_f64(slope)
                        })
                        .collect();
                    self.add_grad(x, d);
                }
            }
            Op::Exp(x) => {
                if self.wants(x) {
                    let d = g.iter().zip(&self.nodes[out].value).map(|(&gv, &yv)| gv * yv).collect();
                    self.add_grad(x, d);
                }
            }
            Op::LogEps { x, eps } => {
                if self.wants(x) {
                    let epss = S::from_f64(eps);
                    let d = self.nodes[x.0]
                        .value
                        .iter()
                        .zip(g)
                        .map(|(&v, &gv)| if v > epss { gv / v } else { S::ZERO })
                        .collect();
                    self.add_grad(x, d);
                }
            }
            Op::CosineRow { a, b, eps } => {
                let av = self.nodes[a.0].value.clone();
                let bv = self.nodes[b.0].value.clone();
                let d_ab = kernels::dot(&av, &bv);
                let na = kernels::dot(&av, &av).sqrt();
                let nb = kernels::dot(&bv, &bv).sqrt();
                let den = na * nb + S::from_f64(eps);
                let den2 = den * den;
                let tiny = S::from_f64(1e-300);
                let gs = g[0];
                if self.wants(a) {
                    let coef = if na > tiny { d_ab * nb / (na * den2) } else { S::ZERO };
                    let d = av.iter().zip(&bv).map(|(&ai, &bi)| gs * (bi / den - coef * ai)).collect();
                    self.add_grad(a, d);
                }
                if self.wants(b) {
                    let coef = if nb > tiny { d_ab * na / (nb * den2) } else { S::ZERO };
                    let d = bv.iter().zip(&av).map(|(&bi, &ai)| gs * (ai / den - coef * bi)).collect();
                    self.add_grad(b, d);
                }
            }
        }
        Ok(())
    }

    /// Adds the gradients of every bound parameter leaf into the store.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore<S>) -> Result<()> {
        for node in &self.nodes {
            if let (Some(id), Some(grad)) = (node.param, node.grad.as_ref()) {
                store.get_mut(id).accumulate_grad(grad)?;
            }
        }
        Ok(())
    }
}
