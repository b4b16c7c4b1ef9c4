//! Tape-style reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is an append-only list of nodes. Every operation pushes one
//! node whose parents already exist, so the node order is a topological
//! order and [`Graph::backward`] is a single reverse sweep.
//!
//! Only the operator set the anomaly model needs is provided. Each forward
//! result is checked for NaN/Inf; a non-finite value is reported as
//! [`Error::NonFinite`] rather than propagated.
//!
//! The graph also tracks how close the current evaluation point is to a
//! non-differentiable point (a relu input at zero, a top-k tie, a zero-norm
//! row, a clamped log). Gradient checks use [`Graph::kink_margin`] to reject
//! probe points where finite differences are meaningless.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// Lower bound applied to `ln` inside the binary cross-entropy.
pub const LOG_FLOOR: f64 = -100.0;

/// Handle to a node in a specific [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    graph: u64,
    idx: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.idx
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv1d {
        input: usize,
        weight: usize,
        bias: usize,
        dilation: usize,
    },
    Matmul(usize, usize),
    Linear {
        x: usize,
        w: usize,
        b: usize,
    },
    Transpose(usize),
    Reshape(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    ConcatCols(Vec<usize>),
    Relu(usize),
    Sigmoid(usize),
    Dropout {
        x: usize,
        mask: Vec<f64>,
    },
    L2NormRows(usize),
    SelectMean {
        x: usize,
        idx: Vec<usize>,
    },
    Sum(usize),
    SqDiffSum(usize),
    Bce {
        p: usize,
        target: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Append-only computation graph.
#[derive(Debug)]
pub struct Graph {
    id: u64,
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    kink_margin: f64,
    sigmoid_grad_fault: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

/// Indices of the `k` largest entries, ordered by value descending with ties
/// resolved toward the lower index. Also returns the gap between the k-th and
/// (k+1)-th largest values (`+inf` when `k == len`).
pub fn topk_indices(values: &[f64], k: usize) -> Result<(Vec<usize>, f64)> {
    if k == 0 || k > values.len() {
        return Err(Error::invalid(
            "topk",
            format!("k = {k} outside 1..={}", values.len()),
        ));
    }
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    let gap = if k < values.len() {
        values[order[k - 1]] - values[order[k]]
    } else {
        f64::INFINITY
    };
    order.truncate(k);
    Ok((order, gap))
}

impl Graph {
    pub fn new() -> Self {
        Self {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            grads: Vec::new(),
            kink_margin: f64::INFINITY,
            sigmoid_grad_fault: false,
        }
    }

    /// Deliberately corrupts the sigmoid backward pass. Exists only so the
    /// gradient checker can be shown to catch a wrong derivative.
    #[doc(hidden)]
    pub fn inject_sigmoid_grad_fault(&mut self) {
        self.sigmoid_grad_fault = true;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Smallest observed distance to a non-differentiable point.
    pub fn kink_margin(&self) -> f64 {
        self.kink_margin
    }

    fn note_kink(&mut self, distance: f64) {
        if distance < self.kink_margin {
            self.kink_margin = distance;
        }
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.graph == self.id && v.idx < self.nodes.len() {
            Ok(v.idx)
        } else {
            Err(Error::ForeignVar)
        }
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op) -> Result<Var> {
        check_finite(op_name, value.data())?;
        let needs_grad = match &op {
            Op::Leaf => value.requires_grad,
            op => parents(op).iter().any(|&p| self.nodes[p].needs_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var {
            graph: self.id,
            idx: self.nodes.len() - 1,
        })
    }

    /// Adds a leaf. It participates in differentiation iff
    /// `tensor.requires_grad` is set.
    pub fn leaf(&mut self, tensor: Tensor) -> Result<Var> {
        self.push("leaf", tensor, Op::Leaf)
    }

    pub fn constant(&mut self, mut tensor: Tensor) -> Result<Var> {
        tensor.requires_grad = false;
        self.push("leaf", tensor, Op::Leaf)
    }

    /// Value of `v`.
    ///
    /// Panics if `v` was produced by a different graph.
    pub fn value(&self, v: Var) -> &Tensor {
        let idx = self.check(v).expect("variable belongs to another graph");
        &self.nodes[idx].value
    }

    /// Gradient of the last backward root with respect to `v`, if `v` is on
    /// a differentiable path.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        if v.graph != self.id {
            return None;
        }
        self.grads.get(v.idx)?.as_deref()
    }

    /// 1-D convolution over the time axis with same-length zero padding.
    ///
    /// `input` is `T x C_in`, `weight` is `C_out x C_in x W` with odd `W`,
    /// `bias` has `C_out` entries; the result is `T x C_out`.
    pub fn conv1d(&mut self, input: Var, weight: Var, bias: Var, dilation: usize) -> Result<Var> {
        const OP: &str = "conv1d";
        let (xi, wi, bi) = (self.check(input)?, self.check(weight)?, self.check(bias)?);
        if dilation == 0 {
            return Err(Error::invalid(OP, "dilation must be positive"));
        }
        let x = &self.nodes[xi].value;
        let w = &self.nodes[wi].value;
        let b = &self.nodes[bi].value;
        let (t_len, c_in) = x.dims2(OP)?;
        let &[c_out, w_cin, width] = w.shape() else {
            return Err(Error::shape(OP, format!("weight must be 3-D, got {:?}", w.shape())));
        };
        if w_cin != c_in {
            return Err(Error::shape(OP, format!("input has {c_in} channels, weight expects {w_cin}")));
        }
        if width % 2 == 0 {
            return Err(Error::invalid(OP, format!("kernel width {width} is even")));
        }
        if b.dims1(OP)? != c_out {
            return Err(Error::shape(OP, format!("bias length {} != {c_out}", b.numel())));
        }

        // Repack to [tap][c_in][c_out] so the innermost loop is contiguous.
        let wd = w.data();
        let mut packed = vec![0.0; width * c_in * c_out];
        for o in 0..c_out {
            for c in 0..c_in {
                for k in 0..width {
                    packed[(k * c_in + c) * c_out + o] = wd[(o * c_in + c) * width + k];
                }
            }
        }
        let half = (width - 1) / 2;
        let xd = x.data();
        let mut out = Vec::with_capacity(t_len * c_out);
        for t in 0..t_len {
            out.extend_from_slice(b.data());
            let acc = &mut out[t * c_out..];
            for k in 0..width {
                let Some(src) = tap_source(t, k, half, dilation, t_len) else {
                    continue;
                };
                for c in 0..c_in {
                    let xv = xd[src * c_in + c];
                    let wrow = &packed[(k * c_in + c) * c_out..][..c_out];
                    for (a, &wv) in acc.iter_mut().zip(wrow) {
                        *a += xv * wv;
                    }
                }
            }
        }
        let value = Tensor::new(vec![t_len, c_out], out)?;
        self.push(
            OP,
            value,
            Op::Conv1d {
                input: xi,
                weight: wi,
                bias: bi,
                dilation,
            },
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        const OP: &str = "matmul";
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        let (m, k) = self.nodes[ai].value.dims2(OP)?;
        let (k2, n) = self.nodes[bi].value.dims2(OP)?;
        if k != k2 {
            return Err(Error::shape(OP, format!("{m}x{k} times {k2}x{n}")));
        }
        let out = matmul_raw(self.nodes[ai].value.data(), self.nodes[bi].value.data(), m, k, n);
        self.push(OP, Tensor::new(vec![m, n], out)?, Op::Matmul(ai, bi))
    }

    /// `x · w + b` with `x: T x D`, `w: D x H`, `b: H`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        const OP: &str = "linear";
        let (xi, wi, bi) = (self.check(x)?, self.check(w)?, self.check(b)?);
        let (m, k) = self.nodes[xi].value.dims2(OP)?;
        let (k2, n) = self.nodes[wi].value.dims2(OP)?;
        if k != k2 {
            return Err(Error::shape(OP, format!("{m}x{k} times {k2}x{n}")));
        }
        if self.nodes[bi].value.dims1(OP)? != n {
            return Err(Error::shape(OP, format!("bias length {} != {n}", self.nodes[bi].value.numel())));
        }
        let mut out = matmul_raw(self.nodes[xi].value.data(), self.nodes[wi].value.data(), m, k, n);
        let bias = self.nodes[bi].value.data();
        for row in out.chunks_exact_mut(n) {
            for (o, &bv) in row.iter_mut().zip(bias) {
                *o += bv;
            }
        }
        self.push(OP, Tensor::new(vec![m, n], out)?, Op::Linear { x: xi, w: wi, b: bi })
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        const OP: &str = "transpose";
        let ai = self.check(a)?;
        let (r, c) = self.nodes[ai].value.dims2(OP)?;
        let src = self.nodes[ai].value.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        self.push(OP, Tensor::new(vec![c, r], out)?, Op::Transpose(ai))
    }

    /// Same data under a new shape with an equal element count.
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let ai = self.check(a)?;
        let value = Tensor::new(shape.to_vec(), self.nodes[ai].value.data().to_vec())?;
        self.push("reshape", value, Op::Reshape(ai))
    }

    fn same_shape(&self, op: &'static str, ai: usize, bi: usize) -> Result<()> {
        let (sa, sb) = (self.nodes[ai].value.shape(), self.nodes[bi].value.shape());
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn zip_with(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<(usize, usize, Tensor)> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        self.same_shape(op, ai, bi)?;
        let (av, bv) = (&self.nodes[ai].value, &self.nodes[bi].value);
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok((ai, bi, Tensor::new(av.shape().to_vec(), data)?))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi, value) = self.zip_with("add", a, b, |x, y| x + y)?;
        self.push("add", value, Op::Add(ai, bi))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi, value) = self.zip_with("sub", a, b, |x, y| x - y)?;
        self.push("sub", value, Op::Sub(ai, bi))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi, value) = self.zip_with("mul", a, b, |x, y| x * y)?;
        self.push("mul", value, Op::Mul(ai, bi))
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64) -> Result<(usize, Tensor)> {
        let ai = self.check(a)?;
        let av = &self.nodes[ai].value;
        let data = av.data().iter().map(|&x| f(x)).collect();
        Ok((ai, Tensor::new(av.shape().to_vec(), data)?))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let (ai, value) = self.map(a, |x| x * factor)?;
        self.push("scale", value, Op::Scale(ai, factor))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let (ai, value) = self.map(a, |x| x + c)?;
        self.push("add_scalar", value, Op::AddScalar(ai))
    }

    /// Concatenates matrices with equal row counts along the column axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        const OP: &str = "concat";
        if parts.is_empty() {
            return Err(Error::invalid(OP, "nothing to concatenate"));
        }
        let idx = parts.iter().map(|&v| self.check(v)).collect::<Result<Vec<_>>>()?;
        let dims = idx
            .iter()
            .map(|&i| self.nodes[i].value.dims2(OP))
            .collect::<Result<Vec<_>>>()?;
        let rows = dims[0].0;
        if dims.iter().any(|&(r, _)| r != rows) {
            return Err(Error::shape(OP, format!("row counts differ: {dims:?}")));
        }
        let cols: usize = dims.iter().map(|&(_, c)| c).sum();
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &i in &idx {
                out.extend_from_slice(self.nodes[i].value.row(r));
            }
        }
        self.push(OP, Tensor::new(vec![rows, cols], out)?, Op::ConcatCols(idx))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let (ai, value) = self.map(a, |x| x.max(0.0))?;
        if self.nodes[ai].needs_grad {
            let nearest = self.nodes[ai].value.data().iter().fold(f64::INFINITY, |m, x| m.min(x.abs()));
            self.note_kink(nearest);
        }
        self.push("relu", value, Op::Relu(ai))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let (ai, value) = self.map(a, sigmoid)?;
        self.push("sigmoid", value, Op::Sigmoid(ai))
    }

    /// Inverted dropout. Identity (no node) when not training or when
    /// `rate == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, training: bool, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::invalid("dropout", format!("rate {rate} outside [0, 1)")));
        }
        let xi = self.check(x)?;
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let keep_scale = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..self.nodes[xi].value.numel())
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep_scale })
            .collect();
        let xv = &self.nodes[xi].value;
        let data = xv.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        self.push("dropout", value, Op::Dropout { x: xi, mask })
    }

    /// Euclidean norm of every row of a matrix.
    pub fn l2_norm_rows(&mut self, a: Var) -> Result<Var> {
        const OP: &str = "l2_norm_rows";
        let ai = self.check(a)?;
        self.nodes[ai].value.dims2(OP)?;
        let norms: Vec<f64> = self.nodes[ai]
            .value
            .rows()
            .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        if self.nodes[ai].needs_grad {
            let smallest = norms.iter().fold(f64::INFINITY, |m, &n| m.min(n));
            self.note_kink(smallest);
        }
        self.push(OP, Tensor::vector(norms), Op::L2NormRows(ai))
    }

    /// Top-k selection on a vector, recording the tie margin.
    pub fn select_topk(&mut self, v: Var, k: usize) -> Result<Vec<usize>> {
        let vi = self.check(v)?;
        self.nodes[vi].value.dims1("topk")?;
        let (idx, gap) = topk_indices(self.nodes[vi].value.data(), k)?;
        self.note_kink(gap);
        Ok(idx)
    }

    /// Mean of the `k` largest entries of a vector.
    pub fn topk_mean(&mut self, v: Var, k: usize) -> Result<Var> {
        let idx = self.select_topk(v, k)?;
        self.select_mean(v, &idx)
    }

    /// Mean of the entries at `idx`. The index set is treated as constant.
    pub fn select_mean(&mut self, v: Var, idx: &[usize]) -> Result<Var> {
        const OP: &str = "select_mean";
        let vi = self.check(v)?;
        let n = self.nodes[vi].value.dims1(OP)?;
        if idx.is_empty() || idx.iter().any(|&i| i >= n) {
            return Err(Error::invalid(OP, format!("indices {idx:?} invalid for length {n}")));
        }
        let data = self.nodes[vi].value.data();
        let mean = idx.iter().map(|&i| data[i]).sum::<f64>() / idx.len() as f64;
        self.push(
            OP,
            Tensor::scalar(mean),
            Op::SelectMean {
                x: vi,
                idx: idx.to_vec(),
            },
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ai = self.check(a)?;
        let total = self.nodes[ai].value.data().iter().sum();
        self.push("sum", Tensor::scalar(total), Op::Sum(ai))
    }

    /// `Σ_i (v_i − v_{i+1})²` over a vector of length ≥ 2.
    pub fn sq_diff_sum(&mut self, a: Var) -> Result<Var> {
        const OP: &str = "sq_diff_sum";
        let ai = self.check(a)?;
        let n = self.nodes[ai].value.dims1(OP)?;
        if n < 2 {
            return Err(Error::invalid(OP, "needs at least two entries"));
        }
        let total = self.nodes[ai]
            .value
            .data()
            .windows(2)
            .map(|w| (w[0] - w[1]).powi(2))
            .sum();
        self.push(OP, Tensor::scalar(total), Op::SqDiffSum(ai))
    }

    /// Binary cross-entropy of a scalar probability against `target`, with
    /// each logarithm floored at [`LOG_FLOOR`].
    pub fn bce(&mut self, p: Var, target: f64) -> Result<Var> {
        const OP: &str = "bce";
        let pi = self.check(p)?;
        if !self.nodes[pi].value.is_scalar() {
            return Err(Error::shape(OP, format!("expected scalar, got {:?}", self.nodes[pi].value.shape())));
        }
        if !(0.0..=1.0).contains(&target) {
            return Err(Error::invalid(OP, format!("target {target} outside [0, 1]")));
        }
        let pv = self.nodes[pi].value.item();
        if !(0.0..=1.0).contains(&pv) {
            return Err(Error::invalid(OP, format!("probability {pv} outside [0, 1]")));
        }
        let (lp, lq) = (floored_ln(pv), floored_ln(1.0 - pv));
        let loss = -(target * lp + (1.0 - target) * lq);
        if self.nodes[pi].needs_grad {
            let lp_gap = (pv.ln() - LOG_FLOOR).abs();
            let lq_gap = ((1.0 - pv).ln() - LOG_FLOOR).abs();
            self.note_kink(lp_gap.min(lq_gap));
        }
        self.push(OP, Tensor::scalar(loss), Op::Bce { p: pi, target })
    }

    /// Populates gradients of `root` with respect to every node on a
    /// differentiable path. Previous gradients are discarded first.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let ri = self.check(root)?;
        let root_value = &self.nodes[ri].value;
        if !root_value.is_scalar() {
            return Err(Error::RootNotScalar(root_value.shape().to_vec()));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[ri].needs_grad {
            return Ok(());
        }
        self.grads[ri] = Some(vec![1.0]);
        for i in (0..=ri).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, target: usize, contribution: impl FnOnce(&mut [f64])) {
        if !self.nodes[target].needs_grad {
            return;
        }
        let n = self.nodes[target].value.numel();
        let slot = self.grads[target].get_or_insert_with(|| vec![0.0; n]);
        contribution(slot);
    }

    fn propagate(&mut self, i: usize, g: &[f64]) {
        // Temporarily move the op out so parents can be borrowed mutably.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            &Op::Conv1d {
                input,
                weight,
                bias,
                dilation,
            } => self.conv1d_backward(i, g, input, weight, bias, dilation),
            &Op::Matmul(a, b) => self.matmul_backward(g, a, b),
            &Op::Linear { x, w, b } => {
                self.matmul_backward(g, x, w);
                let n = self.nodes[b].value.numel();
                self.accumulate(b, |gb| {
                    for row in g.chunks_exact(n) {
                        for (acc, &v) in gb.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                });
            }
            &Op::Transpose(a) => {
                let (r, c) = (self.nodes[a].value.shape()[0], self.nodes[a].value.shape()[1]);
                self.accumulate(a, |ga| {
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            &Op::Add(a, b) => {
                self.accumulate(a, |ga| axpy(ga, 1.0, g));
                self.accumulate(b, |gb| axpy(gb, 1.0, g));
            }
            &Op::Sub(a, b) => {
                self.accumulate(a, |ga| axpy(ga, 1.0, g));
                self.accumulate(b, |gb| axpy(gb, -1.0, g));
            }
            &Op::Mul(a, b) => {
                let bv = self.nodes[b].value.data().to_vec();
                let av = self.nodes[a].value.data().to_vec();
                self.accumulate(a, |ga| {
                    for ((acc, &gv), &y) in ga.iter_mut().zip(g).zip(&bv) {
                        *acc += gv * y;
                    }
                });
                self.accumulate(b, |gb| {
                    for ((acc, &gv), &x) in gb.iter_mut().zip(g).zip(&av) {
                        *acc += gv * x;
                    }
                });
            }
            &Op::Scale(a, factor) => self.accumulate(a, |ga| axpy(ga, factor, g)),
            &Op::AddScalar(a) | &Op::Reshape(a) => self.accumulate(a, |ga| axpy(ga, 1.0, g)),
            Op::ConcatCols(parts) => {
                let rows = self.nodes[i].value.shape()[0];
                let total = self.nodes[i].value.shape()[1];
                let mut offset = 0;
                for &p in parts {
                    let c = self.nodes[p].value.shape()[1];
                    self.accumulate(p, |gp| {
                        for r in 0..rows {
                            axpy(&mut gp[r * c..(r + 1) * c], 1.0, &g[r * total + offset..][..c]);
                        }
                    });
                    offset += c;
                }
            }
            &Op::Relu(a) => {
                let av = self.nodes[a].value.data().to_vec();
                self.accumulate(a, |ga| {
                    for ((acc, &gv), &x) in ga.iter_mut().zip(g).zip(&av) {
                        if x > 0.0 {
                            *acc += gv;
                        }
                    }
                });
            }
            &Op::Sigmoid(a) => {
                let out = self.nodes[i].value.data().to_vec();
                let fault = if self.sigmoid_grad_fault { 1.01 } else { 1.0 };
                self.accumulate(a, |ga| {
                    for ((acc, &gv), &s) in ga.iter_mut().zip(g).zip(&out) {
                        *acc += gv * s * (1.0 - s) * fault;
                    }
                });
            }
            Op::Dropout { x, mask } => {
                self.accumulate(*x, |gx| {
                    for ((acc, &gv), &m) in gx.iter_mut().zip(g).zip(mask) {
                        *acc += gv * m;
                    }
                });
            }
            &Op::L2NormRows(a) => {
                let norms = self.nodes[i].value.data().to_vec();
                let x = self.nodes[a].value.data().to_vec();
                let cols = self.nodes[a].value.shape()[1];
                self.accumulate(a, |ga| {
                    for (t, (&n, &gv)) in norms.iter().zip(g).enumerate() {
                        if n == 0.0 {
                            continue;
                        }
                        let scale = gv / n;
                        axpy(&mut ga[t * cols..(t + 1) * cols], scale, &x[t * cols..(t + 1) * cols]);
                    }
                });
            }
            Op::SelectMean { x, idx } => {
                let share = g[0] / idx.len() as f64;
                self.accumulate(*x, |gx| {
                    for &j in idx {
                        gx[j] += share;
                    }
                });
            }
            &Op::Sum(a) => self.accumulate(a, |ga| ga.iter_mut().for_each(|v| *v += g[0])),
            &Op::SqDiffSum(a) => {
                let v = self.nodes[a].value.data().to_vec();
                self.accumulate(a, |ga| {
                    for j in 0..v.len() - 1 {
                        let d = 2.0 * (v[j] - v[j + 1]) * g[0];
                        ga[j] += d;
                        ga[j + 1] -= d;
                    }
                });
            }
            &Op::Bce { p, target } => {
                let pv = self.nodes[p].value.item();
                let mut d = 0.0;
                if pv.ln() > LOG_FLOOR {
                    d -= target / pv;
                }
                if (1.0 - pv).ln() > LOG_FLOOR {
                    d += (1.0 - target) / (1.0 - pv);
                }
                self.accumulate(p, |gp| gp[0] += d * g[0]);
            }
        }
        self.nodes[i].op = op;
    }

    fn matmul_backward(&mut self, g: &[f64], a: usize, b: usize) {
        let (m, k) = (self.nodes[a].value.shape()[0], self.nodes[a].value.shape()[1]);
        let n = self.nodes[b].value.shape()[1];
        if self.nodes[a].needs_grad {
            let bv = self.nodes[b].value.data().to_vec();
            self.accumulate(a, |ga| {
                // dA = dC · Bᵀ
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    for kk in 0..k {
                        let brow = &bv[kk * n..(kk + 1) * n];
                        ga[i * k + kk] += dot(grow, brow);
                    }
                }
            });
        }
        if self.nodes[b].needs_grad {
            let av = self.nodes[a].value.data().to_vec();
            self.accumulate(b, |gb| {
                // dB = Aᵀ · dC
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    for kk in 0..k {
                        axpy(&mut gb[kk * n..(kk + 1) * n], av[i * k + kk], grow);
                    }
                }
            });
        }
    }

    fn conv1d_backward(&mut self, out_idx: usize, g: &[f64], input: usize, weight: usize, bias: usize, dilation: usize) {
        let (t_len, c_out) = (self.nodes[out_idx].value.shape()[0], self.nodes[out_idx].value.shape()[1]);
        let c_in = self.nodes[input].value.shape()[1];
        let width = self.nodes[weight].value.shape()[2];
        let half = (width - 1) / 2;

        self.accumulate(bias, |gb| {
            for row in g.chunks_exact(c_out) {
                axpy(gb, 1.0, row);
            }
        });

        if self.nodes[input].needs_grad {
            let wd = self.nodes[weight].value.data().to_vec();
            self.accumulate(input, |gx| {
                for t in 0..t_len {
                    let grow = &g[t * c_out..(t + 1) * c_out];
                    for k in 0..width {
                        let Some(src) = tap_source(t, k, half, dilation, t_len) else {
                            continue;
                        };
                        for o in 0..c_out {
                            let go = grow[o];
                            if go == 0.0 {
                                continue;
                            }
                            for c in 0..c_in {
                                gx[src * c_in + c] += go * wd[(o * c_in + c) * width + k];
                            }
                        }
                    }
                }
            });
        }

        if self.nodes[weight].needs_grad {
            let xd = self.nodes[input].value.data().to_vec();
            self.accumulate(weight, |gw| {
                for t in 0..t_len {
                    let grow = &g[t * c_out..(t + 1) * c_out];
                    for k in 0..width {
                        let Some(src) = tap_source(t, k, half, dilation, t_len) else {
                            continue;
                        };
                        let xrow = &xd[src * c_in..(src + 1) * c_in];
                        for o in 0..c_out {
                            let go = grow[o];
                            for c in 0..c_in {
                                gw[(o * c_in + c) * width + k] += go * xrow[c];
                            }
                        }
                    }
                }
            });
        }
    }
}

fn parents(op: &Op) -> Vec<usize> {
    match op {
        Op::Leaf => vec![],
        &Op::Conv1d {
            input, weight, bias, ..
        } => vec![input, weight, bias],
        &Op::Matmul(a, b) | &Op::Add(a, b) | &Op::Sub(a, b) | &Op::Mul(a, b) => vec![a, b],
        &Op::Linear { x, w, b } => vec![x, w, b],
        &Op::Transpose(a)
        | &Op::Scale(a, _)
        | &Op::AddScalar(a)
        | &Op::Reshape(a)
        | &Op::Relu(a)
        | &Op::Sigmoid(a)
        | &Op::L2NormRows(a)
        | &Op::Sum(a)
        | &Op::SqDiffSum(a) => vec![a],
        Op::ConcatCols(parts) => parts.clone(),
        Op::Dropout { x, .. } | Op::SelectMean { x, .. } => vec![*x],
        &Op::Bce { p, .. } => vec![p],
    }
}

/// Source row for kernel tap `k` at output row `t`, or `None` in the padding.
fn tap_source(t: usize, k: usize, half: usize, dilation: usize, len: usize) -> Option<usize> {
    let src = t as isize + (k as isize - half as isize) * dilation as isize;
    (0..len as isize).contains(&src).then_some(src as usize)
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for kk in 0..k {
            let av = a[i * k + kk];
            if av == 0.0 {
                continue;
            }
            axpy(orow, av, &b[kk * n..(kk + 1) * n]);
        }
    }
    out
}

#[inline]
fn axpy(y: &mut [f64], alpha: f64, x: &[f64]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn floored_ln(x: f64) -> f64 {
    x.ln().max(LOG_FLOOR)
}

/// Logistic function evaluated without overflow for large `|x|`.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn mat(rows: &[&[f64]]) -> Tensor {
        Tensor::matrix(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    fn conv(g: &mut Graph, x: Tensor, w: Tensor, b: Tensor, d: usize) -> Result<Tensor> {
        let (x, w, b) = (g.constant(x)?, g.constant(w)?, g.constant(b)?);
        let y = g.conv1d(x, w, b, d)?;
        Ok(g.value(y).clone())
    }

    #[test]
    fn conv1d_identity_kernel() {
        let mut g = Graph::new();
        let out = conv(
            &mut g,
            mat(&[&[1.0], &[2.0], &[3.0]]),
            Tensor::new(vec![1, 1, 1], vec![1.0]).unwrap(),
            Tensor::vector(vec![0.0]),
            1,
        )
        .unwrap();
        assert_eq!(out.data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn conv1d_box_kernel_zero_padded() {
        let mut g = Graph::new();
        let out = conv(
            &mut g,
            mat(&[&[1.0], &[2.0], &[3.0]]),
            Tensor::new(vec![1, 1, 3], vec![1.0, 1.0, 1.0]).unwrap(),
            Tensor::vector(vec![0.0]),
            1,
        )
        .unwrap();
        assert_eq!(out.data(), &[3.0, 6.0, 5.0]);
    }

    #[test]
    fn conv1d_zero_kernel_gives_bias() {
        let mut g = Graph::new();
        let out = conv(
            &mut g,
            mat(&[&[1.5, -2.0], &[0.3, 9.0], &[4.0, 4.0], &[-1.0, 0.0]]),
            Tensor::zeros(&[1, 2, 3]),
            Tensor::vector(vec![0.25]),
            2,
        )
        .unwrap();
        assert!(out.data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn conv1d_rejects_bad_arguments() {
        let mut g = Graph::new();
        let x = mat(&[&[1.0], &[2.0]]);
        let even = conv(&mut g, x.clone(), Tensor::zeros(&[1, 1, 2]), Tensor::vector(vec![0.0]), 1);
        assert!(matches!(even, Err(Error::InvalidArgument { .. })));
        let dil = conv(&mut g, x.clone(), Tensor::zeros(&[1, 1, 3]), Tensor::vector(vec![0.0]), 0);
        assert!(matches!(dil, Err(Error::InvalidArgument { .. })));
        let chans = conv(&mut g, x, Tensor::zeros(&[1, 2, 3]), Tensor::vector(vec![0.0]), 1);
        assert!(matches!(chans, Err(Error::Shape { .. })));
    }

    #[test]
    fn dilated_conv_matches_subsampled_undilated() {
        // With dilation 2, even output rows only see even input rows.
        let x: Vec<Vec<f64>> = (0..6).map(|t| vec![t as f64 + 1.0, (t * t) as f64 * 0.5]).collect();
        let w = Tensor::new(vec![1, 2, 3], vec![0.5, -1.0, 2.0, 1.0, 0.25, -0.5]).unwrap();
        let b = Tensor::vector(vec![0.1]);
        let mut g = Graph::new();
        let dilated = conv(&mut g, Tensor::matrix(&x).unwrap(), w.clone(), b.clone(), 2).unwrap();
        for parity in 0..2 {
            let sub: Vec<Vec<f64>> = x.iter().skip(parity).step_by(2).cloned().collect();
            let plain = conv(&mut g, Tensor::matrix(&sub).unwrap(), w.clone(), b.clone(), 1).unwrap();
            for (j, t) in (parity..6).step_by(2).enumerate() {
                assert_eq!(dilated.data()[t], plain.data()[j]);
            }
        }
    }

    #[test]
    fn matmul_values() {
        let mut g = Graph::new();
        let a = g.constant(mat(&[&[1.0, 2.0], &[3.0, 4.0]])).unwrap();
        let b = g.constant(mat(&[&[5.0], &[6.0]])).unwrap();
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[17.0, 39.0]);

        let eye = g.constant(mat(&[&[1.0, 0.0], &[0.0, 1.0]])).unwrap();
        let m = g.constant(mat(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]])).unwrap();
        let p = g.matmul(eye, m).unwrap();
        assert_eq!(g.value(p).data(), g.value(m).data());

        let z = g.constant(Tensor::zeros(&[2, 2])).unwrap();
        let zp = g.matmul(z, m).unwrap();
        assert!(g.value(zp).data().iter().all(|&v| v == 0.0));

        assert!(g.matmul(b, b).is_err());
    }

    #[test]
    fn relu_and_sigmoid_values() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![-3.0, 0.0, 3.0])).unwrap();
        let r = g.relu(x).unwrap();
        assert_eq!(g.value(r).data(), &[0.0, 0.0, 3.0]);
        let s = g.sigmoid(x).unwrap();
        assert_eq!(g.value(s).data()[1], 0.5);
        for v in [-40.0, -3.7, -0.2, 0.9, 12.0, 800.0] {
            assert!((sigmoid(v) + sigmoid(-v) - 1.0).abs() < 1e-15);
        }
        assert!(sigmoid(-800.0).is_finite());
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![0.0, 1.0]).with_grad()).unwrap();
        let r = g.relu(x).unwrap();
        let s = g.sum(r).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.0, 1.0]);
    }

    #[test]
    fn dropout_contract() {
        let x = Tensor::vector((0..200).map(|i| i as f64 * 0.1 + 1.0).collect());
        let mut g = Graph::new();
        let xv = g.constant(x.clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert_eq!(g.dropout(xv, 0.7, false, &mut rng).unwrap(), xv);
        assert_eq!(g.dropout(xv, 0.0, true, &mut rng).unwrap(), xv);
        assert!(g.dropout(xv, 1.0, true, &mut rng).is_err());
        assert!(g.dropout(xv, -0.1, true, &mut rng).is_err());

        let run = |seed| {
            let mut g = Graph::new();
            let xv = g.constant(x.clone()).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let y = g.dropout(xv, 0.7, true, &mut rng).unwrap();
            g.value(y).data().to_vec()
        };
        let a = run(11);
        assert_eq!(a, run(11));
        for (out, inp) in a.iter().zip(x.data()) {
            assert!(*out == 0.0 || (out - inp / 0.3).abs() < 1e-12);
        }
        let kept = a.iter().filter(|&&v| v != 0.0).count();
        assert!((30..=90).contains(&kept), "kept {kept} of 200");
    }

    #[test]
    fn l2_norm_rows_values_and_zero_row_grad() {
        let mut g = Graph::new();
        let x = g
            .leaf(mat(&[&[3.0, 4.0, 0.0, 0.0], &[0.0, 0.0, 0.0, 0.0], &[1.0, 1.0, 1.0, 1.0]]).with_grad())
            .unwrap();
        let n = g.l2_norm_rows(x).unwrap();
        assert_eq!(g.value(n).data(), &[5.0, 0.0, 2.0]);
        let s = g.sum(n).unwrap();
        g.backward(s).unwrap();
        let grad = g.grad(x).unwrap();
        assert_eq!(&grad[4..8], &[0.0; 4]);
        assert!((grad[0] - 0.6).abs() < 1e-15 && (grad[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn topk_mean_values_and_ties() {
        let mut g = Graph::new();
        let v = g.leaf(Tensor::vector(vec![5.0, 1.0, 3.0, 9.0]).with_grad()).unwrap();
        let m = g.topk_mean(v, 2).unwrap();
        assert_eq!(g.value(m).item(), 7.0);
        let all = g.topk_mean(v, 4).unwrap();
        assert_eq!(g.value(all).item(), 4.5);
        assert!(g.topk_mean(v, 0).is_err());
        assert!(g.topk_mean(v, 5).is_err());

        let mut g = Graph::new();
        let v = g.leaf(Tensor::vector(vec![2.0, 2.0, 2.0]).with_grad()).unwrap();
        let m = g.topk_mean(v, 2).unwrap();
        assert_eq!(g.value(m).item(), 2.0);
        g.backward(m).unwrap();
        assert_eq!(g.grad(v).unwrap(), &[0.5, 0.5, 0.0]);
    }

    #[test]
    fn backward_simple_roots() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![2, 3], vec![0.5; 6]).unwrap().with_grad()).unwrap();
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0; 6]);

        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(3.0).with_grad()).unwrap();
        let y = g.mul(x, x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[6.0]);
        // Second call must not accumulate on top of the first.
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn backward_errors() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1.0, 2.0]).with_grad()).unwrap();
        assert!(matches!(g.backward(x), Err(Error::RootNotScalar(_))));
        let mut other = Graph::new();
        let y = other.leaf(Tensor::scalar(1.0)).unwrap();
        assert!(matches!(g.backward(y), Err(Error::ForeignVar)));
    }

    #[test]
    fn overflow_is_an_error() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![1e300, 1e300])).unwrap();
        assert!(matches!(g.mul(x, x), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn bce_values_and_floor() {
        let mut g = Graph::new();
        let p = g.constant(Tensor::scalar(0.5)).unwrap();
        let l = g.bce(p, 0.0).unwrap();
        assert!((g.value(l).item() - std::f64::consts::LN_2).abs() < 1e-15);
        let one = g.constant(Tensor::scalar(1.0)).unwrap();
        let l = g.bce(one, 0.0).unwrap();
        assert_eq!(g.value(l).item(), 100.0);
    }

    #[test]
    fn parents_precede_children() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::vector(vec![1.0, 2.0]).with_grad()).unwrap();
        let b = g.scale(a, 2.0).unwrap();
        let c = g.add(a, b).unwrap();
        let d = g.sum(c).unwrap();
        for (i, node) in g.nodes.iter().enumerate() {
            assert!(parents(&node.op).iter().all(|&p| p < i));
        }
        assert!(d.index() > c.index());
    }
}
