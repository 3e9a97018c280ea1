//! Reverse-mode differentiation over a linear tape of matrix primitives.
//!
//! Nodes are appended in evaluation order, so the tape is always a valid
//! topological order and the backward sweep is a single reverse scan.

use std::rc::Rc;

use super::tensor::{gemm, log_softmax_into, sigmoid, softmax_into, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Minimum(Var, Var),
    Scale(Var, f64),
    Offset(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Square(Var),
    Clamp(Var, f64, f64),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize, usize),
    VStack(Vec<Var>),
    GatherRows(Var, Rc<[usize]>),
    Reshape(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    PickCols(Var, Rc<[usize]>),
    Attention {
        query: Var,
        keys: Var,
        groups: Rc<[Vec<usize>]>,
        scale: f64,
        weights: Rc<[Vec<f64>]>,
    },
    Sum(Var),
    Mean(Var),
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every node recorded before it.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
    visited: Vec<usize>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Gradient for `var`; exact zeros when the loss does not depend on it.
    pub fn wrt(&self, var: Var) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[var.0]))
    }

    /// Node indices in the order the backward sweep processed them.
    pub fn visit_order(&self) -> &[usize] {
        &self.visited
    }
}

fn check_same(ctx: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.rows() != b.rows() || a.cols() != b.cols() {
        return Err(Error::dim(
            ctx,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    /// Records an input or parameter. Every leaf receives a gradient.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, op: Op) -> Result<Var> {
        let value = eval(&op, &|v: Var| &self.nodes[v.0].value)?;
        Ok(self.push(value, op))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::MatMul(a, b))
    }

    /// Adds a bias vector to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        self.record(Op::AddRow(x, bias))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Mul(a, b))
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Minimum(a, b))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        self.record(Op::Scale(x, factor)).expect("unary op")
    }

    pub fn offset(&mut self, x: Var, shift: f64) -> Var {
        self.record(Op::Offset(x, shift)).expect("unary op")
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.record(Op::Tanh(x)).expect("unary op")
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.record(Op::Sigmoid(x)).expect("unary op")
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.record(Op::Exp(x)).expect("unary op")
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.record(Op::Square(x)).expect("unary op")
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.record(Op::Clamp(x, lo, hi)).expect("unary op")
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        self.record(Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        self.record(Op::SliceCols(x, start, end))
    }

    pub fn vstack(&mut self, parts: &[Var]) -> Result<Var> {
        self.record(Op::VStack(parts.to_vec()))
    }

    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        self.record(Op::GatherRows(x, rows.into()))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape.to_vec())?;
        Ok(self.push(value, Op::Reshape(x)))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        self.record(Op::SoftmaxRows(x))
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Result<Var> {
        self.record(Op::LogSoftmaxRows(x))
    }

    /// `out[r] = x[r, cols[r]]`, shaped `[rows, 1]`.
    pub fn pick_cols(&mut self, x: Var, cols: &[usize]) -> Result<Var> {
        self.record(Op::PickCols(x, cols.into()))
    }

    /// Scaled dot-product attention pooling.
    ///
    /// For query row `q` with key rows `groups[q]`, the output row is
    /// `sum_j softmax_j(scale * <query_q, key_j>) * key_j`. An empty group
    /// pools to the zero vector. Returns the pooled rows and the attention
    /// weights of each group.
    pub fn attention(
        &mut self,
        query: Var,
        keys: Var,
        groups: Vec<Vec<usize>>,
        scale: f64,
    ) -> Result<(Var, Rc<[Vec<f64>]>)> {
        let weights = attention_weights(self.value(query), self.value(keys), &groups, scale)?;
        let op = Op::Attention {
            query,
            keys,
            groups: groups.into(),
            scale,
            weights: weights.into(),
        };
        let var = self.record(op)?;
        let Op::Attention { weights, .. } = &self.nodes[var.0].op else {
            unreachable!()
        };
        Ok((var, weights.clone()))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        self.record(Op::Sum(x)).expect("reduction")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        if self.value(x).is_empty() {
            return Err(Error::arg("mean of an empty tensor"));
        }
        self.record(Op::Mean(x))
    }

    /// Mean negative log-likelihood of `labels` under row-wise softmax of `logits`.
    pub fn cross_entropy_logits(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let logp = self.log_softmax_rows(logits)?;
        let picked = self.pick_cols(logp, labels)?;
        let m = self.mean(picked)?;
        Ok(self.scale(m, -1.0))
    }

    /// Recomputes every node from the recorded leaves.
    pub fn replay(&self) -> Result<Vec<Tensor>> {
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = match node.op {
                Op::Leaf => node.value.clone(),
                Op::Reshape(x) => values[x.0].clone().reshaped(node.value.shape().to_vec())?,
                ref op => eval(op, &|v: Var| &values[v.0])?,
            };
            values.push(v);
        }
        Ok(values)
    }

    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::arg(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::filled(self.value(loss).shape(), 1.0));
        let mut visited = Vec::new();
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            visited.push(i);
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            visited,
        })
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        let mut acc = |v: Var, t: Tensor| match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&t),
            slot @ None => *slot = Some(t),
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                let mut da = vec![0.0; m * k];
                gemm(g.data(), m, n, false, bv.data(), k, n, true, &mut da, false);
                let mut db = vec![0.0; k * n];
                gemm(av.data(), m, k, true, g.data(), m, n, false, &mut db, false);
                acc(*a, Tensor::new(av.shape().to_vec(), da).expect("shape"));
                acc(*b, Tensor::new(bv.shape().to_vec(), db).expect("shape"));
            }
            Op::AddRow(x, b) => {
                let cols = g.cols();
                let mut db = vec![0.0; cols];
                for r in 0..g.rows() {
                    for (d, v) in db.iter_mut().zip(g.row(r)) {
                        *d += v;
                    }
                }
                acc(*x, g.clone());
                acc(*b, Tensor::new(val(*b).shape().to_vec(), db).expect("shape"));
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                acc(*a, g.zip_map(val(*b), |g, y| g * y));
                acc(*b, g.zip_map(val(*a), |g, x| g * x));
            }
            Op::Minimum(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let mut ga = g.clone();
                let mut gb = g.clone();
                for ((x, y), (da, db)) in av
                    .data()
                    .iter()
                    .zip(bv.data())
                    .zip(ga.data_mut().iter_mut().zip(gb.data_mut()))
                {
                    if x <= y {
                        *db = 0.0;
                    } else {
                        *da = 0.0;
                    }
                }
                acc(*a, ga);
                acc(*b, gb);
            }
            Op::Scale(x, s) => acc(*x, g.map(|v| v * s)),
            Op::Offset(x, _) => acc(*x, g.clone()),
            Op::Tanh(x) => acc(*x, g.zip_map(&node.value, |g, y| g * (1.0 - y * y))),
            Op::Sigmoid(x) => acc(*x, g.zip_map(&node.value, |g, y| g * y * (1.0 - y))),
            Op::Exp(x) => acc(*x, g.zip_map(&node.value, |g, y| g * y)),
            Op::Square(x) => acc(*x, g.zip_map(val(*x), |g, x| 2.0 * g * x)),
            Op::Clamp(x, lo, hi) => acc(
                *x,
                g.zip_map(val(*x), |g, x| if x >= *lo && x <= *hi { g } else { 0.0 }),
            ),
            Op::ConcatCols(parts) => {
                let rows = g.rows();
                let mut offset = 0;
                for p in parts {
                    let pv = val(*p);
                    let pc = pv.cols();
                    let mut d = Vec::with_capacity(rows * pc);
                    for r in 0..rows {
                        d.extend_from_slice(&g.row(r)[offset..offset + pc]);
                    }
                    offset += pc;
                    acc(*p, Tensor::new(pv.shape().to_vec(), d).expect("shape"));
                }
            }
            Op::SliceCols(x, start, end) => {
                let xv = val(*x);
                let cols = xv.cols();
                let mut d = vec![0.0; xv.len()];
                for r in 0..xv.rows() {
                    d[r * cols + start..r * cols + end].copy_from_slice(g.row(r));
                }
                acc(*x, Tensor::new(xv.shape().to_vec(), d).expect("shape"));
            }
            Op::VStack(parts) => {
                let cols = g.cols();
                let mut offset = 0;
                for p in parts {
                    let pv = val(*p);
                    let n = pv.rows() * cols;
                    let d = g.data()[offset..offset + n].to_vec();
                    offset += n;
                    acc(*p, Tensor::new(pv.shape().to_vec(), d).expect("shape"));
                }
            }
            Op::GatherRows(x, rows) => {
                let xv = val(*x);
                let cols = xv.cols();
                let mut d = vec![0.0; xv.len()];
                for (out_r, &src) in rows.iter().enumerate() {
                    for (dst, v) in d[src * cols..(src + 1) * cols].iter_mut().zip(g.row(out_r)) {
                        *dst += v;
                    }
                }
                acc(*x, Tensor::new(xv.shape().to_vec(), d).expect("shape"));
            }
            Op::Reshape(x) => {
                let shape = val(*x).shape().to_vec();
                acc(*x, g.clone().reshaped(shape).expect("shape"));
            }
            Op::SoftmaxRows(x) => {
                let y = &node.value;
                let cols = y.cols();
                let mut d = vec![0.0; y.len()];
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for c in 0..cols {
                        d[r * cols + c] = yr[c] * (gr[c] - dot);
                    }
                }
                acc(*x, Tensor::new(y.shape().to_vec(), d).expect("shape"));
            }
            Op::LogSoftmaxRows(x) => {
                let y = &node.value;
                let cols = y.cols();
                let mut d = vec![0.0; y.len()];
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let total: f64 = gr.iter().sum();
                    for c in 0..cols {
                        d[r * cols + c] = gr[c] - yr[c].exp() * total;
                    }
                }
                acc(*x, Tensor::new(y.shape().to_vec(), d).expect("shape"));
            }
            Op::PickCols(x, cols_idx) => {
                let xv = val(*x);
                let cols = xv.cols();
                let mut d = vec![0.0; xv.len()];
                for (r, &c) in cols_idx.iter().enumerate() {
                    d[r * cols + c] += g.data()[r];
                }
                acc(*x, Tensor::new(xv.shape().to_vec(), d).expect("shape"));
            }
            Op::Attention {
                query,
                keys,
                groups,
                scale,
                weights,
            } => {
                let (qv, kv) = (val(*query), val(*keys));
                let dim = qv.cols();
                let mut dq = vec![0.0; qv.len()];
                let mut dk = vec![0.0; kv.len()];
                for (qi, (group, psi)) in groups.iter().zip(weights.iter()).enumerate() {
                    if group.is_empty() {
                        continue;
                    }
                    let gm = g.row(qi);
                    let q = qv.row(qi);
                    let dpsi: Vec<f64> = group
                        .iter()
                        .map(|&k| kv.row(k).iter().zip(gm).map(|(a, b)| a * b).sum())
                        .collect();
                    let mean: f64 = psi.iter().zip(&dpsi).map(|(p, d)| p * d).sum();
                    for (j, &k) in group.iter().enumerate() {
                        let ds = psi[j] * (dpsi[j] - mean) * scale;
                        let key = kv.row(k);
                        for c in 0..dim {
                            dq[qi * dim + c] += ds * key[c];
                            dk[k * dim + c] += ds * q[c] + psi[j] * gm[c];
                        }
                    }
                }
                acc(*query, Tensor::new(qv.shape().to_vec(), dq).expect("shape"));
                acc(*keys, Tensor::new(kv.shape().to_vec(), dk).expect("shape"));
            }
            Op::Sum(x) => acc(*x, Tensor::filled(val(*x).shape(), g.item())),
            Op::Mean(x) => {
                let xv = val(*x);
                acc(*x, Tensor::filled(xv.shape(), g.item() / xv.len() as f64));
            }
        }
    }
}

fn attention_weights(
    query: &Tensor,
    keys: &Tensor,
    groups: &[Vec<usize>],
    scale: f64,
) -> Result<Vec<Vec<f64>>> {
    if query.cols() != keys.cols() {
        return Err(Error::dim(
            "attention",
            format!("query width {} vs key width {}", query.cols(), keys.cols()),
        ));
    }
    if groups.len() != query.rows() {
        return Err(Error::dim(
            "attention",
            format!("{} groups for {} query rows", groups.len(), query.rows()),
        ));
    }
    groups
        .iter()
        .enumerate()
        .map(|(qi, group)| {
            if let Some(&bad) = group.iter().find(|&&k| k >= keys.rows()) {
                return Err(Error::dim("attention", format!("key row {bad} out of range")));
            }
            let q = query.row(qi);
            let scores: Vec<f64> = group
                .iter()
                .map(|&k| scale * keys.row(k).iter().zip(q).map(|(a, b)| a * b).sum::<f64>())
                .collect();
            let mut psi = vec![0.0; scores.len()];
            if !scores.is_empty() {
                softmax_into(&scores, &mut psi);
            }
            Ok(psi)
        })
        .collect()
}

fn eval<'a>(op: &Op, val: &dyn Fn(Var) -> &'a Tensor) -> Result<Tensor> {
    Ok(match op {
        Op::Leaf | Op::Reshape(_) => unreachable!("leaves and views are not evaluated"),
        Op::MatMul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            if av.cols() != bv.rows() {
                return Err(Error::dim(
                    "matmul",
                    format!("{:?} x {:?}", av.shape(), bv.shape()),
                ));
            }
            let (m, k, n) = (av.rows(), av.cols(), bv.cols());
            let mut out = vec![0.0; m * n];
            gemm(av.data(), m, k, false, bv.data(), k, n, false, &mut out, false);
            Tensor::matrix(m, n, out)
        }
        Op::AddRow(x, b) => {
            let (xv, bv) = (val(*x), val(*b));
            if bv.len() != xv.cols() {
                return Err(Error::dim(
                    "add_row",
                    format!("bias length {} vs width {}", bv.len(), xv.cols()),
                ));
            }
            let mut out = xv.clone();
            let cols = xv.cols();
            for (i, v) in out.data_mut().iter_mut().enumerate() {
                *v += bv.data()[i % cols];
            }
            out
        }
        Op::Add(a, b) => {
            check_same("add", val(*a), val(*b))?;
            val(*a).zip_map(val(*b), |x, y| x + y)
        }
        Op::Sub(a, b) => {
            check_same("sub", val(*a), val(*b))?;
            val(*a).zip_map(val(*b), |x, y| x - y)
        }
        Op::Mul(a, b) => {
            check_same("mul", val(*a), val(*b))?;
            val(*a).zip_map(val(*b), |x, y| x * y)
        }
        Op::Minimum(a, b) => {
            check_same("minimum", val(*a), val(*b))?;
            val(*a).zip_map(val(*b), f64::min)
        }
        Op::Scale(x, s) => val(*x).map(|v| v * s),
        Op::Offset(x, s) => val(*x).map(|v| v + s),
        Op::Tanh(x) => val(*x).map(f64::tanh),
        Op::Sigmoid(x) => val(*x).map(sigmoid),
        Op::Exp(x) => val(*x).map(f64::exp),
        Op::Square(x) => val(*x).map(|v| v * v),
        Op::Clamp(x, lo, hi) => val(*x).map(|v| v.clamp(*lo, *hi)),
        Op::ConcatCols(parts) => {
            let rows = parts.first().map_or(0, |p| val(*p).rows());
            if let Some(p) = parts.iter().find(|p| val(**p).rows() != rows) {
                return Err(Error::dim(
                    "concat_cols",
                    format!("row count {} vs {rows}", val(*p).rows()),
                ));
            }
            let cols: usize = parts.iter().map(|p| val(*p).cols()).sum();
            let mut out = Vec::with_capacity(rows * cols);
            for r in 0..rows {
                for p in parts {
                    out.extend_from_slice(val(*p).row(r));
                }
            }
            Tensor::matrix(rows, cols, out)
        }
        Op::SliceCols(x, start, end) => {
            let xv = val(*x);
            if start > end || *end > xv.cols() {
                return Err(Error::dim(
                    "slice_cols",
                    format!("range {start}..{end} of width {}", xv.cols()),
                ));
            }
            let mut out = Vec::with_capacity(xv.rows() * (end - start));
            for r in 0..xv.rows() {
                out.extend_from_slice(&xv.row(r)[*start..*end]);
            }
            Tensor::matrix(xv.rows(), end - start, out)
        }
        Op::VStack(parts) => {
            let cols = parts.first().map_or(0, |p| val(*p).cols());
            if let Some(p) = parts.iter().find(|p| val(**p).cols() != cols) {
                return Err(Error::dim(
                    "vstack",
                    format!("width {} vs {cols}", val(*p).cols()),
                ));
            }
            let rows: usize = parts.iter().map(|p| val(*p).rows()).sum();
            let mut out = Vec::with_capacity(rows * cols);
            for p in parts {
                out.extend_from_slice(val(*p).data());
            }
            Tensor::matrix(rows, cols, out)
        }
        Op::GatherRows(x, rows) => {
            let xv = val(*x);
            if let Some(&bad) = rows.iter().find(|&&r| r >= xv.rows()) {
                return Err(Error::dim(
                    "gather_rows",
                    format!("row {bad} of {}", xv.rows()),
                ));
            }
            let mut out = Vec::with_capacity(rows.len() * xv.cols());
            for &r in rows.iter() {
                out.extend_from_slice(xv.row(r));
            }
            Tensor::matrix(rows.len(), xv.cols(), out)
        }
        Op::SoftmaxRows(x) | Op::LogSoftmaxRows(x) => {
            let xv = val(*x);
            if xv.cols() == 0 {
                return Err(Error::arg("softmax over an empty row"));
            }
            let mut out = Tensor::zeros(xv.shape());
            let cols = xv.cols();
            for r in 0..xv.rows() {
                let dst = &mut out.data_mut()[r * cols..(r + 1) * cols];
                if matches!(op, Op::SoftmaxRows(_)) {
                    softmax_into(xv.row(r), dst);
                } else {
                    log_softmax_into(xv.row(r), dst);
                }
            }
            out
        }
        Op::PickCols(x, cols_idx) => {
            let xv = val(*x);
            if cols_idx.len() != xv.rows() {
                return Err(Error::dim(
                    "pick_cols",
                    format!("{} indices for {} rows", cols_idx.len(), xv.rows()),
                ));
            }
            if let Some(&bad) = cols_idx.iter().find(|&&c| c >= xv.cols()) {
                return Err(Error::dim(
                    "pick_cols",
                    format!("column {bad} of {}", xv.cols()),
                ));
            }
            let out = cols_idx
                .iter()
                .enumerate()
                .map(|(r, &c)| xv.get(r, c))
                .collect::<Vec<_>>();
            Tensor::matrix(out.len(), 1, out)
        }
        Op::Attention {
            query,
            keys,
            groups,
            scale,
            weights: _,
        } => {
            let (qv, kv) = (val(*query), val(*keys));
            let psi_all = attention_weights(qv, kv, groups, *scale)?;
            let dim = qv.cols();
            let mut out = vec![0.0; groups.len() * dim];
            for (qi, (group, psi)) in groups.iter().zip(&psi_all).enumerate() {
                let dst = &mut out[qi * dim..(qi + 1) * dim];
                for (&k, &w) in group.iter().zip(psi) {
                    for (d, v) in dst.iter_mut().zip(kv.row(k)) {
                        *d += w * v;
                    }
                }
            }
            Tensor::matrix(groups.len(), dim, out)
        }
        Op::Sum(x) => Tensor::scalar(val(*x).sum()),
        Op::Mean(x) => {
            let xv = val(*x);
            Tensor::scalar(xv.sum() / xv.len() as f64)
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_parameters_has_unit_gradients() {
        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::vector(vec![0.3, -2.0, 7.5]));
        let loss = tape.sum(p);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.wrt(p).data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn square_at_three_has_gradient_six() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::scalar(3.0));
        let loss = tape.square(w);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.wrt(w).item(), 6.0);
    }

    #[test]
    fn unused_parameters_get_exact_zero() {
        let mut tape = Tape::new();
        let used = tape.leaf(Tensor::scalar(2.0));
        let unused = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        let loss = tape.square(used);
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(unused).is_none());
        assert_eq!(grads.wrt(unused).data(), &[0.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        let y = tape.tanh(x);
        assert!(matches!(tape.backward(y), Err(Error::Argument(_))));
    }

    #[test]
    fn backward_visits_in_reverse_recording_order() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(0.5));
        let a = tape.tanh(x);
        let b = tape.sigmoid(a);
        let c = tape.mul(a, b).unwrap();
        let loss = tape.sum(c);
        let grads = tape.backward(loss).unwrap();
        let order = grads.visit_order();
        assert!(order.windows(2).all(|w| w[0] > w[1]));
        assert_eq!(order.first(), Some(&loss.index()));
        assert_eq!(order.last(), Some(&x.index()));
    }

    #[test]
    fn replay_is_bit_identical() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::matrix(2, 3, vec![0.1, -0.4, 0.9, 1.3, 0.0, -2.2]));
        let w = tape.leaf(Tensor::matrix(3, 2, vec![0.5, -0.3, 0.8, 0.2, -1.1, 0.7]));
        let b = tape.leaf(Tensor::vector(vec![0.01, -0.02]));
        let h = tape.matmul(a, w).unwrap();
        let h = tape.add_row(h, b).unwrap();
        let h = tape.tanh(h);
        let (m, _) = tape.attention(h, h, vec![vec![1], vec![0, 1]], 0.5).unwrap();
        let s = tape.log_softmax_rows(m).unwrap();
        let r = tape.reshape(s, &[4]).unwrap();
        let _ = tape.sum(r);
        let replayed = tape.replay().unwrap();
        for (i, v) in replayed.iter().enumerate() {
            assert_eq!(v, &tape.nodes[i].value, "node {i}");
        }
    }

    #[test]
    fn shape_errors_are_reported() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[2, 3]));
        let b = tape.leaf(Tensor::zeros(&[2, 3]));
        assert!(matches!(tape.matmul(a, b), Err(Error::Dimension { .. })));
        let c = tape.leaf(Tensor::zeros(&[3]));
        assert!(tape.add(a, c).is_err());
        assert!(tape.pick_cols(a, &[0]).is_err());
        assert!(tape.gather_rows(a, &[2]).is_err());
    }

    #[test]
    fn empty_attention_group_pools_to_zero() {
        let mut tape = Tape::new();
        let q = tape.leaf(Tensor::matrix(1, 2, vec![1.0, 2.0]));
        let k = tape.leaf(Tensor::matrix(1, 2, vec![3.0, 4.0]));
        let (m, w) = tape.attention(q, k, vec![vec![]], 0.5).unwrap();
        assert_eq!(tape.value(m).data(), &[0.0, 0.0]);
        assert!(w[0].is_empty());
    }
}
