//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its forward value and the
//! handles it was computed from. `backward` replays the tape in reverse and
//! accumulates vector-Jacobian products. Parameters enter the tape once
//! each, as leaves that snapshot the current value in the store; frozen
//! parameters are leaves like any other, so gradients reach them and
//! everything upstream of them.

use std::collections::HashMap;
use std::sync::Arc;

use super::params::{Grads, ParamId, ParamStore};
use super::tensor::{matmul_into, matmul_nt_into, matmul_tn_into, Precision, Tensor};
use crate::error::{Error, Result};

/// Floor applied inside `log`.
pub const LOG_FLOOR: f64 = 1e-12;

/// Handle to a value on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

/// Deliberate backward corruptions used to prove that gradient checks bite.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// Scales the left-operand gradient of every matmul by 1.25.
    MatmulBackward,
}

#[derive(Debug)]
enum Op {
    Const,
    Input,
    Param(ParamId),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Transpose(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    GatherRows(Var, Arc<Vec<usize>>),
    ScatterAddRows(Var, Arc<Vec<usize>>),
    RowSoftmax(Var),
    SegmentSoftmax(Var, Arc<Vec<usize>>, usize),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Mean(Var, Axis),
    Sum(Var),
    L2Normalize(Var, Vec<f64>),
    Dot(Var, Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

pub struct Tape<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
    precision: Precision,
    fault: Option<Fault>,
    kinks: u64,
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

impl<'p> Tape<'p> {
    pub fn new(store: &'p ParamStore, precision: Precision) -> Self {
        Tape {
            store,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            precision,
            fault: None,
            kinks: FNV_OFFSET,
        }
    }

    pub fn with_fault(mut self, fault: Option<Fault>) -> Self {
        self.fault = fault;
        self
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Hash of every branch decision taken at a non-differentiable point
    /// (relu masks, log floor hits). Two evaluations with equal signatures
    /// lie on the same smooth piece.
    pub fn kink_signature(&self) -> u64 {
        self.kinks
    }

    fn mix_kinks(&mut self, bits: impl Iterator<Item = bool>) {
        let mut h = self.kinks;
        for b in bits {
            h ^= b as u64 + 1;
            h = h.wrapping_mul(FNV_PRIME);
        }
        self.kinks = h;
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn rc(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    fn push(&mut self, mut value: Tensor, op: Op, inputs: &[Var]) -> Var {
        self.precision.round_slice(value.data_mut());
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A value that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Const, &[])
    }

    /// A leaf whose gradient is reported by [`Backward::grad`].
    pub fn input(&mut self, mut value: Tensor) -> Var {
        self.precision.round_slice(value.data_mut());
        self.nodes.push(Node {
            value,
            op: Op::Input,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars.get(&id) {
            return *v;
        }
        let value = self.store.value(id).clone();
        self.nodes.push(Node {
            value,
            op: Op::Param(id),
            requires_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.same_shape(tb) {
            let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
            let out = Tensor::new(ta.shape().to_vec(), data)?;
            return Ok(self.push(out, Op::Add(a, b), &[a, b]));
        }
        if tb.rows() == 1 && tb.cols() == ta.cols() {
            let c = ta.cols();
            let bd = tb.data();
            let data = ta
                .data()
                .iter()
                .enumerate()
                .map(|(i, x)| x + bd[i % c])
                .collect();
            let out = Tensor::new(ta.shape().to_vec(), data)?;
            return Ok(self.push(out, Op::AddRow(a, b), &[a, b]));
        }
        Err(Error::shape(
            "add",
            format!("{:?} + {:?}", ta.shape(), tb.shape()),
        ))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !ta.same_shape(tb) {
            return Err(Error::shape(
                "sub",
                format!("{:?} - {:?}", ta.shape(), tb.shape()),
            ));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x - y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    /// Elementwise product; `b` may also be a `[rows, 1]` column that scales each row.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.same_shape(tb) {
            let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
            let out = Tensor::new(ta.shape().to_vec(), data)?;
            return Ok(self.push(out, Op::Mul(a, b), &[a, b]));
        }
        if tb.cols() == 1 && tb.rows() == ta.rows() {
            let c = ta.cols();
            let bd = tb.data();
            let data = ta
                .data()
                .iter()
                .enumerate()
                .map(|(i, x)| x * bd[i / c.max(1)])
                .collect();
            let out = Tensor::new(ta.shape().to_vec(), data)?;
            return Ok(self.push(out, Op::MulCol(a, b), &[a, b]));
        }
        Err(Error::shape(
            "mul",
            format!("{:?} * {:?}", ta.shape(), tb.shape()),
        ))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x * s);
        self.push(out, Op::Scale(a, s), &[a])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let ((m, k), (k2, n)) = (self.rc(a), self.rc(b));
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("[{m}, {k}] x [{k2}, {n}]"),
            ));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let out = Tensor::matrix(m, n, out)?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        self.push(out, Op::Transpose(a), &[a])
    }

    /// Concatenates along the last axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let rows = self.rc(first).0;
        let mut cols = 0;
        for &p in parts {
            let (r, c) = self.rc(p);
            if r != rows {
                return Err(Error::shape(
                    "concat",
                    format!("row counts {rows} vs {r}"),
                ));
            }
            cols += c;
        }
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row_slice(i));
            }
        }
        let out = Tensor::matrix(rows, cols, data)?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Stacks along the first axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::shape("concat_rows", "no inputs"))?;
        let cols = self.rc(first).1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.rc(p);
            if c != cols {
                return Err(Error::shape(
                    "concat_rows",
                    format!("column counts {cols} vs {c}"),
                ));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let out = Tensor::matrix(rows, cols, data)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.rc(a);
        if start > end || end > c {
            return Err(Error::shape(
                "slice_cols",
                format!("{start}..{end} of {c} columns"),
            ));
        }
        let w = end - start;
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(r * w);
        for i in 0..r {
            data.extend_from_slice(&src[i * c + start..i * c + end]);
        }
        let out = Tensor::matrix(r, w, data)?;
        Ok(self.push(out, Op::SliceCols(a, start), &[a]))
    }

    pub fn gather_rows(&mut self, a: Var, idx: Arc<Vec<usize>>) -> Result<Var> {
        let (r, c) = self.rc(a);
        let src = self.value(a);
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx.iter() {
            if i >= r {
                return Err(Error::shape(
                    "gather_rows",
                    format!("index {i} out of {r} rows"),
                ));
            }
            data.extend_from_slice(src.row_slice(i));
        }
        let out = Tensor::matrix(idx.len(), c, data)?;
        Ok(self.push(out, Op::GatherRows(a, idx), &[a]))
    }

    /// `out[idx[i]] += a[i]` over `n` output rows.
    pub fn scatter_add_rows(&mut self, a: Var, idx: Arc<Vec<usize>>, n: usize) -> Result<Var> {
        let (r, c) = self.rc(a);
        if idx.len() != r {
            return Err(Error::shape(
                "scatter_add_rows",
                format!("{} indices for {r} rows", idx.len()),
            ));
        }
        let src = self.value(a).data();
        let mut data = vec![0.0; n * c];
        for (i, &t) in idx.iter().enumerate() {
            if t >= n {
                return Err(Error::shape(
                    "scatter_add_rows",
                    format!("target {t} out of {n} rows"),
                ));
            }
            for j in 0..c {
                data[t * c + j] += src[i * c + j];
            }
        }
        let out = Tensor::matrix(n, c, data)?;
        Ok(self.push(out, Op::ScatterAddRows(a, idx), &[a]))
    }

    pub fn row_softmax(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.rc(a);
        if c == 0 {
            return Err(Error::domain("row_softmax", "empty axis"));
        }
        let src = self.value(a).data();
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..c {
                let e = (row[j] - mx).exp();
                data[i * c + j] = e;
                z += e;
            }
            for x in &mut data[i * c..(i + 1) * c] {
                *x /= z;
            }
        }
        let out = Tensor::matrix(r, c, data)?;
        Ok(self.push(out, Op::RowSoftmax(a), &[a]))
    }

    /// Softmax over groups of rows sharing a segment id, independently per column.
    pub fn segment_softmax(&mut self, a: Var, segments: Arc<Vec<usize>>, n_segments: usize) -> Result<Var> {
        let (r, c) = self.rc(a);
        if segments.len() != r {
            return Err(Error::shape(
                "segment_softmax",
                format!("{} segment ids for {r} rows", segments.len()),
            ));
        }
        if let Some(&bad) = segments.iter().find(|&&s| s >= n_segments) {
            return Err(Error::shape(
                "segment_softmax",
                format!("segment {bad} out of {n_segments}"),
            ));
        }
        let src = self.value(a).data();
        let mut mx = vec![f64::NEG_INFINITY; n_segments * c];
        for (i, &s) in segments.iter().enumerate() {
            for j in 0..c {
                let m = &mut mx[s * c + j];
                *m = m.max(src[i * c + j]);
            }
        }
        let mut data = vec![0.0; r * c];
        let mut z = vec![0.0; n_segments * c];
        for (i, &s) in segments.iter().enumerate() {
            for j in 0..c {
                let e = (src[i * c + j] - mx[s * c + j]).exp();
                data[i * c + j] = e;
                z[s * c + j] += e;
            }
        }
        for (i, &s) in segments.iter().enumerate() {
            for j in 0..c {
                data[i * c + j] /= z[s * c + j];
            }
        }
        let out = Tensor::matrix(r, c, data)?;
        Ok(self.push(out, Op::SegmentSoftmax(a, segments, n_segments), &[a]))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let out = t.map(|x| if x > 0.0 { x } else { 0.0 });
        let mask: Vec<bool> = t.data().iter().map(|&x| x > 0.0).collect();
        self.mix_kinks(mask.into_iter());
        self.push(out, Op::Relu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| {
            if x >= 0.0 {
                1.0 / (1.0 + (-x).exp())
            } else {
                let e = x.exp();
                e / (1.0 + e)
            }
        });
        self.push(out, Op::Sigmoid(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        self.push(out, Op::Exp(a), &[a])
    }

    /// Natural log with inputs floored at [`LOG_FLOOR`].
    pub fn log(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.numel() == 0 {
            return Err(Error::domain("log", "empty input"));
        }
        let out = t.map(|x| x.max(LOG_FLOOR).ln());
        let floored: Vec<bool> = t.data().iter().map(|&x| x <= LOG_FLOOR).collect();
        if floored.iter().any(|&f| f) {
            log::debug!("log input floored at {LOG_FLOOR}");
        }
        self.mix_kinks(floored.into_iter());
        Ok(self.push(out, Op::Log(a), &[a]))
    }

    pub fn mean(&mut self, a: Var, axis: Axis) -> Result<Var> {
        let (r, c) = self.rc(a);
        let src = self.value(a).data();
        let out = match axis {
            Axis::Rows => {
                if r == 0 {
                    return Err(Error::domain("mean", "empty axis"));
                }
                let mut data = vec![0.0; c];
                for i in 0..r {
                    for j in 0..c {
                        data[j] += src[i * c + j];
                    }
                }
                data.iter_mut().for_each(|x| *x /= r as f64);
                Tensor::matrix(1, c, data)?
            }
            Axis::Cols => {
                if c == 0 {
                    return Err(Error::domain("mean", "empty axis"));
                }
                let data = (0..r)
                    .map(|i| src[i * c..(i + 1) * c].iter().sum::<f64>() / c as f64)
                    .collect();
                Tensor::matrix(r, 1, data)?
            }
        };
        Ok(self.push(out, Op::Mean(a, axis), &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    /// Scales each row to unit Euclidean norm.
    pub fn l2_normalize(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.rc(a);
        let src = self.value(a).data();
        let mut norms = Vec::with_capacity(r);
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n == 0.0 || !n.is_finite() {
                return Err(Error::domain("l2_normalize", format!("row {i} has norm {n}")));
            }
            for j in 0..c {
                data[i * c + j] = row[j] / n;
            }
            norms.push(n);
        }
        let out = Tensor::matrix(r, c, data)?;
        Ok(self.push(out, Op::L2Normalize(a, norms), &[a]))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.numel() != tb.numel() {
            return Err(Error::shape(
                "dot",
                format!("{:?} . {:?}", ta.shape(), tb.shape()),
            ));
        }
        let s = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).sum();
        Ok(self.push(Tensor::scalar(s), Op::Dot(a, b), &[a, b]))
    }

    /// Row-wise layer normalisation with affine `[1, c]` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (r, c) = self.rc(x);
        if c == 0 {
            return Err(Error::domain("layer_norm", "empty axis"));
        }
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return Err(Error::shape(
                "layer_norm",
                format!("affine params must have {c} entries"),
            ));
        }
        let src = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; r * c];
        let mut rstd = Vec::with_capacity(r);
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let mu = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + eps).sqrt();
            for j in 0..c {
                let xh = (row[j] - mu) * rs;
                xhat[i * c + j] = xh;
                data[i * c + j] = xh * g[j] + b[j];
            }
            rstd.push(rs);
        }
        let out = Tensor::matrix(r, c, data)?;
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        ))
    }

    /// Gradients of a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Backward> {
        let t = self.value(loss);
        if t.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                t.shape()
            )));
        }
        self.backward_seeded(&[(loss, Tensor::full(t.shape(), 1.0))])
    }

    /// Reverse pass starting from arbitrary upstream gradients.
    pub fn backward_seeded(&self, seeds: &[(Var, Tensor)]) -> Result<Backward> {
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        let mut last = 0;
        for (v, g) in seeds {
            if !self.value(*v).same_shape(g) {
                return Err(Error::shape(
                    "backward",
                    format!(
                        "seed {:?} for value {:?}",
                        g.shape(),
                        self.value(*v).shape()
                    ),
                ));
            }
            accumulate(&mut grads[v.0], g.data(), self.value(*v).shape());
            last = last.max(v.0 + 1);
        }
        for i in (0..last).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        let mut params = Grads::new();
        for (node, g) in self.nodes.iter().zip(&grads) {
            if let (Op::Param(id), Some(g)) = (&node.op, g) {
                params.add(*id, g)?;
            }
        }
        Ok(Backward {
            node_grads: grads,
            params,
        })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let gd = g.data();
        let wants = |v: &Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Const | Op::Input | Op::Param(_) => {}
            Op::Add(a, b) => {
                if wants(a) {
                    accumulate(&mut grads[a.0], gd, g.shape());
                }
                if wants(b) {
                    accumulate(&mut grads[b.0], gd, g.shape());
                }
            }
            Op::AddRow(a, b) => {
                if wants(a) {
                    accumulate(&mut grads[a.0], gd, g.shape());
                }
                if wants(b) {
                    let c = g.cols();
                    let mut gb = vec![0.0; c];
                    for (i, x) in gd.iter().enumerate() {
                        gb[i % c] += x;
                    }
                    accumulate(&mut grads[b.0], &gb, self.value(*b).shape());
                }
            }
            Op::Sub(a, b) => {
                if wants(a) {
                    accumulate(&mut grads[a.0], gd, g.shape());
                }
                if wants(b) {
                    let neg: Vec<f64> = gd.iter().map(|x| -x).collect();
                    accumulate(&mut grads[b.0], &neg, g.shape());
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if wants(a) {
                    let ga: Vec<f64> = gd.iter().zip(bv).map(|(x, y)| x * y).collect();
                    accumulate(&mut grads[a.0], &ga, g.shape());
                }
                if wants(b) {
                    let gb: Vec<f64> = gd.iter().zip(av).map(|(x, y)| x * y).collect();
                    accumulate(&mut grads[b.0], &gb, g.shape());
                }
            }
            Op::MulCol(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let c = g.cols().max(1);
                if wants(a) {
                    let ga: Vec<f64> = gd.iter().enumerate().map(|(i, x)| x * bv[i / c]).collect();
                    accumulate(&mut grads[a.0], &ga, g.shape());
                }
                if wants(b) {
                    let mut gb = vec![0.0; bv.len()];
                    for (i, x) in gd.iter().enumerate() {
                        gb[i / c] += x * av[i];
                    }
                    accumulate(&mut grads[b.0], &gb, self.value(*b).shape());
                }
            }
            Op::Scale(a, s) => {
                if wants(a) {
                    let ga: Vec<f64> = gd.iter().map(|x| x * s).collect();
                    accumulate(&mut grads[a.0], &ga, g.shape());
                }
            }
            Op::MatMul(a, b) => {
                let ((m, k), n) = (self.rc(*a), g.cols());
                if wants(a) {
                    let mut ga = vec![0.0; m * k];
                    matmul_nt_into(gd, self.value(*b).data(), &mut ga, m, k, n);
                    if self.fault == Some(Fault::MatmulBackward) {
                        ga.iter_mut().for_each(|x| *x *= 1.25);
                    }
                    accumulate(&mut grads[a.0], &ga, self.value(*a).shape());
                }
                if wants(b) {
                    let mut gb = vec![0.0; k * n];
                    matmul_tn_into(self.value(*a).data(), gd, &mut gb, m, k, n);
                    accumulate(&mut grads[b.0], &gb, self.value(*b).shape());
                }
            }
            Op::Transpose(a) => {
                if wants(a) {
                    let gt = g.transpose();
                    accumulate(&mut grads[a.0], gt.data(), self.value(*a).shape());
                }
            }
            Op::ConcatCols(parts) => {
                let (r, c) = (g.rows(), g.cols());
                let mut off = 0;
                for p in parts {
                    let w = self.rc(*p).1;
                    if wants(p) {
                        let mut gp = Vec::with_capacity(r * w);
                        for i in 0..r {
                            gp.extend_from_slice(&gd[i * c + off..i * c + off + w]);
                        }
                        accumulate(&mut grads[p.0], &gp, self.value(*p).shape());
                    }
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let c = g.cols();
                let mut off = 0;
                for p in parts {
                    let r = self.rc(*p).0;
                    if wants(p) {
                        accumulate(
                            &mut grads[p.0],
                            &gd[off * c..(off + r) * c],
                            self.value(*p).shape(),
                        );
                    }
                    off += r;
                }
            }
            Op::SliceCols(a, start) => {
                if wants(a) {
                    let (r, c) = self.rc(*a);
                    let w = g.cols();
                    let mut ga = vec![0.0; r * c];
                    for i in 0..r {
                        ga[i * c + start..i * c + start + w].copy_from_slice(&gd[i * w..(i + 1) * w]);
                    }
                    accumulate(&mut grads[a.0], &ga, self.value(*a).shape());
                }
            }
            Op::GatherRows(a, idx) => {
                if wants(a) {
                    let (r, c) = self.rc(*a);
                    let mut ga = vec![0.0; r * c];
                    for (i, &src) in idx.iter().enumerate() {
                        for j in 0..c {
                            ga[src * c + j] += gd[i * c + j];
                        }
                    }
                    accumulate(&mut grads[a.0], &ga, self.value(*a).shape());
                }
            }
            Op::ScatterAddRows(a, idx) => {
                if wants(a) {
                    let c = g.cols();
                    let mut ga = Vec::with_capacity(idx.len() * c);
                    for &t in idx.iter() {
                        ga.extend_from_slice(&gd[t * c..(t + 1) * c]);
                    }
                    accumulate(&mut grads[a.0], &ga, self.value(*a).shape());
                }
            }
            Op::RowSoftmax(a) => {
                if wants(a) {
                    let y = node.value.data();
                    let (r, c) = (g.rows(), g.cols());
                    let mut ga = vec![0.0; r * c];
                    for i in 0..r {
                        let s: f64 = (0..c).map(|j| gd[i * c + j] * y[i * c + j]).sum();
                        for j in 0..c {
                            ga[i * c + j] = y[i * c + j] * (gd[i * c + j] - s);
                        }
                    }
                    accumulate(&mut grads[a.0], &ga, g.shape());
                }
            }
            Op::SegmentSoftmax(a, segs, nseg) => {
                if wants(a) {
                    let y = node.value.data();
                    let c = g.cols();
                    let mut dots = vec![0.0; nseg * c];
                    for (i, &s) in segs.iter().enumerate() {
                        for j in 0..c {
                            dots[s * c + j] += gd[i * c + j] * y[i * c + j];
                        }
                    }
                    let ga: Vec<f64> = (0..gd.len())
                        .map(|k| {
                            let (i, j) = (k / c, k % c);
                            y[k] * (gd[k] - dots[segs[i] * c + j])
                        })
                        .collect();
                    accumulate(&mut grads[a.0], &ga, g.shape());
                }
            }
            Op::Relu(a) => {
                if wants(a) {
                    let x = self.value(*a).data();
                    let ga: Vec<f64> = gd
                        .iter()
                        .zip(x)
                        .map(|(gv, &xv)| if xv > 0.0 { *gv } else { 0.0 })
                        .collect();
                    accumulate(&mut grads[a.0], &ga, g.shape());
                }
            }
            Op::Sigmoid(a) => {
                if wants(a) {
                    let y = node.value.data();
                    let ga: Vec<f64> = gd.iter().zip(y).map(|(gv, yv)| gv * yv * (1.0 - yv)).collect();
                    accumulate(&mut grads[a.0], &ga, g.shape());
                }
            }
            Op::Exp(a) => {
                if wants(a) {
                    let y = node.value.data();
                    let ga: Vec<f64> = gd.iter().zip(y).map(|(gv, yv)| gv * yv).collect();
                    accumulate(&mut grads[a.0], &ga, g.shape());
                }
            }
            Op::Log(a) => {
                if wants(a) {
                    let x = self.value(*a).data();
                    let ga: Vec<f64> = gd
                        .iter()
                        .zip(x)
                        .map(|(gv, &xv)| if xv > LOG_FLOOR { gv / xv } else { 0.0 })
                        .collect();
                    accumulate(&mut grads[a.0], &ga, g.shape());
                }
            }
            Op::Mean(a, axis) => {
                if wants(a) {
                    let (r, c) = self.rc(*a);
                    let ga: Vec<f64> = match axis {
                        Axis::Rows => (0..r * c).map(|k| gd[k % c] / r as f64).collect(),
                        Axis::Cols => (0..r * c).map(|k| gd[k / c] / c as f64).collect(),
                    };
                    accumulate(&mut grads[a.0], &ga, self.value(*a).shape());
                }
            }
            Op::Sum(a) => {
                if wants(a) {
                    let n = self.value(*a).numel();
                    accumulate(&mut grads[a.0], &vec![gd[0]; n], self.value(*a).shape());
                }
            }
            Op::L2Normalize(a, norms) => {
                if wants(a) {
                    let y = node.value.data();
                    let (r, c) = (g.rows(), g.cols());
                    let mut ga = vec![0.0; r * c];
                    for i in 0..r {
                        let yg: f64 = (0..c).map(|j| y[i * c + j] * gd[i * c + j]).sum();
                        for j in 0..c {
                            ga[i * c + j] = (gd[i * c + j] - y[i * c + j] * yg) / norms[i];
                        }
                    }
                    accumulate(&mut grads[a.0], &ga, g.shape());
                }
            }
            Op::Dot(a, b) => {
                let s = gd[0];
                if wants(a) {
                    let ga: Vec<f64> = self.value(*b).data().iter().map(|x| x * s).collect();
                    accumulate(&mut grads[a.0], &ga, self.value(*a).shape());
                }
                if wants(b) {
                    let gb: Vec<f64> = self.value(*a).data().iter().map(|x| x * s).collect();
                    accumulate(&mut grads[b.0], &gb, self.value(*b).shape());
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (r, c) = (g.rows(), g.cols());
                let gam = self.value(*gamma).data();
                if wants(gamma) || wants(beta) {
                    let mut dg = vec![0.0; c];
                    let mut db = vec![0.0; c];
                    for i in 0..r {
                        for j in 0..c {
                            dg[j] += gd[i * c + j] * xhat[i * c + j];
                            db[j] += gd[i * c + j];
                        }
                    }
                    if wants(gamma) {
                        accumulate(&mut grads[gamma.0], &dg, self.value(*gamma).shape());
                    }
                    if wants(beta) {
                        accumulate(&mut grads[beta.0], &db, self.value(*beta).shape());
                    }
                }
                if wants(x) {
                    let mut gx = vec![0.0; r * c];
                    for i in 0..r {
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..c {
                            let dxh = gd[i * c + j] * gam[j];
                            m1 += dxh;
                            m2 += dxh * xhat[i * c + j];
                        }
                        m1 /= c as f64;
                        m2 /= c as f64;
                        for j in 0..c {
                            let dxh = gd[i * c + j] * gam[j];
                            gx[i * c + j] = rstd[i] * (dxh - m1 - xhat[i * c + j] * m2);
                        }
                    }
                    accumulate(&mut grads[x.0], &gx, g.shape());
                }
            }
        }
        Ok(())
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: &[f64], shape: &[usize]) {
    match slot {
        Some(t) => {
            for (a, b) in t.data_mut().iter_mut().zip(g) {
                *a += b;
            }
        }
        None => {
            *slot = Some(Tensor::new(shape.to_vec(), g.to_vec()).expect("gradient shape matches value"));
        }
    }
}

/// Result of a reverse pass.
#[derive(Debug)]
pub struct Backward {
    node_grads: Vec<Option<Tensor>>,
    params: Grads,
}

impl Backward {
    /// Gradient with respect to any recorded value, if it was reached.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.node_grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn param_grads(&self) -> &Grads {
        &self.params
    }

    pub fn into_param_grads(self) -> Grads {
        self.params
    }
}
