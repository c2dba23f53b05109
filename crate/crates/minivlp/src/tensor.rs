//! Dense 2-D tensors with a reverse-mode gradient tape.
//!
//! Everything is 64-bit and row-major. Vectors are 1xN matrices, scalars are
//! 1x1. The tape records one node per executed op; `backward` replays it in
//! exact reverse order. Shape mismatches panic with both shapes in the message,
//! since they are programming errors rather than recoverable conditions.

use std::cell::{Ref, RefCell};

/// Plain value: row-major f64 matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn filled(rows: usize, cols: usize, v: f64) -> Self {
        Tensor { rows, cols, data: vec![v; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(
            rows * cols,
            data.len(),
            "tensor shape {}x{} does not match {} values",
            rows,
            cols,
            data.len()
        );
        Tensor { rows, cols, data }
    }

    pub fn row_vec(data: Vec<f64>) -> Self {
        let cols = data.len();
        Tensor { rows: 1, cols, data }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { rows: 1, cols: 1, data: vec![v] }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Tensor::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on {}x{} tensor", self.rows, self.cols);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transposed(&self) -> Tensor {
        let mut out = Tensor::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    fn same_shape(&self, other: &Tensor, op: &str) {
        assert_eq!(
            self.shape(),
            other.shape(),
            "{op}: shape mismatch {}x{} vs {}x{}",
            self.rows,
            self.cols,
            other.rows,
            other.cols
        );
    }
}

fn matmul_vals(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(
        a.cols, b.rows,
        "matmul: inner extents differ, {}x{} vs {}x{}",
        a.rows, a.cols, b.rows, b.cols
    );
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let mut out = Tensor::zeros(m, n);
    for i in 0..m {
        for p in 0..k {
            let aip = a.data[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b.data[p * n..(p + 1) * n];
            let orow = &mut out.data[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += aip * brow[j];
            }
        }
    }
    out
}

fn softmax_rows_vals(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    for i in 0..x.rows {
        let row = &mut out.data[i * x.cols..(i + 1) * x.cols];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

fn log_softmax_rows_vals(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    for i in 0..x.rows {
        let row = &mut out.data[i * x.cols..(i + 1) * x.cols];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    out
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn gelu_val(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_dval(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddRow(usize, usize),
    SoftmaxRows(usize),
    LogSoftmaxRows(usize),
    LayerNormRows { x: usize, gain: usize, bias: usize, eps: f64 },
    Gelu(usize),
    Exp(usize),
    Neg(usize),
    SumAll(usize),
    MeanAll(usize),
    GatherRows { table: usize, ids: Vec<usize> },
    SelectRows { x: usize, idx: Vec<usize> },
    SliceCols { x: usize, start: usize, len: usize },
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    L2NormalizeRows(usize),
    Huber { a: usize, b: usize, gamma: f64 },
    SelectEntries { x: usize, idx: Vec<(usize, usize)> },
    MulScalar { x: usize, s: usize },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Gradients produced by [`Tape::backward`], indexed by tape node.
pub struct Grads {
    by_node: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.by_node[v.0].as_ref()
    }
}

/// Record of executed differentiable operations for one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, needs_grad });
        Var(nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        self.value(v).clone()
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.value(v).item()
    }

    pub fn leaf(&self, t: Tensor, requires_grad: bool) -> Var {
        self.push(t, Op::Leaf, requires_grad)
    }

    pub fn constant(&self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let v = matmul_vals(&self.value(a), &self.value(b));
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::MatMul(a.0, b.0), ng)
    }

    pub fn transpose(&self, a: Var) -> Var {
        let v = self.value(a).transposed();
        let ng = self.needs(a);
        self.push(v, Op::Transpose(a.0), ng)
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        let v = {
            let (av, bv) = (self.value(a), self.value(b));
            av.same_shape(&bv, "add");
            let mut out = av.clone();
            for (o, x) in out.data.iter_mut().zip(bv.data.iter()) {
                *o += x;
            }
            out
        };
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Add(a.0, b.0), ng)
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let v = {
            let (av, bv) = (self.value(a), self.value(b));
            av.same_shape(&bv, "sub");
            let mut out = av.clone();
            for (o, x) in out.data.iter_mut().zip(bv.data.iter()) {
                *o -= x;
            }
            out
        };
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Sub(a.0, b.0), ng)
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let v = {
            let (av, bv) = (self.value(a), self.value(b));
            av.same_shape(&bv, "mul");
            let mut out = av.clone();
            for (o, x) in out.data.iter_mut().zip(bv.data.iter()) {
                *o *= x;
            }
            out
        };
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Mul(a.0, b.0), ng)
    }

    pub fn scale(&self, a: Var, c: f64) -> Var {
        let mut v = self.tensor(a);
        for x in v.data.iter_mut() {
            *x *= c;
        }
        let ng = self.needs(a);
        self.push(v, Op::Scale(a.0, c), ng)
    }

    /// Broadcast-add a 1xN row vector to every row of an MxN matrix.
    pub fn add_row(&self, x: Var, row: Var) -> Var {
        let v = {
            let (xv, rv) = (self.value(x), self.value(row));
            assert_eq!(rv.rows, 1, "add_row: bias must be a row vector, got {}x{}", rv.rows, rv.cols);
            assert_eq!(
                xv.cols, rv.cols,
                "add_row: width mismatch {}x{} vs 1x{}",
                xv.rows, xv.cols, rv.cols
            );
            let mut out = xv.clone();
            for i in 0..out.rows {
                for j in 0..out.cols {
                    out.data[i * out.cols + j] += rv.data[j];
                }
            }
            out
        };
        let ng = self.needs(x) || self.needs(row);
        self.push(v, Op::AddRow(x.0, row.0), ng)
    }

    pub fn softmax_rows(&self, x: Var) -> Var {
        let v = softmax_rows_vals(&self.value(x));
        let ng = self.needs(x);
        self.push(v, Op::SoftmaxRows(x.0), ng)
    }

    pub fn log_softmax_rows(&self, x: Var) -> Var {
        let v = log_softmax_rows_vals(&self.value(x));
        let ng = self.needs(x);
        self.push(v, Op::LogSoftmaxRows(x.0), ng)
    }

    /// Per-row layer norm with population variance: gain * (x - mean)/sqrt(var + eps) + bias.
    pub fn layer_norm_rows(&self, x: Var, gain: Var, bias: Var, eps: f64) -> Var {
        let v = {
            let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
            let n = xv.cols;
            assert!(n >= 2, "layer_norm: need at least 2 features, got {}", n);
            assert_eq!(gv.shape(), (1, n), "layer_norm: gain shape {:?} vs width {}", gv.shape(), n);
            assert_eq!(bv.shape(), (1, n), "layer_norm: bias shape {:?} vs width {}", bv.shape(), n);
            let mut out = xv.clone();
            for i in 0..xv.rows {
                let row = &xv.data[i * n..(i + 1) * n];
                let mean = row.iter().sum::<f64>() / n as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
                let inv = 1.0 / (var + eps).sqrt();
                for j in 0..n {
                    out.data[i * n + j] = gv.data[j] * (row[j] - mean) * inv + bv.data[j];
                }
            }
            out
        };
        let ng = self.needs(x) || self.needs(gain) || self.needs(bias);
        self.push(v, Op::LayerNormRows { x: x.0, gain: gain.0, bias: bias.0, eps }, ng)
    }

    pub fn gelu(&self, x: Var) -> Var {
        let mut v = self.tensor(x);
        for t in v.data.iter_mut() {
            *t = gelu_val(*t);
        }
        let ng = self.needs(x);
        self.push(v, Op::Gelu(x.0), ng)
    }

    pub fn exp(&self, x: Var) -> Var {
        let mut v = self.tensor(x);
        for t in v.data.iter_mut() {
            *t = t.exp();
        }
        let ng = self.needs(x);
        self.push(v, Op::Exp(x.0), ng)
    }

    pub fn neg(&self, x: Var) -> Var {
        let mut v = self.tensor(x);
        for t in v.data.iter_mut() {
            *t = -*t;
        }
        let ng = self.needs(x);
        self.push(v, Op::Neg(x.0), ng)
    }

    pub fn sum_all(&self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).data.iter().sum());
        let ng = self.needs(x);
        self.push(v, Op::SumAll(x.0), ng)
    }

    pub fn mean_all(&self, x: Var) -> Var {
        let xv = self.value(x);
        let v = Tensor::scalar(xv.data.iter().sum::<f64>() / xv.numel() as f64);
        drop(xv);
        let ng = self.needs(x);
        self.push(v, Op::MeanAll(x.0), ng)
    }

    /// Embedding lookup: rows of `table` selected by `ids`.
    pub fn gather_rows(&self, table: Var, ids: &[usize]) -> Var {
        let v = {
            let tv = self.value(table);
            for &id in ids {
                assert!(id < tv.rows, "gather_rows: id {} out of range (table has {} rows)", id, tv.rows);
            }
            let mut out = Tensor::zeros(ids.len(), tv.cols);
            for (i, &id) in ids.iter().enumerate() {
                out.data[i * tv.cols..(i + 1) * tv.cols].copy_from_slice(tv.row(id));
            }
            out
        };
        let ng = self.needs(table);
        self.push(v, Op::GatherRows { table: table.0, ids: ids.to_vec() }, ng)
    }

    pub fn select_rows(&self, x: Var, idx: &[usize]) -> Var {
        let v = {
            let xv = self.value(x);
            for &i in idx {
                assert!(i < xv.rows, "select_rows: row {} out of range ({} rows)", i, xv.rows);
            }
            let mut out = Tensor::zeros(idx.len(), xv.cols);
            for (o, &i) in idx.iter().enumerate() {
                out.data[o * xv.cols..(o + 1) * xv.cols].copy_from_slice(xv.row(i));
            }
            out
        };
        let ng = self.needs(x);
        self.push(v, Op::SelectRows { x: x.0, idx: idx.to_vec() }, ng)
    }

    pub fn slice_cols(&self, x: Var, start: usize, len: usize) -> Var {
        let v = {
            let xv = self.value(x);
            assert!(
                start + len <= xv.cols,
                "slice_cols: [{start}, {}) out of range for width {}",
                start + len,
                xv.cols
            );
            let mut out = Tensor::zeros(xv.rows, len);
            for i in 0..xv.rows {
                out.data[i * len..(i + 1) * len]
                    .copy_from_slice(&xv.data[i * xv.cols + start..i * xv.cols + start + len]);
            }
            out
        };
        let ng = self.needs(x);
        self.push(v, Op::SliceCols { x: x.0, start, len }, ng)
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols: no parts");
        let v = {
            let nodes = self.nodes.borrow();
            let rows = nodes[parts[0].0].value.rows;
            let total: usize = parts.iter().map(|p| nodes[p.0].value.cols).sum();
            let mut out = Tensor::zeros(rows, total);
            let mut off = 0;
            for p in parts {
                let pv = &nodes[p.0].value;
                assert_eq!(pv.rows, rows, "concat_cols: row count mismatch {} vs {}", pv.rows, rows);
                for i in 0..rows {
                    out.data[i * total + off..i * total + off + pv.cols]
                        .copy_from_slice(pv.row(i));
                }
                off += pv.cols;
            }
            out
        };
        let ng = parts.iter().any(|p| self.needs(*p));
        self.push(v, Op::ConcatCols(parts.iter().map(|p| p.0).collect()), ng)
    }

    pub fn concat_rows(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows: no parts");
        let v = {
            let nodes = self.nodes.borrow();
            let cols = nodes[parts[0].0].value.cols;
            let total: usize = parts.iter().map(|p| nodes[p.0].value.rows).sum();
            let mut out = Tensor::zeros(total, cols);
            let mut off = 0;
            for p in parts {
                let pv = &nodes[p.0].value;
                assert_eq!(pv.cols, cols, "concat_rows: width mismatch {} vs {}", pv.cols, cols);
                out.data[off * cols..(off + pv.rows) * cols].copy_from_slice(&pv.data);
                off += pv.rows;
            }
            out
        };
        let ng = parts.iter().any(|p| self.needs(*p));
        self.push(v, Op::ConcatRows(parts.iter().map(|p| p.0).collect()), ng)
    }

    /// Normalize each row to unit L2 norm. Zero rows are rejected.
    pub fn l2_normalize_rows(&self, x: Var) -> Var {
        let v = {
            let xv = self.value(x);
            let mut out = xv.clone();
            for i in 0..xv.rows {
                let row = &mut out.data[i * xv.cols..(i + 1) * xv.cols];
                let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                assert!(norm > 0.0, "l2_normalize: zero-norm row {}", i);
                for v in row.iter_mut() {
                    *v /= norm;
                }
            }
            out
        };
        let ng = self.needs(x);
        self.push(v, Op::L2NormalizeRows(x.0), ng)
    }

    /// Elementwise smooth-L1 between two same-shape tensors.
    pub fn huber(&self, a: Var, b: Var, gamma: f64) -> Var {
        let v = {
            let (av, bv) = (self.value(a), self.value(b));
            av.same_shape(&bv, "huber");
            let mut out = av.clone();
            for (o, (&x, &y)) in out.data.iter_mut().zip(av.data.iter().zip(bv.data.iter())) {
                let d = x - y;
                *o = if d.abs() < gamma { 0.5 * d * d } else { d.abs() - 0.5 };
            }
            out
        };
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Huber { a: a.0, b: b.0, gamma }, ng)
    }

    /// Pick individual entries (i, j) into a 1xK row vector.
    pub fn select_entries(&self, x: Var, idx: &[(usize, usize)]) -> Var {
        let v = {
            let xv = self.value(x);
            let mut out = Tensor::zeros(1, idx.len());
            for (o, &(i, j)) in idx.iter().enumerate() {
                assert!(
                    i < xv.rows && j < xv.cols,
                    "select_entries: ({i},{j}) out of range for {}x{}",
                    xv.rows,
                    xv.cols
                );
                out.data[o] = xv.at(i, j);
            }
            out
        };
        let ng = self.needs(x);
        self.push(v, Op::SelectEntries { x: x.0, idx: idx.to_vec() }, ng)
    }

    /// Multiply every entry by a 1x1 scalar variable.
    pub fn mul_scalar(&self, x: Var, s: Var) -> Var {
        let v = {
            let (xv, sv) = (self.value(x), self.value(s));
            let c = sv.item();
            let mut out = xv.clone();
            for t in out.data.iter_mut() {
                *t *= c;
            }
            out
        };
        let ng = self.needs(x) || self.needs(s);
        self.push(v, Op::MulScalar { x: x.0, s: s.0 }, ng)
    }

    /// Accumulate d(root)/d(node) for every grad-tracked node. `root` must be scalar.
    pub fn backward(&self, root: Var) -> Grads {
        let nodes = self.nodes.borrow();
        assert_eq!(
            nodes[root.0].value.numel(),
            1,
            "backward: root must be scalar, got {}x{}",
            nodes[root.0].value.rows,
            nodes[root.0].value.cols
        );
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(1.0));

        for id in (0..=root.0).rev() {
            if !nodes[id].needs_grad {
                grads[id] = None;
                continue;
            }
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &nodes[id];
            let mut acc = |pid: usize, pg: Tensor| {
                if !nodes[pid].needs_grad {
                    return;
                }
                match &mut grads[pid] {
                    Some(existing) => {
                        for (e, v) in existing.data.iter_mut().zip(pg.data.iter()) {
                            *e += v;
                        }
                    }
                    slot => *slot = Some(pg),
                }
            };
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                    acc(*a, matmul_vals(&g, &bv.transposed()));
                    acc(*b, matmul_vals(&av.transposed(), &g));
                }
                Op::Transpose(a) => acc(*a, g.transposed()),
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g);
                }
                Op::Sub(a, b) => {
                    acc(*a, g.clone());
                    let mut ng = g;
                    for v in ng.data.iter_mut() {
                        *v = -*v;
                    }
                    acc(*b, ng);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                    let mut ga = g.clone();
                    for (x, y) in ga.data.iter_mut().zip(bv.data.iter()) {
                        *x *= y;
                    }
                    let mut gb = g;
                    for (x, y) in gb.data.iter_mut().zip(av.data.iter()) {
                        *x *= y;
                    }
                    acc(*a, ga);
                    acc(*b, gb);
                }
                Op::Scale(a, c) => {
                    let mut ga = g;
                    for v in ga.data.iter_mut() {
                        *v *= c;
                    }
                    acc(*a, ga);
                }
                Op::AddRow(x, row) => {
                    let rcols = nodes[*row].value.cols;
                    let mut gr = Tensor::zeros(1, rcols);
                    for i in 0..g.rows {
                        for j in 0..rcols {
                            gr.data[j] += g.at(i, j);
                        }
                    }
                    acc(*x, g);
                    acc(*row, gr);
                }
                Op::SoftmaxRows(x) => {
                    let y = &node.value;
                    let mut gx = g;
                    for i in 0..y.rows {
                        let yr = y.row(i);
                        let gr = &mut gx.data[i * y.cols..(i + 1) * y.cols];
                        let dot: f64 = gr.iter().zip(yr.iter()).map(|(a, b)| a * b).sum();
                        for (gv, yv) in gr.iter_mut().zip(yr.iter()) {
                            *gv = yv * (*gv - dot);
                        }
                    }
                    acc(*x, gx);
                }
                Op::LogSoftmaxRows(x) => {
                    let y = &node.value; // log-probs
                    let mut gx = g;
                    for i in 0..y.rows {
                        let yr = y.row(i);
                        let gr = &mut gx.data[i * y.cols..(i + 1) * y.cols];
                        let gsum: f64 = gr.iter().sum();
                        for (gv, yv) in gr.iter_mut().zip(yr.iter()) {
                            *gv -= yv.exp() * gsum;
                        }
                    }
                    acc(*x, gx);
                }
                Op::LayerNormRows { x, gain, bias, eps } => {
                    let xv = &nodes[*x].value;
                    let gv = &nodes[*gain].value;
                    let n = xv.cols;
                    let nf = n as f64;
                    let mut gx = Tensor::zeros(xv.rows, n);
                    let mut ggain = Tensor::zeros(1, n);
                    let mut gbias = Tensor::zeros(1, n);
                    for i in 0..xv.rows {
                        let row = xv.row(i);
                        let mean = row.iter().sum::<f64>() / nf;
                        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / nf;
                        let inv = 1.0 / (var + eps).sqrt();
                        let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv).collect();
                        let grow = g.row(i);
                        let gi: Vec<f64> = grow.iter().zip(gv.data.iter()).map(|(a, b)| a * b).collect();
                        let gi_mean = gi.iter().sum::<f64>() / nf;
                        let gx_dot = gi.iter().zip(xhat.iter()).map(|(a, b)| a * b).sum::<f64>() / nf;
                        for j in 0..n {
                            gx.data[i * n + j] = inv * (gi[j] - gi_mean - xhat[j] * gx_dot);
                            ggain.data[j] += grow[j] * xhat[j];
                            gbias.data[j] += grow[j];
                        }
                    }
                    acc(*x, gx);
                    acc(*gain, ggain);
                    acc(*bias, gbias);
                }
                Op::Gelu(x) => {
                    let xv = &nodes[*x].value;
                    let mut gx = g;
                    for (gv, xv) in gx.data.iter_mut().zip(xv.data.iter()) {
                        *gv *= gelu_dval(*xv);
                    }
                    acc(*x, gx);
                }
                Op::Exp(x) => {
                    let y = &node.value;
                    let mut gx = g;
                    for (gv, yv) in gx.data.iter_mut().zip(y.data.iter()) {
                        *gv *= yv;
                    }
                    acc(*x, gx);
                }
                Op::Neg(x) => {
                    let mut gx = g;
                    for v in gx.data.iter_mut() {
                        *v = -*v;
                    }
                    acc(*x, gx);
                }
                Op::SumAll(x) => {
                    let xv = &nodes[*x].value;
                    acc(*x, Tensor::filled(xv.rows, xv.cols, g.item()));
                }
                Op::MeanAll(x) => {
                    let xv = &nodes[*x].value;
                    acc(*x, Tensor::filled(xv.rows, xv.cols, g.item() / xv.numel() as f64));
                }
                Op::GatherRows { table, ids } => {
                    let tv = &nodes[*table].value;
                    let mut gt = Tensor::zeros(tv.rows, tv.cols);
                    for (i, &id) in ids.iter().enumerate() {
                        for j in 0..tv.cols {
                            gt.data[id * tv.cols + j] += g.at(i, j);
                        }
                    }
                    acc(*table, gt);
                }
                Op::SelectRows { x, idx } => {
                    let xv = &nodes[*x].value;
                    let mut gx = Tensor::zeros(xv.rows, xv.cols);
                    for (o, &i) in idx.iter().enumerate() {
                        for j in 0..xv.cols {
                            gx.data[i * xv.cols + j] += g.at(o, j);
                        }
                    }
                    acc(*x, gx);
                }
                Op::SliceCols { x, start, len } => {
                    let xv = &nodes[*x].value;
                    let mut gx = Tensor::zeros(xv.rows, xv.cols);
                    for i in 0..xv.rows {
                        for j in 0..*len {
                            gx.data[i * xv.cols + start + j] = g.at(i, j);
                        }
                    }
                    acc(*x, gx);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let pv = &nodes[*p].value;
                        let mut gp = Tensor::zeros(pv.rows, pv.cols);
                        for i in 0..pv.rows {
                            for j in 0..pv.cols {
                                gp.data[i * pv.cols + j] = g.at(i, off + j);
                            }
                        }
                        off += pv.cols;
                        acc(*p, gp);
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let pv = &nodes[*p].value;
                        let mut gp = Tensor::zeros(pv.rows, pv.cols);
                        gp.data.copy_from_slice(&g.data[off * pv.cols..(off + pv.rows) * pv.cols]);
                        off += pv.rows;
                        acc(*p, gp);
                    }
                }
                Op::L2NormalizeRows(x) => {
                    let xv = &nodes[*x].value;
                    let y = &node.value;
                    let mut gx = Tensor::zeros(xv.rows, xv.cols);
                    for i in 0..xv.rows {
                        let norm = xv.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
                        let yr = y.row(i);
                        let gr = g.row(i);
                        let dot: f64 = gr.iter().zip(yr.iter()).map(|(a, b)| a * b).sum();
                        for j in 0..xv.cols {
                            gx.data[i * xv.cols + j] = (gr[j] - yr[j] * dot) / norm;
                        }
                    }
                    acc(*x, gx);
                }
                Op::Huber { a, b, gamma } => {
                    let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                    let mut ga = g.clone();
                    let mut gb = g;
                    for k in 0..av.data.len() {
                        let d = av.data[k] - bv.data[k];
                        let dd = if d.abs() < *gamma { d } else { d.signum() };
                        ga.data[k] *= dd;
                        gb.data[k] *= -dd;
                    }
                    acc(*a, ga);
                    acc(*b, gb);
                }
                Op::SelectEntries { x, idx } => {
                    let xv = &nodes[*x].value;
                    let mut gx = Tensor::zeros(xv.rows, xv.cols);
                    for (o, &(i, j)) in idx.iter().enumerate() {
                        gx.data[i * xv.cols + j] += g.data[o];
                    }
                    acc(*x, gx);
                }
                Op::MulScalar { x, s } => {
                    let (xv, sv) = (&nodes[*x].value, &nodes[*s].value);
                    let c = sv.item();
                    let mut gx = g.clone();
                    for v in gx.data.iter_mut() {
                        *v *= c;
                    }
                    let gs: f64 = g.data.iter().zip(xv.data.iter()).map(|(a, b)| a * b).sum();
                    acc(*x, gx);
                    acc(*s, Tensor::scalar(gs));
                }
            }
        }
        Grads { by_node: grads }
    }
}

/// Central finite-difference gradient of a scalar function, the test oracle
/// for every analytic backward rule.
pub fn finite_diff_grad(f: impl Fn(&Tensor) -> f64, x: &Tensor, eps: f64) -> Tensor {
    let mut grad = Tensor::zeros(x.rows(), x.cols());
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data[i];
        probe.data[i] = orig + eps;
        let fp = f(&probe);
        probe.data[i] = orig - eps;
        let fm = f(&probe);
        probe.data[i] = orig;
        assert!(fp.is_finite() && fm.is_finite(), "finite_diff_grad: non-finite function value");
        grad.data[i] = (fp - fm) / (2.0 * eps);
    }
    grad
}

/// Max elementwise relative error |a - b| / (|b| + 1e-8).
pub fn max_rel_err(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data
        .iter()
        .zip(b.data.iter())
        .map(|(x, y)| (x - y).abs() / (y.abs() + 1e-8))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::DetRng;
    use proptest::prelude::*;

    fn rand_tensor(rng: &mut DetRng, r: usize, c: usize) -> Tensor {
        Tensor::from_vec(r, c, (0..r * c).map(|_| rng.normal(0.0, 1.0)).collect())
    }

    #[test]
    fn matmul_identity() {
        let t = Tape::new();
        let a = t.constant(Tensor::eye(2));
        let b = t.constant(Tensor::from_vec(2, 2, vec![7.0, 1.0, 2.0, 5.0]));
        let c = t.matmul(a, b);
        assert_eq!(*t.value(c), *t.value(b));
    }

    #[test]
    fn matmul_hand_case() {
        let t = Tape::new();
        let a = t.constant(Tensor::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]));
        let b = t.constant(Tensor::from_vec(2, 1, vec![5.0, 6.0]));
        let c = t.matmul(a, b);
        assert_eq!(t.value(c).data(), &[17.0, 39.0]);
    }

    #[test]
    #[should_panic(expected = "inner extents differ")]
    fn matmul_shape_mismatch() {
        let t = Tape::new();
        let a = t.constant(Tensor::zeros(2, 3));
        let b = t.constant(Tensor::zeros(2, 3));
        t.matmul(a, b);
    }

    #[test]
    fn matmul_grad_matches_finite_diff() {
        let mut rng = DetRng::new(7);
        let a0 = rand_tensor(&mut rng, 3, 3);
        let b0 = rand_tensor(&mut rng, 3, 3);
        let analytic = {
            let t = Tape::new();
            let a = t.leaf(a0.clone(), true);
            let b = t.constant(b0.clone());
            let root = t.sum_all(t.matmul(a, b));
            let g = t.backward(root);
            g.get(a).unwrap().clone()
        };
        let fd = finite_diff_grad(
            |x| {
                let t = Tape::new();
                let a = t.constant(x.clone());
                let b = t.constant(b0.clone());
                t.scalar_value(t.sum_all(t.matmul(a, b)))
            },
            &a0,
            1e-5,
        );
        assert!(max_rel_err(&analytic, &fd) < 1e-6);
    }

    #[test]
    fn matmul_associativity() {
        let mut rng = DetRng::new(11);
        let a = rand_tensor(&mut rng, 4, 4);
        let b = rand_tensor(&mut rng, 4, 4);
        let c = rand_tensor(&mut rng, 4, 4);
        let left = matmul_vals(&matmul_vals(&a, &b), &c);
        let right = matmul_vals(&a, &matmul_vals(&b, &c));
        for (x, y) in left.data().iter().zip(right.data().iter()) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn softmax_symmetry() {
        let t = Tape::new();
        let x = t.constant(Tensor::row_vec(vec![3.3; 4]));
        let y = t.softmax_rows(x);
        for v in t.value(y).data() {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_closed_form() {
        let t = Tape::new();
        let x = t.constant(Tensor::row_vec(vec![0.0, 2.0f64.ln()]));
        let y = t.softmax_rows(x);
        let v = t.tensor(y);
        assert!((v.at(0, 0) - 1.0 / 3.0).abs() < 1e-12);
        assert!((v.at(0, 1) - 2.0 / 3.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn softmax_shift_invariance(vals in prop::collection::vec(-20.0f64..20.0, 2..8), c in -50.0f64..50.0) {
            let t = Tape::new();
            let x = t.constant(Tensor::row_vec(vals.clone()));
            let xs = t.constant(Tensor::row_vec(vals.iter().map(|v| v + c).collect()));
            let a = t.tensor(t.softmax_rows(x));
            let b = t.tensor(t.softmax_rows(xs));
            for (p, q) in a.data().iter().zip(b.data().iter()) {
                prop_assert!((p - q).abs() < 1e-12);
            }
        }

        #[test]
        // spread kept under ~36 log-units so no entry rounds to exactly 0 or 1
        fn softmax_rows_sum_to_one(vals in prop::collection::vec(-15.0f64..15.0, 3..12)) {
            let t = Tape::new();
            let x = t.constant(Tensor::row_vec(vals));
            let y = t.tensor(t.softmax_rows(x));
            let sum: f64 = y.data().iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            for v in y.data() {
                prop_assert!(*v > 0.0 && *v < 1.0);
            }
        }
    }

    #[test]
    fn layer_norm_constant_input() {
        let t = Tape::new();
        let x = t.constant(Tensor::row_vec(vec![5.0; 6]));
        let g = t.constant(Tensor::row_vec(vec![1.0; 6]));
        let b = t.constant(Tensor::row_vec(vec![0.0; 6]));
        let y = t.layer_norm_rows(x, g, b, 1e-5);
        for v in t.value(y).data() {
            assert!(v.abs() < 1e-9);
        }
    }

    #[test]
    fn layer_norm_two_point() {
        let t = Tape::new();
        let x = t.constant(Tensor::row_vec(vec![1.0, 3.0]));
        let g = t.constant(Tensor::row_vec(vec![1.0, 1.0]));
        let b = t.constant(Tensor::row_vec(vec![0.0, 0.0]));
        let y = t.layer_norm_rows(x, g, b, 0.0);
        let v = t.tensor(y);
        assert!((v.at(0, 0) + 1.0).abs() < 1e-12);
        assert!((v.at(0, 1) - 1.0).abs() < 1e-12);
    }

    #[test]
    #[should_panic(expected = "at least 2 features")]
    fn layer_norm_rejects_single_feature() {
        let t = Tape::new();
        let x = t.constant(Tensor::row_vec(vec![1.0]));
        let g = t.constant(Tensor::row_vec(vec![1.0]));
        let b = t.constant(Tensor::row_vec(vec![0.0]));
        t.layer_norm_rows(x, g, b, 1e-5);
    }

    #[test]
    fn layer_norm_grad_matches_finite_diff() {
        let mut rng = DetRng::new(3);
        let x0 = rand_tensor(&mut rng, 1, 8);
        let g0 = rand_tensor(&mut rng, 1, 8);
        let b0 = rand_tensor(&mut rng, 1, 8);
        let analytic = {
            let t = Tape::new();
            let x = t.leaf(x0.clone(), true);
            let g = t.constant(g0.clone());
            let b = t.constant(b0.clone());
            // nontrivial downstream: sum of squares
            let y = t.layer_norm_rows(x, g, b, 1e-5);
            let root = t.sum_all(t.mul(y, y));
            let gr = t.backward(root);
            gr.get(x).unwrap().clone()
        };
        let fd = finite_diff_grad(
            |x| {
                let t = Tape::new();
                let xv = t.constant(x.clone());
                let g = t.constant(g0.clone());
                let b = t.constant(b0.clone());
                let y = t.layer_norm_rows(xv, g, b, 1e-5);
                t.scalar_value(t.sum_all(t.mul(y, y)))
            },
            &x0,
            1e-5,
        );
        assert!(max_rel_err(&analytic, &fd) < 1e-5);
    }

    #[test]
    fn backward_sum_of_leaf_is_ones() {
        let t = Tape::new();
        let x = t.leaf(Tensor::from_vec(2, 2, vec![1.0, -2.0, 0.5, 9.0]), true);
        let g = t.backward(t.sum_all(x));
        assert_eq!(g.get(x).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn backward_half_norm_squared_is_x() {
        let t = Tape::new();
        let x0 = Tensor::row_vec(vec![1.5, -0.25, 2.0]);
        let x = t.leaf(x0.clone(), true);
        let root = t.scale(t.sum_all(t.mul(x, x)), 0.5);
        let g = t.backward(root);
        assert_eq!(g.get(x).unwrap(), &x0);
    }

    #[test]
    #[should_panic(expected = "root must be scalar")]
    fn backward_rejects_nonscalar_root() {
        let t = Tape::new();
        let x = t.leaf(Tensor::zeros(2, 2), true);
        t.backward(x);
    }

    #[test]
    fn finite_diff_trivials() {
        let x = Tensor::row_vec(vec![1.0, 2.0]);
        let ones = finite_diff_grad(|x| x.data().iter().sum(), &x, 1e-5);
        for v in ones.data() {
            assert!((v - 1.0).abs() < 1e-8);
        }
        let sq = finite_diff_grad(|x| x.data().iter().map(|v| v * v).sum(), &x, 1e-5);
        assert!((sq.at(0, 0) - 2.0).abs() < 1e-8);
        assert!((sq.at(0, 1) - 4.0).abs() < 1e-8);
    }

    /// Every differentiable op, composed into a scalar, against the central-difference oracle.
    #[test]
    fn all_ops_match_finite_diff() {
        for seed in 0..100u64 {
            let mut rng = DetRng::new(seed);
            let x0 = rand_tensor(&mut rng, 4, 6);
            let w0 = rand_tensor(&mut rng, 6, 6);
            let g0 = rand_tensor(&mut rng, 1, 6);
            let b0 = rand_tensor(&mut rng, 1, 6);
            let s0 = Tensor::scalar(rng.normal(0.0, 0.5));
            let f = |x: &Tensor, track: bool| -> (f64, Option<Tensor>) {
                let t = Tape::new();
                let xv = t.leaf(x.clone(), track);
                let w = t.constant(w0.clone());
                let gn = t.constant(g0.clone());
                let bn = t.constant(b0.clone());
                let s = t.constant(s0.clone());
                let h = t.matmul(xv, w);
                let h = t.add_row(h, bn);
                let h = t.layer_norm_rows(h, gn, bn, 1e-5);
                let h = t.gelu(h);
                let sm = t.softmax_rows(h);
                let ls = t.log_softmax_rows(h);
                let picked = t.select_entries(ls, &[(0, 1), (2, 3)]);
                let sl = t.slice_cols(h, 1, 3);
                let cat = t.concat_cols(&[sl, sl]);
                let rows = t.select_rows(cat, &[0, 2, 2]);
                let nrm = t.l2_normalize_rows(rows);
                let hb = t.huber(nrm, t.constant(Tensor::filled(3, 6, 0.3)), 1.0);
                let tr = t.transpose(sm);
                let mm = t.matmul(sm, tr);
                let scaled = t.mul_scalar(mm, t.exp(s));
                let parts = [
                    t.sum_all(scaled),
                    t.mean_all(hb),
                    t.sum_all(picked),
                    t.mean_all(t.neg(sm)),
                ];
                let mut root = parts[0];
                for p in &parts[1..] {
                    root = t.add(root, *p);
                }
                let val = t.scalar_value(root);
                if track {
                    let g = t.backward(root);
                    (val, Some(g.get(xv).unwrap().clone()))
                } else {
                    (val, None)
                }
            };
            let (_, analytic) = f(&x0, true);
            let fd = finite_diff_grad(|x| f(x, false).0, &x0, 1e-5);
            let err = max_rel_err(analytic.as_ref().unwrap(), &fd);
            assert!(err < 1e-4, "seed {seed}: rel err {err}");
        }
    }

    #[test]
    fn identical_seed_bit_identical() {
        let run = |seed: u64| {
            let mut rng = DetRng::new(seed);
            let x0 = rand_tensor(&mut rng, 5, 5);
            let t = Tape::new();
            let x = t.leaf(x0, true);
            let y = t.softmax_rows(t.matmul(x, t.transpose(x)));
            let root = t.sum_all(t.mul(y, y));
            let g = t.backward(root);
            (t.scalar_value(root), g.get(x).unwrap().clone())
        };
        let (v1, g1) = run(42);
        let (v2, g2) = run(42);
        assert_eq!(v1.to_bits(), v2.to_bits());
        assert_eq!(g1, g2);
    }

    #[test]
    fn gather_rows_and_grad() {
        let t = Tape::new();
        let table = t.leaf(Tensor::from_vec(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]), true);
        let out = t.gather_rows(table, &[2, 0, 2]);
        assert_eq!(t.value(out).data(), &[5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
        let g = t.backward(t.sum_all(out));
        // row 2 gathered twice, row 1 never
        assert_eq!(g.get(table).unwrap().data(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
    }
}
