//! Tape-based reverse-mode automatic differentiation over [`Matrix`] values.
//!
//! Every operation evaluates eagerly and appends a node to the [`Tape`]. A
//! backward pass walks the tape in reverse, seeded with upstream gradients for
//! any set of output nodes, which lets loss functions live outside the tape:
//! they hand back `dL/d(output)` and the tape propagates it to the parameters.
//!
//! The op set is the one the backbone needs: dense and tower-grouped matmuls,
//! RMS norm, SiLU, masked softmax, pairwise rotations (rotary positions), row
//! gathers/scatters and column slicing for attention heads.

use alloc::rc::Rc;
use alloc::vec;
use alloc::vec::Vec;

use crate::math;
use crate::tensor::{matmul_at_into, matmul_bt_into, matmul_into, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Rows of a matrix handled by one weight.
pub type RowGroup = (Rc<Vec<usize>>, Var);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(usize),
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Mul(Var, Var),
    Silu(Var),
    GroupedMatMul {
        x: Var,
        groups: Vec<RowGroup>,
    },
    GroupedRmsNorm {
        x: Var,
        groups: Vec<RowGroup>,
        inv_rms: Vec<f64>,
    },
    MaskedSoftmax {
        x: Var,
    },
    Rotate {
        x: Var,
        cos: Rc<Vec<f64>>,
        sin: Rc<Vec<f64>>,
        head_dim: usize,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    SelectRows {
        x: Var,
        idx: Rc<Vec<usize>>,
    },
    Assemble(Vec<(Var, Rc<Vec<usize>>)>),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    BroadcastRows(Var),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Matrix> {
        self.grads[v.0].as_ref()
    }
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

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn req(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A value that gradients are not propagated into.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf input whose gradient is tracked.
    pub fn input(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A trainable parameter identified by `id` in its store.
    pub fn param(&mut self, id: usize, value: Matrix) -> Var {
        self.push(value, Op::Param(id), true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.cols, vb.rows, "matmul inner dimension");
        let mut out = Matrix::zeros(va.rows, vb.cols);
        matmul_into(&va.data, &vb.data, &mut out.data, va.rows, va.cols, vb.cols);
        let r = self.req(a) || self.req(b);
        self.push(out, Op::MatMul(a, b), r)
    }

    /// `a · bᵀ`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.cols, vb.cols, "matmul_bt inner dimension");
        let mut out = Matrix::zeros(va.rows, vb.rows);
        matmul_bt_into(&va.data, &vb.data, &mut out.data, va.rows, va.cols, vb.rows);
        let r = self.req(a) || self.req(b);
        self.push(out, Op::MatMulBt(a, b), r)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        assert_eq!(out.shape(), self.value(b).shape(), "add shapes");
        out.add_assign(self.value(b));
        let r = self.req(a) || self.req(b);
        self.push(out, Op::Add(a, b), r)
    }

    /// Adds the single-row `row` to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let mut out = self.value(a).clone();
        let rv = self.value(row);
        assert_eq!((1, out.cols), rv.shape(), "add_row shapes");
        for r in 0..out.rows {
            for (o, b) in out.row_mut(r).iter_mut().zip(&rv.data) {
                *o += b;
            }
        }
        let req = self.req(a) || self.req(row);
        self.push(out, Op::AddRow(a, row), req)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let mut out = self.value(a).clone();
        out.scale(s);
        let r = self.req(a);
        self.push(out, Op::Scale(a, s), r)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        assert_eq!(out.shape(), self.value(b).shape(), "mul shapes");
        for (o, b) in out.data.iter_mut().zip(&self.value(b).data) {
            *o *= b;
        }
        let r = self.req(a) || self.req(b);
        self.push(out, Op::Mul(a, b), r)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for o in &mut out.data {
            *o *= sigmoid(*o);
        }
        let r = self.req(a);
        self.push(out, Op::Silu(a), r)
    }

    /// Row-grouped matmul: rows listed in each group are multiplied by that
    /// group's weight. Rows outside every group come out as zeros.
    pub fn grouped_matmul(&mut self, x: Var, groups: Vec<RowGroup>) -> Var {
        let xv = self.value(x);
        let out_cols = self.value(groups[0].1).cols;
        let mut out = Matrix::zeros(xv.rows, out_cols);
        for (rows, w) in &groups {
            let wv = self.value(*w);
            assert_eq!((xv.cols, out_cols), wv.shape(), "grouped_matmul weight");
            for &r in rows.iter() {
                matmul_into(xv.row(r), &wv.data, out.row_mut(r), 1, xv.cols, out_cols);
            }
        }
        let req = self.req(x) || groups.iter().any(|g| self.req(g.1));
        self.push(out, Op::GroupedMatMul { x, groups }, req)
    }

    /// Row-wise RMS normalization with a per-group gain row.
    pub fn grouped_rms_norm(&mut self, x: Var, groups: Vec<RowGroup>, eps: f64) -> Var {
        let xv = self.value(x);
        let mut out = Matrix::zeros(xv.rows, xv.cols);
        let mut inv_rms = vec![0.0; xv.rows];
        for (rows, w) in &groups {
            let wv = self.value(*w);
            assert_eq!((1, xv.cols), wv.shape(), "rms norm gain");
            for &r in rows.iter() {
                let row = xv.row(r);
                let ms = row.iter().map(|v| v * v).sum::<f64>() / xv.cols as f64;
                let inv = 1.0 / math::sqrt(ms + eps);
                inv_rms[r] = inv;
                for ((o, v), g) in out.row_mut(r).iter_mut().zip(row).zip(&wv.data) {
                    *o = v * inv * g;
                }
            }
        }
        let req = self.req(x) || groups.iter().any(|g| self.req(g.1));
        self.push(out, Op::GroupedRmsNorm { x, groups, inv_rms }, req)
    }

    /// Row softmax restricted to entries where `mask` is true; masked entries
    /// are exactly zero. A row with no allowed entry yields all zeros.
    pub fn masked_softmax(&mut self, x: Var, mask: Rc<Vec<bool>>) -> Var {
        let xv = self.value(x);
        assert_eq!(mask.len(), xv.len(), "mask shape");
        let mut out = Matrix::zeros(xv.rows, xv.cols);
        for r in 0..xv.rows {
            let row = xv.row(r);
            let m = &mask[r * xv.cols..(r + 1) * xv.cols];
            let max = row
                .iter()
                .zip(m)
                .filter(|(_, &ok)| ok)
                .map(|(v, _)| *v)
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                continue;
            }
            let o = out.row_mut(r);
            let mut sum = 0.0;
            for c in 0..row.len() {
                if m[c] {
                    o[c] = math::exp(row[c] - max);
                    sum += o[c];
                }
            }
            for v in o.iter_mut() {
                *v /= sum;
            }
        }
        let req = self.req(x);
        self.push(out, Op::MaskedSoftmax { x }, req)
    }

    /// Rotates consecutive column pairs inside each head. `cos`/`sin` hold
    /// `head_dim / 2` angles per row, shared by all heads.
    pub fn rotate_pairs(&mut self, x: Var, cos: Rc<Vec<f64>>, sin: Rc<Vec<f64>>, head_dim: usize) -> Var {
        let xv = self.value(x);
        let half = head_dim / 2;
        assert_eq!(cos.len(), xv.rows * half, "rotation table");
        let mut out = Matrix::zeros(xv.rows, xv.cols);
        for r in 0..xv.rows {
            let (cr, sr) = (&cos[r * half..(r + 1) * half], &sin[r * half..(r + 1) * half]);
            let (src, dst) = (xv.row(r), out.row_mut(r));
            for h in 0..xv.cols / head_dim {
                for p in 0..half {
                    let i = h * head_dim + 2 * p;
                    let (a, b) = (src[i], src[i + 1]);
                    dst[i] = a * cr[p] - b * sr[p];
                    dst[i + 1] = a * sr[p] + b * cr[p];
                }
            }
        }
        let req = self.req(x);
        self.push(out, Op::Rotate { x, cos, sin, head_dim }, req)
    }

    /// Embedding lookup: row `ids[i]` of `table` becomes row `i`.
    pub fn gather(&mut self, table: Var, ids: Vec<usize>) -> Var {
        let out = self.value(table).select_rows(&ids);
        let req = self.req(table);
        self.push(out, Op::Gather { table, ids }, req)
    }

    pub fn select_rows(&mut self, x: Var, idx: Rc<Vec<usize>>) -> Var {
        let out = self.value(x).select_rows(&idx);
        let req = self.req(x);
        self.push(out, Op::SelectRows { x, idx }, req)
    }

    /// Scatters each part's rows to the listed destination rows of a new
    /// `rows`-row matrix. Destinations not covered stay zero.
    pub fn assemble(&mut self, rows: usize, parts: Vec<(Var, Rc<Vec<usize>>)>) -> Var {
        let cols = self.value(parts[0].0).cols;
        let mut out = Matrix::zeros(rows, cols);
        for (v, idx) in &parts {
            let pv = self.value(*v);
            assert_eq!(pv.rows, idx.len(), "assemble part rows");
            for (src, &dst) in idx.iter().enumerate() {
                out.row_mut(dst).copy_from_slice(pv.row(src));
            }
        }
        let req = parts.iter().any(|p| self.req(p.0));
        self.push(out, Op::Assemble(parts), req)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        let mut out = Matrix::zeros(xv.rows, len);
        for r in 0..xv.rows {
            out.row_mut(r).copy_from_slice(&xv.row(r)[start..start + len]);
        }
        let req = self.req(x);
        self.push(out, Op::SliceCols { x, start }, req)
    }

    pub fn concat_cols(&mut self, parts: Vec<Var>) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|p| self.value(*p).cols).sum();
        let mut out = Matrix::zeros(rows, cols);
        let mut off = 0;
        for p in &parts {
            let pv = self.value(*p);
            for r in 0..rows {
                out.row_mut(r)[off..off + pv.cols].copy_from_slice(pv.row(r));
            }
            off += pv.cols;
        }
        let req = parts.iter().any(|p| self.req(*p));
        self.push(out, Op::ConcatCols(parts), req)
    }

    pub fn concat_rows(&mut self, parts: Vec<Var>) -> Var {
        let values: Vec<Matrix> = parts.iter().map(|p| self.value(*p).clone()).collect();
        let out = Matrix::vstack(&values).expect("concat_rows column mismatch");
        let req = parts.iter().any(|p| self.req(*p));
        self.push(out, Op::ConcatRows(parts), req)
    }

    /// Repeats a single-row value `rows` times.
    pub fn broadcast_rows(&mut self, x: Var, rows: usize) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.rows, 1, "broadcast_rows expects one row");
        let mut out = Matrix::zeros(rows, xv.cols);
        for r in 0..rows {
            out.row_mut(r).copy_from_slice(&xv.data);
        }
        let req = self.req(x);
        self.push(out, Op::BroadcastRows(x), req)
    }

    /// Propagates the seeded upstream gradients back through the tape.
    pub fn backward(&self, seeds: &[(Var, Matrix)]) -> Gradients {
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut start = 0;
        for (v, g) in seeds {
            assert_eq!(self.value(*v).shape(), g.shape(), "seed shape");
            accumulate(&mut grads, *v, g);
            start = start.max(v.0 + 1);
        }
        for i in (0..start).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(&node.op, &node.value, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate(&self, op: &Op, out: &Matrix, g: &Matrix, grads: &mut [Option<Matrix>]) {
        match op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.req(*a) {
                    let mut ga = Matrix::zeros(va.rows, va.cols);
                    matmul_bt_into(&g.data, &vb.data, &mut ga.data, g.rows, g.cols, vb.rows);
                    accumulate_owned(grads, *a, ga);
                }
                if self.req(*b) {
                    let mut gb = Matrix::zeros(vb.rows, vb.cols);
                    matmul_at_into(&va.data, &g.data, &mut gb.data, va.rows, va.cols, g.cols);
                    accumulate_owned(grads, *b, gb);
                }
            }
            Op::MatMulBt(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.req(*a) {
                    let mut ga = Matrix::zeros(va.rows, va.cols);
                    matmul_into(&g.data, &vb.data, &mut ga.data, g.rows, g.cols, vb.cols);
                    accumulate_owned(grads, *a, ga);
                }
                if self.req(*b) {
                    let mut gb = Matrix::zeros(vb.rows, vb.cols);
                    matmul_at_into(&g.data, &va.data, &mut gb.data, g.rows, g.cols, va.cols);
                    accumulate_owned(grads, *b, gb);
                }
            }
            Op::Add(a, b) => {
                if self.req(*a) {
                    accumulate(grads, *a, g);
                }
                if self.req(*b) {
                    accumulate(grads, *b, g);
                }
            }
            Op::AddRow(a, row) => {
                if self.req(*a) {
                    accumulate(grads, *a, g);
                }
                if self.req(*row) {
                    let mut gr = Matrix::zeros(1, g.cols);
                    for r in 0..g.rows {
                        for (o, v) in gr.data.iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    accumulate_owned(grads, *row, gr);
                }
            }
            Op::Scale(a, s) => {
                let mut ga = g.clone();
                ga.scale(*s);
                accumulate_owned(grads, *a, ga);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.req(*a) {
                    let mut ga = g.clone();
                    for (o, v) in ga.data.iter_mut().zip(&vb.data) {
                        *o *= v;
                    }
                    accumulate_owned(grads, *a, ga);
                }
                if self.req(*b) {
                    let mut gb = g.clone();
                    for (o, v) in gb.data.iter_mut().zip(&va.data) {
                        *o *= v;
                    }
                    accumulate_owned(grads, *b, gb);
                }
            }
            Op::Silu(a) => {
                let va = self.value(*a);
                let mut ga = g.clone();
                for (o, &x) in ga.data.iter_mut().zip(&va.data) {
                    let s = sigmoid(x);
                    *o *= s * (1.0 + x * (1.0 - s));
                }
                accumulate_owned(grads, *a, ga);
            }
            Op::GroupedMatMul { x, groups } => {
                let xv = self.value(*x);
                let mut gx = self.req(*x).then(|| Matrix::zeros(xv.rows, xv.cols));
                for (rows, w) in groups {
                    let wv = self.value(*w);
                    let mut gw = self.req(*w).then(|| Matrix::zeros(wv.rows, wv.cols));
                    for &r in rows.iter() {
                        if let Some(gx) = gx.as_mut() {
                            matmul_bt_into(g.row(r), &wv.data, gx.row_mut(r), 1, g.cols, wv.rows);
                        }
                        if let Some(gw) = gw.as_mut() {
                            matmul_at_into(xv.row(r), g.row(r), &mut gw.data, 1, xv.cols, g.cols);
                        }
                    }
                    if let Some(gw) = gw {
                        accumulate_owned(grads, *w, gw);
                    }
                }
                if let Some(gx) = gx {
                    accumulate_owned(grads, *x, gx);
                }
            }
            Op::GroupedRmsNorm { x, groups, inv_rms } => {
                let xv = self.value(*x);
                let n = xv.cols as f64;
                let mut gx = self.req(*x).then(|| Matrix::zeros(xv.rows, xv.cols));
                for (rows, w) in groups {
                    let wv = self.value(*w);
                    let mut gw = self.req(*w).then(|| Matrix::zeros(1, wv.cols));
                    for &r in rows.iter() {
                        let (xr, gr, inv) = (xv.row(r), g.row(r), inv_rms[r]);
                        if let Some(gw) = gw.as_mut() {
                            for c in 0..xv.cols {
                                gw.data[c] += gr[c] * xr[c] * inv;
                            }
                        }
                        if let Some(gx) = gx.as_mut() {
                            // y = x·inv·w, inv = (mean(x²)+eps)^(-1/2)
                            let dot: f64 = (0..xv.cols).map(|c| gr[c] * wv.data[c] * xr[c]).sum();
                            let k = inv * inv * inv * dot / n;
                            let dst = gx.row_mut(r);
                            for c in 0..xv.cols {
                                dst[c] += gr[c] * wv.data[c] * inv - xr[c] * k;
                            }
                        }
                    }
                    if let Some(gw) = gw {
                        accumulate_owned(grads, *w, gw);
                    }
                }
                if let Some(gx) = gx {
                    accumulate_owned(grads, *x, gx);
                }
            }
            Op::MaskedSoftmax { x } => {
                let mut gx = Matrix::zeros(out.rows, out.cols);
                for r in 0..out.rows {
                    let (p, gr) = (out.row(r), g.row(r));
                    let dot: f64 = p.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for (o, (pv, gv)) in gx.row_mut(r).iter_mut().zip(p.iter().zip(gr)) {
                        *o = pv * (gv - dot);
                    }
                }
                accumulate_owned(grads, *x, gx);
            }
            Op::Rotate { x, cos, sin, head_dim } => {
                let half = head_dim / 2;
                let mut gx = Matrix::zeros(out.rows, out.cols);
                for r in 0..out.rows {
                    let (cr, sr) = (&cos[r * half..(r + 1) * half], &sin[r * half..(r + 1) * half]);
                    let (src, dst) = (g.row(r), gx.row_mut(r));
                    for h in 0..out.cols / head_dim {
                        for p in 0..half {
                            let i = h * head_dim + 2 * p;
                            let (a, b) = (src[i], src[i + 1]);
                            dst[i] = a * cr[p] + b * sr[p];
                            dst[i + 1] = -a * sr[p] + b * cr[p];
                        }
                    }
                }
                accumulate_owned(grads, *x, gx);
            }
            Op::Gather { table, ids } => {
                let tv = self.value(*table);
                let mut gt = Matrix::zeros(tv.rows, tv.cols);
                for (src, &dst) in ids.iter().enumerate() {
                    for (o, v) in gt.row_mut(dst).iter_mut().zip(g.row(src)) {
                        *o += v;
                    }
                }
                accumulate_owned(grads, *table, gt);
            }
            Op::SelectRows { x, idx } => {
                let xv = self.value(*x);
                let mut gx = Matrix::zeros(xv.rows, xv.cols);
                for (src, &dst) in idx.iter().enumerate() {
                    for (o, v) in gx.row_mut(dst).iter_mut().zip(g.row(src)) {
                        *o += v;
                    }
                }
                accumulate_owned(grads, *x, gx);
            }
            Op::Assemble(parts) => {
                for (v, idx) in parts {
                    if self.req(*v) {
                        accumulate_owned(grads, *v, g.select_rows(idx));
                    }
                }
            }
            Op::SliceCols { x, start } => {
                let xv = self.value(*x);
                let mut gx = Matrix::zeros(xv.rows, xv.cols);
                for r in 0..xv.rows {
                    gx.row_mut(r)[*start..*start + g.cols].copy_from_slice(g.row(r));
                }
                accumulate_owned(grads, *x, gx);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for p in parts {
                    let cols = self.value(*p).cols;
                    if self.req(*p) {
                        let mut gp = Matrix::zeros(g.rows, cols);
                        for r in 0..g.rows {
                            gp.row_mut(r).copy_from_slice(&g.row(r)[off..off + cols]);
                        }
                        accumulate_owned(grads, *p, gp);
                    }
                    off += cols;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let rows = self.value(*p).rows;
                    if self.req(*p) {
                        let gp = Matrix::from_vec(rows, g.cols, g.data[off * g.cols..(off + rows) * g.cols].to_vec())
                            .expect("concat_rows gradient");
                        accumulate_owned(grads, *p, gp);
                    }
                    off += rows;
                }
            }
            Op::BroadcastRows(x) => {
                let mut gx = Matrix::zeros(1, g.cols);
                for r in 0..g.rows {
                    for (o, v) in gx.data.iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
                accumulate_owned(grads, *x, gx);
            }
        }
    }

    /// Parameter gradients as `(param id, gradient)` pairs. A parameter that
    /// appears in several nodes has its contributions summed.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<(usize, Matrix)> {
        let mut out: Vec<(usize, Matrix)> = Vec::new();
        for (i, node) in self.nodes.iter().enumerate() {
            let Op::Param(id) = node.op else { continue };
            let Some(g) = grads.grads[i].as_ref() else { continue };
            match out.iter_mut().find(|(pid, _)| *pid == id) {
                Some((_, acc)) => acc.add_assign(g),
                None => out.push((id, g.clone())),
            }
        }
        out
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + math::exp(-x))
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, g: &Matrix) {
    match grads[v.0].as_mut() {
        Some(acc) => acc.add_assign(g),
        None => grads[v.0] = Some(g.clone()),
    }
}

fn accumulate_owned(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match grads[v.0].as_mut() {
        Some(acc) => acc.add_assign(&g),
        None => grads[v.0] = Some(g),
    }
}
