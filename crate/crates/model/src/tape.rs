//! Reverse-mode differentiation over a recorded sequence of matrix ops.

use crate::params::ParamStore;
use crate::tensor::{matmul, Mat};

pub type NodeId = usize;

const NORM_EPS: f64 = 1e-6;

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Param(usize),
    MatMul(NodeId, NodeId),
    /// `a * b^T`
    MatMulT(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    MulRow(NodeId, NodeId),
    Scale(NodeId, f64),
    Silu(NodeId),
    RmsNorm(NodeId),
    Softmax(NodeId),
    Gather { table: NodeId, ids: Vec<usize> },
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    SliceCols { input: NodeId, start: usize },
    ShiftPool { input: NodeId, k: usize },
    RepeatUp { input: NodeId, k: usize },
    /// Sum over rows of `log_softmax(row)[target]`.
    LogSoftmaxPick { input: NodeId, targets: Vec<Option<usize>> },
}

struct Node {
    op: Op,
    /// `None` for parameters, which are read from the store.
    value: Option<Mat>,
    needs_grad: bool,
}

/// Records a forward computation against a parameter store.
pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_nodes: Vec<Option<NodeId>>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_nodes: vec![None; params.len()],
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn value(&self, id: NodeId) -> &Mat {
        match (&self.nodes[id].value, &self.nodes[id].op) {
            (Some(v), _) => v,
            (None, Op::Param(p)) => self.params.tensor(*p),
            _ => unreachable!("node without value"),
        }
    }

    fn push(&mut self, op: Op, value: Mat, inputs: &[NodeId]) -> NodeId {
        let needs_grad = inputs.iter().any(|&i| self.nodes[i].needs_grad);
        self.nodes.push(Node {
            op,
            value: Some(value),
            needs_grad,
        });
        self.nodes.len() - 1
    }

    pub fn constant(&mut self, value: Mat) -> NodeId {
        self.push(Op::Constant, value, &[])
    }

    pub fn param(&mut self, name: &str) -> NodeId {
        let p = self.params.id(name);
        if let Some(id) = self.param_nodes[p] {
            return id;
        }
        self.nodes.push(Node {
            op: Op::Param(p),
            value: None,
            needs_grad: true,
        });
        let id = self.nodes.len() - 1;
        self.param_nodes[p] = Some(id);
        id
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = matmul(self.value(a), false, self.value(b), false);
        self.push(Op::MatMul(a, b), v, &[a, b])
    }

    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = matmul(self.value(a), false, self.value(b), true);
        self.push(Op::MatMulT(a, b), v, &[a, b])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        self.push(Op::Add(a, b), v, &[a, b])
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let r = self.value(row);
        assert_eq!((r.rows, r.cols), (1, self.value(a).cols), "bias shape");
        let mut v = self.value(a).clone();
        for i in 0..v.rows {
            for (x, b) in v.row_mut(i).iter_mut().zip(&r.data) {
                *x += b;
            }
        }
        self.push(Op::AddRow(a, row), v, &[a, row])
    }

    pub fn mul_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let r = self.value(row);
        assert_eq!((r.rows, r.cols), (1, self.value(a).cols), "gain shape");
        let mut v = self.value(a).clone();
        for i in 0..v.rows {
            for (x, g) in v.row_mut(i).iter_mut().zip(&r.data) {
                *x *= g;
            }
        }
        self.push(Op::MulRow(a, row), v, &[a, row])
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let mut v = self.value(a).clone();
        v.data.iter_mut().for_each(|x| *x *= s);
        self.push(Op::Scale(a, s), v, &[a])
    }

    pub fn silu(&mut self, a: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        v.data.iter_mut().for_each(|x| *x *= sigmoid(*x));
        self.push(Op::Silu(a), v, &[a])
    }

    /// Divides each row by its root mean square.
    pub fn rms_norm(&mut self, a: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        for i in 0..v.rows {
            let row = v.row_mut(i);
            let r = rms(row);
            row.iter_mut().for_each(|x| *x /= r);
        }
        self.push(Op::RmsNorm(a), v, &[a])
    }

    /// Row softmax. With `causal`, row `i` only covers columns `0..=i` and the
    /// remaining entries are exactly zero.
    pub fn softmax(&mut self, a: NodeId, causal: bool) -> NodeId {
        let mut v = self.value(a).clone();
        for i in 0..v.rows {
            let width = if causal { (i + 1).min(v.cols) } else { v.cols };
            let row = v.row_mut(i);
            let max = row[..width].iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for x in &mut row[..width] {
                *x = (*x - max).exp();
                sum += *x;
            }
            row[..width].iter_mut().for_each(|x| *x /= sum);
            row[width..].iter_mut().for_each(|x| *x = 0.0);
        }
        self.push(Op::Softmax(a), v, &[a])
    }

    pub fn gather(&mut self, table: NodeId, ids: &[usize]) -> NodeId {
        let t = self.value(table);
        let mut v = Mat::zeros(ids.len(), t.cols);
        for (i, &id) in ids.iter().enumerate() {
            v.row_mut(i).copy_from_slice(t.row(id));
        }
        self.push(Op::Gather { table, ids: ids.to_vec() }, v, &[table])
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        for &p in parts {
            assert_eq!(self.value(p).cols, cols, "column mismatch in concat");
            data.extend_from_slice(&self.value(p).data);
        }
        let rows = data.len() / cols.max(1);
        self.push(Op::ConcatRows(parts.to_vec()), Mat::from_vec(rows, cols, data), parts)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut v = Mat::zeros(rows, cols);
        for i in 0..rows {
            let mut offset = 0;
            for &p in parts {
                let src = self.value(p).row(i);
                v.data[i * cols + offset..i * cols + offset + src.len()].copy_from_slice(src);
                offset += src.len();
            }
        }
        self.push(Op::ConcatCols(parts.to_vec()), v, parts)
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, width: usize) -> NodeId {
        let src = self.value(a);
        let mut v = Mat::zeros(src.rows, width);
        for i in 0..src.rows {
            v.row_mut(i).copy_from_slice(&src.row(i)[start..start + width]);
        }
        self.push(Op::SliceCols { input: a, start }, v, &[a])
    }

    /// Causal downsampling: output row `r` is the mean of input rows
    /// `r*k - (k-1) ..= r*k` (rows before 0 count as zero), so it depends on
    /// no input row after `r*k`. Output length is `ceil(n / k)`.
    pub fn shift_pool(&mut self, a: NodeId, k: usize) -> NodeId {
        let src = self.value(a);
        let out_rows = src.rows.div_ceil(k);
        let mut v = Mat::zeros(out_rows, src.cols);
        for r in 0..out_rows {
            for j in (r * k + 1).saturating_sub(k)..=r * k {
                for (o, x) in v.row_mut(r).iter_mut().zip(src.row(j)) {
                    *o += x;
                }
            }
            v.row_mut(r).iter_mut().for_each(|x| *x /= k as f64);
        }
        self.push(Op::ShiftPool { input: a, k }, v, &[a])
    }

    /// Nearest-repeat upsampling to `len` rows: output row `i` copies input
    /// row `i / k`.
    pub fn repeat_up(&mut self, a: NodeId, k: usize, len: usize) -> NodeId {
        let src = self.value(a);
        assert!(len.div_ceil(k) <= src.rows, "upsampling past the input");
        let mut v = Mat::zeros(len, src.cols);
        for i in 0..len {
            v.row_mut(i).copy_from_slice(src.row(i / k));
        }
        self.push(Op::RepeatUp { input: a, k }, v, &[a])
    }

    /// Scalar sum of `log_softmax(row i)[targets[i]]` over rows with a target.
    pub fn log_softmax_pick(&mut self, a: NodeId, targets: &[Option<usize>]) -> NodeId {
        let src = self.value(a);
        assert_eq!(src.rows, targets.len(), "one target per row");
        let mut total = 0.0;
        for (i, t) in targets.iter().enumerate() {
            if let Some(t) = *t {
                total += log_softmax(src.row(i))[t];
            }
        }
        self.push(
            Op::LogSoftmaxPick {
                input: a,
                targets: targets.to_vec(),
            },
            Mat::scalar(total),
            &[a],
        )
    }

    /// Backpropagates `seed * d(output)` into parameter gradients, which are
    /// accumulated into `grads` (one matrix per parameter).
    pub fn backward(&self, output: NodeId, seed: f64, grads: &mut [Mat]) {
        assert_eq!(self.value(output).shape(), (1, 1), "backward from a scalar");
        let mut adj: Vec<Option<Mat>> = vec![None; self.nodes.len()];
        adj[output] = Some(Mat::scalar(seed));
        for id in (0..=output).rev() {
            let Some(g) = adj[id].take() else { continue };
            if !self.nodes[id].needs_grad {
                continue;
            }
            self.backward_node(id, g, &mut adj, grads);
        }
    }

    fn accumulate(&self, adj: &mut [Option<Mat>], grads: &mut [Mat], id: NodeId, g: Mat) {
        if !self.nodes[id].needs_grad {
            return;
        }
        if let Op::Param(p) = self.nodes[id].op {
            grads[p].add_assign(&g);
            return;
        }
        match &mut adj[id] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn backward_node(&self, id: NodeId, g: Mat, adj: &mut [Option<Mat>], grads: &mut [Mat]) {
        let out = self.value(id);
        match &self.nodes[id].op {
            Op::Constant | Op::Param(_) => {}
            &Op::MatMul(a, b) => {
                if self.nodes[a].needs_grad {
                    let ga = matmul(&g, false, self.value(b), true);
                    self.accumulate(adj, grads, a, ga);
                }
                if self.nodes[b].needs_grad {
                    let gb = matmul(self.value(a), true, &g, false);
                    self.accumulate(adj, grads, b, gb);
                }
            }
            &Op::MatMulT(a, b) => {
                if self.nodes[a].needs_grad {
                    let ga = matmul(&g, false, self.value(b), false);
                    self.accumulate(adj, grads, a, ga);
                }
                if self.nodes[b].needs_grad {
                    let gb = matmul(&g, true, self.value(a), false);
                    self.accumulate(adj, grads, b, gb);
                }
            }
            &Op::Add(a, b) => {
                self.accumulate(adj, grads, b, g.clone());
                self.accumulate(adj, grads, a, g);
            }
            &Op::AddRow(a, row) => {
                self.accumulate(adj, grads, row, col_sums(&g));
                self.accumulate(adj, grads, a, g);
            }
            &Op::MulRow(a, row) => {
                let av = self.value(a);
                let rv = self.value(row);
                let mut grow = Mat::zeros(1, g.cols);
                let mut ga = g.clone();
                for i in 0..g.rows {
                    for j in 0..g.cols {
                        grow.data[j] += g.get(i, j) * av.get(i, j);
                        ga.data[i * g.cols + j] *= rv.data[j];
                    }
                }
                self.accumulate(adj, grads, row, grow);
                self.accumulate(adj, grads, a, ga);
            }
            &Op::Scale(a, s) => {
                let mut ga = g;
                ga.data.iter_mut().for_each(|x| *x *= s);
                self.accumulate(adj, grads, a, ga);
            }
            &Op::Silu(a) => {
                let x = self.value(a);
                let mut ga = g;
                for (gi, &xi) in ga.data.iter_mut().zip(&x.data) {
                    let s = sigmoid(xi);
                    *gi *= s * (1.0 + xi * (1.0 - s));
                }
                self.accumulate(adj, grads, a, ga);
            }
            &Op::RmsNorm(a) => {
                let x = self.value(a);
                let mut ga = g;
                for i in 0..x.rows {
                    let r = rms(x.row(i));
                    let y = out.row(i);
                    let row = ga.row_mut(i);
                    let dot: f64 = row.iter().zip(y).map(|(p, q)| p * q).sum::<f64>() / y.len() as f64;
                    for (gi, yi) in row.iter_mut().zip(y) {
                        *gi = (*gi - yi * dot) / r;
                    }
                }
                self.accumulate(adj, grads, a, ga);
            }
            &Op::Softmax(input) => {
                let mut ga = g;
                for i in 0..out.rows {
                    let y = out.row(i);
                    let row = ga.row_mut(i);
                    let dot: f64 = row.iter().zip(y).map(|(p, q)| p * q).sum();
                    for (gi, yi) in row.iter_mut().zip(y) {
                        *gi = yi * (*gi - dot);
                    }
                }
                self.accumulate(adj, grads, input, ga);
            }
            Op::Gather { table, ids } => {
                let t = self.value(*table);
                let mut gt = Mat::zeros(t.rows, t.cols);
                for (i, &r) in ids.iter().enumerate() {
                    for (o, x) in gt.row_mut(r).iter_mut().zip(g.row(i)) {
                        *o += x;
                    }
                }
                self.accumulate(adj, grads, *table, gt);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let (rows, cols) = self.value(p).shape();
                    let part = Mat::from_vec(rows, cols, g.data[offset..offset + rows * cols].to_vec());
                    offset += rows * cols;
                    self.accumulate(adj, grads, p, part);
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let (rows, cols) = self.value(p).shape();
                    let mut part = Mat::zeros(rows, cols);
                    for i in 0..rows {
                        part.row_mut(i).copy_from_slice(&g.row(i)[offset..offset + cols]);
                    }
                    offset += cols;
                    self.accumulate(adj, grads, p, part);
                }
            }
            &Op::SliceCols { input, start } => {
                let (rows, cols) = self.value(input).shape();
                let mut ga = Mat::zeros(rows, cols);
                for i in 0..rows {
                    ga.row_mut(i)[start..start + g.cols].copy_from_slice(g.row(i));
                }
                self.accumulate(adj, grads, input, ga);
            }
            &Op::ShiftPool { input, k } => {
                let (rows, cols) = self.value(input).shape();
                let mut ga = Mat::zeros(rows, cols);
                for r in 0..g.rows {
                    for j in (r * k + 1).saturating_sub(k)..=r * k {
                        for (o, x) in ga.row_mut(j).iter_mut().zip(g.row(r)) {
                            *o += x / k as f64;
                        }
                    }
                }
                self.accumulate(adj, grads, input, ga);
            }
            &Op::RepeatUp { input, k } => {
                let (rows, cols) = self.value(input).shape();
                let mut ga = Mat::zeros(rows, cols);
                for i in 0..g.rows {
                    for (o, x) in ga.row_mut(i / k).iter_mut().zip(g.row(i)) {
                        *o += x;
                    }
                }
                self.accumulate(adj, grads, input, ga);
            }
            Op::LogSoftmaxPick { input, targets } => {
                let x = self.value(*input);
                let scale = g.data[0];
                let mut ga = Mat::zeros(x.rows, x.cols);
                for (i, t) in targets.iter().enumerate() {
                    let Some(t) = *t else { continue };
                    let ls = log_softmax(x.row(i));
                    let row = ga.row_mut(i);
                    for (o, l) in row.iter_mut().zip(&ls) {
                        *o = -scale * l.exp();
                    }
                    row[t] += scale;
                }
                self.accumulate(adj, grads, *input, ga);
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn rms(row: &[f64]) -> f64 {
    (row.iter().map(|x| x * x).sum::<f64>() / row.len() as f64 + NORM_EPS).sqrt()
}

fn col_sums(g: &Mat) -> Mat {
    let mut s = Mat::zeros(1, g.cols);
    for i in 0..g.rows {
        for (o, x) in s.data.iter_mut().zip(g.row(i)) {
            *o += x;
        }
    }
    s
}

pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    row.iter().map(|x| x - lse).collect()
}
