//! Reverse-mode autodiff over row-major f64 matrices.
//!
//! A [`Tape`] records operations against a read-only [`ParamStore`];
//! [`Tape::backward`] walks the record in reverse and accumulates parameter
//! gradients into a [`Grads`] buffer aligned with the store. Parameters are
//! referenced by id, never copied onto the tape, so embedding tables stay
//! cheap to use. Every forward evaluation — training, inference, tests —
//! goes through the same ops, which keeps the two bit-identical.

use std::collections::HashMap;
use std::sync::Arc;

#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length");
        Self { rows, cols, data }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }
}

pub type ParamId = usize;
pub type NodeId = usize;

#[derive(Debug, Clone)]
pub struct ParamTensor {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

/// Named parameter tensors. Ids are dense and stable for the life of the
/// store, so gradient buffers align by index.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    tensors: Vec<ParamTensor>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, rows: usize, cols: usize, data: Vec<f64>) -> ParamId {
        assert_eq!(data.len(), rows * cols, "parameter {name} data length");
        assert!(
            !self.by_name.contains_key(name),
            "duplicate parameter {name}"
        );
        let id = self.tensors.len();
        self.tensors.push(ParamTensor {
            name: name.to_string(),
            rows,
            cols,
            data,
        });
        self.by_name.insert(name.to_string(), id);
        id
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &ParamTensor {
        &self.tensors[id]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ParamTensor {
        &mut self.tensors[id]
    }

    pub fn tensors(&self) -> &[ParamTensor] {
        &self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar parameter count.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }
}

/// Per-tensor gradient buffers aligned with a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Grads {
    pub data: Vec<Vec<f64>>,
}

impl Grads {
    pub fn zeros_like(params: &ParamStore) -> Self {
        Self {
            data: params.tensors().iter().map(|t| vec![0.0; t.data.len()]).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Grads) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, k: f64) {
        for t in &mut self.data {
            for x in t.iter_mut() {
                *x *= k;
            }
        }
    }
}

/// How a learnable bias vector is subtracted from logits.
#[derive(Debug, Clone)]
pub enum BiasSub {
    /// Subtract `p[c]` from column `c` of every row.
    PerClass,
    /// `x` is a column vector; subtract `p[indices[r]]` from row `r`.
    PerPosition(Arc<Vec<usize>>),
    /// Subtract `p[0]` everywhere.
    Scalar,
}

#[derive(Debug, Clone)]
enum Op {
    Input,
    GatherRows {
        table: ParamId,
        ids: Arc<Vec<u32>>,
    },
    AddPositions {
        x: NodeId,
        table: ParamId,
    },
    Linear {
        x: NodeId,
        w: ParamId,
        b: Option<ParamId>,
    },
    MatMul {
        a: NodeId,
        b: NodeId,
    },
    MatMulNT {
        a: NodeId,
        b: NodeId,
    },
    Scale {
        x: NodeId,
        k: f64,
    },
    AddN {
        xs: Vec<NodeId>,
    },
    AddBias {
        x: NodeId,
        b: ParamId,
    },
    LayerNorm {
        x: NodeId,
        gamma: ParamId,
        beta: ParamId,
    },
    Gelu {
        x: NodeId,
    },
    Tanh {
        x: NodeId,
    },
    SoftmaxRows {
        x: NodeId,
    },
    GatherFrom {
        x: NodeId,
        indices: Arc<Vec<usize>>,
    },
    ConcatRows {
        parts: Vec<(NodeId, usize, usize)>,
    },
    SubParam {
        x: NodeId,
        p: ParamId,
        how: BiasSub,
    },
    CeLoss {
        x: NodeId,
        target: usize,
        mask: Option<Arc<Vec<bool>>>,
    },
}

struct Node {
    op: Op,
    rows: usize,
    cols: usize,
    value: Vec<f64>,
}

const LN_EPS: f64 = 1e-5;

pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::with_capacity(256),
        }
    }

    pub fn value(&self, id: NodeId) -> Mat {
        let n = &self.nodes[id];
        Mat::from_vec(n.rows, n.cols, n.value.clone())
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        debug_assert_eq!(self.nodes[id].value.len(), 1);
        self.nodes[id].value[0]
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        (self.nodes[id].rows, self.nodes[id].cols)
    }

    fn push(&mut self, op: Op, rows: usize, cols: usize, value: Vec<f64>) -> NodeId {
        debug_assert_eq!(value.len(), rows * cols);
        self.nodes.push(Node {
            op,
            rows,
            cols,
            value,
        });
        self.nodes.len() - 1
    }

    pub fn input(&mut self, m: Mat) -> NodeId {
        self.push(Op::Input, m.rows, m.cols, m.data)
    }

    pub fn gather_rows(&mut self, table: ParamId, ids: Vec<u32>) -> NodeId {
        let t = self.params.get(table);
        let cols = t.cols;
        let mut value = Vec::with_capacity(ids.len() * cols);
        for &id in &ids {
            let r = id as usize;
            assert!(r < t.rows, "row {r} out of range for {}", t.name);
            value.extend_from_slice(&t.data[r * cols..(r + 1) * cols]);
        }
        let rows = ids.len();
        self.push(
            Op::GatherRows {
                table,
                ids: Arc::new(ids),
            },
            rows,
            cols,
            value,
        )
    }

    pub fn add_positions(&mut self, x: NodeId, table: ParamId) -> NodeId {
        let (rows, cols) = self.shape(x);
        let t = self.params.get(table);
        assert_eq!(t.cols, cols, "position table width");
        assert!(t.rows >= rows, "sequence longer than position table");
        let mut value = self.nodes[x].value.clone();
        for (v, p) in value.iter_mut().zip(&t.data[..rows * cols]) {
            *v += p;
        }
        self.push(Op::AddPositions { x, table }, rows, cols, value)
    }

    pub fn linear(&mut self, x: NodeId, w: ParamId, b: Option<ParamId>) -> NodeId {
        let (rows, in_dim) = self.shape(x);
        let wt = self.params.get(w);
        assert_eq!(wt.rows, in_dim, "linear input width vs {}", wt.name);
        let out_dim = wt.cols;
        let mut value = vec![0.0; rows * out_dim];
        mm_nn(
            &self.nodes[x].value,
            rows,
            in_dim,
            &wt.data,
            out_dim,
            &mut value,
        );
        if let Some(bid) = b {
            let bt = self.params.get(bid);
            assert_eq!(bt.data.len(), out_dim, "bias width vs {}", bt.name);
            for row in value.chunks_exact_mut(out_dim) {
                for (v, bb) in row.iter_mut().zip(&bt.data) {
                    *v += bb;
                }
            }
        }
        self.push(Op::Linear { x, w, b }, rows, out_dim, value)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        assert_eq!(k, k2, "matmul inner dims");
        let mut value = vec![0.0; m * n];
        mm_nn(&self.nodes[a].value, m, k, &self.nodes[b].value, n, &mut value);
        self.push(Op::MatMul { a, b }, m, n, value)
    }

    /// `A (m,k) x B^T (k,n)` where `B` is stored as `(n,k)`.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (m, k) = self.shape(a);
        let (n, k2) = self.shape(b);
        assert_eq!(k, k2, "matmul_nt inner dims");
        let mut value = vec![0.0; m * n];
        mm_nt(&self.nodes[a].value, m, k, &self.nodes[b].value, n, &mut value);
        self.push(Op::MatMulNT { a, b }, m, n, value)
    }

    pub fn scale(&mut self, x: NodeId, k: f64) -> NodeId {
        let (rows, cols) = self.shape(x);
        let value = self.nodes[x].value.iter().map(|v| v * k).collect();
        self.push(Op::Scale { x, k }, rows, cols, value)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.add_n(vec![a, b])
    }

    pub fn add_n(&mut self, xs: Vec<NodeId>) -> NodeId {
        assert!(!xs.is_empty());
        let (rows, cols) = self.shape(xs[0]);
        let mut value = self.nodes[xs[0]].value.clone();
        for &x in &xs[1..] {
            assert_eq!(self.shape(x), (rows, cols), "add_n shape");
            for (v, y) in value.iter_mut().zip(&self.nodes[x].value) {
                *v += y;
            }
        }
        self.push(Op::AddN { xs }, rows, cols, value)
    }

    pub fn add_bias(&mut self, x: NodeId, b: ParamId) -> NodeId {
        let (rows, cols) = self.shape(x);
        let bt = self.params.get(b);
        assert_eq!(bt.data.len(), cols, "add_bias width vs {}", bt.name);
        let mut value = self.nodes[x].value.clone();
        for row in value.chunks_exact_mut(cols) {
            for (v, bb) in row.iter_mut().zip(&bt.data) {
                *v += bb;
            }
        }
        self.push(Op::AddBias { x, b }, rows, cols, value)
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: ParamId, beta: ParamId) -> NodeId {
        let (rows, cols) = self.shape(x);
        let g = &self.params.get(gamma).data;
        let be = &self.params.get(beta).data;
        assert_eq!(g.len(), cols);
        assert_eq!(be.len(), cols);
        let mut value = vec![0.0; rows * cols];
        for r in 0..rows {
            let xin = &self.nodes[x].value[r * cols..(r + 1) * cols];
            let out = &mut value[r * cols..(r + 1) * cols];
            let (mean, inv_std) = row_moments(xin);
            for c in 0..cols {
                out[c] = g[c] * ((xin[c] - mean) * inv_std) + be[c];
            }
        }
        self.push(Op::LayerNorm { x, gamma, beta }, rows, cols, value)
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let (rows, cols) = self.shape(x);
        let value = self.nodes[x].value.iter().map(|&v| gelu(v)).collect();
        self.push(Op::Gelu { x }, rows, cols, value)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let (rows, cols) = self.shape(x);
        let value = self.nodes[x].value.iter().map(|v| v.tanh()).collect();
        self.push(Op::Tanh { x }, rows, cols, value)
    }

    pub fn softmax_rows(&mut self, x: NodeId) -> NodeId {
        let (rows, cols) = self.shape(x);
        let mut value = vec![0.0; rows * cols];
        for r in 0..rows {
            let xin = &self.nodes[x].value[r * cols..(r + 1) * cols];
            softmax_into(xin, &mut value[r * cols..(r + 1) * cols]);
        }
        self.push(Op::SoftmaxRows { x }, rows, cols, value)
    }

    /// Select arbitrary rows of `x` in the given order.
    pub fn gather_from(&mut self, x: NodeId, indices: Vec<usize>) -> NodeId {
        let (rows, cols) = self.shape(x);
        let mut value = Vec::with_capacity(indices.len() * cols);
        for &i in &indices {
            assert!(i < rows, "gather_from row {i} out of {rows}");
            value.extend_from_slice(&self.nodes[x].value[i * cols..(i + 1) * cols]);
        }
        let n = indices.len();
        self.push(
            Op::GatherFrom {
                x,
                indices: Arc::new(indices),
            },
            n,
            cols,
            value,
        )
    }

    pub fn select_row(&mut self, x: NodeId, row: usize) -> NodeId {
        self.gather_from(x, vec![row])
    }

    /// Concatenate row ranges `(node, start, len)` vertically.
    pub fn concat_rows(&mut self, parts: Vec<(NodeId, usize, usize)>) -> NodeId {
        assert!(!parts.is_empty());
        let cols = self.shape(parts[0].0).1;
        let mut value = Vec::new();
        let mut total = 0;
        for &(node, start, len) in &parts {
            let (rows, c) = self.shape(node);
            assert_eq!(c, cols, "concat_rows width");
            assert!(start + len <= rows, "concat_rows range");
            value.extend_from_slice(&self.nodes[node].value[start * cols..(start + len) * cols]);
            total += len;
        }
        self.push(Op::ConcatRows { parts }, total, cols, value)
    }

    /// Subtract a learnable bias from logits; see [`BiasSub`].
    pub fn sub_param(&mut self, x: NodeId, p: ParamId, how: BiasSub) -> NodeId {
        let (rows, cols) = self.shape(x);
        let pt = self.params.get(p);
        let mut value = self.nodes[x].value.clone();
        match &how {
            BiasSub::PerClass => {
                assert_eq!(pt.data.len(), cols, "per-class bias width vs {}", pt.name);
                for row in value.chunks_exact_mut(cols) {
                    for (v, b) in row.iter_mut().zip(&pt.data) {
                        *v -= b;
                    }
                }
            }
            BiasSub::PerPosition(indices) => {
                assert_eq!(cols, 1, "per-position bias expects a column vector");
                assert_eq!(indices.len(), rows, "per-position index count");
                for (r, &idx) in indices.iter().enumerate() {
                    assert!(idx < pt.data.len(), "bias index {idx} out of {}", pt.name);
                    value[r] -= pt.data[idx];
                }
            }
            BiasSub::Scalar => {
                assert_eq!(pt.data.len(), 1, "scalar bias vs {}", pt.name);
                for v in value.iter_mut() {
                    *v -= pt.data[0];
                }
            }
        }
        self.push(Op::SubParam { x, p, how }, rows, cols, value)
    }

    /// Cross-entropy with logits over the flattened vector node `x`;
    /// positions where `mask` is false are excluded from the softmax. The
    /// target must be unmasked. Produces a scalar node.
    pub fn ce_loss(&mut self, x: NodeId, target: usize, mask: Option<Arc<Vec<bool>>>) -> NodeId {
        let (rows, cols) = self.shape(x);
        assert!(rows == 1 || cols == 1, "ce_loss expects a vector node");
        let logits = &self.nodes[x].value;
        if let Some(m) = &mask {
            assert_eq!(m.len(), logits.len(), "ce mask length");
            assert!(m[target], "ce target is masked");
        }
        let loss = ce_forward(logits, target, mask.as_deref().map(|m| &m[..]));
        self.push(Op::CeLoss { x, target, mask }, 1, 1, vec![loss])
    }

    /// Reverse pass from the scalar node `root`; accumulates parameter
    /// gradients into `grads`.
    pub fn backward(&self, root: NodeId, grads: &mut Grads) {
        assert_eq!(self.nodes[root].value.len(), 1, "backward root must be scalar");
        let mut node_grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        node_grads[root] = Some(vec![1.0]);

        for id in (0..=root).rev() {
            let Some(g) = node_grads[id].take() else {
                continue;
            };
            let node = &self.nodes[id];
            let cols = node.cols;
            match &node.op {
                Op::Input => {}
                Op::GatherRows { table, ids } => {
                    let gt = &mut grads.data[*table];
                    for (r, &tok) in ids.iter().enumerate() {
                        let dst = &mut gt[tok as usize * cols..(tok as usize + 1) * cols];
                        for (d, gg) in dst.iter_mut().zip(&g[r * cols..(r + 1) * cols]) {
                            *d += gg;
                        }
                    }
                }
                Op::AddPositions { x, table } => {
                    let gt = &mut grads.data[*table];
                    for (d, gg) in gt[..g.len()].iter_mut().zip(&g) {
                        *d += gg;
                    }
                    accumulate(&mut node_grads, *x, &g);
                }
                Op::Linear { x, w, b } => {
                    let (xr, xc) = (self.nodes[*x].rows, self.nodes[*x].cols);
                    let wt = self.params.get(*w);
                    // dX += g . W^T  (W stored (in, out), so mm_nt fits)
                    let mut gx = vec![0.0; xr * xc];
                    mm_nt(&g, xr, cols, &wt.data, xc, &mut gx);
                    accumulate(&mut node_grads, *x, &gx);
                    // dW += X^T . g
                    mm_tn(
                        &self.nodes[*x].value,
                        xr,
                        xc,
                        &g,
                        cols,
                        &mut grads.data[*w],
                    );
                    if let Some(bid) = b {
                        let gb = &mut grads.data[*bid];
                        for row in g.chunks_exact(cols) {
                            for (d, gg) in gb.iter_mut().zip(row) {
                                *d += gg;
                            }
                        }
                    }
                }
                Op::MatMul { a, b } => {
                    let (m, k) = (self.nodes[*a].rows, self.nodes[*a].cols);
                    let n = cols;
                    let mut ga = vec![0.0; m * k];
                    mm_nt(&g, m, n, &self.nodes[*b].value, k, &mut ga);
                    accumulate(&mut node_grads, *a, &ga);
                    let mut gb = vec![0.0; k * n];
                    mm_tn(&self.nodes[*a].value, m, k, &g, n, &mut gb);
                    accumulate(&mut node_grads, *b, &gb);
                }
                Op::MatMulNT { a, b } => {
                    let (m, k) = (self.nodes[*a].rows, self.nodes[*a].cols);
                    let n = cols; // b is (n, k)
                    let mut ga = vec![0.0; m * k];
                    mm_nn(&g, m, n, &self.nodes[*b].value, k, &mut ga);
                    accumulate(&mut node_grads, *a, &ga);
                    let mut gb = vec![0.0; n * k];
                    mm_tn(&g, m, n, &self.nodes[*a].value, k, &mut gb);
                    accumulate(&mut node_grads, *b, &gb);
                }
                Op::Scale { x, k } => {
                    let gx: Vec<f64> = g.iter().map(|v| v * k).collect();
                    accumulate(&mut node_grads, *x, &gx);
                }
                Op::AddN { xs } => {
                    for &x in xs {
                        accumulate(&mut node_grads, x, &g);
                    }
                }
                Op::AddBias { x, b } => {
                    let gb = &mut grads.data[*b];
                    for row in g.chunks_exact(cols) {
                        for (d, gg) in gb.iter_mut().zip(row) {
                            *d += gg;
                        }
                    }
                    accumulate(&mut node_grads, *x, &g);
                }
                Op::LayerNorm { x, gamma, beta } => {
                    let rows = node.rows;
                    let gm = &self.params.get(*gamma).data;
                    let xv = &self.nodes[*x].value;
                    let mut gx = vec![0.0; rows * cols];
                    for r in 0..rows {
                        let xin = &xv[r * cols..(r + 1) * cols];
                        let gout = &g[r * cols..(r + 1) * cols];
                        let (mean, inv_std) = row_moments(xin);
                        // h = gamma (.) g; dx = (h - mean(h) - xhat *
                        // mean(h (.) xhat)) * inv_std
                        let mut mean_h = 0.0;
                        let mut mean_hx = 0.0;
                        for c in 0..cols {
                            let xhat = (xin[c] - mean) * inv_std;
                            let h = gm[c] * gout[c];
                            grads.data[*gamma][c] += gout[c] * xhat;
                            grads.data[*beta][c] += gout[c];
                            mean_h += h;
                            mean_hx += h * xhat;
                        }
                        mean_h /= cols as f64;
                        mean_hx /= cols as f64;
                        let out = &mut gx[r * cols..(r + 1) * cols];
                        for c in 0..cols {
                            let xhat = (xin[c] - mean) * inv_std;
                            let h = gm[c] * gout[c];
                            out[c] = (h - mean_h - xhat * mean_hx) * inv_std;
                        }
                    }
                    accumulate(&mut node_grads, *x, &gx);
                }
                Op::Gelu { x } => {
                    let gx: Vec<f64> = self.nodes[*x]
                        .value
                        .iter()
                        .zip(&g)
                        .map(|(&v, gg)| gelu_prime(v) * gg)
                        .collect();
                    accumulate(&mut node_grads, *x, &gx);
                }
                Op::Tanh { x } => {
                    let gx: Vec<f64> = node
                        .value
                        .iter()
                        .zip(&g)
                        .map(|(&y, gg)| (1.0 - y * y) * gg)
                        .collect();
                    accumulate(&mut node_grads, *x, &gx);
                }
                Op::SoftmaxRows { x } => {
                    let rows = node.rows;
                    let mut gx = vec![0.0; rows * cols];
                    for r in 0..rows {
                        let p = &node.value[r * cols..(r + 1) * cols];
                        let gout = &g[r * cols..(r + 1) * cols];
                        let dot: f64 = p.iter().zip(gout).map(|(a, b)| a * b).sum();
                        let out = &mut gx[r * cols..(r + 1) * cols];
                        for c in 0..cols {
                            out[c] = p[c] * (gout[c] - dot);
                        }
                    }
                    accumulate(&mut node_grads, *x, &gx);
                }
                Op::GatherFrom { x, indices } => {
                    let (xr, _) = (self.nodes[*x].rows, self.nodes[*x].cols);
                    let mut gx = vec![0.0; xr * cols];
                    for (r, &i) in indices.iter().enumerate() {
                        for (d, gg) in gx[i * cols..(i + 1) * cols]
                            .iter_mut()
                            .zip(&g[r * cols..(r + 1) * cols])
                        {
                            *d += gg;
                        }
                    }
                    accumulate(&mut node_grads, *x, &gx);
                }
                Op::ConcatRows { parts } => {
                    let mut offset = 0;
                    for &(pnode, start, len) in parts {
                        let (pr, _) = (self.nodes[pnode].rows, self.nodes[pnode].cols);
                        let mut gx = vec![0.0; pr * cols];
                        gx[start * cols..(start + len) * cols]
                            .copy_from_slice(&g[offset * cols..(offset + len) * cols]);
                        accumulate(&mut node_grads, pnode, &gx);
                        offset += len;
                    }
                }
                Op::SubParam { x, p, how } => {
                    let gp = &mut grads.data[*p];
                    match how {
                        BiasSub::PerClass => {
                            for row in g.chunks_exact(cols) {
                                for (d, gg) in gp.iter_mut().zip(row) {
                                    *d -= gg;
                                }
                            }
                        }
                        BiasSub::PerPosition(indices) => {
                            for (r, &idx) in indices.iter().enumerate() {
                                gp[idx] -= g[r];
                            }
                        }
                        BiasSub::Scalar => {
                            gp[0] -= g.iter().sum::<f64>();
                        }
                    }
                    accumulate(&mut node_grads, *x, &g);
                }
                Op::CeLoss { x, target, mask } => {
                    let go = g[0];
                    let logits = &self.nodes[*x].value;
                    let mask = mask.as_deref().map(|m| &m[..]);
                    let probs = ce_probs(logits, mask);
                    let mut gx = vec![0.0; logits.len()];
                    for (i, p) in probs.iter().enumerate() {
                        if mask.map(|m| m[i]).unwrap_or(true) {
                            let y = if i == *target { 1.0 } else { 0.0 };
                            gx[i] = go * (p - y);
                        }
                    }
                    accumulate(&mut node_grads, *x, &gx);
                }
            }
        }
    }
}

fn accumulate(node_grads: &mut [Option<Vec<f64>>], id: NodeId, g: &[f64]) {
    match &mut node_grads[id] {
        Some(existing) => {
            for (a, b) in existing.iter_mut().zip(g) {
                *a += b;
            }
        }
        slot => *slot = Some(g.to_vec()),
    }
}

fn row_moments(row: &[f64]) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + LN_EPS).sqrt())
}

fn gelu(x: f64) -> f64 {
    const K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (K * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_prime(x: f64) -> f64 {
    const K: f64 = 0.797_884_560_802_865_4;
    let u = K * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * K * (1.0 + 3.0 * 0.044715 * x * x)
}

fn softmax_into(x: &[f64], out: &mut [f64]) {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(x) {
        let e = (v - max).exp();
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

fn ce_forward(logits: &[f64], target: usize, mask: Option<&[bool]>) -> f64 {
    let live = |i: usize| mask.map(|m| m[i]).unwrap_or(true);
    let max = logits
        .iter()
        .enumerate()
        .filter(|(i, _)| live(*i))
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (i, &v) in logits.iter().enumerate() {
        if live(i) {
            sum += (v - max).exp();
        }
    }
    max + sum.ln() - logits[target]
}

fn ce_probs(logits: &[f64], mask: Option<&[bool]>) -> Vec<f64> {
    let live = |i: usize| mask.map(|m| m[i]).unwrap_or(true);
    let max = logits
        .iter()
        .enumerate()
        .filter(|(i, _)| live(*i))
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    let mut out = vec![0.0; logits.len()];
    for (i, &v) in logits.iter().enumerate() {
        if live(i) {
            let e = (v - max).exp();
            out[i] = e;
            sum += e;
        }
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
    out
}

/// `out += A (m,k) . B (k,n)`. The inner loops run four B-rows at a time;
/// per-row remainder loops cover `k % 4`.
pub fn mm_nn(a: &[f64], m: usize, k: usize, b: &[f64], n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        let mut l = 0;
        while l + 4 <= k {
            let (a0, a1, a2, a3) = (arow[l], arow[l + 1], arow[l + 2], arow[l + 3]);
            let b0 = &b[l * n..(l + 1) * n];
            let b1 = &b[(l + 1) * n..(l + 2) * n];
            let b2 = &b[(l + 2) * n..(l + 3) * n];
            let b3 = &b[(l + 3) * n..(l + 4) * n];
            for j in 0..n {
                orow[j] += a0 * b0[j] + a1 * b1[j] + a2 * b2[j] + a3 * b3[j];
            }
            l += 4;
        }
        while l < k {
            let al = arow[l];
            let brow = &b[l * n..(l + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += al * bv;
            }
            l += 1;
        }
    }
}

/// `out += A (m,k) . B^T` with `B` stored as `(n,k)`: four dot products per
/// iteration.
pub fn mm_nt(a: &[f64], m: usize, k: usize, b: &[f64], n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        let mut j = 0;
        while j + 4 <= n {
            let b0 = &b[j * k..(j + 1) * k];
            let b1 = &b[(j + 1) * k..(j + 2) * k];
            let b2 = &b[(j + 2) * k..(j + 3) * k];
            let b3 = &b[(j + 3) * k..(j + 4) * k];
            let (mut d0, mut d1, mut d2, mut d3) = (0.0, 0.0, 0.0, 0.0);
            for (l, &x) in arow.iter().enumerate() {
                d0 += x * b0[l];
                d1 += x * b1[l];
                d2 += x * b2[l];
                d3 += x * b3[l];
            }
            orow[j] += d0;
            orow[j + 1] += d1;
            orow[j + 2] += d2;
            orow[j + 3] += d3;
            j += 4;
        }
        while j < n {
            let brow = &b[j * k..(j + 1) * k];
            let mut dot = 0.0;
            for (&x, &y) in arow.iter().zip(brow) {
                dot += x * y;
            }
            orow[j] += dot;
            j += 1;
        }
    }
}

/// `out += A^T . B` with `A` stored as `(m,n)` and `B` as `(m,k)`: four
/// A-rows per iteration.
pub fn mm_tn(a: &[f64], m: usize, n: usize, b: &[f64], k: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), m * k);
    debug_assert_eq!(out.len(), n * k);
    let mut i = 0;
    while i + 4 <= m {
        let a0 = &a[i * n..(i + 1) * n];
        let a1 = &a[(i + 1) * n..(i + 2) * n];
        let a2 = &a[(i + 2) * n..(i + 3) * n];
        let a3 = &a[(i + 3) * n..(i + 4) * n];
        let b0 = &b[i * k..(i + 1) * k];
        let b1 = &b[(i + 1) * k..(i + 2) * k];
        let b2 = &b[(i + 2) * k..(i + 3) * k];
        let b3 = &b[(i + 3) * k..(i + 4) * k];
        for j in 0..n {
            let (x0, x1, x2, x3) = (a0[j], a1[j], a2[j], a3[j]);
            let orow = &mut out[j * k..(j + 1) * k];
            for l in 0..k {
                orow[l] += x0 * b0[l] + x1 * b1[l] + x2 * b2[l] + x3 * b3[l];
            }
        }
        i += 4;
    }
    while i < m {
        let arow = &a[i * n..(i + 1) * n];
        let brow = &b[i * k..(i + 1) * k];
        for (j, &aij) in arow.iter().enumerate() {
            if aij == 0.0 {
                continue;
            }
            let orow = &mut out[j * k..(j + 1) * k];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aij * bv;
            }
        }
        i += 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::rng::{normal_f64, substream, Stream};

    fn randn(rng: &mut impl rand_core::RngCore, n: usize) -> Vec<f64> {
        (0..n).map(|_| normal_f64(rng)).collect()
    }

    #[test]
    fn matmul_against_naive() {
        let mut rng = substream(0, Stream::Test, 0);
        let (m, k, n) = (3, 5, 4);
        let a = randn(&mut rng, m * k);
        let b = randn(&mut rng, k * n);
        let mut out = vec![0.0; m * n];
        mm_nn(&a, m, k, &b, n, &mut out);
        for i in 0..m {
            for j in 0..n {
                let mut dot = 0.0;
                for l in 0..k {
                    dot += a[i * k + l] * b[l * n + j];
                }
                assert!((out[i * n + j] - dot).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn ce_matches_log_softmax() {
        let logits = vec![0.0, 0.0, 0.0, 0.0];
        let loss = ce_forward(&logits, 1, None);
        assert!((loss - (4.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn ce_mask_excludes_positions() {
        let logits = vec![100.0, 1.0, 2.0];
        let mask = vec![false, true, true];
        let loss = ce_forward(&logits, 2, Some(&mask));
        // Softmax over positions 1 and 2 only.
        let expected = (1.0f64.exp() + 2.0f64.exp()).ln() - 2.0;
        assert!((loss - expected).abs() < 1e-12);
    }

    // Finite-difference oracle over every op at once: a small graph using
    // each op family, checked against central differences.
    #[test]
    fn finite_difference_whole_graph() {
        let mut rng = substream(3, Stream::Test, 1);
        let mut params = ParamStore::new();
        let table = params.add("table", 7, 4, randn(&mut rng, 28));
        let pos = params.add("pos", 5, 4, randn(&mut rng, 20));
        let w1 = params.add("w1", 4, 6, randn(&mut rng, 24));
        let b1 = params.add("b1", 1, 6, randn(&mut rng, 6));
        let w2 = params.add("w2", 4, 3, randn(&mut rng, 12));
        let gamma = params.add("gamma", 1, 4, vec![1.0, 0.9, 1.1, 1.0]);
        let beta = params.add("beta", 1, 4, vec![0.0, 0.1, -0.1, 0.0]);
        let cbias = params.add("cbias", 1, 3, vec![0.05, -0.1, 0.2]);

        let loss_fn = |params: &ParamStore| -> f64 {
            let mut tape = Tape::new(params);
            let x = tape.gather_rows(table, vec![0, 2, 4, 6, 1]);
            let x = tape.add_positions(x, pos);
            let x = tape.layer_norm(x, gamma, beta);
            let q = tape.linear(x, w1, Some(b1));
            let q = tape.gelu(q);
            let scores = tape.matmul_nt(q, q);
            let scores = tape.scale(scores, 0.5);
            let attn = tape.softmax_rows(scores);
            let mixed = tape.matmul(attn, x);
            let sel = tape.gather_from(mixed, vec![0, 3]);
            let cat = tape.concat_rows(vec![(sel, 0, 2), (mixed, 1, 2)]);
            let h = tape.linear(cat, w2, None);
            let h = tape.tanh(h);
            let h = tape.sub_param(h, cbias, BiasSub::PerClass);
            let r0 = tape.select_row(h, 0);
            let r1 = tape.select_row(h, 2);
            let both = tape.add(r0, r1);
            let mask = Arc::new(vec![true, true, false]);
            let loss = tape.ce_loss(both, 1, Some(mask));
            tape.scalar(loss)
        };

        let mut tape = Tape::new(&params);
        // Rebuild the same graph to get analytic gradients.
        let x = tape.gather_rows(table, vec![0, 2, 4, 6, 1]);
        let x = tape.add_positions(x, pos);
        let x = tape.layer_norm(x, gamma, beta);
        let q = tape.linear(x, w1, Some(b1));
        let q = tape.gelu(q);
        let scores = tape.matmul_nt(q, q);
        let scores = tape.scale(scores, 0.5);
        let attn = tape.softmax_rows(scores);
        let mixed = tape.matmul(attn, x);
        let sel = tape.gather_from(mixed, vec![0, 3]);
        let cat = tape.concat_rows(vec![(sel, 0, 2), (mixed, 1, 2)]);
        let h = tape.linear(cat, w2, None);
        let h = tape.tanh(h);
        let h = tape.sub_param(h, cbias, BiasSub::PerClass);
        let r0 = tape.select_row(h, 0);
        let r1 = tape.select_row(h, 2);
        let both = tape.add(r0, r1);
        let mask = Arc::new(vec![true, true, false]);
        let loss = tape.ce_loss(both, 1, Some(mask));
        let mut grads = Grads::zeros_like(&params);
        tape.backward(loss, &mut grads);

        let h_step = 1e-5;
        let mut checked = 0;
        for t in 0..params.len() {
            for i in 0..params.get(t).data.len() {
                let orig = params.get(t).data[i];
                let mut p2 = params.clone();
                p2.get_mut(t).data[i] = orig + h_step;
                let up = loss_fn(&p2);
                p2.get_mut(t).data[i] = orig - h_step;
                let down = loss_fn(&p2);
                let fd = (up - down) / (2.0 * h_step);
                let an = grads.data[t][i];
                let denom = an.abs().max(fd.abs()).max(1e-8);
                assert!(
                    ((an - fd).abs() / denom) < 1e-4,
                    "param {} idx {i}: analytic {an}, fd {fd}",
                    params.get(t).name
                );
                checked += 1;
            }
        }
        assert!(checked > 100);
    }

    #[test]
    fn backward_through_per_position_bias() {
        let mut params = ParamStore::new();
        let p = params.add("c_ans", 1, 8, vec![0.1; 8]);
        let mut tape = Tape::new(&params);
        let x = tape.input(Mat::from_vec(3, 1, vec![1.0, 2.0, 3.0]));
        let idx = Arc::new(vec![2usize, 5, 7]);
        let y = tape.sub_param(x, p, BiasSub::PerPosition(idx));
        let loss = tape.ce_loss(y, 1, None);
        let mut grads = Grads::zeros_like(&params);
        tape.backward(loss, &mut grads);
        // Only positions 2, 5, 7 of the bias receive gradient.
        for (i, g) in grads.data[p].iter().enumerate() {
            if [2, 5, 7].contains(&i) {
                assert!(g.abs() > 0.0);
            } else {
                assert_eq!(*g, 0.0);
            }
        }
        // Probability mass sums to one, so the bias gradients sum to zero.
        let total: f64 = grads.data[p].iter().sum();
        assert!(total.abs() < 1e-12);
    }
}
