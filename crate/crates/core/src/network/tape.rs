//! Matrix-valued reverse-mode differentiation.
//!
//! A [`Graph`] records every operation as a node holding its value. Leaves
//! are either constants or slices of one bound trainable parameter vector;
//! [`Graph::backward`] accumulates gradients for the latter only and may be
//! called once.

use crate::error::{Error, Result};

/// Dense row-major matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "tensor shape");
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// `a (r x k) * b (k x c)`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.cols, b.rows, "matmul inner dimension");
    let mut out = Tensor::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for (k, &av) in a.row(i).iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            for (o, &bv) in orow.iter_mut().zip(b.row(k)) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a (r x k) * b^T` where `b` is `c x k`.
pub fn matmul_bt(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.cols, b.cols, "matmul_bt inner dimension");
    let mut out = Tensor::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let ar = a.row(i);
        for j in 0..b.rows {
            out.data[i * b.rows + j] = dot(ar, b.row(j));
        }
    }
    out
}

/// `a^T (k x r) * b (r x c)` where `a` is `r x k`.
pub fn matmul_at(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.rows, b.rows, "matmul_at outer dimension");
    let mut out = Tensor::zeros(a.cols, b.cols);
    for r in 0..a.rows {
        let br = b.row(r);
        for (k, &av) in a.row(r).iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out.data[k * b.cols..(k + 1) * b.cols];
            for (o, &bv) in orow.iter_mut().zip(br) {
                *o += av * bv;
            }
        }
    }
    out
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

const LN_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op {
    Const,
    /// Slice of the bound parameter vector starting at `offset`.
    Param { offset: usize },
    MatMul(NodeId, NodeId),
    MatMulBt(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    MulRow(NodeId, NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    Sigmoid(NodeId),
    SoftmaxRows(NodeId),
    /// Normalization without affine terms; caches `1 / std` per row.
    LayerNorm(NodeId, Vec<f64>),
    AnchorBias(AnchorBiasSpec),
}

/// Parameters of the locality bias `-beta * (dx^2 / sx^2 + dy^2 / sy^2)`
/// between anchor boxes and grid cell centers, with `sx = w / 2 + floor`.
#[derive(Debug)]
struct AnchorBiasSpec {
    anchors: NodeId,
    cells: Vec<(f64, f64)>,
    beta: f64,
    floor: f64,
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Identifies the parameter vector bound as trainable in a graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BindingId(pub u64);

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    binding: Option<(BindingId, usize)>,
    consumed: bool,
}

/// Gradient vector aligned with a bound parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub binding: BindingId,
    pub values: Vec<f64>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Declares which parameter vector gradients flow into. A graph accepts
    /// exactly one binding.
    pub fn bind(&mut self, id: BindingId, len: usize) {
        match self.binding {
            None => self.binding = Some((id, len)),
            Some((existing, _)) => {
                assert_eq!(existing, id, "a graph has exactly one trainable parameter set")
            }
        }
    }

    pub fn binding(&self) -> Option<BindingId> {
        self.binding.map(|(id, _)| id)
    }

    /// Number of leaves that receive gradients.
    pub fn trainable_leaf_count(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n.op, Op::Param { .. })).count()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn ng(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Const, false)
    }

    pub fn param(&mut self, binding: BindingId, offset: usize, value: Tensor) -> NodeId {
        let (id, len) = self.binding.expect("bind() before adding parameters");
        assert_eq!(id, binding, "parameter from a foreign binding");
        assert!(offset + value.data.len() <= len, "parameter slice out of range");
        self.push(value, Op::Param { offset }, true)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = matmul(self.value(a), self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::MatMul(a, b), ng)
    }

    pub fn matmul_bt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = matmul_bt(self.value(a), self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::MatMulBt(a, b), ng)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Add(a, b), ng)
    }

    /// Adds a `1 x c` row to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let r = self.value(row);
        assert_eq!(r.rows, 1);
        let mut v = self.value(a).clone();
        for i in 0..v.rows {
            for (x, b) in v.row_mut(i).iter_mut().zip(&r.data) {
                *x += b;
            }
        }
        let ng = self.ng(a) || self.ng(row);
        self.push(v, Op::AddRow(a, row), ng)
    }

    /// Multiplies every row of `a` elementwise by a `1 x c` row.
    pub fn mul_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let r = self.value(row);
        assert_eq!(r.rows, 1);
        let mut v = self.value(a).clone();
        for i in 0..v.rows {
            for (x, b) in v.row_mut(i).iter_mut().zip(&r.data) {
                *x *= b;
            }
        }
        let ng = self.ng(a) || self.ng(row);
        self.push(v, Op::MulRow(a, row), ng)
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> NodeId {
        let mut v = self.value(a).clone();
        v.data.iter_mut().for_each(|x| *x *= k);
        let ng = self.ng(a);
        self.push(v, Op::Scale(a, k), ng)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        v.data.iter_mut().for_each(|x| *x = x.max(0.0));
        let ng = self.ng(a);
        self.push(v, Op::Relu(a), ng)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        v.data.iter_mut().for_each(|x| *x = crate::losses::sigmoid(*x));
        let ng = self.ng(a);
        self.push(v, Op::Sigmoid(a), ng)
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        for i in 0..v.rows {
            let row = v.row_mut(i);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for x in row.iter_mut() {
                *x = (*x - m).exp();
                z += *x;
            }
            row.iter_mut().for_each(|x| *x /= z);
        }
        let ng = self.ng(a);
        self.push(v, Op::SoftmaxRows(a), ng)
    }

    pub fn layer_norm(&mut self, a: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        let n = v.cols as f64;
        let mut inv_std = Vec::with_capacity(v.rows);
        for i in 0..v.rows {
            let row = v.row_mut(i);
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
            let is = 1.0 / (var + LN_EPS).sqrt();
            row.iter_mut().for_each(|x| *x = (*x - mean) * is);
            inv_std.push(is);
        }
        let ng = self.ng(a);
        self.push(v, Op::LayerNorm(a, inv_std), ng)
    }

    /// `N x cells` locality bias from an `N x 4` node of (cx, cy, w, h) boxes.
    pub fn anchor_bias(&mut self, anchors: NodeId, cells: &[(f64, f64)], beta: f64, floor: f64) -> NodeId {
        let av = self.value(anchors);
        assert_eq!(av.cols, 4);
        let mut v = Tensor::zeros(av.rows, cells.len());
        for i in 0..av.rows {
            let a = av.row(i);
            let sx = a[2] / 2.0 + floor;
            let sy = a[3] / 2.0 + floor;
            for (j, &(u, w)) in cells.iter().enumerate() {
                let dx = u - a[0];
                let dy = w - a[1];
                v.data[i * cells.len() + j] = -beta * (dx * dx / (sx * sx) + dy * dy / (sy * sy));
            }
        }
        let ng = self.ng(anchors);
        let spec = AnchorBiasSpec { anchors, cells: cells.to_vec(), beta, floor };
        self.push(v, Op::AnchorBias(spec), ng)
    }

    /// Reverse pass seeded with `d loss / d node` for each listed node.
    pub fn backward(&mut self, seeds: &[(NodeId, Tensor)]) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::GraphConsumed);
        }
        self.consumed = true;
        let (binding, len) = match self.binding {
            Some(b) => b,
            None => (BindingId(0), 0),
        };
        let mut out = vec![0.0; len];
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        for (id, g) in seeds {
            let v = &self.nodes[id.0].value;
            assert_eq!((v.rows, v.cols), (g.rows, g.cols), "seed shape");
            accumulate(&mut grads[id.0], g.clone());
        }
        for idx in (0..self.nodes.len()).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Const => {}
                Op::Param { offset } => {
                    for (o, x) in out[*offset..*offset + g.data.len()].iter_mut().zip(&g.data) {
                        *o += x;
                    }
                }
                Op::MatMul(a, b) => {
                    let (a, b) = (*a, *b);
                    if self.ng(a) {
                        accumulate(&mut grads[a.0], matmul_bt(&g, self.value(b)));
                    }
                    if self.ng(b) {
                        accumulate(&mut grads[b.0], matmul_at(self.value(a), &g));
                    }
                }
                Op::MatMulBt(a, b) => {
                    let (a, b) = (*a, *b);
                    if self.ng(a) {
                        accumulate(&mut grads[a.0], matmul(&g, self.value(b)));
                    }
                    if self.ng(b) {
                        accumulate(&mut grads[b.0], matmul_at(&g, self.value(a)));
                    }
                }
                Op::Add(a, b) => {
                    let (a, b) = (*a, *b);
                    if self.ng(b) {
                        accumulate(&mut grads[b.0], g.clone());
                    }
                    if self.ng(a) {
                        accumulate(&mut grads[a.0], g);
                    }
                }
                Op::AddRow(a, row) => {
                    let (a, row) = (*a, *row);
                    if self.ng(row) {
                        let mut r = Tensor::zeros(1, g.cols);
                        for i in 0..g.rows {
                            for (x, y) in r.data.iter_mut().zip(g.row(i)) {
                                *x += y;
                            }
                        }
                        accumulate(&mut grads[row.0], r);
                    }
                    if self.ng(a) {
                        accumulate(&mut grads[a.0], g);
                    }
                }
                Op::MulRow(a, row) => {
                    let (a, row) = (*a, *row);
                    if self.ng(row) {
                        let av = self.value(a);
                        let mut r = Tensor::zeros(1, g.cols);
                        for i in 0..g.rows {
                            for ((x, y), z) in r.data.iter_mut().zip(g.row(i)).zip(av.row(i)) {
                                *x += y * z;
                            }
                        }
                        accumulate(&mut grads[row.0], r);
                    }
                    if self.ng(a) {
                        let rv = &self.value(row).data;
                        let mut d = g;
                        for i in 0..d.rows {
                            for (x, y) in d.row_mut(i).iter_mut().zip(rv) {
                                *x *= y;
                            }
                        }
                        accumulate(&mut grads[a.0], d);
                    }
                }
                Op::Scale(a, k) => {
                    let mut d = g;
                    d.data.iter_mut().for_each(|x| *x *= k);
                    accumulate(&mut grads[a.0], d);
                }
                Op::Relu(a) => {
                    let a = *a;
                    let mut d = g;
                    for (x, y) in d.data.iter_mut().zip(&node.value.data) {
                        if *y <= 0.0 {
                            *x = 0.0;
                        }
                    }
                    accumulate(&mut grads[a.0], d);
                }
                Op::Sigmoid(a) => {
                    let a = *a;
                    let mut d = g;
                    for (x, y) in d.data.iter_mut().zip(&node.value.data) {
                        *x *= y * (1.0 - y);
                    }
                    accumulate(&mut grads[a.0], d);
                }
                Op::SoftmaxRows(a) => {
                    let a = *a;
                    let y = &node.value;
                    let mut d = g;
                    for i in 0..d.rows {
                        let yr = y.row(i);
                        let s = dot(d.row(i), yr);
                        for (x, yy) in d.row_mut(i).iter_mut().zip(yr) {
                            *x = yy * (*x - s);
                        }
                    }
                    accumulate(&mut grads[a.0], d);
                }
                Op::LayerNorm(a, inv_std) => {
                    let a = *a;
                    let y = &node.value;
                    let n = y.cols as f64;
                    let mut d = g;
                    for i in 0..d.rows {
                        let yr = y.row(i);
                        let mean_g = d.row(i).iter().sum::<f64>() / n;
                        let mean_gy = dot(d.row(i), yr) / n;
                        let is = inv_std[i];
                        for (x, yy) in d.row_mut(i).iter_mut().zip(yr) {
                            *x = is * (*x - mean_g - yy * mean_gy);
                        }
                    }
                    accumulate(&mut grads[a.0], d);
                }
                Op::AnchorBias(spec) => {
                    let av = self.value(spec.anchors);
                    let mut d = Tensor::zeros(av.rows, 4);
                    let nc = spec.cells.len();
                    for i in 0..av.rows {
                        let a = av.row(i);
                        let sx = a[2] / 2.0 + spec.floor;
                        let sy = a[3] / 2.0 + spec.floor;
                        let mut acc = [0.0; 4];
                        for (j, &(u, w)) in spec.cells.iter().enumerate() {
                            let gij = g.data[i * nc + j];
                            let dx = u - a[0];
                            let dy = w - a[1];
                            acc[0] += gij * 2.0 * spec.beta * dx / (sx * sx);
                            acc[1] += gij * 2.0 * spec.beta * dy / (sy * sy);
                            acc[2] += gij * spec.beta * dx * dx / (sx * sx * sx);
                            acc[3] += gij * spec.beta * dy * dy / (sy * sy * sy);
                        }
                        d.row_mut(i).copy_from_slice(&acc);
                    }
                    let anchors = spec.anchors;
                    accumulate(&mut grads[anchors.0], d);
                }
            }
        }
        Ok(Gradients { binding, values: out })
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(t) => t.add_assign(&g),
        None => *slot = Some(g),
    }
}
