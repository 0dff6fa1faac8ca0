//! Reverse-mode automatic differentiation on a Wengert tape.
//!
//! A [`Tape`] records primitive tensor operations during the forward pass;
//! [`Tape::backward`] replays them in reverse, accumulating adjoints for
//! every node. The tape is rebuilt per batch and never shared across
//! concurrent batches.
//!
//! Spatial Jacobians are obtained with [`Tape::jvp`], which walks a recorded
//! span and *emits tangent nodes* for each primitive (forward-mode over the
//! recorded graph). Because tangents are ordinary tape nodes, a scalar loss
//! computed from Jacobian entries can itself be differentiated by the usual
//! backward pass — one extra derivative level, which is all the elastic
//! penalty needs.

use crate::svd;
use crate::tensor::Tensor;
use rayon::prelude::*;
use std::sync::Arc;

/// Index of a parameter in a `ParamStore`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Index of a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub usize);

/// Smooth even coefficient functions of s = theta^2 used by the screw-axis
/// exponential, plus their first derivatives (`D*`). Working in s rather
/// than theta keeps everything smooth through theta = 0, where the
/// identity-initialized field starts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RotCoeffKind {
    /// sin(theta)/theta
    A,
    /// (1 - cos(theta))/theta^2
    B,
    /// (theta - sin(theta))/theta^3
    C,
    DA,
    DB,
    DC,
}

impl RotCoeffKind {
    pub fn eval(self, s: f64) -> f64 {
        match self {
            RotCoeffKind::A => rot_a(s),
            RotCoeffKind::B => rot_b(s),
            RotCoeffKind::C => rot_c(s),
            RotCoeffKind::DA => rot_da(s),
            RotCoeffKind::DB => rot_db(s),
            RotCoeffKind::DC => rot_dc(s),
        }
    }

    /// Kind of the derivative, if it is representable as a tape primitive.
    fn derivative_kind(self) -> Option<RotCoeffKind> {
        match self {
            RotCoeffKind::A => Some(RotCoeffKind::DA),
            RotCoeffKind::B => Some(RotCoeffKind::DB),
            RotCoeffKind::C => Some(RotCoeffKind::DC),
            _ => None,
        }
    }

    /// Numeric derivative value, used by the backward pass.
    fn derivative_eval(self, s: f64) -> f64 {
        match self {
            RotCoeffKind::A => rot_da(s),
            RotCoeffKind::B => rot_db(s),
            RotCoeffKind::C => rot_dc(s),
            RotCoeffKind::DA => rot_d2a(s),
            RotCoeffKind::DB => rot_d2b(s),
            RotCoeffKind::DC => rot_d2c(s),
        }
    }
}

// Series below the cutoff, closed form above. With four series terms the
// truncation error at s = 1e-2 is below 3e-14, and the closed forms are
// free of significant cancellation for t = sqrt(s) >= 0.1.
const ROT_SERIES_CUTOFF: f64 = 1e-2;

fn rot_a(s: f64) -> f64 {
    if s < ROT_SERIES_CUTOFF {
        1.0 - s / 6.0 + s * s / 120.0 - s * s * s / 5040.0
    } else {
        let t = s.sqrt();
        t.sin() / t
    }
}

fn rot_b(s: f64) -> f64 {
    if s < ROT_SERIES_CUTOFF {
        0.5 - s / 24.0 + s * s / 720.0 - s * s * s / 40320.0
    } else {
        // 2 sin^2(t/2)/t^2 avoids the 1 - cos cancellation.
        let t = s.sqrt();
        let sh = (t / 2.0).sin();
        2.0 * sh * sh / s
    }
}

fn rot_c(s: f64) -> f64 {
    if s < ROT_SERIES_CUTOFF {
        1.0 / 6.0 - s / 120.0 + s * s / 5040.0 - s * s * s / 362880.0
    } else {
        let t = s.sqrt();
        (t - t.sin()) / (s * t)
    }
}

fn rot_da(s: f64) -> f64 {
    if s < ROT_SERIES_CUTOFF {
        -1.0 / 6.0 + s / 60.0 - s * s / 1680.0 + s * s * s / 90720.0
    } else {
        let t = s.sqrt();
        (t * t.cos() - t.sin()) / (2.0 * s * t)
    }
}

fn rot_db(s: f64) -> f64 {
    if s < ROT_SERIES_CUTOFF {
        -1.0 / 24.0 + s / 360.0 - s * s / 13440.0 + s * s * s / 725760.0
    } else {
        let t = s.sqrt();
        (t * t.sin() / 2.0 - (1.0 - t.cos())) / (s * s)
    }
}

fn rot_dc(s: f64) -> f64 {
    if s < ROT_SERIES_CUTOFF {
        -1.0 / 120.0 + s / 2520.0 - s * s / 120960.0 + s * s * s / 7983360.0
    } else {
        let t = s.sqrt();
        ((1.0 - t.cos()) / 2.0 - 1.5 * (t - t.sin()) / t) / (s * s)
    }
}

fn rot_d2a(s: f64) -> f64 {
    if s < ROT_SERIES_CUTOFF {
        1.0 / 60.0 - s / 840.0 + s * s / 30240.0 - s * s * s / 1995840.0
    } else {
        let t = s.sqrt();
        (3.0 * t.sin() - 3.0 * t * t.cos() - t * t * t.sin()) / (4.0 * t.powi(5))
    }
}

fn rot_d2b(s: f64) -> f64 {
    if s < ROT_SERIES_CUTOFF {
        1.0 / 360.0 - s / 6720.0 + s * s / 241920.0 - s * s * s / 19958400.0
    } else {
        let t = s.sqrt();
        ((t * t * t.cos() - t * t.sin()) / 4.0 - t * t.sin() + 2.0 - 2.0 * t.cos()) / t.powi(6)
    }
}

fn rot_d2c(s: f64) -> f64 {
    if s < ROT_SERIES_CUTOFF {
        1.0 / 2520.0 - s / 60480.0 + s * s / 2661120.0 - s * s * s / 259459200.0
    } else {
        let t = s.sqrt();
        let h = (1.0 - t.cos()) / 2.0 - 1.5 * (t - t.sin()) / t;
        (t * t.sin() / 4.0 - 0.75 * (t.sin() - t * t.cos()) / t - 2.0 * h) / t.powi(6)
    }
}

/// Primitive operation with parent node ids.
#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(ParamId),
    Add(NodeId, NodeId),
    /// (n x k) + (1 x k), row-broadcast (bias).
    AddRow(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// (n x k) * (n x 1), column-broadcast.
    MulCol(NodeId, NodeId),
    Div(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Neg(NodeId),
    Matmul(NodeId, NodeId),
    Relu(NodeId),
    ClampMin(NodeId, f64),
    Softplus(NodeId),
    Sigmoid(NodeId),
    Sin(NodeId),
    Cos(NodeId),
    Exp(NodeId),
    Ln(NodeId),
    Sqrt(NodeId),
    Square(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    RowSum(NodeId),
    Concat(Arc<Vec<NodeId>>),
    SliceCols(NodeId, usize, usize),
    Reshape(NodeId, usize, usize),
    Embed {
        table: NodeId,
        indices: Arc<Vec<usize>>,
    },
    /// Per-row cross product of two (n x 3) tensors.
    Cross(NodeId, NodeId),
    RotCoeff(RotCoeffKind, NodeId),
    /// Per-row singular values of d x d matrices stored row-major (n x d*d) -> (n x d), descending.
    SingVals(usize, NodeId),
    /// Exclusive prefix sum along each row.
    CumsumExclRows(NodeId),
}

struct Node {
    op: Op,
    value: Tensor,
}

/// Recorded forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Per-node adjoints produced by a backward pass.
pub struct Adjoints {
    adj: Vec<Option<Tensor>>,
}

impl Adjoints {
    pub fn adjoint(&self, id: NodeId) -> Option<&Tensor> {
        self.adj.get(id.0).and_then(|a| a.as_ref())
    }

    /// Accumulates adjoints of all `Param` nodes by parameter id.
    /// Parameters never touched by the graph are absent.
    pub fn param_grads(&self, tape: &Tape) -> Vec<(ParamId, Tensor)> {
        let mut grads: Vec<(ParamId, Tensor)> = Vec::new();
        for (i, node) in tape.nodes.iter().enumerate() {
            if let Op::Param(pid) = node.op {
                if let Some(a) = &self.adj[i] {
                    match grads.iter_mut().find(|(id, _)| *id == pid) {
                        Some((_, g)) => add_assign(g, a),
                        None => grads.push((pid, a.clone())),
                    }
                }
            }
        }
        grads
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    fn shape(&self, id: NodeId) -> (usize, usize) {
        self.nodes[id.0].value.shape()
    }

    // ---- leaves ----

    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value)
    }

    pub fn param(&mut self, id: ParamId, value: Tensor) -> NodeId {
        self.push(Op::Param(id), value)
    }

    /// Re-enters a value as a fresh constant, cutting the gradient path.
    pub fn detach(&mut self, id: NodeId) -> NodeId {
        let v = self.nodes[id.0].value.clone();
        self.input(v)
    }

    // ---- arithmetic ----

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(va.shape(), vb.shape(), "add: shape mismatch");
        let v = zip_map(va, vb, |x, y| x + y);
        self.push(Op::Add(a, b), v)
    }

    pub fn add_row(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(vb.rows(), 1, "add_row: rhs must be a single row");
        assert_eq!(va.cols(), vb.cols(), "add_row: column mismatch");
        let cols = va.cols();
        let mut out = va.clone();
        for r in 0..va.rows() {
            for c in 0..cols {
                out.data_mut()[r * cols + c] += vb.data()[c];
            }
        }
        self.push(Op::AddRow(a, b), out)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(va.shape(), vb.shape(), "sub: shape mismatch");
        let v = zip_map(va, vb, |x, y| x - y);
        self.push(Op::Sub(a, b), v)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(va.shape(), vb.shape(), "mul: shape mismatch");
        let v = zip_map(va, vb, |x, y| x * y);
        self.push(Op::Mul(a, b), v)
    }

    pub fn mul_col(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(vb.cols(), 1, "mul_col: rhs must be a single column");
        assert_eq!(va.rows(), vb.rows(), "mul_col: row mismatch");
        let cols = va.cols();
        let mut out = va.clone();
        for r in 0..va.rows() {
            let s = vb.data()[r];
            for c in 0..cols {
                out.data_mut()[r * cols + c] *= s;
            }
        }
        self.push(Op::MulCol(a, b), out)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(va.shape(), vb.shape(), "div: shape mismatch");
        let v = zip_map(va, vb, |x, y| x / y);
        self.push(Op::Div(a, b), v)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.nodes[a.0].value.map(|x| x * c);
        self.push(Op::Scale(a, c), v)
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.nodes[a.0].value.map(|x| x + c);
        self.push(Op::AddScalar(a), v)
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.map(|x| -x);
        self.push(Op::Neg(a), v)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(
            va.cols(),
            vb.rows(),
            "matmul: inner dimension mismatch ({}x{} * {}x{})",
            va.rows(),
            va.cols(),
            vb.rows(),
            vb.cols()
        );
        let v = matmul(va, vb);
        self.push(Op::Matmul(a, b), v)
    }

    // ---- nonlinearities ----

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.map(|x| x.max(0.0));
        self.push(Op::Relu(a), v)
    }

    /// 1.0 where the value exceeds the threshold, else 0.0. Recorded as a
    /// constant: the step function is flat almost everywhere.
    pub fn gt_mask(&mut self, a: NodeId, threshold: f64) -> NodeId {
        let v = self.nodes[a.0].value.map(|x| if x > threshold { 1.0 } else { 0.0 });
        self.push(Op::Leaf, v)
    }

    pub fn clamp_min(&mut self, a: NodeId, floor: f64) -> NodeId {
        let v = self.nodes[a.0].value.map(|x| x.max(floor));
        self.push(Op::ClampMin(a, floor), v)
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.map(softplus);
        self.push(Op::Softplus(a), v)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.map(sigmoid);
        self.push(Op::Sigmoid(a), v)
    }

    pub fn sin(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.map(f64::sin);
        self.push(Op::Sin(a), v)
    }

    pub fn cos(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.map(f64::cos);
        self.push(Op::Cos(a), v)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.map(f64::exp);
        self.push(Op::Exp(a), v)
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.map(f64::ln);
        self.push(Op::Ln(a), v)
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.map(f64::sqrt);
        self.push(Op::Sqrt(a), v)
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.map(|x| x * x);
        self.push(Op::Square(a), v)
    }

    // ---- reductions and reshapes ----

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.nodes[a.0].value.data().iter().sum();
        self.push(Op::Sum(a), Tensor::scalar(s))
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let v = &self.nodes[a.0].value;
        let s: f64 = v.data().iter().sum();
        let n = v.len() as f64;
        self.push(Op::Mean(a), Tensor::scalar(s / n))
    }

    pub fn row_sum(&mut self, a: NodeId) -> NodeId {
        let v = &self.nodes[a.0].value;
        let mut out = Vec::with_capacity(v.rows());
        for r in 0..v.rows() {
            out.push(v.row_slice(r).iter().sum());
        }
        self.push(Op::RowSum(a), Tensor::column(&out))
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let rows = self.shape(parts[0]).0;
        let total: usize = parts.iter().map(|&p| self.shape(p).1).collect::<Vec<_>>().iter().sum();
        let mut out = Tensor::zeros(rows, total);
        let mut offset = 0;
        for &p in parts {
            let v = &self.nodes[p.0].value;
            assert_eq!(v.rows(), rows, "concat: row mismatch");
            for r in 0..rows {
                let dst = r * total + offset;
                out.data_mut()[dst..dst + v.cols()].copy_from_slice(v.row_slice(r));
            }
            offset += v.cols();
        }
        self.push(Op::Concat(Arc::new(parts.to_vec())), out)
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let v = &self.nodes[a.0].value;
        assert!(start + len <= v.cols(), "slice_cols out of range");
        let mut out = Tensor::zeros(v.rows(), len);
        for r in 0..v.rows() {
            out.data_mut()[r * len..(r + 1) * len]
                .copy_from_slice(&v.row_slice(r)[start..start + len]);
        }
        self.push(Op::SliceCols(a, start, len), out)
    }

    pub fn reshape(&mut self, a: NodeId, rows: usize, cols: usize) -> NodeId {
        let v = self.nodes[a.0].value.reshaped(rows, cols);
        self.push(Op::Reshape(a, rows, cols), v)
    }

    /// Row gather from an embedding table.
    pub fn embed(&mut self, table: NodeId, indices: &[usize]) -> NodeId {
        let v = &self.nodes[table.0].value;
        let dim = v.cols();
        let mut out = Tensor::zeros(indices.len(), dim);
        for (r, &i) in indices.iter().enumerate() {
            assert!(i < v.rows(), "embed: index {} out of {} rows", i, v.rows());
            out.data_mut()[r * dim..(r + 1) * dim].copy_from_slice(v.row_slice(i));
        }
        self.push(
            Op::Embed {
                table,
                indices: Arc::new(indices.to_vec()),
            },
            out,
        )
    }

    /// Per-row cross product of (n x 3) tensors.
    pub fn cross(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(va.shape(), vb.shape());
        assert_eq!(va.cols(), 3, "cross: expects n x 3");
        let mut out = Tensor::zeros(va.rows(), 3);
        for r in 0..va.rows() {
            let x = va.row_slice(r);
            let y = vb.row_slice(r);
            let o = &mut out.data_mut()[r * 3..r * 3 + 3];
            o[0] = x[1] * y[2] - x[2] * y[1];
            o[1] = x[2] * y[0] - x[0] * y[2];
            o[2] = x[0] * y[1] - x[1] * y[0];
        }
        self.push(Op::Cross(a, b), out)
    }

    pub fn rot_coeff(&mut self, kind: RotCoeffKind, s: NodeId) -> NodeId {
        let v = self.nodes[s.0].value.map(|x| kind.eval(x));
        self.push(Op::RotCoeff(kind, s), v)
    }

    /// Per-row singular values (descending) of d x d row-major matrices.
    pub fn sing_vals(&mut self, d: usize, j: NodeId) -> NodeId {
        let v = &self.nodes[j.0].value;
        assert_eq!(v.cols(), d * d, "sing_vals: expects n x d*d");
        let mut out = Tensor::zeros(v.rows(), d);
        for r in 0..v.rows() {
            let (_, s, _) = svd::svd_flat(d, v.row_slice(r));
            out.data_mut()[r * d..(r + 1) * d].copy_from_slice(&s[..d]);
        }
        self.push(Op::SingVals(d, j), out)
    }

    /// Exclusive prefix sums along each row: out[i] = sum of in[..i].
    pub fn cumsum_excl_rows(&mut self, a: NodeId) -> NodeId {
        let v = &self.nodes[a.0].value;
        let mut out = Tensor::zeros(v.rows(), v.cols());
        for r in 0..v.rows() {
            let mut acc = 0.0;
            for c in 0..v.cols() {
                out.set(r, c, acc);
                acc += v.at(r, c);
            }
        }
        self.push(Op::CumsumExclRows(a), out)
    }

    // ---- backward ----

    /// Backward pass from a scalar root (seeded with 1).
    pub fn backward(&self, root: NodeId) -> Adjoints {
        assert_eq!(self.nodes[root.0].value.len(), 1, "backward root must be scalar");
        self.backward_with(root, Tensor::scalar(1.0))
    }

    /// Backward pass with an explicit output adjoint.
    pub fn backward_with(&self, root: NodeId, seed: Tensor) -> Adjoints {
        assert_eq!(
            self.nodes[root.0].value.shape(),
            seed.shape(),
            "output adjoint shape mismatch"
        );
        let mut adj: Vec<Option<Tensor>> = Vec::with_capacity(self.nodes.len());
        adj.resize_with(self.nodes.len(), || None);
        adj[root.0] = Some(seed);

        for i in (0..=root.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            self.backprop_node(i, &g, &mut adj);
            adj[i] = Some(g);
        }
        Adjoints { adj }
    }

    fn backprop_node(&self, i: usize, g: &Tensor, adj: &mut [Option<Tensor>]) {
        let val = |id: NodeId| -> &Tensor { &self.nodes[id.0].value };
        match &self.nodes[i].op {
            Op::Leaf | Op::Param(_) => {}
            Op::Add(a, b) => {
                acc(adj, *a, g.clone());
                acc(adj, *b, g.clone());
            }
            Op::AddRow(a, b) => {
                acc(adj, *a, g.clone());
                let cols = g.cols();
                let mut gb = Tensor::zeros(1, cols);
                for r in 0..g.rows() {
                    for c in 0..cols {
                        gb.data_mut()[c] += g.at(r, c);
                    }
                }
                acc(adj, *b, gb);
            }
            Op::Sub(a, b) => {
                acc(adj, *a, g.clone());
                acc(adj, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                acc(adj, *a, zip_map(g, val(*b), |x, y| x * y));
                acc(adj, *b, zip_map(g, val(*a), |x, y| x * y));
            }
            Op::MulCol(a, b) => {
                let vb = val(*b);
                let va = val(*a);
                let cols = g.cols();
                let mut ga = g.clone();
                let mut gb = Tensor::zeros(vb.rows(), 1);
                for r in 0..g.rows() {
                    let s = vb.data()[r];
                    let mut dot = 0.0;
                    for c in 0..cols {
                        dot += g.at(r, c) * va.at(r, c);
                        ga.data_mut()[r * cols + c] *= s;
                    }
                    gb.data_mut()[r] = dot;
                }
                acc(adj, *a, ga);
                acc(adj, *b, gb);
            }
            Op::Div(a, b) => {
                let vb = val(*b);
                let va = val(*a);
                acc(adj, *a, zip_map(g, vb, |x, y| x / y));
                let gb = {
                    let mut out = g.clone();
                    for (o, (x, y)) in out
                        .data_mut()
                        .iter_mut()
                        .zip(va.data().iter().zip(vb.data().iter()))
                    {
                        *o *= -x / (y * y);
                    }
                    out
                };
                acc(adj, *b, gb);
            }
            Op::Scale(a, c) => acc(adj, *a, g.map(|x| x * c)),
            Op::AddScalar(a) => acc(adj, *a, g.clone()),
            Op::Neg(a) => acc(adj, *a, g.map(|x| -x)),
            Op::Matmul(a, b) => {
                acc(adj, *a, matmul_bt(g, val(*b)));
                acc(adj, *b, matmul_at(val(*a), g));
            }
            Op::Relu(a) => acc(adj, *a, zip_map(g, val(*a), |x, y| if y > 0.0 { x } else { 0.0 })),
            Op::ClampMin(a, floor) => {
                let f = *floor;
                acc(adj, *a, zip_map(g, val(*a), |x, y| if y > f { x } else { 0.0 }));
            }
            Op::Softplus(a) => acc(adj, *a, zip_map(g, val(*a), |x, y| x * sigmoid(y))),
            Op::Sigmoid(a) => {
                let y = &self.nodes[i].value;
                acc(adj, *a, zip_map(g, y, |x, s| x * s * (1.0 - s)));
            }
            Op::Sin(a) => acc(adj, *a, zip_map(g, val(*a), |x, y| x * y.cos())),
            Op::Cos(a) => acc(adj, *a, zip_map(g, val(*a), |x, y| -x * y.sin())),
            Op::Exp(a) => {
                let y = &self.nodes[i].value;
                acc(adj, *a, zip_map(g, y, |x, e| x * e));
            }
            Op::Ln(a) => acc(adj, *a, zip_map(g, val(*a), |x, y| x / y)),
            Op::Sqrt(a) => {
                let y = &self.nodes[i].value;
                acc(adj, *a, zip_map(g, y, |x, r| x / (2.0 * r)));
            }
            Op::Square(a) => acc(adj, *a, zip_map(g, val(*a), |x, y| 2.0 * x * y)),
            Op::Sum(a) => {
                let (r, c) = val(*a).shape();
                acc(adj, *a, Tensor::full(r, c, g.item()));
            }
            Op::Mean(a) => {
                let (r, c) = val(*a).shape();
                let n = (r * c) as f64;
                acc(adj, *a, Tensor::full(r, c, g.item() / n));
            }
            Op::RowSum(a) => {
                let (r, c) = val(*a).shape();
                let mut out = Tensor::zeros(r, c);
                for rr in 0..r {
                    let gv = g.data()[rr];
                    for cc in 0..c {
                        out.set(rr, cc, gv);
                    }
                }
                acc(adj, *a, out);
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                let total = g.cols();
                for &p in parts.iter() {
                    let w = val(p).cols();
                    let rows = g.rows();
                    let mut gp = Tensor::zeros(rows, w);
                    for r in 0..rows {
                        gp.data_mut()[r * w..(r + 1) * w]
                            .copy_from_slice(&g.data()[r * total + offset..r * total + offset + w]);
                    }
                    acc(adj, p, gp);
                    offset += w;
                }
            }
            Op::SliceCols(a, start, len) => {
                let (r, c) = val(*a).shape();
                let mut out = Tensor::zeros(r, c);
                for rr in 0..r {
                    out.data_mut()[rr * c + start..rr * c + start + len]
                        .copy_from_slice(&g.data()[rr * len..(rr + 1) * len]);
                }
                acc(adj, *a, out);
            }
            Op::Reshape(a, _, _) => {
                let (r, c) = val(*a).shape();
                acc(adj, *a, g.reshaped(r, c));
            }
            Op::Embed { table, indices } => {
                let vt = val(*table);
                let dim = vt.cols();
                let mut gt = Tensor::zeros(vt.rows(), dim);
                for (r, &idx) in indices.iter().enumerate() {
                    for c in 0..dim {
                        gt.data_mut()[idx * dim + c] += g.at(r, c);
                    }
                }
                acc(adj, *table, gt);
            }
            Op::Cross(a, b) => {
                // c = a x b; a_bar += b x c_bar; b_bar += c_bar x a
                let (va, vb) = (val(*a), val(*b));
                let mut ga = Tensor::zeros(va.rows(), 3);
                let mut gb = Tensor::zeros(va.rows(), 3);
                for r in 0..va.rows() {
                    let x = va.row_slice(r);
                    let y = vb.row_slice(r);
                    let gr = g.row_slice(r);
                    let oa = [
                        y[1] * gr[2] - y[2] * gr[1],
                        y[2] * gr[0] - y[0] * gr[2],
                        y[0] * gr[1] - y[1] * gr[0],
                    ];
                    let ob = [
                        gr[1] * x[2] - gr[2] * x[1],
                        gr[2] * x[0] - gr[0] * x[2],
                        gr[0] * x[1] - gr[1] * x[0],
                    ];
                    ga.data_mut()[r * 3..r * 3 + 3].copy_from_slice(&oa);
                    gb.data_mut()[r * 3..r * 3 + 3].copy_from_slice(&ob);
                }
                acc(adj, *a, ga);
                acc(adj, *b, gb);
            }
            Op::RotCoeff(kind, s) => {
                let k = *kind;
                acc(adj, *s, zip_map(g, val(*s), |x, sv| x * k.derivative_eval(sv)));
            }
            Op::SingVals(d, j) => {
                // sigma = diag part of the SVD; dJ = U diag(sigma_bar) V^T.
                let d = *d;
                let vj = val(*j);
                let mut gj = Tensor::zeros(vj.rows(), d * d);
                for r in 0..vj.rows() {
                    let (u, _, v) = svd::svd_flat(d, vj.row_slice(r));
                    let gr = g.row_slice(r);
                    let out = &mut gj.data_mut()[r * d * d..(r + 1) * d * d];
                    for a_i in 0..d {
                        for b_i in 0..d {
                            let mut acc_v = 0.0;
                            for k in 0..d {
                                acc_v += u[a_i * d + k] * gr[k] * v[b_i * d + k];
                            }
                            out[a_i * d + b_i] = acc_v;
                        }
                    }
                }
                acc(adj, *j, gj);
            }
            Op::CumsumExclRows(a) => {
                // x_bar[j] = sum_{i > j} g[i]: exclusive suffix sums.
                let (r, c) = val(*a).shape();
                let mut out = Tensor::zeros(r, c);
                for rr in 0..r {
                    let mut acc_v = 0.0;
                    for cc in (0..c).rev() {
                        out.set(rr, cc, acc_v);
                        acc_v += g.at(rr, cc);
                    }
                }
                acc(adj, *a, out);
            }
        }
    }

    // ---- forward-mode over the recorded graph ----

    /// Emits tangent nodes for every node in `0..upto`, given tangent seeds
    /// for selected leaves. Returns the tangent id per node (None = zero).
    ///
    /// Nodes appended by this call are not themselves traversed.
    pub fn jvp(&mut self, upto: usize, seeds: &[(NodeId, NodeId)]) -> Vec<Option<NodeId>> {
        let mut tan: Vec<Option<NodeId>> = vec![None; upto];
        for &(id, seed) in seeds {
            assert_eq!(
                self.shape(id),
                self.shape(seed),
                "jvp seed shape mismatch"
            );
            tan[id.0] = Some(seed);
        }
        for i in 0..upto {
            if tan[i].is_some() {
                continue; // seeded leaf
            }
            let op = self.nodes[i].op.clone();
            tan[i] = self.tangent_of(i, &op, &tan);
        }
        tan
    }

    /// Convenience: tangent node of `output` for each basis direction of
    /// `input` (an n x d tensor), yielding the d Jacobian columns.
    pub fn jvp_columns(&mut self, input: NodeId, output: NodeId, upto: usize) -> Vec<NodeId> {
        let (rows, dim) = self.shape(input);
        let mut cols = Vec::with_capacity(dim);
        for k in 0..dim {
            let mut seed = Tensor::zeros(rows, dim);
            for r in 0..rows {
                seed.set(r, k, 1.0);
            }
            let seed_id = self.input(seed);
            let tan = self.jvp(upto, &[(input, seed_id)]);
            cols.push(
                tan[output.0].unwrap_or_else(|| {
                    let (r, c) = self.shape(output);
                    self.input(Tensor::zeros(r, c))
                }),
            );
        }
        cols
    }

    fn tangent_of(&mut self, i: usize, op: &Op, tan: &[Option<NodeId>]) -> Option<NodeId> {
        let t = |id: NodeId| -> Option<NodeId> { tan[id.0] };
        match op {
            Op::Leaf | Op::Param(_) => None,
            Op::Add(a, b) => match (t(*a), t(*b)) {
                (Some(x), Some(y)) => Some(self.add(x, y)),
                (Some(x), None) => Some(x),
                (None, Some(y)) => Some(y),
                (None, None) => None,
            },
            Op::AddRow(a, b) => match (t(*a), t(*b)) {
                (Some(x), Some(y)) => Some(self.add_row(x, y)),
                (Some(x), None) => Some(x),
                (None, Some(y)) => {
                    let (r, c) = self.shape(NodeId(i));
                    let z = self.input(Tensor::zeros(r, c));
                    Some(self.add_row(z, y))
                }
                (None, None) => None,
            },
            Op::Sub(a, b) => match (t(*a), t(*b)) {
                (Some(x), Some(y)) => Some(self.sub(x, y)),
                (Some(x), None) => Some(x),
                (None, Some(y)) => Some(self.neg(y)),
                (None, None) => None,
            },
            Op::Mul(a, b) => {
                let mut parts = Vec::new();
                if let Some(x) = t(*a) {
                    parts.push(self.mul(x, *b));
                }
                if let Some(y) = t(*b) {
                    parts.push(self.mul(*a, y));
                }
                combine(self, parts)
            }
            Op::MulCol(a, b) => {
                let mut parts = Vec::new();
                if let Some(x) = t(*a) {
                    parts.push(self.mul_col(x, *b));
                }
                if let Some(y) = t(*b) {
                    parts.push(self.mul_col(*a, y));
                }
                combine(self, parts)
            }
            Op::Div(a, b) => {
                let mut parts = Vec::new();
                if let Some(x) = t(*a) {
                    parts.push(self.div(x, *b));
                }
                if let Some(y) = t(*b) {
                    let q = self.div(NodeId(i), *b); // y/b = a/b^2
                    let p = self.mul(q, y);
                    parts.push(self.neg(p));
                }
                combine(self, parts)
            }
            Op::Scale(a, c) => t(*a).map(|x| self.scale(x, *c)),
            Op::AddScalar(a) => t(*a),
            Op::Neg(a) => t(*a).map(|x| self.neg(x)),
            Op::Matmul(a, b) => {
                let mut parts = Vec::new();
                if let Some(x) = t(*a) {
                    parts.push(self.matmul(x, *b));
                }
                if let Some(y) = t(*b) {
                    parts.push(self.matmul(*a, y));
                }
                combine(self, parts)
            }
            Op::Relu(a) => t(*a).map(|x| {
                let m = self.gt_mask(*a, 0.0);
                self.mul(m, x)
            }),
            Op::ClampMin(a, floor) => t(*a).map(|x| {
                let m = self.gt_mask(*a, *floor);
                self.mul(m, x)
            }),
            Op::Softplus(a) => t(*a).map(|x| {
                let s = self.sigmoid(*a);
                self.mul(s, x)
            }),
            Op::Sigmoid(a) => t(*a).map(|x| {
                let y = NodeId(i);
                let ny = self.scale(y, -1.0);
                let om = self.add_scalar(ny, 1.0);
                let d = self.mul(y, om);
                self.mul(d, x)
            }),
            Op::Sin(a) => t(*a).map(|x| {
                let c = self.cos(*a);
                self.mul(c, x)
            }),
            Op::Cos(a) => t(*a).map(|x| {
                let s = self.sin(*a);
                let p = self.mul(s, x);
                self.neg(p)
            }),
            Op::Exp(a) => t(*a).map(|x| self.mul(NodeId(i), x)),
            Op::Ln(a) => t(*a).map(|x| self.div(x, *a)),
            Op::Sqrt(a) => t(*a).map(|x| {
                let two_y = self.scale(NodeId(i), 2.0);
                self.div(x, two_y)
            }),
            Op::Square(a) => t(*a).map(|x| {
                let two_a = self.scale(*a, 2.0);
                self.mul(two_a, x)
            }),
            Op::Sum(a) => t(*a).map(|x| self.sum(x)),
            Op::Mean(a) => t(*a).map(|x| self.mean(x)),
            Op::RowSum(a) => t(*a).map(|x| self.row_sum(x)),
            Op::Concat(parts) => {
                let parts = parts.clone();
                if parts.iter().all(|&p| t(p).is_none()) {
                    return None;
                }
                let mut tp = Vec::with_capacity(parts.len());
                for &p in parts.iter() {
                    match t(p) {
                        Some(x) => tp.push(x),
                        None => {
                            let (r, c) = self.shape(p);
                            tp.push(self.input(Tensor::zeros(r, c)));
                        }
                    }
                }
                Some(self.concat(&tp))
            }
            Op::SliceCols(a, start, len) => t(*a).map(|x| self.slice_cols(x, *start, *len)),
            Op::Reshape(a, r, c) => {
                let _ = a;
                t(*a).map(|x| self.reshape(x, *r, *c))
            }
            Op::Embed { table, indices } => {
                let indices = indices.clone();
                t(*table).map(|x| self.embed(x, &indices))
            }
            Op::Cross(a, b) => {
                let mut parts = Vec::new();
                if let Some(x) = t(*a) {
                    parts.push(self.cross(x, *b));
                }
                if let Some(y) = t(*b) {
                    parts.push(self.cross(*a, y));
                }
                combine(self, parts)
            }
            Op::RotCoeff(kind, s) => t(*s).map(|x| {
                let dk = kind
                    .derivative_kind()
                    .expect("jvp through a rot-coeff derivative is not supported");
                let d = self.rot_coeff(dk, *s);
                self.mul(d, x)
            }),
            Op::SingVals(_, _) => {
                panic!("jvp through singular values is not supported; differentiate them in reverse mode")
            }
            Op::CumsumExclRows(a) => t(*a).map(|x| self.cumsum_excl_rows(x)),
        }
    }
}

fn combine(tape: &mut Tape, parts: Vec<NodeId>) -> Option<NodeId> {
    let mut iter = parts.into_iter();
    let first = iter.next()?;
    Some(iter.fold(first, |a, b| tape.add(a, b)))
}

fn acc(adj: &mut [Option<Tensor>], id: NodeId, contribution: Tensor) {
    match &mut adj[id.0] {
        Some(existing) => add_assign(existing, &contribution),
        slot => *slot = Some(contribution),
    }
}

fn add_assign(a: &mut Tensor, b: &Tensor) {
    debug_assert!(a.same_shape(b));
    for (x, y) in a.data_mut().iter_mut().zip(b.data().iter()) {
        *x += y;
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    debug_assert!(a.same_shape(b));
    let data = a
        .data()
        .iter()
        .zip(b.data().iter())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::new(a.rows(), a.cols(), data)
}

/// Numerically stable softplus: max(x,0) + ln(1 + e^{-|x|}).
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const PAR_FLOPS_THRESHOLD: usize = 1 << 22;

/// C = A * B. Parallel over output rows; each output element is reduced
/// sequentially, so results are bit-identical for any thread count.
fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, k) = a.shape();
    let (_, m) = b.shape();
    let mut out = Tensor::zeros(n, m);
    let bd = b.data();
    let ad = a.data();
    let work = n * k * m;
    let body = |(i, row): (usize, &mut [f64])| {
        for l in 0..k {
            let av = ad[i * k + l];
            if av == 0.0 {
                continue;
            }
            let brow = &bd[l * m..(l + 1) * m];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    };
    if work >= PAR_FLOPS_THRESHOLD {
        out.data_mut().par_chunks_mut(m).enumerate().for_each(body);
    } else {
        out.data_mut().chunks_mut(m).enumerate().for_each(body);
    }
    out
}

/// C = A * B^T, with A: n x m, B: k x m -> n x k.
fn matmul_bt(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, m) = a.shape();
    let (k, mb) = b.shape();
    assert_eq!(m, mb);
    let mut out = Tensor::zeros(n, k);
    let ad = a.data();
    let bd = b.data();
    let work = n * m * k;
    let body = |(i, row): (usize, &mut [f64])| {
        let arow = &ad[i * m..(i + 1) * m];
        for (j, o) in row.iter_mut().enumerate() {
            let brow = &bd[j * m..(j + 1) * m];
            let mut s = 0.0;
            for (&x, &y) in arow.iter().zip(brow) {
                s += x * y;
            }
            *o = s;
        }
    };
    if work >= PAR_FLOPS_THRESHOLD {
        out.data_mut().par_chunks_mut(k).enumerate().for_each(body);
    } else {
        out.data_mut().chunks_mut(k).enumerate().for_each(body);
    }
    out
}

/// C = A^T * B, with A: n x k, B: n x m -> k x m.
fn matmul_at(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, k) = a.shape();
    let (_, m) = b.shape();
    let mut out = Tensor::zeros(k, m);
    let ad = a.data();
    let bd = b.data();
    let work = n * k * m;
    let body = |(i, row): (usize, &mut [f64])| {
        for l in 0..n {
            let av = ad[l * k + i];
            if av == 0.0 {
                continue;
            }
            let brow = &bd[l * m..(l + 1) * m];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    };
    if work >= PAR_FLOPS_THRESHOLD {
        out.data_mut().par_chunks_mut(m).enumerate().for_each(body);
    } else {
        out.data_mut().chunks_mut(m).enumerate().for_each(body);
    }
    out
}
