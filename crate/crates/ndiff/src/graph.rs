//! Computation tape and reverse sweep.
//!
//! Every primitive appends one node holding its forward value and enough
//! saved state to apply its vector-Jacobian product. Nodes are appended in
//! evaluation order, so the node list is already a topological order and
//! the reverse sweep is a single backward pass over it.

use std::sync::Arc;

use crate::conv::ConvGeom;
use crate::error::{Error, Result};
use crate::gemm::gemm;
use crate::tensor::Tensor;

/// Shared index buffer (edge endpoints, gather ids, segment offsets).
pub type Indices = Arc<[usize]>;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    Add,
    Hadamard,
    ScaleRows,
    Scale,
    Reshape,
    ConcatCols,
    StackRows,
    GatherRows,
    ScatterAddRows,
    SegmentSoftmax,
    Sddmm,
    Spmm,
    LeakyRelu,
    Tanh,
    Sigmoid,
    Dropout,
    BatchNorm,
    Conv2d,
    BceMean,
    Sum,
}

impl std::str::FromStr for OpKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let kind = match s {
            "matmul" => Self::MatMul,
            "add" => Self::Add,
            "hadamard" => Self::Hadamard,
            "scale_rows" => Self::ScaleRows,
            "scale" => Self::Scale,
            "reshape" => Self::Reshape,
            "concat_cols" => Self::ConcatCols,
            "stack_rows" => Self::StackRows,
            "gather_rows" => Self::GatherRows,
            "scatter_add_rows" => Self::ScatterAddRows,
            "segment_softmax" => Self::SegmentSoftmax,
            "sddmm" => Self::Sddmm,
            "spmm" => Self::Spmm,
            "leaky_relu" => Self::LeakyRelu,
            "tanh" => Self::Tanh,
            "sigmoid" => Self::Sigmoid,
            "dropout" => Self::Dropout,
            "batch_norm" => Self::BatchNorm,
            "conv2d" => Self::Conv2d,
            "bce_mean" => Self::BceMean,
            "sum" => Self::Sum,
            other => return Err(format!("unknown primitive `{other}`")),
        };
        Ok(kind)
    }
}

pub(crate) enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Add {
        a: Var,
        b: Var,
        broadcast: bool,
    },
    Hadamard {
        a: Var,
        b: Var,
        broadcast: bool,
    },
    ScaleRows {
        a: Var,
        s: Var,
    },
    Scale {
        a: Var,
        c: f64,
    },
    Reshape {
        a: Var,
    },
    ConcatCols {
        parts: Vec<Var>,
    },
    StackRows {
        parts: Vec<Var>,
    },
    GatherRows {
        table: Var,
        ids: Indices,
    },
    ScatterAddRows {
        src: Var,
        ids: Indices,
    },
    SegmentSoftmax {
        scores: Var,
        offsets: Indices,
    },
    Sddmm {
        a: Var,
        b: Var,
        ia: Indices,
        ib: Indices,
    },
    Spmm {
        weights: Var,
        values: Var,
        cols: Indices,
        offsets: Indices,
    },
    LeakyRelu {
        a: Var,
        slope: f64,
    },
    Tanh {
        a: Var,
    },
    Sigmoid {
        a: Var,
    },
    Dropout {
        a: Var,
        mask: Vec<f64>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    Conv2d {
        input: Var,
        kernels: Var,
        geom: ConvGeom,
    },
    BceMean {
        probs: Var,
        labels: Vec<f64>,
    },
    Sum {
        a: Var,
    },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::Add { .. } => OpKind::Add,
            Op::Hadamard { .. } => OpKind::Hadamard,
            Op::ScaleRows { .. } => OpKind::ScaleRows,
            Op::Scale { .. } => OpKind::Scale,
            Op::Reshape { .. } => OpKind::Reshape,
            Op::ConcatCols { .. } => OpKind::ConcatCols,
            Op::StackRows { .. } => OpKind::StackRows,
            Op::GatherRows { .. } => OpKind::GatherRows,
            Op::ScatterAddRows { .. } => OpKind::ScatterAddRows,
            Op::SegmentSoftmax { .. } => OpKind::SegmentSoftmax,
            Op::Sddmm { .. } => OpKind::Sddmm,
            Op::Spmm { .. } => OpKind::Spmm,
            Op::LeakyRelu { .. } => OpKind::LeakyRelu,
            Op::Tanh { .. } => OpKind::Tanh,
            Op::Sigmoid { .. } => OpKind::Sigmoid,
            Op::Dropout { .. } => OpKind::Dropout,
            Op::BatchNorm { .. } => OpKind::BatchNorm,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::BceMean { .. } => OpKind::BceMean,
            Op::Sum { .. } => OpKind::Sum,
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul { a, b, .. } | Op::Add { a, b, .. } | Op::Hadamard { a, b, .. } | Op::Sddmm { a, b, .. } => {
                vec![*a, *b]
            }
            Op::ScaleRows { a, s } => vec![*a, *s],
            Op::Scale { a, .. }
            | Op::Reshape { a }
            | Op::LeakyRelu { a, .. }
            | Op::Tanh { a }
            | Op::Sigmoid { a }
            | Op::Dropout { a, .. }
            | Op::Sum { a } => vec![*a],
            Op::ConcatCols { parts } | Op::StackRows { parts } => parts.clone(),
            Op::GatherRows { table, .. } => vec![*table],
            Op::ScatterAddRows { src, .. } => vec![*src],
            Op::SegmentSoftmax { scores, .. } => vec![*scores],
            Op::Spmm { weights, values, .. } => vec![*weights, *values],
            Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Conv2d { input, kernels, .. } => vec![*input, *kernels],
            Op::BceMean { probs, .. } => vec![*probs],
        }
    }
}

pub(crate) struct Node {
    pub(crate) value: Tensor,
    pub(crate) op: Op,
    pub(crate) requires_grad: bool,
}

/// A recorded computation. Build it forward through the primitive methods,
/// then call [`Graph::backward`] once on a scalar output.
#[derive(Default)]
pub struct Graph {
    pub(crate) nodes: Vec<Node>,
    fault: Option<(OpKind, f64)>,
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

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Scales the vector-Jacobian product of every `kind` node by `factor`.
    /// Only meant for negative controls of the gradient checker.
    #[doc(hidden)]
    pub fn inject_vjp_fault(&mut self, kind: OpKind, factor: f64) {
        self.fault = Some((kind, factor));
    }

    pub(crate) fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse sweep from the scalar `output`. Returns gradients for every
    /// leaf created with `requires_grad` that the output depends on.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        if self.nodes[output.0].value.len() != 1 {
            return Err(Error::Invalid {
                op: "backward",
                detail: format!(
                    "output must be scalar, got shape {:?}",
                    self.nodes[output.0].value.shape()
                ),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(vec![1.0]);
        for id in (0..=output.0).rev() {
            let Some(mut gout) = grads[id].take() else {
                continue;
            };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                grads[id] = Some(gout);
                continue;
            }
            if let Some((kind, factor)) = self.fault {
                if kind == node.op.kind() {
                    gout.iter_mut().for_each(|g| *g *= factor);
                }
            }
            self.vjp(id, &gout, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn vjp(&self, id: usize, gout: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (m, k) = (av.dim(0), av.dim(1));
                let n = out.dim(1);
                if let Some(da) = self.slot(grads, *a) {
                    // dA = dC · Bᵀ   (B is k×n, or n×k when trans_b)
                    gemm(m, n, k, gout, false, bv.data(), !*trans_b, da, true);
                }
                if let Some(db) = self.slot(grads, *b) {
                    if *trans_b {
                        gemm(n, m, k, gout, true, av.data(), false, db, true);
                    } else {
                        gemm(k, m, n, av.data(), true, gout, false, db, true);
                    }
                }
            }
            Op::Add { a, b, broadcast } => {
                if let Some(da) = self.slot(grads, *a) {
                    add_into(da, gout);
                }
                if let Some(db) = self.slot(grads, *b) {
                    if *broadcast {
                        let cols = db.len();
                        for row in gout.chunks(cols) {
                            add_into(db, row);
                        }
                    } else {
                        add_into(db, gout);
                    }
                }
            }
            Op::Hadamard { a, b, broadcast } => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let cols = bv.len();
                if let Some(da) = self.slot(grads, *a) {
                    if *broadcast {
                        for (drow, grow) in da.chunks_mut(cols).zip(gout.chunks(cols)) {
                            for ((d, g), bb) in drow.iter_mut().zip(grow).zip(bv) {
                                *d += g * bb;
                            }
                        }
                    } else {
                        for ((d, g), bb) in da.iter_mut().zip(gout).zip(bv) {
                            *d += g * bb;
                        }
                    }
                }
                if let Some(db) = self.slot(grads, *b) {
                    if *broadcast {
                        for (arow, grow) in av.chunks(cols).zip(gout.chunks(cols)) {
                            for ((d, g), aa) in db.iter_mut().zip(grow).zip(arow) {
                                *d += g * aa;
                            }
                        }
                    } else {
                        for ((d, g), aa) in db.iter_mut().zip(gout).zip(av) {
                            *d += g * aa;
                        }
                    }
                }
            }
            Op::ScaleRows { a, s } => {
                let av = self.value(*a);
                let sv = self.value(*s).data();
                let cols = av.dim(1);
                if let Some(da) = self.slot(grads, *a) {
                    for ((drow, grow), sc) in da.chunks_mut(cols).zip(gout.chunks(cols)).zip(sv) {
                        for (d, g) in drow.iter_mut().zip(grow) {
                            *d += g * sc;
                        }
                    }
                }
                if let Some(ds) = self.slot(grads, *s) {
                    for ((d, grow), arow) in ds.iter_mut().zip(gout.chunks(cols)).zip(av.data().chunks(cols)) {
                        *d += dot(grow, arow);
                    }
                }
            }
            Op::Scale { a, c } => {
                if let Some(da) = self.slot(grads, *a) {
                    for (d, g) in da.iter_mut().zip(gout) {
                        *d += c * g;
                    }
                }
            }
            Op::Reshape { a } => {
                if let Some(da) = self.slot(grads, *a) {
                    add_into(da, gout);
                }
            }
            Op::ConcatCols { parts } => {
                let rows = out.dim(0);
                let total = out.dim(1);
                let mut offset = 0;
                for p in parts {
                    let width = self.value(*p).dim(1);
                    if let Some(dp) = self.slot(grads, *p) {
                        for r in 0..rows {
                            add_into(
                                &mut dp[r * width..(r + 1) * width],
                                &gout[r * total + offset..r * total + offset + width],
                            );
                        }
                    }
                    offset += width;
                }
            }
            Op::StackRows { parts } => {
                let each = gout.len() / parts.len().max(1);
                for (i, p) in parts.iter().enumerate() {
                    if let Some(dp) = self.slot(grads, *p) {
                        add_into(dp, &gout[i * each..(i + 1) * each]);
                    }
                }
            }
            Op::GatherRows { table, ids } => {
                if let Some(dt) = self.slot(grads, *table) {
                    let cols = out.dim(1);
                    for (e, &row) in ids.iter().enumerate() {
                        add_into(&mut dt[row * cols..(row + 1) * cols], &gout[e * cols..(e + 1) * cols]);
                    }
                }
            }
            Op::ScatterAddRows { src, ids } => {
                if let Some(ds) = self.slot(grads, *src) {
                    let cols = out.dim(1);
                    for (e, &row) in ids.iter().enumerate() {
                        add_into(&mut ds[e * cols..(e + 1) * cols], &gout[row * cols..(row + 1) * cols]);
                    }
                }
            }
            Op::SegmentSoftmax { scores, offsets } => {
                if let Some(ds) = self.slot(grads, *scores) {
                    let y = out.data();
                    for w in offsets.windows(2) {
                        let (lo, hi) = (w[0], w[1]);
                        let inner = dot(&y[lo..hi], &gout[lo..hi]);
                        for i in lo..hi {
                            ds[i] += y[i] * (gout[i] - inner);
                        }
                    }
                }
            }
            Op::Sddmm { a, b, ia, ib } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let cols = av.dim(1);
                if let Some(da) = self.slot(grads, *a) {
                    for (e, (&i, &j)) in ia.iter().zip(ib.iter()).enumerate() {
                        axpy(&mut da[i * cols..(i + 1) * cols], gout[e], bv.row(j));
                    }
                }
                if let Some(db) = self.slot(grads, *b) {
                    for (e, (&i, &j)) in ia.iter().zip(ib.iter()).enumerate() {
                        axpy(&mut db[j * cols..(j + 1) * cols], gout[e], av.row(i));
                    }
                }
            }
            Op::Spmm {
                weights,
                values,
                cols,
                offsets,
            } => {
                let wv = self.value(*weights).data();
                let vv = self.value(*values);
                let width = vv.dim(1);
                if let Some(dw) = self.slot(grads, *weights) {
                    for (row, w) in offsets.windows(2).enumerate() {
                        let g = &gout[row * width..(row + 1) * width];
                        for e in w[0]..w[1] {
                            dw[e] += dot(g, vv.row(cols[e]));
                        }
                    }
                }
                if let Some(dv) = self.slot(grads, *values) {
                    for (row, w) in offsets.windows(2).enumerate() {
                        let g = &gout[row * width..(row + 1) * width];
                        for e in w[0]..w[1] {
                            let j = cols[e];
                            axpy(&mut dv[j * width..(j + 1) * width], wv[e], g);
                        }
                    }
                }
            }
            Op::LeakyRelu { a, slope } => {
                let x = self.value(*a).data();
                if let Some(da) = self.slot(grads, *a) {
                    for ((d, g), xi) in da.iter_mut().zip(gout).zip(x) {
                        *d += if *xi > 0.0 { *g } else { slope * g };
                    }
                }
            }
            Op::Tanh { a } => {
                if let Some(da) = self.slot(grads, *a) {
                    for ((d, g), y) in da.iter_mut().zip(gout).zip(out.data()) {
                        *d += g * (1.0 - y * y);
                    }
                }
            }
            Op::Sigmoid { a } => {
                if let Some(da) = self.slot(grads, *a) {
                    for ((d, g), y) in da.iter_mut().zip(gout).zip(out.data()) {
                        *d += g * y * (1.0 - y);
                    }
                }
            }
            Op::Dropout { a, mask } => {
                if let Some(da) = self.slot(grads, *a) {
                    for ((d, g), m) in da.iter_mut().zip(gout).zip(mask) {
                        *d += g * m;
                    }
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let features = inv_std.len();
                let batch = xhat.len() / features.max(1);
                let gv = self.value(*gamma).data();
                if let Some(dg) = self.slot(grads, *gamma) {
                    for (grow, xrow) in gout.chunks(features).zip(xhat.chunks(features)) {
                        for ((d, g), xh) in dg.iter_mut().zip(grow).zip(xrow) {
                            *d += g * xh;
                        }
                    }
                }
                if let Some(db) = self.slot(grads, *beta) {
                    for grow in gout.chunks(features) {
                        add_into(db, grow);
                    }
                }
                if let Some(dx) = self.slot(grads, *x) {
                    if *batch_stats {
                        let n = batch as f64;
                        let mut sum_dxhat = vec![0.0; features];
                        let mut sum_dxhat_xhat = vec![0.0; features];
                        for (grow, xrow) in gout.chunks(features).zip(xhat.chunks(features)) {
                            for j in 0..features {
                                let dxh = grow[j] * gv[j];
                                sum_dxhat[j] += dxh;
                                sum_dxhat_xhat[j] += dxh * xrow[j];
                            }
                        }
                        for ((drow, grow), xrow) in dx
                            .chunks_mut(features)
                            .zip(gout.chunks(features))
                            .zip(xhat.chunks(features))
                        {
                            for j in 0..features {
                                let dxh = grow[j] * gv[j];
                                drow[j] += inv_std[j] / n * (n * dxh - sum_dxhat[j] - xrow[j] * sum_dxhat_xhat[j]);
                            }
                        }
                    } else {
                        for (drow, grow) in dx.chunks_mut(features).zip(gout.chunks(features)) {
                            for j in 0..features {
                                drow[j] += grow[j] * gv[j] * inv_std[j];
                            }
                        }
                    }
                }
            }
            Op::Conv2d { input, kernels, geom } => {
                let iv = self.value(*input).data();
                let kv = self.value(*kernels).data();
                let want_input = self.nodes[input.0].requires_grad;
                let want_kernels = self.nodes[kernels.0].requires_grad;
                let mut dinput = want_input.then(|| vec![0.0; iv.len()]);
                let mut dkernels = want_kernels.then(|| vec![0.0; kv.len()]);
                geom.backward(iv, kv, gout, dinput.as_deref_mut(), dkernels.as_deref_mut());
                if let (Some(src), Some(di)) = (dinput, self.slot(grads, *input)) {
                    add_into(di, &src);
                }
                if let (Some(src), Some(dk)) = (dkernels, self.slot(grads, *kernels)) {
                    add_into(dk, &src);
                }
            }
            Op::BceMean { probs, labels } => {
                let p = self.value(*probs).data();
                if let Some(dp) = self.slot(grads, *probs) {
                    let n = p.len() as f64;
                    let g = gout[0];
                    for ((d, &pi), &yi) in dp.iter_mut().zip(p).zip(labels) {
                        if pi <= crate::ops::BCE_CLAMP || pi >= 1.0 - crate::ops::BCE_CLAMP {
                            continue;
                        }
                        *d += -g / n * (yi / pi - (1.0 - yi) / (1.0 - pi));
                    }
                }
            }
            Op::Sum { a } => {
                if let Some(da) = self.slot(grads, *a) {
                    let g = gout[0];
                    da.iter_mut().for_each(|d| *d += g);
                }
            }
        }
    }

    /// Gradient accumulator for `v`, allocated on first use; `None` when
    /// nothing upstream of `v` needs a gradient.
    fn slot<'a>(&self, grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut [f64]> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        Some(
            grads[v.0]
                .get_or_insert_with(|| vec![0.0; node.value.len()])
                .as_mut_slice(),
        )
    }
}

/// Leaf gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of a leaf, or `None` if the output does not depend on it.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn axpy(y: &mut [f64], alpha: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
