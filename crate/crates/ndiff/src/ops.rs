//! Forward definitions of the differentiable primitives.

use rand::Rng;

use crate::conv::ConvGeom;
use crate::error::{shape_err, Error, Result};
use crate::gemm::gemm;
use crate::graph::{axpy, dot, Graph, Indices, Op, Var};
use crate::norm::BatchNormMode;
use crate::tensor::Tensor;

/// Probabilities are clamped into `[BCE_CLAMP, 1 - BCE_CLAMP]` before the log.
pub const BCE_CLAMP: f64 = 1e-12;

impl Graph {
    fn matrix_dims(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match self.shape(v) {
            &[r, c] => Ok((r, c)),
            s => Err(shape_err(op, format!("expected a matrix, got {s:?}"))),
        }
    }

    /// `a · b`, shapes m×k and k×n.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ`, shapes m×k and n×k.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (m, k) = self.matrix_dims("matmul", a)?;
        let (br, bc) = self.matrix_dims("matmul", b)?;
        let (kb, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != kb {
            return Err(shape_err(
                "matmul",
                format!(
                    "inner dimensions differ: {m}x{k} by {:?}{}",
                    self.shape(b),
                    if trans_b { "ᵀ" } else { "" }
                ),
            ));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            trans_b,
            &mut out,
            false,
        );
        Ok(self.push(Tensor::new([m, n], out)?, Op::MatMul { a, b, trans_b }))
    }

    /// Row-broadcast check: `b` equal-shaped with `a`, or a vector matching
    /// the trailing dimension of a matrix `a`.
    fn broadcast_mode(&self, op: &'static str, a: Var, b: Var) -> Result<bool> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            return Ok(false);
        }
        if sa.len() == 2 && sb.len() == 1 && sb[0] == sa[1] {
            return Ok(true);
        }
        Err(shape_err(op, format!("{sa:?} vs {sb:?}")))
    }

    /// Elementwise sum. `b` may be a row vector broadcast over the rows of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let broadcast = self.broadcast_mode("add", a, b)?;
        let out = self.zip_broadcast(a, b, |x, y| x + y);
        Ok(self.push(out, Op::Add { a, b, broadcast }))
    }

    /// Elementwise product. `b` may be a row vector broadcast over the rows of `a`.
    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        let broadcast = self.broadcast_mode("hadamard", a, b)?;
        let out = self.zip_broadcast(a, b, |x, y| x * y);
        Ok(self.push(out, Op::Hadamard { a, b, broadcast }))
    }

    fn zip_broadcast(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let av = self.value(a);
        let bv = self.value(b).data();
        let data = av
            .data()
            .chunks(bv.len().max(1))
            .flat_map(|row| row.iter().zip(bv).map(|(&x, &y)| f(x, y)))
            .collect();
        Tensor::new(av.shape(), data).expect("shape preserved")
    }

    /// Multiplies row `i` of matrix `a` by `s[i]`.
    pub fn scale_rows(&mut self, a: Var, s: Var) -> Result<Var> {
        let (rows, cols) = self.matrix_dims("scale_rows", a)?;
        if self.value(s).len() != rows {
            return Err(shape_err(
                "scale_rows",
                format!("{rows} rows but {} scales", self.value(s).len()),
            ));
        }
        let sv = self.value(s).data();
        let data = self
            .value(a)
            .data()
            .chunks(cols.max(1))
            .zip(sv)
            .flat_map(|(row, &c)| row.iter().map(move |x| x * c))
            .collect();
        let out = Tensor::new([rows, cols], data)?;
        Ok(self.push(out, Op::ScaleRows { a, s }))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let av = self.value(a);
        let out = Tensor::new(av.shape(), av.data().iter().map(|x| x * c).collect()).expect("shape preserved");
        self.push(out, Op::Scale { a, c })
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        let av = self.value(a);
        if shape.iter().product::<usize>() != av.len() {
            return Err(shape_err("reshape", format!("{:?} into {shape:?}", av.shape())));
        }
        let out = Tensor::new(shape, av.data().to_vec())?;
        Ok(self.push(out, Op::Reshape { a }))
    }

    /// Concatenates matrices with equal row counts along the column axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Invalid {
                op: "concat_cols",
                detail: "no inputs".into(),
            });
        }
        let rows = self.matrix_dims("concat_cols", parts[0])?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.matrix_dims("concat_cols", p)?;
            if r != rows {
                return Err(shape_err("concat_cols", format!("row counts {rows} and {r}")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let out = Tensor::new([rows, total], data)?;
        Ok(self.push(out, Op::ConcatCols { parts: parts.to_vec() }))
    }

    /// Stacks equal-shaped tensors along a new leading axis.
    pub fn stack_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Invalid {
                op: "stack_rows",
                detail: "no inputs".into(),
            });
        }
        let inner = self.shape(parts[0]).to_vec();
        let mut data = Vec::with_capacity(parts.len() * self.value(parts[0]).len());
        for &p in parts {
            if self.shape(p) != inner.as_slice() {
                return Err(shape_err("stack_rows", format!("{inner:?} vs {:?}", self.shape(p))));
            }
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![parts.len()];
        shape.extend(inner);
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::StackRows { parts: parts.to_vec() }))
    }

    /// `out[e] = table[ids[e]]`.
    pub fn gather_rows(&mut self, table: Var, ids: impl Into<Indices>) -> Result<Var> {
        let ids = ids.into();
        let (rows, cols) = self.matrix_dims("gather_rows", table)?;
        check_ids("gather_rows", &ids, rows)?;
        let tv = self.value(table);
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &i in ids.iter() {
            data.extend_from_slice(tv.row(i));
        }
        let out = Tensor::new([ids.len(), cols], data)?;
        Ok(self.push(out, Op::GatherRows { table, ids }))
    }

    /// `out[ids[e]] += src[e]` into a zero matrix with `rows` rows.
    pub fn scatter_add_rows(&mut self, src: Var, ids: impl Into<Indices>, rows: usize) -> Result<Var> {
        let ids = ids.into();
        let (n, cols) = self.matrix_dims("scatter_add_rows", src)?;
        if ids.len() != n {
            return Err(shape_err("scatter_add_rows", format!("{n} rows but {} ids", ids.len())));
        }
        check_ids("scatter_add_rows", &ids, rows)?;
        let sv = self.value(src);
        let mut out = Tensor::zeros([rows, cols]);
        for (e, &i) in ids.iter().enumerate() {
            axpy(out.row_mut(i), 1.0, sv.row(e));
        }
        Ok(self.push(out, Op::ScatterAddRows { src, ids }))
    }

    /// Softmax within each segment `scores[offsets[s]..offsets[s + 1]]`,
    /// with per-segment max subtraction.
    pub fn segment_softmax(&mut self, scores: Var, offsets: impl Into<Indices>) -> Result<Var> {
        let offsets = offsets.into();
        let x = self.value(scores);
        if x.rank() != 1 {
            return Err(shape_err(
                "segment_softmax",
                format!("expected a vector, got {:?}", x.shape()),
            ));
        }
        check_offsets("segment_softmax", &offsets, x.len())?;
        let x = x.data();
        let mut y = vec![0.0; x.len()];
        for w in offsets.windows(2) {
            let (lo, hi) = (w[0], w[1]);
            if lo == hi {
                continue;
            }
            let max = x[lo..hi].iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for i in lo..hi {
                y[i] = (x[i] - max).exp();
                z += y[i];
            }
            for v in &mut y[lo..hi] {
                *v /= z;
            }
        }
        let out = Tensor::new([x.len()], y)?;
        Ok(self.push(out, Op::SegmentSoftmax { scores, offsets }))
    }

    /// Sampled dense-dense product: `out[e] = <a[ia[e]], b[ib[e]]>`.
    pub fn sddmm(&mut self, a: Var, b: Var, ia: impl Into<Indices>, ib: impl Into<Indices>) -> Result<Var> {
        let (ia, ib) = (ia.into(), ib.into());
        let (ra, ca) = self.matrix_dims("sddmm", a)?;
        let (rb, cb) = self.matrix_dims("sddmm", b)?;
        if ca != cb || ia.len() != ib.len() {
            return Err(shape_err(
                "sddmm",
                format!("widths {ca}/{cb}, index lengths {}/{}", ia.len(), ib.len()),
            ));
        }
        check_ids("sddmm", &ia, ra)?;
        check_ids("sddmm", &ib, rb)?;
        let (av, bv) = (self.value(a), self.value(b));
        let data = ia
            .iter()
            .zip(ib.iter())
            .map(|(&i, &j)| dot(av.row(i), bv.row(j)))
            .collect();
        let out = Tensor::new([ia.len()], data)?;
        Ok(self.push(out, Op::Sddmm { a, b, ia, ib }))
    }

    /// Segment-weighted row sum:
    /// `out[s] = Σ_{e ∈ offsets[s]..offsets[s+1]} weights[e] · values[cols[e]]`.
    pub fn spmm(
        &mut self,
        weights: Var,
        values: Var,
        cols: impl Into<Indices>,
        offsets: impl Into<Indices>,
    ) -> Result<Var> {
        let (cols, offsets) = (cols.into(), offsets.into());
        let wv = self.value(weights);
        if wv.rank() != 1 || wv.len() != cols.len() {
            return Err(shape_err(
                "spmm",
                format!("weights {:?} for {} edges", wv.shape(), cols.len()),
            ));
        }
        let (rows, width) = self.matrix_dims("spmm", values)?;
        check_ids("spmm", &cols, rows)?;
        check_offsets("spmm", &offsets, cols.len())?;
        let segments = offsets.len() - 1;
        let vv = self.value(values);
        let wv = wv.data();
        let mut out = Tensor::zeros([segments, width]);
        for (s, w) in offsets.windows(2).enumerate() {
            let row = out.row_mut(s);
            for e in w[0]..w[1] {
                axpy(row, wv[e], vv.row(cols[e]));
            }
        }
        Ok(self.push(
            out,
            Op::Spmm {
                weights,
                values,
                cols,
                offsets,
            },
        ))
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let av = self.value(a);
        Tensor::new(av.shape(), av.data().iter().map(|&x| f(x)).collect()).expect("shape preserved")
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let out = self.map(a, |x| if x > 0.0 { x } else { slope * x });
        self.push(out, Op::LeakyRelu { a, slope })
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.map(a, f64::tanh);
        self.push(out, Op::Tanh { a })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.map(a, sigmoid);
        self.push(out, Op::Sigmoid { a })
    }

    /// Inverted dropout: kept activations are scaled by `1 / (1 - p)`.
    /// Outside training (or with `p == 0`) this returns `a` unchanged.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, p: f64, train: bool, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Invalid {
                op: "dropout",
                detail: format!("rate {p} outside [0, 1)"),
            });
        }
        if !train || p == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 / (1.0 - p);
        let av = self.value(a);
        let mask: Vec<f64> = (0..av.len())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let data = av.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let out = Tensor::new(av.shape(), data)?;
        Ok(self.push(out, Op::Dropout { a, mask }))
    }

    /// Batch normalization over the rows of a B×F matrix with affine
    /// `gamma`, `beta` of length F.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, mode: BatchNormMode<'_>) -> Result<Var> {
        let (batch, features) = self.matrix_dims("batch_norm", x)?;
        for p in [gamma, beta] {
            if self.shape(p) != [features] {
                return Err(shape_err(
                    "batch_norm",
                    format!("affine {:?} for {features} features", self.shape(p)),
                ));
            }
        }
        let xv = self.value(x).data();
        let (mean, inv_std, batch_stats) = match mode {
            BatchNormMode::Train(state) => {
                state.check(features)?;
                if batch == 0 {
                    return Err(shape_err("batch_norm", "empty batch"));
                }
                let n = batch as f64;
                let mut mean = vec![0.0; features];
                for row in xv.chunks(features) {
                    axpy(&mut mean, 1.0 / n, row);
                }
                let mut var = vec![0.0; features];
                for row in xv.chunks(features) {
                    for j in 0..features {
                        let d = row[j] - mean[j];
                        var[j] += d * d / n;
                    }
                }
                state.update(&mean, &var, batch);
                let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + state.eps).sqrt()).collect();
                (mean, inv_std, true)
            }
            BatchNormMode::Eval(state) => {
                state.check(features)?;
                let inv_std = state.running_var.iter().map(|v| 1.0 / (v + state.eps).sqrt()).collect();
                (state.running_mean.clone(), inv_std, false)
            }
        };
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for r in 0..batch {
            for j in 0..features {
                let i = r * features + j;
                xhat[i] = (xv[i] - mean[j]) * inv_std[j];
                out[i] = gv[j] * xhat[i] + bv[j];
            }
        }
        let out = Tensor::new([batch, features], out)?;
        Ok(self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
        ))
    }

    /// Valid-padding, stride-1 cross-correlation of a `[B, C, H, W]` input
    /// with `[O, C, KH, KW]` kernels, producing `[B, O, H-KH+1, W-KW+1]`.
    pub fn conv2d(&mut self, input: Var, kernels: Var) -> Result<Var> {
        let (&[batch, in_ch, height, width], &[out_ch, kc, kh, kw]) = (self.shape(input), self.shape(kernels)) else {
            return Err(shape_err(
                "conv2d",
                format!(
                    "need rank-4 input and kernels, got {:?} and {:?}",
                    self.shape(input),
                    self.shape(kernels)
                ),
            ));
        };
        if kc != in_ch {
            return Err(shape_err(
                "conv2d",
                format!("input has {in_ch} channels, kernels expect {kc}"),
            ));
        }
        if kh == 0 || kw == 0 || kh > height || kw > width {
            return Err(shape_err(
                "conv2d",
                format!("kernel {kh}x{kw} does not fit input {height}x{width}"),
            ));
        }
        let geom = ConvGeom {
            batch,
            in_ch,
            height,
            width,
            out_ch,
            kh,
            kw,
        };
        let data = geom.forward(self.value(input).data(), self.value(kernels).data());
        let out = Tensor::new([batch, out_ch, geom.out_h(), geom.out_w()], data)?;
        Ok(self.push(out, Op::Conv2d { input, kernels, geom }))
    }

    /// Mean binary cross-entropy between `probs` and constant `labels` of
    /// the same shape, with probabilities clamped by [`BCE_CLAMP`].
    pub fn bce_mean(&mut self, probs: Var, labels: &Tensor) -> Result<Var> {
        let pv = self.value(probs);
        if pv.shape() != labels.shape() {
            return Err(shape_err(
                "bce_mean",
                format!("{:?} vs {:?}", pv.shape(), labels.shape()),
            ));
        }
        if pv.is_empty() {
            return Err(shape_err("bce_mean", "empty input"));
        }
        if !pv.all_finite() {
            return Err(Error::NonFinite("bce_mean input".into()));
        }
        if labels.data().iter().any(|y| !(0.0..=1.0).contains(y)) {
            return Err(Error::Invalid {
                op: "bce_mean",
                detail: "labels must lie in [0, 1]".into(),
            });
        }
        let n = pv.len() as f64;
        let loss = -pv
            .data()
            .iter()
            .zip(labels.data())
            .map(|(&p, &y)| {
                let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
                y * p.ln() + (1.0 - y) * (1.0 - p).ln()
            })
            .sum::<f64>()
            / n;
        let labels = labels.data().to_vec();
        Ok(self.push(Tensor::scalar(loss), Op::BceMean { probs, labels }))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum { a })
    }
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn check_ids(op: &'static str, ids: &[usize], bound: usize) -> Result<()> {
    match ids.iter().find(|&&i| i >= bound) {
        Some(&index) => Err(Error::Index { op, index, bound }),
        None => Ok(()),
    }
}

fn check_offsets(op: &'static str, offsets: &[usize], len: usize) -> Result<()> {
    let ok = !offsets.is_empty()
        && offsets[0] == 0
        && *offsets.last().unwrap() == len
        && offsets.windows(2).all(|w| w[0] <= w[1]);
    if ok {
        Ok(())
    } else {
        Err(Error::Invalid {
            op,
            detail: format!("offsets must be nondecreasing from 0 to {len}"),
        })
    }
}
