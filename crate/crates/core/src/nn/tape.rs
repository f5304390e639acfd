//! Reverse-mode tape over a fixed set of matrix primitives.
//!
//! Every node stores its forward value. `backward` walks the tape once in
//! reverse order and applies each primitive's analytic adjoint; there is no
//! general-purpose graph differentiation beyond these primitives.

use std::collections::HashMap;
use std::rc::Rc;

use super::mat::{gemm, Mat};
use super::params::{ParamGrads, ParamId, ParamStore};
use crate::error::{Error, Result};

/// Variance floor used by layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Boolean attention mask over `rows x cols` entries plus per-row presence.
///
/// Rows whose node is absent produce zero attention output.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMask {
    pub rows: usize,
    pub cols: usize,
    pub present: Vec<bool>,
    pub allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn full(n: usize) -> Self {
        AttentionMask {
            rows: n,
            cols: n,
            present: vec![true; n],
            allowed: vec![true; n * n],
        }
    }

    pub fn diagonal(n: usize) -> Self {
        let mut m = AttentionMask {
            rows: n,
            cols: n,
            present: vec![true; n],
            allowed: vec![false; n * n],
        };
        for i in 0..n {
            m.allowed[i * n + i] = true;
        }
        m
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: bool) {
        self.allowed[i * self.cols + j] = v;
    }

    pub fn count_true(&self) -> usize {
        self.allowed.iter().filter(|&&b| b).count()
    }

    pub fn is_symmetric(&self) -> bool {
        self.rows == self.cols
            && (0..self.rows).all(|i| (0..i).all(|j| self.get(i, j) == self.get(j, i)))
    }

    /// Every present row must allow at least one entry.
    pub fn validate(&self) -> Result<()> {
        if self.present.len() != self.rows || self.allowed.len() != self.rows * self.cols {
            return Err(Error::shape("AttentionMask", "inconsistent mask dimensions"));
        }
        for i in 0..self.rows {
            if self.present[i] && !(0..self.cols).any(|j| self.get(i, j)) {
                return Err(Error::EmptyAttentionRow { row: i });
            }
        }
        Ok(())
    }
}

#[derive(Debug)]
enum Op {
    Const,
    Param,
    /// `x * w^T + b`, with `w` stored as (out, in).
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// Adds a 1 x m row to every row of `x`.
    AddRow {
        x: Var,
        row: Var,
    },
    AffineScalar {
        x: Var,
        scale: f64,
    },
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Cos(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        scale: f64,
        probs: Vec<f64>,
    },
    MaxPoolRows {
        x: Var,
        argmax: Vec<usize>,
    },
    /// Column-wise max within consecutive row segments.
    SegmentMaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Gather {
        x: Var,
        rows: Vec<usize>,
    },
    /// Row `i` comes from `a` when `take_a[i]`, else from `b`.
    SelectRows {
        a: Var,
        b: Var,
        take_a: Vec<bool>,
    },
    L2NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    SoftmaxRows(Var),
    SmoothL1Mean {
        x: Var,
        target: Vec<f64>,
    },
    NegLogAt {
        x: Var,
        index: usize,
        floor: f64,
    },
    WeightedSum(Vec<(Var, f64)>),
    Reshape(Var),
}

struct Node {
    value: Mat,
    op: Op,
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    nodes: Vec<Option<Mat>>,
    pub params: ParamGrads,
}

impl Gradients {
    /// Gradient of the seed with respect to `v`; `None` if `v` does not
    /// influence it.
    pub fn of(&self, v: Var) -> Option<&Mat> {
        self.nodes[v.0].as_ref()
    }
}

/// Records a forward computation for later reverse-mode differentiation.
pub struct Tape<'p> {
    store: Option<&'p ParamStore>,
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::detached()
    }
}

impl<'p> Tape<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Tape {
            store: Some(store),
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    /// A tape without a parameter store; every leaf is a constant.
    pub fn detached() -> Self {
        Tape {
            store: None,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn constant(&mut self, m: Mat) -> Var {
        self.push(m, Op::Const)
    }

    /// Leaf for a parameter block. Each block gets one node per tape so that
    /// repeated uses accumulate into the same gradient.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let store = self
            .store
            .expect("Tape::param called on a detached tape");
        let value = store.block(id).to_mat();
        let v = self.push(value, Op::Param);
        self.param_vars.insert(id, v);
        v
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (n, i) = self.shape(x);
        let (o, wi) = self.shape(w);
        if wi != i {
            return Err(Error::shape(
                "linear",
                format!("input width {i} but weight is {o}x{wi}"),
            ));
        }
        let mut out = vec![0.0; n * o];
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.shape() != (1, o) {
                return Err(Error::shape(
                    "linear",
                    format!("bias {:?} for output width {o}", bv.shape()),
                ));
            }
            for r in 0..n {
                out[r * o..(r + 1) * o].copy_from_slice(&bv.data);
            }
        }
        gemm(
            n,
            i,
            o,
            &self.value(x).data,
            false,
            &self.value(w).data,
            true,
            1.0,
            &mut out,
        );
        Ok(self.push(Mat { rows: n, cols: o, data: out }, Op::Linear { x, w, b }))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Mat {
        let av = self.value(a);
        let bv = self.value(b);
        Mat {
            rows: av.rows,
            cols: av.cols,
            data: av.data.iter().zip(&bv.data).map(|(&x, &y)| f(x, y)).collect(),
        }
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Mat {
        let av = self.value(a);
        Mat {
            rows: av.rows,
            cols: av.cols,
            data: av.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.zip_map(a, b, |x, y| x + y);
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.zip_map(a, b, |x, y| x - y);
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.zip_map(a, b, |x, y| x * y);
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (n, m) = self.shape(x);
        if self.shape(row) != (1, m) {
            return Err(Error::shape(
                "add_row",
                format!("row {:?} for width {m}", self.shape(row)),
            ));
        }
        let r = self.value(row).data.clone();
        let mut v = self.value(x).clone();
        for i in 0..n {
            for (a, b) in v.row_mut(i).iter_mut().zip(&r) {
                *a += b;
            }
        }
        Ok(self.push(v, Op::AddRow { x, row }))
    }

    /// `scale * x + offset`, elementwise.
    pub fn affine_scalar(&mut self, x: Var, scale: f64, offset: f64) -> Var {
        let v = self.map(x, |a| scale * a + offset);
        self.push(v, Op::AffineScalar { x, scale })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.map(x, |a| if a > 0.0 { a } else { 0.0 });
        self.push(v, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.map(x, sigmoid);
        self.push(v, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let v = self.map(x, f64::tanh);
        self.push(v, Op::Tanh(x))
    }

    pub fn cos(&mut self, x: Var) -> Var {
        let v = self.map(x, f64::cos);
        self.push(v, Op::Cos(x))
    }

    /// Row-wise layer normalization with learnable gain and bias (1 x d each).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (n, d) = self.shape(x);
        if self.shape(gain) != (1, d) || self.shape(bias) != (1, d) {
            return Err(Error::shape("layer_norm", "gain/bias must be 1 x d"));
        }
        let xv = self.value(x);
        let g = &self.value(gain).data;
        let b = &self.value(bias).data;
        let mut xhat = vec![0.0; n * d];
        let mut inv_std = vec![0.0; n];
        let mut out = vec![0.0; n * d];
        for r in 0..n {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = is;
            for c in 0..d {
                let h = (row[c] - mean) * is;
                xhat[r * d + c] = h;
                out[r * d + c] = h * g[c] + b[c];
            }
        }
        Ok(self.push(
            Mat { rows: n, cols: d, data: out },
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        ))
    }

    /// Scaled dot-product attention `softmax(q k^T / sqrt(d_k)) v`.
    ///
    /// Masked entries get probability exactly zero; rows of absent nodes
    /// yield zero output.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        mask: Option<&AttentionMask>,
    ) -> Result<Var> {
        let (nq, dk) = self.shape(q);
        let (nk, dk2) = self.shape(k);
        let (nv, dv) = self.shape(v);
        if dk != dk2 || nk != nv {
            return Err(Error::shape(
                "attention",
                format!("q {nq}x{dk}, k {nk}x{dk2}, v {nv}x{dv}"),
            ));
        }
        if let Some(m) = mask {
            if m.rows != nq || m.cols != nk {
                return Err(Error::shape(
                    "attention",
                    format!("mask {}x{} for logits {nq}x{nk}", m.rows, m.cols),
                ));
            }
            m.validate()?;
        }
        let scale = 1.0 / (dk as f64).sqrt();
        let mut probs = vec![0.0; nq * nk];
        gemm(
            nq,
            dk,
            nk,
            &self.value(q).data,
            false,
            &self.value(k).data,
            true,
            0.0,
            &mut probs,
        );
        for i in 0..nq {
            let row = &mut probs[i * nk..(i + 1) * nk];
            let active = mask.is_none_or(|m| m.present[i]);
            if !active {
                row.iter_mut().for_each(|p| *p = 0.0);
                continue;
            }
            let allowed = |j: usize| mask.is_none_or(|m| m.get(i, j));
            let mut mx = f64::NEG_INFINITY;
            for (j, s) in row.iter_mut().enumerate() {
                *s *= scale;
                if allowed(j) && *s > mx {
                    mx = *s;
                }
            }
            let mut total = 0.0;
            for (j, s) in row.iter_mut().enumerate() {
                if allowed(j) {
                    *s = (*s - mx).exp();
                    total += *s;
                } else {
                    *s = 0.0;
                }
            }
            for s in row.iter_mut() {
                *s /= total;
            }
        }
        let mut out = vec![0.0; nq * dv];
        gemm(nq, nk, dv, &probs, false, &self.value(v).data, false, 0.0, &mut out);
        Ok(self.push(
            Mat { rows: nq, cols: dv, data: out },
            Op::Attention {
                q,
                k,
                v,
                scale,
                probs,
            },
        ))
    }

    /// Attention probabilities recorded by an attention node.
    pub fn attention_probs(&self, v: Var) -> Option<Mat> {
        match &self.nodes[v.0].op {
            Op::Attention { q, k, probs, .. } => Some(Mat {
                rows: self.shape(*q).0,
                cols: self.shape(*k).0,
                data: probs.clone(),
            }),
            _ => None,
        }
    }

    /// Column-wise maximum over rows; ties resolve to the lowest row.
    pub fn max_pool_rows(&mut self, x: Var) -> Result<Var> {
        let (n, m) = self.shape(x);
        if n == 0 {
            return Err(Error::Empty("max_pool"));
        }
        let xv = self.value(x);
        let mut argmax = vec![0usize; m];
        let mut out = xv.row(0).to_vec();
        for r in 1..n {
            for (c, &val) in xv.row(r).iter().enumerate() {
                if val > out[c] {
                    out[c] = val;
                    argmax[c] = r;
                }
            }
        }
        Ok(self.push(Mat::row_vector(out), Op::MaxPoolRows { x, argmax }))
    }

    /// Max-pools each run of `lengths[i]` consecutive rows into output row `i`.
    /// Lengths must be positive and sum to the row count.
    pub fn segment_max_pool(&mut self, x: Var, lengths: &[usize]) -> Result<Var> {
        let (n, m) = self.shape(x);
        if lengths.iter().any(|&l| l == 0) {
            return Err(Error::Empty("segment_max_pool"));
        }
        if lengths.iter().sum::<usize>() != n {
            return Err(Error::shape("segment_max_pool", "segment lengths must sum to the row count"));
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(lengths.len() * m);
        let mut argmax = Vec::with_capacity(lengths.len() * m);
        let mut start = 0;
        for &len in lengths {
            let base = out.len();
            out.extend_from_slice(xv.row(start));
            argmax.extend(std::iter::repeat_n(start, m));
            for r in start + 1..start + len {
                for (c, &val) in xv.row(r).iter().enumerate() {
                    if val > out[base + c] {
                        out[base + c] = val;
                        argmax[base + c] = r;
                    }
                }
            }
            start += len;
        }
        Ok(self.push(
            Mat {
                rows: lengths.len(),
                cols: m,
                data: out,
            },
            Op::SegmentMaxPool { x, argmax },
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let n = self.shape(parts[0]).0;
        if parts.iter().any(|&p| self.shape(p).0 != n) {
            return Err(Error::shape("concat_cols", "row counts differ"));
        }
        let width: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut data = Vec::with_capacity(n * width);
        for r in 0..n {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        Ok(self.push(
            Mat { rows: n, cols: width, data },
            Op::ConcatCols(parts.to_vec()),
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let m = self.shape(parts[0]).1;
        if parts.iter().any(|&p| self.shape(p).1 != m) {
            return Err(Error::shape("concat_rows", "column counts differ"));
        }
        let mut data = Vec::new();
        let mut n = 0;
        for &p in parts {
            data.extend_from_slice(&self.value(p).data);
            n += self.shape(p).0;
        }
        Ok(self.push(Mat { rows: n, cols: m, data }, Op::ConcatRows(parts.to_vec())))
    }

    /// Gathers rows by index (indices may repeat).
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (n, m) = self.shape(x);
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::shape("gather_rows", format!("row {bad} of {n}")));
        }
        let xv = self.value(x);
        let mut data = Vec::with_capacity(rows.len() * m);
        for &r in rows {
            data.extend_from_slice(xv.row(r));
        }
        Ok(self.push(
            Mat { rows: rows.len(), cols: m, data },
            Op::Gather {
                x,
                rows: rows.to_vec(),
            },
        ))
    }

    pub fn select_rows(&mut self, a: Var, b: Var, take_a: &[bool]) -> Result<Var> {
        self.same_shape("select_rows", a, b)?;
        let (n, _) = self.shape(a);
        if take_a.len() != n {
            return Err(Error::shape("select_rows", "selector length"));
        }
        let mut v = self.value(b).clone();
        let av = self.value(a);
        for (r, &t) in take_a.iter().enumerate() {
            if t {
                v.row_mut(r).copy_from_slice(av.row(r));
            }
        }
        Ok(self.push(
            v,
            Op::SelectRows {
                a,
                b,
                take_a: take_a.to_vec(),
            },
        ))
    }

    /// Scales every row to unit Euclidean norm; all-zero rows stay zero.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let mut v = self.value(x).clone();
        let mut norms = vec![0.0; v.rows];
        for (r, norm) in norms.iter_mut().enumerate() {
            let row = v.row_mut(r);
            let nrm = row.iter().map(|a| a * a).sum::<f64>().sqrt();
            *norm = nrm;
            if nrm > 0.0 {
                row.iter_mut().for_each(|a| *a /= nrm);
            }
        }
        self.push(v, Op::L2NormalizeRows { x, norms })
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let mut v = self.value(x).clone();
        for r in 0..v.rows {
            softmax_in_place(v.row_mut(r));
        }
        self.push(v, Op::SoftmaxRows(x))
    }

    /// Mean smooth-L1 between all entries of `x` and `target`; returns 1 x 1.
    pub fn smooth_l1_mean(&mut self, x: Var, target: &[f64]) -> Result<Var> {
        let xv = self.value(x);
        if xv.data.len() != target.len() || target.is_empty() {
            return Err(Error::shape(
                "smooth_l1_mean",
                format!("{} values vs {} targets", xv.data.len(), target.len()),
            ));
        }
        let total: f64 = xv
            .data
            .iter()
            .zip(target)
            .map(|(a, t)| smooth_l1(a - t))
            .sum();
        let loss = total / target.len() as f64;
        Ok(self.push(
            Mat::row_vector(vec![loss]),
            Op::SmoothL1Mean {
                x,
                target: target.to_vec(),
            },
        ))
    }

    /// `-ln(max(x[index], floor))`; returns 1 x 1.
    pub fn neg_log_at(&mut self, x: Var, index: usize, floor: f64) -> Result<Var> {
        let xv = self.value(x);
        if index >= xv.data.len() {
            return Err(Error::shape("neg_log_at", "index out of range"));
        }
        let loss = -xv.data[index].max(floor).ln();
        Ok(self.push(Mat::row_vector(vec![loss]), Op::NegLogAt { x, index, floor }))
    }

    /// Weighted sum of 1 x 1 scalars.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut total = 0.0;
        for &(t, w) in terms {
            if self.shape(t) != (1, 1) {
                return Err(Error::shape("weighted_sum", "terms must be scalars"));
            }
            total += w * self.value(t).data[0];
        }
        Ok(self.push(
            Mat::row_vector(vec![total]),
            Op::WeightedSum(terms.to_vec()),
        ))
    }

    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Result<Var> {
        let v = self.value(x);
        if v.data.len() != rows * cols {
            return Err(Error::shape("reshape", "element count changes"));
        }
        let m = Mat {
            rows,
            cols,
            data: v.data.clone(),
        };
        Ok(self.push(m, Op::Reshape(x)))
    }

    /// Backpropagates from `seed`, which must be a 1 x 1 scalar.
    pub fn backward(&self, seed: Var) -> Gradients {
        self.backward_with(seed, Mat::row_vector(vec![1.0]))
    }

    /// Backpropagates an explicit upstream gradient for `seed`.
    pub fn backward_with(&self, seed: Var, upstream: Mat) -> Gradients {
        assert_eq!(upstream.shape(), self.shape(seed), "upstream gradient shape");
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[seed.0] = Some(upstream);

        for idx in (0..=seed.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let mut params = match self.store {
            Some(s) => ParamGrads::zeros_like(s),
            None => ParamGrads::default(),
        };
        for (&id, &v) in &self.param_vars {
            if let Some(g) = &grads[v.0] {
                params.block_mut(id).copy_from_slice(&g.data);
            }
        }
        Gradients { nodes: grads, params }
    }

    fn propagate(&self, idx: usize, g: &Mat, grads: &mut [Option<Mat>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        match &node.op {
            Op::Const | Op::Param => {}
            Op::Linear { x, w, b } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (n, i) = xv.shape();
                let o = wv.rows;
                let dx = acc(grads, *x, n, i);
                gemm(n, o, i, &g.data, false, &wv.data, false, 1.0, &mut dx.data);
                let dw = acc(grads, *w, o, i);
                gemm(o, n, i, &g.data, true, &xv.data, false, 1.0, &mut dw.data);
                if let Some(b) = b {
                    let db = acc(grads, *b, 1, o);
                    for r in 0..n {
                        for (d, gv) in db.data.iter_mut().zip(g.row(r)) {
                            *d += gv;
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                add_into(acc(grads, *a, g.rows, g.cols), &g.data, 1.0);
                add_into(acc(grads, *b, g.rows, g.cols), &g.data, 1.0);
            }
            Op::Sub(a, b) => {
                add_into(acc(grads, *a, g.rows, g.cols), &g.data, 1.0);
                add_into(acc(grads, *b, g.rows, g.cols), &g.data, -1.0);
            }
            Op::Mul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let da = acc(grads, *a, g.rows, g.cols);
                for ((d, gv), bb) in da.data.iter_mut().zip(&g.data).zip(&bv.data) {
                    *d += gv * bb;
                }
                let db = acc(grads, *b, g.rows, g.cols);
                for ((d, gv), aa) in db.data.iter_mut().zip(&g.data).zip(&av.data) {
                    *d += gv * aa;
                }
            }
            Op::AddRow { x, row } => {
                add_into(acc(grads, *x, g.rows, g.cols), &g.data, 1.0);
                let dr = acc(grads, *row, 1, g.cols);
                for r in 0..g.rows {
                    for (d, gv) in dr.data.iter_mut().zip(g.row(r)) {
                        *d += gv;
                    }
                }
            }
            Op::AffineScalar { x, scale } => {
                add_into(acc(grads, *x, g.rows, g.cols), &g.data, *scale);
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                let dx = acc(grads, *x, g.rows, g.cols);
                for ((d, gv), a) in dx.data.iter_mut().zip(&g.data).zip(&xv.data) {
                    if *a > 0.0 {
                        *d += gv;
                    }
                }
            }
            Op::Sigmoid(x) => {
                let dx = acc(grads, *x, g.rows, g.cols);
                for ((d, gv), y) in dx.data.iter_mut().zip(&g.data).zip(&out.data) {
                    *d += gv * y * (1.0 - y);
                }
            }
            Op::Tanh(x) => {
                let dx = acc(grads, *x, g.rows, g.cols);
                for ((d, gv), y) in dx.data.iter_mut().zip(&g.data).zip(&out.data) {
                    *d += gv * (1.0 - y * y);
                }
            }
            Op::Cos(x) => {
                let xv = self.value(*x);
                let dx = acc(grads, *x, g.rows, g.cols);
                for ((d, gv), a) in dx.data.iter_mut().zip(&g.data).zip(&xv.data) {
                    *d -= gv * a.sin();
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let (n, d) = g.shape();
                let gv = self.value(*gain).data.clone();
                {
                    let dg = acc(grads, *gain, 1, d);
                    for r in 0..n {
                        for c in 0..d {
                            dg.data[c] += g.data[r * d + c] * xhat[r * d + c];
                        }
                    }
                }
                {
                    let db = acc(grads, *bias, 1, d);
                    for r in 0..n {
                        for c in 0..d {
                            db.data[c] += g.data[r * d + c];
                        }
                    }
                }
                let dx = acc(grads, *x, n, d);
                let mut dxhat = vec![0.0; d];
                for r in 0..n {
                    let mut mean_dxhat = 0.0;
                    let mut mean_dxhat_xhat = 0.0;
                    for c in 0..d {
                        let v = g.data[r * d + c] * gv[c];
                        dxhat[c] = v;
                        mean_dxhat += v;
                        mean_dxhat_xhat += v * xhat[r * d + c];
                    }
                    mean_dxhat /= d as f64;
                    mean_dxhat_xhat /= d as f64;
                    for c in 0..d {
                        dx.data[r * d + c] += inv_std[r]
                            * (dxhat[c] - mean_dxhat - xhat[r * d + c] * mean_dxhat_xhat);
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                scale,
                probs,
            } => {
                let qv = self.value(*q);
                let kv = self.value(*k);
                let vv = self.value(*v);
                let (nq, dk) = qv.shape();
                let (nk, dv) = vv.shape();
                {
                    let dvv = acc(grads, *v, nk, dv);
                    gemm(nk, nq, dv, probs, true, &g.data, false, 1.0, &mut dvv.data);
                }
                // dP = dO V^T, then the softmax adjoint row by row.
                let mut ds = vec![0.0; nq * nk];
                gemm(nq, dv, nk, &g.data, false, &vv.data, true, 0.0, &mut ds);
                for i in 0..nq {
                    let p = &probs[i * nk..(i + 1) * nk];
                    let row = &mut ds[i * nk..(i + 1) * nk];
                    let dot: f64 = p.iter().zip(row.iter()).map(|(a, b)| a * b).sum();
                    for (r, pp) in row.iter_mut().zip(p) {
                        *r = pp * (*r - dot) * scale;
                    }
                }
                {
                    let dq = acc(grads, *q, nq, dk);
                    gemm(nq, nk, dk, &ds, false, &kv.data, false, 1.0, &mut dq.data);
                }
                let dkk = acc(grads, *k, nk, dk);
                gemm(nk, nq, dk, &ds, true, &qv.data, false, 1.0, &mut dkk.data);
            }
            Op::MaxPoolRows { x, argmax } => {
                let (n, m) = self.shape(*x);
                let dx = acc(grads, *x, n, m);
                for (c, &r) in argmax.iter().enumerate() {
                    dx.data[r * m + c] += g.data[c];
                }
            }
            Op::SegmentMaxPool { x, argmax } => {
                let (n, m) = self.shape(*x);
                let dx = acc(grads, *x, n, m);
                for (i, &r) in argmax.iter().enumerate() {
                    dx.data[r * m + i % m] += g.data[i];
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let (n, w) = self.shape(p);
                    let dp = acc(grads, p, n, w);
                    for r in 0..n {
                        for c in 0..w {
                            dp.data[r * w + c] += g.data[r * g.cols + off + c];
                        }
                    }
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let (n, w) = self.shape(p);
                    let dp = acc(grads, p, n, w);
                    add_into(dp, &g.data[off..off + n * w], 1.0);
                    off += n * w;
                }
            }
            Op::Gather { x, rows } => {
                let (n, m) = self.shape(*x);
                let dx = acc(grads, *x, n, m);
                for (i, &r) in rows.iter().enumerate() {
                    for c in 0..m {
                        dx.data[r * m + c] += g.data[i * m + c];
                    }
                }
            }
            Op::SelectRows { a, b, take_a } => {
                let (n, m) = g.shape();
                {
                    let da = acc(grads, *a, n, m);
                    for (r, &t) in take_a.iter().enumerate() {
                        if t {
                            add_into_slice(da.row_mut(r), g.row(r));
                        }
                    }
                }
                let db = acc(grads, *b, n, m);
                for (r, &t) in take_a.iter().enumerate() {
                    if !t {
                        add_into_slice(db.row_mut(r), g.row(r));
                    }
                }
            }
            Op::L2NormalizeRows { x, norms } => {
                let (n, m) = g.shape();
                let dx = acc(grads, *x, n, m);
                for (r, &nrm) in norms.iter().enumerate() {
                    if nrm == 0.0 {
                        continue;
                    }
                    let y = out.row(r);
                    let gr = g.row(r);
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for c in 0..m {
                        dx.data[r * m + c] += (gr[c] - y[c] * dot) / nrm;
                    }
                }
            }
            Op::SoftmaxRows(x) => {
                let (n, m) = g.shape();
                let dx = acc(grads, *x, n, m);
                for r in 0..n {
                    let y = out.row(r);
                    let gr = g.row(r);
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for c in 0..m {
                        dx.data[r * m + c] += y[c] * (gr[c] - dot);
                    }
                }
            }
            Op::SmoothL1Mean { x, target } => {
                let xv = self.value(*x);
                let (n, m) = xv.shape();
                let scale = g.data[0] / target.len() as f64;
                let dx = acc(grads, *x, n, m);
                for ((d, a), t) in dx.data.iter_mut().zip(&xv.data).zip(target) {
                    *d += scale * smooth_l1_grad(a - t);
                }
            }
            Op::NegLogAt { x, index, floor } => {
                let xv = self.value(*x);
                let (n, m) = xv.shape();
                let val = xv.data[*index];
                let dx = acc(grads, *x, n, m);
                if val > *floor {
                    dx.data[*index] -= g.data[0] / val;
                }
            }
            Op::WeightedSum(terms) => {
                for &(t, w) in terms {
                    acc(grads, t, 1, 1).data[0] += w * g.data[0];
                }
            }
            Op::Reshape(x) => {
                let (n, m) = self.shape(*x);
                add_into(acc(grads, *x, n, m), &g.data, 1.0);
            }
        }
    }
}

fn acc(grads: &mut [Option<Mat>], v: Var, rows: usize, cols: usize) -> &mut Mat {
    grads[v.0].get_or_insert_with(|| Mat::zeros(rows, cols))
}

fn add_into(dst: &mut Mat, src: &[f64], scale: f64) {
    for (d, s) in dst.data.iter_mut().zip(src) {
        *d += scale * s;
    }
}

fn add_into_slice(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
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

/// `0.5 x^2` for `|x| < 1`, else `|x| - 0.5`.
pub fn smooth_l1(x: f64) -> f64 {
    if x.abs() < 1.0 {
        0.5 * x * x
    } else {
        x.abs() - 0.5
    }
}

fn smooth_l1_grad(x: f64) -> f64 {
    if x.abs() < 1.0 {
        x
    } else {
        x.signum()
    }
}

pub fn softmax_in_place(row: &mut [f64]) {
    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - mx).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// Wraps a shared mask so callers can keep one copy per timestep.
pub type SharedMask = Rc<AttentionMask>;
