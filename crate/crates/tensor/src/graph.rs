//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s in execution
//! order. Values are computed eagerly; [`Graph::backward`] walks the tape in
//! reverse and accumulates gradients for every node that depends on a
//! trainable parameter or a gradient-tracking input.

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{shape_err, Result, TensorError};
use crate::params::ParamTree;
use crate::rope::RopeTable;
use crate::scalar::{gemm, Scalar};
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// User-defined differentiable operation.
///
/// The forward value is computed by the caller and handed to
/// [`Graph::custom`]; only the vector-Jacobian product lives here.
pub trait CustomOp<T: Scalar>: Send + Sync {
    fn name(&self) -> &'static str;

    /// Gradients for each input given the upstream gradient of the output.
    /// `None` marks an input without gradient.
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad_out: &[T],
    ) -> Vec<Option<Vec<T>>>;
}

enum Op<T: Scalar> {
    Leaf,
    Param(String),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MatMul(Var, Var),
    Silu(Var),
    Relu(Var),
    Square(Var),
    Sum(Var),
    LayerNorm { x: Var, rstd: Vec<T> },
    HeadL2Norm { x: Var, heads: usize, inv_norm: Vec<T> },
    ScaleBy(Var, Var),
    Rotary { x: Var, table: Arc<RopeTable<T>>, heads: usize },
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<T> },
    SegmentMean { x: Var, seg: Arc<Vec<usize>>, counts: Vec<usize> },
    GatherRows { x: Var, idx: Arc<Vec<usize>> },
    Concat(Vec<Var>),
    SliceCols { x: Var, start: usize },
    Reshape(Var),
    Softmax(Var),
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, probs: Vec<T>, count: usize },
    Custom { inputs: Vec<Var>, op: Box<dyn CustomOp<T>> },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Computation tape bound to zero or more parameter trees.
pub struct Graph<'p, T: Scalar> {
    nodes: Vec<Node<T>>,
    sources: Vec<(&'p ParamTree<T>, bool)>,
    bound: HashMap<String, Var>,
    grads: Vec<Option<Vec<T>>>,
}

impl<'p, T: Scalar> Default for Graph<'p, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p, T: Scalar> Graph<'p, T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            sources: Vec::new(),
            bound: HashMap::new(),
            grads: Vec::new(),
        }
    }

    /// Makes the paths of `tree` available to [`Graph::param`]. Parameters of a
    /// tree bound with `trainable = false` never receive gradients.
    pub fn bind(mut self, tree: &'p ParamTree<T>, trainable: bool) -> Self {
        self.sources.push((tree, trainable));
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf that tracks its gradient.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Looks up a parameter in the bound trees; repeated calls return the same node.
    pub fn param(&mut self, path: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(path) {
            return Ok(v);
        }
        let (tensor, trainable) = self
            .sources
            .iter()
            .find_map(|(tree, tr)| tree.get(path).map(|t| (t.clone(), *tr)))
            .ok_or_else(|| TensorError::MissingParam(path.to_string()))?;
        let v = self.push(tensor, Op::Param(path.to_string()), trainable);
        self.bound.insert(path.to_string(), v);
        Ok(v)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return shape_err(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_map(a, b, |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_map(a, b, |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_map(a, b, |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let c = T::from_f64_lossy(c);
        let out = self.value(x).map(|v| v * c);
        let ng = self.ng(x);
        self.push(out, Op::Scale(x, c), ng)
    }

    fn row_op_check(&self, op: &'static str, x: Var, r: Var) -> Result<(usize, usize)> {
        let (rows, cols) = self.value(x).rows_cols();
        if self.value(r).numel() != cols {
            return shape_err(
                op,
                format!("row vector {:?} vs matrix {:?}", self.shape(r), self.shape(x)),
            );
        }
        Ok((rows, cols))
    }

    /// `x + r` with `r` broadcast over the rows of `x`.
    pub fn add_row(&mut self, x: Var, r: Var) -> Result<Var> {
        let (_, cols) = self.row_op_check("add_row", x, r)?;
        let rv = self.value(r).data().to_vec();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_exact_mut(cols) {
            for (o, &b) in row.iter_mut().zip(&rv) {
                *o += b;
            }
        }
        let ng = self.ng(x) || self.ng(r);
        Ok(self.push(out, Op::AddRow(x, r), ng))
    }

    /// `x ⊙ r` with `r` broadcast over the rows of `x`.
    pub fn mul_row(&mut self, x: Var, r: Var) -> Result<Var> {
        let (_, cols) = self.row_op_check("mul_row", x, r)?;
        let rv = self.value(r).data().to_vec();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_exact_mut(cols) {
            for (o, &b) in row.iter_mut().zip(&rv) {
                *o *= b;
            }
        }
        let ng = self.ng(x) || self.ng(r);
        Ok(self.push(out, Op::MulRow(x, r), ng))
    }

    /// `[.., k] · [k, n] → [.., n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).rows_cols();
        let bs = self.shape(b);
        if bs.len() != 2 || bs[0] != k {
            return shape_err(
                "matmul",
                format!("{:?} · {:?}", self.shape(a), self.shape(b)),
            );
        }
        let n = bs[1];
        let mut out = vec![T::zero(); m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
            false,
        );
        let mut shape = self.shape(a).to_vec();
        *shape.last_mut().expect("non-scalar") = n;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::MatMul(a, b), ng))
    }

    /// `x·W + b` for weights stored `[in, out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v / (T::one() + (-v).exp()));
        let ng = self.ng(x);
        self.push(out, Op::Silu(x), ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(T::zero()));
        let ng = self.ng(x);
        self.push(out, Op::Relu(x), ng)
    }

    pub fn square(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * v);
        let ng = self.ng(x);
        self.push(out, Op::Square(x), ng)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel().max(1);
        let s = self.sum(x);
        self.scale(s, 1.0 / n as f64)
    }

    /// Normalizes every row to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Var {
        let eps = T::from_f64_lossy(eps);
        let (rows, cols) = self.value(x).rows_cols();
        let mut out = self.value(x).clone();
        let mut rstd = Vec::with_capacity(rows);
        let inv_n = T::one() / T::from_usize(cols.max(1)).expect("usize");
        for row in out.data_mut().chunks_exact_mut(cols.max(1)) {
            let mean = row.iter().copied().sum::<T>() * inv_n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_n;
            let r = T::one() / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * r;
            }
            rstd.push(r);
        }
        let ng = self.ng(x);
        self.push(out, Op::LayerNorm { x, rstd }, ng)
    }

    /// L2-normalizes each head slice of every row.
    pub fn head_l2_norm(&mut self, x: Var, heads: usize, eps: f64) -> Result<Var> {
        let (rows, cols) = self.value(x).rows_cols();
        if heads == 0 || cols % heads != 0 {
            return shape_err("head_l2_norm", format!("{cols} channels over {heads} heads"));
        }
        let dh = cols / heads;
        let eps = T::from_f64_lossy(eps);
        let mut out = self.value(x).clone();
        let mut inv_norm = Vec::with_capacity(rows * heads);
        for chunk in out.data_mut().chunks_exact_mut(dh) {
            let n2: T = chunk.iter().map(|&v| v * v).sum();
            let inv = T::one() / (n2 + eps).sqrt();
            for v in chunk.iter_mut() {
                *v *= inv;
            }
            inv_norm.push(inv);
        }
        let ng = self.ng(x);
        Ok(self.push(out, Op::HeadL2Norm { x, heads, inv_norm }, ng))
    }

    /// Multiplies `x` by a single-element variable.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return shape_err("scale_by", format!("scale shape {:?}", self.shape(s)));
        }
        let c = self.value(s).data()[0];
        let out = self.value(x).map(|v| v * c);
        let ng = self.ng(x) || self.ng(s);
        Ok(self.push(out, Op::ScaleBy(x, s), ng))
    }

    /// Applies a rotary table to every head of `[rows, heads · head_dim]`.
    pub fn rotary(&mut self, x: Var, table: Arc<RopeTable<T>>, heads: usize) -> Result<Var> {
        let (rows, cols) = self.value(x).rows_cols();
        if rows != table.rows() || cols != heads * table.pairs() * 2 {
            return shape_err(
                "rotary",
                format!(
                    "input {:?} vs table of {} rows × {} pairs × {heads} heads",
                    self.shape(x),
                    table.rows(),
                    table.pairs()
                ),
            );
        }
        let mut out = self.value(x).clone();
        table.apply(out.data_mut(), heads, false);
        let ng = self.ng(x);
        Ok(self.push(out, Op::Rotary { x, table, heads }, ng))
    }

    /// Multi-head scaled dot-product attention over `[N, heads · d]` projections:
    /// `softmax(q·kᵀ/√d + mask)·v` per head, with an optional additive `[N, N]` mask.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        mask: Option<&Tensor<T>>,
        heads: usize,
    ) -> Result<Var> {
        self.same_shape("attention", q, k)?;
        self.same_shape("attention", q, v)?;
        let (n, width) = self.value(q).rows_cols();
        if heads == 0 || width % heads != 0 {
            return shape_err("attention", format!("{width} channels over {heads} heads"));
        }
        if let Some(m) = mask {
            if m.numel() != n * n {
                return shape_err("attention", format!("mask {:?} for {n} tokens", m.shape()));
            }
        }
        let dh = width / heads;
        let scale = T::one() / T::from_usize(dh).expect("usize").sqrt();
        let ld = width as isize;
        let mut probs = vec![T::zero(); heads * n * n];
        let mut out = vec![T::zero(); n * width];
        let (qd, kd, vd) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        for h in 0..heads {
            let p = &mut probs[h * n * n..(h + 1) * n * n];
            let off = h * dh;
            T::gemm_raw(
                n, dh, n, scale, &qd[off..], ld, 1, &kd[off..], 1, ld, T::zero(), p, n as isize, 1,
            );
            if let Some(m) = mask {
                for (pv, &mv) in p.iter_mut().zip(m.data()) {
                    *pv += mv;
                }
            }
            softmax_rows_in_place(p, n);
            T::gemm_raw(
                n,
                n,
                dh,
                T::one(),
                p,
                n as isize,
                1,
                &vd[off..],
                ld,
                1,
                T::zero(),
                &mut out[off..],
                ld,
                1,
            );
        }
        let shape = self.shape(q).to_vec();
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            ng,
        ))
    }

    /// Averages rows sharing a segment id; `seg[i] < n_seg` for every row `i`.
    pub fn segment_mean(&mut self, x: Var, seg: Arc<Vec<usize>>, n_seg: usize) -> Result<Var> {
        let (rows, cols) = self.value(x).rows_cols();
        if seg.len() != rows {
            return shape_err("segment_mean", format!("{} ids for {rows} rows", seg.len()));
        }
        let mut counts = vec![0usize; n_seg];
        for &s in seg.iter() {
            if s >= n_seg {
                return shape_err("segment_mean", format!("segment {s} ≥ {n_seg}"));
            }
            counts[s] += 1;
        }
        if let Some(empty) = counts.iter().position(|&c| c == 0) {
            return Err(TensorError::Invalid(format!("segment {empty} has no rows")));
        }
        let mut out = vec![T::zero(); n_seg * cols];
        let xd = self.value(x).data();
        for (i, &s) in seg.iter().enumerate() {
            for c in 0..cols {
                out[s * cols + c] += xd[i * cols + c];
            }
        }
        for (s, &cnt) in counts.iter().enumerate() {
            let inv = T::one() / T::from_usize(cnt).expect("usize");
            for v in &mut out[s * cols..(s + 1) * cols] {
                *v *= inv;
            }
        }
        let ng = self.ng(x);
        Ok(self.push(
            Tensor::new(vec![n_seg, cols], out)?,
            Op::SegmentMean { x, seg, counts },
            ng,
        ))
    }

    /// Row `i` of the output is row `idx[i]` of `x`.
    pub fn gather_rows(&mut self, x: Var, idx: Arc<Vec<usize>>) -> Result<Var> {
        let (rows, cols) = self.value(x).rows_cols();
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return shape_err("gather_rows", format!("row {bad} of {rows}"));
        }
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(idx.len() * cols);
        for &i in idx.iter() {
            out.extend_from_slice(&xd[i * cols..(i + 1) * cols]);
        }
        let ng = self.ng(x);
        Ok(self.push(
            Tensor::new(vec![idx.len(), cols], out)?,
            Op::GatherRows { x, idx },
            ng,
        ))
    }

    /// Concatenates along the last dimension.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = match parts.first() {
            Some(&p) => self.value(p).rows_cols().0,
            None => return shape_err("concat", "no inputs"),
        };
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.value(p).rows_cols();
            if r != rows {
                return shape_err("concat", format!("{r} rows vs {rows}"));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(
            Tensor::new(vec![rows, total], out)?,
            Op::Concat(parts.to_vec()),
            ng,
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.value(x).rows_cols();
        if start + len > cols {
            return shape_err("slice_cols", format!("{start}+{len} > {cols}"));
        }
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&xd[r * cols + start..r * cols + start + len]);
        }
        let mut shape = self.shape(x).to_vec();
        *shape.last_mut().expect("non-scalar") = len;
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::SliceCols { x, start }, ng))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let ng = self.ng(x);
        Ok(self.push(out, Op::Reshape(x), ng))
    }

    /// Softmax along the last dimension.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let (_, cols) = self.value(x).rows_cols();
        let mut out = self.value(x).clone();
        softmax_rows_in_place(out.data_mut(), cols);
        let ng = self.ng(x);
        self.push(out, Op::Softmax(x), ng)
    }

    /// Mean cross-entropy over rows with a target; rows with `None` are ignored.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let (rows, cols) = self.value(logits).rows_cols();
        if targets.len() != rows {
            return shape_err("cross_entropy", format!("{} targets for {rows} rows", targets.len()));
        }
        if let Some(bad) = targets.iter().flatten().find(|&&t| t >= cols) {
            return shape_err("cross_entropy", format!("class {bad} of {cols}"));
        }
        let mut probs = self.value(logits).data().to_vec();
        softmax_rows_in_place(&mut probs, cols);
        let mut loss = T::zero();
        let mut count = 0;
        for (r, t) in targets.iter().enumerate() {
            if let Some(t) = t {
                let p = probs[r * cols + t].max(T::min_positive_value());
                loss -= p.ln();
                count += 1;
            }
        }
        if count > 0 {
            loss /= T::from_usize(count).expect("usize");
        }
        let ng = self.ng(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
            ng,
        ))
    }

    /// Records an externally computed value with a custom backward rule.
    pub fn custom(
        &mut self,
        inputs: &[Var],
        value: Tensor<T>,
        op: Box<dyn CustomOp<T>>,
    ) -> Var {
        let ng = inputs.iter().any(|&v| self.ng(v));
        self.push(
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            ng,
        )
    }

    /// Reverse pass from a single-element `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    /// Post-softmax weights `[heads, N, N]` of an attention node.
    pub fn attention_weights(&self, v: Var) -> Option<&[T]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradients of every trainable parameter touched by the last backward pass.
    pub fn param_grads(&self) -> ParamTree<T> {
        let mut out = ParamTree::new();
        for node_idx in self.bound.values() {
            let node = &self.nodes[node_idx.0];
            if let (Op::Param(path), true) = (&node.op, node.needs_grad) {
                let g = self.grads.get(node_idx.0).and_then(|g| g.clone());
                let data = g.unwrap_or_else(|| vec![T::zero(); node.value.numel()]);
                out.insert(
                    path.clone(),
                    Tensor::new(node.value.shape().to_vec(), data).expect("param shape"),
                )
                .expect("unique paths");
            }
        }
        out
    }

    fn backward_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let val = |v: Var| self.nodes[v.0].value.data();
        let nodes = &self.nodes;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if !nodes[v.0].needs_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![T::zero(); nodes[v.0].value.numel()]);
            f(buf);
        };
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Add(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| {
                    for (x, &y) in d.iter_mut().zip(g) {
                        *x -= y;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &mut |d| {
                    for ((x, &y), &w) in d.iter_mut().zip(g).zip(vb) {
                        *x += y * w;
                    }
                });
                acc(*b, &mut |d| {
                    for ((x, &y), &w) in d.iter_mut().zip(g).zip(va) {
                        *x += y * w;
                    }
                });
            }
            Op::Scale(x, c) => acc(*x, &mut |d| {
                for (o, &y) in d.iter_mut().zip(g) {
                    *o += y * *c;
                }
            }),
            Op::AddRow(x, r) => {
                let cols = nodes[r.0].value.numel();
                acc(*x, &mut |d| add_into(d, g));
                acc(*r, &mut |d| {
                    for row in g.chunks_exact(cols) {
                        add_into(d, row);
                    }
                });
            }
            Op::MulRow(x, r) => {
                let cols = nodes[r.0].value.numel();
                let (vx, vr) = (val(*x), val(*r));
                acc(*x, &mut |d| {
                    for (drow, grow) in d.chunks_exact_mut(cols).zip(g.chunks_exact(cols)) {
                        for ((o, &y), &w) in drow.iter_mut().zip(grow).zip(vr) {
                            *o += y * w;
                        }
                    }
                });
                acc(*r, &mut |d| {
                    for (xrow, grow) in vx.chunks_exact(cols).zip(g.chunks_exact(cols)) {
                        for ((o, &y), &w) in d.iter_mut().zip(grow).zip(xrow) {
                            *o += y * w;
                        }
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (m, k) = nodes[a.0].value.rows_cols();
                let n = nodes[b.0].value.shape()[1];
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &mut |d| gemm(m, n, k, g, false, vb, true, d, true));
                acc(*b, &mut |d| gemm(k, m, n, va, true, g, false, d, true));
            }
            Op::Silu(x) => {
                let vx = val(*x);
                acc(*x, &mut |d| {
                    for ((o, &y), &v) in d.iter_mut().zip(g).zip(vx) {
                        let s = T::one() / (T::one() + (-v).exp());
                        *o += y * s * (T::one() + v * (T::one() - s));
                    }
                });
            }
            Op::Relu(x) => {
                let vx = val(*x);
                acc(*x, &mut |d| {
                    for ((o, &y), &v) in d.iter_mut().zip(g).zip(vx) {
                        if v > T::zero() {
                            *o += y;
                        }
                    }
                });
            }
            Op::Square(x) => {
                let vx = val(*x);
                let two = T::from_f64_lossy(2.0);
                acc(*x, &mut |d| {
                    for ((o, &y), &v) in d.iter_mut().zip(g).zip(vx) {
                        *o += two * v * y;
                    }
                });
            }
            Op::Sum(x) => acc(*x, &mut |d| {
                for o in d.iter_mut() {
                    *o += g[0];
                }
            }),
            Op::LayerNorm { x, rstd } => {
                let y = node.value.data();
                let (_, cols) = node.value.rows_cols();
                let inv_n = T::one() / T::from_usize(cols).expect("usize");
                acc(*x, &mut |d| {
                    for (r, ((drow, grow), yrow)) in d
                        .chunks_exact_mut(cols)
                        .zip(g.chunks_exact(cols))
                        .zip(y.chunks_exact(cols))
                        .enumerate()
                    {
                        let mg = grow.iter().copied().sum::<T>() * inv_n;
                        let mgy = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum::<T>() * inv_n;
                        for ((o, &gy), &yy) in drow.iter_mut().zip(grow).zip(yrow) {
                            *o += rstd[r] * (gy - mg - yy * mgy);
                        }
                    }
                });
            }
            Op::HeadL2Norm { x, heads, inv_norm } => {
                let y = node.value.data();
                let (_, cols) = node.value.rows_cols();
                let dh = cols / heads;
                acc(*x, &mut |d| {
                    for (c, ((dc, gc), yc)) in d
                        .chunks_exact_mut(dh)
                        .zip(g.chunks_exact(dh))
                        .zip(y.chunks_exact(dh))
                        .enumerate()
                    {
                        let dot = gc.iter().zip(yc).map(|(&a, &b)| a * b).sum::<T>();
                        for ((o, &gy), &yy) in dc.iter_mut().zip(gc).zip(yc) {
                            *o += inv_norm[c] * (gy - yy * dot);
                        }
                    }
                });
            }
            Op::ScaleBy(x, s) => {
                let c = val(*s)[0];
                let vx = val(*x);
                acc(*x, &mut |d| {
                    for (o, &y) in d.iter_mut().zip(g) {
                        *o += y * c;
                    }
                });
                acc(*s, &mut |d| {
                    d[0] += g.iter().zip(vx).map(|(&a, &b)| a * b).sum::<T>();
                });
            }
            Op::Rotary { x, table, heads } => acc(*x, &mut |d| {
                let mut gg = g.to_vec();
                table.apply(&mut gg, *heads, true);
                add_into(d, &gg);
            }),
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => {
                let (n, width) = nodes[q.0].value.rows_cols();
                let dh = width / heads;
                let scale = T::one() / T::from_usize(dh).expect("usize").sqrt();
                let ld = width as isize;
                let ni = n as isize;
                let (vq, vk, vv) = (val(*q), val(*k), val(*v));
                let mut dq = vec![T::zero(); n * width];
                let mut dk = vec![T::zero(); n * width];
                let mut dv = vec![T::zero(); n * width];
                let mut ds = vec![T::zero(); n * n];
                for h in 0..*heads {
                    let p = &probs[h * n * n..(h + 1) * n * n];
                    let off = h * dh;
                    // dP = dO · Vᵀ
                    T::gemm_raw(
                        n, dh, n, T::one(), &g[off..], ld, 1, &vv[off..], 1, ld, T::zero(),
                        &mut ds, ni, 1,
                    );
                    // dV += Pᵀ · dO
                    T::gemm_raw(
                        n, n, dh, T::one(), p, 1, ni, &g[off..], ld, 1, T::one(),
                        &mut dv[off..], ld, 1,
                    );
                    for (srow, prow) in ds.chunks_exact_mut(n).zip(p.chunks_exact(n)) {
                        let dot = srow.iter().zip(prow).map(|(&a, &b)| a * b).sum::<T>();
                        for (s, &pp) in srow.iter_mut().zip(prow) {
                            *s = pp * (*s - dot);
                        }
                    }
                    T::gemm_raw(
                        n, n, dh, scale, &ds, ni, 1, &vk[off..], ld, 1, T::one(),
                        &mut dq[off..], ld, 1,
                    );
                    T::gemm_raw(
                        n, n, dh, scale, &ds, 1, ni, &vq[off..], ld, 1, T::one(),
                        &mut dk[off..], ld, 1,
                    );
                }
                acc(*q, &mut |d| add_into(d, &dq));
                acc(*k, &mut |d| add_into(d, &dk));
                acc(*v, &mut |d| add_into(d, &dv));
            }
            Op::SegmentMean { x, seg, counts } => {
                let cols = node.value.rows_cols().1;
                acc(*x, &mut |d| {
                    for (i, &s) in seg.iter().enumerate() {
                        let inv = T::one() / T::from_usize(counts[s]).expect("usize");
                        for c in 0..cols {
                            d[i * cols + c] += g[s * cols + c] * inv;
                        }
                    }
                });
            }
            Op::GatherRows { x, idx } => {
                let cols = node.value.rows_cols().1;
                acc(*x, &mut |d| {
                    for (r, &i) in idx.iter().enumerate() {
                        add_into(&mut d[i * cols..(i + 1) * cols], &g[r * cols..(r + 1) * cols]);
                    }
                });
            }
            Op::Concat(parts) => {
                let (rows, total) = node.value.rows_cols();
                let mut offset = 0;
                for &p in parts {
                    let w = nodes[p.0].value.rows_cols().1;
                    acc(p, &mut |d| {
                        for r in 0..rows {
                            add_into(
                                &mut d[r * w..(r + 1) * w],
                                &g[r * total + offset..r * total + offset + w],
                            );
                        }
                    });
                    offset += w;
                }
            }
            Op::SliceCols { x, start } => {
                let (rows, len) = node.value.rows_cols();
                let cols = nodes[x.0].value.rows_cols().1;
                acc(*x, &mut |d| {
                    for r in 0..rows {
                        add_into(
                            &mut d[r * cols + start..r * cols + start + len],
                            &g[r * len..(r + 1) * len],
                        );
                    }
                });
            }
            Op::Reshape(x) => acc(*x, &mut |d| add_into(d, g)),
            Op::Softmax(x) => {
                let y = node.value.data();
                let cols = node.value.rows_cols().1;
                acc(*x, &mut |d| {
                    for ((drow, grow), yrow) in d
                        .chunks_exact_mut(cols)
                        .zip(g.chunks_exact(cols))
                        .zip(y.chunks_exact(cols))
                    {
                        let dot = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum::<T>();
                        for ((o, &gy), &yy) in drow.iter_mut().zip(grow).zip(yrow) {
                            *o += yy * (gy - dot);
                        }
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                if *count == 0 {
                    return;
                }
                let cols = nodes[logits.0].value.rows_cols().1;
                let scale = g[0] / T::from_usize(*count).expect("usize");
                acc(*logits, &mut |d| {
                    for (r, t) in targets.iter().enumerate() {
                        let Some(t) = t else { continue };
                        for c in 0..cols {
                            let onehot = if c == *t { T::one() } else { T::zero() };
                            d[r * cols + c] += scale * (probs[r * cols + c] - onehot);
                        }
                    }
                });
            }
            Op::Custom { inputs, op } => {
                let ins: Vec<&Tensor<T>> = inputs.iter().map(|v| &nodes[v.0].value).collect();
                let gs = op.backward(&ins, &node.value, g);
                for (&v, gi) in inputs.iter().zip(gs) {
                    if let Some(gi) = gi {
                        acc(v, &mut |d| add_into(d, &gi));
                    }
                }
            }
        }
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub(crate) fn softmax_rows_in_place<T: Scalar>(data: &mut [T], cols: usize) {
    if cols == 0 {
        return;
    }
    for row in data.chunks_exact_mut(cols) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        let inv = T::one() / total;
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
}
