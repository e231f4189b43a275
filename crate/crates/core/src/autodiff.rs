//! Tape-based reverse-mode differentiation over dense matrices.
//!
//! Operations are recorded on a [`Tape`] as they are evaluated. Calling
//! [`Tape::backward`] on a `1×1` output walks the tape in reverse and
//! accumulates the gradient of every node that depends on a parameter leaf.
//!
//! The op set is exactly what the denoiser and the dense head need: affine
//! maps, embedding lookups, layer normalization, GELU, rotary position
//! encoding, multi-head attention over packed segments, and softmax
//! cross-entropy. Attention and cross-entropy are fused ops with
//! hand-derived backward passes.

use crate::{Matrix, Scalar};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// One packed sequence inside a batch: rows `start..start + len`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, tb: bool },
    Add { a: Var, b: Var },
    AddScaled { a: Var, b: Var, w: T },
    AddRow { a: Var, bias: Var },
    MulConst { a: Var, factor: Vec<T> },
    Scale { a: Var, s: T },
    Gather { table: Var, ids: Vec<usize> },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, inv_std: Vec<T> },
    Gelu { x: Var, tanh: Vec<T> },
    Rope { x: Var, cos: Vec<T>, sin: Vec<T>, heads: usize },
    Attention { q: Var, k: Var, v: Var, segments: Vec<Segment>, heads: usize, probs: Vec<T> },
    GatherConcat { x: Var, groups: Vec<Vec<usize>> },
    NormalizeRows { x: Var, inv_norm: Vec<T> },
    SoftmaxXent { logits: Var, grad: Matrix<T> },
}

struct Node<T> {
    value: Matrix<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Records matrix operations for reverse-mode differentiation.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_C: f64 = 0.044_715;

/// `tanh` of the GELU inner argument, via one `exp`.
#[inline]
fn gelu_tanh<T: Scalar>(x: T) -> T {
    let k = T::of((2.0 / std::f64::consts::PI).sqrt());
    let z = k * (x + T::of(GELU_C) * x * x * x);
    let two = T::of(2.0);
    T::one() - two / ((two * z).exp() + T::one())
}

#[inline]
fn gelu_grad<T: Scalar>(x: T, t: T) -> T {
    let k = T::of((2.0 / std::f64::consts::PI).sqrt());
    let half = T::of(0.5);
    half * (T::one() + t) + half * x * (T::one() - t * t) * k * (T::one() + T::of(3.0 * GELU_C) * x * x)
}

/// Row-wise softmax cross-entropy against optional targets.
///
/// Returns `Σ_r w_r · (logsumexp(z_r) − z_r[target_r])` and its gradient with
/// respect to the logits. Rows without a target contribute nothing.
pub fn softmax_xent<T: Scalar>(
    logits: &Matrix<T>,
    targets: &[Option<usize>],
    weights: &[T],
) -> (T, Matrix<T>) {
    assert_eq!(targets.len(), logits.rows());
    assert_eq!(weights.len(), logits.rows());
    let mut grad = Matrix::zeros(logits.rows(), logits.cols());
    let mut loss = T::zero();
    for r in 0..logits.rows() {
        let Some(target) = targets[r] else { continue };
        let w = weights[r];
        let row = logits.row(r);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut denom = T::zero();
        for &z in row {
            denom += (z - max).exp();
        }
        let lse = max + denom.ln();
        loss += w * (lse - row[target]);
        let g = grad.row_mut(r);
        for (gi, &z) in g.iter_mut().zip(row) {
            *gi = w * (z - lse).exp();
        }
        g[target] -= w;
    }
    (loss, grad)
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix<T>, op: Op<T>, needs_grad: bool) -> Var {
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

    /// A differentiable leaf.
    pub fn param(&mut self, value: Matrix<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Matrix<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Matrix<T> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> T {
        let m = self.value(v);
        assert_eq!(m.shape(), (1, 1), "not a scalar node");
        m.get(0, 0)
    }

    /// `a·b`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = Matrix::matmul(self.value(a), false, self.value(b), false);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::MatMul { a, b, tb: false }, ng)
    }

    /// `a·bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let value = Matrix::matmul(self.value(a), false, self.value(b), true);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::MatMul { a, b, tb: true }, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Add { a, b }, ng)
    }

    /// `a + w·b`.
    pub fn add_scaled(&mut self, a: Var, b: Var, w: T) -> Var {
        let mut value = self.value(a).clone();
        let vb = self.value(b);
        assert_eq!(value.shape(), vb.shape());
        for (x, &y) in value.data_mut().iter_mut().zip(vb.data()) {
            *x += w * y;
        }
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::AddScaled { a, b, w }, ng)
    }

    /// Adds a `1×cols` bias to every row.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let mut value = self.value(a).clone();
        let b = self.value(bias);
        assert_eq!(b.shape(), (1, value.cols()), "bias shape mismatch");
        let cols = value.cols();
        for row in value.data_mut().chunks_mut(cols) {
            for (x, &y) in row.iter_mut().zip(b.data()) {
                *x += y;
            }
        }
        let ng = self.ng(a) || self.ng(bias);
        self.push(value, Op::AddRow { a, bias }, ng)
    }

    /// Elementwise product with a constant of the same shape.
    pub fn mul_const(&mut self, a: Var, factor: Vec<T>) -> Var {
        let mut value = self.value(a).clone();
        assert_eq!(factor.len(), value.len());
        for (x, &f) in value.data_mut().iter_mut().zip(&factor) {
            *x *= f;
        }
        let ng = self.ng(a);
        self.push(value, Op::MulConst { a, factor }, ng)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let mut value = self.value(a).clone();
        value.scale(s);
        let ng = self.ng(a);
        self.push(value, Op::Scale { a, s }, ng)
    }

    /// Row lookup: output row `r` is `table[ids[r]]`.
    pub fn gather(&mut self, table: Var, ids: Vec<usize>) -> Var {
        let t = self.value(table);
        let mut value = Matrix::zeros(ids.len(), t.cols());
        for (r, &id) in ids.iter().enumerate() {
            value.row_mut(r).copy_from_slice(t.row(id));
        }
        let ng = self.ng(table);
        self.push(value, Op::Gather { table, ids }, ng)
    }

    /// Per-row normalization with learned `1×cols` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let n = T::of(cols as f64);
        let mut xhat = vec![T::zero(); rows * cols];
        let mut inv_std = vec![T::zero(); rows];
        let mut value = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let is = T::one() / (var + eps).sqrt();
            inv_std[r] = is;
            let out = value.row_mut(r);
            for c in 0..cols {
                let h = (row[c] - mean) * is;
                xhat[r * cols + c] = h;
                out[c] = h * g[c] + b[c];
            }
        }
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            ng,
        )
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let tanh: Vec<T> = xv.data().iter().map(|&v| gelu_tanh(v)).collect();
        let half = T::of(0.5);
        let data = xv.data().iter().zip(&tanh).map(|(&v, &t)| half * v * (T::one() + t)).collect();
        let value = Matrix::from_vec(xv.rows(), xv.cols(), data);
        let ng = self.ng(x);
        self.push(value, Op::Gelu { x, tanh }, ng)
    }

    /// Rotary position encoding applied independently to each head.
    ///
    /// Within a head of width `dh`, coordinate `i` is paired with `i + dh/2`
    /// and rotated by `positions[r] · base^(−2i/dh)`.
    pub fn rope(&mut self, x: Var, positions: &[usize], heads: usize, base: f64) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        assert_eq!(positions.len(), rows);
        assert_eq!(cols % heads, 0);
        let dh = cols / heads;
        assert_eq!(dh % 2, 0, "rotary encoding needs an even head width");
        let half = dh / 2;
        let mut cos = vec![T::zero(); rows * half];
        let mut sin = vec![T::zero(); rows * half];
        for (r, &p) in positions.iter().enumerate() {
            for i in 0..half {
                let theta = p as f64 * base.powf(-2.0 * i as f64 / dh as f64);
                cos[r * half + i] = T::of(theta.cos());
                sin[r * half + i] = T::of(theta.sin());
            }
        }
        let mut value = xv.clone();
        for r in 0..rows {
            let row = value.row_mut(r);
            for h in 0..heads {
                let base_c = h * dh;
                for i in 0..half {
                    let (c, s) = (cos[r * half + i], sin[r * half + i]);
                    let x1 = row[base_c + i];
                    let x2 = row[base_c + half + i];
                    row[base_c + i] = x1 * c - x2 * s;
                    row[base_c + half + i] = x1 * s + x2 * c;
                }
            }
        }
        let ng = self.ng(x);
        self.push(value, Op::Rope { x, cos, sin, heads }, ng)
    }

    /// Bidirectional multi-head scaled dot-product attention.
    ///
    /// Rows of `q`, `k`, `v` are packed sequences described by `segments`;
    /// attention never crosses a segment boundary. Keys whose row has
    /// `key_valid[row] == false` receive zero weight.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        segments: Vec<Segment>,
        key_valid: &[bool],
        heads: usize,
    ) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (rows, d) = qv.shape();
        assert_eq!(kv.shape(), (rows, d));
        assert_eq!(vv.shape(), (rows, d));
        assert_eq!(key_valid.len(), rows);
        let dh = d / heads;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let total: usize = segments.iter().map(|s| s.len * s.len * heads).sum();
        let mut probs = vec![T::zero(); total];
        let mut out = Matrix::zeros(rows, d);
        let di = d as isize;
        let mut off = 0;
        for seg in &segments {
            let n = seg.len;
            for h in 0..heads {
                let base = seg.start * d + h * dh;
                let p = &mut probs[off..off + n * n];
                T::gemm(
                    n,
                    dh,
                    n,
                    &qv.data()[base..],
                    di,
                    1,
                    &kv.data()[base..],
                    1,
                    di,
                    T::zero(),
                    p,
                    n as isize,
                    1,
                );
                for i in 0..n {
                    let row = &mut p[i * n..(i + 1) * n];
                    let mut max = T::neg_infinity();
                    for (j, x) in row.iter_mut().enumerate() {
                        if key_valid[seg.start + j] {
                            *x *= scale;
                            max = max.max(*x);
                        }
                    }
                    let mut denom = T::zero();
                    for (j, x) in row.iter_mut().enumerate() {
                        if key_valid[seg.start + j] {
                            *x = (*x - max).exp();
                            denom += *x;
                        } else {
                            *x = T::zero();
                        }
                    }
                    if denom > T::zero() {
                        for x in row.iter_mut() {
                            *x /= denom;
                        }
                    }
                }
                T::gemm(
                    n,
                    n,
                    dh,
                    p,
                    n as isize,
                    1,
                    &vv.data()[base..],
                    di,
                    1,
                    T::zero(),
                    &mut out.data_mut()[base..],
                    di,
                    1,
                );
                off += n * n;
            }
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                segments,
                heads,
                probs,
            },
            ng,
        )
    }

    /// Concatenates the rows listed in each group into one output row.
    pub fn gather_concat(&mut self, x: Var, groups: Vec<Vec<usize>>) -> Var {
        let xv = self.value(x);
        let width = groups.first().map_or(0, Vec::len);
        let cols = xv.cols();
        let mut value = Matrix::zeros(groups.len(), width * cols);
        for (g, rows) in groups.iter().enumerate() {
            assert_eq!(rows.len(), width, "groups must share a width");
            let out = value.row_mut(g);
            for (slot, &r) in rows.iter().enumerate() {
                out[slot * cols..(slot + 1) * cols].copy_from_slice(xv.row(r));
            }
        }
        let ng = self.ng(x);
        self.push(value, Op::GatherConcat { x, groups }, ng)
    }

    /// Scales every row to unit Euclidean norm (zero rows stay zero).
    pub fn normalize_rows(&mut self, x: Var) -> Var {
        let mut value = self.value(x).clone();
        let cols = value.cols();
        let mut inv_norm = Vec::with_capacity(value.rows());
        for row in value.data_mut().chunks_mut(cols.max(1)) {
            let n = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            let inv = if n > T::zero() { T::one() / n } else { T::zero() };
            for v in row.iter_mut() {
                *v *= inv;
            }
            inv_norm.push(inv);
        }
        let ng = self.ng(x);
        self.push(value, Op::NormalizeRows { x, inv_norm }, ng)
    }

    /// Weighted softmax cross-entropy reduced to a `1×1` node.
    pub fn softmax_xent(&mut self, logits: Var, targets: &[Option<usize>], weights: &[T]) -> Var {
        let (loss, grad) = softmax_xent(self.value(logits), targets, weights);
        let ng = self.ng(logits);
        self.push(Matrix::scalar(loss), Op::SoftmaxXent { logits, grad }, ng)
    }

    /// Gradients of the `1×1` node `root` with respect to every node.
    pub fn backward(&self, root: Var) -> Gradients<T> {
        assert_eq!(self.value(root).shape(), (1, 1), "backward needs a scalar root");
        let mut grads: Vec<Option<Matrix<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Matrix::scalar(T::one()));
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn backprop(&self, node: &Node<T>, g: &Matrix<T>, grads: &mut [Option<Matrix<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, tb } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    // d(a·b)/da = g·bᵀ ; d(a·bᵀ)/da = g·b
                    let ga = Matrix::matmul(g, false, vb, !*tb);
                    accumulate(grads, *a, ga);
                }
                if self.ng(*b) {
                    let gb = if *tb {
                        Matrix::matmul(g, true, va, false)
                    } else {
                        Matrix::matmul(va, true, g, false)
                    };
                    accumulate(grads, *b, gb);
                }
            }
            Op::Add { a, b } => {
                if self.ng(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.ng(*b) {
                    accumulate(grads, *b, g.clone());
                }
            }
            Op::AddScaled { a, b, w } => {
                if self.ng(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.ng(*b) {
                    let mut gb = g.clone();
                    gb.scale(*w);
                    accumulate(grads, *b, gb);
                }
            }
            Op::AddRow { a, bias } => {
                if self.ng(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.ng(*bias) {
                    let mut gb = Matrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (x, &y) in gb.data_mut().iter_mut().zip(g.row(r)) {
                            *x += y;
                        }
                    }
                    accumulate(grads, *bias, gb);
                }
            }
            Op::MulConst { a, factor } => {
                let mut ga = g.clone();
                for (x, &f) in ga.data_mut().iter_mut().zip(factor) {
                    *x *= f;
                }
                accumulate(grads, *a, ga);
            }
            Op::NormalizeRows { x, inv_norm } => {
                // d(x/|x|) = (g − y·(y·g)) / |x|
                let y = &node.value;
                let mut gx = g.clone();
                for (r, &inv) in inv_norm.iter().enumerate() {
                    let yr = y.row(r);
                    let dotp: T = yr.iter().zip(g.row(r)).map(|(&a, &b)| a * b).sum();
                    for (o, &yi) in gx.row_mut(r).iter_mut().zip(yr) {
                        *o = (*o - yi * dotp) * inv;
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::Scale { a, s } => {
                let mut ga = g.clone();
                ga.scale(*s);
                accumulate(grads, *a, ga);
            }
            Op::Gather { table, ids } => {
                let t = self.value(*table);
                let mut gt = Matrix::zeros(t.rows(), t.cols());
                for (r, &id) in ids.iter().enumerate() {
                    for (x, &y) in gt.row_mut(id).iter_mut().zip(g.row(r)) {
                        *x += y;
                    }
                }
                accumulate(grads, *table, gt);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let (rows, cols) = g.shape();
                let gv = self.value(*gain).data();
                let n = T::of(cols as f64);
                if self.ng(*x) {
                    let mut gx = Matrix::zeros(rows, cols);
                    for r in 0..rows {
                        let gr = g.row(r);
                        let xh = &xhat[r * cols..(r + 1) * cols];
                        let mut mean_d = T::zero();
                        let mut mean_dx = T::zero();
                        for c in 0..cols {
                            let d = gr[c] * gv[c];
                            mean_d += d;
                            mean_dx += d * xh[c];
                        }
                        mean_d /= n;
                        mean_dx /= n;
                        let out = gx.row_mut(r);
                        for c in 0..cols {
                            let d = gr[c] * gv[c];
                            out[c] = inv_std[r] * (d - mean_d - xh[c] * mean_dx);
                        }
                    }
                    accumulate(grads, *x, gx);
                }
                if self.ng(*gain) || self.ng(*bias) {
                    let mut gg = Matrix::zeros(1, cols);
                    let mut gb = Matrix::zeros(1, cols);
                    for r in 0..rows {
                        let gr = g.row(r);
                        for c in 0..cols {
                            gg.data_mut()[c] += gr[c] * xhat[r * cols + c];
                            gb.data_mut()[c] += gr[c];
                        }
                    }
                    if self.ng(*gain) {
                        accumulate(grads, *gain, gg);
                    }
                    if self.ng(*bias) {
                        accumulate(grads, *bias, gb);
                    }
                }
            }
            Op::Gelu { x, tanh } => {
                let xv = self.value(*x);
                let mut gx = g.clone();
                for ((d, &xi), &t) in gx.data_mut().iter_mut().zip(xv.data()).zip(tanh) {
                    *d *= gelu_grad(xi, t);
                }
                accumulate(grads, *x, gx);
            }
            Op::Rope { x, cos, sin, heads } => {
                let (rows, cols) = g.shape();
                let dh = cols / heads;
                let half = dh / 2;
                let mut gx = g.clone();
                for r in 0..rows {
                    let row = gx.row_mut(r);
                    for h in 0..*heads {
                        let b = h * dh;
                        for i in 0..half {
                            let (c, s) = (cos[r * half + i], sin[r * half + i]);
                            let g1 = row[b + i];
                            let g2 = row[b + half + i];
                            row[b + i] = g1 * c + g2 * s;
                            row[b + half + i] = -g1 * s + g2 * c;
                        }
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::Attention {
                q,
                k,
                v,
                segments,
                heads,
                probs,
            } => self.attention_backward(*q, *k, *v, segments, *heads, probs, g, grads),
            Op::GatherConcat { x, groups } => {
                let xv = self.value(*x);
                let cols = xv.cols();
                let mut gx = Matrix::zeros(xv.rows(), cols);
                for (gi, rows) in groups.iter().enumerate() {
                    let src = g.row(gi);
                    for (slot, &r) in rows.iter().enumerate() {
                        for (d, &s) in gx.row_mut(r).iter_mut().zip(&src[slot * cols..(slot + 1) * cols]) {
                            *d += s;
                        }
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::SoftmaxXent { logits, grad } => {
                let mut gl = grad.clone();
                gl.scale(g.get(0, 0));
                accumulate(grads, *logits, gl);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        segments: &[Segment],
        heads: usize,
        probs: &[T],
        g: &Matrix<T>,
        grads: &mut [Option<Matrix<T>>],
    ) {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (rows, d) = qv.shape();
        let dh = d / heads;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let di = d as isize;
        let mut gq = Matrix::zeros(rows, d);
        let mut gk = Matrix::zeros(rows, d);
        let mut gv = Matrix::zeros(rows, d);
        let mut off = 0;
        let mut dp = Vec::new();
        for seg in segments {
            let n = seg.len;
            dp.resize(n * n, T::zero());
            for h in 0..heads {
                let base = seg.start * d + h * dh;
                let p = &probs[off..off + n * n];
                // dP = dO·Vᵀ
                T::gemm(
                    n,
                    dh,
                    n,
                    &g.data()[base..],
                    di,
                    1,
                    &vv.data()[base..],
                    1,
                    di,
                    T::zero(),
                    &mut dp,
                    n as isize,
                    1,
                );
                // dV += Pᵀ·dO
                T::gemm(
                    n,
                    n,
                    dh,
                    p,
                    1,
                    n as isize,
                    &g.data()[base..],
                    di,
                    1,
                    T::one(),
                    &mut gv.data_mut()[base..],
                    di,
                    1,
                );
                // dS = P ⊙ (dP − rowsum(dP ⊙ P)), folded with the 1/√dh scale.
                for i in 0..n {
                    let pr = &p[i * n..(i + 1) * n];
                    let dr = &mut dp[i * n..(i + 1) * n];
                    let dotp: T = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum();
                    for (x, &pi) in dr.iter_mut().zip(pr) {
                        *x = pi * (*x - dotp) * scale;
                    }
                }
                // dQ += dS·K ; dK += dSᵀ·Q
                T::gemm(
                    n,
                    n,
                    dh,
                    &dp,
                    n as isize,
                    1,
                    &kv.data()[base..],
                    di,
                    1,
                    T::one(),
                    &mut gq.data_mut()[base..],
                    di,
                    1,
                );
                T::gemm(
                    n,
                    n,
                    dh,
                    &dp,
                    1,
                    n as isize,
                    &qv.data()[base..],
                    di,
                    1,
                    T::one(),
                    &mut gk.data_mut()[base..],
                    di,
                    1,
                );
                off += n * n;
            }
        }
        if self.ng(q) {
            accumulate(grads, q, gq);
        }
        if self.ng(k) {
            accumulate(grads, k, gk);
        }
        if self.ng(v) {
            accumulate(grads, v, gv);
        }
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Matrix<T>>], v: Var, g: Matrix<T>) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Matrix<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// `None` when the node does not influence the root.
    pub fn get(&self, v: Var) -> Option<&Matrix<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Matrix<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central-difference check of `f` against the tape gradient of `build`.
    fn check(
        inputs: Vec<Matrix<f64>>,
        build: impl Fn(&mut Tape<f64>, &[Var]) -> Var,
    ) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|m| tape.param(m.clone())).collect();
        let root = build(&mut tape, &vars);
        let grads = tape.backward(root);
        let eval = |ins: &[Matrix<f64>]| {
            let mut t = Tape::new();
            let vs: Vec<Var> = ins.iter().map(|m| t.param(m.clone())).collect();
            let r = build(&mut t, &vs);
            t.scalar(r)
        };
        let h = 1e-5;
        for (i, input) in inputs.iter().enumerate() {
            let analytic = grads.get(vars[i]).cloned().unwrap_or_else(|| Matrix::zeros(input.rows(), input.cols()));
            for j in 0..input.len() {
                let mut plus = inputs.clone();
                plus[i].data_mut()[j] += h;
                let mut minus = inputs.clone();
                minus[i].data_mut()[j] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = analytic.data()[j];
                let err = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
                assert!(err < 1e-6, "input {i} elem {j}: analytic {a} vs fd {fd}");
            }
        }
    }

    fn pseudo(rows: usize, cols: usize, seed: f64) -> Matrix<f64> {
        let data = (0..rows * cols)
            .map(|i| ((i as f64 + 1.0) * 0.7311 + seed).sin() * 0.8)
            .collect();
        Matrix::from_vec(rows, cols, data)
    }

    /// Weighted sum of all entries, as a 1×1 node.
    fn sum_all(t: &mut Tape<f64>, x: Var) -> Var {
        let (r, c) = t.value(x).shape();
        let prod = t.mul_const(x, pseudo(r, c, 9.0).into_vec());
        let ones_r = t.constant(Matrix::filled(1, r, 1.0));
        let ones_c = t.constant(Matrix::filled(c, 1, 1.0));
        let s = t.matmul(ones_r, prod);
        t.matmul(s, ones_c)
    }

    #[test]
    fn matmul_and_bias_gradients() {
        check(vec![pseudo(3, 4, 0.1), pseudo(4, 2, 0.2), pseudo(1, 2, 0.3)], |t, v| {
            let y = t.matmul(v[0], v[1]);
            let y = t.add_row(y, v[2]);
            sum_all(t, y)
        });
        check(vec![pseudo(3, 4, 0.4), pseudo(5, 4, 0.5)], |t, v| {
            let y = t.matmul_t(v[0], v[1]);
            sum_all(t, y)
        });
    }

    #[test]
    fn layer_norm_and_gelu_gradients() {
        check(vec![pseudo(3, 6, 1.0), pseudo(1, 6, 2.0), pseudo(1, 6, 3.0)], |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2], 1e-5);
            let y = t.gelu(y);
            sum_all(t, y)
        });
    }

    #[test]
    fn gather_and_concat_gradients() {
        check(vec![pseudo(4, 3, 0.9)], |t, v| {
            let y = t.gather(v[0], vec![2, 0, 2, 3]);
            let y = t.gather_concat(y, vec![vec![0, 1], vec![3, 2]]);
            sum_all(t, y)
        });
    }

    #[test]
    fn normalize_rows_gradient() {
        check(vec![pseudo(3, 5, 0.6)], |t, v| {
            let y = t.normalize_rows(v[0]);
            sum_all(t, y)
        });
    }

    #[test]
    fn rope_gradient_and_norm_preservation() {
        let x = pseudo(5, 8, 0.3);
        let mut t = Tape::new();
        let v = t.constant(x.clone());
        let y = t.rope(v, &[0, 1, 2, 3, 7], 2, 10_000.0);
        for r in 0..5 {
            let n0: f64 = x.row(r).iter().map(|a| a * a).sum();
            let n1: f64 = t.value(y).row(r).iter().map(|a| a * a).sum();
            assert!((n0 - n1).abs() < 1e-12);
        }
        check(vec![x], |t, v| {
            let y = t.rope(v[0], &[0, 1, 2, 3, 7], 2, 10_000.0);
            sum_all(t, y)
        });
    }

    #[test]
    fn attention_gradient_with_padding_and_segments() {
        let valid = [false, true, true, true, true, false, true];
        check(vec![pseudo(7, 4, 0.1), pseudo(7, 4, 0.2), pseudo(7, 4, 0.3)], move |t, v| {
            let segs = vec![Segment { start: 0, len: 4 }, Segment { start: 4, len: 3 }];
            let y = t.attention(v[0], v[1], v[2], segs, &valid, 2);
            sum_all(t, y)
        });
    }

    #[test]
    fn rope_keeps_attention_relative() {
        // Shifting every position by a constant leaves attention output unchanged.
        let q = pseudo(4, 8, 0.5);
        let run = |shift: usize| {
            let mut t = Tape::new();
            let v = t.constant(q.clone());
            let pos: Vec<usize> = (0..4).map(|p| p + shift).collect();
            let rq = t.rope(v, &pos, 2, 10_000.0);
            let rk = t.rope(v, &pos, 2, 10_000.0);
            let a = t.attention(rq, rk, v, vec![Segment { start: 0, len: 4 }], &[true; 4], 2);
            t.value(a).clone()
        };
        let (a, b) = (run(0), run(3));
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_xent_gradient() {
        let targets = [Some(1), None, Some(0)];
        let weights = [0.5, 1.0, 2.0];
        check(vec![pseudo(3, 4, 0.7)], move |t, v| t.softmax_xent(v[0], &targets, &weights));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut t = Tape::<f64>::new();
        let c = t.constant(pseudo(2, 2, 0.0));
        let p = t.param(pseudo(2, 2, 1.0));
        let y = t.matmul(c, p);
        let l = t.softmax_xent(y, &[Some(0), Some(1)], &[1.0, 1.0]);
        let g = t.backward(l);
        assert!(g.get(c).is_none());
        assert!(g.get(p).is_some());
    }
}
