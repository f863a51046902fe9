use std::sync::Arc;

use super::kernels::{dot, gelu, log_sum_exp, matmul_a_bt_acc, matmul_acc, matmul_at_b_acc, silu, softmax_in_place};
use super::{Scalar, Tensor};
use crate::error::{L2dError, Result};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// One block of an attention computation: queries
/// `q_start..q_start + q_len` attend keys `k_start..k_start + k_len`, and query
/// `i` of the block sees the first `min(offset + i + 1, k_len)` keys.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttnSegment {
    pub q_start: usize,
    pub q_len: usize,
    pub k_start: usize,
    pub k_len: usize,
    pub offset: usize,
}

impl AttnSegment {
    #[inline]
    pub fn visible(&self, i: usize) -> usize {
        (self.offset + i + 1).min(self.k_len)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AttnLayout {
    pub segments: Vec<AttnSegment>,
}

impl AttnLayout {
    /// Causal self-attention over independent sequences stacked row-wise.
    pub fn causal(lengths: &[usize]) -> Self {
        let mut start = 0;
        let segments = lengths
            .iter()
            .map(|&len| {
                let seg = AttnSegment {
                    q_start: start,
                    q_len: len,
                    k_start: start,
                    k_len: len,
                    offset: 0,
                };
                start += len;
                seg
            })
            .collect();
        Self { segments }
    }
}

enum Op<F> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    Offset(Var),
    ScaleRows(Var, Vec<F>),
    Gelu(Var),
    Silu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        xhat: Vec<F>,
        inv_std: Vec<F>,
    },
    RowNormalize {
        x: Var,
        target: F,
        norms: Vec<F>,
    },
    GatherRows(Var, Vec<usize>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Sum(Var),
    Mean(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<F>,
        probs: Vec<F>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        layout: Arc<AttnLayout>,
        n_heads: usize,
        probs: Vec<F>,
    },
    Rope {
        x: Var,
        cos: Vec<F>,
        sin: Vec<F>,
        n_heads: usize,
    },
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Tape of primitive operations. Nodes are appended in evaluation order, so the
/// reverse of insertion order is a valid reverse topological order.
pub struct Graph<F> {
    nodes: Vec<Node<F>>,
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn trailing_broadcast(a: &[usize], b: &[usize]) -> bool {
    b.len() <= a.len() && a[a.len() - b.len()..] == *b
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Leaf that participates in differentiation when `requires_grad` is set.
    pub fn param(&mut self, value: Tensor<F>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// `a @ b` where `a` is viewed as `[rows, k]` and `b` has shape `[k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(bv.shape().len(), 2, "matmul rhs must be 2-d");
        let (k, n) = (bv.shape()[0], bv.shape()[1]);
        assert_eq!(av.cols(), k, "matmul inner dimension mismatch");
        let m = av.rows();
        let mut out = vec![F::zero(); m * n];
        matmul_acc(av.data(), bv.data(), &mut out, m, k, n);
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::from_parts(shape, out), Op::MatMul(a, b), rg)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(F, F) -> F, op: Op<F>) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert!(
            trailing_broadcast(av.shape(), bv.shape()),
            "operand shapes {:?} and {:?} are not trailing-broadcastable",
            av.shape(),
            bv.shape()
        );
        let bl = bv.len();
        let bd = bv.data();
        let out: Vec<F> = av.data().iter().enumerate().map(|(i, &x)| f(x, bd[i % bl])).collect();
        let shape = av.shape().to_vec();
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::from_parts(shape, out), op, rg)
    }

    /// Elementwise sum; `b` may broadcast over the leading dimensions of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: F) -> Var {
        let av = self.value(a);
        let out = av.data().iter().map(|&x| x * c).collect();
        let shape = av.shape().to_vec();
        let rg = self.rg(a);
        self.push(Tensor::from_parts(shape, out), Op::Scale(a, c), rg)
    }

    /// `a + c` for a scalar constant `c`.
    pub fn offset(&mut self, a: Var, c: F) -> Var {
        let av = self.value(a);
        let out = av.data().iter().map(|&x| x + c).collect();
        let shape = av.shape().to_vec();
        let rg = self.rg(a);
        self.push(Tensor::from_parts(shape, out), Op::Offset(a), rg)
    }

    /// Multiplies row `i` of `a` by the constant `coeffs[i]`.
    pub fn scale_rows(&mut self, a: Var, coeffs: Vec<F>) -> Var {
        let av = self.value(a);
        assert_eq!(av.rows(), coeffs.len(), "scale_rows coefficient count");
        let c = av.cols();
        let out = av.data().iter().enumerate().map(|(i, &x)| x * coeffs[i / c]).collect();
        let shape = av.shape().to_vec();
        let rg = self.rg(a);
        self.push(Tensor::from_parts(shape, out), Op::ScaleRows(a, coeffs), rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let out = av.data().iter().map(|&x| gelu(x).0).collect();
        let shape = av.shape().to_vec();
        let rg = self.rg(a);
        self.push(Tensor::from_parts(shape, out), Op::Gelu(a), rg)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let out = av.data().iter().map(|&x| silu(x).0).collect();
        let shape = av.shape().to_vec();
        let rg = self.rg(a);
        self.push(Tensor::from_parts(shape, out), Op::Silu(a), rg)
    }

    /// Row-wise softmax over the last dimension.
    pub fn softmax(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let c = av.cols();
        let mut out = av.data().to_vec();
        for row in out.chunks_mut(c) {
            softmax_in_place(row);
        }
        let shape = av.shape().to_vec();
        let rg = self.rg(a);
        self.push(Tensor::from_parts(shape, out), Op::Softmax(a), rg)
    }

    /// Row-wise normalization to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let c = xv.cols();
        let n = F::lit(c as f64);
        let eps = F::lit(eps);
        let mut xhat = Vec::with_capacity(xv.len());
        let mut inv_std = Vec::with_capacity(xv.rows());
        for row in xv.data().chunks(c) {
            let mean = row.iter().copied().sum::<F>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
            let is = F::one() / (var + eps).sqrt();
            inv_std.push(is);
            xhat.extend(row.iter().map(|&v| (v - mean) * is));
        }
        let shape = xv.shape().to_vec();
        let rg = self.rg(x);
        let value = Tensor::from_parts(shape, xhat.clone());
        let op = if rg {
            Op::LayerNorm { x, xhat, inv_std }
        } else {
            Op::LayerNorm {
                x,
                xhat: Vec::new(),
                inv_std: Vec::new(),
            }
        };
        self.push(value, op, rg)
    }

    /// Rescales every row to L2 norm `target`.
    pub fn row_normalize(&mut self, x: Var, target: f64) -> Var {
        let xv = self.value(x);
        let c = xv.cols();
        let target = F::lit(target);
        let mut out = Vec::with_capacity(xv.len());
        let mut norms = Vec::with_capacity(xv.rows());
        for row in xv.data().chunks(c) {
            let norm = dot(row, row).sqrt();
            norms.push(norm);
            out.extend(row.iter().map(|&v| target * v / norm));
        }
        let shape = xv.shape().to_vec();
        let rg = self.rg(x);
        self.push(
            Tensor::from_parts(shape, out),
            Op::RowNormalize { x, target, norms },
            rg,
        )
    }

    /// Embedding lookup: output row `i` is row `idx[i]` of `table`.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Var {
        let tv = self.value(table);
        let c = tv.cols();
        let rows = tv.rows();
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            assert!(i < rows, "gather index {i} out of range {rows}");
            out.extend_from_slice(tv.row(i));
        }
        let rg = self.rg(table);
        self.push(
            Tensor::from_parts(vec![idx.len(), c], out),
            Op::GatherRows(table, idx.to_vec()),
            rg,
        )
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let av = self.value(a);
        let c = av.cols();
        assert!(start + len <= c, "column slice out of range");
        let mut out = Vec::with_capacity(av.rows() * len);
        for row in av.data().chunks(c) {
            out.extend_from_slice(&row[start..start + len]);
        }
        let rows = av.rows();
        let rg = self.rg(a);
        self.push(Tensor::from_parts(vec![rows, len], out), Op::SliceCols(a, start), rg)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let av = self.value(a);
        let c = av.cols();
        assert!(start + len <= av.rows(), "row slice out of range");
        let out = av.data()[start * c..(start + len) * c].to_vec();
        let rg = self.rg(a);
        self.push(Tensor::from_parts(vec![len, c], out), Op::SliceRows(a, start), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let c = self.value(parts[0]).cols();
        let mut out = Vec::new();
        let mut rows = 0;
        let mut rg = false;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.cols(), c, "concat_rows width mismatch");
            out.extend_from_slice(pv.data());
            rows += pv.rows();
            rg |= self.rg(p);
        }
        self.push(
            Tensor::from_parts(vec![rows, c], out),
            Op::ConcatRows(parts.to_vec()),
            rg,
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                let pv = self.value(p);
                assert_eq!(pv.rows(), rows, "concat_cols row mismatch");
                out.extend_from_slice(pv.row(r));
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(
            Tensor::from_parts(vec![rows, total], out),
            Op::ConcatCols(parts.to_vec()),
            rg,
        )
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let s = av.data().iter().copied().sum::<F>() / F::lit(av.len() as f64);
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// Weighted mean over rows of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: Option<&[F]>) -> Var {
        let lv = self.value(logits);
        let c = lv.cols();
        assert_eq!(lv.rows(), targets.len(), "one target per logit row");
        let weights: Vec<F> = match weights {
            Some(w) => {
                assert_eq!(w.len(), targets.len());
                w.to_vec()
            }
            None => vec![F::one(); targets.len()],
        };
        let total_w: F = weights.iter().copied().sum();
        let mut loss = F::zero();
        let mut probs = Vec::with_capacity(lv.len());
        for ((row, &y), &w) in lv.data().chunks(c).zip(targets).zip(&weights) {
            assert!(y < c, "target {y} out of range {c}");
            let lse = log_sum_exp(row);
            loss += w * (lse - row[y]);
            probs.extend(row.iter().map(|&v| (v - lse).exp()));
        }
        let value = if total_w > F::zero() { loss / total_w } else { F::zero() };
        let rg = self.rg(logits);
        self.push(
            Tensor::scalar(value),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights,
                probs,
            },
            rg,
        )
    }

    /// Multi-head scaled dot-product attention with per-segment causal
    /// visibility. Heads are contiguous column blocks of width `d / n_heads`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, layout: Arc<AttnLayout>, n_heads: usize) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols();
        assert_eq!(kv.cols(), d, "key width");
        assert_eq!(vv.cols(), d, "value width");
        assert_eq!(d % n_heads, 0, "width divisible by heads");
        let dh = d / n_heads;
        let scale = F::lit(1.0 / (dh as f64).sqrt());
        let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
        let mut out = vec![F::zero(); qv.len()];
        let mut probs = Vec::new();
        let mut scores = Vec::new();
        for seg in &layout.segments {
            assert!(seg.q_start + seg.q_len <= qv.rows(), "query rows");
            assert!(seg.k_start + seg.k_len <= kv.rows(), "key rows");
            for h in 0..n_heads {
                let cols = h * dh..(h + 1) * dh;
                for i in 0..seg.q_len {
                    let qi = seg.q_start + i;
                    let q_row = &qd[qi * d + cols.start..qi * d + cols.end];
                    let n_vis = seg.visible(i);
                    scores.clear();
                    for j in 0..n_vis {
                        let kj = seg.k_start + j;
                        scores.push(dot(q_row, &kd[kj * d + cols.start..kj * d + cols.end]) * scale);
                    }
                    softmax_in_place(&mut scores);
                    let o_row = &mut out[qi * d + cols.start..qi * d + cols.end];
                    for (j, &p) in scores.iter().enumerate() {
                        let vj = seg.k_start + j;
                        let v_row = &vd[vj * d + cols.start..vj * d + cols.end];
                        for (o, &vv) in o_row.iter_mut().zip(v_row) {
                            *o += p * vv;
                        }
                    }
                    probs.extend_from_slice(&scores);
                }
            }
        }
        let shape = vec![qv.rows(), d];
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        self.push(
            Tensor::from_parts(shape, out),
            Op::Attention {
                q,
                k,
                v,
                layout,
                n_heads,
                probs,
            },
            rg,
        )
    }

    /// Rotary position encoding of interleaved pairs within each head.
    pub fn rope(&mut self, x: Var, positions: &[usize], n_heads: usize, base: f64) -> Var {
        let xv = self.value(x);
        let d = xv.cols();
        assert_eq!(xv.rows(), positions.len(), "one position per row");
        assert_eq!(d % n_heads, 0);
        let dh = d / n_heads;
        assert_eq!(dh % 2, 0, "head width must be even for rotary encoding");
        let half = dh / 2;
        let mut cos = Vec::with_capacity(positions.len() * half);
        let mut sin = Vec::with_capacity(positions.len() * half);
        for &p in positions {
            for j in 0..half {
                let freq = base.powf(-2.0 * j as f64 / dh as f64);
                let a = p as f64 * freq;
                cos.push(F::lit(a.cos()));
                sin.push(F::lit(a.sin()));
            }
        }
        let mut out = xv.data().to_vec();
        for (r, row) in out.chunks_mut(d).enumerate() {
            for h in 0..n_heads {
                for j in 0..half {
                    let (c, s) = (cos[r * half + j], sin[r * half + j]);
                    let i0 = h * dh + 2 * j;
                    let (x0, x1) = (row[i0], row[i0 + 1]);
                    row[i0] = x0 * c - x1 * s;
                    row[i0 + 1] = x0 * s + x1 * c;
                }
            }
        }
        let shape = xv.shape().to_vec();
        let rg = self.rg(x);
        self.push(Tensor::from_parts(shape, out), Op::Rope { x, cos, sin, n_heads }, rg)
    }

    /// Reverse pass from a scalar `loss`. Leaves without `requires_grad` get no
    /// gradient; a loss that depends on no such leaf yields an empty result.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        if self.value(loss).len() != 1 {
            return Err(L2dError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.rg(loss) {
            grads[loss.0] = Some(vec![F::one()]);
        }
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if self.nodes[idx].requires_grad {
                self.backprop_node(idx, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<F>>], v: Var, f: impl FnOnce(&mut [F])) {
        if !self.rg(v) {
            return;
        }
        let n = self.value(v).len();
        let slot = grads[v.0].get_or_insert_with(|| vec![F::zero(); n]);
        f(slot);
    }

    fn broadcast_acc(&self, grads: &mut [Option<Vec<F>>], b: Var, contrib: impl Fn(usize) -> F, n: usize) {
        let bl = self.value(b).len();
        self.accumulate(grads, b, |gb| {
            for i in 0..n {
                gb[i % bl] += contrib(i);
            }
        });
    }

    fn backprop_node(&self, idx: usize, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (k, n) = (bv.shape()[0], bv.shape()[1]);
                let m = av.rows();
                self.accumulate(grads, *a, |ga| matmul_a_bt_acc(g, bv.data(), ga, m, n, k));
                self.accumulate(grads, *b, |gb| matmul_at_b_acc(av.data(), g, gb, m, k, n));
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |ga| {
                    for (x, &y) in ga.iter_mut().zip(g) {
                        *x += y;
                    }
                });
                self.broadcast_acc(grads, *b, |i| g[i], g.len());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |ga| {
                    for (x, &y) in ga.iter_mut().zip(g) {
                        *x += y;
                    }
                });
                self.broadcast_acc(grads, *b, |i| -g[i], g.len());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let bl = bv.len();
                self.accumulate(grads, *a, |ga| {
                    for (i, x) in ga.iter_mut().enumerate() {
                        *x += g[i] * bv[i % bl];
                    }
                });
                self.broadcast_acc(grads, *b, |i| g[i] * av[i], g.len());
            }
            Op::Scale(a, c) => {
                self.accumulate(grads, *a, |ga| {
                    for (x, &y) in ga.iter_mut().zip(g) {
                        *x += y * *c;
                    }
                });
            }
            Op::Offset(a) => {
                self.accumulate(grads, *a, |ga| {
                    for (x, &y) in ga.iter_mut().zip(g) {
                        *x += y;
                    }
                });
            }
            Op::ScaleRows(a, coeffs) => {
                let c = self.value(*a).cols();
                self.accumulate(grads, *a, |ga| {
                    for (i, x) in ga.iter_mut().enumerate() {
                        *x += g[i] * coeffs[i / c];
                    }
                });
            }
            Op::Gelu(a) => {
                let av = self.value(*a).data();
                self.accumulate(grads, *a, |ga| {
                    for (i, x) in ga.iter_mut().enumerate() {
                        *x += g[i] * gelu(av[i]).1;
                    }
                });
            }
            Op::Silu(a) => {
                let av = self.value(*a).data();
                self.accumulate(grads, *a, |ga| {
                    for (i, x) in ga.iter_mut().enumerate() {
                        *x += g[i] * silu(av[i]).1;
                    }
                });
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let c = node.value.cols();
                self.accumulate(grads, *a, |ga| {
                    for ((yr, gr), gar) in y.chunks(c).zip(g.chunks(c)).zip(ga.chunks_mut(c)) {
                        let s = dot(yr, gr);
                        for j in 0..c {
                            gar[j] += yr[j] * (gr[j] - s);
                        }
                    }
                });
            }
            Op::LayerNorm { x, xhat, inv_std } => {
                let c = node.value.cols();
                let n = F::lit(c as f64);
                self.accumulate(grads, *x, |gx| {
                    for (r, ((xr, gr), gxr)) in xhat.chunks(c).zip(g.chunks(c)).zip(gx.chunks_mut(c)).enumerate() {
                        let mean_g = gr.iter().copied().sum::<F>() / n;
                        let mean_gx = dot(gr, xr) / n;
                        for j in 0..c {
                            gxr[j] += inv_std[r] * (gr[j] - mean_g - xr[j] * mean_gx);
                        }
                    }
                });
            }
            Op::RowNormalize { x, target, norms } => {
                let c = node.value.cols();
                let y = node.value.data();
                self.accumulate(grads, *x, |gx| {
                    for (r, ((yr, gr), gxr)) in y.chunks(c).zip(g.chunks(c)).zip(gx.chunks_mut(c)).enumerate() {
                        // y = target * u, u = x / |x|; dx = target/|x| (g - u (u.g))
                        let ug = dot(yr, gr) / *target;
                        for j in 0..c {
                            let u = yr[j] / *target;
                            gxr[j] += *target / norms[r] * (gr[j] - u * ug);
                        }
                    }
                });
            }
            Op::GatherRows(table, idx) => {
                let c = node.value.cols();
                self.accumulate(grads, *table, |gt| {
                    for (r, &i) in idx.iter().enumerate() {
                        for j in 0..c {
                            gt[i * c + j] += g[r * c + j];
                        }
                    }
                });
            }
            Op::SliceCols(a, start) => {
                let c = self.value(*a).cols();
                let len = node.value.cols();
                self.accumulate(grads, *a, |ga| {
                    for (r, gr) in g.chunks(len).enumerate() {
                        for j in 0..len {
                            ga[r * c + start + j] += gr[j];
                        }
                    }
                });
            }
            Op::SliceRows(a, start) => {
                let c = node.value.cols();
                self.accumulate(grads, *a, |ga| {
                    for (x, &y) in ga[start * c..].iter_mut().zip(g) {
                        *x += y;
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    self.accumulate(grads, p, |gp| {
                        for (x, &y) in gp.iter_mut().zip(&g[off..off + n]) {
                            *x += y;
                        }
                    });
                    off += n;
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let mut col = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    self.accumulate(grads, p, |gp| {
                        for (r, gpr) in gp.chunks_mut(w).enumerate() {
                            for j in 0..w {
                                gpr[j] += g[r * total + col + j];
                            }
                        }
                    });
                    col += w;
                }
            }
            Op::Sum(a) => {
                self.accumulate(grads, *a, |ga| {
                    for x in ga.iter_mut() {
                        *x += g[0];
                    }
                });
            }
            Op::Mean(a) => {
                let n = F::lit(self.value(*a).len() as f64);
                self.accumulate(grads, *a, |ga| {
                    for x in ga.iter_mut() {
                        *x += g[0] / n;
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
            } => {
                let c = self.value(*logits).cols();
                let total_w: F = weights.iter().copied().sum();
                if total_w <= F::zero() {
                    return;
                }
                self.accumulate(grads, *logits, |gl| {
                    for (r, &y) in targets.iter().enumerate() {
                        let w = g[0] * weights[r] / total_w;
                        for j in 0..c {
                            gl[r * c + j] += w * probs[r * c + j];
                        }
                        gl[r * c + y] -= w;
                    }
                });
            }
            Op::Attention {
                q,
                k,
                v,
                layout,
                n_heads,
                probs,
            } => self.attention_backward(*q, *k, *v, layout, *n_heads, probs, g, grads),
            Op::Rope { x, cos, sin, n_heads } => {
                let d = node.value.cols();
                let dh = d / n_heads;
                let half = dh / 2;
                self.accumulate(grads, *x, |gx| {
                    for (r, (gr, gxr)) in g.chunks(d).zip(gx.chunks_mut(d)).enumerate() {
                        for h in 0..*n_heads {
                            for j in 0..half {
                                let (c, s) = (cos[r * half + j], sin[r * half + j]);
                                let i0 = h * dh + 2 * j;
                                let (g0, g1) = (gr[i0], gr[i0 + 1]);
                                gxr[i0] += g0 * c + g1 * s;
                                gxr[i0 + 1] += -g0 * s + g1 * c;
                            }
                        }
                    }
                });
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        layout: &AttnLayout,
        n_heads: usize,
        probs: &[F],
        g: &[F],
        grads: &mut [Option<Vec<F>>],
    ) {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols();
        let dh = d / n_heads;
        let scale = F::lit(1.0 / (dh as f64).sqrt());
        let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
        let mut gq = vec![F::zero(); qv.len()];
        let mut gk = vec![F::zero(); kv.len()];
        let mut gv = vec![F::zero(); vv.len()];
        let mut dp = Vec::new();
        let mut cursor = 0;
        for seg in &layout.segments {
            for h in 0..n_heads {
                let c0 = h * dh;
                for i in 0..seg.q_len {
                    let qi = seg.q_start + i;
                    let n_vis = seg.visible(i);
                    let p = &probs[cursor..cursor + n_vis];
                    cursor += n_vis;
                    let g_row = &g[qi * d + c0..qi * d + c0 + dh];
                    dp.clear();
                    for (j, &pj) in p.iter().enumerate() {
                        let vj = seg.k_start + j;
                        let v_row = &vd[vj * d + c0..vj * d + c0 + dh];
                        dp.push(dot(g_row, v_row));
                        let gv_row = &mut gv[vj * d + c0..vj * d + c0 + dh];
                        for (x, &y) in gv_row.iter_mut().zip(g_row) {
                            *x += pj * y;
                        }
                    }
                    let s = dot(p, &dp);
                    let q_row = &qd[qi * d + c0..qi * d + c0 + dh];
                    for (j, &pj) in p.iter().enumerate() {
                        let ds = pj * (dp[j] - s) * scale;
                        let kj = seg.k_start + j;
                        let k_row = &kd[kj * d + c0..kj * d + c0 + dh];
                        let gq_row = &mut gq[qi * d + c0..qi * d + c0 + dh];
                        for (x, &y) in gq_row.iter_mut().zip(k_row) {
                            *x += ds * y;
                        }
                        let gk_row = &mut gk[kj * d + c0..kj * d + c0 + dh];
                        for (x, &y) in gk_row.iter_mut().zip(q_row) {
                            *x += ds * y;
                        }
                    }
                }
            }
        }
        let add = |dst: &mut [F], src: &[F]| {
            for (x, &y) in dst.iter_mut().zip(src) {
                *x += y;
            }
        };
        self.accumulate(grads, q, |x| add(x, &gq));
        self.accumulate(grads, k, |x| add(x, &gk));
        self.accumulate(grads, v, |x| add(x, &gv));
    }
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients<F> {
    grads: Vec<Option<Vec<F>>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&[F]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn populated(&self) -> usize {
        self.grads.iter().filter(|g| g.is_some()).count()
    }
}
