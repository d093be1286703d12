//! Reverse-mode gradient tape.
//!
//! Every operation appends a node holding its output value and whatever it
//! needs for the backward pass. Nodes are created in topological order, so the
//! backward sweep is a single reverse scan. Nodes that do not depend on a
//! trainable leaf are never visited on the way back.

use crate::error::{Error, Result};

use super::kernels::{self, axpy, dot, gemm, gemm_nt, gemm_tn};
use super::{Real, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    AddBroadcast(Var, Var),
    Scale(Var, T),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Softmax(Var),
    MaskedSoftmax(Var),
    Attention {
        qkv: Var,
        heads: usize,
        probs: Vec<T>,
    },
    Conv3x3 {
        x: Var,
        w: Var,
        b: Var,
        grid: (usize, usize),
        cls: bool,
    },
    PrependToken {
        x: Var,
        token: Var,
    },
    SliceTokens {
        x: Var,
        start: usize,
    },
    MeanTokens {
        x: Var,
        start: usize,
    },
    Reshape(Var),
    SliceBatch {
        x: Var,
        index: usize,
    },
    ConcatBatch(Vec<Var>),
    ScaleByWeight {
        x: Var,
        weights: Var,
        col: usize,
    },
    WeightedSum {
        items: Vec<Var>,
        weights: Var,
        row: usize,
        cols: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    Mse {
        pred: Var,
        target: Vec<T>,
    },
    DotConst {
        x: Var,
        coeffs: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(var.0).and_then(|g| g.take())
    }
}

pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    fn val(&self, var: Var) -> &[T] {
        self.nodes[var.0].value.data()
    }

    /// `x[.., k] · w[k, n]`
    pub fn matmul(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        if ws.len() != 2 || xs.last() != Some(&ws[0]) {
            return Err(Error::shape("matmul", xs, ws));
        }
        let (k, n) = (ws[0], ws[1]);
        let m = self.value(x).rows();
        let mut shape = xs.to_vec();
        *shape.last_mut().unwrap() = n;
        let mut out = vec![T::zero(); m * n];
        gemm(self.val(x), self.val(w), &mut out, m, k, n);
        let ng = self.any_grad(&[x, w]);
        Ok(self.push(Tensor::new(shape, out)?, Op::MatMul(x, w), ng))
    }

    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xs, bs) = (self.shape(x), self.shape(b));
        if bs.len() != 1 || xs.last() != Some(&bs[0]) {
            return Err(Error::shape("add_bias", xs, bs));
        }
        let n = bs[0];
        let mut out = self.value(x).clone();
        let bias = self.val(b).to_vec();
        for row in out.data_mut().chunks_mut(n) {
            for (o, &bv) in row.iter_mut().zip(&bias) {
                *o += bv;
            }
        }
        let ng = self.any_grad(&[x, b]);
        Ok(self.push(out, Op::AddBias(x, b), ng))
    }

    /// Fully connected map: `x · w + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("add", self.shape(a), self.shape(b)));
        }
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let ng = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    /// `x[B, ...] + y[...]`, broadcasting `y` over the leading axis.
    pub fn add_broadcast(&mut self, x: Var, y: Var) -> Result<Var> {
        let (xs, ys) = (self.shape(x), self.shape(y));
        if xs.len() != ys.len() + 1 || xs[1..] != ys[..] {
            return Err(Error::shape("add_broadcast", xs, ys));
        }
        let inner = self.value(y).numel();
        let mut out = self.value(x).clone();
        let yv = self.val(y).to_vec();
        for chunk in out.data_mut().chunks_mut(inner) {
            for (o, &v) in chunk.iter_mut().zip(&yv) {
                *o += v;
            }
        }
        let ng = self.any_grad(&[x, y]);
        Ok(self.push(out, Op::AddBroadcast(x, y), ng))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let mut out = self.value(x).clone();
        for v in out.data_mut() {
            *v *= s;
        }
        let ng = self.any_grad(&[x]);
        self.push(out, Op::Scale(x, s), ng)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        for v in out.data_mut() {
            *v = kernels::gelu(*v);
        }
        let ng = self.any_grad(&[x]);
        self.push(out, Op::Gelu(x), ng)
    }

    /// Layer normalization over the last axis, followed by `γ·x̂ + β`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let d = *xs.last().unwrap();
        for p in [gamma, beta] {
            if self.shape(p) != [d] {
                return Err(Error::shape("layer_norm", &xs, self.shape(p)));
            }
        }
        let eps = T::lit(LAYER_NORM_EPS);
        let inv_d = T::one() / T::lit(d as f64);
        let (g, b) = (self.val(gamma).to_vec(), self.val(beta).to_vec());
        let input = self.val(x);
        let rows = input.len() / d;
        let mut xhat = vec![T::zero(); input.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); input.len()];
        for r in 0..rows {
            let row = &input[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let ng = self.any_grad(&[x, gamma, beta]);
        Ok(self.push(
            Tensor::new(xs, out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        let n = out.last_dim();
        for row in out.data_mut().chunks_mut(n) {
            kernels::softmax_row(row);
        }
        let ng = self.any_grad(&[x]);
        self.push(out, Op::Softmax(x), ng)
    }

    /// Softmax over the entries selected by `mask`, row by row; unselected
    /// entries are exactly zero. Every row needs at least one selected entry.
    pub fn masked_softmax(&mut self, x: Var, mask: Vec<bool>) -> Result<Var> {
        let value = self.value(x);
        if mask.len() != value.numel() {
            return Err(Error::shape("masked_softmax", value.shape(), &[mask.len()]));
        }
        let n = value.last_dim();
        let mut out = Tensor::zeros(value.shape().to_vec());
        for (r, (src, dst)) in value
            .data()
            .chunks(n)
            .zip(out.data_mut().chunks_mut(n))
            .enumerate()
        {
            let m = &mask[r * n..(r + 1) * n];
            let max = src
                .iter()
                .zip(m)
                .filter(|(_, &on)| on)
                .fold(T::neg_infinity(), |acc, (&v, _)| acc.max(v));
            if max == T::neg_infinity() {
                return Err(Error::InvalidConfig(format!(
                    "masked_softmax row {r} has no active entry"
                )));
            }
            let mut sum = T::zero();
            for j in 0..n {
                if m[j] {
                    dst[j] = (src[j] - max).exp();
                    sum += dst[j];
                }
            }
            for j in 0..n {
                if m[j] {
                    dst[j] = dst[j] / sum;
                }
            }
        }
        let ng = self.any_grad(&[x]);
        Ok(self.push(out, Op::MaskedSoftmax(x), ng))
    }

    /// Multi-head scaled dot-product self-attention over a packed
    /// `[B, N, 3d]` query/key/value tensor. Returns `[B, N, d]`.
    pub fn attention(&mut self, qkv: Var, heads: usize) -> Result<Var> {
        let s = self.shape(qkv).to_vec();
        if s.len() != 3 || s[2] % 3 != 0 || (s[2] / 3) % heads != 0 {
            return Err(Error::shape("attention", &s, &[heads]));
        }
        let (batch, n, d) = (s[0], s[1], s[2] / 3);
        let dh = d / heads;
        let scale = T::one() / T::lit(dh as f64).sqrt();
        let src = self.val(qkv);
        let mut probs = vec![T::zero(); batch * heads * n * n];
        let mut out = vec![T::zero(); batch * n * d];
        for b in 0..batch {
            let base = b * n * 3 * d;
            for h in 0..heads {
                let p = &mut probs[(b * heads + h) * n * n..(b * heads + h + 1) * n * n];
                for i in 0..n {
                    let q = &src[base + i * 3 * d + h * dh..][..dh];
                    let row = &mut p[i * n..(i + 1) * n];
                    for (j, r) in row.iter_mut().enumerate() {
                        let k = &src[base + j * 3 * d + d + h * dh..][..dh];
                        *r = dot(q, k) * scale;
                    }
                    kernels::softmax_row(row);
                    let o = &mut out[(b * n + i) * d + h * dh..][..dh];
                    for (j, &pij) in row.iter().enumerate() {
                        let v = &src[base + j * 3 * d + 2 * d + h * dh..][..dh];
                        axpy(pij, v, o);
                    }
                }
            }
        }
        let ng = self.any_grad(&[qkv]);
        Ok(self.push(
            Tensor::new(vec![batch, n, d], out)?,
            Op::Attention { qkv, heads, probs },
            ng,
        ))
    }

    /// 3×3 convolution with zero padding over token rows laid out as an
    /// `H×W` grid. With `cls`, token 0 is a separate 1×1 grid, so only the
    /// center kernel tap reaches it. `w` is `[3, 3, c_in, c_out]`.
    pub fn conv3x3(&mut self, x: Var, w: Var, b: Var, grid: (usize, usize), cls: bool) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let off = cls as usize;
        if xs.len() != 3 || xs[1] != off + grid.0 * grid.1 {
            return Err(Error::shape("conv3x3", &xs, &[off + grid.0 * grid.1]));
        }
        if ws.len() != 4 || ws[0] != 3 || ws[1] != 3 || ws[2] != xs[2] {
            return Err(Error::shape("conv3x3", &xs, &ws));
        }
        let (cin, cout) = (ws[2], ws[3]);
        if self.shape(b) != [cout] {
            return Err(Error::shape("conv3x3", &ws, self.shape(b)));
        }
        let (batch, t) = (xs[0], xs[1]);
        let input = self.val(x);
        let kernel = self.val(w);
        let bias = self.val(b);
        let mut out = vec![T::zero(); batch * t * cout];
        for bi in 0..batch {
            for tok in 0..t {
                let dst = &mut out[(bi * t + tok) * cout..][..cout];
                dst.copy_from_slice(bias);
                for (src_tok, tap) in conv_taps(tok, grid, cls) {
                    let xr = &input[(bi * t + src_tok) * cin..][..cin];
                    let wk = &kernel[tap * cin * cout..][..cin * cout];
                    for (ci, &xv) in xr.iter().enumerate() {
                        if xv != T::zero() {
                            axpy(xv, &wk[ci * cout..(ci + 1) * cout], dst);
                        }
                    }
                }
            }
        }
        let ng = self.any_grad(&[x, w, b]);
        Ok(self.push(
            Tensor::new(vec![batch, t, cout], out)?,
            Op::Conv3x3 { x, w, b, grid, cls },
            ng,
        ))
    }

    /// `[B, N, d]` with a shared `[d]` token → `[B, N+1, d]` (token first).
    pub fn prepend_token(&mut self, x: Var, token: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 || self.shape(token) != [xs[2]] {
            return Err(Error::shape("prepend_token", &xs, self.shape(token)));
        }
        let (batch, n, d) = (xs[0], xs[1], xs[2]);
        let tok = self.val(token).to_vec();
        let src = self.val(x);
        let mut out = Vec::with_capacity(batch * (n + 1) * d);
        for b in 0..batch {
            out.extend_from_slice(&tok);
            out.extend_from_slice(&src[b * n * d..(b + 1) * n * d]);
        }
        let ng = self.any_grad(&[x, token]);
        Ok(self.push(
            Tensor::new(vec![batch, n + 1, d], out)?,
            Op::PrependToken { x, token },
            ng,
        ))
    }

    /// Tokens `start..start+len` of a `[B, T, d]` tensor.
    pub fn slice_tokens(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 || len == 0 || start + len > xs[1] {
            return Err(Error::shape("slice_tokens", &xs, &[start, len]));
        }
        let (batch, t, d) = (xs[0], xs[1], xs[2]);
        let src = self.val(x);
        let mut out = Vec::with_capacity(batch * len * d);
        for b in 0..batch {
            out.extend_from_slice(&src[(b * t + start) * d..(b * t + start + len) * d]);
        }
        let ng = self.any_grad(&[x]);
        Ok(self.push(
            Tensor::new(vec![batch, len, d], out)?,
            Op::SliceTokens { x, start },
            ng,
        ))
    }

    /// Single token of a `[B, T, d]` tensor as `[B, d]`.
    pub fn select_token(&mut self, x: Var, index: usize) -> Result<Var> {
        let s = self.slice_tokens(x, index, 1)?;
        let shape = self.shape(s);
        let target = vec![shape[0], shape[2]];
        self.reshape(s, target)
    }

    /// Mean over tokens `start..` of a `[B, T, d]` tensor → `[B, d]`.
    pub fn mean_tokens(&mut self, x: Var, start: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 || start >= xs[1] {
            return Err(Error::shape("mean_tokens", &xs, &[start]));
        }
        let (batch, t, d) = (xs[0], xs[1], xs[2]);
        let inv = T::one() / T::lit((t - start) as f64);
        let src = self.val(x);
        let mut out = vec![T::zero(); batch * d];
        for b in 0..batch {
            let dst = &mut out[b * d..(b + 1) * d];
            for tok in start..t {
                axpy(T::one(), &src[(b * t + tok) * d..][..d], dst);
            }
            for v in dst.iter_mut() {
                *v *= inv;
            }
        }
        let ng = self.any_grad(&[x]);
        Ok(self.push(
            Tensor::new(vec![batch, d], out)?,
            Op::MeanTokens { x, start },
            ng,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let ng = self.any_grad(&[x]);
        Ok(self.push(out, Op::Reshape(x), ng))
    }

    /// Sample `index` along the leading axis, keeping a unit leading axis.
    pub fn slice_batch(&mut self, x: Var, index: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if index >= xs[0] {
            return Err(Error::shape("slice_batch", &xs, &[index]));
        }
        let inner = self.value(x).numel() / xs[0];
        let data = self.val(x)[index * inner..(index + 1) * inner].to_vec();
        let mut shape = xs;
        shape[0] = 1;
        let ng = self.any_grad(&[x]);
        Ok(self.push(Tensor::new(shape, data)?, Op::SliceBatch { x, index }, ng))
    }

    /// Concatenation along the leading axis.
    pub fn concat_batch(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| Error::InvalidConfig("concat_batch of nothing".into()))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &v in xs {
            let s = self.shape(v);
            if s[1..] != tail[..] {
                return Err(Error::shape("concat_batch", self.shape(*first), s));
            }
            lead += s[0];
            data.extend_from_slice(self.val(v));
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        let ng = self.any_grad(xs);
        Ok(self.push(Tensor::new(shape, data)?, Op::ConcatBatch(xs.to_vec()), ng))
    }

    /// Multiplies `x` by column `col` of a `[R, M]` weight matrix. With `R = 1`
    /// the weight is a scalar for the whole tensor; with `R` equal to the
    /// leading extent of `x`, sample `r` is scaled by `weights[r, col]`.
    pub fn scale_by_weight(&mut self, x: Var, weights: Var, col: usize) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(weights).to_vec());
        if ws.len() != 2 || col >= ws[1] || (ws[0] != 1 && ws[0] != xs[0]) {
            return Err(Error::shape("scale_by_weight", &xs, &ws));
        }
        let m = ws[1];
        let w = self.val(weights);
        let coeff: Vec<T> = (0..ws[0]).map(|r| w[r * m + col]).collect();
        let mut out = self.value(x).clone();
        let inner = out.numel() / if ws[0] == 1 { 1 } else { xs[0] };
        for (chunk, &c) in out.data_mut().chunks_mut(inner).zip(coeff.iter().cycle()) {
            for v in chunk {
                *v *= c;
            }
        }
        let ng = self.any_grad(&[x, weights]);
        Ok(self.push(out, Op::ScaleByWeight { x, weights, col }, ng))
    }

    /// `Σ_j weights[row, cols[j]] · items[j]`, summed left to right.
    pub fn weighted_sum(&mut self, items: &[Var], weights: Var, row: usize, cols: &[usize]) -> Result<Var> {
        if items.is_empty() || items.len() != cols.len() {
            return Err(Error::shape("weighted_sum", &[items.len()], &[cols.len()]));
        }
        let ws = self.shape(weights).to_vec();
        if ws.len() != 2 || row >= ws[0] || cols.iter().any(|&c| c >= ws[1]) {
            return Err(Error::shape("weighted_sum", &ws, &[row]));
        }
        let shape = self.shape(items[0]).to_vec();
        let mut out = Tensor::zeros(shape.clone());
        for (&item, &c) in items.iter().zip(cols) {
            if self.shape(item) != shape.as_slice() {
                return Err(Error::shape("weighted_sum", &shape, self.shape(item)));
            }
            let alpha = self.val(weights)[row * ws[1] + c];
            let src = self.nodes[item.0].value.data();
            for (o, &v) in out.data_mut().iter_mut().zip(src) {
                *o += alpha * v;
            }
        }
        let mut deps = items.to_vec();
        deps.push(weights);
        let ng = self.any_grad(&deps);
        Ok(self.push(
            out,
            Op::WeightedSum {
                items: items.to_vec(),
                weights,
                row,
                cols: cols.to_vec(),
            },
            ng,
        ))
    }

    /// Mean cross-entropy of `[R, C]` logits against class indices.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let ls = self.shape(logits).to_vec();
        let c = *ls.last().unwrap();
        let rows = self.value(logits).rows();
        if rows != labels.len() || labels.iter().any(|&l| l >= c) {
            return Err(Error::shape("cross_entropy", &ls, &[labels.len()]));
        }
        let mut probs = self.val(logits).to_vec();
        let mut total = T::zero();
        for (row, &label) in probs.chunks_mut(c).zip(labels) {
            let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
            let lse = row.iter().map(|&x| (x - max).exp()).sum::<T>().ln() + max;
            total += lse - row[label];
            kernels::softmax_row(row);
        }
        let loss = total / T::lit(rows as f64);
        let ng = self.any_grad(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            ng,
        ))
    }

    /// Mean squared error against a constant target of equal size.
    pub fn mse(&mut self, pred: Var, target: &[T]) -> Result<Var> {
        let p = self.val(pred);
        if p.len() != target.len() {
            return Err(Error::shape("mse", self.shape(pred), &[target.len()]));
        }
        let n = T::lit(p.len() as f64);
        let loss = p.iter().zip(target).map(|(&a, &b)| (a - b) * (a - b)).sum::<T>() / n;
        let ng = self.any_grad(&[pred]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Mse {
                pred,
                target: target.to_vec(),
            },
            ng,
        ))
    }

    /// `Σ coeffs ⊙ x`, a scalar probe used to test individual primitives.
    pub fn dot_const(&mut self, x: Var, coeffs: &[T]) -> Result<Var> {
        if self.value(x).numel() != coeffs.len() {
            return Err(Error::shape("dot_const", self.shape(x), &[coeffs.len()]));
        }
        let total = self.val(x).iter().zip(coeffs).map(|(&a, &b)| a * b).sum();
        let ng = self.any_grad(&[x]);
        Ok(self.push(
            Tensor::scalar(total),
            Op::DotConst {
                x,
                coeffs: coeffs.to_vec(),
            },
            ng,
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::shape("backward", lv.shape(), &[1]));
        }
        let mut grads: Vec<Option<Tensor<T>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Tensor::full(lv.shape().to_vec(), T::one()));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], var: Var, g: Tensor<T>) {
        if !self.nodes[var.0].needs_grad {
            return;
        }
        match &mut grads[var.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn wants(&self, var: Var) -> bool {
        self.nodes[var.0].needs_grad
    }

    fn backward_node(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(x, w) => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (k, n) = (wv.shape()[0], wv.shape()[1]);
                let m = xv.rows();
                if self.wants(*x) {
                    let mut dx = vec![T::zero(); m * k];
                    gemm_nt(gd, wv.data(), &mut dx, m, n, k);
                    self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), dx)?);
                }
                if self.wants(*w) {
                    let mut dw = vec![T::zero(); k * n];
                    gemm_tn(xv.data(), gd, &mut dw, m, k, n);
                    self.accumulate(grads, *w, Tensor::new(vec![k, n], dw)?);
                }
            }
            Op::AddBias(x, b) => {
                if self.wants(*b) {
                    let n = self.value(*b).numel();
                    let mut db = vec![T::zero(); n];
                    for row in gd.chunks(n) {
                        axpy(T::one(), row, &mut db);
                    }
                    self.accumulate(grads, *b, Tensor::new(vec![n], db)?);
                }
                self.accumulate(grads, *x, g.clone());
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::AddBroadcast(x, y) => {
                if self.wants(*y) {
                    let yv = self.value(*y);
                    let mut dy = vec![T::zero(); yv.numel()];
                    for chunk in gd.chunks(yv.numel()) {
                        axpy(T::one(), chunk, &mut dy);
                    }
                    self.accumulate(grads, *y, Tensor::new(yv.shape().to_vec(), dy)?);
                }
                self.accumulate(grads, *x, g.clone());
            }
            Op::Scale(x, s) => {
                let dx = gd.iter().map(|&v| v * *s).collect();
                self.accumulate(grads, *x, Tensor::new(g.shape().to_vec(), dx)?);
            }
            Op::Gelu(x) => {
                let xv = self.val(*x);
                let dx = gd
                    .iter()
                    .zip(xv)
                    .map(|(&gv, &v)| gv * kernels::gelu_grad(v))
                    .collect();
                self.accumulate(grads, *x, Tensor::new(g.shape().to_vec(), dx)?);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let gam = self.val(*gamma);
                let d = gam.len();
                let rows = gd.len() / d;
                if self.wants(*gamma) || self.wants(*beta) {
                    let mut dg = vec![T::zero(); d];
                    let mut db = vec![T::zero(); d];
                    for r in 0..rows {
                        for j in 0..d {
                            dg[j] += gd[r * d + j] * xhat[r * d + j];
                            db[j] += gd[r * d + j];
                        }
                    }
                    self.accumulate(grads, *gamma, Tensor::new(vec![d], dg)?);
                    self.accumulate(grads, *beta, Tensor::new(vec![d], db)?);
                }
                if self.wants(*x) {
                    let inv_d = T::one() / T::lit(d as f64);
                    let mut dx = vec![T::zero(); gd.len()];
                    let mut dxhat = vec![T::zero(); d];
                    for r in 0..rows {
                        let mut mean_dh = T::zero();
                        let mut mean_dh_h = T::zero();
                        for j in 0..d {
                            dxhat[j] = gd[r * d + j] * gam[j];
                            mean_dh += dxhat[j];
                            mean_dh_h += dxhat[j] * xhat[r * d + j];
                        }
                        mean_dh *= inv_d;
                        mean_dh_h *= inv_d;
                        for j in 0..d {
                            dx[r * d + j] =
                                rstd[r] * (dxhat[j] - mean_dh - xhat[r * d + j] * mean_dh_h);
                        }
                    }
                    self.accumulate(grads, *x, Tensor::new(g.shape().to_vec(), dx)?);
                }
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let n = node.value.last_dim();
                let mut dx = vec![T::zero(); y.len()];
                for ((yr, gr), dr) in y.chunks(n).zip(gd.chunks(n)).zip(dx.chunks_mut(n)) {
                    let s = dot(yr, gr);
                    for j in 0..n {
                        dr[j] = yr[j] * (gr[j] - s);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(g.shape().to_vec(), dx)?);
            }
            Op::MaskedSoftmax(x) => {
                // Unselected outputs are identically zero, so y = 0 there
                // already masks their gradient.
                let y = node.value.data();
                let n = node.value.last_dim();
                let mut dx = vec![T::zero(); y.len()];
                for ((yr, gr), dr) in y.chunks(n).zip(gd.chunks(n)).zip(dx.chunks_mut(n)) {
                    let s = dot(yr, gr);
                    for j in 0..n {
                        dr[j] = yr[j] * (gr[j] - s);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(g.shape().to_vec(), dx)?);
            }
            Op::Attention { qkv, heads, probs } => {
                let s = self.shape(*qkv);
                let (batch, n, d) = (s[0], s[1], s[2] / 3);
                let dh = d / heads;
                let scale = T::one() / T::lit(dh as f64).sqrt();
                let src = self.val(*qkv);
                let mut dsrc = vec![T::zero(); src.len()];
                let mut dp = vec![T::zero(); n];
                for b in 0..batch {
                    let base = b * n * 3 * d;
                    for h in 0..*heads {
                        let p = &probs[(b * heads + h) * n * n..][..n * n];
                        for i in 0..n {
                            let go = &gd[(b * n + i) * d + h * dh..][..dh];
                            let prow = &p[i * n..(i + 1) * n];
                            for j in 0..n {
                                let v = &src[base + j * 3 * d + 2 * d + h * dh..][..dh];
                                dp[j] = dot(go, v);
                                let dv = &mut dsrc[base + j * 3 * d + 2 * d + h * dh..][..dh];
                                axpy(prow[j], go, dv);
                            }
                            let s_dot = dot(prow, &dp);
                            for j in 0..n {
                                let ds = prow[j] * (dp[j] - s_dot) * scale;
                                if ds == T::zero() {
                                    continue;
                                }
                                let k = &src[base + j * 3 * d + d + h * dh..][..dh];
                                let dq = &mut dsrc[base + i * 3 * d + h * dh..][..dh];
                                axpy(ds, k, dq);
                                let q = &src[base + i * 3 * d + h * dh..][..dh];
                                let dk = &mut dsrc[base + j * 3 * d + d + h * dh..][..dh];
                                axpy(ds, q, dk);
                            }
                        }
                    }
                }
                self.accumulate(grads, *qkv, Tensor::new(s.to_vec(), dsrc)?);
            }
            Op::Conv3x3 { x, w, b, grid, cls } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (batch, t, cin) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
                let cout = wv.shape()[3];
                let input = xv.data();
                let kernel = wv.data();
                let (want_x, want_w) = (self.wants(*x), self.wants(*w));
                let mut dx = vec![T::zero(); if want_x { input.len() } else { 0 }];
                let mut dw = vec![T::zero(); if want_w { kernel.len() } else { 0 }];
                let mut db = vec![T::zero(); cout];
                for bi in 0..batch {
                    for tok in 0..t {
                        let go = &gd[(bi * t + tok) * cout..][..cout];
                        axpy(T::one(), go, &mut db);
                        for (src_tok, tap) in conv_taps(tok, *grid, *cls) {
                            let xo = (bi * t + src_tok) * cin;
                            let wk = tap * cin * cout;
                            for ci in 0..cin {
                                let wrow = wk + ci * cout;
                                if want_x {
                                    dx[xo + ci] += dot(go, &kernel[wrow..wrow + cout]);
                                }
                                if want_w {
                                    let xval = input[xo + ci];
                                    if xval != T::zero() {
                                        axpy(xval, go, &mut dw[wrow..wrow + cout]);
                                    }
                                }
                            }
                        }
                    }
                }
                if want_x {
                    self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), dx)?);
                }
                if want_w {
                    self.accumulate(grads, *w, Tensor::new(wv.shape().to_vec(), dw)?);
                }
                self.accumulate(grads, *b, Tensor::new(vec![cout], db)?);
            }
            Op::PrependToken { x, token } => {
                let s = g.shape();
                let (batch, n1, d) = (s[0], s[1], s[2]);
                if self.wants(*token) {
                    let mut dt = vec![T::zero(); d];
                    for b in 0..batch {
                        axpy(T::one(), &gd[b * n1 * d..][..d], &mut dt);
                    }
                    self.accumulate(grads, *token, Tensor::new(vec![d], dt)?);
                }
                if self.wants(*x) {
                    let mut dx = Vec::with_capacity(batch * (n1 - 1) * d);
                    for b in 0..batch {
                        dx.extend_from_slice(&gd[(b * n1 + 1) * d..(b + 1) * n1 * d]);
                    }
                    self.accumulate(grads, *x, Tensor::new(vec![batch, n1 - 1, d], dx)?);
                }
            }
            Op::SliceTokens { x, start } => {
                let xs = self.shape(*x);
                let (batch, t, d) = (xs[0], xs[1], xs[2]);
                let len = g.shape()[1];
                let mut dx = vec![T::zero(); batch * t * d];
                for b in 0..batch {
                    dx[(b * t + start) * d..(b * t + start + len) * d]
                        .copy_from_slice(&gd[b * len * d..(b + 1) * len * d]);
                }
                self.accumulate(grads, *x, Tensor::new(xs.to_vec(), dx)?);
            }
            Op::MeanTokens { x, start } => {
                let xs = self.shape(*x);
                let (batch, t, d) = (xs[0], xs[1], xs[2]);
                let inv = T::one() / T::lit((t - start) as f64);
                let mut dx = vec![T::zero(); batch * t * d];
                for b in 0..batch {
                    for tok in *start..t {
                        axpy(inv, &gd[b * d..(b + 1) * d], &mut dx[(b * t + tok) * d..][..d]);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(xs.to_vec(), dx)?);
            }
            Op::Reshape(x) => {
                let shape = self.shape(*x).to_vec();
                self.accumulate(grads, *x, g.clone().reshape(shape)?);
            }
            Op::SliceBatch { x, index } => {
                let xs = self.shape(*x);
                let inner = gd.len();
                let mut dx = vec![T::zero(); xs[0] * inner];
                dx[index * inner..(index + 1) * inner].copy_from_slice(gd);
                self.accumulate(grads, *x, Tensor::new(xs.to_vec(), dx)?);
            }
            Op::ConcatBatch(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    let part = gd[offset..offset + n].to_vec();
                    offset += n;
                    self.accumulate(grads, p, Tensor::new(self.shape(p).to_vec(), part)?);
                }
            }
            Op::ScaleByWeight { x, weights, col } => {
                let ws = self.shape(*weights);
                let (r, m) = (ws[0], ws[1]);
                let wv = self.val(*weights);
                let inner = gd.len() / r;
                if self.wants(*x) {
                    let mut dx = gd.to_vec();
                    for (ri, chunk) in dx.chunks_mut(inner).enumerate() {
                        let c = wv[ri * m + col];
                        for v in chunk {
                            *v *= c;
                        }
                    }
                    self.accumulate(grads, *x, Tensor::new(g.shape().to_vec(), dx)?);
                }
                if self.wants(*weights) {
                    let xv = self.val(*x);
                    let mut dw = vec![T::zero(); r * m];
                    for ri in 0..r {
                        dw[ri * m + col] =
                            dot(&gd[ri * inner..(ri + 1) * inner], &xv[ri * inner..(ri + 1) * inner]);
                    }
                    self.accumulate(grads, *weights, Tensor::new(ws.to_vec(), dw)?);
                }
            }
            Op::WeightedSum {
                items,
                weights,
                row,
                cols,
            } => {
                let ws = self.shape(*weights).to_vec();
                let m = ws[1];
                let wv = self.val(*weights);
                let mut dw = vec![T::zero(); ws[0] * m];
                for (&item, &c) in items.iter().zip(cols) {
                    if self.wants(item) {
                        let alpha = wv[row * m + c];
                        let di = gd.iter().map(|&v| v * alpha).collect();
                        self.accumulate(grads, item, Tensor::new(g.shape().to_vec(), di)?);
                    }
                    dw[row * m + c] += dot(gd, self.val(item));
                }
                self.accumulate(grads, *weights, Tensor::new(ws, dw)?);
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let c = self.value(*logits).last_dim();
                let scale = gd[0] / T::lit(labels.len() as f64);
                let mut dl = probs.clone();
                for (row, &label) in dl.chunks_mut(c).zip(labels) {
                    row[label] -= T::one();
                    for v in row.iter_mut() {
                        *v *= scale;
                    }
                }
                self.accumulate(grads, *logits, Tensor::new(self.shape(*logits).to_vec(), dl)?);
            }
            Op::Mse { pred, target } => {
                let p = self.val(*pred);
                let scale = gd[0] * T::lit(2.0) / T::lit(p.len() as f64);
                let dp = p.iter().zip(target).map(|(&a, &b)| (a - b) * scale).collect();
                self.accumulate(grads, *pred, Tensor::new(self.shape(*pred).to_vec(), dp)?);
            }
            Op::DotConst { x, coeffs } => {
                let dx = coeffs.iter().map(|&c| c * gd[0]).collect();
                self.accumulate(grads, *x, Tensor::new(self.shape(*x).to_vec(), dx)?);
            }
        }
        Ok(())
    }
}

/// Source tokens and kernel taps (`ky * 3 + kx`) contributing to output
/// token `tok` under zero padding.
fn conv_taps(tok: usize, grid: (usize, usize), cls: bool) -> impl Iterator<Item = (usize, usize)> {
    let off = cls as usize;
    let (h, w) = grid;
    let center_only = cls && tok == 0;
    let p = tok.saturating_sub(off);
    let (y, x) = (p / w, p % w);
    (0..9).filter_map(move |tap| {
        if center_only {
            return (tap == 4).then_some((0, 4));
        }
        let (ky, kx) = (tap / 3, tap % 3);
        let ny = y as isize + ky as isize - 1;
        let nx = x as isize + kx as isize - 1;
        if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
            return None;
        }
        Some((off + ny as usize * w + nx as usize, tap))
    })
}
