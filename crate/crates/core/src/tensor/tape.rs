use alloc::vec;
use alloc::vec::Vec;
use core::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;

use super::kernels::{gemm, gemm_nt, gemm_tn};
use super::{rows_cols, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.index
    }
}

enum Op<T> {
    /// Input or constant; no backward rule.
    Leaf,
    MatMul {
        a: usize,
        b: usize,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        shared_rhs: bool,
    },
    Add {
        a: usize,
        b: usize,
    },
    AddBias {
        x: usize,
        bias: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    Affine {
        x: usize,
        scale: T,
    },
    Scale {
        x: usize,
        s: usize,
    },
    RowScale {
        x: usize,
        g: usize,
    },
    Concat {
        a: usize,
        b: usize,
        p: usize,
        q: usize,
    },
    Slice {
        x: usize,
        start: usize,
        width: usize,
        full: usize,
    },
    Relu {
        x: usize,
    },
    Sigmoid {
        x: usize,
    },
    Tanh {
        x: usize,
    },
    Softmax {
        x: usize,
    },
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Embedding {
        table: usize,
        ids: Vec<usize>,
    },
    Transpose {
        x: usize,
        batch: usize,
        m: usize,
        n: usize,
    },
    Reshape {
        x: usize,
    },
    Sum {
        x: usize,
    },
    Clamp {
        x: usize,
        lo: T,
        hi: T,
    },
    CrossEntropy {
        logits: usize,
        targets: Vec<Option<usize>>,
        smoothing: T,
        probs: Vec<T>,
        count: usize,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Record of one forward pass.
///
/// Nodes are appended in evaluation order, so every operation's inputs
/// precede it and [`Tape::backward`] can visit nodes in reverse exactly once.
pub struct Tape<T> {
    id: u64,
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed), nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::DetachedGraph);
        }
        Ok(v.index)
    }

    fn node(&self, v: Var) -> Result<&Node<T>> {
        let i = self.check(v)?;
        Ok(&self.nodes[i])
    }

    pub fn value(&self, v: Var) -> Result<&Tensor<T>> {
        Ok(&self.node(v)?.value)
    }

    pub fn shape(&self, v: Var) -> Result<&[usize]> {
        Ok(self.node(v)?.value.shape())
    }

    pub fn data(&self, v: Var) -> Result<&[T]> {
        Ok(self.node(v)?.value.data())
    }

    /// Gradient populated by the last [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Result<Option<&[T]>> {
        Ok(self.node(v)?.value.grad())
    }

    pub fn requires_grad(&self, v: Var) -> Result<bool> {
        Ok(self.node(v)?.value.requires_grad())
    }

    /// Records an input tensor, keeping its `requires_grad` flag.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        self.nodes.push(Node { value: tensor, op: Op::Leaf });
        Var { tape: self.id, index: self.nodes.len() - 1 }
    }

    pub fn param(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_requires_grad(true))
    }

    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    fn push(&mut self, name: &'static str, shape: &[usize], data: Vec<T>, op: Op<T>, inputs: &[usize]) -> Result<Var> {
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::Overflow { op: name });
        }
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].value.requires_grad());
        let value = Tensor::new(shape, data)?.with_requires_grad(requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node { value, op });
        Ok(Var { tape: self.id, index: self.nodes.len() - 1 })
    }

    /// Matrix product over the last two axes.
    ///
    /// `a` is `[.., m, k]`; `b` is either a shared `[k, n]` matrix or
    /// `[.., k, n]` with the same leading dimensions as `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let sa = self.nodes[ia].value.shape();
        let sb = self.nodes[ib].value.shape();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::dim("matmul", sa, sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let lead = &sa[..sa.len() - 2];
        let batch: usize = lead.iter().product();
        let shared_rhs = sb.len() == 2;
        if sb[sb.len() - 2] != k || (!shared_rhs && &sb[..sb.len() - 2] != lead) {
            return Err(Error::dim("matmul", sa, sb));
        }
        let n = sb[sb.len() - 1];
        let mut shape = lead.to_vec();
        shape.extend_from_slice(&[m, n]);
        let mut out = vec![T::zero(); batch * m * n];
        let (da, db) = (self.nodes[ia].value.data(), self.nodes[ib].value.data());
        for bi in 0..batch {
            let bs = if shared_rhs { 0 } else { bi * k * n };
            gemm(
                m,
                k,
                n,
                &da[bi * m * k..(bi + 1) * m * k],
                &db[bs..bs + k * n],
                &mut out[bi * m * n..(bi + 1) * m * n],
            );
        }
        let op = Op::MatMul { a: ia, b: ib, batch, m, k, n, shared_rhs };
        self.push("matmul", &shape, out, op, &[ia, ib])
    }

    fn same_shape(&self, op: &'static str, ia: usize, ib: usize) -> Result<()> {
        let (sa, sb) = (self.nodes[ia].value.shape(), self.nodes[ib].value.shape());
        if sa != sb {
            return Err(Error::dim(op, sa, sb));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        self.same_shape("add", ia, ib)?;
        let out = zip_map(self.nodes[ia].value.data(), self.nodes[ib].value.data(), |x, y| x + y);
        let shape = self.nodes[ia].value.shape().to_vec();
        self.push("add", &shape, out, Op::Add { a: ia, b: ib }, &[ia, ib])
    }

    /// `x[.., d] + bias[d]`
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (ix, ib) = (self.check(x)?, self.check(bias)?);
        let sx = self.nodes[ix].value.shape();
        let sb = self.nodes[ib].value.shape();
        let (_, d) = rows_cols(sx);
        if sx.is_empty() || sb.len() != 1 || sb[0] != d {
            return Err(Error::dim("add_bias", sx, sb));
        }
        let b = self.nodes[ib].value.data();
        let out: Vec<T> = self.nodes[ix]
            .value
            .data()
            .chunks_exact(d)
            .flat_map(|row| row.iter().zip(b).map(|(x, y)| *x + *y))
            .collect();
        let shape = sx.to_vec();
        self.push("add_bias", &shape, out, Op::AddBias { x: ix, bias: ib }, &[ix, ib])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        self.same_shape("mul", ia, ib)?;
        let out = zip_map(self.nodes[ia].value.data(), self.nodes[ib].value.data(), |x, y| x * y);
        let shape = self.nodes[ia].value.shape().to_vec();
        self.push("mul", &shape, out, Op::Mul { a: ia, b: ib }, &[ia, ib])
    }

    /// `c * x` for a constant `c`.
    pub fn scalar_mul(&mut self, x: Var, c: T) -> Result<Var> {
        self.affine(x, c, T::zero())
    }

    /// `scale * x + shift` for constants.
    pub fn affine(&mut self, x: Var, scale: T, shift: T) -> Result<Var> {
        let ix = self.check(x)?;
        let out: Vec<T> = self.nodes[ix].value.data().iter().map(|&v| scale * v + shift).collect();
        let shape = self.nodes[ix].value.shape().to_vec();
        self.push("affine", &shape, out, Op::Affine { x: ix, scale }, &[ix])
    }

    /// `s * x` where `s` is a one-element tensor on the tape.
    pub fn scale(&mut self, x: Var, s: Var) -> Result<Var> {
        let (ix, is) = (self.check(x)?, self.check(s)?);
        if self.nodes[is].value.numel() != 1 {
            return Err(Error::dim("scale", self.nodes[ix].value.shape(), self.nodes[is].value.shape()));
        }
        let c = self.nodes[is].value.data()[0];
        let out: Vec<T> = self.nodes[ix].value.data().iter().map(|&v| c * v).collect();
        let shape = self.nodes[ix].value.shape().to_vec();
        self.push("scale", &shape, out, Op::Scale { x: ix, s: is }, &[ix, is])
    }

    /// Scales each last-axis row of `x[.., d]` by `g[.., 1]`.
    pub fn row_scale(&mut self, x: Var, g: Var) -> Result<Var> {
        let (ix, ig) = (self.check(x)?, self.check(g)?);
        let sx = self.nodes[ix].value.shape();
        let sg = self.nodes[ig].value.shape();
        if sx.is_empty() || sg.len() != sx.len() || sg[..sg.len() - 1] != sx[..sx.len() - 1] || sg[sg.len() - 1] != 1 {
            return Err(Error::dim("row_scale", sx, sg));
        }
        let (_, d) = rows_cols(sx);
        let gv = self.nodes[ig].value.data();
        let out: Vec<T> = self.nodes[ix]
            .value
            .data()
            .chunks_exact(d)
            .zip(gv)
            .flat_map(|(row, &s)| row.iter().map(move |&v| s * v))
            .collect();
        let shape = sx.to_vec();
        self.push("row_scale", &shape, out, Op::RowScale { x: ix, g: ig }, &[ix, ig])
    }

    /// Concatenates along the last axis.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let sa = self.nodes[ia].value.shape();
        let sb = self.nodes[ib].value.shape();
        if sa.is_empty() || sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(Error::dim("concat", sa, sb));
        }
        let (_, p) = rows_cols(sa);
        let (_, q) = rows_cols(sb);
        let mut shape = sa.to_vec();
        *shape.last_mut().expect("rank >= 1") = p + q;
        let mut out = Vec::with_capacity(self.nodes[ia].value.numel() + self.nodes[ib].value.numel());
        for (ra, rb) in self.nodes[ia].value.data().chunks_exact(p).zip(self.nodes[ib].value.data().chunks_exact(q)) {
            out.extend_from_slice(ra);
            out.extend_from_slice(rb);
        }
        self.push("concat", &shape, out, Op::Concat { a: ia, b: ib, p, q }, &[ia, ib])
    }

    /// `x[.., start..start + width]`
    pub fn slice_last(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let ix = self.check(x)?;
        let sx = self.nodes[ix].value.shape();
        let (_, full) = rows_cols(sx);
        if sx.is_empty() || width == 0 || start + width > full {
            return Err(Error::dim("slice_last", sx, &[start, width]));
        }
        let mut shape = sx.to_vec();
        *shape.last_mut().expect("rank >= 1") = width;
        let out: Vec<T> = self.nodes[ix]
            .value
            .data()
            .chunks_exact(full)
            .flat_map(|row| row[start..start + width].iter().copied())
            .collect();
        let op = Op::Slice { x: ix, start, width, full };
        self.push("slice_last", &shape, out, op, &[ix])
    }

    fn unary(
        &mut self,
        name: &'static str,
        x: Var,
        f: impl Fn(T) -> T,
        op: impl FnOnce(usize) -> Op<T>,
    ) -> Result<Var> {
        let ix = self.check(x)?;
        let out: Vec<T> = self.nodes[ix].value.data().iter().map(|&v| f(v)).collect();
        let shape = self.nodes[ix].value.shape().to_vec();
        self.push(name, &shape, out, op(ix), &[ix])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary("relu", x, |v| if v > T::zero() { v } else { T::zero() }, |x| Op::Relu { x })
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary("sigmoid", x, sigmoid, |x| Op::Sigmoid { x })
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary("tanh", x, |v| v.tanh(), |x| Op::Tanh { x })
    }

    /// Clamps into `[lo, hi]`; the gradient passes only inside the range.
    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Result<Var> {
        self.unary("clamp", x, |v| v.max(lo).min(hi), |x| Op::Clamp { x, lo, hi })
    }

    /// Softmax over the last axis, computed with per-row max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let ix = self.check(x)?;
        let sx = self.nodes[ix].value.shape();
        let (_, d) = rows_cols(sx);
        if sx.is_empty() {
            return Err(Error::dim("softmax", sx, &[]));
        }
        let mut out = self.nodes[ix].value.data().to_vec();
        for row in out.chunks_exact_mut(d) {
            softmax_in_place(row);
        }
        let shape = sx.to_vec();
        self.push("softmax", &shape, out, Op::Softmax { x: ix }, &[ix])
    }

    /// Layer normalization over the last axis with gain and bias `[d]`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let (ix, ig, ib) = (self.check(x)?, self.check(gain)?, self.check(bias)?);
        let sx = self.nodes[ix].value.shape();
        let (rows, d) = rows_cols(sx);
        for i in [ig, ib] {
            let s = self.nodes[i].value.shape();
            if sx.is_empty() || s.len() != 1 || s[0] != d {
                return Err(Error::dim("layer_norm", sx, s));
            }
        }
        let xs = self.nodes[ix].value.data();
        if !xs.iter().all(|v| v.is_finite()) {
            return Err(Error::Overflow { op: "layer_norm" });
        }
        let (gv, bv) = (self.nodes[ig].value.data(), self.nodes[ib].value.data());
        let inv_d = T::one() / T::from_usize(d);
        let mut xhat = vec![T::zero(); rows * d];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); rows * d];
        for r in 0..rows {
            let row = &xs[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gv[j] + bv[j];
            }
        }
        let shape = sx.to_vec();
        let op = Op::LayerNorm { x: ix, gain: ig, bias: ib, xhat, rstd };
        self.push("layer_norm", &shape, out, op, &[ix, ig, ib])
    }

    /// Gathers rows of `table[v, d]`; the output shape is `index_shape + [d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize], index_shape: &[usize]) -> Result<Var> {
        let it = self.check(table)?;
        let st = self.nodes[it].value.shape();
        if st.len() != 2 || index_shape.iter().product::<usize>() != ids.len() {
            return Err(Error::dim("embedding", st, index_shape));
        }
        let (v, d) = (st[0], st[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::dim("embedding", st, &[bad]));
        }
        let tv = self.nodes[it].value.data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let mut shape = index_shape.to_vec();
        shape.push(d);
        let op = Op::Embedding { table: it, ids: ids.to_vec() };
        self.push("embedding", &shape, out, op, &[it])
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let ix = self.check(x)?;
        let sx = self.nodes[ix].value.shape();
        if sx.len() < 2 {
            return Err(Error::dim("transpose", sx, &[]));
        }
        let (m, n) = (sx[sx.len() - 2], sx[sx.len() - 1]);
        let batch: usize = sx[..sx.len() - 2].iter().product();
        let mut shape = sx.to_vec();
        let r = shape.len();
        shape.swap(r - 2, r - 1);
        let xs = self.nodes[ix].value.data();
        let mut out = vec![T::zero(); xs.len()];
        transpose_into(batch, m, n, xs, &mut out);
        self.push("transpose", &shape, out, Op::Transpose { x: ix, batch, m, n }, &[ix])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let ix = self.check(x)?;
        let sx = self.nodes[ix].value.shape();
        if shape.iter().product::<usize>() != self.nodes[ix].value.numel() {
            return Err(Error::dim("reshape", sx, shape));
        }
        let out = self.nodes[ix].value.data().to_vec();
        self.push("reshape", shape, out, Op::Reshape { x: ix }, &[ix])
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let ix = self.check(x)?;
        let s = self.nodes[ix].value.data().iter().copied().sum::<T>();
        self.push("sum", &[], vec![s], Op::Sum { x: ix }, &[ix])
    }

    /// Inverted dropout: zeroes elements with probability `p` and rescales
    /// survivors by `1 / (1 - p)`. Identity when `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Result<Var> {
        if p <= 0.0 {
            return Ok(x);
        }
        if p >= 1.0 {
            return Err(Error::invalid("dropout probability must be below 1"));
        }
        let ix = self.check(x)?;
        let keep = T::from_f64(1.0 / (1.0 - p));
        let shape = self.nodes[ix].value.shape().to_vec();
        let mask: Vec<T> =
            (0..self.nodes[ix].value.numel()).map(|_| if rng.gen::<f64>() < p { T::zero() } else { keep }).collect();
        let m = self.constant(Tensor::new(&shape, mask)?);
        self.mul(x, m)
    }

    /// Label-smoothed cross-entropy averaged over counted rows.
    ///
    /// `logits` is `[.., v]` with one target per row. Rows whose target
    /// equals `pad` are skipped. Each counted row contributes
    /// `(1 - eps) * nll(target) + eps * mean_c nll(c)`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], smoothing: T, pad: Option<usize>) -> Result<Var> {
        let il = self.check(logits)?;
        let sl = self.nodes[il].value.shape();
        let (rows, v) = rows_cols(sl);
        if sl.is_empty() || targets.len() != rows {
            return Err(Error::dim("cross_entropy", sl, &[targets.len()]));
        }
        if smoothing < T::zero() || smoothing >= T::one() {
            return Err(Error::invalid("label smoothing must lie in [0, 1)"));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= v && Some(t) != pad) {
            return Err(Error::dim("cross_entropy", sl, &[bad]));
        }
        let xs = self.nodes[il].value.data();
        let mut probs = vec![T::zero(); rows * v];
        let mut kept = Vec::with_capacity(rows);
        let mut total = T::zero();
        let mut count = 0usize;
        let inv_v = T::one() / T::from_usize(v);
        for r in 0..rows {
            let t = targets[r];
            if Some(t) == pad {
                kept.push(None);
                continue;
            }
            let row = &xs[r * v..(r + 1) * v];
            let lse = log_sum_exp(row);
            let mean = row.iter().copied().sum::<T>() * inv_v;
            total = total + lse - (T::one() - smoothing) * row[t] - smoothing * mean;
            for (p, &z) in probs[r * v..(r + 1) * v].iter_mut().zip(row) {
                *p = (z - lse).exp();
            }
            kept.push(Some(t));
            count += 1;
        }
        if count == 0 {
            return Err(Error::EmptyBatch);
        }
        let loss = total / T::from_usize(count);
        let op = Op::CrossEntropy { logits: il, targets: kept, smoothing, probs, count };
        self.push("cross_entropy", &[], vec![loss], op, &[il])
    }

    /// Populates `d loss / d node` on every node that requires a gradient.
    ///
    /// Gradients from multiple uses of a node accumulate additively.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let il = self.check(loss)?;
        if self.nodes[il].value.numel() != 1 {
            return Err(Error::dim("backward", self.nodes[il].value.shape(), &[]));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[il] = Some(vec![T::one()]);
        for idx in (0..=il).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if node.value.requires_grad() {
                let numel = node.value.numel();
                node.value.set_grad(Some(g.unwrap_or_else(|| vec![T::zero(); numel])));
            }
        }
        Ok(())
    }

    fn backprop_node(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let needs = |i: usize| nodes[i].value.requires_grad();
        let val = |i: usize| nodes[i].value.data();
        match &nodes[idx].op {
            Op::Leaf => {}
            &Op::MatMul { a, b, batch, m, k, n, shared_rhs } => {
                if needs(a) {
                    let da = slot(grads, a, m * k * batch);
                    let bv = val(b);
                    for bi in 0..batch {
                        let bs = if shared_rhs { 0 } else { bi * k * n };
                        gemm_nt(
                            m,
                            n,
                            k,
                            &g[bi * m * n..(bi + 1) * m * n],
                            &bv[bs..bs + k * n],
                            &mut da[bi * m * k..(bi + 1) * m * k],
                        );
                    }
                }
                if needs(b) {
                    let numel = nodes[b].value.numel();
                    let db = slot(grads, b, numel);
                    let av = val(a);
                    for bi in 0..batch {
                        let bs = if shared_rhs { 0 } else { bi * k * n };
                        gemm_tn(
                            m,
                            k,
                            n,
                            &av[bi * m * k..(bi + 1) * m * k],
                            &g[bi * m * n..(bi + 1) * m * n],
                            &mut db[bs..bs + k * n],
                        );
                    }
                }
            }
            &Op::Add { a, b } => {
                for i in [a, b] {
                    if needs(i) {
                        add_into(slot(grads, i, g.len()), g);
                    }
                }
            }
            &Op::AddBias { x, bias } => {
                if needs(x) {
                    add_into(slot(grads, x, g.len()), g);
                }
                if needs(bias) {
                    let d = nodes[bias].value.numel();
                    let db = slot(grads, bias, d);
                    for row in g.chunks_exact(d) {
                        add_into(db, row);
                    }
                }
            }
            &Op::Mul { a, b } => {
                if needs(a) {
                    let da = slot(grads, a, g.len());
                    for ((d, gi), bi) in da.iter_mut().zip(g).zip(val(b)) {
                        *d = *d + *gi * *bi;
                    }
                }
                if needs(b) {
                    let db = slot(grads, b, g.len());
                    for ((d, gi), ai) in db.iter_mut().zip(g).zip(val(a)) {
                        *d = *d + *gi * *ai;
                    }
                }
            }
            &Op::Affine { x, scale } => {
                let dx = slot(grads, x, g.len());
                for (d, gi) in dx.iter_mut().zip(g) {
                    *d = *d + scale * *gi;
                }
            }
            &Op::Scale { x, s } => {
                if needs(x) {
                    let c = val(s)[0];
                    let dx = slot(grads, x, g.len());
                    for (d, gi) in dx.iter_mut().zip(g) {
                        *d = *d + c * *gi;
                    }
                }
                if needs(s) {
                    let acc = g.iter().zip(val(x)).map(|(gi, xi)| *gi * *xi).sum::<T>();
                    let ds = slot(grads, s, 1);
                    ds[0] = ds[0] + acc;
                }
            }
            &Op::RowScale { x, g: gate } => {
                let d = g.len() / nodes[gate].value.numel().max(1);
                if needs(x) {
                    let gv = val(gate);
                    let dx = slot(grads, x, g.len());
                    for ((drow, grow), &s) in dx.chunks_exact_mut(d).zip(g.chunks_exact(d)).zip(gv) {
                        for (dd, gi) in drow.iter_mut().zip(grow) {
                            *dd = *dd + s * *gi;
                        }
                    }
                }
                if needs(gate) {
                    let xv = val(x);
                    let rows = nodes[gate].value.numel();
                    let dg = slot(grads, gate, rows);
                    for (r, dgr) in dg.iter_mut().enumerate() {
                        let acc =
                            g[r * d..(r + 1) * d].iter().zip(&xv[r * d..(r + 1) * d]).map(|(a, b)| *a * *b).sum::<T>();
                        *dgr = *dgr + acc;
                    }
                }
            }
            &Op::Concat { a, b, p, q } => {
                if needs(a) {
                    let n = nodes[a].value.numel();
                    let da = slot(grads, a, n);
                    for (drow, grow) in da.chunks_exact_mut(p).zip(g.chunks_exact(p + q)) {
                        add_into(drow, &grow[..p]);
                    }
                }
                if needs(b) {
                    let n = nodes[b].value.numel();
                    let db = slot(grads, b, n);
                    for (drow, grow) in db.chunks_exact_mut(q).zip(g.chunks_exact(p + q)) {
                        add_into(drow, &grow[p..]);
                    }
                }
            }
            &Op::Slice { x, start, width, full } => {
                let n = nodes[x].value.numel();
                let dx = slot(grads, x, n);
                for (drow, grow) in dx.chunks_exact_mut(full).zip(g.chunks_exact(width)) {
                    add_into(&mut drow[start..start + width], grow);
                }
            }
            &Op::Relu { x } => {
                let xv = val(x);
                let dx = slot(grads, x, g.len());
                for ((d, gi), xi) in dx.iter_mut().zip(g).zip(xv) {
                    if *xi > T::zero() {
                        *d = *d + *gi;
                    }
                }
            }
            &Op::Sigmoid { x } => {
                let y = nodes[idx].value.data();
                let dx = slot(grads, x, g.len());
                for ((d, gi), yi) in dx.iter_mut().zip(g).zip(y) {
                    *d = *d + *gi * *yi * (T::one() - *yi);
                }
            }
            &Op::Tanh { x } => {
                let y = nodes[idx].value.data();
                let dx = slot(grads, x, g.len());
                for ((d, gi), yi) in dx.iter_mut().zip(g).zip(y) {
                    *d = *d + *gi * (T::one() - *yi * *yi);
                }
            }
            &Op::Clamp { x, lo, hi } => {
                let xv = val(x);
                let dx = slot(grads, x, g.len());
                for ((d, gi), xi) in dx.iter_mut().zip(g).zip(xv) {
                    if *xi >= lo && *xi <= hi {
                        *d = *d + *gi;
                    }
                }
            }
            &Op::Softmax { x } => {
                let y = nodes[idx].value.data();
                let (_, d) = rows_cols(nodes[idx].value.shape());
                let dx = slot(grads, x, g.len());
                for ((drow, grow), yrow) in dx.chunks_exact_mut(d).zip(g.chunks_exact(d)).zip(y.chunks_exact(d)) {
                    let dotp = grow.iter().zip(yrow).map(|(a, b)| *a * *b).sum::<T>();
                    for ((dd, gi), yi) in drow.iter_mut().zip(grow).zip(yrow) {
                        *dd = *dd + *yi * (*gi - dotp);
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let (x, gain, bias) = (*x, *gain, *bias);
                let d = nodes[gain].value.numel();
                if needs(gain) {
                    let dg = slot(grads, gain, d);
                    for (grow, hrow) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                        for ((dd, gi), hi) in dg.iter_mut().zip(grow).zip(hrow) {
                            *dd = *dd + *gi * *hi;
                        }
                    }
                }
                if needs(bias) {
                    let db = slot(grads, bias, d);
                    for grow in g.chunks_exact(d) {
                        add_into(db, grow);
                    }
                }
                if needs(x) {
                    let gv = val(gain);
                    let inv_d = T::one() / T::from_usize(d);
                    let dx = slot(grads, x, g.len());
                    let mut dh = vec![T::zero(); d];
                    for (r, (grow, hrow)) in g.chunks_exact(d).zip(xhat.chunks_exact(d)).enumerate() {
                        for j in 0..d {
                            dh[j] = grow[j] * gv[j];
                        }
                        let mean_dh = dh.iter().copied().sum::<T>() * inv_d;
                        let mean_dhh = dh.iter().zip(hrow).map(|(a, b)| *a * *b).sum::<T>() * inv_d;
                        let drow = &mut dx[r * d..(r + 1) * d];
                        for j in 0..d {
                            drow[j] = drow[j] + rstd[r] * (dh[j] - mean_dh - hrow[j] * mean_dhh);
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let table = *table;
                let (n, d) = {
                    let s = nodes[table].value.shape();
                    (s[0] * s[1], s[1])
                };
                let dt = slot(grads, table, n);
                for (&i, grow) in ids.iter().zip(g.chunks_exact(d)) {
                    add_into(&mut dt[i * d..(i + 1) * d], grow);
                }
            }
            &Op::Transpose { x, batch, m, n } => {
                // forward mapped [m, n] -> [n, m]; the gradient maps back.
                let mut back = vec![T::zero(); g.len()];
                transpose_into(batch, n, m, g, &mut back);
                add_into(slot(grads, x, g.len()), &back);
            }
            &Op::Reshape { x } => add_into(slot(grads, x, g.len()), g),
            &Op::Sum { x } => {
                let n = nodes[x].value.numel();
                let dx = slot(grads, x, n);
                for d in dx.iter_mut() {
                    *d = *d + g[0];
                }
            }
            Op::CrossEntropy { logits, targets, smoothing, probs, count } => {
                let logits = *logits;
                let n = nodes[logits].value.numel();
                let v = n / targets.len();
                let scale = g[0] / T::from_usize(*count);
                let uniform = *smoothing / T::from_usize(v);
                let hit = T::one() - *smoothing;
                let dl = slot(grads, logits, n);
                for (r, t) in targets.iter().enumerate() {
                    let Some(t) = *t else { continue };
                    let prow = &probs[r * v..(r + 1) * v];
                    let drow = &mut dl[r * v..(r + 1) * v];
                    for (c, (dd, p)) in drow.iter_mut().zip(prow).enumerate() {
                        let target = if c == t { hit + uniform } else { uniform };
                        *dd = *dd + scale * (*p - target);
                    }
                }
            }
        }
    }
}

fn slot<T: Scalar>(grads: &mut [Option<Vec<T>>], i: usize, n: usize) -> &mut Vec<T> {
    grads[i].get_or_insert_with(|| vec![T::zero(); n])
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d = *d + *s;
    }
}

fn zip_map<T: Scalar>(a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
    a.iter().zip(b).map(|(x, y)| f(*x, *y)).collect()
}

fn transpose_into<T: Scalar>(batch: usize, m: usize, n: usize, src: &[T], dst: &mut [T]) {
    for b in 0..batch {
        let s = &src[b * m * n..(b + 1) * m * n];
        let d = &mut dst[b * m * n..(b + 1) * m * n];
        for i in 0..m {
            for j in 0..n {
                d[j * m + i] = s[i * n + j];
            }
        }
    }
}

pub(crate) fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn log_sum_exp<T: Scalar>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let s = row.iter().map(|&z| (z - max).exp()).sum::<T>();
    max + s.ln()
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        s = s + *v;
    }
    for v in row.iter_mut() {
        *v = *v / s;
    }
}
