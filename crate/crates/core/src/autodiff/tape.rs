//! Wengert-list reverse-mode differentiation over dense tensors.
//!
//! Every operation appends a node holding its forward value and enough
//! context to run its vector-Jacobian product. [`Tape::backward`] walks the
//! list in reverse and accumulates into the gradients of every parameter
//! that was read onto the tape.

use std::collections::HashMap;
use std::sync::Arc;

use crate::autodiff::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::query::IntraInstanceMask;
use crate::scalar::Scalar;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Differentiable operation whose forward value is computed by the caller.
pub trait CustomOp<T>: Send + Sync {
    fn name(&self) -> &'static str;

    /// Returns one gradient per input (None for inputs it does not touch).
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad_output: &Tensor<T>,
    ) -> Vec<Option<Tensor<T>>>;
}

enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
        alpha: T,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow {
        x: Var,
        row: Var,
    },
    Scale {
        x: Var,
        factor: T,
    },
    Relu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    MaskedSoftmax {
        x: Var,
        mask: Arc<IntraInstanceMask>,
    },
    Softmax(Var),
    SplitHeads {
        x: Var,
        heads: usize,
    },
    MergeHeads {
        x: Var,
    },
    Reshape(Var),
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    GroupMean {
        x: Var,
        group: usize,
    },
    GroupCumsum {
        x: Var,
        group: usize,
    },
    Sum(Var),
    Mean(Var),
    L1 {
        pred: Var,
        target: Var,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    BceWithLogits {
        logits: Var,
        targets: Vec<T>,
    },
    Custom {
        inputs: Vec<Var>,
        op: Box<dyn CustomOp<T>>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Gradients of one backward pass, indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of `v`, or None when the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

#[derive(Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
}

/// `[batch, rows, cols]` view of a rank >= 2 shape.
fn mat_dims(shape: &[usize]) -> (usize, usize, usize) {
    let r = shape.len();
    (shape[..r - 2].iter().product(), shape[r - 2], shape[r - 1])
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Differentiable leaf that is not a registered parameter.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Reads a parameter onto the tape; repeated reads share one node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Leaf, true);
        self.nodes[v.0].param = Some(id);
        self.params.insert(id, v);
        v
    }

    /// Batched matrix product `[.., m, k] x [.., k, n]`. `b` may be rank 2,
    /// in which case it is shared across the batch.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false, T::one())
    }

    /// `a x b^T` with `b` stored as `[.., n, k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true, T::one())
    }

    /// `alpha * a x b^T`, the scaled product used for attention scores.
    pub fn matmul_nt_scaled(&mut self, a: Var, b: Var, alpha: T) -> Result<Var> {
        self.matmul_impl(a, b, true, alpha)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool, alpha: T) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let err = || Error::shape("matmul", &sa, &sb);
        if sa.len() < 2 || sb.len() < 2 {
            return Err(err());
        }
        let (batch, m, k) = mat_dims(&sa);
        let (bb, r, c) = mat_dims(&sb);
        let (kb, n) = if trans_b { (c, r) } else { (r, c) };
        let shared = sb.len() == 2;
        if kb != k || (!shared && (sb[..sb.len() - 2] != sa[..sa.len() - 2] || bb != batch)) {
            return Err(err());
        }
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![T::zero(); batch * m * n];
        let (rsb, csb) = if trans_b { (1, k) } else { (n, 1) };
        if shared {
            T::gemm(
                batch * m,
                k,
                n,
                alpha,
                av,
                k,
                1,
                bv,
                rsb,
                csb,
                T::zero(),
                &mut out,
                n,
                1,
            );
        } else {
            for i in 0..batch {
                T::gemm(
                    m,
                    k,
                    n,
                    alpha,
                    &av[i * m * k..],
                    k,
                    1,
                    &bv[i * k * n..],
                    rsb,
                    csb,
                    T::zero(),
                    &mut out[i * m * n..],
                    n,
                    1,
                );
            }
        }
        let mut shape = sa[..sa.len() - 2].to_vec();
        shape.extend([m, n]);
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::MatMul {
                a,
                b,
                trans_b,
                alpha,
            },
            rg,
        ))
    }

    fn zip_same(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(T, T) -> T,
    ) -> Result<Tensor<T>> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape(name, ta.shape(), tb.shape()));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_same(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_same(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_same(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    /// Adds a `[d]` row to every row of `x [.., d]`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (tx, tr) = (self.value(x), self.value(row));
        let d = tx.last_dim();
        if tr.numel() != d {
            return Err(Error::shape("add_row", tx.shape(), tr.shape()));
        }
        let r = tr.data();
        let data = tx
            .data()
            .chunks(d)
            .flat_map(|c| c.iter().zip(r).map(|(&a, &b)| a + b))
            .collect();
        let v = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.rg(&[x, row]);
        Ok(self.push(v, Op::AddRow { x, row }, rg))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let v = self.value(x).map(|a| a * factor);
        let rg = self.rg(&[x]);
        self.push(v, Op::Scale { x, factor }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self
            .value(x)
            .map(|a| if a > T::zero() { a } else { T::zero() });
        let rg = self.rg(&[x]);
        self.push(v, Op::Relu(x), rg)
    }

    /// `x W + b` for `x: [.., d_in]`, `w: [d_in, d_out]`, `b: [d_out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        let (sx, sw) = (tx.shape(), tw.shape());
        if sx.is_empty() || sw.len() != 2 || sx[sx.len() - 1] != sw[0] || tb.numel() != sw[1] {
            return Err(Error::shape("linear", sx, sw));
        }
        let (k, n) = (sw[0], sw[1]);
        let m = tx.numel() / k;
        let mut out: Vec<T> = Vec::with_capacity(m * n);
        for _ in 0..m {
            out.extend_from_slice(tb.data());
        }
        T::gemm(
            m,
            k,
            n,
            T::one(),
            tx.data(),
            k,
            1,
            tw.data(),
            n,
            1,
            T::one(),
            &mut out,
            n,
            1,
        );
        let mut shape = sx.to_vec();
        *shape.last_mut().expect("rank >= 1") = n;
        let v = Tensor::new(shape, out)?;
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(v, Op::Linear { x, w, b }, rg))
    }

    /// Per-row normalization over the trailing axis, eps inside the root.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let d = tx.last_dim();
        if d < 2 {
            return Err(Error::Input("layer_norm needs at least 2 features".into()));
        }
        if tg.numel() != d || tb.numel() != d {
            return Err(Error::shape("layer_norm", tx.shape(), tg.shape()));
        }
        let eps = T::lit(LAYER_NORM_EPS);
        let dn = T::lit(d as f64);
        let rows = tx.rows();
        let mut xhat = Vec::with_capacity(tx.numel());
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(tx.numel());
        for row in tx.data().chunks(d) {
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let rs = T::one() / (var + eps).sqrt();
            rstd.push(rs);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * rs;
                xhat.push(h);
                out.push(h * tg.data()[j] + tb.data()[j]);
            }
        }
        let v = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            v,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Softmax over the trailing axis restricted to allowed mask entries.
    /// Blocked entries are exactly zero in the output and in the gradient.
    pub fn masked_softmax(&mut self, x: Var, mask: &Arc<IntraInstanceMask>) -> Result<Var> {
        let tx = self.value(x);
        let s = tx.shape();
        let q = mask.size();
        if s.len() < 2 || s[s.len() - 1] != q || s[s.len() - 2] != q {
            return Err(Error::shape("masked_softmax", s, &[q, q]));
        }
        let mut out = vec![T::zero(); tx.numel()];
        for (r, (row, dst)) in tx.data().chunks(q).zip(out.chunks_mut(q)).enumerate() {
            let allowed = mask.row(r % q);
            let mut max = None::<T>;
            for (&v, &ok) in row.iter().zip(allowed) {
                if ok {
                    max = Some(max.map_or(v, |m: T| m.max(v)));
                }
            }
            let max = max.ok_or(Error::DegenerateMask { row: r % q })?;
            let mut total = T::zero();
            for ((d, &v), &ok) in dst.iter_mut().zip(row).zip(allowed) {
                if ok {
                    *d = (v - max).exp();
                    total += *d;
                }
            }
            for (d, &ok) in dst.iter_mut().zip(allowed) {
                if ok {
                    *d /= total;
                }
            }
        }
        let v = Tensor::new(s.to_vec(), out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(
            v,
            Op::MaskedSoftmax {
                x,
                mask: Arc::clone(mask),
            },
            rg,
        ))
    }

    /// Plain softmax over the trailing axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let c = tx.last_dim();
        let mut out = tx.data().to_vec();
        for row in out.chunks_mut(c) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            row.iter_mut().for_each(|v| *v /= total);
        }
        let v = Tensor::new(tx.shape().to_vec(), out).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(v, Op::Softmax(x), rg)
    }

    /// `[q, h * dh] -> [h, q, dh]`.
    pub fn split_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let tx = self.value(x);
        let s = tx.shape();
        if s.len() != 2 || heads == 0 || !s[1].is_multiple_of(heads) {
            return Err(Error::shape("split_heads", s, &[heads]));
        }
        let (q, d) = (s[0], s[1]);
        let dh = d / heads;
        let src = tx.data();
        let mut out = Vec::with_capacity(q * d);
        for h in 0..heads {
            for i in 0..q {
                out.extend_from_slice(&src[i * d + h * dh..i * d + (h + 1) * dh]);
            }
        }
        let v = Tensor::new(vec![heads, q, dh], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(v, Op::SplitHeads { x, heads }, rg))
    }

    /// `[h, q, dh] -> [q, h * dh]`.
    pub fn merge_heads(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let s = tx.shape();
        if s.len() != 3 {
            return Err(Error::shape("merge_heads", s, &[0, 0, 0]));
        }
        let (h, q, dh) = (s[0], s[1], s[2]);
        let src = tx.data();
        let mut out = vec![T::zero(); h * q * dh];
        for hh in 0..h {
            for i in 0..q {
                out[i * h * dh + hh * dh..i * h * dh + (hh + 1) * dh]
                    .copy_from_slice(&src[(hh * q + i) * dh..(hh * q + i + 1) * dh]);
            }
        }
        let v = Tensor::new(vec![q, h * dh], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(v, Op::MergeHeads { x }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let v = self.value(x).reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(v, Op::Reshape(x), rg))
    }

    /// Selects (and possibly repeats) slices along the leading axis.
    pub fn gather_rows(&mut self, x: Var, rows: Vec<usize>) -> Result<Var> {
        let tx = self.value(x);
        let s = tx.shape();
        if s.is_empty() || rows.is_empty() || rows.iter().any(|&r| r >= s[0]) {
            return Err(Error::Input(format!(
                "gather_rows {rows:?} out of range for {s:?}"
            )));
        }
        let w = tx.numel() / s[0];
        let mut out = Vec::with_capacity(rows.len() * w);
        for &r in &rows {
            out.extend_from_slice(&tx.data()[r * w..(r + 1) * w]);
        }
        let mut shape = s.to_vec();
        shape[0] = rows.len();
        let v = Tensor::new(shape, out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(v, Op::GatherRows { x, rows }, rg))
    }

    /// Concatenates along the leading axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Input("concat_rows of nothing".into()))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut lead = 0;
        let mut out = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.shape().is_empty() || t.shape()[1..] != tail[..] {
                return Err(Error::shape("concat_rows", self.shape(*first), t.shape()));
            }
            lead += t.shape()[0];
            out.extend_from_slice(t.data());
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        let v = Tensor::new(shape, out)?;
        let rg = self.rg(parts);
        Ok(self.push(v, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Means of consecutive groups of `group` rows: `[n * g, c] -> [n, c]`.
    pub fn group_mean(&mut self, x: Var, group: usize) -> Result<Var> {
        let tx = self.value(x);
        let (rows, c) = (tx.rows(), tx.last_dim());
        if group == 0 || rows % group != 0 {
            return Err(Error::shape("group_mean", tx.shape(), &[group]));
        }
        let inv = T::one() / T::lit(group as f64);
        let mut out = vec![T::zero(); rows / group * c];
        for (r, row) in tx.data().chunks(c).enumerate() {
            for (o, &v) in out[(r / group) * c..(r / group + 1) * c]
                .iter_mut()
                .zip(row)
            {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o *= inv);
        let v = Tensor::new(vec![rows / group, c], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(v, Op::GroupMean { x, group }, rg))
    }

    /// Running sum over rows, restarting every `group` rows.
    pub fn group_cumsum(&mut self, x: Var, group: usize) -> Result<Var> {
        let tx = self.value(x);
        let (rows, c) = (tx.rows(), tx.last_dim());
        if group == 0 || rows % group != 0 {
            return Err(Error::shape("group_cumsum", tx.shape(), &[group]));
        }
        let mut out = tx.data().to_vec();
        for r in 0..rows {
            if r % group != 0 {
                for j in 0..c {
                    let prev = out[(r - 1) * c + j];
                    out[r * c + j] += prev;
                }
            }
        }
        let v = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(v, Op::GroupCumsum { x, group }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).data().iter().copied().sum());
        let rg = self.rg(&[x]);
        self.push(v, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let v = Tensor::scalar(t.data().iter().copied().sum::<T>() / T::lit(t.numel() as f64));
        let rg = self.rg(&[x]);
        self.push(v, Op::Mean(x), rg)
    }

    /// Sum of scalar nodes.
    pub fn add_all(&mut self, terms: &[Var]) -> Result<Var> {
        let mut acc = *terms
            .first()
            .ok_or_else(|| Error::Input("add_all of nothing".into()))?;
        for &t in &terms[1..] {
            acc = self.add(acc, t)?;
        }
        Ok(acc)
    }

    /// Mean absolute difference; the subgradient at ties is zero.
    pub fn l1_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (tp, tt) = (self.value(pred), self.value(target));
        if tp.shape() != tt.shape() {
            return Err(Error::shape("l1_loss", tp.shape(), tt.shape()));
        }
        let total: T = tp
            .data()
            .iter()
            .zip(tt.data())
            .map(|(&a, &b)| (a - b).abs())
            .sum();
        let v = Tensor::scalar(total / T::lit(tp.numel() as f64));
        let rg = self.rg(&[pred, target]);
        Ok(self.push(v, Op::L1 { pred, target }, rg))
    }

    /// Mean softmax cross-entropy of `logits [n, c]` against class indices.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let tl = self.value(logits);
        let (n, c) = (tl.rows(), tl.last_dim());
        if targets.len() != n || targets.iter().any(|&t| t >= c) {
            return Err(Error::Input(format!(
                "cross_entropy targets {targets:?} do not fit logits {:?}",
                tl.shape()
            )));
        }
        let mut probs = Vec::with_capacity(n * c);
        let mut total = T::zero();
        for (row, &t) in tl.data().chunks(c).zip(targets) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = row.iter().map(|&v| (v - max).exp()).sum();
            let lse = max + z.ln();
            total += lse - row[t];
            probs.extend(row.iter().map(|&v| (v - lse).exp()));
        }
        let v = Tensor::scalar(total / T::lit(n as f64));
        let rg = self.rg(&[logits]);
        Ok(self.push(
            v,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Mean binary cross-entropy on raw logits.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[T]) -> Result<Var> {
        let tl = self.value(logits);
        if tl.numel() != targets.len() {
            return Err(Error::shape(
                "bce_with_logits",
                tl.shape(),
                &[targets.len()],
            ));
        }
        let total: T = tl
            .data()
            .iter()
            .zip(targets)
            .map(|(&x, &t)| x.max(T::zero()) - x * t + (T::one() + (-x.abs()).exp()).ln())
            .sum();
        let v = Tensor::scalar(total / T::lit(targets.len() as f64));
        let rg = self.rg(&[logits]);
        Ok(self.push(
            v,
            Op::BceWithLogits {
                logits,
                targets: targets.to_vec(),
            },
            rg,
        ))
    }

    pub fn custom(&mut self, inputs: &[Var], output: Tensor<T>, op: Box<dyn CustomOp<T>>) -> Var {
        let rg = self.rg(inputs);
        self.push(
            output,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            rg,
        )
    }

    /// Runs the reverse pass from a scalar and returns gradients for every
    /// node the scalar depends on.
    pub fn gradients(&self, loss: Var) -> Result<Gradients<T>> {
        self.check_scalar(loss)?;
        Ok(Gradients {
            grads: self.reverse(loss, |_| true),
        })
    }

    /// Reverse sweep keeping the gradients of nodes selected by `keep`.
    fn reverse(&self, loss: Var, keep: impl Fn(usize) -> bool) -> Vec<Option<Tensor<T>>> {
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return grads;
        }
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape().to_vec(), T::one()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop(i, &g, &mut grads);
            if keep(i) {
                grads[i] = Some(g);
            }
        }
        grads
    }

    /// Accumulates d(loss)/d(param) into the store for every parameter read
    /// onto this tape. Parameters the loss does not reach are left as is.
    pub fn backward(&self, loss: Var, store: &mut ParamStore<T>) -> Result<()> {
        self.check_scalar(loss)?;
        let mut is_param = vec![false; self.nodes.len()];
        for v in self.params.values() {
            is_param[v.0] = true;
        }
        let mut grads = self.reverse(loss, |i| is_param[i]);
        for (&id, &v) in &self.params {
            if let Some(g) = grads[v.0].take() {
                store.accumulate(id, &g);
            }
        }
        Ok(())
    }

    fn check_scalar(&self, loss: Var) -> Result<()> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(Error::Rank {
                op: "backward",
                shape: lt.shape().to_vec(),
            });
        }
        Ok(())
    }

    fn acc(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(e) => e.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let (k, n) = (tw.shape()[0], tw.shape()[1]);
                let m = tx.numel() / k;
                if self.wants(*x) {
                    let mut dx = vec![T::zero(); tx.numel()];
                    T::gemm(
                        m,
                        n,
                        k,
                        T::one(),
                        gd,
                        n,
                        1,
                        tw.data(),
                        1,
                        n,
                        T::zero(),
                        &mut dx,
                        k,
                        1,
                    );
                    self.acc(
                        grads,
                        *x,
                        Tensor::new(tx.shape().to_vec(), dx).expect("shape"),
                    );
                }
                if self.wants(*w) {
                    let mut dw = vec![T::zero(); k * n];
                    T::gemm(
                        k,
                        m,
                        n,
                        T::one(),
                        tx.data(),
                        1,
                        k,
                        gd,
                        n,
                        1,
                        T::zero(),
                        &mut dw,
                        n,
                        1,
                    );
                    self.acc(
                        grads,
                        *w,
                        Tensor::new(tw.shape().to_vec(), dw).expect("shape"),
                    );
                }
                if self.wants(*b) {
                    let mut db = vec![T::zero(); n];
                    for row in gd.chunks(n) {
                        for (o, &v) in db.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    let sb = self.value(*b).shape().to_vec();
                    self.acc(grads, *b, Tensor::new(sb, db).expect("shape"));
                }
            }
            Op::MatMul {
                a,
                b,
                trans_b,
                alpha,
            } => {
                let alpha = *alpha;
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (batch, m, k) = mat_dims(ta.shape());
                let n = g.last_dim();
                let shared = tb.rank() == 2;
                if self.wants(*a) {
                    let mut da = vec![T::zero(); ta.numel()];
                    // dA = dC op(B)^T
                    let (rsb, csb) = if *trans_b { (k, 1) } else { (1, n) };
                    if shared {
                        T::gemm(
                            batch * m,
                            n,
                            k,
                            alpha,
                            gd,
                            n,
                            1,
                            tb.data(),
                            rsb,
                            csb,
                            T::zero(),
                            &mut da,
                            k,
                            1,
                        );
                    } else {
                        for bi in 0..batch {
                            T::gemm(
                                m,
                                n,
                                k,
                                alpha,
                                &gd[bi * m * n..],
                                n,
                                1,
                                &tb.data()[bi * k * n..],
                                rsb,
                                csb,
                                T::zero(),
                                &mut da[bi * m * k..],
                                k,
                                1,
                            );
                        }
                    }
                    self.acc(
                        grads,
                        *a,
                        Tensor::new(ta.shape().to_vec(), da).expect("shape"),
                    );
                }
                if self.wants(*b) {
                    let mut db = vec![T::zero(); tb.numel()];
                    let (mm, nb) = if shared { (batch * m, 1) } else { (m, batch) };
                    for bi in 0..nb {
                        let (ao, go, bo) = (bi * mm * k, bi * mm * n, bi * k * n);
                        if *trans_b {
                            // dB[n, k] = dC^T A
                            T::gemm(
                                n,
                                mm,
                                k,
                                alpha,
                                &gd[go..],
                                1,
                                n,
                                &ta.data()[ao..],
                                k,
                                1,
                                T::zero(),
                                &mut db[bo..],
                                k,
                                1,
                            );
                        } else {
                            // dB[k, n] = A^T dC
                            T::gemm(
                                k,
                                mm,
                                n,
                                alpha,
                                &ta.data()[ao..],
                                1,
                                k,
                                &gd[go..],
                                n,
                                1,
                                T::zero(),
                                &mut db[bo..],
                                n,
                                1,
                            );
                        }
                    }
                    self.acc(
                        grads,
                        *b,
                        Tensor::new(tb.shape().to_vec(), db).expect("shape"),
                    );
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let d = gd.iter().zip(tb.data()).map(|(&x, &y)| x * y).collect();
                    self.acc(
                        grads,
                        *a,
                        Tensor::new(g.shape().to_vec(), d).expect("shape"),
                    );
                }
                if self.wants(*b) {
                    let d = gd.iter().zip(ta.data()).map(|(&x, &y)| x * y).collect();
                    self.acc(
                        grads,
                        *b,
                        Tensor::new(g.shape().to_vec(), d).expect("shape"),
                    );
                }
            }
            Op::AddRow { x, row } => {
                self.acc(grads, *x, g.clone());
                if self.wants(*row) {
                    let tr = self.value(*row);
                    let d = tr.numel();
                    let mut dr = vec![T::zero(); d];
                    for chunk in gd.chunks(d) {
                        for (o, &v) in dr.iter_mut().zip(chunk) {
                            *o += v;
                        }
                    }
                    self.acc(
                        grads,
                        *row,
                        Tensor::new(tr.shape().to_vec(), dr).expect("shape"),
                    );
                }
            }
            Op::Scale { x, factor } => {
                let f = *factor;
                self.acc(grads, *x, g.map(|v| v * f));
            }
            Op::Relu(x) => {
                let tx = self.value(*x);
                let d = gd
                    .iter()
                    .zip(tx.data())
                    .map(|(&gv, &xv)| if xv > T::zero() { gv } else { T::zero() })
                    .collect();
                self.acc(
                    grads,
                    *x,
                    Tensor::new(g.shape().to_vec(), d).expect("shape"),
                );
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let tg = self.value(*gain);
                let d = tg.numel();
                let dn = T::lit(d as f64);
                if self.wants(*gain) || self.wants(*bias) {
                    let mut dgain = vec![T::zero(); d];
                    let mut dbias = vec![T::zero(); d];
                    for (gr, hr) in gd.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            dgain[j] += gr[j] * hr[j];
                            dbias[j] += gr[j];
                        }
                    }
                    self.acc(
                        grads,
                        *gain,
                        Tensor::new(tg.shape().to_vec(), dgain).expect("shape"),
                    );
                    let sb = self.value(*bias).shape().to_vec();
                    self.acc(grads, *bias, Tensor::new(sb, dbias).expect("shape"));
                }
                if self.wants(*x) {
                    let mut dx = Vec::with_capacity(gd.len());
                    for ((gr, hr), &rs) in gd.chunks(d).zip(xhat.chunks(d)).zip(rstd) {
                        let dh: Vec<T> = gr.iter().zip(tg.data()).map(|(&a, &b)| a * b).collect();
                        let m1 = dh.iter().copied().sum::<T>() / dn;
                        let m2 = dh.iter().zip(hr).map(|(&a, &b)| a * b).sum::<T>() / dn;
                        dx.extend(dh.iter().zip(hr).map(|(&a, &h)| rs * (a - m1 - h * m2)));
                    }
                    self.acc(
                        grads,
                        *x,
                        Tensor::new(g.shape().to_vec(), dx).expect("shape"),
                    );
                }
            }
            Op::MaskedSoftmax { x, mask } => {
                let q = mask.size();
                let p = node.value.data();
                let mut dx = vec![T::zero(); p.len()];
                for (r, ((pr, gr), dr)) in p
                    .chunks(q)
                    .zip(gd.chunks(q))
                    .zip(dx.chunks_mut(q))
                    .enumerate()
                {
                    let allowed = mask.row(r % q);
                    let dot: T = pr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for j in 0..q {
                        if allowed[j] {
                            dr[j] = pr[j] * (gr[j] - dot);
                        }
                    }
                }
                self.acc(
                    grads,
                    *x,
                    Tensor::new(g.shape().to_vec(), dx).expect("shape"),
                );
            }
            Op::Softmax(x) => {
                let c = node.value.last_dim();
                let p = node.value.data();
                let mut dx = vec![T::zero(); p.len()];
                for ((pr, gr), dr) in p.chunks(c).zip(gd.chunks(c)).zip(dx.chunks_mut(c)) {
                    let dot: T = pr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for j in 0..c {
                        dr[j] = pr[j] * (gr[j] - dot);
                    }
                }
                self.acc(
                    grads,
                    *x,
                    Tensor::new(g.shape().to_vec(), dx).expect("shape"),
                );
            }
            Op::SplitHeads { x, heads } => {
                let s = g.shape();
                let (h, q, dh) = (s[0], s[1], s[2]);
                debug_assert_eq!(h, *heads);
                let mut dx = vec![T::zero(); gd.len()];
                for hh in 0..h {
                    for r in 0..q {
                        dx[r * h * dh + hh * dh..r * h * dh + (hh + 1) * dh]
                            .copy_from_slice(&gd[(hh * q + r) * dh..(hh * q + r + 1) * dh]);
                    }
                }
                self.acc(grads, *x, Tensor::new(vec![q, h * dh], dx).expect("shape"));
            }
            Op::MergeHeads { x } => {
                let s = self.value(*x).shape().to_vec();
                let (h, q, dh) = (s[0], s[1], s[2]);
                let mut dx = Vec::with_capacity(gd.len());
                for hh in 0..h {
                    for r in 0..q {
                        dx.extend_from_slice(&gd[r * h * dh + hh * dh..r * h * dh + (hh + 1) * dh]);
                    }
                }
                self.acc(grads, *x, Tensor::new(s, dx).expect("shape"));
            }
            Op::Reshape(x) => {
                let s = self.value(*x).shape().to_vec();
                self.acc(grads, *x, g.reshape(s).expect("shape"));
            }
            Op::GatherRows { x, rows } => {
                let tx = self.value(*x);
                let w = tx.numel() / tx.shape()[0];
                let mut dx = vec![T::zero(); tx.numel()];
                for (k, &r) in rows.iter().enumerate() {
                    for j in 0..w {
                        dx[r * w + j] += gd[k * w + j];
                    }
                }
                self.acc(
                    grads,
                    *x,
                    Tensor::new(tx.shape().to_vec(), dx).expect("shape"),
                );
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let tp = self.value(p);
                    let n = tp.numel();
                    if self.wants(p) {
                        self.acc(
                            grads,
                            p,
                            Tensor::new(tp.shape().to_vec(), gd[off..off + n].to_vec())
                                .expect("shape"),
                        );
                    }
                    off += n;
                }
            }
            Op::GroupMean { x, group } => {
                let tx = self.value(*x);
                let c = tx.last_dim();
                let inv = T::one() / T::lit(*group as f64);
                let mut dx = Vec::with_capacity(tx.numel());
                for r in 0..tx.rows() {
                    dx.extend(
                        gd[(r / group) * c..(r / group + 1) * c]
                            .iter()
                            .map(|&v| v * inv),
                    );
                }
                self.acc(
                    grads,
                    *x,
                    Tensor::new(tx.shape().to_vec(), dx).expect("shape"),
                );
            }
            Op::GroupCumsum { x, group } => {
                // reverse running sum within each group
                let c = g.last_dim();
                let rows = g.rows();
                let mut dx = gd.to_vec();
                for r in (0..rows).rev() {
                    if (r + 1) % group != 0 && r + 1 < rows {
                        for j in 0..c {
                            let next = dx[(r + 1) * c + j];
                            dx[r * c + j] += next;
                        }
                    }
                }
                self.acc(
                    grads,
                    *x,
                    Tensor::new(g.shape().to_vec(), dx).expect("shape"),
                );
            }
            Op::Sum(x) => {
                let s = self.value(*x).shape().to_vec();
                self.acc(grads, *x, Tensor::full(s, gd[0]));
            }
            Op::Mean(x) => {
                let tx = self.value(*x);
                let v = gd[0] / T::lit(tx.numel() as f64);
                self.acc(grads, *x, Tensor::full(tx.shape().to_vec(), v));
            }
            Op::L1 { pred, target } => {
                let (tp, tt) = (self.value(*pred), self.value(*target));
                let scale = gd[0] / T::lit(tp.numel() as f64);
                let sign: Vec<T> = tp
                    .data()
                    .iter()
                    .zip(tt.data())
                    .map(|(&a, &b)| {
                        if a > b {
                            scale
                        } else if a < b {
                            -scale
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                if self.wants(*target) {
                    self.acc(
                        grads,
                        *target,
                        Tensor::new(tt.shape().to_vec(), sign.iter().map(|&v| -v).collect())
                            .expect("shape"),
                    );
                }
                self.acc(
                    grads,
                    *pred,
                    Tensor::new(tp.shape().to_vec(), sign).expect("shape"),
                );
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let tl = self.value(*logits);
                let c = tl.last_dim();
                let scale = gd[0] / T::lit(targets.len() as f64);
                let mut dl: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (r, &t) in targets.iter().enumerate() {
                    dl[r * c + t] -= scale;
                }
                self.acc(
                    grads,
                    *logits,
                    Tensor::new(tl.shape().to_vec(), dl).expect("shape"),
                );
            }
            Op::BceWithLogits { logits, targets } => {
                let tl = self.value(*logits);
                let scale = gd[0] / T::lit(targets.len() as f64);
                let dl = tl
                    .data()
                    .iter()
                    .zip(targets)
                    .map(|(&x, &t)| (T::one() / (T::one() + (-x).exp()) - t) * scale)
                    .collect();
                self.acc(
                    grads,
                    *logits,
                    Tensor::new(tl.shape().to_vec(), dl).expect("shape"),
                );
            }
            Op::Custom { inputs, op } => {
                let values: Vec<&Tensor<T>> = inputs.iter().map(|&v| self.value(v)).collect();
                let gs = op.backward(&values, &node.value, g);
                for (&v, gi) in inputs.iter().zip(gs) {
                    if let Some(gi) = gi {
                        self.acc(grads, v, gi);
                    }
                }
            }
        }
    }
}
