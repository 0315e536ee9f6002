//! Parameter groups for the transformer sublayers and their tape forwards.

use std::sync::Arc;

use rand::Rng;

use crate::autodiff::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::query::{gaussian_table, IntraInstanceMask};
use crate::scalar::Scalar;

/// `x W + b` with `W: [d_in, d_out]`; `b` is absent for bias-free
/// projections.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    /// Weights from N(0, gain^2 / d_in), zero bias.
    pub fn register<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        d_in: usize,
        d_out: usize,
        gain: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let mut lin = Self::register_unbiased(store, name, d_in, d_out, gain, rng)?;
        lin.b = Some(store.register(format!("{name}.b"), Tensor::zeros(vec![d_out]))?);
        Ok(lin)
    }

    pub fn register_unbiased<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        d_in: usize,
        d_out: usize,
        gain: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let std = gain / (d_in as f64).sqrt();
        Ok(Self {
            w: store.register(format!("{name}.w"), gaussian_table(d_in, d_out, std, rng))?,
            b: None,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
    ) -> Result<Var> {
        let w = tape.param(store, self.w);
        match self.b {
            Some(b) => {
                let b = tape.param(store, b);
                tape.linear(x, w, b)
            }
            None => tape.matmul(x, w),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl Norm {
    pub fn register<T: Scalar>(store: &mut ParamStore<T>, name: &str, d: usize) -> Result<Self> {
        Ok(Self {
            gain: store.register(format!("{name}.gain"), Tensor::full(vec![d], T::one()))?,
            bias: store.register(format!("{name}.bias"), Tensor::zeros(vec![d]))?,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
    ) -> Result<Var> {
        let (g, b) = (tape.param(store, self.gain), tape.param(store, self.bias));
        tape.layer_norm(x, g, b)
    }
}

/// Two linear maps with a ReLU between them.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn register<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        d_in: usize,
        hidden: usize,
        d_out: usize,
        out_gain: f64,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            fc1: Linear::register(
                store,
                &format!("{name}.fc1"),
                d_in,
                hidden,
                2f64.sqrt(),
                rng,
            )?,
            fc2: Linear::register(store, &format!("{name}.fc2"), hidden, d_out, out_gain, rng)?,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
    ) -> Result<Var> {
        let h = self.fc1.forward(tape, store, x)?;
        let h = tape.relu(h);
        self.fc2.forward(tape, store, h)
    }
}

/// How masked self-attention is evaluated. Both give the same result for
/// block-diagonal masks; `Blocked` skips the scores of blocked pairs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum AttentionKernel {
    /// Full `q x q` scores through `masked_softmax`.
    Dense,
    /// Scores only inside each diagonal block, as a batch of small attentions.
    #[default]
    Blocked,
}

/// Self-attention layout shared by every layer of one decoder: the
/// per-scene mask, how to evaluate it, and how many scenes are stacked
/// along the query rows.
#[derive(Clone, Copy, Debug)]
pub struct SelfAttnPlan<'a> {
    pub mask: &'a Arc<IntraInstanceMask>,
    pub kernel: AttentionKernel,
    pub batch: usize,
}

/// Pre-norm multi-head attention sublayer with a residual connection.
#[derive(Clone, Debug)]
pub struct Attention {
    pub norm: Norm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn register<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        d: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let q = Linear::register(store, &format!("{name}.w_q"), d, d, 1.0, rng)?;
        // a key bias only shifts each query's scores by a constant, which
        // the softmax cancels
        let k = Linear::register_unbiased(store, &format!("{name}.w_k"), d, d, 1.0, rng)?;
        let v = Linear::register(store, &format!("{name}.w_v"), d, d, 1.0, rng)?;
        let o = Linear::register(store, &format!("{name}.w_o"), d, d, 1.0, rng)?;
        Ok(Self {
            norm: Norm::register(store, &format!("{name}.norm"), d)?,
            q,
            k,
            v,
            o,
            heads,
        })
    }

    /// Masked self-attention output before the residual. `x` holds
    /// `plan.batch` scenes of `mask.size()` rows each.
    pub fn attend_self<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        plan: SelfAttnPlan<'_>,
    ) -> Result<Var> {
        let n = plan.mask.size();
        if tape.shape(x)[0] != n * plan.batch {
            return Err(Error::shape(
                "self attention",
                tape.shape(x),
                &[n * plan.batch],
            ));
        }
        let (q, k, v) = self.project(tape, store, x, x)?;
        let (h, dh) = (self.heads, tape.shape(q)[2]);
        let alpha = T::one() / T::lit(dh as f64).sqrt();
        // rows of one scene, and of one block within it, are contiguous, so
        // [h, batch * n, dh] regroups into smaller batches without copying
        let ctx = match plan.kernel {
            AttentionKernel::Dense => {
                let per_scene = [h * plan.batch, n, dh];
                let (q, k, v) = (
                    tape.reshape(q, per_scene)?,
                    tape.reshape(k, per_scene)?,
                    tape.reshape(v, per_scene)?,
                );
                let scores = tape.matmul_nt_scaled(q, k, alpha)?;
                let probs = tape.masked_softmax(scores, plan.mask)?;
                tape.matmul(probs, v)?
            }
            AttentionKernel::Blocked => {
                let bs = plan.mask.block_size();
                let per_block = [h * plan.batch * (n / bs), bs, dh];
                let (q, k, v) = (
                    tape.reshape(q, per_block)?,
                    tape.reshape(k, per_block)?,
                    tape.reshape(v, per_block)?,
                );
                let scores = tape.matmul_nt_scaled(q, k, alpha)?;
                let probs = tape.softmax(scores);
                tape.matmul(probs, v)?
            }
        };
        self.output(tape, store, ctx, plan.batch * n)
    }

    /// Cross-attention output before the residual; scene `b` of `x` only
    /// sees scene `b` of `memory`.
    pub fn attend_cross<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        memory: Var,
        batch: usize,
    ) -> Result<Var> {
        let (rows, mem_rows) = (tape.shape(x)[0], tape.shape(memory)[0]);
        if rows % batch != 0 || mem_rows % batch != 0 {
            return Err(Error::shape(
                "cross attention",
                tape.shape(x),
                tape.shape(memory),
            ));
        }
        let (q, k, v) = self.project(tape, store, x, memory)?;
        let (h, dh) = (self.heads, tape.shape(q)[2]);
        let alpha = T::one() / T::lit(dh as f64).sqrt();
        let q = tape.reshape(q, [h * batch, rows / batch, dh])?;
        let k = tape.reshape(k, [h * batch, mem_rows / batch, dh])?;
        let v = tape.reshape(v, [h * batch, mem_rows / batch, dh])?;
        let scores = tape.matmul_nt_scaled(q, k, alpha)?;
        let probs = tape.softmax(scores);
        let ctx = tape.matmul(probs, v)?;
        self.output(tape, store, ctx, rows)
    }

    fn project<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        src: Var,
    ) -> Result<(Var, Var, Var)> {
        let q = self.q.forward(tape, store, x)?;
        let k = self.k.forward(tape, store, src)?;
        let v = self.v.forward(tape, store, src)?;
        Ok((
            tape.split_heads(q, self.heads)?,
            tape.split_heads(k, self.heads)?,
            tape.split_heads(v, self.heads)?,
        ))
    }

    fn output<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        ctx: Var,
        rows: usize,
    ) -> Result<Var> {
        let dh = *tape.shape(ctx).last().expect("rank 3");
        let ctx = tape.reshape(ctx, [self.heads, rows, dh])?;
        let ctx = tape.merge_heads(ctx)?;
        self.o.forward(tape, store, ctx)
    }

    /// `x + attend_self(norm(x))`.
    pub fn self_block<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        plan: SelfAttnPlan<'_>,
    ) -> Result<Var> {
        let n = self.norm.forward(tape, store, x)?;
        let a = self.attend_self(tape, store, n, plan)?;
        tape.add(x, a)
    }

    /// `x + attend_cross(norm(x), memory)`.
    pub fn cross_block<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        memory: Var,
        batch: usize,
    ) -> Result<Var> {
        let n = self.norm.forward(tape, store, x)?;
        let a = self.attend_cross(tape, store, n, memory, batch)?;
        tape.add(x, a)
    }
}

/// Pre-norm position-wise feed-forward sublayer, hidden width `4 d`.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub norm: Norm,
    pub mlp: Mlp,
}

impl FeedForward {
    pub fn register<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        d: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            norm: Norm::register(store, &format!("{name}.norm"), d)?,
            mlp: Mlp::register(store, name, d, 4 * d, d, 1.0, rng)?,
        })
    }

    pub fn block<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
    ) -> Result<Var> {
        let n = self.norm.forward(tape, store, x)?;
        let h = self.mlp.forward(tape, store, n)?;
        tape.add(x, h)
    }
}

/// One decoder layer: cross-attention to each context in order, then the
/// optional intra-instance self-attention, then the feed-forward sublayer.
#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub cross: Vec<Attention>,
    pub self_attn: Option<Attention>,
    pub ffn: FeedForward,
}

impl DecoderLayer {
    pub fn register<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        contexts: &[&str],
        with_self_attn: bool,
        d: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let cross = contexts
            .iter()
            .map(|c| Attention::register(store, &format!("{name}.{c}"), d, heads, rng))
            .collect::<Result<_>>()?;
        let self_attn = with_self_attn
            .then(|| Attention::register(store, &format!("{name}.self_attn"), d, heads, rng))
            .transpose()?;
        Ok(Self {
            cross,
            self_attn,
            ffn: FeedForward::register(store, &format!("{name}.ffn"), d, rng)?,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        mut x: Var,
        memories: &[Var],
        plan: SelfAttnPlan<'_>,
    ) -> Result<Var> {
        debug_assert_eq!(memories.len(), self.cross.len());
        for (attn, &mem) in self.cross.iter().zip(memories) {
            x = attn.cross_block(tape, store, x, mem, plan.batch)?;
        }
        if let Some(sa) = &self.self_attn {
            x = sa.self_block(tape, store, x, plan)?;
        }
        self.ffn.block(tape, store, x)
    }
}

/// 2-D sinusoidal encoding of a ground-plane position (meters); the width
/// is split into sin/cos of x and sin/cos of y over `d / 4` frequencies.
pub fn position_encoding<T: Scalar>(x: f64, y: f64, d: usize) -> Vec<T> {
    let f = d / 4;
    let mut out = Vec::with_capacity(d);
    for coord in [x, y] {
        let freqs = (0..f).map(|k| coord * POSITION_BASE.powf(-(k as f64) / f as f64));
        out.extend(freqs.clone().map(|a| T::lit(a.sin())));
        out.extend(freqs.map(|a| T::lit(a.cos())));
    }
    out
}

/// Frequency spread of the position encoding: periods run from 2 pi m up
/// to several hundred meters.
const POSITION_BASE: f64 = 100.0;
