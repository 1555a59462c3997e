//! Parameterized building blocks: linear maps, layer norm, multi-head attention
//! and pre-norm transformer blocks.

use rand::Rng;

use crate::error::{NumError, Result};
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const LEAKY_SLOPE: f64 = 0.01;
const LN_EPS: f64 = 1e-5;
const MASK_FILL: f64 = -1e9;

/// `y = x · W + b` with `W` stored `in x out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Xavier-uniform weights, zero bias.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let bound = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let w = Tensor::uniform(&[in_dim, out_dim], bound, rng);
        Self::from_weights(store, name, w)
    }

    pub fn zeros(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize) -> Result<Self> {
        Self::from_weights(store, name, Tensor::zeros(&[in_dim, out_dim]))
    }

    pub fn from_weights(store: &mut ParamStore, name: &str, w: Tensor) -> Result<Self> {
        let (in_dim, out_dim) = w.dims2()?;
        let w = store.add(format!("{name}.w"), w)?;
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[out_dim]))?;
        Ok(Self { w, b, in_dim, out_dim })
    }

    /// Rebinds an existing `{name}.w` / `{name}.b` pair.
    pub fn lookup(store: &ParamStore, name: &str) -> Result<Self> {
        let w = store.id(&format!("{name}.w"))?;
        let b = store.id(&format!("{name}.b"))?;
        let (in_dim, out_dim) = store.get(w).dims2()?;
        Ok(Self { w, b, in_dim, out_dim })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        let y = tape.matmul(x, w)?;
        tape.add_row(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[dim], 1.0))?,
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[dim]))?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        tape.layer_norm(x, g, b, LN_EPS)
    }
}

/// Scaled dot-product attention over `heads` column groups, concatenated and
/// projected by `wo`.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        zero_output: bool,
        rng: &mut R,
    ) -> Result<Self> {
        check_heads(dim, heads)?;
        let wq = Linear::new(store, &format!("{name}.q"), dim, dim, rng)?;
        let wk = Linear::new(store, &format!("{name}.k"), dim, dim, rng)?;
        let wv = Linear::new(store, &format!("{name}.v"), dim, dim, rng)?;
        let wo = if zero_output {
            Linear::zeros(store, &format!("{name}.o"), dim, dim)?
        } else {
            Linear::new(store, &format!("{name}.o"), dim, dim, rng)?
        };
        Ok(Self {
            wq,
            wk,
            wv,
            wo,
            heads,
            dim,
        })
    }

    /// Projections fixed to the identity; used by tests of the attention algebra.
    pub fn identity(store: &mut ParamStore, name: &str, dim: usize, heads: usize) -> Result<Self> {
        check_heads(dim, heads)?;
        let mk = |s: &mut ParamStore, n: &str| Linear::from_weights(s, &format!("{name}.{n}"), Tensor::eye(dim));
        Ok(Self {
            wq: mk(store, "q")?,
            wk: mk(store, "k")?,
            wv: mk(store, "v")?,
            wo: mk(store, "o")?,
            heads,
            dim,
        })
    }

    /// `q: Lq x d`, `k, v: Lk x d`. Keys whose mask entry is `false` receive no weight.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        q: Var,
        k: Var,
        v: Var,
        key_mask: Option<&[bool]>,
    ) -> Result<Var> {
        check_heads(self.dim, self.heads)?;
        let (lq, dq) = tape.value(q).dims2()?;
        let (lk, dk) = tape.value(k).dims2()?;
        if dq != self.dim || dk != self.dim || tape.shape(v) != tape.shape(k) {
            return Err(NumError::Shape {
                op: "multi_head_attention",
                lhs: tape.shape(q).to_vec(),
                rhs: tape.shape(k).to_vec(),
            });
        }
        let qp = self.wq.forward(tape, store, q)?;
        let kp = self.wk.forward(tape, store, k)?;
        let vp = self.wv.forward(tape, store, v)?;
        let mask = match key_mask {
            Some(m) => {
                if m.len() != lk {
                    return Err(NumError::Invalid(format!(
                        "key mask of length {} for {lk} keys",
                        m.len()
                    )));
                }
                if !m.iter().any(|&b| b) {
                    return Err(NumError::Invalid("attention with every key masked".into()));
                }
                let row: Vec<f64> = m.iter().map(|&b| if b { 0.0 } else { MASK_FILL }).collect();
                let data = row.repeat(lq);
                Some(tape.constant(Tensor::new(vec![lq, lk], data)?))
            }
            None => None,
        };
        let dh = self.dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (s, e) = (h * dh, (h + 1) * dh);
            let (qh, kh, vh) = if self.heads == 1 {
                (qp, kp, vp)
            } else {
                (
                    tape.slice_cols(qp, s, e)?,
                    tape.slice_cols(kp, s, e)?,
                    tape.slice_cols(vp, s, e)?,
                )
            };
            let scores = tape.matmul_t(qh, false, kh, true)?;
            let mut scores = tape.scale(scores, scale);
            if let Some(m) = mask {
                scores = tape.add(scores, m)?;
            }
            let attn = tape.softmax_rows(scores)?;
            outs.push(tape.matmul(attn, vh)?);
        }
        let cat = if outs.len() == 1 {
            outs[0]
        } else {
            tape.concat(&outs, 1)?
        };
        self.wo.forward(tape, store, cat)
    }
}

fn check_heads(dim: usize, heads: usize) -> Result<()> {
    if heads == 0 || !dim.is_multiple_of(heads) {
        return Err(NumError::Config(format!(
            "feature width {dim} is not divisible by {heads} heads"
        )));
    }
    Ok(())
}

/// Two-layer position-wise network with a leaky-ReLU in between.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub l1: Linear,
    pub l2: Linear,
}

impl FeedForward {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        hidden: usize,
        zero_output: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let l1 = Linear::new(store, &format!("{name}.l1"), dim, hidden, rng)?;
        let l2 = if zero_output {
            Linear::zeros(store, &format!("{name}.l2"), hidden, dim)?
        } else {
            Linear::new(store, &format!("{name}.l2"), hidden, dim, rng)?
        };
        Ok(Self { l1, l2 })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.l1.forward(tape, store, x)?;
        let h = tape.leaky_relu(h, LEAKY_SLOPE);
        self.l2.forward(tape, store, h)
    }
}

/// Pre-norm residual block: `x + MHA(LN(x), ctx)` then `+ FFN(LN(·))`.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub ff: FeedForward,
}

impl TransformerBlock {
    /// With `identity_init` the residual branches start at zero, so the block
    /// begins as the identity map.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        ff_hidden: usize,
        identity_init: bool,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim)?,
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), dim, heads, identity_init, rng)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim)?,
            ff: FeedForward::new(store, &format!("{name}.ff"), dim, ff_hidden, identity_init, rng)?,
        })
    }

    /// Self-attention over `x` with an optional key mask.
    pub fn forward_self(&self, tape: &mut Tape, store: &ParamStore, x: Var, key_mask: Option<&[bool]>) -> Result<Var> {
        let h = self.ln1.forward(tape, store, x)?;
        let a = self.attn.forward(tape, store, h, h, h, key_mask)?;
        let x = tape.add(x, a)?;
        self.feed_forward(tape, store, x)
    }

    /// Cross-attention from `x` (queries) to `context` (keys and values).
    pub fn forward_cross(&self, tape: &mut Tape, store: &ParamStore, x: Var, context: Var) -> Result<Var> {
        let h = self.ln1.forward(tape, store, x)?;
        let a = self.attn.forward(tape, store, h, context, context, None)?;
        let x = tape.add(x, a)?;
        self.feed_forward(tape, store, x)
    }

    fn feed_forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.ln2.forward(tape, store, x)?;
        let f = self.ff.forward(tape, store, h)?;
        tape.add(x, f)
    }
}
