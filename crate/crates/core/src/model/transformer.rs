//! Spatial-reduction attention and the pre-norm transformer block.
//!
//! Keys and values come from a shortened sequence: `N` tokens of width `d`
//! are regrouped into `N/R` tokens of width `d·R`, mapped back to width `d`
//! by a learned linear layer and layer-normalized. Each head therefore forms
//! an `N × N/R` score matrix. With `R = 1` there is no reduction layer and
//! the block is ordinary dense attention.

use rand::Rng;

use super::layers::{Builder, Forward, LayerNorm, Linear};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::ops::attention_scale;
use crate::scalar::Scalar;

/// Regroup `(B, N, d)` into `(B, N/R, d·R)`.
fn group_tokens<T: Scalar>(tape: &mut Tape<T>, x: Var, ratio: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() != 3 || ratio == 0 || !s[1].is_multiple_of(ratio) {
        return Err(Error::InvalidShape { op: "sr_attention", shape: s, reason: format!("token count not divisible by R={ratio}") });
    }
    tape.reshape(x, &[s[0], s[1] / ratio, s[2] * ratio])
}

/// Variables of one spatial-reduction attention head.
#[derive(Clone, Copy, Debug)]
pub struct HeadWeights {
    /// `(d, d_h)` query, key and value projections.
    pub query: Var,
    pub key: Var,
    pub value: Var,
    /// `(d·R, d)` reduction map, its bias, and the layer-norm affine pair.
    /// Absent when `R = 1`.
    pub reduction: Option<ReductionWeights>,
}

#[derive(Clone, Copy, Debug)]
pub struct ReductionWeights {
    pub weight: Var,
    pub bias: Var,
    pub norm_gamma: Var,
    pub norm_beta: Var,
}

fn reduce<T: Scalar>(tape: &mut Tape<T>, x: Var, ratio: usize, red: Option<ReductionWeights>) -> Result<Var> {
    match red {
        Some(r) => {
            let grouped = group_tokens(tape, x, ratio)?;
            let mapped = tape.linear(grouped, r.weight, Some(r.bias))?;
            tape.layernorm(mapped, r.norm_gamma, r.norm_beta)
        }
        None if ratio == 1 => Ok(x),
        None => Err(Error::invalid(format!("reduction weights required for R={ratio}"))),
    }
}

/// One attention head over `x` (`(B, N, d)`): queries from the full
/// sequence, keys and values from the reduced one. Returns `(B, N, d_h)`.
pub fn sr_attention_head<T: Scalar>(tape: &mut Tape<T>, x: Var, ratio: usize, w: &HeadWeights) -> Result<Var> {
    let kv = reduce(tape, x, ratio, w.reduction)?;
    let q = tape.linear(x, w.query, None)?;
    let k = tape.linear(kv, w.key, None)?;
    let v = tape.linear(kv, w.value, None)?;
    tape.attention(q, k, v, 1)
}

/// Dense multi-head attention assembled from primitive operators
/// (matmul, softmax, head split/merge). Reference path for the fused
/// kernel.
#[allow(clippy::too_many_arguments)]
pub fn dense_multi_head_attention<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    wq: Var,
    wk: Var,
    wv: Var,
    wo: Var,
    bo: Option<Var>,
    heads: usize,
) -> Result<Var> {
    let d = *tape.shape(x).last().unwrap_or(&0);
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(Error::invalid(format!("width {d} not divisible into {heads} heads")));
    }
    let q = tape.linear(x, wq, None)?;
    let k = tape.linear(x, wk, None)?;
    let v = tape.linear(x, wv, None)?;
    let (qh, kh, vh) = (tape.split_heads(q, heads)?, tape.split_heads(k, heads)?, tape.split_heads(v, heads)?);
    let kt = tape.transpose_last2(kh)?;
    let scores = tape.matmul(qh, kt)?;
    let scores = tape.scale(scores, attention_scale::<T>(d / heads));
    let probs = tape.softmax_lastdim(scores)?;
    let heads_out = tape.matmul(probs, vh)?;
    let merged = tape.merge_heads(heads_out)?;
    tape.linear(merged, wo, bo)
}

#[derive(Clone, Debug)]
pub struct SrAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub reduction: Option<(Linear, LayerNorm)>,
    pub output: Linear,
    pub heads: usize,
    pub ratio: usize,
}

impl SrAttention {
    pub fn new<T: Scalar, R: Rng>(b: &mut Builder<'_, T, R>, name: &str, dim: usize, heads: usize, ratio: usize) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::invalid(format!("{name}: width {dim} not divisible into {heads} heads")));
        }
        let query = Linear::new(b, &format!("{name}.q"), dim, dim, false)?;
        let key = Linear::new(b, &format!("{name}.k"), dim, dim, false)?;
        let value = Linear::new(b, &format!("{name}.v"), dim, dim, false)?;
        let reduction = if ratio > 1 {
            Some((Linear::new(b, &format!("{name}.sr"), dim * ratio, dim, true)?, LayerNorm::new(b, &format!("{name}.sr_norm"), dim)?))
        } else {
            None
        };
        let output = Linear::new(b, &format!("{name}.out"), dim, dim, true)?;
        Ok(SrAttention { query, key, value, reduction, output, heads, ratio })
    }

    /// The shortened key/value source sequence `(B, N/R, d)`.
    pub fn reduced_sequence<T: Scalar>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        match &self.reduction {
            Some((lin, norm)) => {
                let grouped = group_tokens(f.tape, x, self.ratio)?;
                let mapped = lin.forward(f, grouped)?;
                norm.forward(f, mapped)
            }
            None => Ok(x),
        }
    }

    /// Concatenated head outputs before the output projection.
    pub fn heads_forward<T: Scalar>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let kv = self.reduced_sequence(f, x)?;
        let q = self.query.forward(f, x)?;
        let k = self.key.forward(f, kv)?;
        let v = self.value.forward(f, kv)?;
        f.tape.attention(q, k, v, self.heads)
    }

    pub fn forward<T: Scalar>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let heads = self.heads_forward(f, x)?;
        self.output.forward(f, heads)
    }
}

/// `x̂ = MHA(LN(x)) + x; y = MLP(LN(x̂)) + x̂`, MLP = linear → GeLU → linear.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub norm1: LayerNorm,
    pub attn: SrAttention,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl TransformerBlock {
    pub fn new<T: Scalar, R: Rng>(b: &mut Builder<'_, T, R>, name: &str, dim: usize, heads: usize, ratio: usize, mlp_ratio: usize) -> Result<Self> {
        Ok(TransformerBlock {
            norm1: LayerNorm::new(b, &format!("{name}.ln1"), dim)?,
            attn: SrAttention::new(b, &format!("{name}.attn"), dim, heads, ratio)?,
            norm2: LayerNorm::new(b, &format!("{name}.ln2"), dim)?,
            fc1: Linear::new(b, &format!("{name}.mlp.fc1"), dim, dim * mlp_ratio, true)?,
            fc2: Linear::new(b, &format!("{name}.mlp.fc2"), dim * mlp_ratio, dim, true)?,
        })
    }

    pub fn forward<T: Scalar>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let n1 = self.norm1.forward(f, x)?;
        let a = self.attn.forward(f, n1)?;
        let x = f.tape.add(a, x)?;
        let n2 = self.norm2.forward(f, x)?;
        let h = self.fc1.forward(f, n2)?;
        let h = f.tape.gelu(h);
        let m = self.fc2.forward(f, h)?;
        f.tape.add(m, x)
    }
}
