use super::linear::Linear;
use super::mask::SeqMask;
use super::param::{Forward, Init, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{Real, Var};

/// Multi-head scaled dot-product attention.
///
/// Queries come from a `model_dim`-wide stream; keys and values are projected
/// from a `context_dim`-wide source, so a 1024-wide audio context is mapped to
/// the 768-wide model space inside the key/value projections.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub num_heads: usize,
    pub model_dim: usize,
    pub context_dim: usize,
}

/// Attention output together with the post-softmax weights
/// (`[batch, heads, len_q, len_k]`).
#[derive(Clone, Copy, Debug)]
pub struct AttentionOutput {
    pub output: Var,
    pub weights: Var,
}

impl MultiHeadAttention {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        init: &mut Init,
        name: &str,
        model_dim: usize,
        context_dim: usize,
        num_heads: usize,
    ) -> Result<Self> {
        if num_heads == 0 || model_dim % num_heads != 0 {
            return Err(Error::config(format!(
                "model width {model_dim} is not divisible by {num_heads} heads"
            )));
        }
        Ok(MultiHeadAttention {
            query: Linear::new(store, init, &format!("{name}.q"), model_dim, model_dim),
            key: Linear::new(store, init, &format!("{name}.k"), context_dim, model_dim),
            value: Linear::new(store, init, &format!("{name}.v"), context_dim, model_dim),
            output: Linear::new(store, init, &format!("{name}.o"), model_dim, model_dim),
            num_heads,
            model_dim,
            context_dim,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }

    /// `queries` is `[B, Lq, model_dim]`, `context` is `[B, Lk, context_dim]`
    /// and `context_mask` marks the valid key positions of each batch row.
    pub fn forward<F: Real>(
        &self,
        fwd: &mut Forward<F>,
        queries: Var,
        context: Var,
        context_mask: &SeqMask,
    ) -> Result<AttentionOutput> {
        let qs = fwd.tape.shape(queries).to_vec();
        let cs = fwd.tape.shape(context).to_vec();
        if qs.len() != 3 || cs.len() != 3 || qs[0] != cs[0] || qs[2] != self.model_dim || cs[2] != self.context_dim {
            return Err(Error::Shape {
                op: "attention",
                lhs: qs,
                rhs: cs,
            });
        }
        let (batch, len_q, len_k) = (qs[0], qs[1], cs[1]);
        if context_mask.batch() != batch || context_mask.len() != len_k {
            return Err(Error::Shape {
                op: "attention mask",
                lhs: vec![batch, len_k],
                rhs: vec![context_mask.batch(), context_mask.len()],
            });
        }
        if let Some(b) = context_mask.lengths().iter().position(|&l| l == 0) {
            return Err(Error::usage(format!("attention context of batch row {b} has no valid position")));
        }
        let heads = self.num_heads;
        let dh = self.head_dim();

        let q = self.query.forward(fwd, queries)?;
        let k = self.key.forward(fwd, context)?;
        let v = self.value.forward(fwd, context)?;
        let q = split_heads(fwd, q, batch, len_q, heads, dh)?;
        let k = split_heads(fwd, k, batch, len_k, heads, dh)?;
        let v = split_heads(fwd, v, batch, len_k, heads, dh)?;

        let kt = fwd.tape.transpose(k)?;
        let scores = fwd.tape.bmm(q, kt)?;
        let scale = F::one() / F::from_usize(dh).unwrap().sqrt();
        let mut scores = fwd.tape.scale(scores, scale);
        if !context_mask.is_full() {
            let mut masked = Vec::with_capacity(batch * heads * len_q * len_k);
            for b in 0..batch {
                for _ in 0..heads * len_q {
                    masked.extend((0..len_k).map(|j| !context_mask.is_valid(b, j)));
                }
            }
            scores = fwd.tape.masked_fill(scores, &masked, F::neg_infinity())?;
        }
        let weights = fwd.tape.softmax(scores, 2)?;
        let mixed = fwd.tape.bmm(weights, v)?;

        let mixed = fwd.tape.reshape(mixed, &[batch, heads, len_q, dh])?;
        let mixed = fwd.tape.permute(mixed, &[0, 2, 1, 3])?;
        let mixed = fwd.tape.reshape(mixed, &[batch, len_q, self.model_dim])?;
        let output = self.output.forward(fwd, mixed)?;
        let weights = fwd.tape.reshape(weights, &[batch, heads, len_q, len_k])?;
        Ok(AttentionOutput { output, weights })
    }
}

/// `[B, L, H·dh] -> [B·H, L, dh]`
fn split_heads<F: Real>(fwd: &mut Forward<F>, x: Var, batch: usize, len: usize, heads: usize, dh: usize) -> Result<Var> {
    let x = fwd.tape.reshape(x, &[batch, len, heads, dh])?;
    let x = fwd.tape.permute(x, &[0, 2, 1, 3])?;
    fwd.tape.reshape(x, &[batch * heads, len, dh])
}
