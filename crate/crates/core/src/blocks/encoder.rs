use super::attention::MultiHeadAttention;
use super::linear::Linear;
use super::mask::SeqMask;
use super::param::{Forward, Init, ParamId, ParamStore};
use crate::error::Result;
use crate::tensor::{Real, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<F: Real>(store: &mut ParamStore<F>, init: &mut Init, name: &str, dim: usize) -> Self {
        LayerNorm {
            gamma: store.add(format!("{name}.gamma"), init.ones(vec![dim])),
            beta: store.add(format!("{name}.beta"), init.zeros(vec![dim])),
        }
    }

    pub fn forward<F: Real>(&self, fwd: &mut Forward<F>, x: Var) -> Result<Var> {
        let (g, b) = (fwd.p(self.gamma), fwd.p(self.beta));
        fwd.tape.layer_norm(x, g, b, F::from_f64_lossy(LAYER_NORM_EPS))
    }
}

/// Pre-norm transformer encoder block:
///
/// ```text
/// y   = x + Dropout(Attn(LN(x), context))
/// out = y + Dropout(FFN(LN(y)))
/// ```
///
/// With no context the block attends over its own (normalized) input; a
/// cross-attention block normalizes its context with a separate LayerNorm.
#[derive(Clone, Debug)]
pub struct EncoderBlock {
    pub attn_norm: LayerNorm,
    pub attention: MultiHeadAttention,
    pub ffn_norm: LayerNorm,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
    /// Normalizes the key/value context of a cross-attention block.
    pub ctx_norm: Option<LayerNorm>,
}

impl EncoderBlock {
    /// `context_dim == None` builds a self-attention block.
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        init: &mut Init,
        name: &str,
        model_dim: usize,
        context_dim: Option<usize>,
        num_heads: usize,
        ffn_dim: usize,
    ) -> Result<Self> {
        let attn_norm = LayerNorm::new(store, init, &format!("{name}.ln1"), model_dim);
        let attention = MultiHeadAttention::new(
            store,
            init,
            &format!("{name}.attn"),
            model_dim,
            context_dim.unwrap_or(model_dim),
            num_heads,
        )?;
        let ctx_norm = context_dim.map(|d| LayerNorm::new(store, init, &format!("{name}.ln_ctx"), d));
        let ffn_norm = LayerNorm::new(store, init, &format!("{name}.ln2"), model_dim);
        let ffn_in = Linear::new(store, init, &format!("{name}.ffn1"), model_dim, ffn_dim);
        let ffn_out = Linear::new(store, init, &format!("{name}.ffn2"), ffn_dim, model_dim);
        Ok(EncoderBlock {
            attn_norm,
            attention,
            ffn_norm,
            ffn_in,
            ffn_out,
            ctx_norm,
        })
    }

    pub fn is_cross(&self) -> bool {
        self.ctx_norm.is_some()
    }

    /// `x` is `[B, L, model_dim]` with validity `x_mask`. When `context` is
    /// given, queries come from `x` and keys/values from the context.
    pub fn forward<F: Real>(
        &self,
        fwd: &mut Forward<F>,
        x: Var,
        x_mask: &SeqMask,
        context: Option<(Var, &SeqMask)>,
    ) -> Result<Var> {
        let h = self.attn_norm.forward(fwd, x)?;
        let attended = match context {
            Some((ctx, ctx_mask)) => {
                let ctx = match &self.ctx_norm {
                    Some(norm) => norm.forward(fwd, ctx)?,
                    None => ctx,
                };
                self.attention.forward(fwd, h, ctx, ctx_mask)?
            }
            None => self.attention.forward(fwd, h, h, x_mask)?,
        };
        let a = fwd.dropout(attended.output)?;
        let y = fwd.tape.add(x, a)?;

        let z = self.ffn_norm.forward(fwd, y)?;
        let z = self.ffn_in.forward(fwd, z)?;
        let z = fwd.tape.relu(z);
        let z = self.ffn_out.forward(fwd, z)?;
        let z = fwd.dropout(z)?;
        fwd.tape.add(y, z)
    }
}
