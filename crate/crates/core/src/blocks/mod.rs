//! Neural building blocks: attention, encoder blocks, task heads, the
//! bidirectional LSTM baseline and sequence embedding utilities.
//!
//! Every block is a plain description of which [`ParamStore`] entries it
//! uses; its `forward` records operations on a [`Forward`] pass.

mod attention;
mod embed;
mod encoder;
mod head;
mod linear;
mod lstm;
mod mask;
mod param;

pub use attention::{AttentionOutput, MultiHeadAttention};
pub use embed::{add_positional, prepend_cls, sinusoidal_table};
pub use encoder::{EncoderBlock, LayerNorm, LAYER_NORM_EPS};
pub use head::{HeadMode, MlpHead, HEAD_HIDDEN};
pub use linear::Linear;
pub use lstm::{BiLstm, LstmCell};
pub use mask::SeqMask;
pub use param::{Forward, Init, ParamId, ParamStore};
