//! Parameters and reusable layers.

mod layers;
mod params;

pub use layers::{
    positional_embedding, AttentionMode, Conv1d, FeedForward, LayerNorm, Linear, MultiHeadAttention, MultiwayFfn,
    TransformerBlock, LN_EPS,
};
pub use params::{check_store_gradients, uniform, xavier, Grads, Graph, ParamId, ParamStore};
