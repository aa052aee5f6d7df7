//! The byte-level decoder-only language model.

mod config;
mod ffn;
mod forward;
mod params;

pub use config::{FfnKind, ModelConfig};
pub use ffn::{ffn_forward, glu_ffn_forward, Ffn, FfnLayer, FfnParams, GluFfnLayer, NeuronLayout};
pub use forward::{forward_batch, forward_lm, FfnMode, LmOutput};
pub use params::{Block, MoeAttachment, RouterKind, TransformerParams, INIT_STD};
