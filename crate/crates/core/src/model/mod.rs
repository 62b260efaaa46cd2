//! Decoder-only transformer with gated feed-forward memory and checkpoint I/O.

mod checkpoint;
mod config;
pub mod container;
mod forward;
mod params;

pub use checkpoint::{init_model, load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_KIND};
pub use config::ModelConfig;
pub(crate) use forward::{build_graph, ParamVars};
pub use forward::{
    ffn_coefficients, forward, forward_logits, log_prob, loss_lm, target_span_logprob,
    InstrumentationTrace,
};
pub use params::{param_layout, LayerParams, Params, INIT_STD};
