//! Sandwich-norm grouped-query-attention transformer: configuration,
//! weights, forward pass, seeded initialization and the `.pgl` checkpoint
//! format.

mod checkpoint;
mod config;
mod forward;
mod init;
mod weights;

pub use checkpoint::{from_bytes, load_checkpoint, save_checkpoint, to_bytes};
pub use config::{LayerConfig, ModelConfig, DEFAULT_EPS};
pub use forward::{
    apply_rope, attention, embed, forward, logits, swiglu, ForwardTrace, LayerTrace, ROPE_BASE,
};
pub use init::random_init;
pub use weights::{LayerWeights, NormSite, Param, WeightStore};
