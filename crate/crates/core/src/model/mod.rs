//! The trainable network: an MLP encoder whose penultimate features feed a
//! classifier head (k ID logits plus the outlier logit) and a two-layer
//! projection head producing an L2-normalized embedding, together with the
//! learnable bank of tail-class prototypes.

mod network;
mod prototypes;
mod snapshot;

pub use network::{
    backward, forward, forward_cached, init_params, Activation, Affine, ForwardCache, ModelConfig,
    ModelOutputs, ModelParams, ParamGrads,
};
pub use prototypes::{init_prototypes, PrototypeBank};
pub use snapshot::{load_checkpoint, save_checkpoint, Checkpoint};
