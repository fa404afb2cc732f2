//! Velocity network: feature maps, autodiff tape, model and checkpoints.

pub mod checkpoint;
pub mod features;
pub mod model;
pub mod tape;

pub use checkpoint::Checkpoint;
pub use features::{edge_features, sinusoidal_embedding, EdgeFeatures, EdgeMode};
pub use model::{forward, forward_batch, forward_on_tape, init_node_features, ModelParams, NetConfig};
