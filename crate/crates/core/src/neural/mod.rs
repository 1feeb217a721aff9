//! Minimal neural substrate: a recording tape with reverse-mode gradients,
//! fully connected and GRU layers, and the Adam optimizer.

mod adam;
mod layers;
mod params;
mod tape;

pub use adam::{adam_step, AdamConfig, AdamSnapshot, AdamState};
pub use layers::{gru_forward, orthogonal, xavier_uniform, zero_hidden, GruParams, LinearParams};
pub use params::{Gradients, ParamId, ParamSet, Tensor};
pub use tape::{NodeId, Tape};
