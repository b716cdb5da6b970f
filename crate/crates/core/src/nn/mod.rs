//! Neural building blocks: dense networks, stacked LSTM cells, the
//! named-parameter registry they share, and the optimizer that updates them.

mod lstm;
mod mlp;
mod optim;
mod params;

pub use lstm::{LstmLayerVars, LstmStack, LstmStackVars, LstmState};
pub use mlp::{glorot_uniform, Activation, Mlp, MlpVars};
pub use optim::{clip_global_norm, Adam};
pub use params::{
    apply_updates, collect_params, join, named_gradients, param_norm, Binder, Parameterized,
};
