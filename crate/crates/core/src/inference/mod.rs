//! State inference from noisy, partially observed series: an ensemble
//! Kalman smoother driven by the learned dynamics, and bidirectional-LSTM
//! posterior networks for amortized inference.

mod enks;
mod lstm;

pub use enks::{
    enks_smooth, enks_smooth_flow, Ensemble, EnksConfig, INNOVATION_JITTER,
};
pub use lstm::{
    LstmInference, LstmInferenceConfig, LstmInferenceVars, PosteriorFeatures, PosteriorStep,
    LSTM_LAYERS,
};
