pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod prompt;
pub mod scalar;
pub mod volb;
pub mod volume;
pub mod nn;
pub mod synth;
pub mod train;

/// Single-precision aliases used by the CLI and most callers.
pub type Volume = volume::Volume3D<f32>;
pub type Prompt = volume::PromptChannel<f32>;
pub type Context = volume::ContextSet<f32>;
pub type Model = nn::ModelState<f32>;
pub type Pred = nn::Prediction<f32>;
