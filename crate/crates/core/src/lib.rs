//! Two-branch diffusion-video detector: a spatio-temporal branch over clip
//! windows, a multimodal branch over the key frame, and a fusion stage that
//! combines both into a real/fake score.

pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod exec;
pub mod mm;
pub mod model;
pub mod nn;
pub mod st;
pub mod tensor;
pub mod train;
pub mod uml;

pub use error::{Error, Result};
pub use exec::ExecMode;
pub use tensor::Tensor;
