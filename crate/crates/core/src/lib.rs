//! Context-rewarded diffusion fine-tuning on a synthetic scene world.

pub mod bench;
pub mod diffusion;
pub mod encoders;
pub mod error;
pub mod evaluator;
pub mod gradsuite;
pub mod models;
pub mod nn;
pub mod pipeline;
pub mod rewardft;
pub mod sceneworld;
pub mod vocab;

pub use error::{Error, Result};
