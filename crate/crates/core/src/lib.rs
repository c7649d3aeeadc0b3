//! Learned full-reference video quality metric for frame interpolation,
//! with the dataset, training and evaluation tooling around it.

pub mod annotation;
pub mod clip;
pub mod config;
pub mod dataset;
mod error;
pub mod eval;
pub mod metrics;
pub mod model;
pub mod params;
pub mod pyramid;
pub mod st;
pub mod train;
pub mod weights;

pub use clip::{load_clip, store_clip, VideoClip};
pub use config::{ModelConfig, PyramidConfig, StConfig, TrainConfig};
pub use error::{Error, Result};
pub use model::{bce_loss, preference_prob, Distance, MetricModel};
pub use params::ParamStore;
