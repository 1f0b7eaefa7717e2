//! Credible early detection of rumors from repost streams.

pub mod config;
pub mod corpus;
pub mod detect;
pub mod encoder;
pub mod error;
pub mod model;
pub mod numerics;
pub mod objective;
pub mod textfeat;
pub mod trainer;

pub use config::{FeaturizerMode, TrainConfig, Variant};
pub use error::{CedError, Result};
pub use model::CedModel;
