//! Data, masks, metrics, persistence, training and the ablation ladder.

pub mod ablation;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod imageio;
pub mod masks;
pub mod metrics;
pub mod optim;
pub mod pipeline;
pub mod train;
