//! The two-pathway network, its losses and the staged training schedule.

mod config;
mod eval;
mod net;
mod train;

pub use config::{DirectionPathwayConfig, HeatmapPathwayConfig, ModelConfig, TrainConfig};
pub use eval::{evaluate, predict_heatmaps, Predictor};
pub use net::{Batch, GazeNet, NetworkSpec, Outputs, DIRECTION_PREFIX, HEATMAP_PREFIX};
pub use train::{
    direction_loss, heatmap_loss, supervision_paths, total_loss, train_staged, EpochRecord, Stage, TrainingLog,
};
