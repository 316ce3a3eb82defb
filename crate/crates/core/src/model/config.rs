use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::DEFAULT_GAMMAS;
use crate::heatmap::DEFAULT_SIGMA;

/// Head-crop encoder, position encoder and fusion head of the direction pathway.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DirectionPathwayConfig {
    /// Side of the square head crop.
    pub crop_resolution: usize,
    /// Output channels of the three 3×3 conv blocks.
    pub conv_channels: [usize; 3],
    pub conv_strides: [usize; 3],
    /// Width of the three fully connected position layers.
    pub position_width: usize,
    pub fusion_width: usize,
}

impl Default for DirectionPathwayConfig {
    fn default() -> Self {
        DirectionPathwayConfig {
            crop_resolution: 16,
            conv_channels: [16, 32, 32],
            conv_strides: [2, 1, 1],
            position_width: 16,
            fusion_width: 32,
        }
    }
}

impl DirectionPathwayConfig {
    pub fn full_scale() -> Self {
        DirectionPathwayConfig {
            crop_resolution: 224,
            conv_channels: [32, 64, 128],
            conv_strides: [2, 2, 2],
            position_width: 64,
            fusion_width: 128,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.crop_resolution < 4 {
            return Err(Error::invalid("crop_resolution must be at least 4"));
        }
        if self.conv_channels.contains(&0) || self.conv_strides.contains(&0) {
            return Err(Error::invalid("direction conv channels and strides must be positive"));
        }
        if self.position_width == 0 || self.fusion_width == 0 {
            return Err(Error::invalid("direction layer widths must be positive"));
        }
        Ok(())
    }
}

/// Encoder-decoder over the scene and the direction fields.
///
/// A patchifying stem maps the scene to heatmap resolution; each further encoder level
/// halves the grid, and each decoder level upsamples and merges the matching encoder
/// output through a skip connection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeatmapPathwayConfig {
    /// Channels per encoder level, finest first.
    pub channels: Vec<usize>,
}

impl Default for HeatmapPathwayConfig {
    fn default() -> Self {
        HeatmapPathwayConfig {
            channels: vec![16, 24, 32],
        }
    }
}

impl HeatmapPathwayConfig {
    pub fn full_scale() -> Self {
        HeatmapPathwayConfig {
            channels: vec![64, 128, 256],
        }
    }

    pub fn levels(&self) -> usize {
        self.channels.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.contains(&0) {
            return Err(Error::invalid("heatmap pathway needs at least one level of positive width"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub direction: DirectionPathwayConfig,
    pub heatmap: HeatmapPathwayConfig,
}

impl ModelConfig {
    pub fn full_scale() -> Self {
        ModelConfig {
            direction: DirectionPathwayConfig::full_scale(),
            heatmap: HeatmapPathwayConfig::full_scale(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Weight of the heatmap loss in the fine-tuning objective.
    pub lambda: f64,
    /// Gaussian width of target heatmaps, in cells.
    pub sigma: f64,
    pub gammas: Vec<f64>,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub finetune_epochs: usize,
    pub seed: u64,
    pub scene_resolution: usize,
    pub heatmap_resolution: usize,
    /// Supervise the direction pathway output directly during fine-tuning, and pretrain it.
    pub mid_layer_supervision: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 128,
            lr: 1e-4,
            weight_decay: 0.0005,
            lambda: 0.5,
            sigma: DEFAULT_SIGMA,
            gammas: DEFAULT_GAMMAS.to_vec(),
            stage1_epochs: 10,
            stage2_epochs: 10,
            finetune_epochs: 10,
            seed: 0,
            scene_resolution: 224,
            heatmap_resolution: 56,
            mid_layer_supervision: true,
        }
    }
}

impl TrainConfig {
    /// Settings that train the miniature network on a single core in about a minute.
    pub fn desk() -> Self {
        TrainConfig {
            batch_size: 32,
            lr: 2e-3,
            weight_decay: 0.0005,
            sigma: 1.0,
            stage1_epochs: 6,
            stage2_epochs: 4,
            finetune_epochs: 3,
            scene_resolution: 64,
            heatmap_resolution: 16,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(m));
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be non-negative, got {}", self.lambda));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return bad(format!("sigma must be positive, got {}", self.sigma));
        }
        if self.gammas.is_empty() || self.gammas.iter().any(|g| !(*g >= 1.0 && g.is_finite())) {
            return bad(format!("gammas must be a non-empty list of values >= 1, got {:?}", self.gammas));
        }
        if self.scene_resolution < 8 || self.heatmap_resolution < 8 {
            return bad("scene and heatmap resolutions must be at least 8".into());
        }
        if self.scene_resolution % self.heatmap_resolution != 0 {
            return bad(format!(
                "scene resolution {} is not a multiple of heatmap resolution {}",
                self.scene_resolution, self.heatmap_resolution
            ));
        }
        Ok(())
    }

    /// Check that `model` can run at these resolutions.
    pub fn check_model(&self, model: &ModelConfig) -> Result<()> {
        self.validate()?;
        model.direction.validate()?;
        model.heatmap.validate()?;
        let scale = 1usize << (model.heatmap.levels() - 1);
        if self.heatmap_resolution % scale != 0 {
            return Err(Error::invalid(format!(
                "heatmap resolution {} is not divisible by 2^{} for a {}-level pathway",
                self.heatmap_resolution,
                model.heatmap.levels() - 1,
                model.heatmap.levels()
            )));
        }
        Ok(())
    }
}
