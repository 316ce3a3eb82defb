use super::net::GazeNet;
use crate::data::GazeSample;
use crate::error::Result;
use crate::field::NormalizedPoint;
use crate::heatmap::{decode_argmax, encode_gt, Heatmap};
use crate::metrics::{MetricReport, SampleMetrics};

const EVAL_BATCH: usize = 64;

/// Source of predicted heatmaps.
#[derive(Debug, Clone, Copy)]
pub enum Predictor<'a> {
    Model(&'a GazeNet),
    /// Ground-truth heatmaps encoded at the mean annotation.
    Oracle { resolution: usize, sigma: f64 },
    /// A heatmap peaked at the image center.
    Center { resolution: usize, sigma: f64 },
}

pub fn predict_heatmaps(predictor: Predictor<'_>, samples: &[GazeSample]) -> Result<Vec<Heatmap>> {
    match predictor {
        Predictor::Model(net) => {
            let mut out = Vec::with_capacity(samples.len());
            for chunk in samples.chunks(EVAL_BATCH) {
                let refs: Vec<&GazeSample> = chunk.iter().collect();
                out.extend(net.predict(&refs)?.into_iter().map(|(_, h)| h));
            }
            Ok(out)
        }
        Predictor::Oracle { resolution, sigma } => samples
            .iter()
            .map(|s| encode_gt(s.mean_gaze(), resolution, resolution, sigma))
            .collect(),
        Predictor::Center { resolution, sigma } => {
            let h = encode_gt(NormalizedPoint { x: 0.5, y: 0.5 }, resolution, resolution, sigma)?;
            Ok(vec![h; samples.len()])
        }
    }
}

/// Score predicted heatmaps against every sample's annotations.
pub fn evaluate(predictor: Predictor<'_>, samples: &[GazeSample], thresholds: &[f64]) -> Result<MetricReport> {
    let maps = predict_heatmaps(predictor, samples)?;
    let per_sample = samples
        .iter()
        .zip(&maps)
        .enumerate()
        .map(|(i, (s, h))| SampleMetrics::compute(i, s.id.clone(), h, decode_argmax(h), &s.ground_truth()))
        .collect::<Result<Vec<_>>>()?;
    MetricReport::from_samples(per_sample, thresholds)
}
