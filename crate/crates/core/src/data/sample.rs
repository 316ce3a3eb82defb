use serde::{Deserialize, Serialize};

use super::annotation::GazeAnnotationRecord;
use super::raster::Raster;
use crate::error::{Error, Result};
use crate::field::{ray_direction, Direction, NormalizedPoint};
use crate::metrics::GroundTruthSet;
use crate::tensor::Tensor;

/// Network input resolutions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputShape {
    pub scene: usize,
    pub crop: usize,
}

/// One person in one image, ready for the network.
#[derive(Debug, Clone, PartialEq)]
pub struct GazeSample {
    pub id: String,
    /// `[3, scene, scene]`
    pub scene: Tensor,
    /// `[3, crop, crop]`
    pub head_crop: Tensor,
    pub head: NormalizedPoint,
    pub gaze: Vec<NormalizedPoint>,
    /// Unit vector from the head to the mean gaze point.
    pub direction: Direction,
}

impl GazeSample {
    pub fn ground_truth(&self) -> GroundTruthSet {
        GroundTruthSet {
            head: self.head,
            annotations: self.gaze.clone(),
        }
    }

    pub fn mean_gaze(&self) -> NormalizedPoint {
        NormalizedPoint::mean(&self.gaze).expect("samples carry at least one gaze point")
    }
}

/// Build a network sample from an annotation and its decoded image.
///
/// Returns `Ok(None)` when the mean gaze point coincides with the head center, since the
/// gaze direction is undefined there.
pub fn make_sample(record: &GazeAnnotationRecord, image: &Raster, shape: InputShape) -> Result<Option<GazeSample>> {
    record.validate().map_err(|m| Error::invalid(format!("{}: {m}", record.image)))?;
    let [_, _, bw, bh] = record.head_box;
    // a box narrower than one source pixel carries no head image
    if bw * image.width as f64 <= 1.0 || bh * image.height as f64 <= 1.0 {
        return Err(Error::invalid(format!("{}: degenerate head box {:?}", record.image, record.head_box)));
    }
    let head = NormalizedPoint::new(record.head_center[0], record.head_center[1])?;
    let gaze = record
        .gaze
        .iter()
        .map(|&[x, y]| NormalizedPoint::new(x, y))
        .collect::<Result<Vec<_>>>()?;
    let mean = NormalizedPoint::mean(&gaze).expect("validated non-empty");
    let Some(direction) = ray_direction(head, mean).normalized() else {
        log::warn!("{}: gaze point equals head center, sample skipped", record.image);
        return Ok(None);
    };
    let scene = image.resize(shape.scene, shape.scene)?.to_tensor();
    let head_crop = image.resample(record.head_box, shape.crop, shape.crop)?.to_tensor();
    Ok(Some(GazeSample {
        id: record.image.clone(),
        scene,
        head_crop,
        head,
        gaze,
        direction,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::annotation::Split;

    fn record(gaze: [f64; 2], head_box: [f64; 4]) -> GazeAnnotationRecord {
        GazeAnnotationRecord {
            image: "x.png".into(),
            width: 12,
            height: 12,
            head_box,
            head_center: [head_box[0] + head_box[2] / 2.0, head_box[1] + head_box[3] / 2.0],
            gaze: vec![gaze],
            split: Split::Train,
        }
    }

    fn image() -> Raster {
        let data = (0..3 * 12 * 12).map(|i| ((i * 7919) % 101) as f64 / 100.0).collect();
        Raster::new(12, 12, data).unwrap()
    }

    #[test]
    fn full_image_box_crop_equals_resized_scene() {
        let shape = InputShape { scene: 8, crop: 8 };
        let s = make_sample(&record([0.9, 0.1], [0.0, 0.0, 1.0, 1.0]), &image(), shape)
            .unwrap()
            .unwrap();
        assert_eq!(s.head_crop, s.scene);
        assert_eq!(s.scene.shape(), &[3, 8, 8]);
        assert!((s.direction.norm() - 1.0).abs() < 1e-12);
        assert!(s.direction.dx > 0.0 && s.direction.dy < 0.0);
    }

    #[test]
    fn gaze_on_head_center_is_skipped() {
        let shape = InputShape { scene: 8, crop: 4 };
        let r = record([0.5, 0.5], [0.25, 0.25, 0.5, 0.5]);
        assert!(make_sample(&r, &image(), shape).unwrap().is_none());
    }

    #[test]
    fn degenerate_box_is_an_error() {
        let shape = InputShape { scene: 8, crop: 4 };
        let r = record([0.9, 0.9], [0.2, 0.2, 0.01, 0.3]);
        assert!(make_sample(&r, &image(), shape).is_err());
    }
}
