//! Annotations, images and network samples.

pub mod annotation;
pub mod raster;
pub mod sample;
pub mod synth;

pub use annotation::{load_annotations, parse_annotations, save_annotations, GazeAnnotationRecord, Split};
pub use raster::{load_raster, Raster};
pub use sample::{make_sample, GazeSample, InputShape};
pub use synth::{generate_scene, generate_scenes, generate_synthetic, SyntheticScene, SyntheticSceneSpec};
