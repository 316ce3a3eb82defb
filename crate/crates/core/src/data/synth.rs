//! Procedural gaze scenes.
//!
//! Each scene holds `objects` soft intensity blobs on a noisy background and one head: a
//! disc carrying a bright wedge that points along the true gaze direction. The gaze point
//! is the blob whose bearing from the head is angularly closest to the wedge, provided it
//! lies within `tolerance_deg`. One blob is always placed near the wedge axis so such a
//! blob exists; scenes that still fail are redrawn up to `max_retries` times.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::annotation::{GazeAnnotationRecord, Split};
use super::raster::Raster;
use super::sample::{make_sample, GazeSample, InputShape};
use crate::error::{Error, Result};
use crate::field::{ray_direction, Direction, NormalizedPoint};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSceneSpec {
    pub resolution: usize,
    pub noise_amplitude: f64,
    pub objects: usize,
    pub blob_radius: [f64; 2],
    /// Side of the square head box, normalized.
    pub head_size: f64,
    pub wedge_half_angle_deg: f64,
    pub tolerance_deg: f64,
    /// Largest bearing offset of the guaranteed blob from the wedge axis.
    pub axis_jitter_deg: f64,
    pub min_gaze_distance: f64,
    /// Blob centers stay this far from the image border.
    pub margin: f64,
    pub seed: u64,
    pub max_retries: usize,
}

impl Default for SyntheticSceneSpec {
    fn default() -> Self {
        SyntheticSceneSpec {
            resolution: 64,
            noise_amplitude: 0.08,
            objects: 3,
            blob_radius: [0.03, 0.05],
            head_size: 0.2,
            wedge_half_angle_deg: 25.0,
            tolerance_deg: 15.0,
            axis_jitter_deg: 5.0,
            min_gaze_distance: 0.25,
            margin: 0.06,
            seed: 0,
            max_retries: 1000,
        }
    }
}

impl SyntheticSceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::invalid(format!("synthetic scene: {m}")));
        if self.objects == 0 {
            return bad("at least one object is required");
        }
        if self.resolution < 8 {
            return bad("resolution must be at least 8");
        }
        if !(self.blob_radius[0] > 0.0 && self.blob_radius[0] <= self.blob_radius[1]) {
            return bad("blob_radius must be an increasing positive range");
        }
        if !(self.head_size > 0.0 && self.head_size < 0.5) {
            return bad("head_size must lie in (0, 0.5)");
        }
        if !(self.tolerance_deg > 0.0 && self.axis_jitter_deg >= 0.0 && self.axis_jitter_deg <= self.tolerance_deg) {
            return bad("need 0 <= axis_jitter_deg <= tolerance_deg and tolerance_deg > 0");
        }
        if !(self.margin >= 0.0 && self.margin < 0.25) {
            return bad("margin must lie in [0, 0.25)");
        }
        if !(self.min_gaze_distance > 0.0 && self.min_gaze_distance < 0.8) {
            return bad("min_gaze_distance must lie in (0, 0.8)");
        }
        if !(0.0..=0.5).contains(&self.noise_amplitude) {
            return bad("noise_amplitude must lie in [0, 0.5]");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Blob {
    pub center: NormalizedPoint,
    pub radius: f64,
}

/// A generated scene before it is turned into a network sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub index: u64,
    pub head: NormalizedPoint,
    /// Orientation of the wedge: the true gaze direction.
    pub wedge: Direction,
    pub blobs: Vec<Blob>,
    pub gaze: NormalizedPoint,
    pub image: Raster,
    pub record: GazeAnnotationRecord,
}

fn stream_id(split: Split, index: u64) -> u64 {
    let tag = match split {
        Split::Train => 0,
        Split::Test => 1,
    };
    (tag << 48) | index
}

fn rng_for(spec: &SyntheticSceneSpec, split: Split, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(stream_id(split, index));
    rng
}

/// Largest `t` with `origin + t·dir` inside `[lo, hi]²`.
fn ray_extent(origin: NormalizedPoint, dir: Direction, lo: f64, hi: f64) -> f64 {
    let axis = |p: f64, d: f64| {
        if d > 0.0 {
            (hi - p) / d
        } else if d < 0.0 {
            (lo - p) / d
        } else {
            f64::INFINITY
        }
    };
    axis(origin.x, dir.dx).min(axis(origin.y, dir.dy)).max(0.0)
}

/// Angular deviation in radians between the bearing of `p` from `head` and `dir`.
fn deviation(head: NormalizedPoint, p: NormalizedPoint, dir: Direction) -> f64 {
    ray_direction(head, p).angle_to(&dir).unwrap_or(std::f64::consts::PI)
}

/// Pick the gaze blob: smallest deviation from the wedge, within tolerance.
pub fn select_gaze(head: NormalizedPoint, wedge: Direction, blobs: &[Blob], tolerance_rad: f64) -> Option<NormalizedPoint> {
    blobs
        .iter()
        .map(|b| (deviation(head, b.center, wedge), b.center))
        .filter(|(d, _)| *d <= tolerance_rad)
        .min_by(|a, b| a.0.total_cmp(&b.0))
        .map(|(_, c)| c)
}

/// Generate scene `index` of `split`. The same `(spec, split, index)` always yields the same scene.
pub fn generate_scene(spec: &SyntheticSceneSpec, split: Split, index: u64) -> Result<SyntheticScene> {
    spec.validate()?;
    let mut rng = rng_for(spec, split, index);
    let theta = rng.gen_range(0.0..std::f64::consts::TAU);
    let wedge = Direction::from_angle(theta);
    let tol = spec.tolerance_deg.to_radians();
    let jitter = spec.axis_jitter_deg.to_radians();
    let (lo, hi) = (spec.margin, 1.0 - spec.margin);
    let half = spec.head_size / 2.0;
    let head_lo = half.max(spec.margin);

    for _ in 0..spec.max_retries {
        let head = NormalizedPoint {
            x: rng.gen_range(head_lo..1.0 - head_lo),
            y: rng.gen_range(head_lo..1.0 - head_lo),
        };
        let offset = if jitter > 0.0 { rng.gen_range(-jitter..=jitter) } else { 0.0 };
        let bearing = Direction::from_angle(theta + offset);
        let reach = ray_extent(head, bearing, lo, hi);
        if reach < spec.min_gaze_distance {
            continue;
        }
        let t = rng.gen_range(spec.min_gaze_distance..=reach);
        let radius = |rng: &mut ChaCha8Rng| rng.gen_range(spec.blob_radius[0]..=spec.blob_radius[1]);
        let mut blobs = vec![Blob {
            center: NormalizedPoint {
                x: (head.x + t * bearing.dx).clamp(lo, hi),
                y: (head.y + t * bearing.dy).clamp(lo, hi),
            },
            radius: radius(&mut rng),
        }];

        let min_sep = 2.5 * spec.blob_radius[1];
        let clear_of_head = half + spec.blob_radius[1];
        let mut placed = true;
        for _ in 1..spec.objects {
            let mut ok = false;
            for _ in 0..100 {
                let c = NormalizedPoint {
                    x: rng.gen_range(lo..=hi),
                    y: rng.gen_range(lo..=hi),
                };
                if c.distance(&head) >= clear_of_head && blobs.iter().all(|b| b.center.distance(&c) >= min_sep) {
                    blobs.push(Blob {
                        center: c,
                        radius: radius(&mut rng),
                    });
                    ok = true;
                    break;
                }
            }
            if !ok {
                placed = false;
                break;
            }
        }
        if !placed {
            continue;
        }
        let Some(gaze) = select_gaze(head, wedge, &blobs, tol) else {
            continue;
        };
        let image = render(spec, head, wedge, &blobs, &mut rng);
        let record = GazeAnnotationRecord {
            image: format!("images/{}_{index:06}.png", split_name(split)),
            width: spec.resolution as u32,
            height: spec.resolution as u32,
            head_box: [head.x - half, head.y - half, spec.head_size, spec.head_size],
            head_center: [head.x, head.y],
            gaze: vec![[gaze.x, gaze.y]],
            split,
        };
        return Ok(SyntheticScene {
            index,
            head,
            wedge,
            blobs,
            gaze,
            image,
            record,
        });
    }
    Err(Error::invalid(format!(
        "could not place a valid scene for {} #{index} within {} attempts",
        split_name(split),
        spec.max_retries
    )))
}

pub(crate) fn split_name(split: Split) -> &'static str {
    match split {
        Split::Train => "train",
        Split::Test => "test",
    }
}

fn render(spec: &SyntheticSceneSpec, head: NormalizedPoint, wedge: Direction, blobs: &[Blob], rng: &mut ChaCha8Rng) -> Raster {
    let n = spec.resolution;
    let plane = n * n;
    let mut data = vec![0.0; 3 * plane];
    let head_radius = 0.45 * spec.head_size;
    let cos_half = spec.wedge_half_angle_deg.to_radians().cos();
    for py in 0..n {
        for px in 0..n {
            let p = NormalizedPoint {
                x: (px as f64 + 0.5) / n as f64,
                y: (py as f64 + 0.5) / n as f64,
            };
            let mut rgb = [0.15; 3];
            for v in rgb.iter_mut() {
                *v += spec.noise_amplitude * rng.gen_range(-1.0..=1.0);
            }
            for b in blobs {
                let d2 = (p.x - b.center.x).powi(2) + (p.y - b.center.y).powi(2);
                let k = (-d2 / (2.0 * b.radius * b.radius)).exp();
                rgb[0] += 0.2 * k;
                rgb[1] += 0.8 * k;
                rgb[2] += 0.5 * k;
            }
            let g = ray_direction(head, p);
            let r = g.norm();
            if r <= head_radius {
                rgb = [0.55, 0.35, 0.3];
                if r > 0.0 && g.dot(&wedge) / r >= cos_half {
                    rgb = [1.0, 1.0, 1.0];
                }
            }
            for c in 0..3 {
                // quantize now so in-memory samples match what a PNG round trip gives
                data[c * plane + py * n + px] = (rgb[c].clamp(0.0, 1.0) * 255.0).round() / 255.0;
            }
        }
    }
    Raster::new(n, n, data).expect("render shape")
}

/// Scenes `0..n` of `split`.
pub fn generate_scenes(spec: &SyntheticSceneSpec, split: Split, n: usize) -> Result<Vec<SyntheticScene>> {
    (0..n as u64).map(|i| generate_scene(spec, split, i)).collect()
}

/// Network samples for scenes `0..n` of `split`.
pub fn generate_synthetic(spec: &SyntheticSceneSpec, split: Split, n: usize, shape: InputShape) -> Result<Vec<GazeSample>> {
    let mut out = Vec::with_capacity(n);
    for i in 0..n as u64 {
        let scene = generate_scene(spec, split, i)?;
        let sample = make_sample(&scene.record, &scene.image, shape)?
            .ok_or_else(|| Error::invalid(format!("synthetic scene #{i} has gaze on the head")))?;
        out.push(sample);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::field_value;

    #[test]
    fn single_blob_on_axis_is_the_gaze_point() {
        let spec = SyntheticSceneSpec {
            objects: 1,
            axis_jitter_deg: 0.0,
            seed: 11,
            ..Default::default()
        };
        for i in 0..20 {
            let s = generate_scene(&spec, Split::Train, i).unwrap();
            assert_eq!(s.blobs.len(), 1);
            assert_eq!(s.gaze, s.blobs[0].center);
            let dev = deviation(s.head, s.gaze, s.wedge);
            assert!(dev < 1e-9, "deviation {dev}");
        }
    }

    #[test]
    fn same_seed_is_bit_identical_and_splits_differ() {
        let spec = SyntheticSceneSpec {
            seed: 5,
            ..Default::default()
        };
        let a = generate_scenes(&spec, Split::Train, 4).unwrap();
        let b = generate_scenes(&spec, Split::Train, 4).unwrap();
        assert_eq!(a, b);
        let t = generate_scenes(&spec, Split::Test, 4).unwrap();
        assert_ne!(a[0].image, t[0].image);
    }

    #[test]
    fn gaze_lies_in_the_cone_and_inside_the_image() {
        let spec = SyntheticSceneSpec {
            seed: 3,
            objects: 5,
            ..Default::default()
        };
        let tol = spec.tolerance_deg.to_radians();
        for s in generate_scenes(&spec, Split::Test, 50).unwrap() {
            assert!(field_value(s.head, s.gaze, s.wedge).unwrap() >= tol.cos() - 1e-12);
            assert!(s.gaze.in_unit_square() && s.head.in_unit_square());
            s.record.validate().unwrap();
        }
    }

    #[test]
    fn selection_prefers_smallest_deviation() {
        let head = NormalizedPoint { x: 0.5, y: 0.5 };
        let wedge = Direction::new(1.0, 0.0);
        let near_axis = NormalizedPoint { x: 0.9, y: 0.52 };
        let off_axis = NormalizedPoint { x: 0.7, y: 0.55 };
        let behind = NormalizedPoint { x: 0.1, y: 0.5 };
        let blobs: Vec<Blob> = [off_axis, near_axis, behind]
            .into_iter()
            .map(|center| Blob { center, radius: 0.03 })
            .collect();
        assert_eq!(select_gaze(head, wedge, &blobs, 0.3), Some(near_axis));
        assert_eq!(select_gaze(head, wedge, &blobs[2..], 0.3), None);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let spec = SyntheticSceneSpec {
            objects: 0,
            ..Default::default()
        };
        assert!(generate_scene(&spec, Split::Train, 0).is_err());
        let spec = SyntheticSceneSpec {
            axis_jitter_deg: 30.0,
            ..Default::default()
        };
        assert!(spec.validate().is_err());
    }
}
