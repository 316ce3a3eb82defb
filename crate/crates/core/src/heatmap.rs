//! Gaussian ground-truth heatmaps and argmax decoding.

use crate::error::{Error, Result};
use crate::field::{cell_center, NormalizedPoint};

/// Kernel width, in cells, used at the 56×56 reference resolution.
pub const DEFAULT_SIGMA: f64 = 3.0;

#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub width: usize,
    pub height: usize,
    /// Row-major `height × width`.
    pub values: Vec<f64>,
}

impl Heatmap {
    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || values.len() != width * height {
            return Err(Error::invalid(format!(
                "heatmap {width}x{height} cannot hold {} values",
                values.len()
            )));
        }
        Ok(Heatmap { width, height, values })
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    /// Index of the cell containing `p`; points on the far edge belong to the last cell.
    pub fn cell_of(&self, p: NormalizedPoint) -> (usize, usize) {
        let col = ((p.x * self.width as f64).floor() as usize).min(self.width - 1);
        let row = ((p.y * self.height as f64).floor() as usize).min(self.height - 1);
        (row, col)
    }
}

/// Peak height of the unnormalized kernel, `1 / (√(2π) σ)`.
pub fn gaussian_peak(sigma: f64) -> f64 {
    1.0 / ((2.0 * std::f64::consts::PI).sqrt() * sigma)
}

/// Ground-truth map with a Gaussian of width `sigma` cells centered on `gaze`.
///
/// The gaze point maps to continuous cell coordinates `(x·W - 0.5, y·H - 0.5)` so that
/// cell centers line up with the direction-field sampling grid. The kernel is not
/// renormalized: its peak is `1 / (√(2π) σ)`.
pub fn encode_gt(gaze: NormalizedPoint, width: usize, height: usize, sigma: f64) -> Result<Heatmap> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::invalid(format!("sigma must be positive, got {sigma}")));
    }
    if !gaze.in_unit_square() {
        return Err(Error::Range(format!("gaze point ({}, {}) outside the image", gaze.x, gaze.y)));
    }
    if width == 0 || height == 0 {
        return Err(Error::invalid("heatmap extents must be positive"));
    }
    let gx = gaze.x * width as f64 - 0.5;
    let gy = gaze.y * height as f64 - 0.5;
    let peak = gaussian_peak(sigma);
    let denom = 2.0 * sigma * sigma;
    let mut values = Vec::with_capacity(width * height);
    for row in 0..height {
        for col in 0..width {
            let d2 = (col as f64 - gx).powi(2) + (row as f64 - gy).powi(2);
            values.push(peak * (-d2 / denom).exp());
        }
    }
    Heatmap::new(width, height, values)
}

/// Center of the maximal cell. Ties go to the smallest `(row, col)`; NaNs are ignored.
pub fn decode_argmax(h: &Heatmap) -> NormalizedPoint {
    let mut best = 0;
    let mut best_val = f64::NEG_INFINITY;
    for (i, &v) in h.values.iter().enumerate() {
        if v > best_val {
            best = i;
            best_val = v;
        }
    }
    cell_center(best / h.width, best % h.width, h.width, h.height)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pt(x: f64, y: f64) -> NormalizedPoint {
        NormalizedPoint { x, y }
    }

    #[test]
    fn peak_and_three_sigma_ring() {
        // gaze exactly on the center of cell (10, 20) of a 56 grid
        let g = cell_center(10, 20, 56, 56);
        let h = encode_gt(g, 56, 56, 3.0).unwrap();
        assert!((h.get(10, 20) - 1.0 / ((2.0 * std::f64::consts::PI).sqrt() * 3.0)).abs() < 1e-15);
        assert!((h.get(10, 20) - 0.132981).abs() < 1e-6);
        assert!((h.get(10, 23) - 0.080657).abs() < 1e-6);
        assert!((h.get(13, 20) - h.get(10, 23)).abs() < 1e-15);
        assert!(h.values.iter().all(|&v| v >= 0.0 && v <= gaussian_peak(3.0)));
    }

    #[test]
    fn encode_rejects_bad_input() {
        assert!(encode_gt(pt(1.2, 0.5), 8, 8, 3.0).is_err());
        assert!(encode_gt(pt(0.5, 0.5), 8, 8, 0.0).is_err());
        assert!(encode_gt(pt(0.5, 0.5), 0, 8, 1.0).is_err());
    }

    #[test]
    fn argmax_tie_break_and_uniform_map() {
        let h = Heatmap::new(4, 3, vec![0.5; 12]).unwrap();
        assert_eq!(decode_argmax(&h), cell_center(0, 0, 4, 3));
        let mut v = vec![0.0; 12];
        v[6] = 1.0;
        v[9] = 1.0;
        let h = Heatmap::new(4, 3, v).unwrap();
        assert_eq!(decode_argmax(&h), cell_center(1, 2, 4, 3));
    }

    #[test]
    fn round_trip_recovers_cell() {
        let g = pt(0.3141, 0.7777);
        let h = encode_gt(g, 56, 56, 3.0).unwrap();
        let p = decode_argmax(&h);
        assert_eq!(h.cell_of(p), h.cell_of(g));
        assert!(p.distance(&g) <= 2f64.sqrt() / (2.0 * 56.0) + 1e-12);
    }

    #[test]
    fn cell_of_clamps_far_edge() {
        let h = Heatmap::new(4, 4, vec![0.0; 16]).unwrap();
        assert_eq!(h.cell_of(pt(1.0, 1.0)), (3, 3));
        assert_eq!(h.cell_of(pt(0.0, 0.26)), (1, 0));
    }
}
