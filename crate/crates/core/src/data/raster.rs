use std::path::Path;

use image::RgbImage;

use crate::error::{Error, Result};
use crate::grid_csv;
use crate::tensor::Tensor;

/// Three-channel planar image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    /// `[3, height, width]`, row-major per channel.
    pub data: Vec<f64>,
}

impl Raster {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != 3 * width * height {
            return Err(Error::invalid(format!(
                "{width}x{height} RGB raster cannot hold {} values",
                data.len()
            )));
        }
        Ok(Raster { width, height, data })
    }

    pub fn constant(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        let plane = width * height;
        let data = rgb.iter().flat_map(|&v| std::iter::repeat(v).take(plane)).collect();
        Raster { width, height, data }
    }

    pub fn from_rgb8(img: &RgbImage) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut data = vec![0.0; 3 * w * h];
        for (x, y, px) in img.enumerate_pixels() {
            for c in 0..3 {
                data[c * w * h + y as usize * w + x as usize] = f64::from(px[c]) / 255.0;
            }
        }
        Raster { width: w, height: h, data }
    }

    pub fn to_rgb8(&self) -> RgbImage {
        let plane = self.width * self.height;
        RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let i = y as usize * self.width + x as usize;
            image::Rgb(std::array::from_fn(|c| quantize(self.data[c * plane + i])))
        })
    }

    fn at(&self, c: usize, x: usize, y: usize) -> f64 {
        self.data[c * self.width * self.height + y * self.width + x]
    }

    /// Bilinear resampling of the normalized box `[x, y, w, h]` onto an `out_w × out_h` grid.
    /// Output cell centers map to source coordinates; samples beyond the border clamp.
    pub fn resample(&self, region: [f64; 4], out_w: usize, out_h: usize) -> Result<Raster> {
        let [bx, by, bw, bh] = region;
        if out_w == 0 || out_h == 0 || !(bw > 0.0 && bh > 0.0) {
            return Err(Error::invalid(format!("degenerate resample region {region:?} -> {out_w}x{out_h}")));
        }
        let (sw, sh) = (self.width as f64, self.height as f64);
        let mut data = vec![0.0; 3 * out_w * out_h];
        for j in 0..out_h {
            let sy = (by + (j as f64 + 0.5) / out_h as f64 * bh) * sh - 0.5;
            let (y0, y1, fy) = taps(sy, self.height);
            for i in 0..out_w {
                let sx = (bx + (i as f64 + 0.5) / out_w as f64 * bw) * sw - 0.5;
                let (x0, x1, fx) = taps(sx, self.width);
                for c in 0..3 {
                    let top = self.at(c, x0, y0) * (1.0 - fx) + self.at(c, x1, y0) * fx;
                    let bottom = self.at(c, x0, y1) * (1.0 - fx) + self.at(c, x1, y1) * fx;
                    data[c * out_w * out_h + j * out_w + i] = top * (1.0 - fy) + bottom * fy;
                }
            }
        }
        Raster::new(out_w, out_h, data)
    }

    pub fn resize(&self, out_w: usize, out_h: usize) -> Result<Raster> {
        if out_w == self.width && out_h == self.height {
            return Ok(self.clone());
        }
        self.resample([0.0, 0.0, 1.0, 1.0], out_w, out_h)
    }

    /// `[3, height, width]` tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![3, self.height, self.width], self.data.clone()).expect("raster shape")
    }
}

fn taps(s: f64, n: usize) -> (usize, usize, f64) {
    let max = (n - 1) as f64;
    let s = s.clamp(0.0, max);
    let lo = s.floor();
    let lo_i = lo as usize;
    let hi_i = (lo_i + 1).min(n - 1);
    (lo_i, hi_i, s - lo)
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Load a PNG (any color type, converted to RGB) or a `.csv` grayscale grid with values in `[0, 1]`.
pub fn load_raster(path: &Path) -> Result<Raster> {
    let is_csv = path
        .extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    if is_csv {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let grid = grid_csv::read_grid(std::io::BufReader::new(file), &path.display().to_string())?;
        raster_from_grid(&grid)
    } else {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        decode_png(&bytes)
    }
}

pub fn decode_png(bytes: &[u8]) -> Result<Raster> {
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)?;
    Ok(Raster::from_rgb8(&img.to_rgb8()))
}

/// Grayscale grid replicated over the three channels.
pub fn raster_from_grid(grid: &grid_csv::Grid) -> Result<Raster> {
    if let Some(v) = grid.values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Range(format!("pixel value {v} outside [0, 1]")));
    }
    let data = grid.values.repeat(3);
    Raster::new(grid.width, grid.height, data)
}

pub fn save_png(raster: &Raster, path: &Path) -> Result<()> {
    let mut bytes = Vec::new();
    raster
        .to_rgb8()
        .write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resizing_a_constant_image_is_constant() {
        let r = Raster::constant(7, 5, [0.2, 0.5, 0.9]);
        for (w, h) in [(3, 3), (16, 11), (1, 1)] {
            let out = r.resize(w, h).unwrap();
            for c in 0..3 {
                let want = [0.2, 0.5, 0.9][c];
                assert!(out.data[c * w * h..(c + 1) * w * h].iter().all(|v| (v - want).abs() < 1e-15));
            }
        }
    }

    #[test]
    fn same_size_resample_is_exact() {
        let data: Vec<f64> = (0..3 * 4 * 3).map(|i| (i as f64 * 0.37).sin().abs()).collect();
        let r = Raster::new(4, 3, data).unwrap();
        let out = r.resample([0.0, 0.0, 1.0, 1.0], 4, 3).unwrap();
        for (a, b) in out.data.iter().zip(&r.data) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn png_round_trip_of_quantized_values() {
        let data: Vec<f64> = (0..3 * 6 * 4).map(|i| (i % 256) as f64 / 255.0).collect();
        let r = Raster::new(6, 4, data).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        save_png(&r, &path).unwrap();
        assert_eq!(load_raster(&path).unwrap(), r);
    }

    #[test]
    fn csv_images_are_gray() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.csv");
        std::fs::write(&path, "0,0.5\n1,0.25\n").unwrap();
        let r = load_raster(&path).unwrap();
        assert_eq!((r.width, r.height), (2, 2));
        assert_eq!(&r.data[4..8], &[0.0, 0.5, 1.0, 0.25]);
        std::fs::write(&path, "0,1.5\n").unwrap();
        assert!(load_raster(&path).is_err());
    }
}
