//! JSON-lines annotation files.
//!
//! The first non-blank line is a header, `{"schema": "gaze-annotations", "version": 1}`.
//! Every following non-blank line is one [`GazeAnnotationRecord`]. Field mapping from a
//! GazeFollow-style table: `path → image`, `bbox → head_box` (normalized `x, y, w, h`),
//! `eye/head position → head_center`, `gaze_x/gaze_y → gaze` (one point per annotator).

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const ANNOTATION_SCHEMA: &str = "gaze-annotations";
pub const ANNOTATION_VERSION: u32 = 1;

/// Slack allowed when checking that the head box lies inside the image.
const BOX_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    schema: String,
    version: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GazeAnnotationRecord {
    /// Image path, relative to the annotation file's directory.
    pub image: String,
    pub width: u32,
    pub height: u32,
    /// Normalized `[x, y, w, h]`.
    pub head_box: [f64; 4],
    pub head_center: [f64; 2],
    pub gaze: Vec<[f64; 2]>,
    pub split: Split,
}

impl GazeAnnotationRecord {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.image.is_empty() {
            return Err("empty image path".into());
        }
        if self.width == 0 || self.height == 0 {
            return Err(format!("image extents {}x{} must be positive", self.width, self.height));
        }
        let [x, y, w, h] = self.head_box;
        if !self.head_box.iter().all(|v| v.is_finite()) {
            return Err("head_box must be finite".into());
        }
        if w <= 0.0 || h <= 0.0 {
            return Err(format!("head_box has non-positive size {w}x{h}"));
        }
        if x < -BOX_TOLERANCE || y < -BOX_TOLERANCE || x + w > 1.0 + BOX_TOLERANCE || y + h > 1.0 + BOX_TOLERANCE {
            return Err(format!("head_box {:?} extends outside the image", self.head_box));
        }
        check_point("head_center", self.head_center)?;
        if self.gaze.is_empty() {
            return Err("at least one gaze point is required".into());
        }
        if self.split == Split::Train && self.gaze.len() != 1 {
            return Err(format!("training records carry one gaze point, got {}", self.gaze.len()));
        }
        for &g in &self.gaze {
            check_point("gaze", g)?;
        }
        Ok(())
    }
}

fn check_point(what: &str, [x, y]: [f64; 2]) -> std::result::Result<(), String> {
    if !(0.0..=1.0).contains(&x) || !(0.0..=1.0).contains(&y) {
        return Err(format!("{what} ({x}, {y}) is outside [0, 1]²"));
    }
    Ok(())
}

/// Parse annotation lines. `origin` labels errors.
pub fn parse_annotations<R: BufRead>(input: R, origin: &str) -> Result<Vec<GazeAnnotationRecord>> {
    let err = |line: usize, message: String| Error::Parse {
        path: origin.to_string(),
        line,
        message,
    };
    let mut records = Vec::new();
    let mut seen_header = false;
    for (idx, line) in input.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| err(lineno, e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        if !seen_header {
            let header: Header = serde_json::from_str(&line).map_err(|e| err(lineno, format!("bad header: {e}")))?;
            if header.schema != ANNOTATION_SCHEMA {
                return Err(err(lineno, format!("unknown schema `{}`", header.schema)));
            }
            if header.version != ANNOTATION_VERSION {
                return Err(err(lineno, format!("unsupported schema version {}", header.version)));
            }
            seen_header = true;
            continue;
        }
        let rec: GazeAnnotationRecord = serde_json::from_str(&line).map_err(|e| err(lineno, e.to_string()))?;
        rec.validate().map_err(|m| err(lineno, m))?;
        records.push(rec);
    }
    Ok(records)
}

pub fn load_annotations(path: &Path) -> Result<Vec<GazeAnnotationRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_annotations(std::io::BufReader::new(file), &path.display().to_string())
}

pub fn write_annotations<W: Write>(mut out: W, records: &[GazeAnnotationRecord]) -> Result<()> {
    let header = Header {
        schema: ANNOTATION_SCHEMA.to_string(),
        version: ANNOTATION_VERSION,
    };
    let io = |e| Error::io("<annotations>", e);
    writeln!(out, "{}", serde_json::to_string(&header)?).map_err(io)?;
    for r in records {
        writeln!(out, "{}", serde_json::to_string(r)?).map_err(io)?;
    }
    Ok(())
}

pub fn save_annotations(path: &Path, records: &[GazeAnnotationRecord]) -> Result<()> {
    let mut buf = Vec::new();
    write_annotations(&mut buf, records)?;
    crate::params::write_atomic(path, &buf)
}
