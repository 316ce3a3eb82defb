//! Plain-text grids: `#`-prefixed comment lines, then one comma-separated row per grid row.

use std::io::{BufRead, Write};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub width: usize,
    pub height: usize,
    pub comments: Vec<String>,
    /// Row-major values.
    pub values: Vec<f64>,
}

pub fn write_grid<W: Write>(mut out: W, comments: &[String], width: usize, values: &[f64]) -> std::io::Result<()> {
    for c in comments {
        writeln!(out, "# {c}")?;
    }
    for row in values.chunks(width) {
        let line: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        writeln!(out, "{}", line.join(","))?;
    }
    Ok(())
}

/// Parse a grid. `origin` is used in error messages only.
pub fn read_grid<R: BufRead>(input: R, origin: &str) -> Result<Grid> {
    let mut comments = Vec::new();
    let mut values = Vec::new();
    let mut width = None;
    let mut height = 0;
    for (idx, line) in input.lines().enumerate() {
        let line = line.map_err(|e| Error::Parse {
            path: origin.to_string(),
            line: idx + 1,
            message: e.to_string(),
        })?;
        let trimmed = line.trim();
        if let Some(c) = trimmed.strip_prefix('#') {
            comments.push(c.trim().to_string());
            continue;
        }
        if trimmed.is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: origin.to_string(),
            line: idx + 1,
            message,
        };
        let row = trimmed
            .split(',')
            .map(|f| {
                let v: f64 = f.trim().parse().map_err(|_| parse_err(format!("bad number `{}`", f.trim())))?;
                if !v.is_finite() {
                    return Err(parse_err(format!("non-finite value `{}`", f.trim())));
                }
                Ok(v)
            })
            .collect::<Result<Vec<f64>>>()?;
        match width {
            None => width = Some(row.len()),
            Some(w) if w != row.len() => {
                return Err(parse_err(format!("row has {} values, expected {w}", row.len())));
            }
            _ => {}
        }
        values.extend(row);
        height += 1;
    }
    let width = width.ok_or_else(|| Error::Format(format!("{origin}: grid has no rows")))?;
    Ok(Grid {
        width,
        height,
        comments,
        values,
    })
}
