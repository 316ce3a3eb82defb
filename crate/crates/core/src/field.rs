//! Gaze direction fields.
//!
//! For a head position `H`, a predicted direction `d` and an image point `P`, the field
//! value is `max(cos∠(P - H, d), 0)`, optionally sharpened by an exponent `γ ≥ 1`. Larger
//! exponents narrow the field-of-view cone. Grids are sampled at cell centers with `x`
//! growing rightward and `y` growing downward, both normalized to `[0, 1]`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Function, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Exponents of the default multi-scale stack, sharpest first.
pub const DEFAULT_GAMMAS: [f64; 3] = [5.0, 2.0, 1.0];

/// A point in image coordinates normalized so that width = height = 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizedPoint {
    pub x: f64,
    pub y: f64,
}

impl NormalizedPoint {
    pub fn new(x: f64, y: f64) -> Result<Self> {
        let p = NormalizedPoint { x, y };
        if !p.in_unit_square() {
            return Err(Error::Range(format!("({x}, {y}) is outside [0, 1]²")));
        }
        Ok(p)
    }

    pub fn in_unit_square(&self) -> bool {
        (0.0..=1.0).contains(&self.x) && (0.0..=1.0).contains(&self.y)
    }

    pub fn distance(&self, other: &NormalizedPoint) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    /// Arithmetic mean of a non-empty point set.
    pub fn mean(points: &[NormalizedPoint]) -> Option<NormalizedPoint> {
        if points.is_empty() {
            return None;
        }
        let n = points.len() as f64;
        Some(NormalizedPoint {
            x: points.iter().map(|p| p.x).sum::<f64>() / n,
            y: points.iter().map(|p| p.y).sum::<f64>() / n,
        })
    }
}

/// A 2-D direction; not necessarily unit length.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Direction {
    pub dx: f64,
    pub dy: f64,
}

impl Direction {
    pub fn new(dx: f64, dy: f64) -> Self {
        Direction { dx, dy }
    }

    pub fn from_angle(radians: f64) -> Self {
        Direction {
            dx: radians.cos(),
            dy: radians.sin(),
        }
    }

    pub fn norm(&self) -> f64 {
        self.dx.hypot(self.dy)
    }

    pub fn is_zero(&self) -> bool {
        self.dx == 0.0 && self.dy == 0.0
    }

    pub fn dot(&self, other: &Direction) -> f64 {
        self.dx * other.dx + self.dy * other.dy
    }

    /// Unit vector in the same orientation, or `None` for the zero vector.
    pub fn normalized(&self) -> Option<Direction> {
        let n = self.norm();
        (n > 0.0 && n.is_finite()).then(|| Direction {
            dx: self.dx / n,
            dy: self.dy / n,
        })
    }

    /// Angle in radians, `atan2(dy, dx)`.
    pub fn angle(&self) -> f64 {
        self.dy.atan2(self.dx)
    }

    /// Unsigned angle to `other` in radians, in `[0, π]`; `None` if either is zero.
    pub fn angle_to(&self, other: &Direction) -> Option<f64> {
        if self.is_zero() || other.is_zero() {
            return None;
        }
        let cross = self.dx * other.dy - self.dy * other.dx;
        Some(cross.abs().atan2(self.dot(other)))
    }
}

/// Line direction from the head to `p`: `(p.x - head.x, p.y - head.y)`.
pub fn ray_direction(head: NormalizedPoint, p: NormalizedPoint) -> Direction {
    Direction::new(p.x - head.x, p.y - head.y)
}

/// Clamped cosine between `p - head` and `dir`. Zero when `p == head`.
pub fn field_value(head: NormalizedPoint, p: NormalizedPoint, dir: Direction) -> Result<f64> {
    let dn = dir.norm();
    if dn == 0.0 || !dn.is_finite() {
        return Err(Error::invalid("gaze direction must be a non-zero finite vector"));
    }
    Ok(clamped_cosine(ray_direction(head, p), dir, dn))
}

fn clamped_cosine(g: Direction, dir: Direction, dir_norm: f64) -> f64 {
    let gn = g.norm();
    if gn == 0.0 {
        return 0.0;
    }
    (g.dot(&dir) / (gn * dir_norm)).clamp(0.0, 1.0)
}

/// [`field_value`] raised to `gamma`.
pub fn field_value_pow(head: NormalizedPoint, p: NormalizedPoint, dir: Direction, gamma: f64) -> Result<f64> {
    check_gamma(gamma)?;
    Ok(field_value(head, p, dir)?.powf(gamma))
}

fn check_gamma(gamma: f64) -> Result<()> {
    if !(gamma >= 1.0 && gamma.is_finite()) {
        return Err(Error::invalid(format!("field exponent must be >= 1, got {gamma}")));
    }
    Ok(())
}

/// Normalized center of grid cell `(row, col)`.
pub fn cell_center(row: usize, col: usize, width: usize, height: usize) -> NormalizedPoint {
    NormalizedPoint {
        x: (col as f64 + 0.5) / width as f64,
        y: (row as f64 + 0.5) / height as f64,
    }
}

/// Rasterized fields for one head and direction, one grid per exponent.
#[derive(Debug, Clone, PartialEq)]
pub struct DirectionFieldStack {
    pub head: NormalizedPoint,
    pub direction: Direction,
    pub width: usize,
    pub height: usize,
    pub gammas: Vec<f64>,
    /// Row-major `height × width` grids, in `gammas` order.
    pub grids: Vec<Vec<f64>>,
}

impl DirectionFieldStack {
    pub fn grid(&self, channel: usize) -> &[f64] {
        &self.grids[channel]
    }
}

fn check_extents(width: usize, height: usize) -> Result<()> {
    if width < 2 || height < 2 {
        return Err(Error::invalid(format!("field grid must be at least 2x2, got {width}x{height}")));
    }
    Ok(())
}

/// Rasterize the field stack without recording anything for differentiation.
pub fn build_field_stack(
    head: NormalizedPoint,
    direction: Direction,
    width: usize,
    height: usize,
    gammas: &[f64],
) -> Result<DirectionFieldStack> {
    let op = FieldOp::new(vec![head], width, height, gammas.to_vec())?;
    let dir = Tensor::new(vec![1, 2], vec![direction.dx, direction.dy])?;
    let out = op.forward(&[&dir])?;
    let plane = width * height;
    let grids = out.values().chunks(plane).map(<[f64]>::to_vec).collect();
    Ok(DirectionFieldStack {
        head,
        direction,
        width,
        height,
        gammas: gammas.to_vec(),
        grids,
    })
}

/// Differentiable field stack for a batch: `directions` is `[n, 2]`, the result is
/// `[n, gammas.len(), height, width]`. Gradients flow to `directions` only.
pub fn field_stack(
    tape: &mut Tape,
    directions: Var,
    heads: &[NormalizedPoint],
    width: usize,
    height: usize,
    gammas: &[f64],
) -> Result<Var> {
    let op = FieldOp::new(heads.to_vec(), width, height, gammas.to_vec())?;
    tape.apply_custom(Box::new(op), &[directions])
}

/// Tape operation behind [`field_stack`].
pub struct FieldOp {
    heads: Vec<NormalizedPoint>,
    width: usize,
    height: usize,
    gammas: Vec<f64>,
}

impl FieldOp {
    pub fn new(heads: Vec<NormalizedPoint>, width: usize, height: usize, gammas: Vec<f64>) -> Result<Self> {
        check_extents(width, height)?;
        if gammas.is_empty() {
            return Err(Error::invalid("at least one field exponent is required"));
        }
        for &g in &gammas {
            check_gamma(g)?;
        }
        Ok(FieldOp {
            heads,
            width,
            height,
            gammas,
        })
    }

    fn directions<'a>(&self, dirs: &'a Tensor) -> Result<&'a [f64]> {
        if dirs.shape() != [self.heads.len(), 2] {
            return Err(Error::shape(
                "gaze_field",
                format!("expected directions [{}, 2], got {:?}", self.heads.len(), dirs.shape()),
            ));
        }
        Ok(dirs.values())
    }
}

impl Function for FieldOp {
    fn name(&self) -> &'static str {
        "gaze_field"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let dirs = self.directions(inputs[0])?;
        let (w, h, k) = (self.width, self.height, self.gammas.len());
        let mut out = vec![0.0; self.heads.len() * k * w * h];
        for (s, head) in self.heads.iter().enumerate() {
            let dir = Direction::new(dirs[2 * s], dirs[2 * s + 1]);
            let dn = dir.norm();
            if dn == 0.0 || !dn.is_finite() {
                return Err(Error::invalid("gaze direction must be a non-zero finite vector"));
            }
            let base = s * k * w * h;
            for row in 0..h {
                for col in 0..w {
                    let c = clamped_cosine(ray_direction(*head, cell_center(row, col, w, h)), dir, dn);
                    for (ch, &gamma) in self.gammas.iter().enumerate() {
                        out[base + ch * w * h + row * w + col] = if gamma == 1.0 { c } else { c.powf(gamma) };
                    }
                }
            }
        }
        Tensor::new(vec![self.heads.len(), k, h, w], out)
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, g: &[f64]) -> Result<Vec<Option<Vec<f64>>>> {
        let dirs = self.directions(inputs[0])?;
        let (w, h, k) = (self.width, self.height, self.gammas.len());
        let mut gd = vec![0.0; dirs.len()];
        for (s, head) in self.heads.iter().enumerate() {
            let (dx, dy) = (dirs[2 * s], dirs[2 * s + 1]);
            let dn2 = dx * dx + dy * dy;
            let dn = dn2.sqrt();
            let base = s * k * w * h;
            let (mut acc_x, mut acc_y) = (0.0, 0.0);
            for row in 0..h {
                for col in 0..w {
                    let gvec = ray_direction(*head, cell_center(row, col, w, h));
                    let gn = gvec.norm();
                    if gn == 0.0 {
                        continue;
                    }
                    let (ux, uy) = (gvec.dx / gn, gvec.dy / gn);
                    let c = (ux * dx + uy * dy) / dn;
                    if c <= 0.0 {
                        continue;
                    }
                    // d(cos)/d(dir) = u/|d| - cos * d/|d|²
                    let dcx = ux / dn - c * dx / dn2;
                    let dcy = uy / dn - c * dy / dn2;
                    let mut upstream = 0.0;
                    for (ch, &gamma) in self.gammas.iter().enumerate() {
                        let go = g[base + ch * w * h + row * w + col];
                        upstream += if gamma == 1.0 { go } else { go * gamma * c.powf(gamma - 1.0) };
                    }
                    acc_x += upstream * dcx;
                    acc_y += upstream * dcy;
                }
            }
            gd[2 * s] = acc_x;
            gd[2 * s + 1] = acc_y;
        }
        Ok(vec![Some(gd)])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pt(x: f64, y: f64) -> NormalizedPoint {
        NormalizedPoint { x, y }
    }

    #[test]
    fn ray_direction_examples() {
        assert_eq!(ray_direction(pt(0.5, 0.5), pt(0.9, 0.5)), Direction::new(0.4, 0.0));
        assert_eq!(ray_direction(pt(0.5, 0.5), pt(0.5, 0.5)), Direction::new(0.0, 0.0));
        let g = ray_direction(pt(0.2, 0.8), pt(0.7, 0.3));
        assert!((g.dx - 0.5).abs() < 1e-15 && (g.dy + 0.5).abs() < 1e-15);
    }

    #[test]
    fn field_value_examples() {
        let h = pt(0.5, 0.5);
        let d = Direction::new(1.0, 0.0);
        assert_eq!(field_value(h, pt(0.9, 0.5), d).unwrap(), 1.0);
        assert_eq!(field_value(h, pt(0.5, 0.9), d).unwrap(), 0.0);
        assert!((field_value(h, pt(0.9, 0.9), d).unwrap() - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        assert_eq!(field_value(h, pt(0.1, 0.5), d).unwrap(), 0.0);
        assert_eq!(field_value(h, h, d).unwrap(), 0.0);
        assert!(field_value(h, pt(0.9, 0.5), Direction::new(0.0, 0.0)).is_err());
    }

    #[test]
    fn field_value_pow_examples() {
        let h = pt(0.5, 0.5);
        let d = Direction::new(1.0, 0.0);
        // cos 60° = 0.5
        let p60 = pt(0.5 + 0.2 * 0.5, 0.5 + 0.2 * 3f64.sqrt() / 2.0);
        assert!((field_value_pow(h, p60, d, 2.0).unwrap() - 0.25).abs() < 1e-12);
        let p45 = pt(0.9, 0.9);
        assert!((field_value_pow(h, p45, d, 5.0).unwrap() - 2f64.powf(-2.5)).abs() < 1e-12);
        assert!((field_value_pow(h, p45, d, 5.0).unwrap() - 0.17678).abs() < 1e-5);
        assert_eq!(
            field_value_pow(h, p60, d, 1.0).unwrap(),
            field_value(h, p60, d).unwrap()
        );
        assert!(field_value_pow(h, p60, d, 0.5).is_err());
    }

    #[test]
    fn two_by_two_stack_matches_direct_evaluation() {
        let head = pt(0.0, 0.0);
        let d = Direction::new(1.0, 1.0).normalized().unwrap();
        let stack = build_field_stack(head, d, 2, 2, &[1.0]).unwrap();
        let centers = [pt(0.25, 0.25), pt(0.75, 0.25), pt(0.25, 0.75), pt(0.75, 0.75)];
        for (i, c) in centers.iter().enumerate() {
            // cos(angle(c - head, (1,1)/√2)) computed from scratch
            let (gx, gy) = (c.x, c.y);
            let want = ((gx + gy) / std::f64::consts::SQRT_2 / gx.hypot(gy)).max(0.0);
            assert!((stack.grids[0][i] - want).abs() < 1e-12, "cell {i}");
        }
        assert!((stack.grids[0][0] - 1.0).abs() < 1e-12);
        assert!((stack.grids[0][1] - 2.0 / 5f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn head_on_cell_center_is_zero() {
        let stack = build_field_stack(pt(0.25, 0.25), Direction::new(1.0, 0.0), 2, 2, &[1.0]).unwrap();
        assert_eq!(stack.grids[0][0], 0.0);
    }

    #[test]
    fn rejects_degenerate_inputs() {
        let h = pt(0.5, 0.5);
        assert!(build_field_stack(h, Direction::new(1.0, 0.0), 1, 4, &[1.0]).is_err());
        assert!(build_field_stack(h, Direction::new(1.0, 0.0), 4, 4, &[]).is_err());
        assert!(build_field_stack(h, Direction::new(0.0, 0.0), 4, 4, &[1.0]).is_err());
        assert!(NormalizedPoint::new(1.2, 0.5).is_err());
    }

    #[test]
    fn batch_stack_shape_and_channel_order() {
        let mut tape = Tape::new();
        let dirs = tape.constant(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, -1.0]).unwrap());
        let heads = [pt(0.5, 0.5), pt(0.3, 0.6)];
        let out = field_stack(&mut tape, dirs, &heads, 5, 4, &DEFAULT_GAMMAS).unwrap();
        let v = tape.value(out);
        assert_eq!(v.shape(), &[2, 3, 4, 5]);
        let plane = 20;
        for s in 0..2 {
            for i in 0..plane {
                let base = v.values()[s * 3 * plane + 2 * plane + i];
                let g5 = v.values()[s * 3 * plane + i];
                assert!((g5 - base.powf(5.0)).abs() < 1e-12);
            }
        }
    }
}
