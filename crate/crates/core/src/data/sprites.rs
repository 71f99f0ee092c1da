use crate::Real;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Square,
    Cross,
    Disk,
    Triangle,
    Ring,
}

impl Shape {
    pub const ALL: [Shape; 5] = [Shape::Square, Shape::Cross, Shape::Disk, Shape::Triangle, Shape::Ring];

    /// Membership test in cell-centre coordinates `u, v` in `[-1, 1]`, `v` pointing down.
    fn covers(self, u: Real, v: Real) -> bool {
        match self {
            Shape::Square => u.abs() <= 0.7 && v.abs() <= 0.7,
            Shape::Cross => u.abs() <= 0.34 || v.abs() <= 0.34,
            Shape::Disk => u * u + v * v <= 0.9,
            Shape::Triangle => u.abs() <= (v + 1.2) / 2.2,
            Shape::Ring => u.abs().max(v.abs()) > 0.6,
        }
    }
}

/// RGB colours in `[-1, 1]`.
pub const PALETTE: [[Real; 3]; 8] = [
    [1.0, -1.0, -1.0],
    [-1.0, 1.0, -1.0],
    [-1.0, -1.0, 1.0],
    [1.0, 1.0, -1.0],
    [1.0, -1.0, 1.0],
    [-1.0, 1.0, 1.0],
    [1.0, 1.0, 1.0],
    [1.0, 0.0, -1.0],
];

/// Renders one sprite as `[3, grid, grid]` channel-major pixels. The sprite
/// occupies a `3/4 grid` square whose top-left corner is `pos = (row, col)`.
pub fn render_sprite(grid: usize, shape: Shape, color: usize, pos: (usize, usize)) -> Vec<Real> {
    let size = grid * 3 / 4;
    let rgb = PALETTE[color];
    let mut px = vec![-1.0; 3 * grid * grid];
    for i in 0..size {
        for j in 0..size {
            let v = (2 * i + 1) as Real / size as Real - 1.0;
            let u = (2 * j + 1) as Real / size as Real - 1.0;
            let (r, c) = (pos.0 + i, pos.1 + j);
            if r >= grid || c >= grid || !shape.covers(u, v) {
                continue;
            }
            for ch in 0..3 {
                px[ch * grid * grid + r * grid + c] = rgb[ch];
            }
        }
    }
    px
}
