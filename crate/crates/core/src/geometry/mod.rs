//! Atomic structures, periodic cells and interaction graphs.

mod neighbors;
mod structure;

pub use neighbors::{brute_force_neighbors, build_neighbor_list, Graph, VerletList};
pub use structure::{AtomArray, Cell, Structure};

use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Pairs closer than this are treated as corrupt input (Å).
pub const R_MIN: f64 = 1e-3;

/// Smallest accepted |det| of a periodic cell (Å³).
pub const MIN_CELL_VOLUME: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("cell is singular (|det| = {0:e} Å³)")]
    SingularCell(f64),
    #[error("invalid structure: {0}")]
    InvalidStructure(String),
    #[error("atoms {i} and {j} overlap at {distance:e} Å")]
    Overlap { i: usize, j: usize, distance: f64 },
    #[error("invalid neighbor parameters: {0}")]
    InvalidParameters(String),
}

pub type Result<T> = std::result::Result<T, GeometryError>;

/// Displacement of minimal norm among `delta + Σ sₖ aₖ` over periodic axes.
///
/// The candidate shifts are bounded analytically from the wrapped
/// displacement and the cell heights, so skewed cells are handled without a
/// fixed `{-1, 0, 1}` search box.
pub fn minimum_image(delta: Vec3, cell: Option<&Cell>, pbc: [bool; 3]) -> Vec3 {
    let Some(cell) = cell else {
        return delta;
    };
    if !pbc.iter().any(|&p| p) {
        return delta;
    }
    let mut f = cell.to_fractional(&delta);
    for k in 0..3 {
        if pbc[k] {
            f[k] -= f[k].round();
        }
    }
    let wrapped = cell.to_cartesian(&f);
    let bound = wrapped.norm();
    let heights = cell.heights();
    let mut range = [0i32; 3];
    for k in 0..3 {
        if pbc[k] {
            range[k] = (bound / heights[k] + 0.5).ceil() as i32;
        }
    }
    let mut best = wrapped;
    let mut best_norm = wrapped.norm_squared();
    for a in -range[0]..=range[0] {
        for b in -range[1]..=range[1] {
            for c in -range[2]..=range[2] {
                if a == 0 && b == 0 && c == 0 {
                    continue;
                }
                let cand = wrapped + cell.shift_vector([a, b, c]);
                let n = cand.norm_squared();
                if n < best_norm {
                    best = cand;
                    best_norm = n;
                }
            }
        }
    }
    best
}
