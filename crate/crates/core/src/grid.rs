use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Metric raster covering the bird's-eye-view around the ego vehicle.
///
/// Cell `(i, j)` spans `origin + [i, i + 1) * cell_size` along x and
/// `origin + [j, j + 1) * cell_size` along y. Arrays over the grid are stored
/// with `i` as the leading axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub cells_x: usize,
    pub cells_y: usize,
    pub cell_size: f64,
    pub origin: [f64; 2],
}

impl GridSpec {
    /// Grid centered on the ego origin.
    pub fn centered(cells_x: usize, cells_y: usize, cell_size: f64) -> Self {
        Self {
            cells_x,
            cells_y,
            cell_size,
            origin: [
                -(cells_x as f64) * cell_size / 2.0,
                -(cells_y as f64) * cell_size / 2.0,
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.cells_x < 8 || self.cells_y < 8 {
            return Err(Error::Config(format!(
                "grid must be at least 8x8 cells, got {}x{}",
                self.cells_x, self.cells_y
            )));
        }
        if !(self.cell_size > 0.0 && self.cell_size.is_finite()) {
            return Err(Error::Config(format!(
                "cell size must be positive, got {}",
                self.cell_size
            )));
        }
        if !self.origin.iter().all(|v| v.is_finite()) {
            return Err(Error::Config("grid origin must be finite".into()));
        }
        Ok(())
    }

    pub fn num_cells(&self) -> usize {
        self.cells_x * self.cells_y
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.cells_x, self.cells_y)
    }

    /// Row-major flat index of cell `(i, j)`.
    pub fn flat_index(&self, i: usize, j: usize) -> usize {
        i * self.cells_y + j
    }

    pub fn unflatten(&self, index: usize) -> (usize, usize) {
        (index / self.cells_y, index % self.cells_y)
    }

    /// Continuous cell coordinates of a metric point, where integer values
    /// land on cell corners.
    pub fn to_cell_coords(&self, x: f64, y: f64) -> (f64, f64) {
        (
            (x - self.origin[0]) / self.cell_size,
            (y - self.origin[1]) / self.cell_size,
        )
    }

    pub fn from_cell_coords(&self, u: f64, v: f64) -> (f64, f64) {
        (
            self.origin[0] + u * self.cell_size,
            self.origin[1] + v * self.cell_size,
        )
    }

    pub fn cell_center(&self, i: usize, j: usize) -> (f64, f64) {
        self.from_cell_coords(i as f64 + 0.5, j as f64 + 0.5)
    }

    /// The cell containing a metric point, if it lies on the grid.
    pub fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let (u, v) = self.to_cell_coords(x, y);
        if !(u.is_finite() && v.is_finite()) || u < 0.0 || v < 0.0 {
            return None;
        }
        let (i, j) = (u.floor() as usize, v.floor() as usize);
        (i < self.cells_x && j < self.cells_y).then_some((i, j))
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        self.cell_of(x, y).is_some()
    }
}

impl Default for GridSpec {
    /// 32x32 cells of one meter.
    fn default() -> Self {
        Self::centered(32, 32, 1.0)
    }
}
