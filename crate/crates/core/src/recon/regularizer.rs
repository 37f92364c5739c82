use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::ReconGrid;
use crate::sparse::SparseRayMatrix;

/// Per-direction weights of the first-difference operator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegularizerWeights {
    pub horizontal: f64,
    pub vertical: f64,
    pub diagonal: f64,
}

impl Default for RegularizerWeights {
    fn default() -> Self {
        Self {
            horizontal: 1.0,
            vertical: 0.5,
            diagonal: 0.75,
        }
    }
}

/// Anisotropic first-difference operator `D` with trade-off `lambda`.
///
/// `D` is dimensionless. The objective uses `lambda * h * |D sigma|_1` with
/// `h` the geometric-mean cell size, so both terms are times in seconds.
#[derive(Debug, Clone)]
pub struct Regularizer {
    pub d: SparseRayMatrix,
    pub weights: RegularizerWeights,
    pub lambda: f64,
    pub length_scale: f64,
}

impl Regularizer {
    /// `|D sigma|_1`.
    pub fn norm(&self, sigma: &[f64]) -> Result<f64> {
        Ok(self.d.matvec(sigma)?.iter().map(|v| v.abs()).sum())
    }

    /// Regularization term of the objective, `lambda * h * |D sigma|_1`.
    pub fn penalty(&self, sigma: &[f64]) -> Result<f64> {
        Ok(self.lambda * self.length_scale * self.norm(sigma)?)
    }
}

/// Stack horizontal, vertical and both diagonal differences over `grid`.
/// Directions with zero weight contribute no rows.
pub fn build_regularizer(grid: &ReconGrid, weights: RegularizerWeights, lambda: f64) -> Result<Regularizer> {
    let w = weights;
    if [w.horizontal, w.vertical, w.diagonal].iter().any(|k| !(*k >= 0.0) || !k.is_finite()) {
        return Err(Error::Config("regularizer weights must be finite and >= 0".into()));
    }
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(Error::Config(format!("lambda must be > 0, got {lambda}")));
    }
    grid.validate()?;
    let (nx, nz) = (grid.nx, grid.nz);
    let idx = |ix: usize, iz: usize| grid.cell_index(ix, iz);
    let mut d = SparseRayMatrix::empty(grid.len());
    let diag = w.diagonal / std::f64::consts::SQRT_2;
    for ix in 0..nx {
        for iz in 0..nz {
            if w.horizontal > 0.0 && ix + 1 < nx {
                d.push_row(vec![(idx(ix, iz), -w.horizontal), (idx(ix + 1, iz), w.horizontal)])?;
            }
            if w.vertical > 0.0 && iz + 1 < nz {
                d.push_row(vec![(idx(ix, iz), -w.vertical), (idx(ix, iz + 1), w.vertical)])?;
            }
            if diag > 0.0 && ix + 1 < nx && iz + 1 < nz {
                d.push_row(vec![(idx(ix, iz), -diag), (idx(ix + 1, iz + 1), diag)])?;
                d.push_row(vec![(idx(ix, iz + 1), -diag), (idx(ix + 1, iz), diag)])?;
            }
        }
    }
    Ok(Regularizer {
        d,
        weights,
        lambda,
        length_scale: (grid.cell_width * grid.cell_height).sqrt(),
    })
}
