//! Inverse-distance transfer of cell fields to parcel positions.

use crate::consts::{IDW_EPS, K_IDW};
use crate::geom::Vec2;
use crate::spatial::PointGrid;

/// Indices of the `k` nearest centroids, ascending distance, ties to the
/// lower index.
pub fn knn_cells(grid: &PointGrid, query: Vec2, k: usize) -> Vec<usize> {
    grid.knn(query, k).into_iter().map(|(_, i)| i).collect()
}

/// Fixed neighbour lists and normalized weights for a set of parcels.
#[derive(Debug, Clone, PartialEq)]
pub struct IdwStencil {
    pub k: usize,
    pub eps: f64,
    /// `k` cell indices per parcel, row-major.
    pub cells: Vec<usize>,
    pub weights: Vec<f64>,
}

/// Weights `1/(d+eps)` normalized to sum 1.
pub fn idw_weights(query: Vec2, centroids: &[Vec2], cells: &[usize], eps: f64) -> Vec<f64> {
    let raw: Vec<f64> = cells.iter().map(|&c| 1.0 / ((query - centroids[c]).norm() + eps)).collect();
    let s: f64 = raw.iter().sum();
    raw.iter().map(|w| w / s).collect()
}

impl IdwStencil {
    pub fn build(grid: &PointGrid, queries: &[Vec2]) -> Self {
        Self::build_with(grid, queries, K_IDW, IDW_EPS)
    }

    pub fn build_with(grid: &PointGrid, queries: &[Vec2], k: usize, eps: f64) -> Self {
        let k = k.min(grid.len());
        let mut cells = Vec::with_capacity(queries.len() * k);
        let mut weights = Vec::with_capacity(queries.len() * k);
        for &q in queries {
            // Non-finite parcels get an arbitrary valid stencil; callers mask them.
            let q = if q.is_finite() { q } else { Vec2::ZERO };
            let nb = knn_cells(grid, q, k);
            weights.extend(idw_weights(q, grid.points(), &nb, eps));
            cells.extend(nb);
        }
        Self { k, eps, cells, weights }
    }

    pub fn n_parcels(&self) -> usize {
        if self.k == 0 {
            0
        } else {
            self.cells.len() / self.k
        }
    }

    pub fn interpolate(&self, field: &[f64]) -> Vec<f64> {
        (0..self.n_parcels())
            .map(|p| {
                let r = p * self.k..(p + 1) * self.k;
                self.cells[r.clone()]
                    .iter()
                    .zip(&self.weights[r])
                    .map(|(&c, &w)| w * field[c])
                    .sum()
            })
            .collect()
    }

    pub fn interpolate_vec(&self, field: &[Vec2]) -> Vec<Vec2> {
        (0..self.n_parcels())
            .map(|p| {
                let r = p * self.k..(p + 1) * self.k;
                self.cells[r.clone()]
                    .iter()
                    .zip(&self.weights[r])
                    .fold(Vec2::ZERO, |acc, (&c, &w)| acc + field[c] * w)
            })
            .collect()
    }

    /// Adjoint of [`IdwStencil::interpolate`]: scatter parcel gradients back
    /// to cells.
    pub fn backprop(&self, upstream: &[f64], n_cells: usize) -> Vec<f64> {
        let mut g = vec![0.0; n_cells];
        for (p, &u) in upstream.iter().enumerate() {
            for s in p * self.k..(p + 1) * self.k {
                g[self.cells[s]] += self.weights[s] * u;
            }
        }
        g
    }
}
