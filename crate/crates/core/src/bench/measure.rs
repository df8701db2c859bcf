//! Band error and enclosed-area metrics.

use rayon::prelude::*;

use crate::error::Result;
use crate::field_ops::second_derivatives;
use crate::grid::QuadtreeGrid;
use crate::interp::quadratic_local;
use crate::real::Point2;

/// Subcells per leaf side used by the area quadrature.
pub const AREA_SUBDIVISIONS: usize = 16;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BandError {
    pub mae: f64,
    pub linf: f64,
    pub count: usize,
}

/// Mean and max of `|phi - exact|` over nodes where `|exact| <= sqrt(2) h_min`.
pub fn band_error<F: Fn(Point2<f64>) -> f64 + Sync>(grid: &QuadtreeGrid<f64>, phi: &[f64], exact: F) -> BandError {
    let band = std::f64::consts::SQRT_2 * grid.h_min();
    let errs: Vec<f64> = grid
        .node_points()
        .par_iter()
        .zip(phi)
        .filter_map(|(&p, &v)| {
            let e = exact(p);
            (e.abs() <= band).then(|| (v - e).abs())
        })
        .collect();
    if errs.is_empty() {
        return BandError::default();
    }
    BandError {
        mae: errs.iter().sum::<f64>() / errs.len() as f64,
        linf: errs.iter().fold(0.0, |m: f64, &e| m.max(e)),
        count: errs.len(),
    }
}

/// Area of `{phi < 0}`.
///
/// Leaves whose reconstruction provably keeps one sign contribute all or nothing; the others are
/// split into `AREA_SUBDIVISIONS^2` subcells, each counted by the sign of the quadratic
/// reconstruction at its center.
pub fn negative_area(grid: &QuadtreeGrid<f64>, phi: &[f64]) -> Result<f64> {
    let (dxx, dyy) = second_derivatives(grid, phi)?;
    let n = AREA_SUBDIVISIONS;
    let parts: Vec<f64> = (0..grid.num_leaves())
        .into_par_iter()
        .map(|l| {
            let c = grid.leaf_corner_values(l, phi);
            let cxx = grid.leaf_corner_values(l, &dxx);
            let cyy = grid.leaf_corner_values(l, &dyy);
            let w = grid.leaf_width(l);
            let bound = w * w / 8.0
                * (cxx.iter().fold(0.0f64, |m, v| m.max(v.abs())) + cyy.iter().fold(0.0f64, |m, v| m.max(v.abs())));
            let area = w * w;
            if c.iter().all(|&v| v > bound) {
                return 0.0;
            }
            if c.iter().all(|&v| v < -bound) {
                return area;
            }
            let mut inside = 0usize;
            for i in 0..n {
                for j in 0..n {
                    let a = (i as f64 + 0.5) / n as f64;
                    let b = (j as f64 + 0.5) / n as f64;
                    if quadratic_local(&c, &cxx, &cyy, a, b, w) < 0.0 {
                        inside += 1;
                    }
                }
            }
            area * inside as f64 / (n * n) as f64
        })
        .collect();
    Ok(parts.iter().sum())
}

/// Whether any pair of axis-adjacent nodes brackets the zero level.
pub fn has_interface(grid: &QuadtreeGrid<f64>, phi: &[f64]) -> bool {
    (0..grid.num_leaves()).any(|l| {
        let c = grid.leaf_corner_values(l, phi);
        let neg = c.iter().any(|&v| v <= 0.0);
        let pos = c.iter().any(|&v| v >= 0.0);
        neg && pos
    })
}
