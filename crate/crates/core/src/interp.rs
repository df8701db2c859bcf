//! Bilinear and second-derivative-corrected quadratic interpolation of nodal fields.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::QuadtreeGrid;
use crate::real::{Point2, Real};

/// Axis-aligned square cell: lower-left corner and width.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Cell<T> {
    pub origin: Point2<T>,
    pub width: T,
}

impl<T: Real> Cell<T> {
    pub fn new(origin: Point2<T>, width: T) -> Self {
        Self { origin, width }
    }

    /// Cell-local coordinates `(alpha, beta)` of `p`, rejecting points outside the closed cell.
    pub fn local(&self, p: Point2<T>) -> Result<(T, T)> {
        let a = (p[0] - self.origin[0]) / self.width;
        let b = (p[1] - self.origin[1]) / self.width;
        let (zero, one) = (T::zero(), T::one());
        if !(a >= zero && a <= one && b >= zero && b <= one) {
            return Err(Error::OutsideCell { x: p[0].to_f64_lossy(), y: p[1].to_f64_lossy() });
        }
        Ok((a, b))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum InterpMode {
    Bilinear,
    #[default]
    Quadratic,
}

/// What to do with sample points outside the domain.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum OutsidePolicy {
    #[default]
    Error,
    Clamp,
}

/// Bilinear weights for corners `[00, 01, 10, 11]`.
#[inline]
pub fn bilinear_weights<T: Real>(a: T, b: T) -> [T; 4] {
    let one = T::one();
    [(one - a) * (one - b), (one - a) * b, a * (one - b), a * b]
}

#[inline]
pub fn bilinear_local<T: Real>(c: &[T; 4], a: T, b: T) -> T {
    let w = bilinear_weights(a, b);
    w[0] * c[0] + w[1] * c[1] + w[2] * c[2] + w[3] * c[3]
}

#[inline]
pub fn quadratic_local<T: Real>(c: &[T; 4], dxx: &[T; 4], dyy: &[T; 4], a: T, b: T, width: T) -> T {
    let w = bilinear_weights(a, b);
    let lin = w[0] * c[0] + w[1] * c[1] + w[2] * c[2] + w[3] * c[3];
    let fxx = w[0] * dxx[0] + w[1] * dxx[1] + w[2] * dxx[2] + w[3] * dxx[3];
    let fyy = w[0] * dyy[0] + w[1] * dyy[1] + w[2] * dyy[2] + w[3] * dyy[3];
    let one = T::one();
    let half = T::lit(0.5);
    let w2 = width * width;
    lin - w2 * a * (one - a) * half * fxx - w2 * b * (one - b) * half * fyy
}

pub fn bilinear<T: Real>(cell: &Cell<T>, corners: &[T; 4], p: Point2<T>) -> Result<T> {
    let (a, b) = cell.local(p)?;
    Ok(bilinear_local(corners, a, b))
}

pub fn quadratic<T: Real>(
    cell: &Cell<T>,
    corners: &[T; 4],
    phixx: &[T; 4],
    phiyy: &[T; 4],
    p: Point2<T>,
) -> Result<T> {
    let (a, b) = cell.local(p)?;
    Ok(quadratic_local(corners, phixx, phiyy, a, b, cell.width))
}

/// Nodal scalar field together with its nodal second derivatives, ready for quadratic sampling.
#[derive(Clone, Copy, Debug)]
pub struct QuadraticField<'a, T> {
    pub phi: &'a [T],
    pub phixx: &'a [T],
    pub phiyy: &'a [T],
}

impl<T: Real> QuadtreeGrid<T> {
    fn resolve_point(&self, p: Point2<T>, policy: OutsidePolicy) -> Result<(usize, T, T)> {
        let q = match policy {
            OutsidePolicy::Error => p,
            OutsidePolicy::Clamp => self.clamp_to_domain(p),
        };
        let l = self.locate_owner(q)?;
        let cell = Cell::new(self.leaf_origin(l), self.leaf_width(l));
        let a = ((q[0] - cell.origin[0]) / cell.width).max(T::zero()).min(T::one());
        let b = ((q[1] - cell.origin[1]) / cell.width).max(T::zero()).min(T::one());
        Ok((l, a, b))
    }

    pub fn interp_bilinear(&self, values: &[T], p: Point2<T>, policy: OutsidePolicy) -> Result<T> {
        let (l, a, b) = self.resolve_point(p, policy)?;
        Ok(bilinear_local(&self.leaf_corner_values(l, values), a, b))
    }

    pub fn interp_vector(&self, values: &[Point2<T>], p: Point2<T>, policy: OutsidePolicy) -> Result<Point2<T>> {
        let (l, a, b) = self.resolve_point(p, policy)?;
        let c = self.leaf_corner_vectors(l, values);
        let w = bilinear_weights(a, b);
        let mut out = [T::zero(); 2];
        for k in 0..4 {
            out[0] = out[0] + w[k] * c[k][0];
            out[1] = out[1] + w[k] * c[k][1];
        }
        Ok(out)
    }

    /// Quadratic interpolation; hanging corners take the coarse neighbour's quadratic value.
    pub fn interp_quadratic(&self, f: &QuadraticField<'_, T>, p: Point2<T>, policy: OutsidePolicy) -> Result<T> {
        let (l, a, b) = self.resolve_point(p, policy)?;
        let refs = self.leaf_corner_refs(l);
        let mut c = [T::zero(); 4];
        for k in 0..4 {
            c[k] = self.corner_value_quadratic(refs[k], f.phi, f.phixx, f.phiyy);
        }
        let dxx = self.leaf_corner_values(l, f.phixx);
        let dyy = self.leaf_corner_values(l, f.phiyy);
        Ok(quadratic_local(&c, &dxx, &dyy, a, b, self.leaf_width(l)))
    }

    /// Batch sampling of a scalar field; `derivs` is required for quadratic mode.
    pub fn sample(
        &self,
        values: &[T],
        derivs: Option<(&[T], &[T])>,
        points: &[Point2<T>],
        mode: InterpMode,
        policy: OutsidePolicy,
    ) -> Result<Vec<Result<T>>> {
        if values.len() != self.num_nodes() {
            return Err(Error::FieldSize { expected: self.num_nodes(), got: values.len() });
        }
        match mode {
            InterpMode::Bilinear => {
                Ok(points.par_iter().map(|&p| self.interp_bilinear(values, p, policy)).collect())
            }
            InterpMode::Quadratic => {
                let (phixx, phiyy) = derivs.ok_or_else(|| {
                    Error::Config("quadratic sampling needs second-derivative fields".into())
                })?;
                let f = QuadraticField { phi: values, phixx, phiyy };
                Ok(points.par_iter().map(|&p| self.interp_quadratic(&f, p, policy)).collect())
            }
        }
    }

    pub fn sample_vectors(
        &self,
        values: &[Point2<T>],
        points: &[Point2<T>],
        policy: OutsidePolicy,
    ) -> Vec<Result<Point2<T>>> {
        points.par_iter().map(|&p| self.interp_vector(values, p, policy)).collect()
    }
}
