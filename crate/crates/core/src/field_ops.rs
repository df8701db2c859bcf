//! Nodal differential operators, reinitialization and interface-adjacent node selection.

use std::collections::HashSet;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::{LatticeKey, QuadtreeGrid};
use crate::interp::OutsidePolicy;
use crate::real::{Point2, Real};

/// Gradient norms below this count as degenerate.
pub const GRAD_EPS: f64 = 1e-10;

/// Half-aperture of the cone used to select nodes lagging behind the interface (95 degrees).
pub const THETA_W: f64 = 19.0 * std::f64::consts::PI / 36.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NodeFlag {
    Ok,
    /// The nine-point stencil is incomplete; values are zero-filled.
    Incomplete,
    /// Gradient norm below [`GRAD_EPS`]; normal and curvature set to zero.
    Degenerate,
}

#[derive(Clone, Debug)]
pub struct Geometry<T> {
    pub normals: Vec<Point2<T>>,
    pub curvature: Vec<T>,
    pub flags: Vec<NodeFlag>,
}

fn check_len<T: Real>(grid: &QuadtreeGrid<T>, n: usize) -> Result<()> {
    if n != grid.num_nodes() {
        return Err(Error::FieldSize { expected: grid.num_nodes(), got: n });
    }
    Ok(())
}

fn check_finite<T: Real>(grid: &QuadtreeGrid<T>, phi: &[T]) -> Result<()> {
    check_len(grid, phi.len())?;
    if let Some(n) = phi.iter().position(|v| !v.is_finite()) {
        let p = grid.node_point(n);
        return Err(Error::NonFinite {
            x: p[0].to_f64_lossy(),
            y: p[1].to_f64_lossy(),
            value: phi[n].to_f64_lossy(),
        });
    }
    Ok(())
}

/// Central-difference gradient, Hessian terms on a complete uniform stencil.
fn stencil_derivs<T: Real>(grid: &QuadtreeGrid<T>, phi: &[T], n: usize) -> Option<[T; 5]> {
    let s = grid.node_stencil(n).ok()?;
    if !s.complete {
        return None;
    }
    let v = |k: usize| phi[s.neighbors[k].unwrap()];
    let h = grid.h_min();
    let two = T::lit(2.0);
    let c = phi[n];
    let (w, e, so, no) = (v(3), v(4), v(1), v(6));
    let px = (e - w) / (two * h);
    let py = (no - so) / (two * h);
    let pxx = (e - two * c + w) / (h * h);
    let pyy = (no - two * c + so) / (h * h);
    let pxy = (v(7) - v(5) - v(2) + v(0)) / (T::lit(4.0) * h * h);
    Some([px, py, pxx, pyy, pxy])
}

/// Unit normals and mean curvature on complete stencils; other nodes are zero-filled and flagged.
pub fn normals_and_curvature<T: Real>(grid: &QuadtreeGrid<T>, phi: &[T]) -> Result<Geometry<T>> {
    check_finite(grid, phi)?;
    let kmax = T::one() / grid.h_min();
    let zero = T::zero();
    let per_node: Vec<(Point2<T>, T, NodeFlag)> = (0..grid.num_nodes())
        .into_par_iter()
        .map(|n| match stencil_derivs(grid, phi, n) {
            None => ([zero, zero], zero, NodeFlag::Incomplete),
            Some([px, py, pxx, pyy, pxy]) => {
                let g2 = px * px + py * py;
                let g = g2.sqrt();
                if g < T::lit(GRAD_EPS) {
                    return ([zero, zero], zero, NodeFlag::Degenerate);
                }
                let k = (pxx * py * py - T::lit(2.0) * pxy * px * py + pyy * px * px) / (g2 * g);
                ([px / g, py / g], k.max(-kmax).min(kmax), NodeFlag::Ok)
            }
        })
        .collect();
    let mut out = Geometry {
        normals: Vec::with_capacity(per_node.len()),
        curvature: Vec::with_capacity(per_node.len()),
        flags: Vec::with_capacity(per_node.len()),
    };
    for (nrm, k, f) in per_node {
        out.normals.push(nrm);
        out.curvature.push(k);
        out.flags.push(f);
    }
    Ok(out)
}

/// Second derivative along `axis` at node `n` from the nearest vertices on either side.
///
/// Uses the three-point formula on possibly unequal spacings; on the domain boundary the
/// missing side is replaced by a one-sided formula through `v + s` and `v + 2s`.
fn axis_second<T: Real>(grid: &QuadtreeGrid<T>, phi: &[T], n: usize, axis: usize) -> T {
    let nb = grid.axis_neighbors(n);
    let (plus, minus) = if axis == 0 { (nb[0], nb[1]) } else { (nb[2], nb[3]) };
    let h = grid.h_min();
    let c = phi[n];
    let two = T::lit(2.0);
    match (plus, minus) {
        (Some(p), Some(m)) => {
            let sp = T::lit(p.span as f64) * h;
            let sm = T::lit(m.span as f64) * h;
            let fp = grid.corner_value(p.corner, phi);
            let fm = grid.corner_value(m.corner, phi);
            two / (sp + sm) * ((fp - c) / sp - (c - fm) / sm)
        }
        (Some(a), None) | (None, Some(a)) => {
            let sign = if plus.is_some() { T::one() } else { -T::one() };
            let s = T::lit(a.span as f64) * h;
            let f1 = grid.corner_value(a.corner, phi);
            let mut q = grid.node_point(n);
            q[axis] = q[axis] + sign * two * s;
            match grid.interp_bilinear(phi, q, OutsidePolicy::Error) {
                Ok(f2) => (c - two * f1 + f2) / (s * s),
                Err(_) => T::zero(),
            }
        }
        (None, None) => T::zero(),
    }
}

/// Nodal `phi_xx`, `phi_yy`.
pub fn second_derivatives<T: Real>(grid: &QuadtreeGrid<T>, phi: &[T]) -> Result<(Vec<T>, Vec<T>)> {
    check_finite(grid, phi)?;
    Ok(second_derivatives_unchecked(grid, phi))
}

fn second_derivatives_unchecked<T: Real>(grid: &QuadtreeGrid<T>, phi: &[T]) -> (Vec<T>, Vec<T>) {
    (0..grid.num_nodes())
        .into_par_iter()
        .map(|n| (axis_second(grid, phi, n, 0), axis_second(grid, phi, n, 1)))
        .unzip()
}

#[inline]
fn minmod<T: Real>(a: T, b: T) -> T {
    if a * b <= T::zero() {
        T::zero()
    } else if a.abs() < b.abs() {
        a
    } else {
        b
    }
}

/// Distance from node `n` to the zero crossing of `phi0` towards each axis neighbour
/// (+x, -x, +y, -y), located on the minmod-limited quadratic through both values.
fn interface_distances<T: Real>(grid: &QuadtreeGrid<T>, phi0: &[T], dxx: &[T], dyy: &[T], n: usize) -> [Option<T>; 4] {
    let mut out = [None; 4];
    let h = grid.h_min();
    let c = phi0[n];
    for (d, nb) in grid.axis_neighbors(n).iter().enumerate() {
        let Some(nb) = nb else { continue };
        let f = grid.corner_value(nb.corner, phi0);
        if !(c * f < T::zero()) {
            continue;
        }
        let dd = if d < 2 { dxx } else { dyy };
        let s = T::lit(nb.span as f64) * h;
        let half = T::lit(0.5);
        let c2 = half * minmod(dd[n], grid.corner_value(nb.corner, dd));
        // Quadratic in the local coordinate x in [0, s] with q(0) = c, q(s) = f.
        let c1 = (f - c) / s - c2 * s;
        let x = if c2.abs() > T::lit(1e-10) * (c1.abs() / s) {
            let disc = (c1 * c1 - T::lit(4.0) * c2 * c).max(T::zero()).sqrt();
            let r1 = (-c1 + disc) / (T::lit(2.0) * c2);
            let r2 = (-c1 - disc) / (T::lit(2.0) * c2);
            let lin = -c / c1;
            let ok = |r: T| r >= T::zero() && r <= s;
            match (ok(r1), ok(r2)) {
                (true, true) => if (r1 - lin).abs() <= (r2 - lin).abs() { r1 } else { r2 },
                (true, false) => r1,
                (false, true) => r2,
                (false, false) => lin,
            }
        } else {
            -c / c1
        };
        out[d] = Some(x.max(h * T::lit(1e-12)).min(s));
    }
    out
}

/// Second-order ENO one-sided derivatives `(D-, D+)` along `axis`, using the interface as the
/// neighbour (with value zero) when it lies between the node and its neighbour.
fn eno_pair<T: Real>(grid: &QuadtreeGrid<T>, phi: &[T], dd: &[T], iface: &[Option<T>; 4], n: usize, axis: usize) -> (T, T) {
    let nb = grid.axis_neighbors(n);
    let (plus, minus) = if axis == 0 { (nb[0], nb[1]) } else { (nb[2], nb[3]) };
    let (ip, im) = if axis == 0 { (iface[0], iface[1]) } else { (iface[2], iface[3]) };
    let h = grid.h_min();
    let c = phi[n];
    let half = T::lit(0.5);
    let dp = plus.map(|p| {
        let d2 = grid.corner_value(p.corner, dd);
        let m = minmod(dd[n], d2);
        match ip {
            Some(s) => (T::zero() - c) / s - half * s * m,
            None => {
                let s = T::lit(p.span as f64) * h;
                (grid.corner_value(p.corner, phi) - c) / s - half * s * m
            }
        }
    });
    let dm = minus.map(|q| {
        let d2 = grid.corner_value(q.corner, dd);
        let m = minmod(dd[n], d2);
        match im {
            Some(s) => (c - T::zero()) / s + half * s * m,
            None => {
                let s = T::lit(q.span as f64) * h;
                (c - grid.corner_value(q.corner, phi)) / s + half * s * m
            }
        }
    });
    match (dm, dp) {
        (Some(a), Some(b)) => (a, b),
        (Some(a), None) => (a, a),
        (None, Some(b)) => (b, b),
        (None, None) => (T::zero(), T::zero()),
    }
}

/// Godunov upwind approximation of `|grad phi|` for a front moving with sign `s`.
#[inline]
fn godunov<T: Real>(s: T, dxm: T, dxp: T, dym: T, dyp: T) -> T {
    let z = T::zero();
    let sq = |v: T| v * v;
    let g2 = if s > z {
        sq(dxm.max(z)).max(sq(dxp.min(z))) + sq(dym.max(z)).max(sq(dyp.min(z)))
    } else if s < z {
        sq(dxm.min(z)).max(sq(dxp.max(z))) + sq(dym.min(z)).max(sq(dyp.max(z)))
    } else {
        z
    };
    g2.sqrt()
}

struct ReinitFrame<'a, T> {
    sgn: Vec<T>,
    iface: Vec<[Option<T>; 4]>,
    dtau: Vec<T>,
    frozen: Option<&'a [bool]>,
}

fn reinit_stage<T: Real>(grid: &QuadtreeGrid<T>, phi: &[T], f: &ReinitFrame<'_, T>) -> Vec<T> {
    let (dxx, dyy) = second_derivatives_unchecked(grid, phi);
    (0..grid.num_nodes())
        .into_par_iter()
        .map(|n| {
            if f.frozen.is_some_and(|fr| fr[n]) {
                return phi[n];
            }
            let (dxm, dxp) = eno_pair(grid, phi, &dxx, &f.iface[n], n, 0);
            let (dym, dyp) = eno_pair(grid, phi, &dyy, &f.iface[n], n, 1);
            let g = godunov(f.sgn[n], dxm, dxp, dym, dyp);
            phi[n] - f.dtau[n] * f.sgn[n] * (g - T::one())
        })
        .collect()
}

fn reinit_impl<T: Real>(grid: &QuadtreeGrid<T>, phi: &[T], nu: usize, frozen: Option<&[bool]>) -> Result<Vec<T>> {
    check_finite(grid, phi)?;
    if nu == 0 {
        return Ok(phi.to_vec());
    }
    let h = grid.h_min();
    let half = T::lit(0.5);
    let (dxx0, dyy0) = second_derivatives_unchecked(grid, phi);
    let iface: Vec<[Option<T>; 4]> =
        (0..grid.num_nodes()).into_par_iter().map(|n| interface_distances(grid, phi, &dxx0, &dyy0, n)).collect();
    let dtau = iface.iter().map(|d| half * d.iter().flatten().fold(h, |m, &s| m.min(s))).collect();
    let frame = ReinitFrame { sgn: phi.iter().map(|&v| v / (v * v + h * h).sqrt()).collect(), iface, dtau, frozen };
    let mut cur = phi.to_vec();
    for _ in 0..nu {
        let p1 = reinit_stage(grid, &cur, &frame);
        let p2 = reinit_stage(grid, &p1, &frame);
        cur = cur
            .iter()
            .zip(&p2)
            .enumerate()
            .map(|(n, (&a, &b))| if frozen.is_some_and(|f| f[n]) { a } else { half * (a + b) })
            .collect();
    }
    Ok(cur)
}

/// `nu` pseudo-time TVD-RK2 steps of the reinitialization equation.
pub fn reinitialize<T: Real>(grid: &QuadtreeGrid<T>, phi: &[T], nu: usize) -> Result<Vec<T>> {
    reinit_impl(grid, phi, nu, None)
}

/// Reinitialization with the nodes flagged in `frozen` held at their input values.
pub fn reinitialize_masked<T: Real>(grid: &QuadtreeGrid<T>, phi: &[T], frozen: &[bool], nu: usize) -> Result<Vec<T>> {
    check_len(grid, frozen.len())?;
    reinit_impl(grid, phi, nu, Some(frozen))
}

/// Reinitialization protecting the nodes at the given lattice positions.
pub fn selective_reinitialize<T: Real>(
    grid: &QuadtreeGrid<T>,
    phi: &[T],
    protected: &HashSet<LatticeKey>,
    nu: usize,
) -> Result<Vec<T>> {
    let mut frozen = vec![false; grid.num_nodes()];
    for k in protected {
        let n = grid.node_at(*k).ok_or_else(|| {
            let p = grid.key_point(*k);
            Error::OffLattice { x: p[0].to_f64_lossy(), y: p[1].to_f64_lossy() }
        })?;
        frozen[n] = true;
    }
    reinitialize_masked(grid, phi, &frozen, nu)
}

/// Maps coordinates to lattice keys of existing nodes.
pub fn keys_of_points<T: Real>(grid: &QuadtreeGrid<T>, points: &[Point2<T>]) -> Result<HashSet<LatticeKey>> {
    points
        .iter()
        .map(|&p| {
            let k = grid.lattice_key(p)?;
            grid.node_at(k).map(|_| k).ok_or(Error::OffLattice { x: p[0].to_f64_lossy(), y: p[1].to_f64_lossy() })
        })
        .collect()
}

/// Nodes with a complete uniform stencil and an axis-aligned sign change to a direct neighbour.
pub fn nodes_next_to_gamma<T: Real>(grid: &QuadtreeGrid<T>, phi: &[T]) -> Vec<usize> {
    (0..grid.num_nodes())
        .filter(|&n| {
            let s = grid.node_stencil(n).expect("valid node");
            s.complete && [1, 3, 4, 6].iter().any(|&k| phi[n] * phi[s.neighbors[k].unwrap()] <= T::zero())
        })
        .collect()
}

/// Band nodes of the new grid whose motion leaves them behind the interface.
///
/// Normals and velocities come from the previous grid, bilinearly interpolated at new node
/// positions and renormalized. Nodes with zero velocity or zero normal are skipped.
pub fn coords_with_negative_flow<T: Real>(
    grid_next: &QuadtreeGrid<T>,
    phi_next: &[T],
    grid_prev: &QuadtreeGrid<T>,
    normals_prev: &[Point2<T>],
    vel_prev: &[Point2<T>],
) -> Result<HashSet<LatticeKey>> {
    check_len(grid_next, phi_next.len())?;
    check_len(grid_prev, normals_prev.len())?;
    check_len(grid_prev, vel_prev.len())?;
    let band = T::lit(2.0 * std::f64::consts::SQRT_2) * grid_next.h_min();
    let eps = T::lit(GRAD_EPS);
    let theta = T::lit(THETA_W);
    let picked: Vec<Option<LatticeKey>> = (0..grid_next.num_nodes())
        .into_par_iter()
        .map(|n| {
            let phi = phi_next[n];
            if phi.abs() > band {
                return Ok(None);
            }
            let p = grid_next.node_point(n);
            let nv = grid_prev.interp_vector(normals_prev, p, OutsidePolicy::Clamp)?;
            let uv = grid_prev.interp_vector(vel_prev, p, OutsidePolicy::Clamp)?;
            let (nn, un) = (nv[0].hypot(nv[1]), uv[0].hypot(uv[1]));
            if nn <= eps || un <= eps {
                return Ok(None);
            }
            let s = if phi > T::zero() {
                T::one()
            } else if phi < T::zero() {
                -T::one()
            } else {
                T::zero()
            };
            let c = -s * (nv[0] * uv[0] + nv[1] * uv[1]) / (nn * un);
            Ok((c.max(-T::one()).min(T::one()).acos() <= theta).then(|| grid_next.node_key(n)))
        })
        .collect::<Result<_>>()?;
    Ok(picked.into_iter().flatten().collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{build_grid, GridConfig};

    fn circle_grid(l: u32, r: f64) -> (QuadtreeGrid<f64>, Vec<f64>) {
        let cfg = GridConfig::square(-1.0, 1.0, 2, l).with_band(3.0);
        let f = move |p: [f64; 2]| (p[0] * p[0] + p[1] * p[1]).sqrt() - r;
        let g = build_grid::<f64, _>(&cfg, f).unwrap();
        let phi = g.sample_fn(f);
        (g, phi)
    }

    fn band(g: &QuadtreeGrid<f64>, phi: &[f64], w: f64) -> Vec<usize> {
        (0..g.num_nodes()).filter(|&n| phi[n].abs() <= w * g.h_min() && g.stencil_complete(n)).collect()
    }

    #[test]
    fn planar_front_normals() {
        let cfg = GridConfig::square(0.0, 1.0, 1, 5).with_band(2.0);
        let g = build_grid::<f64, _>(&cfg, |p| p[0] - 0.5).unwrap();
        let phi = g.sample_fn(|p| p[0] - 0.5);
        let geo = normals_and_curvature(&g, &phi).unwrap();
        for n in 0..g.num_nodes() {
            if geo.flags[n] == NodeFlag::Ok {
                assert!((geo.normals[n][0] - 1.0).abs() < 1e-14 && geo.normals[n][1].abs() < 1e-14);
                assert_eq!(geo.curvature[n], 0.0);
            }
        }
    }

    #[test]
    fn circle_curvature_positive_and_close() {
        let (g, phi) = circle_grid(7, 0.25);
        let geo = normals_and_curvature(&g, &phi).unwrap();
        for n in band(&g, &phi, 1.0) {
            let p = g.node_point(n);
            let rho = (p[0] * p[0] + p[1] * p[1]).sqrt();
            assert!(geo.curvature[n] > 0.0);
            assert!((geo.curvature[n] - 1.0 / rho).abs() < 0.05 / rho);
            assert!((geo.normals[n][0] - p[0] / rho).abs() < 1e-3);
        }
    }

    #[test]
    fn second_derivatives_of_quadratics() {
        let cfg = GridConfig::square(-1.0, 1.0, 2, 6);
        let g = build_grid::<f64, _>(&cfg, |p| (p[0] * p[0] + p[1] * p[1]).sqrt() - 0.5).unwrap();
        let q = g.sample_fn(|p| p[0] * p[0] + p[1] * p[1]);
        let (xx, yy) = second_derivatives(&g, &q).unwrap();
        for n in 0..g.num_nodes() {
            if g.stencil_complete(n) {
                assert!((xx[n] - 2.0).abs() < 1e-9 && (yy[n] - 2.0).abs() < 1e-9);
            }
        }
        let lin = g.sample_fn(|p| p[0]);
        let (xx, yy) = second_derivatives(&g, &lin).unwrap();
        assert!(xx.iter().chain(&yy).all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn reinit_identity_and_sdf_fixed_point() {
        let (g, phi) = circle_grid(6, 0.3);
        assert_eq!(reinitialize(&g, &phi, 0).unwrap(), phi);
        let out = reinitialize(&g, &phi, 10).unwrap();
        let h = g.h_min();
        for n in band(&g, &phi, 3.0) {
            assert!((out[n] - phi[n]).abs() < 0.1 * h, "drift {}", (out[n] - phi[n]).abs() / h);
        }
    }

    #[test]
    fn reinit_restores_unit_gradient() {
        let (g, phi) = circle_grid(6, 0.3);
        let doubled: Vec<f64> = phi.iter().map(|v| 2.0 * v).collect();
        let out = reinitialize(&g, &doubled, 20).unwrap();
        let h = g.h_min();
        for n in band(&g, &out, 2.0) {
            let d = stencil_derivs(&g, &out, n).unwrap();
            let gn = d[0].hypot(d[1]);
            assert!((0.9..=1.1).contains(&gn), "grad norm {gn} at {:?}", g.node_point(n));
            if phi[n].abs() > 2.0 * h {
                assert_eq!(out[n].signum(), phi[n].signum());
            }
        }
    }

    #[test]
    fn selective_reinit_freezes() {
        let (g, phi) = circle_grid(5, 0.3);
        let scaled: Vec<f64> = phi.iter().map(|v| 1.5 * v).collect();
        let all: HashSet<LatticeKey> = g.node_keys().iter().copied().collect();
        assert_eq!(selective_reinitialize(&g, &scaled, &all, 5).unwrap(), scaled);
        let none = HashSet::new();
        assert_eq!(selective_reinitialize(&g, &scaled, &none, 5).unwrap(), reinitialize(&g, &scaled, 5).unwrap());
        let mut bad = HashSet::new();
        bad.insert(LatticeKey::new(1, 0));
        assert!(selective_reinitialize(&g, &scaled, &bad, 1).is_err());
    }

    #[test]
    fn next_to_gamma_planar() {
        let cfg = GridConfig::square(0.0, 1.0, 1, 5);
        let h = cfg.h_min();
        let f = move |p: [f64; 2]| p[0] - 0.5 - 0.5 * h;
        let g = build_grid::<f64, _>(&cfg.with_band(3.0), f).unwrap();
        let phi = g.sample_fn(f);
        let sel = nodes_next_to_gamma(&g, &phi);
        assert!(!sel.is_empty());
        for n in &sel {
            let x = g.node_point(*n)[0];
            assert!(x == 0.5 || x == 0.5 + h);
        }
        assert!(nodes_next_to_gamma(&g, &vec![1.0; g.num_nodes()]).is_empty());
    }

    #[test]
    fn negative_flow_alignment() {
        let cfg = GridConfig::square(0.0, 1.0, 1, 4).with_band(3.0);
        let g = build_grid::<f64, _>(&cfg, |p| p[0] - 0.5).unwrap();
        let phi: Vec<f64> = vec![-0.01; g.num_nodes()];
        let normals = vec![[1.0, 0.0]; g.num_nodes()];
        let aligned = coords_with_negative_flow(&g, &phi, &g, &normals, &vec![[1.0, 0.0]; g.num_nodes()]).unwrap();
        assert_eq!(aligned.len(), g.num_nodes());
        let opposed = coords_with_negative_flow(&g, &phi, &g, &normals, &vec![[-1.0, 0.0]; g.num_nodes()]).unwrap();
        assert!(opposed.is_empty());
        let still = coords_with_negative_flow(&g, &phi, &g, &normals, &vec![[0.0, 0.0]; g.num_nodes()]).unwrap();
        assert!(still.is_empty());
    }
}
