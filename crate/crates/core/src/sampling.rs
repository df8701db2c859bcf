//! Data packets for interface-adjacent vertices and their canonicalizing transforms.

use serde::{Deserialize, Serialize};

use crate::advect::{departure_point, SimulationState};
use crate::error::{Error, Result};
use crate::field_ops::nodes_next_to_gamma;
use crate::interp::{bilinear_local, OutsidePolicy, QuadraticField};
use crate::real::{Point2, Real};

/// Velocities at or below this norm make a node unusable.
pub const VELOCITY_EPS: f64 = 1e-10;

pub const PACKET_LEN: usize = 22;

pub const PACKET_COLUMNS: [&str; PACKET_LEN] = [
    "phi_a", "u_hat_x", "u_hat_y", "d", "xd", "yd", "phi00", "phi01", "phi10", "phi11", "u00x", "u00y", "u01x",
    "u01y", "u10x", "u10y", "u11x", "u11y", "phixx_d", "phiyy_d", "kappa_a", "phi_d",
];

/// Local record of one backtracked interface-adjacent vertex.
///
/// Corner slots are `[00, 01, 10, 11]` of the finest cell holding the departure point.
/// `xd` is the departure point relative to the arrival point in units of `h`; in standard form
/// the arrival point is corner `00` and `xd` is the cell-local coordinate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataPacket<T> {
    pub phi_a: T,
    pub u_hat: Point2<T>,
    pub d: T,
    pub xd: Point2<T>,
    pub phi_corners: [T; 4],
    pub u_corners: [Point2<T>; 4],
    pub phixx_d: T,
    pub phiyy_d: T,
    pub kappa_a: T,
    pub phi_d: T,
}

impl<T: Real> DataPacket<T> {
    pub fn to_array(&self) -> [T; PACKET_LEN] {
        let c = &self.phi_corners;
        let u = &self.u_corners;
        [
            self.phi_a, self.u_hat[0], self.u_hat[1], self.d, self.xd[0], self.xd[1], c[0], c[1], c[2], c[3],
            u[0][0], u[0][1], u[1][0], u[1][1], u[2][0], u[2][1], u[3][0], u[3][1], self.phixx_d, self.phiyy_d,
            self.kappa_a, self.phi_d,
        ]
    }

    pub fn from_array(a: &[T; PACKET_LEN]) -> Self {
        Self {
            phi_a: a[0],
            u_hat: [a[1], a[2]],
            d: a[3],
            xd: [a[4], a[5]],
            phi_corners: [a[6], a[7], a[8], a[9]],
            u_corners: [[a[10], a[11]], [a[12], a[13]], [a[14], a[15]], [a[16], a[17]]],
            phixx_d: a[18],
            phiyy_d: a[19],
            kappa_a: a[20],
            phi_d: a[21],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LearningTuple {
    pub packet: DataPacket<f64>,
    /// Fine-grid departure value divided by the coarse `h`.
    pub target: f64,
}

/// Quadrant of a nonzero vector, half-open so that the four quadrants partition the plane:
/// 0 = {x > 0, y >= 0}, 1 = {x <= 0, y > 0}, 2 = {x < 0, y <= 0}, 3 = {x >= 0, y < 0}.
pub fn quadrant<T: Real>(v: Point2<T>) -> Option<usize> {
    let z = T::zero();
    if v[0] > z && v[1] >= z {
        Some(0)
    } else if v[0] <= z && v[1] > z {
        Some(1)
    } else if v[0] < z && v[1] <= z {
        Some(2)
    } else if v[0] >= z && v[1] < z {
        Some(3)
    } else {
        None
    }
}

/// Corner of the packet cell occupied by the arrival point when `-u_hat` lies in quadrant `q`.
pub const ARRIVAL_CORNER: [(i32, i32); 4] = [(0, 0), (1, 0), (1, 1), (0, 1)];

#[inline]
fn rot<T: Real>(v: Point2<T>, k: usize) -> Point2<T> {
    match k % 4 {
        0 => v,
        1 => [-v[1], v[0]],
        2 => [-v[0], -v[1]],
        _ => [v[1], -v[0]],
    }
}

#[inline]
fn rot_i(v: (i32, i32), k: usize) -> (i32, i32) {
    match k % 4 {
        0 => v,
        1 => (-v.1, v.0),
        2 => (-v.0, -v.1),
        _ => (v.1, -v.0),
    }
}

/// Slot mapping of a `k` counter-clockwise quarter-turn when `-u_hat` is in quadrant `q`:
/// `table[q][k][old_slot] = new_slot`.
pub fn rotation_slots(q: usize, k: usize) -> [usize; 4] {
    let a = ARRIVAL_CORNER[q];
    let b = ARRIVAL_CORNER[(q + k) % 4];
    let mut out = [0; 4];
    for (s, o) in out.iter_mut().enumerate() {
        let off = ((s >> 1) as i32 - a.0, (s & 1) as i32 - a.1);
        let r = rot_i(off, k);
        *o = (2 * (r.0 + b.0) + (r.1 + b.1)) as usize;
    }
    out
}

/// Rotates the configuration by `k` counter-clockwise quarter turns about the arrival point.
pub fn rotate<T: Real>(p: &DataPacket<T>, k: usize) -> Result<DataPacket<T>> {
    let v = [-p.u_hat[0], -p.u_hat[1]];
    let q = quadrant(v).ok_or_else(|| Error::NonFiniteValue("packet velocity is zero".into()))?;
    let slots = rotation_slots(q, k);
    let mut out = *p;
    out.u_hat = rot(p.u_hat, k);
    out.xd = rot(p.xd, k);
    for s in 0..4 {
        out.phi_corners[slots[s]] = p.phi_corners[s];
        out.u_corners[slots[s]] = rot(p.u_corners[s], k);
    }
    if k % 2 == 1 {
        out.phixx_d = p.phiyy_d;
        out.phiyy_d = p.phixx_d;
    }
    Ok(out)
}

/// Rotates into standard form (`-u_hat` in the closed first quadrant, arrival point at corner
/// `00`) and returns the number of counter-clockwise quarter turns applied.
pub fn reorient<T: Real>(p: &DataPacket<T>) -> Result<(DataPacket<T>, usize)> {
    let q = quadrant([-p.u_hat[0], -p.u_hat[1]]).ok_or_else(|| Error::NonFiniteValue("packet velocity is zero".into()))?;
    let k = (4 - q) % 4;
    Ok((rotate(p, k)?, k))
}

/// Mirror image across the diagonal through the arrival point.
pub fn reflect<T: Real>(p: &DataPacket<T>) -> DataPacket<T> {
    let sw = |v: Point2<T>| [v[1], v[0]];
    let c = p.phi_corners;
    let u = p.u_corners;
    DataPacket {
        u_hat: sw(p.u_hat),
        xd: sw(p.xd),
        phi_corners: [c[0], c[2], c[1], c[3]],
        u_corners: [sw(u[0]), sw(u[2]), sw(u[1]), sw(u[3])],
        phixx_d: p.phiyy_d,
        phiyy_d: p.phixx_d,
        ..*p
    }
}

fn negate_level_set<T: Real>(p: &DataPacket<T>) -> DataPacket<T> {
    DataPacket {
        phi_a: -p.phi_a,
        phi_corners: p.phi_corners.map(|v| -v),
        phi_d: -p.phi_d,
        kappa_a: -p.kappa_a,
        phixx_d: -p.phixx_d,
        phiyy_d: -p.phiyy_d,
        ..*p
    }
}

/// Negates all level-set quantities when the curvature is positive.
/// Returns `+1` if the packet was negated and `-1` otherwise.
pub fn normalize_curvature_sign<T: Real>(p: &DataPacket<T>) -> (DataPacket<T>, i8) {
    if p.kappa_a > T::zero() {
        (negate_level_set(p), 1)
    } else {
        (*p, -1)
    }
}

/// Undoes [`normalize_curvature_sign`] given the returned sign.
pub fn restore_curvature_sign<T: Real>(p: &DataPacket<T>, sign: i8) -> DataPacket<T> {
    if sign > 0 {
        negate_level_set(p)
    } else {
        *p
    }
}

/// Auxiliary nodal fields needed to build packets on a state's grid.
#[derive(Clone, Copy, Debug)]
pub struct PacketInputs<'a, T> {
    pub normals: &'a [Point2<T>],
    pub curvature: &'a [T],
    pub phixx: &'a [T],
    pub phiyy: &'a [T],
}

/// Packet at `node`, or `None` if it fails the validity rules.
pub fn packet_at<T: Real>(state: &SimulationState<T>, aux: &PacketInputs<'_, T>, node: usize, dt: T) -> Result<Option<DataPacket<T>>> {
    let grid = &state.grid;
    let x_a = grid.node_point(node);
    let dep = departure_point(grid, &state.vel, x_a, dt, None)?;
    let u_hat = dep.u_hat;
    if u_hat[0].hypot(u_hat[1]) <= T::lit(VELOCITY_EPS) || !dep.inside {
        return Ok(None);
    }
    let q = quadrant([-u_hat[0], -u_hat[1]]).expect("nonzero velocity");
    let a = ARRIVAL_CORNER[q];
    let ka = grid.node_key(node);
    let (ci, cj) = (ka.i as i64 - a.0 as i64, ka.j as i64 - a.1 as i64);
    if ci < 0 || cj < 0 {
        return Ok(None);
    }
    let Some(leaf) = grid.finest_leaf_at(crate::grid::LatticeKey::new(ci as u32, cj as u32)) else {
        return Ok(None);
    };
    let h = grid.h_min();
    let o = grid.leaf_origin(leaf);
    let (al, be) = ((dep.x_d[0] - o[0]) / h, (dep.x_d[1] - o[1]) / h);
    if !(al >= T::zero() && al <= T::one() && be >= T::zero() && be <= T::one()) {
        return Ok(None);
    }
    let phi_corners = grid.leaf_corner_values(leaf, &state.phi);
    let u_corners = grid.leaf_corner_vectors(leaf, &state.vel);
    let dxx = grid.leaf_corner_values(leaf, aux.phixx);
    let dyy = grid.leaf_corner_values(leaf, aux.phiyy);
    let field = QuadraticField { phi: &state.phi, phixx: aux.phixx, phiyy: aux.phiyy };
    let phi_d = grid.interp_quadratic(&field, dep.x_d, OutsidePolicy::Error)?;
    let phi_a = state.phi[node];
    let n = aux.normals[node];
    let proj = grid.clamp_to_domain([x_a[0] - phi_a * n[0], x_a[1] - phi_a * n[1]]);
    let kappa_a = grid.interp_bilinear(aux.curvature, proj, OutsidePolicy::Error)?;
    let off = [dep.x_d[0] - x_a[0], dep.x_d[1] - x_a[1]];
    let p = DataPacket {
        phi_a,
        u_hat,
        d: off[0].hypot(off[1]),
        xd: [off[0] / h, off[1] / h],
        phi_corners,
        u_corners,
        phixx_d: bilinear_local(&dxx, al, be),
        phiyy_d: bilinear_local(&dyy, al, be),
        kappa_a,
        phi_d,
    };
    Ok(p.is_finite().then_some(p))
}

/// Packets for every valid vertex next to the interface, with their node indices.
pub fn collect_data_packets<T: Real>(state: &SimulationState<T>, aux: &PacketInputs<'_, T>, dt: T) -> Result<Vec<(usize, DataPacket<T>)>> {
    use rayon::prelude::*;
    let nodes = nodes_next_to_gamma(&state.grid, &state.phi);
    let found: Vec<Option<(usize, DataPacket<T>)>> = nodes
        .par_iter()
        .map(|&n| Ok(packet_at(state, aux, n, dt)?.map(|p| (n, p))))
        .collect::<Result<_>>()?;
    Ok(found.into_iter().flatten().collect())
}

/// Curvature-normalized, reoriented packet plus the data needed to map a prediction back.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StandardPacket<T> {
    pub packet: DataPacket<T>,
    pub sign: i8,
    pub turns: usize,
}

pub fn to_standard_form<T: Real>(p: &DataPacket<T>) -> Result<StandardPacket<T>> {
    let (n, sign) = normalize_curvature_sign(p);
    let (packet, turns) = reorient(&n)?;
    Ok(StandardPacket { packet, sign, turns })
}
