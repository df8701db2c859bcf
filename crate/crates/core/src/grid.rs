//! Non-graded quadtree discretization of a rectangular domain.
//!
//! The domain is tiled by a macromesh of square cells, each the root of a quadtree. All vertex
//! positions live on an integer lattice of spacing `h_min`, which makes vertex deduplication exact.
//! Leaf corners that sit strictly inside an edge of a neighbouring coarser leaf are *hanging*: they
//! carry no degree of freedom and their values are implied by linear interpolation along that edge.
//! Every other leaf corner is an independent *node*.
//!
//! Corner and child slots are indexed `2 * x_bit + y_bit`, i.e. `[00, 01, 10, 11]`.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::{Point2, Real};

const NONE: u32 = u32::MAX;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridConfig {
    pub domain_min: [f64; 2],
    pub domain_max: [f64; 2],
    /// Macrocells per axis.
    pub macromesh: [u32; 2],
    /// Maximum refinement level, counted from the macrocells.
    pub l_max: u32,
    /// Lipschitz constant of the refinement criterion.
    pub lip: f64,
    /// Half-width, in finest-cell diagonals, of the band forced to `l_max` around the interface.
    pub band_halfwidth: f64,
}

impl GridConfig {
    /// `[lo, hi]^2` split into `n x n` unit macrocells.
    pub fn square(lo: f64, hi: f64, n: u32, l_max: u32) -> Self {
        Self {
            domain_min: [lo, lo],
            domain_max: [hi, hi],
            macromesh: [n, n],
            l_max,
            lip: 1.2,
            band_halfwidth: 0.0,
        }
    }

    pub fn with_band(mut self, band_halfwidth: f64) -> Self {
        self.band_halfwidth = band_halfwidth;
        self
    }

    pub fn with_l_max(mut self, l_max: u32) -> Self {
        self.l_max = l_max;
        self
    }

    pub fn macro_width(&self) -> f64 {
        (self.domain_max[0] - self.domain_min[0]) / self.macromesh[0] as f64
    }

    pub fn h_min(&self) -> f64 {
        self.macro_width() / (1u64 << self.l_max) as f64
    }

    pub fn validate<T: Real>(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.l_max < 1 {
            return bad("l_max must be at least 1");
        }
        if !(self.lip > 0.0) || !self.lip.is_finite() {
            return bad("lip must be positive");
        }
        if !(self.band_halfwidth >= 0.0) || !self.band_halfwidth.is_finite() {
            return bad("band_halfwidth must be non-negative");
        }
        if self.macromesh[0] == 0 || self.macromesh[1] == 0 {
            return bad("macromesh must have at least one cell per axis");
        }
        for a in 0..2 {
            if !(self.domain_max[a] > self.domain_min[a]) {
                return bad("domain_max must exceed domain_min componentwise");
            }
        }
        let wx = (self.domain_max[0] - self.domain_min[0]) / self.macromesh[0] as f64;
        let wy = (self.domain_max[1] - self.domain_min[1]) / self.macromesh[1] as f64;
        if wx != wy {
            return bad("macrocells must be square");
        }
        if self.l_max > 30 {
            return bad("l_max too large for the vertex lattice");
        }
        let n = self.macromesh[0].max(self.macromesh[1]) as u64;
        let n_lattice = n << self.l_max;
        let bits = 64 - n_lattice.leading_zeros();
        if bits + 2 > T::mantissa_digits() {
            return bad("l_max too large: vertex coordinates would lose dyadic exactness");
        }
        let h = self.h_min();
        for a in 0..2 {
            let s = self.domain_min[a] / h;
            if s.fract() != 0.0 || s.abs() >= (1u64 << (T::mantissa_digits() - 2)) as f64 {
                return bad("domain origin is not a multiple of the finest cell width");
            }
            let n_a = (self.macromesh[a] as u64) << self.l_max;
            let lo = T::lit(self.domain_min[a]);
            let hi = lo + T::lit(n_a as f64) * T::lit(h);
            if hi != T::lit(self.domain_max[a]) {
                return bad("domain corners are not exactly representable on the lattice");
            }
        }
        Ok(())
    }
}

/// Integer vertex position in units of `h_min` relative to the domain origin.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LatticeKey {
    pub i: u32,
    pub j: u32,
}

impl LatticeKey {
    pub fn new(i: u32, j: u32) -> Self {
        Self { i, j }
    }

    fn offset(self, di: i64, dj: i64, n: [u32; 2]) -> Option<LatticeKey> {
        let i = self.i as i64 + di;
        let j = self.j as i64 + dj;
        if i < 0 || j < 0 || i > n[0] as i64 || j > n[1] as i64 {
            None
        } else {
            Some(LatticeKey::new(i as u32, j as u32))
        }
    }
}

/// A leaf quadrant: refinement level and lower-left corner on the lattice.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Leaf {
    pub level: u32,
    pub i: u32,
    pub j: u32,
}

impl Leaf {
    /// Width in lattice units.
    pub fn span(&self, l_max: u32) -> u32 {
        1 << (l_max - self.level)
    }

    pub fn corner_key(&self, corner: usize, l_max: u32) -> LatticeKey {
        let s = self.span(l_max);
        LatticeKey::new(self.i + s * (corner as u32 >> 1), self.j + s * (corner as u32 & 1))
    }

    fn child(&self, c: usize, l_max: u32) -> Leaf {
        let s = self.span(l_max) / 2;
        Leaf { level: self.level + 1, i: self.i + s * (c as u32 >> 1), j: self.j + s * (c as u32 & 1) }
    }
}

/// Where a leaf corner gets its value from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CornerRef {
    Node(u32),
    /// Index into the grid's table of hanging-vertex interpolation weights.
    Hanging(u32),
}

/// A hanging vertex as a point on the edge `a -> b` of a coarser leaf.
#[derive(Clone, Copy, Debug)]
pub struct HangingEdge<T> {
    pub a: CornerRef,
    pub b: CornerRef,
    /// Fractional position along the edge.
    pub t: T,
    /// Edge length in domain units.
    pub length: T,
    /// 0 if the edge runs along x, 1 if along y.
    pub axis: u8,
}

/// Nearest vertex along one axis direction from a node, at the resolution of the finest
/// incident leaf on that side.
#[derive(Clone, Copy, Debug)]
pub struct AxisNeighbor {
    pub span: u32,
    pub corner: CornerRef,
}

/// Nine-point neighbourhood at spacing `h_min` around a node.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NodeStencil {
    pub center: usize,
    /// Offsets in order (-1,-1), (0,-1), (1,-1), (-1,0), (1,0), (-1,1), (0,1), (1,1).
    pub neighbors: [Option<usize>; 8],
    pub complete: bool,
}

impl NodeStencil {
    pub const OFFSETS: [(i64, i64); 8] =
        [(-1, -1), (0, -1), (1, -1), (-1, 0), (1, 0), (-1, 1), (0, 1), (1, 1)];

    pub fn missing_offsets(&self) -> Vec<(i64, i64)> {
        self.neighbors
            .iter()
            .zip(Self::OFFSETS)
            .filter(|(n, _)| n.is_none())
            .map(|(_, o)| o)
            .collect()
    }
}

#[derive(Clone, Debug)]
struct TreeCell {
    first_child: u32,
    leaf: u32,
}

#[derive(Clone, Debug)]
pub struct QuadtreeGrid<T> {
    config: GridConfig,
    origin: Point2<T>,
    h_min: T,
    n_lattice: [u32; 2],
    cells: Vec<TreeCell>,
    leaves: Vec<Leaf>,
    leaf_corners: Vec<[CornerRef; 4]>,
    hanging: Vec<Vec<(u32, T)>>,
    hanging_edges: Vec<HangingEdge<T>>,
    nodes: Vec<LatticeKey>,
    node_coords: Vec<Point2<T>>,
    node_index: HashMap<LatticeKey, u32>,
    /// Incident leaf per quadrant (`2 * x_side + y_side`), `NONE` outside the domain.
    node_quadrants: Vec<[u32; 4]>,
    /// +x, -x, +y, -y.
    axis_neighbors: Vec<[Option<AxisNeighbor>; 4]>,
    stencils: Vec<[u32; 8]>,
}

/// Builds the grid by recursive subdivision driven by the level-set function `phi`.
pub fn build_grid<T: Real, F>(config: &GridConfig, phi: F) -> Result<QuadtreeGrid<T>>
where
    F: Fn(Point2<T>) -> T,
{
    config.validate::<T>()?;
    let origin = [T::lit(config.domain_min[0]), T::lit(config.domain_min[1])];
    let h = T::lit(config.h_min());
    let mut cache: HashMap<LatticeKey, T> = HashMap::new();
    let mut eval = |k: LatticeKey| -> Result<T> {
        if let Some(v) = cache.get(&k) {
            return Ok(*v);
        }
        let p = [origin[0] + T::lit(k.i as f64) * h, origin[1] + T::lit(k.j as f64) * h];
        let v = phi(p);
        if !v.is_finite() {
            return Err(Error::NonFinite {
                x: p[0].to_f64_lossy(),
                y: p[1].to_f64_lossy(),
                value: v.to_f64_lossy(),
            });
        }
        cache.insert(k, v);
        Ok(v)
    };
    let criterion = RefineCriterion::new(config);
    let mut leaves = Vec::new();
    let mut stack: Vec<Leaf> = Vec::new();
    for root in roots(config).into_iter().rev() {
        stack.push(root);
    }
    while let Some(cell) = stack.pop() {
        let split = if cell.level < config.l_max {
            let mut vals = [T::zero(); 4];
            for (c, v) in vals.iter_mut().enumerate() {
                *v = eval(cell.corner_key(c, config.l_max))?;
            }
            criterion.refine(cell.level, &vals)
        } else {
            false
        };
        if split {
            for c in (0..4).rev() {
                stack.push(cell.child(c, config.l_max));
            }
        } else {
            leaves.push(cell);
        }
    }
    Ok(QuadtreeGrid::assemble(config.clone(), leaves))
}

fn roots(config: &GridConfig) -> Vec<Leaf> {
    let s = 1u32 << config.l_max;
    let mut out = Vec::new();
    for mj in 0..config.macromesh[1] {
        for mi in 0..config.macromesh[0] {
            out.push(Leaf { level: 0, i: mi * s, j: mj * s });
        }
    }
    out
}

/// Refinement test `min |phi(v)| <= Lip * (diag(C) + B * sqrt(2) * h_min)`.
///
/// With `B = 0` this is the plain distance criterion; a positive band widens it so every cell
/// within `B` finest-cell diagonals of the interface reaches `l_max`.
#[derive(Clone, Copy, Debug)]
pub struct RefineCriterion {
    lip: f64,
    macro_diag: f64,
    band: f64,
}

impl RefineCriterion {
    pub fn new(config: &GridConfig) -> Self {
        let sqrt2 = std::f64::consts::SQRT_2;
        Self {
            lip: config.lip,
            macro_diag: config.macro_width() * sqrt2,
            band: config.band_halfwidth * sqrt2 * config.h_min(),
        }
    }

    pub fn threshold<T: Real>(&self, level: u32) -> T {
        let diag = self.macro_diag / (1u64 << level) as f64;
        T::lit(self.lip * (diag + self.band))
    }

    pub fn refine<T: Real>(&self, level: u32, corners: &[T; 4]) -> bool {
        let m = corners.iter().fold(T::infinity(), |m, v| m.min(v.abs()));
        m <= self.threshold(level)
    }
}

impl<T: Real> QuadtreeGrid<T> {
    /// Builds the full grid structure from a leaf partition (DFS order is preserved).
    pub fn assemble(config: GridConfig, leaves: Vec<Leaf>) -> Self {
        let l_max = config.l_max;
        let n_lattice = [config.macromesh[0] << l_max, config.macromesh[1] << l_max];
        let origin = [T::lit(config.domain_min[0]), T::lit(config.domain_min[1])];
        let h_min = T::lit(config.h_min());

        let n_roots = (config.macromesh[0] * config.macromesh[1]) as usize;
        let mut cells: Vec<TreeCell> = vec![TreeCell { first_child: NONE, leaf: NONE }; n_roots];
        let s_root = 1u32 << l_max;
        for (li, leaf) in leaves.iter().enumerate() {
            let mi = leaf.i / s_root;
            let mj = leaf.j / s_root;
            let mut cell = (mi + mj * config.macromesh[0]) as usize;
            for level in 0..leaf.level {
                if cells[cell].first_child == NONE {
                    let first = cells.len() as u32;
                    cells[cell].first_child = first;
                    for _ in 0..4 {
                        cells.push(TreeCell { first_child: NONE, leaf: NONE });
                    }
                }
                let shift = l_max - level - 1;
                let cx = (leaf.i >> shift) & 1;
                let cy = (leaf.j >> shift) & 1;
                cell = (cells[cell].first_child + 2 * cx + cy) as usize;
            }
            cells[cell].leaf = li as u32;
        }

        let mut grid = QuadtreeGrid {
            config,
            origin,
            h_min,
            n_lattice,
            cells,
            leaves,
            leaf_corners: Vec::new(),
            hanging: Vec::new(),
            hanging_edges: Vec::new(),
            nodes: Vec::new(),
            node_coords: Vec::new(),
            node_index: HashMap::new(),
            node_quadrants: Vec::new(),
            axis_neighbors: Vec::new(),
            stencils: Vec::new(),
        };
        grid.finish();
        grid
    }

    fn finish(&mut self) {
        let l_max = self.config.l_max;
        // Classify every leaf corner.
        let mut independent: HashMap<LatticeKey, bool> = HashMap::new();
        for leaf in &self.leaves {
            for c in 0..4 {
                let k = leaf.corner_key(c, l_max);
                if independent.contains_key(&k) {
                    continue;
                }
                let is_node = self.quadrant_leaves(k).iter().all(|&q| {
                    q == NONE || {
                        let l = self.leaves[q as usize];
                        let s = l.span(l_max);
                        (k.i == l.i || k.i == l.i + s) && (k.j == l.j || k.j == l.j + s)
                    }
                });
                independent.insert(k, is_node);
            }
        }
        let mut nodes: Vec<LatticeKey> =
            independent.iter().filter(|(_, &v)| v).map(|(k, _)| *k).collect();
        nodes.sort_by_key(|k| (k.j, k.i));
        self.node_index = nodes.iter().enumerate().map(|(n, k)| (*k, n as u32)).collect();
        self.node_coords = nodes.iter().map(|&k| self.key_point(k)).collect();
        self.nodes = nodes;

        let mut hanging_index: HashMap<LatticeKey, u32> = HashMap::new();
        let mut memo: HashMap<LatticeKey, Vec<(u32, T)>> = HashMap::new();
        let mut leaf_corners = Vec::with_capacity(self.leaves.len());
        for li in 0..self.leaves.len() {
            let leaf = self.leaves[li];
            let mut refs = [CornerRef::Node(0); 4];
            for (c, r) in refs.iter_mut().enumerate() {
                let k = leaf.corner_key(c, l_max);
                *r = match self.node_index.get(&k) {
                    Some(&n) => CornerRef::Node(n),
                    None => {
                        let idx = match hanging_index.get(&k) {
                            Some(&h) => h,
                            None => {
                                let w = self.resolve_vertex(k, &mut memo);
                                self.hanging.push(w);
                                let h = (self.hanging.len() - 1) as u32;
                                hanging_index.insert(k, h);
                                h
                            }
                        };
                        CornerRef::Hanging(idx)
                    }
                };
            }
            leaf_corners.push(refs);
        }
        self.leaf_corners = leaf_corners;
        let mut keys: Vec<(u32, LatticeKey)> = hanging_index.iter().map(|(k, &h)| (h, *k)).collect();
        keys.sort();
        let as_ref = |k: &LatticeKey| match self.node_index.get(k) {
            Some(&n) => CornerRef::Node(n),
            None => CornerRef::Hanging(hanging_index[k]),
        };
        let edges: Vec<HangingEdge<T>> = keys
            .iter()
            .map(|(_, k)| {
                let (a, b, off, span, axis) = self.hanging_edge(*k);
                HangingEdge {
                    a: as_ref(&a),
                    b: as_ref(&b),
                    t: T::lit(off as f64 / span as f64),
                    length: T::lit(span as f64) * self.h_min,
                    axis,
                }
            })
            .collect();
        self.hanging_edges = edges;

        self.node_quadrants = self.nodes.iter().map(|&k| self.quadrant_leaves(k)).collect();
        self.axis_neighbors =
            (0..self.nodes.len()).map(|n| self.compute_axis_neighbors(n)).collect();
        let n_lat = self.n_lattice;
        self.stencils = self
            .nodes
            .iter()
            .map(|&k| {
                let mut s = [NONE; 8];
                for (slot, (di, dj)) in NodeStencil::OFFSETS.iter().enumerate() {
                    if let Some(nk) = k.offset(*di, *dj, n_lat) {
                        if let Some(&n) = self.node_index.get(&nk) {
                            s[slot] = n;
                        }
                    }
                }
                s
            })
            .collect();
    }

    /// Edge of the coarsest incident leaf that `k` hangs on: endpoints, lattice offset of `k`
    /// from the first endpoint, edge span, and edge axis (0 = along x).
    fn hanging_edge(&self, k: LatticeKey) -> (LatticeKey, LatticeKey, u32, u32, u8) {
        let l_max = self.config.l_max;
        let mut best: Option<Leaf> = None;
        for q in self.quadrant_leaves(k) {
            if q == NONE {
                continue;
            }
            let l = self.leaves[q as usize];
            let s = l.span(l_max);
            let corner = (k.i == l.i || k.i == l.i + s) && (k.j == l.j || k.j == l.j + s);
            if !corner && best.is_none_or(|b| l.level < b.level) {
                best = Some(l);
            }
        }
        let l = best.expect("hanging vertex without a coarse neighbour");
        let s = l.span(l_max);
        if k.i == l.i || k.i == l.i + s {
            (LatticeKey::new(k.i, l.j), LatticeKey::new(k.i, l.j + s), k.j - l.j, s, 1)
        } else {
            (LatticeKey::new(l.i, k.j), LatticeKey::new(l.i + s, k.j), k.i - l.i, s, 0)
        }
    }

    /// Interpolation weights of a (possibly hanging) vertex in terms of independent nodes.
    fn resolve_vertex(
        &self,
        k: LatticeKey,
        memo: &mut HashMap<LatticeKey, Vec<(u32, T)>>,
    ) -> Vec<(u32, T)> {
        if let Some(&n) = self.node_index.get(&k) {
            return vec![(n, T::one())];
        }
        if let Some(w) = memo.get(&k) {
            return w.clone();
        }
        let (a, b, t, s_edge, _) = self.hanging_edge(k);
        let t = t as f64 / s_edge as f64;
        let wa = self.resolve_vertex(a, memo);
        let wb = self.resolve_vertex(b, memo);
        let t = T::lit(t);
        let mut out: Vec<(u32, T)> = Vec::with_capacity(wa.len() + wb.len());
        for (n, w) in wa {
            out.push((n, w * (T::one() - t)));
        }
        for (n, w) in wb {
            match out.iter_mut().find(|(m, _)| *m == n) {
                Some(e) => e.1 = e.1 + w * t,
                None => out.push((n, w * t)),
            }
        }
        out.sort_by_key(|e| e.0);
        memo.insert(k, out.clone());
        out
    }

    fn compute_axis_neighbors(&self, n: usize) -> [Option<AxisNeighbor>; 4] {
        let k = self.nodes[n];
        let quads = self.node_quadrants[n];
        let l_max = self.config.l_max;
        // (quadrants on that side, direction)
        let dirs: [([usize; 2], (i64, i64)); 4] = [
            ([2, 3], (1, 0)),
            ([0, 1], (-1, 0)),
            ([1, 3], (0, 1)),
            ([0, 2], (0, -1)),
        ];
        let mut out = [None; 4];
        for (d, (qs, (dx, dy))) in dirs.iter().enumerate() {
            let mut best: Option<(u32, usize)> = None;
            for &q in qs {
                let li = quads[q];
                if li == NONE {
                    continue;
                }
                let s = self.leaves[li as usize].span(l_max);
                if best.is_none_or(|(bs, _)| s < bs) {
                    best = Some((s, li as usize));
                }
            }
            if let Some((s, li)) = best {
                let leaf = self.leaves[li];
                let ni = (k.i as i64 + dx * s as i64) as u32;
                let nj = (k.j as i64 + dy * s as i64) as u32;
                let corner = (2 * ((ni - leaf.i) / s) + (nj - leaf.j) / s) as usize;
                out[d] = Some(AxisNeighbor { span: s, corner: self.leaf_corners[li][corner] });
            }
        }
        out
    }

    /// Leaves owning the four finest cells around a lattice vertex (quadrant `2*qx + qy`).
    fn quadrant_leaves(&self, k: LatticeKey) -> [u32; 4] {
        let mut out = [NONE; 4];
        for qx in 0..2u32 {
            for qy in 0..2u32 {
                let ci = k.i as i64 - 1 + qx as i64;
                let cj = k.j as i64 - 1 + qy as i64;
                if ci < 0 || cj < 0 || ci >= self.n_lattice[0] as i64 || cj >= self.n_lattice[1] as i64
                {
                    continue;
                }
                out[(2 * qx + qy) as usize] = self.leaf_of_fine_cell(ci as u32, cj as u32);
            }
        }
        out
    }

    /// Leaf containing the finest lattice cell with lower-left corner `(ci, cj)`.
    pub fn leaf_of_fine_cell(&self, ci: u32, cj: u32) -> u32 {
        let l_max = self.config.l_max;
        let mi = ci >> l_max;
        let mj = cj >> l_max;
        let mut cell = (mi + mj * self.config.macromesh[0]) as usize;
        let mut level = 0;
        loop {
            let c = &self.cells[cell];
            if c.first_child == NONE {
                return c.leaf;
            }
            let shift = l_max - level - 1;
            let cx = (ci >> shift) & 1;
            let cy = (cj >> shift) & 1;
            cell = (c.first_child + 2 * cx + cy) as usize;
            level += 1;
        }
    }

    pub fn config(&self) -> &GridConfig {
        &self.config
    }

    pub fn l_max(&self) -> u32 {
        self.config.l_max
    }

    pub fn h_min(&self) -> T {
        self.h_min
    }

    pub fn origin(&self) -> Point2<T> {
        self.origin
    }

    pub fn domain_max(&self) -> Point2<T> {
        [
            self.origin[0] + T::lit(self.n_lattice[0] as f64) * self.h_min,
            self.origin[1] + T::lit(self.n_lattice[1] as f64) * self.h_min,
        ]
    }

    pub fn n_lattice(&self) -> [u32; 2] {
        self.n_lattice
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn num_leaves(&self) -> usize {
        self.leaves.len()
    }

    pub fn leaves(&self) -> &[Leaf] {
        &self.leaves
    }

    pub fn leaf(&self, l: usize) -> Leaf {
        self.leaves[l]
    }

    pub fn leaf_origin(&self, l: usize) -> Point2<T> {
        let leaf = self.leaves[l];
        self.key_point(LatticeKey::new(leaf.i, leaf.j))
    }

    pub fn leaf_width(&self, l: usize) -> T {
        T::lit(self.leaves[l].span(self.config.l_max) as f64) * self.h_min
    }

    pub fn leaf_corner_refs(&self, l: usize) -> &[CornerRef; 4] {
        &self.leaf_corners[l]
    }

    pub fn node_key(&self, n: usize) -> LatticeKey {
        self.nodes[n]
    }

    pub fn node_keys(&self) -> &[LatticeKey] {
        &self.nodes
    }

    pub fn node_point(&self, n: usize) -> Point2<T> {
        self.node_coords[n]
    }

    pub fn node_points(&self) -> &[Point2<T>] {
        &self.node_coords
    }

    pub fn node_at(&self, k: LatticeKey) -> Option<usize> {
        self.node_index.get(&k).map(|&n| n as usize)
    }

    pub fn key_point(&self, k: LatticeKey) -> Point2<T> {
        [
            self.origin[0] + T::lit(k.i as f64) * self.h_min,
            self.origin[1] + T::lit(k.j as f64) * self.h_min,
        ]
    }

    /// Exact lattice position of `p`; fails when `p` is not a lattice vertex.
    pub fn lattice_key(&self, p: Point2<T>) -> Result<LatticeKey> {
        let si = (p[0] - self.origin[0]) / self.h_min;
        let sj = (p[1] - self.origin[1]) / self.h_min;
        let off = || Error::OffLattice { x: p[0].to_f64_lossy(), y: p[1].to_f64_lossy() };
        if si.fract() != T::zero() || sj.fract() != T::zero() || si < T::zero() || sj < T::zero() {
            return Err(off());
        }
        let (i, j) = (si.to_u64().ok_or_else(off)?, sj.to_u64().ok_or_else(off)?);
        if i > self.n_lattice[0] as u64 || j > self.n_lattice[1] as u64 {
            return Err(off());
        }
        let k = LatticeKey::new(i as u32, j as u32);
        if self.key_point(k) != p {
            return Err(off());
        }
        Ok(k)
    }

    pub fn contains(&self, p: Point2<T>) -> bool {
        let hi = self.domain_max();
        p[0] >= self.origin[0] && p[0] <= hi[0] && p[1] >= self.origin[1] && p[1] <= hi[1]
    }

    pub fn clamp_to_domain(&self, p: Point2<T>) -> Point2<T> {
        let hi = self.domain_max();
        [p[0].max(self.origin[0]).min(hi[0]), p[1].max(self.origin[1]).min(hi[1])]
    }

    /// Leaf owning `p`, using half-open cells `[x0, x0 + w) x [y0, y0 + w)` closed at the
    /// upper domain boundary. A point on a shared edge or corner therefore belongs to the
    /// cell whose lower-left corner is that point (or lies on that edge).
    pub fn locate_owner(&self, p: Point2<T>) -> Result<usize> {
        if !(self.contains(p)) {
            return Err(Error::OutOfDomain { x: p[0].to_f64_lossy(), y: p[1].to_f64_lossy() });
        }
        let ci = self.fine_index(p[0], 0);
        let cj = self.fine_index(p[1], 1);
        Ok(self.leaf_of_fine_cell(ci, cj) as usize)
    }

    fn fine_index(&self, x: T, axis: usize) -> u32 {
        let s = ((x - self.origin[axis]) / self.h_min).floor();
        let max = self.n_lattice[axis] - 1;
        match s.to_i64() {
            Some(v) if v < 0 => 0,
            Some(v) => (v as u64).min(max as u64) as u32,
            None => 0,
        }
    }

    /// Leaf of level `l_max` whose lower-left corner is `k`, if that leaf exists.
    pub fn finest_leaf_at(&self, k: LatticeKey) -> Option<usize> {
        if k.i >= self.n_lattice[0] || k.j >= self.n_lattice[1] {
            return None;
        }
        let l = self.leaf_of_fine_cell(k.i, k.j) as usize;
        let leaf = self.leaves[l];
        (leaf.level == self.config.l_max).then_some(l)
    }

    pub fn node_stencil(&self, n: usize) -> Result<NodeStencil> {
        let s = self.stencils.get(n).ok_or(Error::InvalidNode(n))?;
        let mut neighbors = [None; 8];
        for (o, &v) in neighbors.iter_mut().zip(s) {
            *o = (v != NONE).then_some(v as usize);
        }
        Ok(NodeStencil { center: n, neighbors, complete: s.iter().all(|&v| v != NONE) })
    }

    pub fn stencil_complete(&self, n: usize) -> bool {
        self.stencils[n].iter().all(|&v| v != NONE)
    }

    pub fn axis_neighbors(&self, n: usize) -> &[Option<AxisNeighbor>; 4] {
        &self.axis_neighbors[n]
    }

    /// Leaves incident to node `n` (quadrant order `2*qx + qy`).
    pub fn incident_leaves(&self, n: usize) -> impl Iterator<Item = usize> + '_ {
        self.node_quadrants[n].iter().filter(|&&l| l != NONE).map(|&l| l as usize)
    }

    #[inline]
    pub fn corner_value(&self, r: CornerRef, values: &[T]) -> T {
        match r {
            CornerRef::Node(n) => values[n as usize],
            CornerRef::Hanging(h) => {
                self.hanging[h as usize].iter().fold(T::zero(), |acc, &(n, w)| acc + w * values[n as usize])
            }
        }
    }

    #[inline]
    pub fn corner_vector(&self, r: CornerRef, values: &[Point2<T>]) -> Point2<T> {
        match r {
            CornerRef::Node(n) => values[n as usize],
            CornerRef::Hanging(h) => self.hanging[h as usize].iter().fold(
                [T::zero(), T::zero()],
                |acc, &(n, w)| [acc[0] + w * values[n as usize][0], acc[1] + w * values[n as usize][1]],
            ),
        }
    }

    /// Value at a corner using the coarse neighbour's quadratic interpolant for hanging vertices.
    pub fn corner_value_quadratic(&self, r: CornerRef, values: &[T], dxx: &[T], dyy: &[T]) -> T {
        match r {
            CornerRef::Node(n) => values[n as usize],
            CornerRef::Hanging(h) => {
                let e = self.hanging_edges[h as usize];
                let one = T::one();
                let va = self.corner_value_quadratic(e.a, values, dxx, dyy);
                let vb = self.corner_value_quadratic(e.b, values, dxx, dyy);
                let dd = if e.axis == 0 { dxx } else { dyy };
                let da = self.corner_value(e.a, dd);
                let db = self.corner_value(e.b, dd);
                let d = (one - e.t) * da + e.t * db;
                (one - e.t) * va + e.t * vb - e.length * e.length * e.t * (one - e.t) / T::lit(2.0) * d
            }
        }
    }

    pub fn hanging_edge_of(&self, h: usize) -> &HangingEdge<T> {
        &self.hanging_edges[h]
    }

    pub fn leaf_corner_values(&self, l: usize, values: &[T]) -> [T; 4] {
        let r = &self.leaf_corners[l];
        [
            self.corner_value(r[0], values),
            self.corner_value(r[1], values),
            self.corner_value(r[2], values),
            self.corner_value(r[3], values),
        ]
    }

    pub fn leaf_corner_vectors(&self, l: usize, values: &[Point2<T>]) -> [Point2<T>; 4] {
        let r = &self.leaf_corners[l];
        [
            self.corner_vector(r[0], values),
            self.corner_vector(r[1], values),
            self.corner_vector(r[2], values),
            self.corner_vector(r[3], values),
        ]
    }

    pub fn criterion(&self) -> RefineCriterion {
        RefineCriterion::new(&self.config)
    }

    /// One refine/coarsen sweep driven by nodal values: leaves meeting the criterion split once,
    /// and sibling groups of leaves merge when their parent fails it and none of them splits.
    pub fn refine_and_coarsen(&self, values: &[T]) -> Result<QuadtreeGrid<T>> {
        if values.len() != self.num_nodes() {
            return Err(Error::FieldSize { expected: self.num_nodes(), got: values.len() });
        }
        let crit = self.criterion();
        let l_max = self.config.l_max;
        let mut out = Vec::with_capacity(self.leaves.len());
        let n_roots = (self.config.macromesh[0] * self.config.macromesh[1]) as usize;
        let roots = roots(&self.config);
        for (r, root) in roots.iter().enumerate().take(n_roots) {
            self.regrid_cell(r, *root, &crit, values, l_max, &mut out);
        }
        Ok(QuadtreeGrid::assemble(self.config.clone(), out))
    }

    fn leaf_splits(&self, l: usize, crit: &RefineCriterion, values: &[T]) -> bool {
        let leaf = self.leaves[l];
        leaf.level < self.config.l_max && crit.refine(leaf.level, &self.leaf_corner_values(l, values))
    }

    fn regrid_cell(
        &self,
        cell: usize,
        geom: Leaf,
        crit: &RefineCriterion,
        values: &[T],
        l_max: u32,
        out: &mut Vec<Leaf>,
    ) {
        let c = &self.cells[cell];
        if c.first_child == NONE {
            let l = c.leaf as usize;
            if self.leaf_splits(l, crit, values) {
                for k in 0..4 {
                    out.push(geom.child(k, l_max));
                }
            } else {
                out.push(geom);
            }
            return;
        }
        let first = c.first_child as usize;
        let kids: Vec<u32> = (0..4).map(|k| self.cells[first + k].leaf).collect();
        if kids.iter().all(|&l| l != NONE) && kids.iter().all(|&l| !self.leaf_splits(l as usize, crit, values))
        {
            let mut parent = [T::zero(); 4];
            for (k, p) in parent.iter_mut().enumerate() {
                *p = self.corner_value(self.leaf_corners[kids[k] as usize][k], values);
            }
            if !crit.refine(geom.level, &parent) {
                out.push(geom);
                return;
            }
        }
        for k in 0..4 {
            self.regrid_cell(first + k, geom.child(k, l_max), crit, values, l_max, out);
        }
    }

    pub fn same_leaves(&self, other: &QuadtreeGrid<T>) -> bool {
        self.leaves == other.leaves
    }

    /// Plain-text listing: one `leaf level x0 y0 width` line per leaf, then one
    /// `node index x y` line per independent vertex.
    pub fn dump(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# leaves {} nodes {} h_min {:e}", self.leaves.len(), self.nodes.len(), self.h_min);
        for l in 0..self.leaves.len() {
            let o = self.leaf_origin(l);
            let _ = writeln!(s, "leaf {} {:e} {:e} {:e}", self.leaves[l].level, o[0], o[1], self.leaf_width(l));
        }
        for (n, p) in self.node_coords.iter().enumerate() {
            let _ = writeln!(s, "node {} {:e} {:e}", n, p[0], p[1]);
        }
        s
    }

    /// Evaluates a function at every node.
    pub fn sample_fn<V, F: Fn(Point2<T>) -> V>(&self, f: F) -> Vec<V> {
        self.node_coords.iter().map(|&p| f(p)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn circle(c: [f64; 2], r: f64) -> impl Fn(Point2<f64>) -> f64 {
        move |p| ((p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2)).sqrt() - r
    }

    #[test]
    fn h_min_matches_level() {
        let cfg = GridConfig::square(-1.0, 1.0, 2, 6);
        let g = build_grid::<f64, _>(&cfg, circle([0.0, 0.75], 0.15)).unwrap();
        assert_eq!(g.h_min(), 0.015625);
        assert!(g.leaves().iter().any(|l| l.level == 6));
    }

    #[test]
    fn far_interface_keeps_macrocells() {
        let cfg = GridConfig::square(-1.0, 1.0, 2, 5);
        let g = build_grid::<f64, _>(&cfg, |_| 10.0).unwrap();
        assert_eq!(g.num_leaves(), 4);
        assert!(g.leaves().iter().all(|l| l.level == 0));
        assert_eq!(g.num_nodes(), 9);
    }

    #[test]
    fn constant_one_refines_once_on_unit_macrocells() {
        // 1 <= 1.2 * sqrt(2) at level 0 but not at level 1.
        let cfg = GridConfig::square(-1.0, 1.0, 2, 5);
        let g = build_grid::<f64, _>(&cfg, |_| 1.0).unwrap();
        assert!(g.leaves().iter().all(|l| l.level == 1));
    }

    #[test]
    fn rejects_non_finite_and_deep_levels() {
        let cfg = GridConfig::square(-1.0, 1.0, 2, 4);
        assert!(matches!(build_grid::<f64, _>(&cfg, |_| f64::NAN), Err(Error::NonFinite { .. })));
        let deep = GridConfig::square(-1.0, 1.0, 2, 23);
        assert!(build_grid::<f32, _>(&deep, |_| 1.0f32).is_err());
        assert!(deep.validate::<f64>().is_ok());
    }

    #[test]
    fn leaves_tile_domain() {
        let cfg = GridConfig::square(-1.0, 1.0, 2, 7);
        let g = build_grid::<f64, _>(&cfg, circle([0.1, -0.2], 0.3)).unwrap();
        let area: f64 = (0..g.num_leaves()).map(|l| g.leaf_width(l).powi(2)).sum();
        assert_eq!(area, 4.0);
    }

    #[test]
    fn hanging_vertices_are_not_nodes() {
        let cfg = GridConfig::square(0.0, 1.0, 1, 6);
        let g = build_grid::<f64, _>(&cfg, circle([0.5, 0.5], 0.2)).unwrap();
        // Every node is a corner of each incident leaf.
        for n in 0..g.num_nodes() {
            let k = g.node_key(n);
            for l in g.incident_leaves(n) {
                let leaf = g.leaf(l);
                let s = leaf.span(g.l_max());
                assert!((k.i == leaf.i || k.i == leaf.i + s) && (k.j == leaf.j || k.j == leaf.j + s));
            }
        }
        // Hanging weights reproduce linear functions.
        let lin: Vec<f64> = g.node_points().iter().map(|p| 3.0 * p[0] - 2.0 * p[1] + 0.5).collect();
        for l in 0..g.num_leaves() {
            let vals = g.leaf_corner_values(l, &lin);
            for (c, v) in vals.iter().enumerate() {
                let p = g.key_point(g.leaf(l).corner_key(c, g.l_max()));
                assert!((v - (3.0 * p[0] - 2.0 * p[1] + 0.5)).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn locate_tie_break_and_errors() {
        let cfg = GridConfig::square(0.0, 1.0, 1, 3);
        let g = build_grid::<f64, _>(&cfg, |_| 0.0).unwrap();
        let l = g.locate_owner([0.5, 0.5]).unwrap();
        assert_eq!(g.leaf_origin(l), [0.5, 0.5]);
        let l = g.locate_owner([1.0, 1.0]).unwrap();
        assert_eq!(g.leaf_origin(l), [0.875, 0.875]);
        assert!(matches!(g.locate_owner([1.01, 0.5]), Err(Error::OutOfDomain { .. })));
    }

    #[test]
    fn lattice_key_rejects_off_lattice() {
        let cfg = GridConfig::square(-1.0, 1.0, 2, 4);
        let g = build_grid::<f64, _>(&cfg, |_| 0.0).unwrap();
        assert_eq!(g.lattice_key([-1.0, -1.0]).unwrap(), LatticeKey::new(0, 0));
        assert_eq!(g.lattice_key([0.0625, 1.0]).unwrap(), LatticeKey::new(17, 32));
        assert!(g.lattice_key([0.01, 0.0]).is_err());
        assert!(g.lattice_key([1.5, 0.0]).is_err());
    }

    #[test]
    fn stencils_on_uniform_and_transition_nodes() {
        let cfg = GridConfig::square(0.0, 1.0, 1, 6).with_band(3.0);
        let g = build_grid::<f64, _>(&cfg, circle([0.5, 0.5], 0.25)).unwrap();
        let h = g.h_min();
        let on_circle = g.node_at(g.lattice_key([0.75, 0.5]).unwrap()).unwrap();
        assert!(g.node_stencil(on_circle).unwrap().complete);
        // Some node must touch a coarser leaf and miss neighbours.
        let transition = (0..g.num_nodes())
            .find(|&n| {
                let lv: Vec<u32> = g.incident_leaves(n).map(|l| g.leaf(l).level).collect();
                lv.contains(&6) && lv.iter().any(|&x| x < 6)
            })
            .unwrap();
        let st = g.node_stencil(transition).unwrap();
        assert!(!st.complete);
        assert!(!st.missing_offsets().is_empty());
        assert!(g.node_stencil(g.num_nodes()).is_err());
        assert_eq!(h, 1.0 / 64.0);
    }

    #[test]
    fn regrid_with_own_values_is_fixed_point() {
        let cfg = GridConfig::square(-1.0, 1.0, 2, 6);
        let f = circle([0.2, 0.1], 0.3);
        let g = build_grid::<f64, _>(&cfg, &f).unwrap();
        let vals = g.sample_fn(&f);
        let g2 = g.refine_and_coarsen(&vals).unwrap();
        assert!(g.same_leaves(&g2));
    }
}
