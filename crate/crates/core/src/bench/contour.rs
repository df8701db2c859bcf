//! Zero-level contour extraction by marching squares over quadtree leaves.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use crate::error::Result;
use crate::grid::QuadtreeGrid;
use crate::real::Point2;

#[derive(Clone, Debug, PartialEq)]
pub struct Polyline {
    pub points: Vec<Point2<f64>>,
    pub closed: bool,
}

fn crossing(p: Point2<f64>, q: Point2<f64>, a: f64, b: f64) -> Point2<f64> {
    let t = a / (a - b);
    [p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]
}

/// Zero-level segments of the bilinear reconstruction, one leaf at a time.
pub fn contour_segments(grid: &QuadtreeGrid<f64>, phi: &[f64]) -> Vec<[Point2<f64>; 2]> {
    let mut segs = Vec::new();
    for l in 0..grid.num_leaves() {
        let c = grid.leaf_corner_values(l, phi);
        let o = grid.leaf_origin(l);
        let w = grid.leaf_width(l);
        let inside = c.map(|v| v < 0.0);
        if inside.iter().all(|&b| b) || inside.iter().all(|&b| !b) {
            continue;
        }
        // Corners counter-clockwise from the lower-left, with their values.
        let pts = [[o[0], o[1]], [o[0] + w, o[1]], [o[0] + w, o[1] + w], [o[0], o[1] + w]];
        let vals = [c[0], c[2], c[3], c[1]];
        let ins = [inside[0], inside[2], inside[3], inside[1]];
        // Edge k joins corner k and k+1.
        let cut: Vec<Option<Point2<f64>>> = (0..4)
            .map(|k| {
                let m = (k + 1) % 4;
                (ins[k] != ins[m]).then(|| crossing(pts[k], pts[m], vals[k], vals[m]))
            })
            .collect();
        let edges: Vec<usize> = (0..4).filter(|&k| cut[k].is_some()).collect();
        if edges.len() == 2 {
            segs.push([cut[edges[0]].unwrap(), cut[edges[1]].unwrap()]);
        } else if edges.len() == 4 {
            let center_inside = vals.iter().sum::<f64>() / 4.0 < 0.0;
            // Pair edges around the corners whose state differs from the center.
            if center_inside == ins[0] {
                segs.push([cut[0].unwrap(), cut[1].unwrap()]);
                segs.push([cut[2].unwrap(), cut[3].unwrap()]);
            } else {
                segs.push([cut[3].unwrap(), cut[0].unwrap()]);
                segs.push([cut[1].unwrap(), cut[2].unwrap()]);
            }
        }
    }
    segs
}

/// Joins segments sharing endpoints (compared on a lattice of `h_min * 1e-7`) into polylines.
pub fn extract_contour(grid: &QuadtreeGrid<f64>, phi: &[f64]) -> Vec<Polyline> {
    let segs = contour_segments(grid, phi);
    let q = grid.h_min() * 1e-7;
    let key = |p: Point2<f64>| ((p[0] / q).round() as i64, (p[1] / q).round() as i64);
    let mut at: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
    for (s, seg) in segs.iter().enumerate() {
        for p in seg {
            at.entry(key(*p)).or_default().push(s);
        }
    }
    let mut used = vec![false; segs.len()];
    let mut out = Vec::new();
    let next_seg = |p: Point2<f64>, used: &[bool]| at.get(&key(p)).and_then(|v| v.iter().copied().find(|&s| !used[s]));
    for s0 in 0..segs.len() {
        if used[s0] {
            continue;
        }
        used[s0] = true;
        let mut pts = vec![segs[s0][0], segs[s0][1]];
        // Extend forward, then backward.
        for dir in 0..2 {
            loop {
                let end = if dir == 0 { *pts.last().unwrap() } else { pts[0] };
                let Some(s) = next_seg(end, &used) else { break };
                used[s] = true;
                let other = if key(segs[s][0]) == key(end) { segs[s][1] } else { segs[s][0] };
                if dir == 0 {
                    pts.push(other);
                } else {
                    pts.insert(0, other);
                }
            }
        }
        let closed = pts.len() > 2 && key(pts[0]) == key(*pts.last().unwrap());
        if closed {
            pts.pop();
        }
        out.push(Polyline { points: pts, closed });
    }
    out
}

pub fn write_contour_csv(lines: &[Polyline], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["polyline", "closed", "x", "y"])?;
    for (i, l) in lines.iter().enumerate() {
        for p in &l.points {
            w.write_record([i.to_string(), (l.closed as u8).to_string(), format!("{:.16e}", p[0]), format!("{:.16e}", p[1])])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// SVG of the computed contour over the domain, optionally with a reference circle.
pub fn contour_svg(lines: &[Polyline], lo: Point2<f64>, hi: Point2<f64>, reference: Option<(Point2<f64>, f64)>) -> String {
    let size = 800.0;
    let s = size / (hi[0] - lo[0]).max(hi[1] - lo[1]);
    let tx = |p: Point2<f64>| ((p[0] - lo[0]) * s, (hi[1] - p[1]) * s);
    let mut out = String::new();
    let (w, h) = ((hi[0] - lo[0]) * s, (hi[1] - lo[1]) * s);
    let _ = writeln!(out, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w:.0}" height="{h:.0}" viewBox="0 0 {w:.3} {h:.3}">"#);
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white" stroke="black"/>"#);
    if let Some((c, r)) = reference {
        let (cx, cy) = tx(c);
        let _ = writeln!(out, r#"<circle cx="{cx:.3}" cy="{cy:.3}" r="{:.3}" fill="none" stroke="gray" stroke-dasharray="4 3"/>"#, r * s);
    }
    for l in lines {
        let pts: Vec<String> = l.points.iter().map(|&p| { let (x, y) = tx(p); format!("{x:.3},{y:.3}") }).collect();
        let tag = if l.closed { "polygon" } else { "polyline" };
        let _ = writeln!(out, r#"<{tag} points="{}" fill="none" stroke="crimson" stroke-width="1.5"/>"#, pts.join(" "));
    }
    out.push_str("</svg>\n");
    out
}

/// Writes `<stem>.csv` and `<stem>.svg` for the zero contour of `phi`.
pub fn emit_contour(grid: &QuadtreeGrid<f64>, phi: &[f64], stem: &Path, reference: Option<(Point2<f64>, f64)>) -> Result<Vec<Polyline>> {
    let lines = extract_contour(grid, phi);
    write_contour_csv(&lines, &stem.with_extension("csv"))?;
    let svg = contour_svg(&lines, grid.origin(), grid.domain_max(), reference);
    std::fs::File::create(stem.with_extension("svg"))?.write_all(svg.as_bytes())?;
    Ok(lines)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{build_grid, GridConfig};

    #[test]
    fn planar_contour_is_one_vertical_line() {
        let f = |p: Point2<f64>| p[0] - 0.3;
        let g = build_grid(&GridConfig::square(0.0, 1.0, 1, 5), f).unwrap();
        let lines = extract_contour(&g, &g.sample_fn(f));
        assert_eq!(lines.len(), 1);
        assert!(!lines[0].closed);
        assert!(lines[0].points.iter().all(|p| (p[0] - 0.3).abs() < 1e-12));
    }

    #[test]
    fn circle_contour_closed_and_round() {
        let f = |p: Point2<f64>| (p[0] * p[0] + p[1] * p[1]).sqrt() - 0.3;
        let g = build_grid(&GridConfig::square(-1.0, 1.0, 2, 6), f).unwrap();
        let lines = extract_contour(&g, &g.sample_fn(f));
        assert_eq!(lines.len(), 1);
        assert!(lines[0].closed);
        let h = g.h_min();
        for p in &lines[0].points {
            assert!(((p[0] * p[0] + p[1] * p[1]).sqrt() - 0.3).abs() < h / 2.0);
        }
    }

    #[test]
    fn empty_interface_writes_header_only() {
        let g = build_grid(&GridConfig::square(0.0, 1.0, 1, 3), |_| 1.0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("c");
        let lines = emit_contour(&g, &vec![1.0; g.num_nodes()], &stem, None).unwrap();
        assert!(lines.is_empty());
        assert_eq!(std::fs::read_to_string(stem.with_extension("csv")).unwrap(), "polyline,closed,x,y\n");
    }
}
