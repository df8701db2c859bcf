//! Rotation and vortex benchmarks, metrics and contour output.

pub mod contour;
pub mod measure;

use std::f64::consts::{FRAC_1_SQRT_2, PI, SQRT_2};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::advect::{semi_lagrangian_step, step_sizes, SimulationState, StepOptions, VelocityField};
use crate::error::{Error, Result};
use crate::field_ops::reinitialize;
use crate::grid::GridConfig;
use crate::hybrid::{simulate_hybrid_with, HybridStepStats, ModelBundle};
use crate::real::Point2;

pub use measure::{band_error, has_interface, negative_area, BandError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Numerical,
    Hybrid,
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "numerical" => Ok(Method::Numerical),
            "hybrid" => Ok(Method::Hybrid),
            _ => Err(Error::Config(format!("unknown method `{s}`"))),
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::Numerical => "numerical",
            Method::Hybrid => "hybrid",
        })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BenchSettings {
    pub l_max: u32,
    pub nu: usize,
    pub cfl: f64,
    /// Uniform band half-width (finest-cell diagonals) kept around the interface.
    pub band: f64,
}

impl BenchSettings {
    pub fn new(l_max: u32) -> Self {
        Self { l_max, nu: 10, cfl: 1.0, band: DEFAULT_BAND }
    }
}

/// Default uniform band for benchmark grids.
pub const DEFAULT_BAND: f64 = 2.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub label: String,
    pub time: f64,
    pub mae: f64,
    pub linf: f64,
    pub area: f64,
    pub area_loss_pct: f64,
    /// No sign change left anywhere in the field.
    pub vanished: bool,
}

#[derive(Clone, Debug)]
pub struct BenchRun {
    pub reports: Vec<BenchReport>,
    pub final_state: SimulationState<f64>,
    pub step_stats: Vec<HybridStepStats>,
    pub wall_time_s: f64,
}

pub const DISK_RADIUS: f64 = 0.15;

pub fn reference_area() -> f64 {
    PI * DISK_RADIUS * DISK_RADIUS
}

pub fn disk_sdf(center: Point2<f64>, r: f64) -> impl Fn(Point2<f64>) -> f64 + Sync + Copy {
    move |p: Point2<f64>| ((p[0] - center[0]).powi(2) + (p[1] - center[1]).powi(2)).sqrt() - r
}

/// Rigid rotation about the origin with unit speed at radius sqrt(2).
pub fn rotation_velocity(p: Point2<f64>, _t: f64) -> Point2<f64> {
    [-p[1] * FRAC_1_SQRT_2, p[0] * FRAC_1_SQRT_2]
}

pub fn rotation_period() -> f64 {
    2.0 * PI * SQRT_2
}

/// Center of the rotating disk at time `t`.
pub fn rotation_center(t: f64) -> Point2<f64> {
    let w = t * FRAC_1_SQRT_2;
    let (c0, c1) = (0.0, 0.75);
    [c0 * w.cos() - c1 * w.sin(), c0 * w.sin() + c1 * w.cos()]
}

pub fn vortex_field(p: Point2<f64>) -> Point2<f64> {
    let (x, y) = (p[0], p[1]);
    [
        -(PI * x).sin().powi(2) * (2.0 * PI * y).sin(),
        (PI * y).sin().powi(2) * (2.0 * PI * x).sin(),
    ]
}

/// Vortex flow, reversed from `t_mid` on.
#[derive(Clone, Copy, Debug)]
pub struct ReversingVortex {
    pub t_mid: f64,
}

impl VelocityField<f64> for ReversingVortex {
    fn velocity(&self, p: Point2<f64>, t: f64) -> Point2<f64> {
        let u = vortex_field(p);
        if t < self.t_mid {
            u
        } else {
            [-u[0], -u[1]]
        }
    }
}

pub fn rotation_grid(l_max: u32, band: f64) -> GridConfig {
    GridConfig::square(-1.0, 1.0, 2, l_max).with_band(band)
}

pub fn vortex_grid(l_max: u32, band: f64) -> GridConfig {
    GridConfig::square(0.0, 1.0, 1, l_max).with_band(band)
}

pub fn report<F: Fn(Point2<f64>) -> f64 + Sync>(label: &str, state: &SimulationState<f64>, exact: F) -> Result<BenchReport> {
    let e = band_error(&state.grid, &state.phi, exact);
    let area = negative_area(&state.grid, &state.phi)?;
    let a0 = reference_area();
    Ok(BenchReport {
        label: label.to_string(),
        time: state.time,
        mae: e.mae,
        linf: e.linf,
        area,
        area_loss_pct: 100.0 * (a0 - area) / a0,
        vanished: !has_interface(&state.grid, &state.phi),
    })
}

/// Purely numerical advection: a semi-Lagrangian step followed by `nu` reinitialization
/// iterations, with `dt = cfl * h_min` (the final step truncated to land on `t_end`).
pub fn simulate_numerical<V: VelocityField<f64> + ?Sized>(
    initial: &SimulationState<f64>,
    velocity: &V,
    t_end: f64,
    nu: usize,
    cfl: f64,
) -> Result<SimulationState<f64>> {
    let mut state = initial.clone();
    let steps = step_sizes(t_end - state.time, cfl * state.h());
    let last = steps.len().saturating_sub(1);
    for (k, dt) in steps.into_iter().enumerate() {
        let mut next = semi_lagrangian_step(&state, dt, velocity, StepOptions::default())?;
        if k == last {
            next.time = t_end;
        }
        next.phi = reinitialize(&next.grid, &next.phi, nu)?;
        state = next;
    }
    Ok(state)
}

/// Time-dependent analytic signed distance used for per-step diagnostics.
type Reference<'a> = Option<&'a (dyn Fn(Point2<f64>, f64) -> f64 + Sync)>;

#[allow(clippy::too_many_arguments)]
fn advance<V: VelocityField<f64> + ?Sized>(
    method: Method,
    model: Option<&ModelBundle>,
    state: &SimulationState<f64>,
    velocity: &V,
    t_end: f64,
    s: &BenchSettings,
    stats: &mut Vec<HybridStepStats>,
    exact: Reference<'_>,
) -> Result<SimulationState<f64>> {
    match method {
        Method::Numerical => simulate_numerical(state, velocity, t_end, s.nu, s.cfl),
        Method::Hybrid => {
            let model = model.ok_or_else(|| Error::Config("hybrid method needs a model".into()))?;
            let mut observe = |st: &SimulationState<f64>, d: &mut HybridStepStats| -> Result<()> {
                d.area = negative_area(&st.grid, &st.phi)?;
                if let Some(f) = exact {
                    d.band_mae = band_error(&st.grid, &st.phi, |p| f(p, st.time)).mae;
                }
                Ok(())
            };
            let (next, st) = simulate_hybrid_with(model, state, velocity, t_end, s.nu, s.cfl, &mut observe)?;
            stats.extend(st);
            Ok(next)
        }
    }
}

/// Disk of radius 0.15 rotated about the origin; one report per completed revolution.
pub fn run_rotation(method: Method, s: &BenchSettings, revolutions: usize, model: Option<&ModelBundle>) -> Result<BenchRun> {
    let start = Instant::now();
    let cfg = rotation_grid(s.l_max, s.band);
    let mut state = SimulationState::from_fn(&cfg, disk_sdf(rotation_center(0.0), DISK_RADIUS), &rotation_velocity, 0.0)?;
    let mut reports = vec![report("rev0", &state, disk_sdf(rotation_center(0.0), DISK_RADIUS))?];
    let mut stats = Vec::new();
    let period = rotation_period();
    for rev in 1..=revolutions {
        let t_end = period * rev as f64;
        let exact = |p: Point2<f64>, t: f64| disk_sdf(rotation_center(t), DISK_RADIUS)(p);
        state = advance(method, model, &state, &rotation_velocity, t_end, s, &mut stats, Some(&exact))?;
        reports.push(report(&format!("rev{rev}"), &state, disk_sdf(rotation_center(t_end), DISK_RADIUS))?);
    }
    Ok(BenchRun { reports, final_state: state, step_stats: stats, wall_time_s: start.elapsed().as_secs_f64() })
}

/// Disk of radius 0.15 at (0.5, 0.75) deformed by the vortex until `t_mid` and brought back
/// by the reversed flow until `2 t_mid`.
pub fn run_vortex(method: Method, s: &BenchSettings, t_mid: f64, model: Option<&ModelBundle>) -> Result<BenchRun> {
    let start = Instant::now();
    let sdf = disk_sdf([0.5, 0.75], DISK_RADIUS);
    let flow = ReversingVortex { t_mid };
    let cfg = vortex_grid(s.l_max, s.band);
    let mut state = SimulationState::from_fn(&cfg, sdf, &flow, 0.0)?;
    let mut reports = vec![report("t0", &state, sdf)?];
    let mut stats = Vec::new();
    state = advance(method, model, &state, &flow, t_mid, s, &mut stats, None)?;
    let mid = report("t_mid", &state, sdf)?;
    // No analytic reference at the midpoint: keep area only.
    reports.push(BenchReport { mae: f64::NAN, linf: f64::NAN, ..mid });
    state = advance(method, model, &state, &flow, 2.0 * t_mid, s, &mut stats, None)?;
    reports.push(report("t_end", &state, sdf)?);
    Ok(BenchRun { reports, final_state: state, step_stats: stats, wall_time_s: start.elapsed().as_secs_f64() })
}

/// Report table with full-precision floats. Wall time is kept out so reruns compare equal.
pub fn write_report_csv(reports: &[BenchReport], path: &std::path::Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["label", "time", "mae", "linf", "area", "area_loss_pct", "vanished"])?;
    for r in reports {
        w.write_record([
            r.label.clone(),
            format!("{:.16e}", r.time),
            format!("{:.16e}", r.mae),
            format!("{:.16e}", r.linf),
            format!("{:.16e}", r.area),
            format!("{:.16e}", r.area_loss_pct),
            (r.vanished as u8).to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Wall time of a run, written next to the report.
pub fn write_timing(run: &BenchRun, path: &std::path::Path) -> Result<()> {
    std::fs::write(path, format!("wall_time_s,{:.3}\n", run.wall_time_s))?;
    Ok(())
}
