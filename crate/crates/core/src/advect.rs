//! Semi-Lagrangian transport of the level-set function on adaptive grids.

use std::collections::HashMap;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::field_ops::{reinitialize, second_derivatives};
use crate::grid::{build_grid, GridConfig, LatticeKey, QuadtreeGrid};
use crate::interp::{OutsidePolicy, QuadraticField};
use crate::real::{Point2, Real};

/// Analytic, possibly time-dependent velocity.
pub trait VelocityField<T>: Sync {
    fn velocity(&self, p: Point2<T>, t: T) -> Point2<T>;
}

impl<T, F> VelocityField<T> for F
where
    F: Fn(Point2<T>, T) -> Point2<T> + Sync,
{
    fn velocity(&self, p: Point2<T>, t: T) -> Point2<T> {
        self(p, t)
    }
}

#[derive(Clone, Debug)]
pub struct SimulationState<T> {
    pub grid: QuadtreeGrid<T>,
    pub phi: Vec<T>,
    pub vel: Vec<Point2<T>>,
    pub time: T,
    pub iter: usize,
}

impl<T: Real> SimulationState<T> {
    /// Builds the grid around `phi0` and samples both fields on it.
    pub fn from_fn<F, V>(config: &GridConfig, phi0: F, velocity: &V, time: T) -> Result<Self>
    where
        F: Fn(Point2<T>) -> T,
        V: VelocityField<T> + ?Sized,
    {
        let grid = build_grid(config, &phi0)?;
        let phi = grid.sample_fn(&phi0);
        let vel = grid.sample_fn(|p| velocity.velocity(p, time));
        Ok(Self { grid, phi, vel, time, iter: 0 })
    }

    pub fn resample_velocity<V: VelocityField<T> + ?Sized>(&mut self, velocity: &V) {
        let t = self.time;
        self.vel = self.grid.node_points().par_iter().map(|&p| velocity.velocity(p, t)).collect();
    }

    pub fn h(&self) -> T {
        self.grid.h_min()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Departure<T> {
    pub x_hat: Point2<T>,
    pub x_d: Point2<T>,
    /// Velocity at the midpoint, used for the full backtracking step.
    pub u_hat: Point2<T>,
    /// Both the midpoint and the departure point lie in the domain.
    pub inside: bool,
}

/// Velocity from the previous time level, enabling the two-frame midpoint extrapolation
/// `u(n+1/2) = 1.5 u(n) - 0.5 u(n-1)`.
pub type PreviousVelocity<'a, T> = Option<(&'a QuadtreeGrid<T>, &'a [Point2<T>])>;

/// Midpoint backtracking from arrival point `x_a` through the nodal velocity on `grid`.
pub fn departure_point<T: Real>(
    grid: &QuadtreeGrid<T>,
    vel: &[Point2<T>],
    x_a: Point2<T>,
    dt: T,
    prev: PreviousVelocity<'_, T>,
) -> Result<Departure<T>> {
    let half = T::lit(0.5);
    let u_a = grid.interp_vector(vel, x_a, OutsidePolicy::Clamp)?;
    let x_hat = [x_a[0] - half * dt * u_a[0], x_a[1] - half * dt * u_a[1]];
    let mut u_hat = grid.interp_vector(vel, x_hat, OutsidePolicy::Clamp)?;
    if let Some((pg, pv)) = prev {
        let u_old = pg.interp_vector(pv, x_hat, OutsidePolicy::Clamp)?;
        let (a, b) = (T::lit(1.5), T::lit(0.5));
        u_hat = [a * u_hat[0] - b * u_old[0], a * u_hat[1] - b * u_old[1]];
    }
    let x_d = [x_a[0] - dt * u_hat[0], x_a[1] - dt * u_hat[1]];
    Ok(Departure { x_hat, x_d, u_hat, inside: grid.contains(x_hat) && grid.contains(x_d) })
}

#[derive(Clone, Copy, Debug)]
pub struct StepOptions<'a, T> {
    /// Quadratic (default) or bilinear interpolation of the level set at departure points.
    pub quadratic: bool,
    pub prev_velocity: PreviousVelocity<'a, T>,
    /// Values that replace the interpolated ones at matching lattice positions in every sweep.
    pub overrides: Option<&'a HashMap<LatticeKey, T>>,
}

impl<T> Default for StepOptions<'_, T> {
    fn default() -> Self {
        Self { quadratic: true, prev_velocity: None, overrides: None }
    }
}

/// Alternates "assign values on the candidate grid" and "refine/coarsen" until the leaf set
/// stops changing. Values are computed once per lattice position.
pub fn regrid_loop<T, F>(
    start: &QuadtreeGrid<T>,
    value_at: F,
    overrides: Option<&HashMap<LatticeKey, T>>,
) -> Result<(QuadtreeGrid<T>, Vec<T>)>
where
    T: Real,
    F: Fn(Point2<T>) -> Result<T> + Sync,
{
    let max_sweeps = start.l_max() as usize + 2;
    let mut cache: HashMap<LatticeKey, T> = HashMap::new();
    let mut candidate = start.clone();
    for _ in 0..max_sweeps {
        let todo: Vec<(LatticeKey, Point2<T>)> = candidate
            .node_keys()
            .iter()
            .zip(candidate.node_points())
            .filter(|(k, _)| !cache.contains_key(k))
            .map(|(k, p)| (*k, *p))
            .collect();
        let fresh: Vec<T> = todo.par_iter().map(|(_, p)| value_at(*p)).collect::<Result<_>>()?;
        for ((k, _), v) in todo.into_iter().zip(fresh) {
            cache.insert(k, v);
        }
        let values: Vec<T> = candidate
            .node_keys()
            .iter()
            .map(|k| overrides.and_then(|o| o.get(k)).copied().unwrap_or(cache[k]))
            .collect();
        let next = candidate.refine_and_coarsen(&values)?;
        if next.same_leaves(&candidate) {
            return Ok((candidate, values));
        }
        candidate = next;
    }
    Err(Error::RegridDiverged(max_sweeps))
}

/// One semi-Lagrangian step of size `dt`, including regridding. The velocity of the returned
/// state is resampled from `velocity` at the new time.
pub fn semi_lagrangian_step<T, V>(
    state: &SimulationState<T>,
    dt: T,
    velocity: &V,
    opts: StepOptions<'_, T>,
) -> Result<SimulationState<T>>
where
    T: Real,
    V: VelocityField<T> + ?Sized,
{
    if !(dt > T::zero()) {
        return Err(Error::Config("time step must be positive".into()));
    }
    let grid = &state.grid;
    let (phixx, phiyy) = if opts.quadratic {
        second_derivatives(grid, &state.phi)?
    } else {
        (Vec::new(), Vec::new())
    };
    let field = QuadraticField { phi: &state.phi, phixx: &phixx, phiyy: &phiyy };
    let value_at = |x_a: Point2<T>| -> Result<T> {
        let d = departure_point(grid, &state.vel, x_a, dt, opts.prev_velocity)?;
        if opts.quadratic {
            grid.interp_quadratic(&field, d.x_d, OutsidePolicy::Clamp)
        } else {
            grid.interp_bilinear(&state.phi, d.x_d, OutsidePolicy::Clamp)
        }
    };
    let (new_grid, phi) = regrid_loop(grid, value_at, opts.overrides)?;
    let mut next = SimulationState { grid: new_grid, phi, vel: Vec::new(), time: state.time + dt, iter: state.iter + 1 };
    next.resample_velocity(velocity);
    Ok(next)
}

/// Resets a coarse state to the quadratic interpolant of a fine one (regridding included).
pub fn fit_to_fine_grid<T: Real>(coarse: &QuadtreeGrid<T>, fine: &SimulationState<T>) -> Result<(QuadtreeGrid<T>, Vec<T>)> {
    let (fxx, fyy) = second_derivatives(&fine.grid, &fine.phi)?;
    let field = QuadraticField { phi: &fine.phi, phixx: &fxx, phiyy: &fyy };
    regrid_loop(coarse, |p| fine.grid.interp_quadratic(&field, p, OutsidePolicy::Clamp), None)
}

/// Number of sub-steps of size `dt` needed to cover `span`, the last one possibly truncated.
pub fn step_sizes<T: Real>(span: T, dt: T) -> Vec<T> {
    let mut out = Vec::new();
    let mut t = T::zero();
    // Tolerate round-off in `span / dt` so an exact multiple does not produce a sliver step.
    let tol = dt * T::lit(1e-9);
    while span - t > tol {
        let step = if span - t < dt + tol { span - t } else { dt };
        out.push(step);
        t = t + step;
    }
    out
}

#[derive(Clone, Copy, Debug)]
pub struct FineAdvance {
    pub nu: usize,
    pub band_coarse: f64,
    pub band_fine: f64,
    pub cfl: f64,
}

/// Advances the fine state to `t_end` with sub-steps of `cfl * h_f`, reinitializing after each
/// with `B_c * nu` iterations and `B_f * nu` after the final one.
pub fn advect_fine_grid<V: VelocityField<f64> + ?Sized>(
    fine: &SimulationState<f64>,
    t_end: f64,
    velocity: &V,
    p: FineAdvance,
) -> Result<SimulationState<f64>> {
    let dt = p.cfl * fine.h();
    let steps = step_sizes(t_end - fine.time, dt);
    let mut state = fine.clone();
    let last = steps.len().saturating_sub(1);
    for (k, &step) in steps.iter().enumerate() {
        let mut next = semi_lagrangian_step(&state, step, velocity, StepOptions::default())?;
        if k == last {
            next.time = t_end;
        }
        let b = if k == last { p.band_fine } else { p.band_coarse };
        next.phi = reinitialize(&next.grid, &next.phi, (b * p.nu as f64).round() as usize)?;
        next.resample_velocity(velocity);
        state = next;
    }
    Ok(state)
}

/// Whether the coarse step `iter` resets to the fine solution instead of advecting.
pub fn is_reset_iteration(iter: usize, r_freq: usize) -> bool {
    r_freq > 0 && (iter + 1) % r_freq == 0
}

/// Advances the coarse state to the time of `fine_next`, by a reset on reset iterations and by
/// a semi-Lagrangian step otherwise, then reinitializes with `nu` iterations.
pub fn advect_coarse_grid<V: VelocityField<f64> + ?Sized>(
    coarse: &SimulationState<f64>,
    fine_next: &SimulationState<f64>,
    velocity: &V,
    nu: usize,
    r_freq: usize,
) -> Result<SimulationState<f64>> {
    let mut next = if is_reset_iteration(coarse.iter, r_freq) {
        let (grid, phi) = fit_to_fine_grid(&coarse.grid, fine_next)?;
        SimulationState { grid, phi, vel: Vec::new(), time: fine_next.time, iter: coarse.iter + 1 }
    } else {
        let dt = fine_next.time - coarse.time;
        semi_lagrangian_step(coarse, dt, velocity, StepOptions::default())?
    };
    next.time = fine_next.time;
    next.phi = reinitialize(&next.grid, &next.phi, nu)?;
    next.resample_velocity(velocity);
    Ok(next)
}
