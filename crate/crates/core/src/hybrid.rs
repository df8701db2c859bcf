//! Network-corrected semi-Lagrangian steps, prediction guards and the alternating driver.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::advect::{semi_lagrangian_step, step_sizes, SimulationState, StepOptions, VelocityField};
use crate::error::{Error, Result};
use crate::field_ops::{coords_with_negative_flow, normals_and_curvature, reinitialize, second_derivatives, selective_reinitialize};
use crate::grid::LatticeKey;
use crate::real::Point2;
use crate::sampling::{collect_data_packets, reflect, to_standard_form, PacketInputs};

pub use crate::neural::ModelBundle;

/// Largest accepted deviation from the numerical departure value, in units of `h`.
pub const RELATIVE_GUARD: f64 = 0.15;

/// Fraction of reverted predictions above which a step is reported as degenerate.
pub const REVERSION_WARNING: f64 = 0.5;

/// Whether a corrected value passes both divergence guards.
pub fn accept_prediction(phi_star: f64, phi_d: f64, phi_a: f64, h: f64) -> bool {
    (phi_star - phi_d).abs() / h <= RELATIVE_GUARD && (phi_star - phi_a).abs() < h
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct HybridStepStats {
    pub iter: usize,
    pub time: f64,
    pub corrected: bool,
    pub packets: usize,
    pub reverted: usize,
    pub protected: usize,
    pub area: f64,
    pub band_mae: f64,
}

/// Per-node outcome of the corrector.
#[derive(Clone, Debug, PartialEq)]
pub struct Correction {
    pub node: usize,
    pub phi_d: f64,
    pub phi_star: f64,
    pub reverted: bool,
}

/// Guarded corrected departure values for every valid interface-adjacent node.
pub fn predict_corrections(model: &ModelBundle, state: &SimulationState<f64>, dt: f64) -> Result<Vec<Correction>> {
    let h = state.h();
    if model.l_max != state.grid.l_max() || (model.h - h).abs() > 1e-12 * h {
        return Err(Error::ModelMismatch(format!("model trained for l_max {} (h = {}), grid has l_max {} (h = {h})", model.l_max, model.h, state.grid.l_max())));
    }
    if (dt - h).abs() > 1e-9 * h {
        return Err(Error::ModelMismatch(format!("corrections need dt = h = {h}, got {dt}")));
    }
    let geo = normals_and_curvature(&state.grid, &state.phi)?;
    let (phixx, phiyy) = second_derivatives(&state.grid, &state.phi)?;
    let aux = PacketInputs { normals: &geo.normals, curvature: &geo.curvature, phixx: &phixx, phiyy: &phiyy };
    let found = collect_data_packets(state, &aux, dt)?;
    let mut batch = Vec::with_capacity(2 * found.len());
    let mut signs = Vec::with_capacity(found.len());
    for (_, p) in &found {
        let s = to_standard_form(p)?;
        batch.push(s.packet);
        batch.push(reflect(&s.packet));
        signs.push(s.sign);
    }
    let out = if batch.is_empty() { Vec::new() } else { model.predict(&batch)? };
    Ok(found
        .iter()
        .zip(&signs)
        .enumerate()
        .map(|(i, ((node, p), &sign))| {
            let avg = 0.5 * h * (out[2 * i] + out[2 * i + 1]);
            let cand = if sign > 0 { -avg } else { avg };
            let keep = cand.is_finite() && accept_prediction(cand, p.phi_d, p.phi_a, h);
            Correction { node: *node, phi_d: p.phi_d, phi_star: if keep { cand } else { p.phi_d }, reverted: !keep }
        })
        .collect())
}

/// Semi-Lagrangian step whose regrid loop keeps `cache` values at their lattice positions.
/// Returns the new state and the cached positions that also lag the flow.
pub fn apply_corrections<V: VelocityField<f64> + ?Sized>(
    state: &SimulationState<f64>,
    dt: f64,
    velocity: &V,
    cache: &HashMap<LatticeKey, f64>,
    normals_prev: &[Point2<f64>],
) -> Result<(SimulationState<f64>, HashSet<LatticeKey>)> {
    let opts = StepOptions { overrides: Some(cache), ..Default::default() };
    let next = semi_lagrangian_step(state, dt, velocity, opts)?;
    let lagging = coords_with_negative_flow(&next.grid, &next.phi, &state.grid, normals_prev, &state.vel)?;
    let protected = lagging.into_iter().filter(|k| cache.contains_key(k)).collect();
    Ok((next, protected))
}

/// One corrected step: predictions, guards, merge during regridding and the protected set.
pub fn ml_semi_lagrangian<V: VelocityField<f64> + ?Sized>(
    model: &ModelBundle,
    state: &SimulationState<f64>,
    dt: f64,
    velocity: &V,
) -> Result<(SimulationState<f64>, HashSet<LatticeKey>, HybridStepStats)> {
    let corr = predict_corrections(model, state, dt)?;
    let cache: HashMap<LatticeKey, f64> = corr.iter().filter(|c| !c.reverted).map(|c| (state.grid.node_key(c.node), c.phi_star)).collect();
    let reverted = corr.iter().filter(|c| c.reverted).count();
    for c in corr.iter().filter(|c| c.reverted) {
        log::trace!("reverted node {} (prediction diverged from {:.6e})", c.node, c.phi_d);
    }
    let geo = normals_and_curvature(&state.grid, &state.phi)?;
    let (next, protected) = apply_corrections(state, dt, velocity, &cache, &geo.normals)?;
    let stats = HybridStepStats {
        iter: state.iter,
        time: next.time,
        corrected: true,
        packets: corr.len(),
        reverted,
        protected: protected.len(),
        area: f64::NAN,
        band_mae: f64::NAN,
    };
    if corr.len() > 0 && reverted as f64 > REVERSION_WARNING * corr.len() as f64 {
        log::warn!("step {}: {reverted} of {} predictions reverted", state.iter, corr.len());
    }
    Ok((next, protected, stats))
}

/// Alternating driver: even iterations take a corrected step followed by selective
/// reinitialization, odd iterations a plain step with full reinitialization. Truncated steps
/// are always plain. `observe` may fill in per-step diagnostics.
pub fn simulate_hybrid_with<V: VelocityField<f64> + ?Sized>(
    model: &ModelBundle,
    initial: &SimulationState<f64>,
    velocity: &V,
    t_end: f64,
    nu: usize,
    cfl: f64,
    observe: &mut dyn FnMut(&SimulationState<f64>, &mut HybridStepStats) -> Result<()>,
) -> Result<(SimulationState<f64>, Vec<HybridStepStats>)> {
    let mut state = initial.clone();
    let full = cfl * state.h();
    let steps = step_sizes(t_end - state.time, full);
    let last = steps.len().saturating_sub(1);
    let mut log = Vec::with_capacity(steps.len());
    for (k, dt) in steps.into_iter().enumerate() {
        let truncated = dt < full;
        let (mut next, mut stats) = if state.iter % 2 == 0 && !truncated {
            let (mut next, protected, stats) = ml_semi_lagrangian(model, &state, dt, velocity)?;
            next.phi = selective_reinitialize(&next.grid, &next.phi, &protected, nu)?;
            (next, stats)
        } else {
            let mut next = semi_lagrangian_step(&state, dt, velocity, StepOptions::default())?;
            next.phi = reinitialize(&next.grid, &next.phi, nu)?;
            let stats = HybridStepStats { iter: state.iter, time: next.time, area: f64::NAN, band_mae: f64::NAN, ..Default::default() };
            (next, stats)
        };
        if k == last {
            next.time = t_end;
            stats.time = t_end;
        }
        observe(&next, &mut stats)?;
        log.push(stats);
        state = next;
    }
    Ok((state, log))
}

pub fn simulate_hybrid<V: VelocityField<f64> + ?Sized>(
    model: &ModelBundle,
    initial: &SimulationState<f64>,
    velocity: &V,
    t_end: f64,
    nu: usize,
    cfl: f64,
) -> Result<(SimulationState<f64>, Vec<HybridStepStats>)> {
    simulate_hybrid_with(model, initial, velocity, t_end, nu, cfl, &mut |_, _| Ok(()))
}

pub fn write_step_csv(stats: &[HybridStepStats], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["iteration", "time", "corrected", "packets", "reversions", "protected", "area", "band_mae"])?;
    for s in stats {
        w.write_record([
            s.iter.to_string(),
            format!("{:.16e}", s.time),
            (s.corrected as u8).to_string(),
            s.packets.to_string(),
            s.reverted.to_string(),
            s.protected.to_string(),
            format!("{:.16e}", s.area),
            format!("{:.16e}", s.band_mae),
        ])?;
    }
    w.flush()?;
    Ok(())
}
