//! Random divergence-free flows, paired coarse/fine advection with sample collection, CSV
//! persistence and stratified splitting.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::advect::{advect_coarse_grid, advect_fine_grid, is_reset_iteration, step_sizes, FineAdvance, SimulationState, VelocityField};
use crate::error::{Error, Result};
use crate::field_ops::{normals_and_curvature, reinitialize, second_derivatives, selective_reinitialize};
use crate::grid::{GridConfig, LatticeKey};
use crate::hybrid::apply_corrections;
use crate::interp::{OutsidePolicy, QuadraticField};
use crate::real::Point2;
use crate::sampling::{collect_data_packets, reflect, to_standard_form, DataPacket, LearningTuple, PacketInputs, PACKET_COLUMNS, PACKET_LEN};

pub const N_MODES: usize = 5;
pub const PROBE_SIDE: usize = 512;
pub const DOMAIN: (f64, f64) = (-1.0, 1.0);
pub const MACROMESH: u32 = 2;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mode {
    pub amplitude: f64,
    pub p: u32,
    pub q: u32,
    pub alpha: f64,
    pub beta: f64,
}

/// Velocity `(dpsi/dy, -dpsi/dx)` of the stream function
/// `psi = sum a sin(pi p x + alpha) sin(pi q y + beta)`, scaled by `scale`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VelocityFieldSpec {
    pub modes: Vec<Mode>,
    pub scale: f64,
}

impl VelocityFieldSpec {
    pub fn stream(&self, x: Point2<f64>) -> f64 {
        self.scale * self.modes.iter().map(|m| m.amplitude * (PI * m.p as f64 * x[0] + m.alpha).sin() * (PI * m.q as f64 * x[1] + m.beta).sin()).sum::<f64>()
    }

    pub fn eval(&self, x: Point2<f64>) -> Point2<f64> {
        let (mut u, mut v) = (0.0, 0.0);
        for m in &self.modes {
            let (kp, kq) = (PI * m.p as f64, PI * m.q as f64);
            let (sx, cx) = (kp * x[0] + m.alpha).sin_cos();
            let (sy, cy) = (kq * x[1] + m.beta).sin_cos();
            u += m.amplitude * kq * sx * cy;
            v -= m.amplitude * kp * cx * sy;
        }
        [self.scale * u, self.scale * v]
    }

    /// Largest speed over a `PROBE_SIDE^2` lattice spanning the domain.
    pub fn probe_max(&self) -> f64 {
        let (lo, hi) = DOMAIN;
        let step = (hi - lo) / (PROBE_SIDE - 1) as f64;
        (0..PROBE_SIDE)
            .into_par_iter()
            .map(|i| {
                (0..PROBE_SIDE)
                    .map(|j| {
                        let u = self.eval([lo + i as f64 * step, lo + j as f64 * step]);
                        u[0].hypot(u[1])
                    })
                    .fold(0.0, f64::max)
            })
            .reduce(|| 0.0, f64::max)
    }
}

impl VelocityField<f64> for VelocityFieldSpec {
    fn velocity(&self, p: Point2<f64>, _t: f64) -> Point2<f64> {
        self.eval(p)
    }
}

/// Seeded random stream-function flow normalized to unit peak speed on the probe lattice.
pub fn generate_velocity_field(seed: u64) -> Result<VelocityFieldSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..16 {
        let modes: Vec<Mode> = (0..N_MODES)
            .map(|_| Mode {
                amplitude: rng.gen_range(-1.0..=1.0),
                p: rng.gen_range(1..=3),
                q: rng.gen_range(1..=3),
                alpha: rng.gen_range(0.0..2.0 * PI),
                beta: rng.gen_range(0.0..2.0 * PI),
            })
            .collect();
        let mut spec = VelocityFieldSpec { modes, scale: 1.0 };
        let m = spec.probe_max();
        if m > 1e-6 {
            // Slightly below one so rounding never pushes the sampled peak above unit speed.
            spec.scale = (1.0 - 1e-12) / m;
            return Ok(spec);
        }
    }
    Err(Error::Config(format!("seed {seed} produced only degenerate velocity fields")))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationConfig {
    pub l_c_max: u32,
    pub l_f_max: u32,
    pub t_end: f64,
    pub nu: usize,
    pub n_f: usize,
    pub n_c: usize,
    pub b_c: f64,
    pub r_freq: usize,
    pub cfl: f64,
    /// Smallest radius in coarse cells.
    pub r_min_cells: f64,
    pub r_max: f64,
    pub seed: u64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self { l_c_max: 6, l_f_max: 8, t_end: 0.5, nu: 10, n_f: 7, n_c: 4, b_c: 2.0, r_freq: 3, cfl: 1.0, r_min_cells: 5.0, r_max: 0.25, seed: 0 }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.l_c_max >= self.l_f_max || self.n_f == 0 || self.n_c == 0 || self.nu == 0 || !(self.t_end > 0.0) || !(self.b_c > 0.0) || !(self.cfl > 0.0) {
            return Err(Error::Config(format!("invalid generation configuration {self:?}")));
        }
        if !(self.r_max >= self.r_min()) {
            return Err(Error::Config(format!("r_max {} below r_min {}", self.r_max, self.r_min())));
        }
        Ok(())
    }

    pub fn h_c(&self) -> f64 {
        (DOMAIN.1 - DOMAIN.0) / (MACROMESH as f64 * (1u64 << self.l_c_max) as f64)
    }

    pub fn r_min(&self) -> f64 {
        self.r_min_cells * self.h_c()
    }

    /// Fine band: `7/4 B_c 2^(l_f - l_c - 1)` diagonals.
    pub fn b_f(&self) -> f64 {
        1.75 * self.b_c * 2f64.powi(self.l_f_max as i32 - self.l_c_max as i32 - 1)
    }

    pub fn radii(&self) -> Vec<f64> {
        let (a, b) = (self.r_min(), self.r_max);
        let n = (3.0 * (b - a) / self.h_c()).ceil() as usize + 1;
        if n == 1 {
            return vec![a];
        }
        (0..n).map(|i| if i == n - 1 { b } else { a + (b - a) * i as f64 / (n - 1) as f64 }).collect()
    }

    pub fn coarse_grid(&self) -> GridConfig {
        GridConfig::square(DOMAIN.0, DOMAIN.1, MACROMESH, self.l_c_max).with_band(self.b_c)
    }

    pub fn fine_grid(&self) -> GridConfig {
        GridConfig::square(DOMAIN.0, DOMAIN.1, MACROMESH, self.l_f_max).with_band(self.b_f())
    }
}

/// One (flow, radius, center) run of the generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub index: usize,
    pub field: usize,
    pub field_seed: u64,
    pub radius: f64,
    pub center: Point2<f64>,
    pub tuples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: GenerationConfig,
    pub fields: Vec<VelocityFieldSpec>,
    pub runs: Vec<RunRecord>,
    pub total_tuples: usize,
}

fn circle(center: Point2<f64>, r: f64) -> impl Fn(Point2<f64>) -> f64 + Sync + Copy {
    move |p: Point2<f64>| (p[0] - center[0]).hypot(p[1] - center[1]) - r
}

/// Advances coarse and fine grids side by side; on even, untruncated coarse iterations the
/// coarse packets are labeled with the fine solution and the coarse step keeps those labels.
pub fn interleave_advect_and_collect<V: VelocityField<f64> + ?Sized>(
    coarse0: &SimulationState<f64>,
    fine0: &SimulationState<f64>,
    cfg: &GenerationConfig,
    velocity: &V,
) -> Result<Vec<LearningTuple>> {
    let h_c = coarse0.h();
    let full = cfg.cfl * h_c;
    let (mut coarse, mut fine) = (coarse0.clone(), fine0.clone());
    let fine_params = FineAdvance { nu: cfg.nu, band_coarse: cfg.b_c, band_fine: cfg.b_f(), cfl: cfg.cfl };
    let mut tuples = Vec::new();
    for dt in step_sizes(cfg.t_end - coarse.time, full) {
        let target_time = coarse.time + dt;
        let fine_next = advect_fine_grid(&fine, target_time, velocity, fine_params)?;
        let collect = coarse.iter % 2 == 0 && dt >= full;
        let mut coarse_next = if collect {
            let geo = normals_and_curvature(&coarse.grid, &coarse.phi)?;
            let (xx, yy) = second_derivatives(&coarse.grid, &coarse.phi)?;
            let aux = PacketInputs { normals: &geo.normals, curvature: &geo.curvature, phixx: &xx, phiyy: &yy };
            let packets = collect_data_packets(&coarse, &aux, dt)?;
            let (fxx, fyy) = second_derivatives(&fine_next.grid, &fine_next.phi)?;
            let field = QuadraticField { phi: &fine_next.phi, phixx: &fxx, phiyy: &fyy };
            let mut cache: HashMap<LatticeKey, f64> = HashMap::with_capacity(packets.len());
            for (node, p) in &packets {
                let x_a = coarse.grid.node_point(*node);
                let phi_star = fine_next.grid.interp_quadratic(&field, x_a, OutsidePolicy::Error)?;
                let s = to_standard_form(p)?;
                let target = if s.sign > 0 { -phi_star } else { phi_star } / h_c;
                tuples.push(LearningTuple { packet: s.packet, target });
                tuples.push(LearningTuple { packet: reflect(&s.packet), target });
                cache.insert(coarse.grid.node_key(*node), phi_star);
            }
            if is_reset_iteration(coarse.iter, cfg.r_freq) {
                advect_coarse_grid(&coarse, &fine_next, velocity, cfg.nu, cfg.r_freq)?
            } else {
                let (mut next, protected) = apply_corrections(&coarse, dt, velocity, &cache, &geo.normals)?;
                next.phi = selective_reinitialize(&next.grid, &next.phi, &protected, cfg.nu)?;
                next
            }
        } else {
            advect_coarse_grid(&coarse, &fine_next, velocity, cfg.nu, cfg.r_freq)?
        };
        coarse_next.time = fine_next.time;
        coarse = coarse_next;
        fine = fine_next;
    }
    Ok(tuples)
}

/// Runs every (flow, radius, center) configuration; tuples are concatenated in configuration
/// order regardless of scheduling.
pub fn generate_dataset(cfg: &GenerationConfig) -> Result<(Vec<LearningTuple>, Manifest)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let field_seeds: Vec<u64> = (0..cfg.n_f).map(|_| rng.gen()).collect();
    let fields: Vec<VelocityFieldSpec> = field_seeds.iter().map(|&s| generate_velocity_field(s)).collect::<Result<_>>()?;
    let mut runs = Vec::new();
    for (f, &fs) in field_seeds.iter().enumerate() {
        for r in cfg.radii() {
            for _ in 0..cfg.n_c {
                let center = [rng.gen_range(-0.5..=0.5), rng.gen_range(-0.5..=0.5)];
                runs.push(RunRecord { index: runs.len(), field: f, field_seed: fs, radius: r, center, tuples: 0 });
            }
        }
    }
    let results: Vec<Vec<LearningTuple>> = runs
        .par_iter()
        .map(|run| {
            let flow = &fields[run.field];
            let sdf = circle(run.center, run.radius);
            let mut coarse = SimulationState::from_fn(&cfg.coarse_grid(), sdf, flow, 0.0)?;
            coarse.phi = reinitialize(&coarse.grid, &coarse.phi, cfg.nu)?;
            let mut fine = SimulationState::from_fn(&cfg.fine_grid(), sdf, flow, 0.0)?;
            fine.phi = reinitialize(&fine.grid, &fine.phi, (cfg.b_c * cfg.nu as f64).round() as usize)?;
            let t = interleave_advect_and_collect(&coarse, &fine, cfg, flow)?;
            log::debug!("run {}: {} tuples", run.index, t.len());
            Ok(t)
        })
        .collect::<Result<_>>()?;
    for (run, t) in runs.iter_mut().zip(&results) {
        run.tuples = t.len();
    }
    let tuples: Vec<LearningTuple> = results.into_iter().flatten().collect();
    let manifest = Manifest { config: cfg.clone(), fields, runs, total_tuples: tuples.len() };
    Ok((tuples, manifest))
}

pub fn write_dataset_csv(tuples: &[LearningTuple], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<&str> = PACKET_COLUMNS.to_vec();
    header.push("target");
    w.write_record(&header)?;
    for t in tuples {
        let mut rec: Vec<String> = t.packet.to_array().iter().map(|v| format!("{v:.16e}")).collect();
        rec.push(format!("{:.16e}", t.target));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset_csv(path: &Path) -> Result<Vec<LearningTuple>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        if rec.len() != PACKET_LEN + 1 {
            return Err(Error::Malformed(format!("dataset row {}: {} columns, expected {}", line + 1, rec.len(), PACKET_LEN + 1)));
        }
        let vals: Vec<f64> = rec
            .iter()
            .map(|s| s.parse::<f64>().map_err(|e| Error::Malformed(format!("dataset row {}: {e}", line + 1))))
            .collect::<Result<_>>()?;
        let arr: [f64; PACKET_LEN] = vals[..PACKET_LEN].try_into().expect("checked length");
        out.push(LearningTuple { packet: DataPacket::from_array(&arr), target: vals[PACKET_LEN] });
    }
    Ok(out)
}

pub fn write_manifest(m: &Manifest, path: &Path) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(m)?)?;
    Ok(())
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Split {
    pub train: Vec<LearningTuple>,
    pub test: Vec<LearningTuple>,
    pub validation: Vec<LearningTuple>,
}

pub const SPLIT_FRACTIONS: [f64; 3] = [0.7, 0.1, 0.1];
pub const DEFAULT_BINS: usize = 100;
const MIN_BIN: usize = 4;

/// Target-stratified split: per bin, a seeded shuffle is cut at the cumulative fractions
/// (train, test, validation, then the discarded remainder).
pub fn stratified_split(tuples: &[LearningTuple], fractions: [f64; 3], bins: usize, seed: u64) -> Result<Split> {
    if tuples.is_empty() {
        return Err(Error::EmptySplit("dataset"));
    }
    if bins < 2 || fractions.iter().any(|&f| !(f >= 0.0)) || fractions.iter().sum::<f64>() > 1.0 + 1e-12 {
        return Err(Error::Config(format!("invalid split: {bins} bins, fractions {fractions:?}")));
    }
    let (lo, hi) = tuples.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), t| (a.min(t.target), b.max(t.target)));
    let width = (hi - lo) / bins as f64;
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); bins];
    for (i, t) in tuples.iter().enumerate() {
        let b = if width > 0.0 { (((t.target - lo) / width) as usize).min(bins - 1) } else { 0 };
        members[b].push(i);
    }
    // Merge sparse bins into their upper neighbor; a sparse tail joins the last group.
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut pending: Vec<usize> = Vec::new();
    for m in members.into_iter().filter(|m| !m.is_empty()) {
        pending.extend(m);
        if pending.len() >= MIN_BIN {
            groups.push(std::mem::take(&mut pending));
        }
    }
    if !pending.is_empty() {
        match groups.last_mut() {
            Some(g) => g.extend(pending),
            None => groups.push(pending),
        }
    }
    log::debug!("stratified split: {bins} bins merged into {} groups", groups.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Split::default();
    let cum = [fractions[0], fractions[0] + fractions[1], fractions[0] + fractions[1] + fractions[2]];
    for mut g in groups {
        g.shuffle(&mut rng);
        let n = g.len() as f64;
        let cuts: Vec<usize> = cum.iter().map(|c| (c * n).round() as usize).collect();
        out.train.extend(g[..cuts[0]].iter().map(|&i| tuples[i]));
        out.test.extend(g[cuts[0]..cuts[1]].iter().map(|&i| tuples[i]));
        out.validation.extend(g[cuts[1]..cuts[2]].iter().map(|&i| tuples[i]));
    }
    Ok(out)
}
