use mlsl::advect::{
    advect_coarse_grid, advect_fine_grid, departure_point, is_reset_iteration, semi_lagrangian_step, step_sizes, FineAdvance,
    SimulationState, StepOptions,
};
use mlsl::field_ops::{normals_and_curvature, reinitialize, second_derivatives, NodeFlag};
use mlsl::interp::{OutsidePolicy, QuadraticField};
use mlsl::{build_grid, Grid, GridConfig, Point2};

const OMEGA: f64 = std::f64::consts::FRAC_1_SQRT_2;

fn rotation(p: Point2<f64>, _t: f64) -> Point2<f64> {
    [-OMEGA * p[1], OMEGA * p[0]]
}

fn disk(p: Point2<f64>) -> f64 {
    p[0].hypot(p[1] - 0.5) - 0.2
}

#[test]
fn rotation_departure_matches_midpoint_formula() {
    // Linear velocity is reproduced exactly by bilinear interpolation.
    let g: Grid = build_grid(&GridConfig::square(-1.0, 1.0, 2, 6).with_band(2.0), disk).unwrap();
    let vel = g.sample_fn(|p| rotation(p, 0.0));
    let dt = g.h_min();
    for &x in g.node_points() {
        let d = departure_point(&g, &vel, x, dt, None).unwrap();
        let u = rotation(x, 0.0);
        let xh = [x[0] - 0.5 * dt * u[0], x[1] - 0.5 * dt * u[1]];
        if xh[0].abs() > 1.0 || xh[1].abs() > 1.0 {
            // The midpoint velocity is sampled at the clamped position.
            continue;
        }
        let uh = rotation(xh, 0.0);
        let xd = [x[0] - dt * uh[0], x[1] - dt * uh[1]];
        for k in 0..2 {
            assert!((d.x_hat[k] - xh[k]).abs() < 1e-14);
            assert!((d.u_hat[k] - uh[k]).abs() < 1e-14);
            assert!((d.x_d[k] - xd[k]).abs() < 1e-14);
        }
        assert!(d.inside || x[0].abs() > 0.99 || x[1].abs() > 0.99);
    }
}

#[test]
fn step_values_are_quadratic_samples_at_departure_points() {
    let cfg = GridConfig::square(-1.0, 1.0, 2, 6).with_band(2.0);
    let s = SimulationState::from_fn(&cfg, disk, &rotation, 0.0).unwrap();
    let dt = s.h();
    let n = semi_lagrangian_step(&s, dt, &rotation, StepOptions::default()).unwrap();
    let (dxx, dyy) = second_derivatives(&s.grid, &s.phi).unwrap();
    let field = QuadraticField { phi: &s.phi, phixx: &dxx, phiyy: &dyy };
    for (k, &x) in n.grid.node_points().iter().enumerate() {
        let d = departure_point(&s.grid, &s.vel, x, dt, None).unwrap();
        let want = s.grid.interp_quadratic(&field, d.x_d, OutsidePolicy::Clamp).unwrap();
        assert_eq!(n.phi[k], want);
    }
    assert_eq!(n.iter, 1);
    assert_eq!(n.vel, n.grid.sample_fn(|p| rotation(p, dt)));
}

#[test]
fn reset_branch_samples_fine_solution() {
    let coarse_cfg = GridConfig::square(-1.0, 1.0, 2, 5).with_band(2.0);
    let fine_cfg = coarse_cfg.clone().with_l_max(7).with_band(8.0);
    let coarse = SimulationState::from_fn(&coarse_cfg, disk, &rotation, 0.0).unwrap();
    let fine0 = SimulationState::from_fn(&fine_cfg, disk, &rotation, 0.0).unwrap();
    let fine = advect_fine_grid(&fine0, coarse.h(), &rotation, FineAdvance { nu: 4, band_coarse: 2.0, band_fine: 8.0, cfl: 1.0 }).unwrap();
    assert_eq!(fine.time, coarse.h());
    let mut c = coarse.clone();
    c.iter = 2;
    assert!(is_reset_iteration(2, 3));
    let next = advect_coarse_grid(&c, &fine, &rotation, 0, 3).unwrap();
    let (dxx, dyy) = second_derivatives(&fine.grid, &fine.phi).unwrap();
    let field = QuadraticField { phi: &fine.phi, phixx: &dxx, phiyy: &dyy };
    for (k, &x) in next.grid.node_points().iter().enumerate() {
        assert_eq!(next.phi[k], fine.grid.interp_quadratic(&field, x, OutsidePolicy::Clamp).unwrap());
    }
    assert_eq!(next.time, fine.time);
    assert_eq!(next.iter, 3);
    // A non-reset iteration is a plain step.
    let plain = advect_coarse_grid(&coarse, &fine, &rotation, 0, 3).unwrap();
    let direct = semi_lagrangian_step(&coarse, fine.time, &rotation, StepOptions::default()).unwrap();
    assert_eq!(plain.phi, direct.phi);
}

#[test]
fn fine_substeps_cover_the_interval() {
    let cfg = GridConfig::square(-1.0, 1.0, 2, 6).with_band(2.0);
    let vel = |_p: Point2<f64>, _t: f64| [0.5, -0.25];
    let plane = |p: Point2<f64>| (p[0] + 2.0 * p[1] - 0.1) / 5f64.sqrt();
    let s = SimulationState::from_fn(&cfg, plane, &vel, 0.0).unwrap();
    let t_end = 2.5 * s.h();
    assert_eq!(step_sizes(t_end, s.h()).len(), 3);
    let out = advect_fine_grid(&s, t_end, &vel, FineAdvance { nu: 5, band_coarse: 2.0, band_fine: 4.0, cfl: 1.0 }).unwrap();
    assert_eq!(out.time, t_end);
    assert_eq!(out.iter, 3);
    // A translated plane stays a signed distance up to the reinitialization round-off; check
    // away from inflow boundaries.
    for (k, &p) in out.grid.node_points().iter().enumerate() {
        if p[0].abs() < 0.7 && p[1].abs() < 0.7 && plane(p).abs() < 4.0 * s.h() {
            let exact = plane([p[0] - 0.5 * t_end, p[1] + 0.25 * t_end]);
            assert!((out.phi[k] - exact).abs() < 1e-8, "{p:?} {} {exact}", out.phi[k]);
        }
    }
}

#[test]
fn gradient_norm_stays_near_one_after_rotation() {
    let cfg = GridConfig::square(-1.0, 1.0, 2, 6).with_band(2.0);
    let mut s = SimulationState::from_fn(&cfg, disk, &rotation, 0.0).unwrap();
    let dt = s.h();
    for _ in 0..20 {
        let mut n = semi_lagrangian_step(&s, dt, &rotation, StepOptions::default()).unwrap();
        n.phi = reinitialize(&n.grid, &n.phi, 10).unwrap();
        s = n;
    }
    let geo = normals_and_curvature(&s.grid, &s.phi).unwrap();
    let h = s.h();
    let mut worst: f64 = 0.0;
    for k in 0..s.grid.num_nodes() {
        if s.phi[k].abs() > 2.0 * h || geo.flags[k] != NodeFlag::Ok {
            continue;
        }
        let st = s.grid.node_stencil(k).unwrap();
        let v = |i: usize| s.phi[st.neighbors[i].unwrap()];
        let g = ((v(4) - v(3)) / (2.0 * h)).hypot((v(6) - v(1)) / (2.0 * h));
        worst = worst.max((g - 1.0).abs());
    }
    assert!(worst < 0.1, "max | |grad phi| - 1 | = {worst}");
}

#[test]
fn rejects_non_positive_step() {
    let cfg = GridConfig::square(-1.0, 1.0, 2, 4);
    let s = SimulationState::from_fn(&cfg, disk, &rotation, 0.0).unwrap();
    assert!(semi_lagrangian_step(&s, 0.0, &rotation, StepOptions::default()).is_err());
}
