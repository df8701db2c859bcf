use mlsl::advect::{semi_lagrangian_step, SimulationState, StepOptions};
use mlsl::bench::{disk_sdf, rotation_center, rotation_grid, rotation_velocity, DEFAULT_BAND, DISK_RADIUS};
use mlsl::field_ops::{normals_and_curvature, second_derivatives};
use mlsl::hybrid::{ml_semi_lagrangian, predict_corrections, simulate_hybrid, RELATIVE_GUARD};
use mlsl::neural::{Mlp, ModelBundle};
use mlsl::preprocess::fit;
use mlsl::sampling::{collect_data_packets, reflect, to_standard_form, DataPacket, PacketInputs};
use mlsl::Error;

const L: u32 = 6;

fn initial() -> SimulationState<f64> {
    SimulationState::from_fn(&rotation_grid(L, DEFAULT_BAND), disk_sdf(rotation_center(0.0), DISK_RADIUS), &rotation_velocity, 0.0).unwrap()
}

fn packets(state: &SimulationState<f64>) -> Vec<(usize, DataPacket<f64>)> {
    let geo = normals_and_curvature(&state.grid, &state.phi).unwrap();
    let (xx, yy) = second_derivatives(&state.grid, &state.phi).unwrap();
    let aux = PacketInputs { normals: &geo.normals, curvature: &geo.curvature, phixx: &xx, phiyy: &yy };
    collect_data_packets(state, &aux, state.h()).unwrap()
}

/// Model whose error neuron is the constant `bias`, with preprocessing fitted on real packets.
fn constant_model(bias: f64) -> ModelBundle {
    let mut s = initial();
    let mut std_packets = Vec::new();
    for _ in 0..4 {
        for (_, p) in packets(&s) {
            let st = to_standard_form(&p).unwrap().packet;
            std_packets.push(st);
            std_packets.push(reflect(&st));
        }
        s = semi_lagrangian_step(&s, s.h(), &rotation_velocity, StepOptions::default()).unwrap();
    }
    let h = s.h();
    let (stats, pca) = fit(&std_packets, h, 8).unwrap();
    let mut mlp = Mlp::random(8, &[6; 4], 11);
    let out = mlp.layers.last_mut().unwrap();
    out.weights.fill(0.0);
    out.biases[0] = bias;
    ModelBundle { mlp, stats, pca, h, l_max: L }
}

#[test]
fn zero_error_model_reproduces_plain_step() {
    let model = constant_model(0.0);
    let s = initial();
    let dt = s.h();
    let (next, _, stats) = ml_semi_lagrangian(&model, &s, dt, &rotation_velocity).unwrap();
    let plain = semi_lagrangian_step(&s, dt, &rotation_velocity, StepOptions::default()).unwrap();
    assert!(next.grid.same_leaves(&plain.grid));
    for (a, b) in next.phi.iter().zip(&plain.phi) {
        assert!((a - b).abs() < 1e-15, "{a} {b}");
    }
    assert!(stats.packets > 50);
    assert_eq!(stats.reverted, 0);
    assert!(stats.corrected);
}

#[test]
fn out_of_band_predictions_are_all_reverted() {
    let s = initial();
    for bias in [0.2, -0.2, 5.0, 1e6] {
        let corr = predict_corrections(&constant_model(bias), &s, s.h()).unwrap();
        assert!(!corr.is_empty());
        assert!(corr.iter().all(|c| c.reverted && c.phi_star == c.phi_d), "bias {bias}");
    }
    let model = constant_model(0.2);
    let (next, protected, stats) = ml_semi_lagrangian(&model, &s, s.h(), &rotation_velocity).unwrap();
    assert_eq!(stats.reverted, stats.packets);
    assert!(protected.is_empty());
    assert_eq!(next.phi, semi_lagrangian_step(&s, s.h(), &rotation_velocity, StepOptions::default()).unwrap().phi);
}

#[test]
fn in_band_predictions_restore_the_curvature_sign() {
    let s = initial();
    let h = s.h();
    let bias = 0.1;
    assert!(bias < RELATIVE_GUARD);
    let corr = predict_corrections(&constant_model(bias), &s, h).unwrap();
    let found = packets(&s);
    assert_eq!(corr.len(), found.len());
    let mut flipped = 0;
    for (c, (n, p)) in corr.iter().zip(&found) {
        assert_eq!(c.node, *n);
        let sign = to_standard_form(p).unwrap().sign;
        let shift = if sign > 0 { -bias * h } else { bias * h };
        if sign > 0 {
            flipped += 1;
        }
        assert!(!c.reverted);
        assert!((c.phi_star - (p.phi_d + shift)).abs() < 1e-14, "{} {}", c.phi_star, p.phi_d + shift);
    }
    // A disk has positive curvature everywhere, so every packet goes through the flip.
    assert_eq!(flipped, found.len());
}

#[test]
fn hybrid_run_is_deterministic() {
    let model = constant_model(0.05);
    let s = initial();
    let t = 6.0 * s.h();
    let (a, la) = simulate_hybrid(&model, &s, &rotation_velocity, t, 10, 1.0).unwrap();
    let (b, lb) = simulate_hybrid(&model, &s, &rotation_velocity, t, 10, 1.0).unwrap();
    assert_eq!(a.phi, b.phi);
    assert_eq!(la.len(), 6);
    assert_eq!(la.iter().map(|x| x.protected).collect::<Vec<_>>(), lb.iter().map(|x| x.protected).collect::<Vec<_>>());
    let corrected: Vec<bool> = la.iter().map(|x| x.corrected).collect();
    assert_eq!(corrected, [true, false, true, false, true, false]);
}

#[test]
fn short_horizon_takes_one_plain_step() {
    let model = constant_model(0.0);
    let s = initial();
    let t = 0.5 * s.h();
    let (end, log) = simulate_hybrid(&model, &s, &rotation_velocity, t, 10, 1.0).unwrap();
    assert_eq!(log.len(), 1);
    assert!(!log[0].corrected);
    assert_eq!(log[0].packets, 0);
    assert_eq!(end.time, t);
}

#[test]
fn mismatched_model_or_step_is_rejected() {
    let s = initial();
    let mut model = constant_model(0.0);
    assert!(matches!(predict_corrections(&model, &s, 0.5 * s.h()), Err(Error::ModelMismatch(_))));
    model.l_max = L + 1;
    assert!(matches!(predict_corrections(&model, &s, s.h()), Err(Error::ModelMismatch(_))));
}
