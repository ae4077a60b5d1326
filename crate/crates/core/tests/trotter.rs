//! Whole-step properties of the Trotter schedule.

use proptest::prelude::*;
use qlink_core::circuits::{minimal_dimensions, trotter_step};
use qlink_core::hamiltonian::{build_h_mio_on, exact_evolve, Basis, ModelParams};
use qlink_core::observables::{gauss_violation, leakage};
use qlink_core::{enumerate_sector, FusedProgram, Gate, GaussSector, Lattice, RegisterShape, Spin, StateVector, C64};

const SYSTEM_III: ModelParams = ModelParams { m: 0.42, kappa: 1.0, j: 0.5, g: 0.0 };

fn program(lat: &Lattice, params: &ModelParams, dtheta: f64) -> (RegisterShape, FusedProgram, Vec<Gate>) {
    let schedule = trotter_step(lat, params, dtheta).unwrap();
    let shape = RegisterShape::new(minimal_dimensions(lat, &schedule)).unwrap();
    let gates: Vec<Gate> = schedule.iter().flat_map(|c| c.gates.clone()).collect();
    let segments: Vec<&[Gate]> = schedule.iter().map(|c| c.gates.as_slice()).collect();
    (shape.clone(), FusedProgram::compile(&shape, &segments).unwrap(), gates)
}

fn embed(shape: &RegisterShape, levels: &[u8]) -> StateVector {
    let d: Vec<usize> = levels.iter().map(|&l| l as usize).collect();
    StateVector::new_basis_state(shape.clone(), &d).unwrap()
}

#[test]
fn step_preserves_physical_span() {
    let lat = Lattice::build(3, 3, Spin::HALF).unwrap();
    let sector = GaussSector::dynamical(&lat);
    let (shape, prog, _) = program(&lat, &SYSTEM_III, 0.37);
    for c in enumerate_sector(&lat, &sector).unwrap() {
        let mut s = embed(&shape, &c.levels);
        prog.apply(&mut s).unwrap();
        assert!(leakage(&s, &lat).unwrap() < 1e-10);
        assert!(gauss_violation(&s, &lat, &sector).unwrap() < 1e-10);
        assert!((s.norm_sqr() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn zero_step_is_identity() {
    let lat = Lattice::build(3, 3, Spin::HALF).unwrap();
    let (shape, prog, _) = program(&lat, &SYSTEM_III, 0.0);
    for c in enumerate_sector(&lat, &GaussSector::dynamical(&lat)).unwrap().iter().take(20) {
        let s0 = embed(&shape, &c.levels);
        let mut s = s0.clone();
        prog.apply(&mut s).unwrap();
        let diff = s.amplitudes().iter().zip(s0.amplitudes()).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
        assert!(diff < 1e-12);
    }
}

/// One short step against `e^{-iHθ}` in the sector basis: the first-order
/// splitting error is `O(θ²)`.
#[test]
fn short_step_matches_hamiltonian() {
    let lat = Lattice::build(3, 3, Spin::HALF).unwrap();
    let configs = enumerate_sector(&lat, &GaussSector::dynamical(&lat)).unwrap();
    let h = build_h_mio_on(&lat, &SYSTEM_III, configs).unwrap();
    let Basis::Links { configs, .. } = h.basis() else { panic!() };
    for dtheta in [1e-3, 2e-3] {
        let (shape, prog, _) = program(&lat, &SYSTEM_III, dtheta);
        let mut worst: f64 = 0.0;
        for (k, c) in configs.iter().enumerate() {
            let mut s = embed(&shape, &c.levels);
            prog.apply(&mut s).unwrap();
            let mut psi = vec![C64::new(0.0, 0.0); configs.len()];
            psi[k] = C64::new(1.0, 0.0);
            let exact = exact_evolve(&h, &psi, dtheta).unwrap();
            for (cfg, e) in configs.iter().zip(&exact) {
                let a = s.amplitude(&cfg.levels.iter().map(|&l| l as usize).collect::<Vec<_>>()).unwrap();
                worst = worst.max((a - e).norm());
            }
        }
        assert!(worst < 2.0 * dtheta * dtheta, "dtheta {dtheta}: {worst:e}");
        assert!(worst > 1e-3 * dtheta * dtheta);
    }
}

#[test]
fn four_by_four_step_stays_physical() {
    let lat = Lattice::build(4, 4, Spin::HALF).unwrap();
    let params = ModelParams { m: 0.42, kappa: 1.0, j: 0.0, g: 0.0 };
    let sector = GaussSector::dynamical(&lat);
    let (shape, prog, _) = program(&lat, &params, 0.2);
    let c = &enumerate_sector(&lat, &sector).unwrap()[7];
    let mut s = embed(&shape, &c.levels);
    prog.apply(&mut s).unwrap();
    assert!(leakage(&s, &lat).unwrap() < 1e-10);
    assert!(gauss_violation(&s, &lat, &sector).unwrap() < 1e-10);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn fused_step_equals_gate_by_gate(dtheta in -1.0f64..1.0, pick in 0usize..1000) {
        let lat = Lattice::build(3, 3, Spin::HALF).unwrap();
        let configs = enumerate_sector(&lat, &GaussSector::dynamical(&lat)).unwrap();
        let (shape, prog, gates) = program(&lat, &SYSTEM_III, dtheta);
        let s0 = embed(&shape, &configs[pick % configs.len()].levels);
        let mut fused = s0.clone();
        prog.apply(&mut fused).unwrap();
        let mut plain = s0;
        for g in &gates {
            plain.apply(g).unwrap();
        }
        let diff = fused.amplitudes().iter().zip(plain.amplitudes()).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
        prop_assert!(diff < 1e-12);
    }
}
