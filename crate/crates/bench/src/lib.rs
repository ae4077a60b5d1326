//! Fixtures shared by the benchmarks.

use qlink_core::circuits::{minimal_dimensions, trotter_step};
use qlink_core::hamiltonian::{most_connected_config, ModelParams};
use qlink_core::{FusedProgram, Gate, Lattice, Occupancy, RegisterShape, Spin, StateVector};

pub struct StepFixture {
    pub lattice: Lattice,
    pub params: ModelParams,
    pub gates: Vec<Gate>,
    pub program: FusedProgram,
    pub initial: StateVector,
}

/// One Trotter step on an `lx × ly` spin-1/2 lattice, started from the
/// most connected configuration with the given occupation.
pub fn step_fixture(lx: usize, ly: usize, params: ModelParams, occupancy: Option<fn(&Lattice) -> Occupancy>, dtheta: f64) -> StepFixture {
    let lattice = Lattice::build(lx, ly, Spin::HALF).unwrap();
    let schedule = trotter_step(&lattice, &params, dtheta).unwrap();
    let shape = RegisterShape::new(minimal_dimensions(&lattice, &schedule)).unwrap();
    let segments: Vec<&[Gate]> = schedule.iter().map(|c| c.gates.as_slice()).collect();
    let program = FusedProgram::compile(&shape, &segments).unwrap();
    let occ = occupancy.map(|f| f(&lattice));
    let c = most_connected_config(&lattice, &params, occ.as_ref()).unwrap();
    let digits: Vec<usize> = c.levels.iter().map(|&l| l as usize).collect();
    let initial = StateVector::new_basis_state(shape, &digits).unwrap();
    let gates = schedule.into_iter().flat_map(|c| c.gates).collect();
    StepFixture { lattice, params, gates, program, initial }
}

pub fn system_iii() -> StepFixture {
    step_fixture(3, 3, ModelParams { m: 0.42, kappa: 1.0, j: 0.5, g: 0.0 }, None, 0.01 * std::f64::consts::PI)
}
