//! Mixed-radix qudit simulation and circuit compilation for the 2+1D U(1)
//! quantum link model with its matter fields integrated out.

pub mod circuits;
pub mod error;
pub mod gates;
pub mod hamiltonian;
pub mod lattice;
pub mod noise;
pub mod observables;
pub mod registers;

pub use num_complex::Complex64 as C64;

pub use error::{Error, Result};
pub use gates::{gate_matrix, Gate, NoiseClass};
pub use lattice::{
    enumerate_physical_configs, enumerate_sector, gauss_charge, Axis, GaussSector, Lattice,
    LinkConfig, LinkId, NeighborSet, Occupancy, SiteRule, Spin, Vertex,
};
pub use registers::{apply_gate, FusedProgram, RegisterShape, StateVector};
