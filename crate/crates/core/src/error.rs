use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("lattice extents must be positive, got {lx}x{ly}")]
    EmptyLattice { lx: usize, ly: usize },

    #[error("spin must be a positive half-integer, got {twice}/2")]
    InvalidSpin { twice: u32 },

    #[error("link {0} does not exist on this lattice")]
    UnknownLink(String),

    #[error("vertex ({rx}, {ry}) does not exist on this lattice")]
    UnknownVertex { rx: i32, ry: i32 },

    #[error("{what}: expected {expected} entries, got {got}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("level {level} out of range for qudit {qudit} of dimension {dim}")]
    LevelOutOfRange { qudit: usize, level: usize, dim: usize },

    #[error("qudit {qudit} out of range for a register of {len} qudits")]
    QuditOutOfRange { qudit: usize, len: usize },

    #[error("qudit dimension {0} outside supported range 2..=7")]
    UnsupportedDimension(usize),

    #[error("invalid gate: {0}")]
    InvalidGate(String),

    #[error("link {0} lacks a complete neighbor set")]
    IncompleteNeighbors(String),

    #[error("plaquette links are not pairwise distinct")]
    DegeneratePlaquette,

    #[error("circuits are only available for spin 1/2 and spin 1, got {twice}/2")]
    UnsupportedSpin { twice: u32 },

    #[error("{what} needs {size} basis states, above the bound of {bound}")]
    EnumerationBound {
        what: &'static str,
        size: u128,
        bound: u128,
    },

    #[error("the requested Gauss sector is empty")]
    EmptySector,

    #[error("register shapes differ")]
    ShapeMismatch,

    #[error("time evolution did not converge: achieved error {achieved:e}, requested {requested:e}")]
    Convergence { achieved: f64, requested: f64 },

    #[error("probability {0} outside [0, 1]")]
    InvalidProbability(f64),

    #[error("parse error: {0}")]
    Parse(String),
}
