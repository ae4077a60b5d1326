//! Measurements on register states and on sector-basis states.
//!
//! Register qudits may carry levels above `2S` while a term circuit runs.
//! Such weight contributes nothing to `s^z` expectations and is reported by
//! [`leakage`] instead.

use crate::error::{Error, Result};
use crate::lattice::{GaussSector, Lattice, LinkConfig};
use crate::registers::StateVector;
use crate::C64;

/// What to measure on a state.
#[derive(Debug, Clone, PartialEq)]
pub enum ObservableSpec {
    /// Mean `⟨s^z⟩` over a nonempty set of link indices.
    Magnetization(Vec<usize>),
    /// `⟨s^z⟩` on every link.
    LocalSz,
    GaussViolation(GaussSector),
    Leakage,
    Fidelity(StateVector),
}

impl ObservableSpec {
    /// Number of values [`ObservableSpec::evaluate`] returns.
    pub fn width(&self, lat: &Lattice) -> usize {
        match self {
            ObservableSpec::LocalSz => lat.num_links(),
            _ => 1,
        }
    }

    pub fn evaluate(&self, state: &StateVector, lat: &Lattice) -> Result<Vec<f64>> {
        Ok(match self {
            ObservableSpec::Magnetization(a) => vec![magnetization(state, lat, a)?],
            ObservableSpec::LocalSz => local_sz_map(state, lat)?,
            ObservableSpec::GaussViolation(s) => vec![gauss_violation(state, lat, s)?],
            ObservableSpec::Leakage => vec![leakage(state, lat)?],
            ObservableSpec::Fidelity(r) => vec![fidelity(r, state)?],
        })
    }
}

fn check_register(state: &StateVector, lat: &Lattice) -> Result<()> {
    let n = state.shape().num_qudits();
    if n != lat.num_links() {
        return Err(Error::LengthMismatch { what: "register qudits", expected: lat.num_links(), got: n });
    }
    Ok(())
}

fn sz_weights(state: &StateVector, lat: &Lattice) -> Vec<Vec<f64>> {
    let spin = lat.spin();
    state
        .shape()
        .dims()
        .iter()
        .map(|&d| (0..d).map(|l| if l < spin.levels() { spin.sz(l) } else { 0.0 }).collect())
        .collect()
}

/// `(1/N) Σ_{q ∈ subset} ⟨s^z_q⟩`.
pub fn magnetization(state: &StateVector, lat: &Lattice, subset: &[usize]) -> Result<f64> {
    check_register(state, lat)?;
    if subset.is_empty() {
        return Err(Error::LengthMismatch { what: "magnetization subset", expected: 1, got: 0 });
    }
    let total = state.expectation_diagonal(&sz_weights(state, lat), subset)?;
    Ok(total / subset.len() as f64)
}

pub fn local_sz_map(state: &StateVector, lat: &Lattice) -> Result<Vec<f64>> {
    check_register(state, lat)?;
    let w = sz_weights(state, lat);
    Ok(state
        .level_marginals()
        .iter()
        .zip(&w)
        .map(|(p, w)| p.iter().zip(w).map(|(p, w)| p * w).sum())
        .collect())
}

/// `Σ_r ⟨G_r²⟩`, with free matter sites taking the occupation that minimizes
/// each term.
pub fn gauss_violation(state: &StateVector, lat: &Lattice, sector: &GaussSector) -> Result<f64> {
    check_register(state, lat)?;
    let shape = state.shape();
    let levels_max = lat.spin().levels();
    Ok(state.reduce_support(|i, a| {
        let digits = shape.digits(i);
        if digits.iter().any(|&l| l >= levels_max) {
            return 0.0;
        }
        let levels: Vec<u8> = digits.iter().map(|&l| l as u8).collect();
        a.norm_sqr() * sector.penalty(lat, &levels)
    }))
}

/// Total weight on levels above `2S` on any link.
pub fn leakage(state: &StateVector, lat: &Lattice) -> Result<f64> {
    check_register(state, lat)?;
    let shape = state.shape();
    let levels_max = lat.spin().levels();
    if shape.dims().iter().all(|&d| d <= levels_max) {
        return Ok(0.0);
    }
    Ok(state.reduce_support(|i, a| {
        let mut rest = i;
        let lifted = shape.dims().iter().any(|&d| {
            let l = rest % d;
            rest /= d;
            l >= levels_max
        });
        if lifted {
            a.norm_sqr()
        } else {
            0.0
        }
    }))
}

/// `|⟨a|b⟩|²`.
pub fn fidelity(a: &StateVector, b: &StateVector) -> Result<f64> {
    Ok(a.inner(b)?.norm_sqr())
}

/// Magnetization of a state written in a link-configuration basis.
pub fn sector_magnetization(amps: &[C64], configs: &[LinkConfig], lat: &Lattice, subset: &[usize]) -> Result<f64> {
    if amps.len() != configs.len() {
        return Err(Error::LengthMismatch { what: "sector amplitudes", expected: configs.len(), got: amps.len() });
    }
    if subset.is_empty() {
        return Err(Error::LengthMismatch { what: "magnetization subset", expected: 1, got: 0 });
    }
    let spin = lat.spin();
    let total: f64 = amps
        .iter()
        .zip(configs)
        .map(|(a, c)| a.norm_sqr() * subset.iter().map(|&q| spin.sz(c.levels[q] as usize)).sum::<f64>())
        .sum();
    Ok(total / subset.len() as f64)
}

/// Per-link `⟨s^z⟩` of a state written in a link-configuration basis.
pub fn sector_local_sz(amps: &[C64], configs: &[LinkConfig], lat: &Lattice) -> Vec<f64> {
    let spin = lat.spin();
    let mut out = vec![0.0; lat.num_links()];
    for (a, c) in amps.iter().zip(configs) {
        let p = a.norm_sqr();
        for (q, &l) in c.levels.iter().enumerate() {
            out[q] += p * spin.sz(l as usize);
        }
    }
    out
}
