//! Stochastic gate errors and Monte-Carlo trajectories.
//!
//! After every noisy gate, each qudit it touches independently suffers a
//! dephasing error `Z^k` (`k` uniform in `1..d`) with the gate-class rate, and
//! independently a depolarizing error: a uniformly drawn non-identity Weyl
//! operator `X^a Z^b`. Virtual phase gates are noiseless.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::gates::{Gate, NoiseClass};
use crate::registers::{apply_block, FusedProgram, Neumaier, StateVector};

/// Error rates per gate class; each rate is used once per noise type.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseModel {
    pub p_1q: f64,
    pub p_cx: f64,
    pub p_ms: f64,
}

impl NoiseModel {
    pub fn new(p_1q: f64, p_cx: f64, p_ms: f64) -> Result<Self> {
        for p in [p_1q, p_cx, p_ms] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidProbability(p));
            }
        }
        Ok(NoiseModel { p_1q, p_cx, p_ms })
    }

    pub fn none() -> Self {
        NoiseModel { p_1q: 0.0, p_cx: 0.0, p_ms: 0.0 }
    }

    pub fn model1() -> Self {
        NoiseModel { p_1q: 3e-7, p_cx: 2e-5, p_ms: 1e-5 }
    }

    /// Model 1 with every rate ten times larger.
    pub fn model2() -> Self {
        Self::model1().scaled(10.0)
    }

    pub fn scaled(&self, factor: f64) -> Self {
        NoiseModel { p_1q: self.p_1q * factor, p_cx: self.p_cx * factor, p_ms: self.p_ms * factor }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "none" => Ok(Self::none()),
            "model1" => Ok(Self::model1()),
            "model2" => Ok(Self::model2()),
            _ => Err(Error::Parse(format!("unknown noise model '{name}'"))),
        }
    }

    pub fn is_null(&self) -> bool {
        self.p_1q == 0.0 && self.p_cx == 0.0 && self.p_ms == 0.0
    }

    pub fn rate(&self, class: NoiseClass) -> f64 {
        match class {
            NoiseClass::SingleQudit => self.p_1q,
            NoiseClass::ControlledExchange => self.p_cx,
            NoiseClass::MolmerSorensen => self.p_ms,
        }
    }
}

/// A sampled error, applied as `X^shift Z^phase` on one qudit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ErrorOp {
    pub qudit: usize,
    pub shift: usize,
    pub phase: usize,
}

/// Draws the errors following one gate. `dims` is the register shape.
pub fn sample_gate_errors<R: Rng + ?Sized>(gate: &Gate, model: &NoiseModel, dims: &[usize], rng: &mut R) -> Vec<ErrorOp> {
    let Some(class) = gate.noise_class() else {
        return Vec::new();
    };
    let p = model.rate(class);
    if p == 0.0 {
        return Vec::new();
    }
    let mut out = Vec::new();
    for q in gate.qudits() {
        let d = dims[q];
        if rng.random_bool(p) {
            out.push(ErrorOp { qudit: q, shift: 0, phase: rng.random_range(1..d) });
        }
        if rng.random_bool(p) {
            let k = rng.random_range(1..d * d);
            out.push(ErrorOp { qudit: q, shift: k / d, phase: k % d });
        }
    }
    out
}

/// Per-sample observable statistics over all shots.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryResult {
    pub shots: usize,
    pub seeds: Vec<u64>,
    /// `mean[s][k]`: observable `k` after `s` steps.
    pub mean: Vec<Vec<f64>>,
    /// Sample standard deviation over `√shots`; zero for a single shot.
    pub stderr: Vec<Vec<f64>>,
}

/// Runs `program` once, injecting sampled errors after each noisy gate.
///
/// Blocks with no sampled error run fused; the random stream is consumed
/// identically either way.
pub fn run_noisy_program<R: Rng + ?Sized>(program: &FusedProgram, state: &mut StateVector, model: &NoiseModel, rng: &mut R) -> Result<()> {
    if model.is_null() {
        return program.apply(state);
    }
    let dims = state.shape().dims().to_vec();
    let gates = program.gates();
    for (block, range) in program.blocks() {
        let mut errors: Vec<(usize, ErrorOp)> = Vec::new();
        for k in range.clone() {
            for e in sample_gate_errors(&gates[k], model, &dims, rng) {
                errors.push((k, e));
            }
        }
        if errors.is_empty() {
            apply_block(block, state)?;
            continue;
        }
        let mut next = errors.iter().peekable();
        for k in range {
            state.apply(&gates[k])?;
            while let Some((_, e)) = next.next_if(|(g, _)| *g == k) {
                state.apply_weyl(e.qudit, e.shift, e.phase)?;
            }
        }
    }
    Ok(())
}

/// Repeats `program` for `steps` steps over `shots` independent noisy runs,
/// recording `observe` before the first step and after every step.
///
/// Shot seeds are drawn from a generator seeded by `seed`. Shots run in
/// parallel when `parallel_shots` is set; results are reduced in shot order,
/// so the output does not depend on the thread count.
#[allow(clippy::too_many_arguments)]
pub fn run_trajectories<F>(
    program: &FusedProgram,
    steps: usize,
    psi0: &StateVector,
    model: &NoiseModel,
    shots: usize,
    observe: F,
    seed: u64,
    parallel_shots: bool,
) -> Result<TrajectoryResult>
where
    F: Fn(usize, &StateVector) -> Result<Vec<f64>> + Sync,
{
    if shots == 0 {
        return Err(Error::InvalidGate("at least one shot is required".into()));
    }
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let seeds: Vec<u64> = (0..shots).map(|_| master.next_u64()).collect();
    let one = |s: u64| -> Result<Vec<Vec<f64>>> {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let mut state = psi0.clone();
        let mut rows = vec![observe(0, &state)?];
        for step in 1..=steps {
            run_noisy_program(program, &mut state, model, &mut rng)?;
            rows.push(observe(step, &state)?);
        }
        Ok(rows)
    };
    let runs: Vec<Vec<Vec<f64>>> = if parallel_shots {
        seeds.par_iter().map(|&s| one(s)).collect::<Result<_>>()?
    } else {
        seeds.iter().map(|&s| one(s)).collect::<Result<_>>()?
    };
    let width = runs[0][0].len();
    let mut mean = vec![vec![0.0; width]; steps + 1];
    let mut stderr = vec![vec![0.0; width]; steps + 1];
    for s in 0..=steps {
        for k in 0..width {
            let mut sum = Neumaier::default();
            for r in &runs {
                sum.add(r[s][k]);
            }
            let mu = sum.value() / shots as f64;
            let mut var = Neumaier::default();
            for r in &runs {
                var.add((r[s][k] - mu).powi(2));
            }
            mean[s][k] = mu;
            if shots > 1 {
                stderr[s][k] = (var.value() / (shots - 1) as f64).sqrt() / (shots as f64).sqrt();
            }
        }
    }
    Ok(TrajectoryResult { shots, seeds, mean, stderr })
}
