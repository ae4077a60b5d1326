//! Subspace-addressed qudit gates.
//!
//! Every gate acts on one or two register qudits and only on an explicitly
//! addressed set of levels; everything outside that set is left alone.
//! Matrices follow the literal forms below with no global re-phasing:
//!
//! * `Rz^{ab}(φ) = e^{-iφ}|a⟩⟨a| + e^{iφ}|b⟩⟨b|`
//! * `VRz^a(φ) = e^{-iφ|a⟩⟨a|}`
//! * `H^{ab}`, `X^{ab}`: Hadamard and exchange on `span{|a⟩, |b⟩}`
//! * `CX_{c, l1↔l2}`: swap target levels `l1, l2` when the control is in `|c⟩`
//! * `CRz^{ab}(φ | c)`: `Rz^{ab}(φ)` on the target when the control is in `|c⟩`
//! * `MS^{ab}(θ, φ) = exp(-i θ/4 (σ_φ ⊗ 1 + 1 ⊗ σ_φ)²)` on `span{|a⟩,|b⟩}^{⊗2}`,
//!   with `σ_φ = cos φ σ_x + sin φ σ_y`, identity elsewhere

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::C64;

pub const MAX_DIMENSION: usize = 7;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Gate {
    VRz { q: usize, level: usize, phi: f64 },
    Rz { q: usize, a: usize, b: usize, phi: f64 },
    H { q: usize, a: usize, b: usize },
    X { q: usize, a: usize, b: usize },
    CX { ctrl: usize, target: usize, ctrl_level: usize, l1: usize, l2: usize },
    CRz { ctrl: usize, target: usize, ctrl_level: usize, a: usize, b: usize, phi: f64 },
    MS { q0: usize, q1: usize, a: usize, b: usize, theta: f64, phi: f64 },
}

/// Error-rate class used by the noise models.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NoiseClass {
    SingleQudit,
    ControlledExchange,
    MolmerSorensen,
}

impl Gate {
    pub fn cx(ctrl: usize, target: usize, ctrl_level: usize, l1: usize, l2: usize) -> Gate {
        Gate::CX { ctrl, target, ctrl_level, l1, l2 }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Gate::VRz { .. } => "VRZ",
            Gate::Rz { .. } => "RZ",
            Gate::H { .. } => "H",
            Gate::X { .. } => "X",
            Gate::CX { .. } => "CX",
            Gate::CRz { .. } => "CRZ",
            Gate::MS { .. } => "MS",
        }
    }

    /// Register qudits in gate order (control first for controlled gates).
    pub fn qudits(&self) -> Vec<usize> {
        match *self {
            Gate::VRz { q, .. } | Gate::Rz { q, .. } | Gate::H { q, .. } | Gate::X { q, .. } => {
                vec![q]
            }
            Gate::CX { ctrl, target, .. } | Gate::CRz { ctrl, target, .. } => vec![ctrl, target],
            Gate::MS { q0, q1, .. } => vec![q0, q1],
        }
    }

    pub fn arity(&self) -> usize {
        self.qudits().len()
    }

    /// Levels addressed on each qudit, aligned with [`Gate::qudits`].
    pub fn addressed_levels(&self) -> Vec<Vec<usize>> {
        match *self {
            Gate::VRz { level, .. } => vec![vec![level]],
            Gate::Rz { a, b, .. } | Gate::H { a, b, .. } | Gate::X { a, b, .. } => vec![vec![a, b]],
            Gate::CX { ctrl_level, l1, l2, .. } => vec![vec![ctrl_level], vec![l1, l2]],
            Gate::CRz { ctrl_level, a, b, .. } => vec![vec![ctrl_level], vec![a, b]],
            Gate::MS { a, b, .. } => vec![vec![a, b], vec![a, b]],
        }
    }

    pub fn is_entangling(&self) -> bool {
        matches!(self, Gate::CX { .. } | Gate::CRz { .. } | Gate::MS { .. })
    }

    /// Virtual gates are frame updates and carry no physical error.
    pub fn is_virtual(&self) -> bool {
        matches!(self, Gate::VRz { .. })
    }

    pub fn is_noisy(&self) -> bool {
        !self.is_virtual()
    }

    /// True for gates whose matrix is diagonal in the computational basis.
    pub fn is_diagonal(&self) -> bool {
        matches!(self, Gate::VRz { .. } | Gate::Rz { .. } | Gate::CRz { .. })
    }

    pub fn noise_class(&self) -> Option<NoiseClass> {
        match self {
            Gate::VRz { .. } => None,
            Gate::Rz { .. } | Gate::H { .. } | Gate::X { .. } => Some(NoiseClass::SingleQudit),
            Gate::CX { .. } | Gate::CRz { .. } => Some(NoiseClass::ControlledExchange),
            Gate::MS { .. } => Some(NoiseClass::MolmerSorensen),
        }
    }

    pub fn inverse(&self) -> Gate {
        match *self {
            Gate::VRz { q, level, phi } => Gate::VRz { q, level, phi: -phi },
            Gate::Rz { q, a, b, phi } => Gate::Rz { q, a, b, phi: -phi },
            Gate::CRz { ctrl, target, ctrl_level, a, b, phi } => {
                Gate::CRz { ctrl, target, ctrl_level, a, b, phi: -phi }
            }
            Gate::MS { q0, q1, a, b, theta, phi } => Gate::MS { q0, q1, a, b, theta: -theta, phi },
            g @ (Gate::H { .. } | Gate::X { .. } | Gate::CX { .. }) => g,
        }
    }

    /// Rewrites register indices through `map`.
    pub fn remap(&self, map: impl Fn(usize) -> usize) -> Gate {
        let mut g = *self;
        match &mut g {
            Gate::VRz { q, .. } | Gate::Rz { q, .. } | Gate::H { q, .. } | Gate::X { q, .. } => {
                *q = map(*q)
            }
            Gate::CX { ctrl, target, .. } | Gate::CRz { ctrl, target, .. } => {
                *ctrl = map(*ctrl);
                *target = map(*target);
            }
            Gate::MS { q0, q1, .. } => {
                *q0 = map(*q0);
                *q1 = map(*q1);
            }
        }
        g
    }

    /// Checks arity, level distinctness and level range against register dims.
    pub fn validate(&self, dims: &[usize]) -> Result<()> {
        let qs = self.qudits();
        for &q in &qs {
            if q >= dims.len() {
                return Err(Error::QuditOutOfRange { qudit: q, len: dims.len() });
            }
        }
        if qs.len() == 2 && qs[0] == qs[1] {
            return Err(Error::InvalidGate(format!("{self}: repeated qudit")));
        }
        for (&q, levels) in qs.iter().zip(self.addressed_levels()) {
            if levels.len() == 2 && levels[0] == levels[1] {
                return Err(Error::InvalidGate(format!("{self}: levels must be distinct")));
            }
            for l in levels {
                if l >= dims[q] {
                    return Err(Error::LevelOutOfRange { qudit: q, level: l, dim: dims[q] });
                }
            }
        }
        Ok(())
    }

    /// The 2×2 block on `(a, b)` of the single-qudit part, if any.
    pub(crate) fn block2(&self) -> Option<[[C64; 2]; 2]> {
        let z = C64::new(0.0, 0.0);
        let o = C64::new(1.0, 0.0);
        match *self {
            Gate::Rz { phi, .. } | Gate::CRz { phi, .. } => Some([
                [C64::from_polar(1.0, -phi), z],
                [z, C64::from_polar(1.0, phi)],
            ]),
            Gate::H { .. } => {
                let h = C64::new(std::f64::consts::FRAC_1_SQRT_2, 0.0);
                Some([[h, h], [h, -h]])
            }
            Gate::X { .. } | Gate::CX { .. } => Some([[z, o], [o, z]]),
            _ => None,
        }
    }

    /// The 4×4 block of an MS gate on `(a, b) ⊗ (a, b)`, row index `2 i0 + i1`.
    pub(crate) fn block4(&self) -> Option<[[C64; 4]; 4]> {
        let Gate::MS { theta, phi, .. } = *self else {
            return None;
        };
        // exp(-iθ/4 A²) with A² = 2(1 + σ⊗σ), so the exponential is
        // c0·1 + c1·σ⊗σ with c0 = (1 + e^{-iθ})/2, c1 = (e^{-iθ} - 1)/2.
        let e = C64::from_polar(1.0, -theta);
        let c0 = (C64::new(1.0, 0.0) + e) * 0.5;
        let c1 = (e - C64::new(1.0, 0.0)) * 0.5;
        let z = C64::new(0.0, 0.0);
        let sigma = [[z, C64::from_polar(1.0, -phi)], [C64::from_polar(1.0, phi), z]];
        let mut m = [[z; 4]; 4];
        for (r, row) in m.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                let kron = sigma[r >> 1][c >> 1] * sigma[r & 1][c & 1];
                *v = c1 * kron + if r == c { c0 } else { z };
            }
        }
        Some(m)
    }
}

/// Dense unitary of `gate` on its own qudits.
///
/// `dims` are the full register dimensions; the matrix is indexed by the
/// gate's qudits in [`Gate::qudits`] order, `index = i0 · d1 + i1`.
pub fn gate_matrix(gate: &Gate, dims: &[usize]) -> Result<DMatrix<C64>> {
    gate.validate(dims)?;
    let qs = gate.qudits();
    let local: Vec<usize> = qs.iter().map(|&q| dims[q]).collect();
    let n: usize = local.iter().product();
    let mut m = DMatrix::<C64>::identity(n, n);
    match *gate {
        Gate::VRz { level, phi, .. } => {
            m[(level, level)] = C64::from_polar(1.0, -phi);
        }
        Gate::Rz { a, b, .. } | Gate::H { a, b, .. } | Gate::X { a, b, .. } => {
            let blk = gate.block2().expect("single-qudit block");
            let lv = [a, b];
            for (r, &lr) in lv.iter().enumerate() {
                for (c, &lc) in lv.iter().enumerate() {
                    m[(lr, lc)] = blk[r][c];
                }
            }
        }
        Gate::CX { ctrl_level, l1: a, l2: b, .. } | Gate::CRz { ctrl_level, a, b, .. } => {
            let blk = gate.block2().expect("controlled block");
            let dt = local[1];
            let lv = [a, b];
            for (r, &lr) in lv.iter().enumerate() {
                for (c, &lc) in lv.iter().enumerate() {
                    m[(ctrl_level * dt + lr, ctrl_level * dt + lc)] = blk[r][c];
                }
            }
        }
        Gate::MS { a, b, .. } => {
            let blk = gate.block4().expect("MS block");
            let d1 = local[1];
            let lv = [a, b];
            let idx = |k: usize| lv[k >> 1] * d1 + lv[k & 1];
            for r in 0..4 {
                for c in 0..4 {
                    m[(idx(r), idx(c))] = blk[r][c];
                }
            }
        }
    }
    Ok(m)
}

fn parse_qudit(tok: &str) -> Result<usize> {
    tok.strip_prefix('q')
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Parse(format!("bad qudit token '{tok}'")))
}

fn parse_pair(s: &str) -> Result<(usize, usize)> {
    let (a, b) = s
        .split_once(',')
        .ok_or_else(|| Error::Parse(format!("bad level pair '{s}'")))?;
    let p = |x: &str| x.trim().parse::<usize>().map_err(|_| Error::Parse(format!("bad level '{x}'")));
    Ok((p(a)?, p(b)?))
}

impl fmt::Display for Gate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Gate::VRz { q, level, phi } => write!(f, "VRZ q{q} lvl={level} phi={phi}"),
            Gate::Rz { q, a, b, phi } => write!(f, "RZ q{q} sub={a},{b} phi={phi}"),
            Gate::H { q, a, b } => write!(f, "H q{q} sub={a},{b}"),
            Gate::X { q, a, b } => write!(f, "X q{q} sub={a},{b}"),
            Gate::CX { ctrl, target, ctrl_level, l1, l2 } => {
                write!(f, "CX q{ctrl} q{target} ctrl={ctrl_level} swap={l1},{l2}")
            }
            Gate::CRz { ctrl, target, ctrl_level, a, b, phi } => {
                write!(f, "CRZ q{ctrl} q{target} ctrl={ctrl_level} sub={a},{b} phi={phi}")
            }
            Gate::MS { q0, q1, a, b, theta, phi } => {
                write!(f, "MS q{q0} q{q1} sub={a},{b} theta={theta} phi={phi}")
            }
        }
    }
}

impl FromStr for Gate {
    type Err = Error;

    fn from_str(line: &str) -> Result<Self> {
        let mut toks = line.split_whitespace();
        let name = toks.next().ok_or_else(|| Error::Parse("empty gate line".into()))?;
        let mut qudits = Vec::new();
        let mut kv = std::collections::HashMap::new();
        for t in toks {
            match t.split_once('=') {
                Some((k, v)) => {
                    kv.insert(k, v);
                }
                None => qudits.push(parse_qudit(t)?),
            }
        }
        let get = |k: &str| {
            kv.get(k)
                .copied()
                .ok_or_else(|| Error::Parse(format!("{name}: missing '{k}'")))
        };
        let float = |k: &str| -> Result<f64> {
            get(k)?.parse().map_err(|_| Error::Parse(format!("{name}: bad number for '{k}'")))
        };
        let int = |k: &str| -> Result<usize> {
            get(k)?.parse().map_err(|_| Error::Parse(format!("{name}: bad integer for '{k}'")))
        };
        let arity = |n: usize| -> Result<()> {
            if qudits.len() == n {
                Ok(())
            } else {
                Err(Error::Parse(format!("{name} takes {n} qudits, got {}", qudits.len())))
            }
        };
        let gate = match name {
            "VRZ" => {
                arity(1)?;
                Gate::VRz { q: qudits[0], level: int("lvl")?, phi: float("phi")? }
            }
            "RZ" => {
                arity(1)?;
                let (a, b) = parse_pair(get("sub")?)?;
                Gate::Rz { q: qudits[0], a, b, phi: float("phi")? }
            }
            "H" => {
                arity(1)?;
                let (a, b) = parse_pair(get("sub")?)?;
                Gate::H { q: qudits[0], a, b }
            }
            "X" => {
                arity(1)?;
                let (a, b) = parse_pair(get("sub")?)?;
                Gate::X { q: qudits[0], a, b }
            }
            "CX" => {
                arity(2)?;
                let (l1, l2) = parse_pair(get("swap")?)?;
                Gate::cx(qudits[0], qudits[1], int("ctrl")?, l1, l2)
            }
            "CRZ" => {
                arity(2)?;
                let (a, b) = parse_pair(get("sub")?)?;
                Gate::CRz {
                    ctrl: qudits[0],
                    target: qudits[1],
                    ctrl_level: int("ctrl")?,
                    a,
                    b,
                    phi: float("phi")?,
                }
            }
            "MS" => {
                arity(2)?;
                let (a, b) = parse_pair(get("sub")?)?;
                Gate::MS {
                    q0: qudits[0],
                    q1: qudits[1],
                    a,
                    b,
                    theta: float("theta")?,
                    phi: float("phi")?,
                }
            }
            other => return Err(Error::Parse(format!("unknown gate '{other}'"))),
        };
        Ok(gate)
    }
}
