//! Mixed-radix qudit registers and dense state vectors.
//!
//! Amplitudes are stored little-endian: qudit 0 has stride 1 and qudit `k`
//! has stride `d_0 · … · d_{k-1}`. Every kernel walks only the addressed
//! slice of the array, so a gate on levels `(a, b)` of a `d`-level qudit
//! touches `2N/d` amplitudes.
//!
//! [`FusedProgram`] compiles a gate sequence into larger blocks (one diagonal
//! pass for runs of phase gates, one sparse local operator per term circuit),
//! which is what the Trotter drivers execute.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::gates::{Gate, MAX_DIMENSION};
use crate::C64;

/// Amplitudes per reduction chunk; fixed so sums do not depend on the thread count.
const REDUCE_CHUNK: usize = 1 << 14;
/// Target amplitudes per parallel work item in gate kernels.
const KERNEL_BLOCK: usize = 1 << 14;
/// Largest local space a fused block may span.
pub const FUSE_LIMIT: usize = 1 << 17;

/// Compensated (Neumaier) summation.
#[derive(Debug, Clone, Copy, Default)]
pub struct Neumaier {
    sum: f64,
    comp: f64,
}

impl Neumaier {
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn merge(&mut self, other: Neumaier) {
        self.add(other.sum);
        self.add(other.comp);
    }

    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct RegisterShape {
    dims: Vec<usize>,
    strides: Vec<usize>,
    total: usize,
}

impl RegisterShape {
    pub fn new(dims: Vec<usize>) -> Result<Self> {
        if let Some(&d) = dims.iter().find(|&&d| !(2..=MAX_DIMENSION).contains(&d)) {
            return Err(Error::UnsupportedDimension(d));
        }
        let mut strides = Vec::with_capacity(dims.len());
        let mut total = 1usize;
        for &d in &dims {
            strides.push(total);
            total = total
                .checked_mul(d)
                .ok_or(Error::UnsupportedDimension(d))?;
        }
        Ok(RegisterShape { dims, strides, total })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn strides(&self) -> &[usize] {
        &self.strides
    }

    pub fn num_qudits(&self) -> usize {
        self.dims.len()
    }

    /// Total dimension `Π d_k`.
    pub fn total(&self) -> usize {
        self.total
    }

    pub fn index_of(&self, digits: &[usize]) -> Result<usize> {
        if digits.len() != self.dims.len() {
            return Err(Error::LengthMismatch {
                what: "digit string",
                expected: self.dims.len(),
                got: digits.len(),
            });
        }
        let mut idx = 0;
        for (q, (&l, (&d, &s))) in digits.iter().zip(self.dims.iter().zip(&self.strides)).enumerate() {
            if l >= d {
                return Err(Error::LevelOutOfRange { qudit: q, level: l, dim: d });
            }
            idx += l * s;
        }
        Ok(idx)
    }

    pub fn digits_into(&self, mut index: usize, out: &mut [usize]) {
        for (o, &d) in out.iter_mut().zip(&self.dims) {
            *o = index % d;
            index /= d;
        }
    }

    pub fn digits(&self, index: usize) -> Vec<usize> {
        let mut out = vec![0; self.dims.len()];
        self.digits_into(index, &mut out);
        out
    }

    /// Work-item size for a kernel whose highest touched qudit is `q`: a
    /// multiple of `stride[q] · d[q]` of roughly [`KERNEL_BLOCK`] amplitudes.
    fn block_for(&self, q: usize) -> usize {
        let unit = self.strides[q] * self.dims[q];
        if unit >= KERNEL_BLOCK {
            return unit;
        }
        self.strides
            .iter()
            .skip(q + 1)
            .copied()
            .find(|&s| s >= KERNEL_BLOCK)
            .unwrap_or(self.total)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StateVector {
    shape: RegisterShape,
    amps: Vec<C64>,
}

impl StateVector {
    /// `|digits⟩`.
    pub fn new_basis_state(shape: RegisterShape, digits: &[usize]) -> Result<Self> {
        let idx = shape.index_of(digits)?;
        let mut amps = vec![C64::new(0.0, 0.0); shape.total()];
        amps[idx] = C64::new(1.0, 0.0);
        Ok(StateVector { shape, amps })
    }

    pub fn from_amplitudes(shape: RegisterShape, amps: Vec<C64>) -> Result<Self> {
        if amps.len() != shape.total() {
            return Err(Error::LengthMismatch {
                what: "amplitude array",
                expected: shape.total(),
                got: amps.len(),
            });
        }
        Ok(StateVector { shape, amps })
    }

    pub fn shape(&self) -> &RegisterShape {
        &self.shape
    }

    pub fn amplitudes(&self) -> &[C64] {
        &self.amps
    }

    pub fn amplitudes_mut(&mut self) -> &mut [C64] {
        &mut self.amps
    }

    pub fn into_amplitudes(self) -> Vec<C64> {
        self.amps
    }

    pub fn amplitude(&self, digits: &[usize]) -> Result<C64> {
        Ok(self.amps[self.shape.index_of(digits)?])
    }

    /// Bytes held by the amplitude array; exactly `Π d_k` complex doubles.
    pub fn storage_bytes(&self) -> usize {
        debug_assert_eq!(self.amps.len(), self.shape.total());
        self.amps.capacity() * std::mem::size_of::<C64>()
    }

    /// Deterministic sum of `f(index, amp)` over nonzero amplitudes.
    pub fn reduce_support<F>(&self, f: F) -> f64
    where
        F: Fn(usize, C64) -> f64 + Sync,
    {
        let partials: Vec<Neumaier> = self
            .amps
            .par_chunks(REDUCE_CHUNK)
            .enumerate()
            .map(|(ci, chunk)| {
                let mut s = Neumaier::default();
                for (k, a) in chunk.iter().enumerate() {
                    if a.re != 0.0 || a.im != 0.0 {
                        s.add(f(ci * REDUCE_CHUNK + k, *a));
                    }
                }
                s
            })
            .collect();
        let mut total = Neumaier::default();
        for p in partials {
            total.merge(p);
        }
        total.value()
    }

    /// `marginals[q][l]`: probability of qudit `q` sitting at level `l`,
    /// gathered in one deterministic pass.
    pub fn level_marginals(&self) -> Vec<Vec<f64>> {
        let shape = &self.shape;
        let fresh = || -> Vec<Vec<Neumaier>> { shape.dims.iter().map(|&d| vec![Neumaier::default(); d]).collect() };
        let partials: Vec<Vec<Vec<Neumaier>>> = self
            .amps
            .par_chunks(REDUCE_CHUNK)
            .enumerate()
            .map(|(ci, chunk)| {
                let mut acc = fresh();
                let mut digits = vec![0; shape.num_qudits()];
                for (k, a) in chunk.iter().enumerate() {
                    if a.re != 0.0 || a.im != 0.0 {
                        shape.digits_into(ci * REDUCE_CHUNK + k, &mut digits);
                        let p = a.norm_sqr();
                        for (q, &l) in digits.iter().enumerate() {
                            acc[q][l].add(p);
                        }
                    }
                }
                acc
            })
            .collect();
        let mut total = fresh();
        for part in partials {
            for (tq, pq) in total.iter_mut().zip(part) {
                for (t, p) in tq.iter_mut().zip(pq) {
                    t.merge(p);
                }
            }
        }
        total.iter().map(|q| q.iter().map(Neumaier::value).collect()).collect()
    }

    pub fn norm_sqr(&self) -> f64 {
        self.reduce_support(|_, a| a.norm_sqr())
    }

    pub fn inner(&self, other: &StateVector) -> Result<C64> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch);
        }
        let re = self.reduce_support(|i, a| (a.conj() * other.amps[i]).re);
        let im = self.reduce_support(|i, a| (a.conj() * other.amps[i]).im);
        Ok(C64::new(re, im))
    }

    /// `Σ |amp|² Σ_{q ∈ subset} weight_q(level_q)`.
    pub fn expectation_diagonal(&self, weights: &[Vec<f64>], subset: &[usize]) -> Result<f64> {
        if weights.len() != self.shape.num_qudits() {
            return Err(Error::LengthMismatch {
                what: "weight maps",
                expected: self.shape.num_qudits(),
                got: weights.len(),
            });
        }
        for &q in subset {
            if q >= weights.len() {
                return Err(Error::QuditOutOfRange { qudit: q, len: weights.len() });
            }
            if weights[q].len() < self.shape.dims[q] {
                return Err(Error::LengthMismatch {
                    what: "weight map",
                    expected: self.shape.dims[q],
                    got: weights[q].len(),
                });
            }
        }
        let shape = &self.shape;
        Ok(self.reduce_support(|i, a| {
            let w: f64 = subset
                .iter()
                .map(|&q| weights[q][(i / shape.strides[q]) % shape.dims[q]])
                .sum();
            a.norm_sqr() * w
        }))
    }

    /// Text dump of `(digits, re, im)` for amplitudes above `threshold` in magnitude.
    pub fn dump(&self, threshold: f64) -> String {
        let mut out = String::new();
        let mut digits = vec![0; self.shape.num_qudits()];
        for (i, a) in self.amps.iter().enumerate() {
            if a.norm() > threshold {
                self.shape.digits_into(i, &mut digits);
                let s: String = digits.iter().map(|d| char::from(b'0' + *d as u8)).collect();
                let _ = writeln!(out, "{s} {:.17e} {:.17e}", a.re, a.im);
            }
        }
        out
    }

    /// Applies one gate in place.
    pub fn apply(&mut self, gate: &Gate) -> Result<()> {
        gate.validate(self.shape.dims())?;
        match *gate {
            Gate::VRz { q, level, phi } => self.phase_level(q, level, C64::from_polar(1.0, -phi)),
            Gate::Rz { q, a, b, phi } => {
                self.phase_level(q, a, C64::from_polar(1.0, -phi));
                self.phase_level(q, b, C64::from_polar(1.0, phi));
            }
            Gate::X { q, a, b } => self.swap_levels(q, a, b),
            Gate::H { q, a, b } => {
                let m = gate.block2().expect("hadamard block");
                self.single_block(q, a, b, m);
            }
            Gate::CX { ctrl, target, ctrl_level, l1, l2 } => {
                self.controlled(ctrl, ctrl_level, target, l1, l2, None)
            }
            Gate::CRz { ctrl, target, ctrl_level, a, b, .. } => {
                let m = gate.block2().expect("controlled rotation block");
                self.controlled(ctrl, ctrl_level, target, a, b, Some(m))
            }
            Gate::MS { q0, q1, a, b, .. } => {
                let m = gate.block4().expect("MS block");
                self.two_block(q0, q1, a, b, m)
            }
        }
        Ok(())
    }

    /// Applies the Weyl operator `X^shift Z^phase` (`Z` first) to qudit `q`.
    pub fn apply_weyl(&mut self, q: usize, shift: usize, phase: usize) -> Result<()> {
        let n = self.shape.num_qudits();
        if q >= n {
            return Err(Error::QuditOutOfRange { qudit: q, len: n });
        }
        let d = self.shape.dims[q];
        let s = self.shape.strides[q];
        let omega: Vec<C64> = (0..d)
            .map(|l| C64::from_polar(1.0, 2.0 * std::f64::consts::PI * ((phase * l) % d) as f64 / d as f64))
            .collect();
        let block = self.shape.block_for(q);
        self.amps.par_chunks_mut(block).for_each(|chunk| {
            let mut buf = [C64::new(0.0, 0.0); MAX_DIMENSION];
            for outer in (0..chunk.len()).step_by(s * d) {
                for k in 0..s {
                    let base = outer + k;
                    for l in 0..d {
                        buf[(l + shift) % d] = chunk[base + l * s] * omega[l];
                    }
                    for (l, v) in buf.iter().enumerate().take(d) {
                        chunk[base + l * s] = *v;
                    }
                }
            }
        });
        Ok(())
    }

    fn phase_level(&mut self, q: usize, level: usize, ph: C64) {
        let (d, s) = (self.shape.dims[q], self.shape.strides[q]);
        let block = self.shape.block_for(q);
        self.amps.par_chunks_mut(block).for_each(|chunk| {
            for outer in (0..chunk.len()).step_by(s * d) {
                let row = &mut chunk[outer + level * s..outer + (level + 1) * s];
                for v in row {
                    *v *= ph;
                }
            }
        });
    }

    fn swap_levels(&mut self, q: usize, a: usize, b: usize) {
        let (d, s) = (self.shape.dims[q], self.shape.strides[q]);
        let block = self.shape.block_for(q);
        self.amps.par_chunks_mut(block).for_each(|chunk| {
            for outer in (0..chunk.len()).step_by(s * d) {
                for k in 0..s {
                    chunk.swap(outer + a * s + k, outer + b * s + k);
                }
            }
        });
    }

    fn single_block(&mut self, q: usize, a: usize, b: usize, m: [[C64; 2]; 2]) {
        let (d, s) = (self.shape.dims[q], self.shape.strides[q]);
        let block = self.shape.block_for(q);
        self.amps.par_chunks_mut(block).for_each(|chunk| {
            for outer in (0..chunk.len()).step_by(s * d) {
                for k in 0..s {
                    let (ia, ib) = (outer + a * s + k, outer + b * s + k);
                    let (x, y) = (chunk[ia], chunk[ib]);
                    chunk[ia] = m[0][0] * x + m[0][1] * y;
                    chunk[ib] = m[1][0] * x + m[1][1] * y;
                }
            }
        });
    }

    /// Visits every index whose digits on `q0` and `q1` are both zero.
    fn for_each_pair_base<F>(&mut self, q0: usize, q1: usize, f: F)
    where
        F: Fn(&mut [C64], usize) + Sync,
    {
        let (hi, lo) = if q0 > q1 { (q0, q1) } else { (q1, q0) };
        let (s_hi, d_hi) = (self.shape.strides[hi], self.shape.dims[hi]);
        let (s_lo, d_lo) = (self.shape.strides[lo], self.shape.dims[lo]);
        let block = self.shape.block_for(hi);
        self.amps.par_chunks_mut(block).for_each(|chunk| {
            for outer in (0..chunk.len()).step_by(s_hi * d_hi) {
                for mid in (0..s_hi).step_by(s_lo * d_lo) {
                    for k in 0..s_lo {
                        f(chunk, outer + mid + k);
                    }
                }
            }
        });
    }

    fn controlled(
        &mut self,
        ctrl: usize,
        c: usize,
        target: usize,
        a: usize,
        b: usize,
        m: Option<[[C64; 2]; 2]>,
    ) {
        let sc = self.shape.strides[ctrl];
        let st = self.shape.strides[target];
        let (oa, ob) = (c * sc + a * st, c * sc + b * st);
        match m {
            None => self.for_each_pair_base(ctrl, target, |chunk, base| {
                chunk.swap(base + oa, base + ob);
            }),
            Some(m) => self.for_each_pair_base(ctrl, target, |chunk, base| {
                let (ia, ib) = (base + oa, base + ob);
                let (x, y) = (chunk[ia], chunk[ib]);
                chunk[ia] = m[0][0] * x + m[0][1] * y;
                chunk[ib] = m[1][0] * x + m[1][1] * y;
            }),
        }
    }

    fn two_block(&mut self, q0: usize, q1: usize, a: usize, b: usize, m: [[C64; 4]; 4]) {
        let (s0, s1) = (self.shape.strides[q0], self.shape.strides[q1]);
        let lv = [a, b];
        let off: [usize; 4] = std::array::from_fn(|k| lv[k >> 1] * s0 + lv[k & 1] * s1);
        self.for_each_pair_base(q0, q1, |chunk, base| {
            let x: [C64; 4] = std::array::from_fn(|k| chunk[base + off[k]]);
            for (r, row) in m.iter().enumerate() {
                chunk[base + off[r]] = row[0] * x[0] + row[1] * x[1] + row[2] * x[2] + row[3] * x[3];
            }
        });
    }
}

/// Applies `gate` to `state`, returning the updated state.
pub fn apply_gate(mut state: StateVector, gate: &Gate) -> Result<StateVector> {
    state.apply(gate)?;
    Ok(state)
}

/// Sparse action of one gate on a digit string: `(new digits, coefficient)` pairs.
pub(crate) fn gate_action(gate: &Gate, digits: &[usize]) -> Vec<(Vec<usize>, C64)> {
    let one = |d: &[usize]| vec![(d.to_vec(), C64::new(1.0, 0.0))];
    let two_level = |q: usize, a: usize, b: usize, m: [[C64; 2]; 2]| {
        let col = if digits[q] == a { 0 } else { 1 };
        (0..2)
            .filter(|&r| m[r][col] != C64::new(0.0, 0.0))
            .map(|r| {
                let mut d = digits.to_vec();
                d[q] = [a, b][r];
                (d, m[r][col])
            })
            .collect()
    };
    match *gate {
        Gate::VRz { q, level, phi } => {
            let c = if digits[q] == level { C64::from_polar(1.0, -phi) } else { C64::new(1.0, 0.0) };
            vec![(digits.to_vec(), c)]
        }
        Gate::Rz { q, a, b, .. } | Gate::H { q, a, b } | Gate::X { q, a, b } => {
            if digits[q] != a && digits[q] != b {
                return one(digits);
            }
            two_level(q, a, b, gate.block2().expect("block"))
        }
        Gate::CX { ctrl, target, ctrl_level, l1: a, l2: b }
        | Gate::CRz { ctrl, target, ctrl_level, a, b, .. } => {
            if digits[ctrl] != ctrl_level || (digits[target] != a && digits[target] != b) {
                return one(digits);
            }
            two_level(target, a, b, gate.block2().expect("block"))
        }
        Gate::MS { q0, q1, a, b, .. } => {
            let pos = |l: usize| if l == a { Some(0) } else if l == b { Some(1) } else { None };
            let (Some(i0), Some(i1)) = (pos(digits[q0]), pos(digits[q1])) else {
                return one(digits);
            };
            let m = gate.block4().expect("MS block");
            let col = 2 * i0 + i1;
            (0..4)
                .filter(|&r| m[r][col] != C64::new(0.0, 0.0))
                .map(|r| {
                    let mut d = digits.to_vec();
                    d[q0] = [a, b][r >> 1];
                    d[q1] = [a, b][r & 1];
                    (d, m[r][col])
                })
                .collect()
        }
    }
}

/// Product of per-qudit, per-level phases, applied in a single pass.
#[derive(Debug, Clone)]
pub struct DiagonalLayer {
    low: Vec<C64>,
    high: Vec<C64>,
}

impl DiagonalLayer {
    /// Builds the layer from diagonal single-qudit gates (`VRz`, `Rz`).
    pub fn from_gates(shape: &RegisterShape, gates: &[Gate]) -> Result<Self> {
        let mut phases: Vec<Vec<C64>> = shape.dims.iter().map(|&d| vec![C64::new(1.0, 0.0); d]).collect();
        for g in gates {
            g.validate(shape.dims())?;
            match *g {
                Gate::VRz { q, level, phi } => phases[q][level] *= C64::from_polar(1.0, -phi),
                Gate::Rz { q, a, b, phi } => {
                    phases[q][a] *= C64::from_polar(1.0, -phi);
                    phases[q][b] *= C64::from_polar(1.0, phi);
                }
                _ => return Err(Error::InvalidGate(format!("{g} is not a single-qudit phase"))),
            }
        }
        let table = |qs: std::ops::Range<usize>| -> Vec<C64> {
            let mut t = vec![C64::new(1.0, 0.0)];
            for q in qs {
                t = phases[q]
                    .iter()
                    .flat_map(|p| t.iter().map(move |x| x * p))
                    .collect();
            }
            t
        };
        let split = (0..=shape.num_qudits())
            .find(|&k| k == shape.num_qudits() || shape.strides[k] >= KERNEL_BLOCK)
            .unwrap_or(shape.num_qudits());
        Ok(DiagonalLayer {
            low: table(0..split),
            high: table(split..shape.num_qudits()),
        })
    }

    pub fn apply(&self, state: &mut StateVector) {
        let low = &self.low;
        let high = &self.high;
        debug_assert_eq!(low.len() * high.len(), state.amps.len());
        state
            .amps
            .par_chunks_mut(low.len())
            .enumerate()
            .for_each(|(h, chunk)| {
                let ph = high[h];
                for (v, p) in chunk.iter_mut().zip(low) {
                    *v *= p * ph;
                }
            });
    }
}

/// A unitary on a few qudits, stored as a sparse matrix over the local basis
/// states it actually moves.
#[derive(Debug, Clone)]
pub struct LocalOperator {
    qudits: Vec<usize>,
    offsets: Vec<usize>,
    cols: Vec<Vec<(u32, C64)>>,
    bases: Vec<usize>,
}

#[derive(Clone, Copy)]
struct SharedAmps(*mut C64);
// SAFETY: workers write through the pointer only at indices `base + offset`
// for their own `base`; distinct bases address disjoint index sets.
unsafe impl Send for SharedAmps {}
unsafe impl Sync for SharedAmps {}

impl LocalOperator {
    pub fn from_gates(shape: &RegisterShape, gates: &[Gate]) -> Result<Self> {
        let mut qudits: Vec<usize> = gates.iter().flat_map(|g| g.qudits()).collect();
        qudits.sort_unstable();
        qudits.dedup();
        for g in gates {
            g.validate(shape.dims())?;
        }
        let ldims: Vec<usize> = qudits.iter().map(|&q| shape.dims[q]).collect();
        let dlocal: usize = ldims.iter().product();
        if dlocal > FUSE_LIMIT {
            return Err(Error::EnumerationBound {
                what: "fused block",
                size: dlocal as u128,
                bound: FUSE_LIMIT as u128,
            });
        }
        let pos = |q: usize| qudits.binary_search(&q).expect("gate qudit in block");
        let local: Vec<Gate> = gates.iter().map(|g| g.remap(pos)).collect();
        let lshape = RegisterShape::new(ldims)?;

        let mut images: Vec<Option<Vec<(usize, C64)>>> = vec![None; dlocal];
        let mut digits = vec![0; qudits.len()];
        for (c, img) in images.iter_mut().enumerate() {
            lshape.digits_into(c, &mut digits);
            let mut cur: Vec<(Vec<usize>, C64)> = vec![(digits.clone(), C64::new(1.0, 0.0))];
            for g in &local {
                let mut next: std::collections::BTreeMap<Vec<usize>, C64> = Default::default();
                for (d, a) in &cur {
                    for (d2, c2) in gate_action(g, d) {
                        *next.entry(d2).or_insert(C64::new(0.0, 0.0)) += a * c2;
                    }
                }
                cur = next.into_iter().filter(|(_, a)| *a != C64::new(0.0, 0.0)).collect();
            }
            let col: Vec<(usize, C64)> = cur
                .into_iter()
                .map(|(d, a)| (lshape.index_of(&d).expect("local digits"), a))
                .collect();
            if !(col.len() == 1 && col[0].0 == c && col[0].1 == C64::new(1.0, 0.0)) {
                *img = Some(col);
            }
        }
        let mut active: Vec<bool> = images.iter().map(Option::is_some).collect();
        for img in images.iter().flatten() {
            for &(r, _) in img {
                active[r] = true;
            }
        }
        let act: Vec<usize> = (0..dlocal).filter(|&c| active[c]).collect();
        let slot: std::collections::HashMap<usize, u32> =
            act.iter().enumerate().map(|(i, &c)| (c, i as u32)).collect();
        let offsets = act
            .iter()
            .map(|&c| {
                lshape.digits_into(c, &mut digits);
                digits.iter().zip(&qudits).map(|(&l, &q)| l * shape.strides[q]).sum()
            })
            .collect();
        let cols = act
            .iter()
            .map(|&c| match &images[c] {
                Some(img) => img.iter().map(|&(r, a)| (slot[&r], a)).collect(),
                None => vec![(slot[&c], C64::new(1.0, 0.0))],
            })
            .collect();
        let bases = outer_bases(shape, &qudits);
        Ok(LocalOperator { qudits, offsets, cols, bases })
    }

    pub fn qudits(&self) -> &[usize] {
        &self.qudits
    }

    /// Number of local basis states the operator moves.
    pub fn active_len(&self) -> usize {
        self.offsets.len()
    }

    pub fn apply(&self, state: &mut StateVector) {
        if self.offsets.is_empty() {
            return;
        }
        let n = self.offsets.len();
        let ptr = SharedAmps(state.amps.as_mut_ptr());
        let len = state.amps.len();
        self.bases.par_chunks(64).for_each_init(
            || (vec![C64::new(0.0, 0.0); n], vec![C64::new(0.0, 0.0); n]),
            |(input, output), bases| {
                let p = ptr;
                for &base in bases {
                    for (x, &o) in input.iter_mut().zip(&self.offsets) {
                        debug_assert!(base + o < len);
                        // SAFETY: in bounds (offsets address digits below each dim) and
                        // owned by this base, see `SharedAmps`.
                        *x = unsafe { *p.0.add(base + o) };
                    }
                    output.iter_mut().for_each(|v| *v = C64::new(0.0, 0.0));
                    for (x, col) in input.iter().zip(&self.cols) {
                        for &(r, a) in col {
                            output[r as usize] += a * x;
                        }
                    }
                    for (y, &o) in output.iter().zip(&self.offsets) {
                        // SAFETY: as above.
                        unsafe { *p.0.add(base + o) = *y };
                    }
                }
            },
        );
    }
}

/// All register indices whose digits on `qudits` are zero, ascending.
fn outer_bases(shape: &RegisterShape, qudits: &[usize]) -> Vec<usize> {
    let free: Vec<usize> = (0..shape.num_qudits()).filter(|q| !qudits.contains(q)).collect();
    let mut out = vec![0usize];
    for &q in &free {
        let s = shape.strides[q];
        out = (0..shape.dims[q])
            .flat_map(|l| out.iter().map(move |b| b + l * s))
            .collect();
    }
    out.sort_unstable();
    out
}

#[derive(Debug, Clone)]
pub enum Block {
    Diagonal(DiagonalLayer),
    Local(LocalOperator),
    Gates(Vec<Gate>),
}

/// A gate sequence compiled into fused blocks.
///
/// Segment boundaries are supplied by the caller (typically one per term
/// circuit); adjacent segments made only of single-qudit phase gates are
/// merged into one [`DiagonalLayer`].
#[derive(Debug, Clone)]
pub struct FusedProgram {
    blocks: Vec<(Block, std::ops::Range<usize>)>,
    gates: Vec<Gate>,
}

impl FusedProgram {
    pub fn compile(shape: &RegisterShape, segments: &[&[Gate]]) -> Result<Self> {
        let phase_only = |s: &[Gate]| s.iter().all(|g| matches!(g, Gate::VRz { .. } | Gate::Rz { .. }));
        let mut blocks = Vec::new();
        let mut gates = Vec::new();
        let mut i = 0;
        while i < segments.len() {
            let start = gates.len();
            if phase_only(segments[i]) {
                while i < segments.len() && phase_only(segments[i]) {
                    gates.extend_from_slice(segments[i]);
                    i += 1;
                }
                let layer = DiagonalLayer::from_gates(shape, &gates[start..])?;
                blocks.push((Block::Diagonal(layer), start..gates.len()));
                continue;
            }
            let seg = segments[i];
            gates.extend_from_slice(seg);
            let block = match LocalOperator::from_gates(shape, seg) {
                Ok(op) => Block::Local(op),
                Err(Error::EnumerationBound { .. }) => Block::Gates(seg.to_vec()),
                Err(e) => return Err(e),
            };
            blocks.push((block, start..gates.len()));
            i += 1;
        }
        Ok(FusedProgram { blocks, gates })
    }

    /// The flat gate list in execution order.
    pub fn gates(&self) -> &[Gate] {
        &self.gates
    }

    pub fn blocks(&self) -> impl Iterator<Item = (&Block, std::ops::Range<usize>)> {
        self.blocks.iter().map(|(b, r)| (b, r.clone()))
    }

    pub fn apply(&self, state: &mut StateVector) -> Result<()> {
        for (b, _) in &self.blocks {
            apply_block(b, state)?;
        }
        Ok(())
    }
}

pub fn apply_block(block: &Block, state: &mut StateVector) -> Result<()> {
    match block {
        Block::Diagonal(d) => d.apply(state),
        Block::Local(l) => l.apply(state),
        Block::Gates(gs) => {
            for g in gs {
                state.apply(g)?;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gates::gate_matrix;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_state(shape: &RegisterShape, rng: &mut ChaCha8Rng) -> StateVector {
        let mut amps: Vec<C64> = (0..shape.total())
            .map(|_| C64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5))
            .collect();
        let n = amps.iter().map(|a| a.norm_sqr()).sum::<f64>().sqrt();
        amps.iter_mut().for_each(|a| *a /= n);
        StateVector::from_amplitudes(shape.clone(), amps).unwrap()
    }

    // Embeds the gate's local matrix into the full register by brute force.
    fn dense_apply(state: &StateVector, gate: &Gate) -> Vec<C64> {
        let shape = state.shape();
        let m = gate_matrix(gate, shape.dims()).unwrap();
        let qs = gate.qudits();
        let local = |d: &[usize]| qs.iter().fold(0, |acc, &q| acc * shape.dims()[q] + d[q]);
        let mut out = vec![C64::new(0.0, 0.0); shape.total()];
        for i in 0..shape.total() {
            let di = shape.digits(i);
            for j in 0..shape.total() {
                let dj = shape.digits(j);
                let same_rest = (0..di.len()).all(|q| qs.contains(&q) || di[q] == dj[q]);
                if same_rest {
                    out[i] += m[(local(&di), local(&dj))] * state.amplitudes()[j];
                }
            }
        }
        out
    }

    fn arb_case() -> impl Strategy<Value = (Vec<usize>, Gate, u64)> {
        (proptest::collection::vec(2usize..=5, 3), 0usize..7, 0usize..3, 0usize..3, -3.0f64..3.0, any::<u64>())
            .prop_filter_map("distinct qudits", |(dims, kind, q0, q1, x, seed)| {
                if q0 == q1 {
                    return None;
                }
                let (d0, d1) = (dims[q0], dims[q1]);
                let g = match kind {
                    0 => Gate::VRz { q: q0, level: d0 - 1, phi: x },
                    1 => Gate::Rz { q: q0, a: d0 - 1, b: 0, phi: x },
                    2 => Gate::H { q: q0, a: 1, b: d0 - 1 },
                    3 => Gate::X { q: q0, a: 0, b: d0 - 1 },
                    4 => Gate::cx(q0, q1, d0 - 1, d1 - 1, 0),
                    5 => Gate::CRz { ctrl: q0, target: q1, ctrl_level: 0, a: 0, b: d1 - 1, phi: x },
                    _ => Gate::MS { q0, q1, a: 1, b: d0.min(d1) - 1, theta: x, phi: x * 0.7 },
                };
                if g.validate(&dims).is_err() {
                    return None;
                }
                Some((dims, g, seed))
            })
    }

    #[test]
    fn basis_states() {
        let s = StateVector::new_basis_state(RegisterShape::new(vec![2]).unwrap(), &[0]).unwrap();
        assert_eq!(s.amplitudes(), &[C64::new(1.0, 0.0), C64::new(0.0, 0.0)]);
        let shape = RegisterShape::new(vec![2, 3, 4]).unwrap();
        let s = StateVector::new_basis_state(shape.clone(), &[1, 2, 3]).unwrap();
        let idx = 1 + 2 * 2 + 3 * (2 * 3);
        assert_eq!(s.amplitudes()[idx], C64::new(1.0, 0.0));
        assert!(StateVector::new_basis_state(shape, &[2, 0, 0]).is_err());
        let s = StateVector::new_basis_state(RegisterShape::new(vec![4, 4, 4]).unwrap(), &[1, 2, 2]).unwrap();
        assert_eq!(s.amplitude(&[1, 2, 2]).unwrap(), C64::new(1.0, 0.0));
        assert!(RegisterShape::new(vec![8]).is_err());
        assert!(RegisterShape::new(vec![1]).is_err());
    }

    #[test]
    fn cx_on_basis_states() {
        let shape = RegisterShape::new(vec![2, 2]).unwrap();
        let g = Gate::cx(0, 1, 1, 0, 1);
        let s = apply_gate(StateVector::new_basis_state(shape.clone(), &[1, 0]).unwrap(), &g).unwrap();
        assert_eq!(s.amplitude(&[1, 1]).unwrap(), C64::new(1.0, 0.0));
        let s = apply_gate(StateVector::new_basis_state(shape, &[0, 0]).unwrap(), &g).unwrap();
        assert_eq!(s.amplitude(&[0, 0]).unwrap(), C64::new(1.0, 0.0));
    }

    #[test]
    fn zero_angle_rotation_is_exact() {
        let shape = RegisterShape::new(vec![3, 4]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = random_state(&shape, &mut rng);
        let t = apply_gate(s.clone(), &Gate::Rz { q: 1, a: 0, b: 3, phi: 0.0 }).unwrap();
        for (a, b) in s.amplitudes().iter().zip(t.amplitudes()) {
            assert!((a - b).norm() < 1e-15);
        }
    }

    #[test]
    fn expectation_examples() {
        let shape = RegisterShape::new(vec![2]).unwrap();
        let sz = vec![vec![-0.5, 0.5]];
        let s = StateVector::new_basis_state(shape.clone(), &[0]).unwrap();
        assert_eq!(s.expectation_diagonal(&sz, &[0]).unwrap(), -0.5);
        let h = C64::new(std::f64::consts::FRAC_1_SQRT_2, 0.0);
        let s = StateVector::from_amplitudes(shape, vec![h, h]).unwrap();
        assert!(s.expectation_diagonal(&sz, &[0]).unwrap().abs() < 1e-15);
    }

    #[test]
    fn storage_is_exact() {
        let shape = RegisterShape::new(vec![2, 3, 3, 4]).unwrap();
        let s = StateVector::new_basis_state(shape.clone(), &[0, 0, 0, 0]).unwrap();
        assert_eq!(s.storage_bytes(), 2 * 3 * 3 * 4 * 16);
    }

    #[test]
    fn weyl_operators() {
        let shape = RegisterShape::new(vec![3, 5]).unwrap();
        let mut s = StateVector::new_basis_state(shape, &[2, 4]).unwrap();
        s.apply_weyl(1, 2, 1).unwrap();
        let w = C64::from_polar(1.0, 2.0 * std::f64::consts::PI * 4.0 / 5.0);
        assert!((s.amplitude(&[2, 1]).unwrap() - w).norm() < 1e-15);
    }

    #[test]
    fn norm_drift_over_many_gates() {
        let shape = RegisterShape::new(vec![3, 4, 2, 5]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut s = random_state(&shape, &mut rng);
        for k in 0..1000 {
            let x = rng.random::<f64>() * 6.0 - 3.0;
            let g = match k % 5 {
                0 => Gate::H { q: 1, a: 0, b: 3 },
                1 => Gate::MS { q0: 1, q1: 3, a: 2, b: 3, theta: x, phi: 0.2 },
                2 => Gate::cx(0, 3, 2, 1, 4),
                3 => Gate::CRz { ctrl: 2, target: 0, ctrl_level: 1, a: 0, b: 2, phi: x },
                _ => Gate::H { q: 3, a: 4, b: 0 },
            };
            s.apply(&g).unwrap();
        }
        assert!((s.norm_sqr() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fused_program_matches_gate_by_gate() {
        let shape = RegisterShape::new(vec![3, 4, 2, 5, 3]).unwrap();
        let seg_a = [
            Gate::H { q: 1, a: 0, b: 1 },
            Gate::cx(1, 3, 1, 2, 4),
            Gate::MS { q0: 3, q1: 1, a: 2, b: 3, theta: 0.7, phi: 0.0 },
            Gate::CRz { ctrl: 0, target: 3, ctrl_level: 2, a: 0, b: 4, phi: 0.3 },
        ];
        let seg_b = [Gate::VRz { q: 2, level: 1, phi: 0.4 }, Gate::Rz { q: 4, a: 0, b: 2, phi: -1.1 }];
        let seg_c = [Gate::VRz { q: 0, level: 2, phi: 0.9 }];
        let seg_d = [Gate::X { q: 4, a: 0, b: 1 }, Gate::cx(4, 0, 1, 0, 1)];
        let prog = FusedProgram::compile(&shape, &[&seg_a, &seg_b, &seg_c, &seg_d]).unwrap();
        assert_eq!(prog.blocks().count(), 3);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s0 = random_state(&shape, &mut rng);
        let mut fused = s0.clone();
        prog.apply(&mut fused).unwrap();
        let mut plain = s0;
        for g in prog.gates() {
            plain.apply(g).unwrap();
        }
        for (a, b) in fused.amplitudes().iter().zip(plain.amplitudes()) {
            assert!((a - b).norm() < 1e-13);
        }
    }

    #[test]
    fn reductions_are_chunk_stable() {
        let shape = RegisterShape::new(vec![7, 7, 7, 7, 7, 7]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let s = random_state(&shape, &mut rng);
        let a = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap().install(|| s.norm_sqr());
        let b = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap().install(|| s.norm_sqr());
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn marginals_agree_with_diagonal_expectations() {
        let shape = RegisterShape::new(vec![2, 3, 4, 5]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = random_state(&shape, &mut rng);
        let m = s.level_marginals();
        for (q, &d) in shape.dims().iter().enumerate() {
            assert!((m[q].iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for l in 0..d {
                let w: Vec<Vec<f64>> = shape.dims().iter().enumerate().map(|(k, &dk)| (0..dk).map(|j| f64::from(k == q && j == l)).collect()).collect();
                assert!((s.expectation_diagonal(&w, &[q]).unwrap() - m[q][l]).abs() < 1e-14);
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(120))]
        #[test]
        fn kernels_match_dense_oracle((dims, gate, seed) in arb_case()) {
            let shape = RegisterShape::new(dims).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = random_state(&shape, &mut rng);
            let want = dense_apply(&s, &gate);
            let got = apply_gate(s, &gate).unwrap();
            for (a, b) in got.amplitudes().iter().zip(&want) {
                prop_assert!((a - b).norm() < 1e-12);
            }
            prop_assert!((got.norm_sqr() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn expectation_matches_direct_sum(seed in any::<u64>()) {
            let shape = RegisterShape::new(vec![2, 3, 4]).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = random_state(&shape, &mut rng);
            let w: Vec<Vec<f64>> = shape.dims().iter().map(|&d| (0..d).map(|l| l as f64 - 0.3).collect()).collect();
            let got = s.expectation_diagonal(&w, &[0, 2]).unwrap();
            let mut want = 0.0;
            for i in 0..shape.total() {
                let d = shape.digits(i);
                want += s.amplitudes()[i].norm_sqr() * (w[0][d[0]] + w[2][d[2]]);
            }
            prop_assert!((got - want).abs() < 1e-12);
        }

        #[test]
        fn index_digit_bijection(dims in proptest::collection::vec(2usize..=7, 1..5), raw in any::<u64>()) {
            let shape = RegisterShape::new(dims).unwrap();
            let i = (raw as usize) % shape.total();
            prop_assert_eq!(shape.index_of(&shape.digits(i)).unwrap(), i);
        }
    }
}
