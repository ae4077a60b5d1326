//! Gate-level circuits for the Trotterized matter-integrated-out dynamics.
//!
//! Each Trotter factor is compiled to its own [`Circuit`]:
//!
//! * mass: `e^{+i 2θ s^z}`, `θ = m dθ`, as virtual phases;
//! * electric: `e^{-iθ (s^z)²}`, `θ = g² dθ / 2`, virtual phases (spin 1 only);
//! * coupling: `exp(+iθ Σ_m P_L^m σ^{x;-m,-m-1} P_R^m)`, `θ = κ dθ`;
//! * plaquette: `exp(-iθ (U_□ + U_□†))`, `θ = J dθ`.
//!
//! Qudit indices coincide with lattice link indices. Levels above `2S` are
//! scratch space used while a term circuit runs and are empty again at its end.

use std::collections::HashMap;
use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, SQRT_2};
use std::fmt;

use crate::error::{Error, Result};
use crate::gates::Gate;
use crate::hamiltonian::ModelParams;
use crate::lattice::{Lattice, LinkId, Spin};
use crate::registers::gate_action;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TermKind {
    Mass,
    Electric,
    Coupling,
    Plaquette,
}

impl fmt::Display for TermKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TermKind::Mass => "mass",
            TermKind::Electric => "electric",
            TermKind::Coupling => "coupling",
            TermKind::Plaquette => "plaquette",
        })
    }
}

/// An ordered gate list implementing one Trotter factor.
#[derive(Debug, Clone, PartialEq)]
pub struct Circuit {
    pub kind: TermKind,
    pub label: String,
    pub gates: Vec<Gate>,
    /// Links addressed by the circuit, paired with their register qudits.
    pub register_map: Vec<(LinkId, usize)>,
}

impl Circuit {
    fn new(kind: TermKind, label: String, gates: Vec<Gate>, lat: &Lattice) -> Self {
        let mut qs: Vec<usize> = gates.iter().flat_map(|g| g.qudits()).collect();
        qs.sort_unstable();
        qs.dedup();
        Circuit {
            kind,
            label,
            gates,
            register_map: qs.into_iter().map(|q| (lat.link(q), q)).collect(),
        }
    }

    pub fn census(&self) -> GateCensus {
        gate_counts(&self.gates)
    }
}

/// Gate tallies. Virtual gates are counted separately from single-qudit gates.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct GateCensus {
    pub single_qudit: usize,
    pub two_qudit: usize,
    pub entangling: usize,
    pub virtual_gates: usize,
}

impl std::ops::Add for GateCensus {
    type Output = GateCensus;
    fn add(self, o: GateCensus) -> GateCensus {
        GateCensus {
            single_qudit: self.single_qudit + o.single_qudit,
            two_qudit: self.two_qudit + o.two_qudit,
            entangling: self.entangling + o.entangling,
            virtual_gates: self.virtual_gates + o.virtual_gates,
        }
    }
}

pub fn gate_counts(gates: &[Gate]) -> GateCensus {
    let mut c = GateCensus::default();
    for g in gates {
        if g.is_virtual() {
            c.virtual_gates += 1;
        } else if g.arity() == 1 {
            c.single_qudit += 1;
        } else {
            c.two_qudit += 1;
        }
        if g.is_entangling() {
            c.entangling += 1;
        }
    }
    c
}

fn inverse_of(gates: &[Gate]) -> Vec<Gate> {
    gates.iter().rev().map(Gate::inverse).collect()
}

/// Removes pairs `g … g⁻¹` whose intervening gates act on disjoint qudits.
pub fn cancel_inverse_pairs(mut gates: Vec<Gate>) -> Vec<Gate> {
    loop {
        let mut removed = false;
        'scan: for i in 0..gates.len() {
            let qi = gates[i].qudits();
            for j in i + 1..gates.len() {
                let qj = gates[j].qudits();
                if qj.iter().any(|q| qi.contains(q)) {
                    if gates[j] == gates[i].inverse() && {
                        let mut a = qi.clone();
                        let mut b = qj.clone();
                        a.sort_unstable();
                        b.sort_unstable();
                        a == b
                    } {
                        gates.remove(j);
                        gates.remove(i);
                        removed = true;
                        break 'scan;
                    }
                    break;
                }
            }
        }
        if !removed {
            return gates;
        }
    }
}

/// Spin-1/2 projector mapping on `(P¹, P², P³)`: the flag `P³` ends in `|1⟩`
/// exactly when one of the three links is up.
pub fn projector_map_spin_half(q: [usize; 3]) -> Vec<Gate> {
    let [q1, q2, q3] = q;
    vec![
        Gate::cx(q1, q2, 1, 1, 2),
        Gate::cx(q2, q3, 2, 1, 2),
        Gate::cx(q1, q2, 1, 0, 1),
        Gate::cx(q2, q3, 1, 0, 1),
    ]
}

/// Spin-1 projector circuit on `(P¹, P², P³)`: the flag reaches `|3⟩` on the
/// `Σ s^z = 0` states and `|4⟩` on the `Σ s^z = -1` states.
pub fn projector_spin_one(q: [usize; 3]) -> Vec<Gate> {
    let [a, b, c] = q;
    vec![
        Gate::cx(a, b, 1, 0, 1),
        Gate::cx(a, b, 1, 2, 3),
        Gate::cx(a, b, 0, 0, 2),
        Gate::cx(a, b, 2, 1, 3),
        Gate::cx(a, b, 2, 2, 4),
        Gate::cx(b, c, 0, 1, 3),
        Gate::cx(b, c, 0, 0, 4),
        Gate::cx(b, c, 1, 2, 3),
        Gate::cx(b, c, 1, 1, 4),
        Gate::cx(b, c, 3, 0, 3),
        Gate::cx(b, c, 2, 2, 4),
    ]
}

/// The uncancelled spin-1/2 coupling sequence: `H`, the `P_L` box (map, lift,
/// unmap), the `P_R` box with the controlled rotation, `P_L†`, `H`.
pub fn coupling_spin_half_uncancelled(target: usize, l: [usize; 3], r: [usize; 3], theta: f64) -> Vec<Gate> {
    let map_l = projector_map_spin_half(l);
    let map_r = projector_map_spin_half(r);
    let lift = vec![Gate::cx(l[2], target, 1, 1, 3), Gate::cx(l[2], target, 1, 0, 2)];
    let rot = vec![
        Gate::Rz { q: target, a: 2, b: 3, phi: -theta / 2.0 },
        Gate::cx(r[2], target, 1, 2, 3),
        Gate::Rz { q: target, a: 2, b: 3, phi: theta / 2.0 },
        Gate::cx(r[2], target, 1, 2, 3),
    ];
    let box_l: Vec<Gate> = [map_l.clone(), lift.clone(), inverse_of(&map_l)].concat();
    let box_r: Vec<Gate> = [map_r.clone(), rot, inverse_of(&map_r)].concat();
    let h = Gate::H { q: target, a: 0, b: 1 };
    [vec![h], box_l.clone(), box_r, inverse_of(&box_l), vec![h]].concat()
}

/// Spin-1/2 coupling circuit, `exp(+iθ P_L σ^x P_R)` on the target link.
pub fn coupling_spin_half_gates(target: usize, l: [usize; 3], r: [usize; 3], theta: f64) -> Vec<Gate> {
    cancel_inverse_pairs(coupling_spin_half_uncancelled(target, l, r, theta))
}

/// Spin-1 coupling circuit, `exp(+iθ Σ_m P_L^m σ^{x;-m,-m-1} P_R^m)`.
pub fn coupling_spin_one_gates(target: usize, l: [usize; 3], r: [usize; 3], theta: f64) -> Vec<Gate> {
    let p_l = projector_spin_one(l);
    let p_r = projector_spin_one(r);
    let (fl, fr, t) = (l[2], r[2], target);
    let lift = vec![
        Gate::cx(fl, t, 3, 1, 3),
        Gate::cx(fl, t, 3, 0, 5),
        Gate::cx(fl, t, 4, 1, 4),
        Gate::cx(fl, t, 4, 2, 6),
    ];
    // Both σ^x blocks carry the matrix element √2.
    let a = -SQRT_2 * theta / 2.0;
    let crx = vec![
        Gate::H { q: t, a: 3, b: 5 },
        Gate::H { q: t, a: 4, b: 6 },
        Gate::Rz { q: t, a: 3, b: 5, phi: a },
        Gate::Rz { q: t, a: 4, b: 6, phi: a },
        Gate::cx(fr, t, 3, 3, 5),
        Gate::cx(fr, t, 4, 4, 6),
        Gate::Rz { q: t, a: 3, b: 5, phi: -a },
        Gate::Rz { q: t, a: 4, b: 6, phi: -a },
        Gate::cx(fr, t, 3, 3, 5),
        Gate::cx(fr, t, 4, 4, 6),
        Gate::H { q: t, a: 3, b: 5 },
        Gate::H { q: t, a: 4, b: 6 },
    ];
    [
        p_l.clone(),
        lift.clone(),
        p_r.clone(),
        crx,
        inverse_of(&p_r),
        inverse_of(&lift),
        inverse_of(&p_l),
    ]
    .concat()
}

/// Maps `|0101⟩ → |2323⟩` and `|1010⟩ → |3232⟩` on `(bottom, right, top, left)`.
pub fn plaquette_map(p: [usize; 4]) -> Vec<Gate> {
    let [a, b, c, d] = p;
    vec![
        Gate::cx(a, b, 0, 1, 3),
        Gate::cx(b, c, 3, 0, 2),
        Gate::cx(c, d, 2, 1, 3),
        Gate::cx(b, c, 3, 0, 2),
        Gate::cx(a, b, 0, 1, 3),
        Gate::cx(d, c, 3, 0, 2),
        Gate::cx(c, a, 2, 0, 2),
        Gate::cx(a, b, 2, 1, 3),
        Gate::cx(a, b, 1, 0, 2),
        Gate::cx(b, c, 2, 1, 3),
        Gate::cx(c, d, 3, 0, 2),
        Gate::cx(b, c, 2, 1, 3),
        Gate::cx(a, b, 1, 0, 2),
        Gate::cx(d, c, 2, 1, 3),
        Gate::cx(c, a, 3, 1, 3),
        Gate::cx(a, b, 3, 0, 2),
    ]
}

/// Plaquette circuit, `exp(-iθ (|0101⟩⟨1010| + h.c.))` on `{0,1}^4`.
pub fn plaquette_gates(p: [usize; 4], theta: f64) -> Vec<Gate> {
    let [a, b, c, d] = p;
    let map = plaquette_map(p);
    let ms = |q: usize| Gate::MS { q0: q, q1: d, a: 2, b: 3, theta: FRAC_PI_2, phi: 0.0 };
    let rz = |phi: f64| Gate::Rz { q: d, a: 2, b: 3, phi };
    let mut gates = map.clone();
    // The MS ladder leaves a factor -i on the two mapped states; d sits in
    // {2, 3} exactly on those states, so a frame update of i on both levels removes it.
    gates.push(Gate::VRz { q: d, level: 2, phi: -FRAC_PI_2 });
    gates.push(Gate::VRz { q: d, level: 3, phi: -FRAC_PI_2 });
    gates.extend([
        rz(FRAC_PI_4),
        ms(a),
        ms(b),
        ms(c),
        rz(FRAC_PI_2 - theta),
        ms(c),
        ms(b),
        ms(a),
        rz(FRAC_PI_4),
    ]);
    gates.extend(inverse_of(&map));
    gates
}

/// `e^{+i 2θ s^z}` as one virtual phase per level with nonzero `s^z`.
pub fn mass_gates(q: usize, spin: Spin, theta: f64) -> Vec<Gate> {
    (0..spin.levels())
        .filter(|&l| spin.sz(l) != 0.0 && theta != 0.0)
        .map(|l| Gate::VRz { q, level: l, phi: -2.0 * theta * spin.sz(l) })
        .collect()
}

/// `e^{-iθ (s^z)²}` as virtual phases; empty for spin 1/2, where it is a global phase.
pub fn electric_gates(q: usize, spin: Spin, theta: f64) -> Vec<Gate> {
    if spin.twice() == 1 || theta == 0.0 {
        return Vec::new();
    }
    (0..spin.levels())
        .filter(|&l| spin.sz(l) != 0.0)
        .map(|l| Gate::VRz { q, level: l, phi: theta * spin.sz(l).powi(2) })
        .collect()
}

fn complete_sets(lat: &Lattice, link: LinkId) -> Result<([usize; 3], [usize; 3])> {
    let l = lat.left_neighbor_links(link)?;
    let r = lat.right_neighbor_links(link)?;
    if !l.is_complete() || !r.is_complete() {
        return Err(Error::IncompleteNeighbors(link.to_string()));
    }
    let idx = |s: [LinkId; 3]| -> Result<[usize; 3]> {
        Ok([lat.index_of(s[0])?, lat.index_of(s[1])?, lat.index_of(s[2])?])
    };
    Ok((idx(l.candidates)?, idx(r.candidates)?))
}

pub fn coupling_circuit_spin_half(lat: &Lattice, link: LinkId, theta: f64) -> Result<Circuit> {
    let t = lat.index_of(link)?;
    let (l, r) = complete_sets(lat, link)?;
    let gates = coupling_spin_half_gates(t, l, r, theta);
    Ok(Circuit::new(TermKind::Coupling, format!("coupling {link}"), gates, lat))
}

pub fn coupling_circuit_spin_one(lat: &Lattice, link: LinkId, theta: f64) -> Result<Circuit> {
    let t = lat.index_of(link)?;
    let (l, r) = complete_sets(lat, link)?;
    let gates = coupling_spin_one_gates(t, l, r, theta);
    Ok(Circuit::new(TermKind::Coupling, format!("coupling {link}"), gates, lat))
}

/// Dispatches on the lattice spin.
pub fn coupling_circuit(lat: &Lattice, link: LinkId, theta: f64) -> Result<Circuit> {
    match lat.spin().twice() {
        1 => coupling_circuit_spin_half(lat, link, theta),
        2 => coupling_circuit_spin_one(lat, link, theta),
        twice => Err(Error::UnsupportedSpin { twice }),
    }
}

pub fn plaquette_circuit(lat: &Lattice, plaq: [LinkId; 4], theta: f64) -> Result<Circuit> {
    if lat.spin() != Spin::HALF {
        return Err(Error::UnsupportedSpin { twice: lat.spin().twice() });
    }
    let p = [
        lat.index_of(plaq[0])?,
        lat.index_of(plaq[1])?,
        lat.index_of(plaq[2])?,
        lat.index_of(plaq[3])?,
    ];
    let mut sorted = p;
    sorted.sort_unstable();
    if sorted.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::DegeneratePlaquette);
    }
    let gates = plaquette_gates(p, theta);
    Ok(Circuit::new(TermKind::Plaquette, format!("plaquette {}", plaq[0]), gates, lat))
}

pub fn mass_circuit(lat: &Lattice, link: LinkId, theta: f64) -> Result<Circuit> {
    let q = lat.index_of(link)?;
    let gates = mass_gates(q, lat.spin(), theta);
    Ok(Circuit::new(TermKind::Mass, format!("mass {link}"), gates, lat))
}

pub fn electric_circuit(lat: &Lattice, link: LinkId, theta: f64) -> Result<Circuit> {
    let q = lat.index_of(link)?;
    let gates = electric_gates(q, lat.spin(), theta);
    Ok(Circuit::new(TermKind::Electric, format!("electric {link}"), gates, lat))
}

/// One first-order Trotter step: mass (and electric) factors for every link,
/// then couplings in link order, then plaquettes in plaquette order.
pub fn trotter_step(lat: &Lattice, params: &ModelParams, dtheta: f64) -> Result<Vec<Circuit>> {
    let spin = lat.spin();
    if spin.twice() > 2 {
        return Err(Error::UnsupportedSpin { twice: spin.twice() });
    }
    let mut out = Vec::new();
    for &link in lat.links() {
        out.push(mass_circuit(lat, link, params.m * dtheta)?);
        if spin.twice() == 2 {
            out.push(electric_circuit(lat, link, params.g * params.g * dtheta / 2.0)?);
        }
    }
    if params.kappa != 0.0 {
        for q in lat.coupling_links() {
            out.push(coupling_circuit(lat, lat.link(q), params.kappa * dtheta)?);
        }
    }
    if params.j != 0.0 {
        for p in lat.plaquettes() {
            out.push(plaquette_circuit(lat, p, params.j * dtheta)?);
        }
    }
    Ok(out)
}

pub fn schedule_census(schedule: &[Circuit]) -> GateCensus {
    schedule.iter().map(Circuit::census).fold(GateCensus::default(), |a, b| a + b)
}

/// Per-link register dimension: one more than the highest level any gate
/// addresses, floored at `2S + 1`.
pub fn minimal_dimensions(lat: &Lattice, schedule: &[Circuit]) -> Vec<usize> {
    let mut dims = vec![lat.spin().levels(); lat.num_links()];
    for g in schedule.iter().flat_map(|c| &c.gates) {
        for (q, levels) in g.qudits().into_iter().zip(g.addressed_levels()) {
            if let Some(&m) = levels.iter().max() {
                dims[q] = dims[q].max(m + 1);
            }
        }
    }
    dims
}

/// Circuit export: header with register shape and link map, then one gate per line.
pub fn export(lat: &Lattice, schedule: &[Circuit], dims: &[usize]) -> String {
    let mut out = String::new();
    out.push_str(&format!("qudits {}\n", dims.len()));
    out.push_str("dims");
    for d in dims {
        out.push_str(&format!(" {d}"));
    }
    out.push('\n');
    for (q, link) in lat.links().iter().enumerate() {
        out.push_str(&format!("link q{q} {} {} {}\n", link.origin.rx, link.origin.ry, link.axis));
    }
    for c in schedule {
        if c.gates.is_empty() {
            continue;
        }
        out.push_str(&format!("# {}\n", c.label));
        for g in &c.gates {
            out.push_str(&format!("{g}\n"));
        }
    }
    out
}

/// A basis-state level mapping realized by a permutation circuit.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LevelMapTable {
    pub rows: Vec<(Vec<usize>, Vec<usize>)>,
}

impl LevelMapTable {
    /// Runs `gates` (on qudits `0..n`) over each input digit string.
    ///
    /// Fails if some input is not mapped to a single basis state.
    pub fn from_gates(gates: &[Gate], dims: &[usize], inputs: &[Vec<usize>]) -> Result<Self> {
        for g in gates {
            g.validate(dims)?;
        }
        let mut rows = Vec::with_capacity(inputs.len());
        for inp in inputs {
            let mut cur = inp.clone();
            for g in gates {
                let img = gate_action(g, &cur);
                if img.len() != 1 || (img[0].1 - crate::C64::new(1.0, 0.0)).norm() > 1e-12 {
                    return Err(Error::InvalidGate(format!("{g} is not a basis permutation")));
                }
                cur = img[0].0.clone();
            }
            rows.push((inp.clone(), cur));
        }
        Ok(LevelMapTable { rows })
    }

    pub fn is_injective(&self) -> bool {
        let mut seen = HashMap::new();
        self.rows.iter().all(|(i, o)| seen.insert(o.clone(), i.clone()).is_none())
    }

    pub fn image(&self, input: &[usize]) -> Option<&[usize]> {
        self.rows
            .iter()
            .find(|(i, _)| i == input)
            .map(|(_, o)| o.as_slice())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn all_digits(n: usize, base: usize) -> Vec<Vec<usize>> {
        (0..base.pow(n as u32))
            .map(|mut i| {
                (0..n)
                    .map(|_| {
                        let d = i % base;
                        i /= base;
                        d
                    })
                    .rev()
                    .collect()
            })
            .collect()
    }

    #[test]
    fn spin_half_census() {
        let g = coupling_spin_half_gates(3, [0, 1, 2], [4, 5, 6], 0.3);
        let c = gate_counts(&g);
        assert_eq!((c.two_qudit, c.single_qudit), (22, 4));
        assert_eq!(gate_counts(&projector_map_spin_half([0, 1, 2])).two_qudit, 4);
        let raw = gate_counts(&coupling_spin_half_uncancelled(3, [0, 1, 2], [4, 5, 6], 0.3));
        assert_eq!(raw.two_qudit, 30);
    }

    #[test]
    fn plaquette_and_spin_one_census() {
        assert_eq!(gate_counts(&plaquette_gates([0, 1, 2, 3], 0.2)).entangling, 38);
        let c = gate_counts(&coupling_spin_one_gates(3, [0, 1, 2], [4, 5, 6], 0.2));
        assert_eq!((c.two_qudit, c.single_qudit), (56, 8));
        assert_eq!(gate_counts(&projector_spin_one([0, 1, 2])).two_qudit, 11);
    }

    #[test]
    fn table_one_rows() {
        let inputs = all_digits(3, 2);
        let t = LevelMapTable::from_gates(&projector_map_spin_half([0, 1, 2]), &[4, 4, 4], &inputs).unwrap();
        assert!(t.is_injective());
        assert_eq!(t.image(&[1, 1, 1]).unwrap(), &[1, 2, 2]);
        assert_eq!(t.image(&[0, 1, 0]).unwrap(), &[0, 1, 1]);
        for (i, o) in &t.rows {
            assert_eq!(o[2] == 1, i.iter().sum::<usize>() == 1);
        }
    }

    #[test]
    fn spin_one_flags() {
        let inputs = all_digits(3, 3);
        let t = LevelMapTable::from_gates(&projector_spin_one([0, 1, 2]), &[3, 5, 5], &inputs).unwrap();
        assert!(t.is_injective());
        for (i, o) in &t.rows {
            let s: usize = i.iter().sum();
            assert_eq!(o[2] == 3, s == 3);
            assert_eq!(o[2] == 4, s == 2);
        }
    }

    #[test]
    fn unwind_is_inverse_of_wind() {
        let g = coupling_spin_one_gates(3, [0, 1, 2], [4, 5, 6], 0.2);
        let p = projector_spin_one([0, 1, 2]);
        assert_eq!(&g[..11], &p[..]);
        assert_eq!(&g[g.len() - 11..], &inverse_of(&p)[..]);
        let pl = plaquette_gates([0, 1, 2, 3], 0.4);
        assert_eq!(&pl[pl.len() - 16..], &inverse_of(&plaquette_map([0, 1, 2, 3]))[..]);
    }

    #[test]
    fn cancellation_keeps_overlapping_pairs() {
        let g = vec![Gate::cx(0, 1, 1, 0, 1), Gate::H { q: 1, a: 0, b: 1 }, Gate::cx(0, 1, 1, 0, 1)];
        assert_eq!(cancel_inverse_pairs(g.clone()), g);
        let g = vec![Gate::cx(0, 1, 1, 0, 1), Gate::H { q: 2, a: 0, b: 1 }, Gate::cx(0, 1, 1, 0, 1)];
        assert_eq!(cancel_inverse_pairs(g), vec![Gate::H { q: 2, a: 0, b: 1 }]);
    }

    #[test]
    fn mass_and_electric_phases() {
        assert!(mass_gates(0, Spin::HALF, 0.0).is_empty());
        assert_eq!(mass_gates(0, Spin::HALF, 0.1).len(), 2);
        assert!(electric_gates(0, Spin::HALF, 0.4).is_empty());
        let e = electric_gates(0, Spin::ONE, 0.4);
        assert_eq!(
            e,
            vec![
                Gate::VRz { q: 0, level: 0, phi: 0.4 },
                Gate::VRz { q: 0, level: 2, phi: 0.4 }
            ]
        );
    }

    #[test]
    fn four_by_four_dimensions() {
        let lat = Lattice::build(4, 4, Spin::HALF).unwrap();
        let params = ModelParams { m: 0.42, kappa: 1.0, j: 0.0, g: 0.0 };
        let step = trotter_step(&lat, &params, 0.01).unwrap();
        assert!(step.iter().all(|c| c.kind != TermKind::Plaquette));
        let dims = minimal_dimensions(&lat, &step);
        let count = |d| dims.iter().filter(|&&x| x == d).count();
        assert_eq!((count(2), count(3), count(4)), (4, 8, 4));
    }

    #[test]
    fn three_by_three_step_terms() {
        let lat = Lattice::build(3, 3, Spin::HALF).unwrap();
        let params = ModelParams { m: 0.42, kappa: 1.0, j: 0.5, g: 0.0 };
        let step = trotter_step(&lat, &params, 0.01).unwrap();
        let n = |k| step.iter().filter(|c| c.kind == k).count();
        assert_eq!((n(TermKind::Coupling), n(TermKind::Plaquette), n(TermKind::Mass)), (1, 2, 9));
        let spin1 = Lattice::build(3, 3, Spin::ONE).unwrap();
        assert!(matches!(trotter_step(&spin1, &params, 0.01), Err(Error::UnsupportedSpin { .. })));
    }

    #[test]
    fn incomplete_neighbors_rejected() {
        let lat = Lattice::build(3, 3, Spin::HALF).unwrap();
        assert!(matches!(
            coupling_circuit(&lat, lat.link(0), 0.1),
            Err(Error::IncompleteNeighbors(_))
        ));
    }

    #[test]
    fn export_lists_every_gate() {
        let lat = Lattice::build(3, 3, Spin::HALF).unwrap();
        let params = ModelParams { m: 0.42, kappa: 1.0, j: 0.5, g: 0.0 };
        let step = trotter_step(&lat, &params, 0.01).unwrap();
        let dims = minimal_dimensions(&lat, &step);
        let text = export(&lat, &step, &dims);
        let gates: Vec<Gate> = text
            .lines()
            .filter(|l| !l.starts_with('#') && !l.starts_with("qudits") && !l.starts_with("dims") && !l.starts_with("link"))
            .map(|l| l.parse().unwrap())
            .collect();
        let flat: Vec<Gate> = step.iter().flat_map(|c| c.gates.clone()).collect();
        assert_eq!(gates, flat);
        assert_eq!(text, export(&lat, &step, &dims));
    }
}
