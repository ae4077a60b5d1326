//! Exact sparse Hamiltonians and exact time evolution.
//!
//! Two bases are supported. The link basis carries one spin-`S` level per
//! link and hosts the matter-integrated-out Hamiltonian
//!
//! ```text
//! H_MIO = -κ Σ_m Σ_links P_L^m σ^{x;-m,-m-1} P_R^m - 2m Σ s^z + (g²/2) Σ (s^z)² + J Σ (U_□ + U_□†)
//! ```
//!
//! The link ⊗ matter basis adds one hardcore boson per matter site and hosts
//! the original Hamiltonian with explicit matter.

use std::collections::HashMap;
use std::fmt;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::lattice::{enumerate_sector, GaussSector, Lattice, LinkConfig, Occupancy, SiteRule, Spin};
use crate::C64;

/// Largest dimension evolved through a dense eigendecomposition.
pub const DENSE_LIMIT: usize = 4096;
/// Largest basis a sparse operator may be built on.
pub const OPERATOR_BOUND: usize = 1 << 22;

/// Coupling constants: mass `m`, coupling `κ`, plaquette `J`, electric `g`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ModelParams {
    pub m: f64,
    pub kappa: f64,
    pub j: f64,
    pub g: f64,
}

/// Basis an operator is written in.
#[derive(Debug, Clone, PartialEq)]
pub enum Basis {
    /// Link configurations, in the listed order.
    Links { spin: Spin, configs: Vec<LinkConfig> },
    /// Link configurations ⊗ matter occupations; `matter[k]` is the vertex
    /// index of the `k`-th matter bit.
    LinksMatter {
        spin: Spin,
        num_links: usize,
        matter: Vec<usize>,
    },
}

impl Basis {
    pub fn len(&self) -> usize {
        match self {
            Basis::Links { configs, .. } => configs.len(),
            Basis::LinksMatter { spin, num_links, matter } => {
                spin.levels().pow(*num_links as u32) << matter.len()
            }
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl fmt::Display for Basis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Basis::Links { spin, configs } => {
                write!(f, "links spin={spin} states={}", configs.len())
            }
            Basis::LinksMatter { spin, num_links, matter } => write!(
                f,
                "links+matter spin={spin} links={num_links} matter={}",
                matter.len()
            ),
        }
    }
}

/// Row-sorted coordinate-format complex matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseOperator {
    basis: Basis,
    entries: Vec<(usize, usize, C64)>,
    row_ptr: Vec<usize>,
}

impl SparseOperator {
    /// Builds from unsorted triples; duplicates are summed and exact zeros dropped.
    pub fn from_triples(basis: Basis, mut triples: Vec<(usize, usize, C64)>) -> Self {
        let dim = basis.len();
        triples.sort_by_key(|&(r, c, _)| (r, c));
        let mut entries: Vec<(usize, usize, C64)> = Vec::with_capacity(triples.len());
        for (r, c, v) in triples {
            match entries.last_mut() {
                Some(last) if last.0 == r && last.1 == c => last.2 += v,
                _ => entries.push((r, c, v)),
            }
        }
        entries.retain(|e| e.2 != C64::new(0.0, 0.0));
        let mut row_ptr = vec![0; dim + 1];
        for &(r, _, _) in &entries {
            row_ptr[r + 1] += 1;
        }
        for i in 0..dim {
            row_ptr[i + 1] += row_ptr[i];
        }
        SparseOperator { basis, entries, row_ptr }
    }

    pub fn dim(&self) -> usize {
        self.basis.len()
    }

    pub fn basis(&self) -> &Basis {
        &self.basis
    }

    pub fn entries(&self) -> &[(usize, usize, C64)] {
        &self.entries
    }

    pub fn nnz(&self) -> usize {
        self.entries.len()
    }

    /// Exact check that the entry set is closed under conjugate transposition.
    pub fn is_hermitian(&self) -> bool {
        let map: HashMap<(usize, usize), C64> =
            self.entries.iter().map(|&(r, c, v)| ((r, c), v)).collect();
        self.entries
            .iter()
            .all(|&(r, c, v)| map.get(&(c, r)).is_some_and(|w| *w == v.conj()))
    }

    pub fn matvec(&self, x: &[C64], y: &mut [C64]) {
        y.par_iter_mut().enumerate().for_each(|(r, out)| {
            *out = self.entries[self.row_ptr[r]..self.row_ptr[r + 1]]
                .iter()
                .map(|&(_, c, v)| v * x[c])
                .sum();
        });
    }

    pub fn to_dense(&self) -> DMatrix<C64> {
        let n = self.dim();
        let mut m = DMatrix::zeros(n, n);
        for &(r, c, v) in &self.entries {
            m[(r, c)] += v;
        }
        m
    }

    /// `⟨x|H|x⟩`.
    pub fn expectation(&self, x: &[C64]) -> f64 {
        let mut y = vec![C64::new(0.0, 0.0); self.dim()];
        self.matvec(x, &mut y);
        x.iter().zip(&y).map(|(a, b)| (a.conj() * b).re).sum()
    }

    /// Text dump: basis header, then `row col re im` per entry.
    pub fn dump(&self) -> String {
        let mut out = format!("basis {}\ndim {}\nnnz {}\n", self.basis, self.dim(), self.nnz());
        for &(r, c, v) in &self.entries {
            out.push_str(&format!("{r} {c} {:.17e} {:.17e}\n", v.re, v.im));
        }
        out
    }
}

fn ladder(spin: Spin, level: usize, up: bool) -> Option<(usize, f64)> {
    let s = spin.value();
    let sz = spin.sz(level);
    if up {
        (level + 1 < spin.levels()).then(|| (level + 1, (s * (s + 1.0) - sz * (sz + 1.0)).sqrt()))
    } else {
        (level > 0).then(|| (level - 1, (s * (s + 1.0) - sz * (sz - 1.0)).sqrt()))
    }
}

fn plaquette_images(spin: Spin, levels: &[u8], p: [usize; 4]) -> Vec<(Vec<u8>, f64)> {
    // U = s⁺_b s⁻_r s⁺_t s⁻_l, then its adjoint with all ladders reversed.
    let mut out = Vec::new();
    for dir in [[true, false, true, false], [false, true, false, true]] {
        let mut next = levels.to_vec();
        let mut amp = 1.0;
        let mut ok = true;
        for (k, &q) in p.iter().enumerate() {
            match ladder(spin, next[q] as usize, dir[k]) {
                Some((l, a)) => {
                    next[q] = l as u8;
                    amp *= a;
                }
                None => {
                    ok = false;
                    break;
                }
            }
        }
        if ok {
            out.push((next, amp));
        }
    }
    out
}

fn field_sum(spin: Spin, levels: &[u8], links: &[usize]) -> f64 {
    links.iter().map(|&q| spin.sz(levels[q] as usize)).sum()
}

/// Off-diagonal images of a link configuration under the coupling and
/// plaquette terms, with their matrix elements.
fn mio_offdiag(lat: &Lattice, params: &ModelParams, couplings: &[(usize, [usize; 3], [usize; 3])], plaqs: &[[usize; 4]], levels: &[u8]) -> Vec<(Vec<u8>, f64)> {
    let spin = lat.spin();
    let s = spin.value();
    let mut out = Vec::new();
    if params.kappa != 0.0 {
        for &(t, l, r) in couplings {
            let sl = field_sum(spin, levels, &l);
            let sr = field_sum(spin, levels, &r);
            if (sl - sr).abs() > 1e-9 {
                continue;
            }
            let m = sl;
            if m < -s - 1e-9 || m > s - 1.0 + 1e-9 {
                continue;
            }
            let amp = -params.kappa * (s * (s + 1.0) - m * (m + 1.0)).sqrt();
            let sz = spin.sz(levels[t] as usize);
            let flip = if (sz + m).abs() < 1e-9 {
                Some(levels[t] - 1)
            } else if (sz + m + 1.0).abs() < 1e-9 {
                Some(levels[t] + 1)
            } else {
                None
            };
            if let Some(nl) = flip {
                let mut next = levels.to_vec();
                next[t] = nl;
                out.push((next, amp));
            }
        }
    }
    if params.j != 0.0 {
        for &p in plaqs {
            for (next, a) in plaquette_images(spin, levels, p) {
                out.push((next, params.j * a));
            }
        }
    }
    out
}

fn mio_terms(lat: &Lattice) -> Result<(Vec<(usize, [usize; 3], [usize; 3])>, Vec<[usize; 4]>)> {
    let mut couplings = Vec::new();
    for t in lat.coupling_links() {
        let link = lat.link(t);
        let l = lat.left_neighbor_links(link)?;
        let r = lat.right_neighbor_links(link)?;
        if !l.is_complete() || !r.is_complete() {
            continue;
        }
        let idx = |s: [crate::lattice::LinkId; 3]| -> Result<[usize; 3]> {
            Ok([lat.index_of(s[0])?, lat.index_of(s[1])?, lat.index_of(s[2])?])
        };
        couplings.push((t, idx(l.candidates)?, idx(r.candidates)?));
    }
    Ok((couplings, lat.plaquette_indices()))
}

fn mio_diag(lat: &Lattice, params: &ModelParams, levels: &[u8]) -> f64 {
    let spin = lat.spin();
    levels
        .iter()
        .map(|&l| {
            let sz = spin.sz(l as usize);
            -2.0 * params.m * sz + 0.5 * params.g * params.g * sz * sz
        })
        .sum()
}

/// `H_MIO` on the full link-configuration basis.
pub fn build_h_mio(lat: &Lattice, params: &ModelParams) -> Result<SparseOperator> {
    let size = (lat.spin().levels() as u128).saturating_pow(lat.num_links() as u32);
    if size > OPERATOR_BOUND as u128 {
        return Err(Error::EnumerationBound {
            what: "link basis",
            size,
            bound: OPERATOR_BOUND as u128,
        });
    }
    let configs: Vec<LinkConfig> = (0..size as u64)
        .map(|i| LinkConfig::from_index(i, lat.num_links(), lat.spin()))
        .collect();
    build_h_mio_on(lat, params, configs)
}

/// `H_MIO` restricted to the span of `configs`; images outside it are dropped.
pub fn build_h_mio_on(lat: &Lattice, params: &ModelParams, mut configs: Vec<LinkConfig>) -> Result<SparseOperator> {
    if configs.len() > OPERATOR_BOUND {
        return Err(Error::EnumerationBound {
            what: "link basis",
            size: configs.len() as u128,
            bound: OPERATOR_BOUND as u128,
        });
    }
    let spin = lat.spin();
    for c in &configs {
        c.validate(lat)?;
    }
    configs.sort_by_key(|c| c.index(spin));
    configs.dedup();
    let lookup: HashMap<u64, usize> = configs.iter().enumerate().map(|(i, c)| (c.index(spin), i)).collect();
    let (couplings, plaqs) = mio_terms(lat)?;
    let triples: Vec<(usize, usize, C64)> = configs
        .par_iter()
        .enumerate()
        .flat_map_iter(|(col, c)| {
            let mut t = vec![(col, col, C64::new(mio_diag(lat, params, &c.levels), 0.0))];
            for (next, a) in mio_offdiag(lat, params, &couplings, &plaqs, &c.levels) {
                if let Some(&row) = lookup.get(&LinkConfig::new(next).index(spin)) {
                    t.push((row, col, C64::new(a, 0.0)));
                }
            }
            t
        })
        .collect();
    Ok(SparseOperator::from_triples(Basis::Links { spin, configs }, triples))
}

/// Digits of a link ⊗ matter basis state: link levels, then matter bits.
fn qlm_split(index: usize, spin: Spin, num_links: usize, n_matter: usize) -> (Vec<u8>, Vec<u8>) {
    let base = spin.levels();
    let mut rest = index;
    let mut levels = vec![0u8; num_links];
    for l in levels.iter_mut() {
        *l = (rest % base) as u8;
        rest /= base;
    }
    let bits = (0..n_matter).map(|k| ((rest >> k) & 1) as u8).collect();
    (levels, bits)
}

fn qlm_join(levels: &[u8], bits: &[u8], spin: Spin) -> usize {
    let base = spin.levels();
    let link_part = LinkConfig::new(levels.to_vec()).index(spin) as usize;
    let matter_part: usize = bits.iter().enumerate().map(|(k, &b)| (b as usize) << k).sum();
    link_part + matter_part * base.pow(levels.len() as u32)
}

/// `H_QLM` with explicit hardcore-boson matter on every matter site.
///
/// Links whose endpoints are not both matter sites carry a static background
/// mass `-m (2 - k) s^z`, `k` being the number of matter endpoints, so that the
/// mass energy agrees with the link-only form in the physical sector.
pub fn build_h_qlm(lat: &Lattice, params: &ModelParams) -> Result<SparseOperator> {
    let spin = lat.spin();
    let matter = lat.matter_sites();
    let basis = Basis::LinksMatter { spin, num_links: lat.num_links(), matter: matter.clone() };
    let size = (spin.levels() as u128).saturating_pow(lat.num_links() as u32) << matter.len();
    if size > OPERATOR_BOUND as u128 {
        return Err(Error::EnumerationBound { what: "link and matter basis", size, bound: OPERATOR_BOUND as u128 });
    }
    let slot: HashMap<usize, usize> = matter.iter().enumerate().map(|(k, &v)| (v, k)).collect();
    let mut endpoint_slots = Vec::with_capacity(lat.num_links());
    for link in lat.links() {
        let [a, b] = link.endpoints();
        let sa = slot.get(&lat.vertex(a)?).copied();
        let sb = slot.get(&lat.vertex(b)?).copied();
        endpoint_slots.push((sa, sb));
    }
    let plaqs = lat.plaquette_indices();
    let n_links = lat.num_links();
    let triples: Vec<(usize, usize, C64)> = (0..size as usize)
        .into_par_iter()
        .flat_map_iter(|col| {
            let (levels, bits) = qlm_split(col, spin, n_links, matter.len());
            let mut diag = 0.0;
            for (q, &(sa, sb)) in endpoint_slots.iter().enumerate() {
                let sz = spin.sz(levels[q] as usize);
                let k = sa.is_some() as u32 + sb.is_some() as u32;
                diag += 0.5 * params.g * params.g * sz * sz - params.m * (2 - k) as f64 * sz;
            }
            diag += params.m * bits.iter().map(|&b| b as f64).sum::<f64>();
            let mut t = vec![(col, col, C64::new(diag, 0.0))];
            if params.kappa != 0.0 {
                for (q, &(sa, sb)) in endpoint_slots.iter().enumerate() {
                    let (Some(sa), Some(sb)) = (sa, sb) else { continue };
                    // φ†_r s⁻ φ†_{r+ν}
                    if bits[sa] == 0 && bits[sb] == 0 {
                        if let Some((nl, a)) = ladder(spin, levels[q] as usize, false) {
                            let mut lv = levels.clone();
                            lv[q] = nl as u8;
                            let mut bt = bits.clone();
                            bt[sa] = 1;
                            bt[sb] = 1;
                            t.push((qlm_join(&lv, &bt, spin), col, C64::new(-params.kappa * a, 0.0)));
                        }
                    }
                    // φ_{r+ν} s⁺ φ_r
                    if bits[sa] == 1 && bits[sb] == 1 {
                        if let Some((nl, a)) = ladder(spin, levels[q] as usize, true) {
                            let mut lv = levels.clone();
                            lv[q] = nl as u8;
                            let mut bt = bits.clone();
                            bt[sa] = 0;
                            bt[sb] = 0;
                            t.push((qlm_join(&lv, &bt, spin), col, C64::new(-params.kappa * a, 0.0)));
                        }
                    }
                }
            }
            if params.j != 0.0 {
                for &p in &plaqs {
                    for (lv, a) in plaquette_images(spin, &levels, p) {
                        t.push((qlm_join(&lv, &bits, spin), col, C64::new(params.j * a, 0.0)));
                    }
                }
            }
            t
        })
        .collect();
    Ok(SparseOperator::from_triples(basis, triples))
}

/// Gauss generator `G_r` for every matter site of a link ⊗ matter basis state.
pub fn qlm_gauss_values(lat: &Lattice, index: usize) -> Vec<f64> {
    let spin = lat.spin();
    let matter = lat.matter_sites();
    let (levels, bits) = qlm_split(index, spin, lat.num_links(), matter.len());
    matter
        .iter()
        .zip(&bits)
        .map(|(&v, &n)| {
            let field: f64 = lat.incident(v).iter().map(|&q| spin.sz(levels[q] as usize)).sum();
            lat.vertices()[v].parity() * (n as f64 + field)
        })
        .collect()
}

/// Indices of the basis states of `h` that lie in `sector`.
pub fn sector_indices(h: &SparseOperator, lat: &Lattice, sector: &GaussSector) -> Result<Vec<usize>> {
    let idx: Vec<usize> = match h.basis() {
        Basis::Links { configs, .. } => configs
            .iter()
            .enumerate()
            .filter(|(_, c)| sector.allows(lat, &c.levels))
            .map(|(i, _)| i)
            .collect(),
        Basis::LinksMatter { spin, num_links, matter } => (0..h.dim())
            .filter(|&i| {
                let (levels, bits) = qlm_split(i, *spin, *num_links, matter.len());
                matter.iter().zip(&bits).all(|(&v, &n)| {
                    let field: f64 = lat.incident(v).iter().map(|&q| spin.sz(levels[q] as usize)).sum();
                    let pinned_ok = match sector.rules[v] {
                        SiteRule::Pinned(p) => p == n,
                        _ => true,
                    };
                    pinned_ok && (n as f64 + field).abs() < 1e-9
                })
            })
            .collect(),
    };
    if idx.is_empty() {
        return Err(Error::EmptySector);
    }
    Ok(idx)
}

/// Dense restriction of `h` to the Gauss-satisfying basis states.
pub fn sector_project(h: &SparseOperator, lat: &Lattice, sector: &GaussSector) -> Result<DMatrix<C64>> {
    let idx = sector_indices(h, lat, sector)?;
    let pos: HashMap<usize, usize> = idx.iter().enumerate().map(|(k, &i)| (i, k)).collect();
    let mut m = DMatrix::zeros(idx.len(), idx.len());
    for &(r, c, v) in h.entries() {
        if let (Some(&a), Some(&b)) = (pos.get(&r), pos.get(&c)) {
            m[(a, b)] += v;
        }
    }
    Ok(m)
}

/// Sorted eigenvalues of a Hermitian matrix.
pub fn hermitian_spectrum(m: &DMatrix<C64>) -> Vec<f64> {
    let mut e: Vec<f64> = m.clone().symmetric_eigenvalues().iter().copied().collect();
    e.sort_by(f64::total_cmp);
    e
}

/// Connected components of the off-diagonal graph of `h`, largest first,
/// ties broken by lowest member index. Each component is sorted.
pub fn connected_components(h: &SparseOperator) -> Vec<Vec<usize>> {
    let n = h.dim();
    let mut adj = vec![Vec::new(); n];
    for &(r, c, _) in h.entries() {
        if r != c {
            adj[r].push(c);
        }
    }
    let mut seen = vec![false; n];
    let mut comps = Vec::new();
    for start in 0..n {
        if seen[start] {
            continue;
        }
        seen[start] = true;
        let mut stack = vec![start];
        let mut comp = vec![start];
        while let Some(a) = stack.pop() {
            for &b in &adj[a] {
                if !seen[b] {
                    seen[b] = true;
                    stack.push(b);
                    comp.push(b);
                }
            }
        }
        comp.sort_unstable();
        comps.push(comp);
    }
    comps.sort_by(|a, b| b.len().cmp(&a.len()).then(a[0].cmp(&b[0])));
    comps
}

/// Matter occupation implied by a link configuration: `n_r = -Σ s^z`.
pub fn implied_occupancy(lat: &Lattice, config: &LinkConfig) -> Option<Occupancy> {
    let spin = lat.spin();
    let mut occ = vec![0u8; lat.num_vertices()];
    for v in lat.matter_sites() {
        let n = -field_sum(spin, &config.levels, lat.incident(v));
        if n.abs() < 1e-9 {
            occ[v] = 0;
        } else if (n - 1.0).abs() < 1e-9 {
            occ[v] = 1;
        } else {
            return None;
        }
    }
    Some(Occupancy(occ))
}

/// Picks an initial configuration from the dynamical sector: the lowest-index
/// member of the largest connected component under the off-diagonal terms,
/// optionally restricted to configurations with the given matter occupation.
pub fn most_connected_config(lat: &Lattice, params: &ModelParams, occupancy: Option<&Occupancy>) -> Result<LinkConfig> {
    let configs = enumerate_sector(lat, &GaussSector::dynamical(lat))?;
    let h = build_h_mio_on(lat, params, configs)?;
    let Basis::Links { configs, .. } = h.basis() else { unreachable!() };
    for comp in connected_components(&h) {
        for &i in &comp {
            let c = &configs[i];
            if occupancy.is_none_or(|o| implied_occupancy(lat, c).as_ref() == Some(o)) {
                return Ok(c.clone());
            }
        }
    }
    Err(Error::EmptySector)
}

/// Exact propagator `e^{-iHθ}`.
#[derive(Debug, Clone)]
pub enum Propagator {
    Dense { values: DVector<f64>, vectors: DMatrix<C64> },
    Krylov { h: SparseOperator, tol: f64 },
}

impl Propagator {
    /// Dense eigendecomposition up to [`DENSE_LIMIT`], Krylov iteration above.
    pub fn new(h: &SparseOperator) -> Self {
        if h.dim() <= DENSE_LIMIT {
            let eig = SymmetricEigen::new(h.to_dense());
            Propagator::Dense { values: eig.eigenvalues, vectors: eig.eigenvectors }
        } else {
            Propagator::Krylov { h: h.clone(), tol: 1e-12 }
        }
    }

    pub fn krylov(h: &SparseOperator, tol: f64) -> Self {
        Propagator::Krylov { h: h.clone(), tol }
    }

    pub fn evolve(&self, psi0: &[C64], theta: f64) -> Result<Vec<C64>> {
        match self {
            Propagator::Dense { values, vectors } => {
                if psi0.len() != values.len() {
                    return Err(Error::LengthMismatch { what: "state", expected: values.len(), got: psi0.len() });
                }
                let x = DVector::from_column_slice(psi0);
                let mut c = vectors.ad_mul(&x);
                for (k, ck) in c.iter_mut().enumerate() {
                    *ck *= C64::from_polar(1.0, -values[k] * theta);
                }
                Ok((vectors * c).iter().copied().collect())
            }
            Propagator::Krylov { h, tol } => {
                if psi0.len() != h.dim() {
                    return Err(Error::LengthMismatch { what: "state", expected: h.dim(), got: psi0.len() });
                }
                krylov_evolve(h, psi0, theta, *tol)
            }
        }
    }
}

/// `e^{-iHθ} ψ0`.
pub fn exact_evolve(h: &SparseOperator, psi0: &[C64], theta: f64) -> Result<Vec<C64>> {
    Propagator::new(h).evolve(psi0, theta)
}

const KRYLOV_DIM: usize = 30;

/// Lanczos short-iterate evolution with a per-step residual estimate.
fn krylov_evolve(h: &SparseOperator, psi0: &[C64], theta: f64, tol: f64) -> Result<Vec<C64>> {
    let n = h.dim();
    let mut psi = psi0.to_vec();
    let norm0: f64 = psi.iter().map(|a| a.norm_sqr()).sum::<f64>().sqrt();
    if theta == 0.0 || norm0 == 0.0 {
        return Ok(psi);
    }
    let mut remaining = theta.abs();
    let sign = theta.signum();
    let mut tau = remaining;
    let mut worst: f64 = 0.0;
    while remaining > 0.0 {
        let norm: f64 = psi.iter().map(|a| a.norm_sqr()).sum::<f64>().sqrt();
        let mut basis: Vec<Vec<C64>> = vec![psi.iter().map(|a| a / norm).collect()];
        let mut alpha = Vec::new();
        let mut beta: Vec<f64> = Vec::new();
        let mut w = vec![C64::new(0.0, 0.0); n];
        let mut breakdown = false;
        for j in 0..KRYLOV_DIM {
            h.matvec(&basis[j], &mut w);
            let a: f64 = basis[j].iter().zip(&w).map(|(v, x)| (v.conj() * x).re).sum();
            alpha.push(a);
            for (x, v) in w.iter_mut().zip(&basis[j]) {
                *x -= v * a;
            }
            if j > 0 {
                let b = beta[j - 1];
                for (x, v) in w.iter_mut().zip(&basis[j - 1]) {
                    *x -= v * b;
                }
            }
            // Full reorthogonalization keeps the small basis well conditioned.
            for v in &basis {
                let ov: C64 = v.iter().zip(&w).map(|(p, q)| p.conj() * q).sum();
                for (x, p) in w.iter_mut().zip(v) {
                    *x -= p * ov;
                }
            }
            let b: f64 = w.iter().map(|x| x.norm_sqr()).sum::<f64>().sqrt();
            beta.push(b);
            if b < 1e-13 {
                breakdown = true;
                break;
            }
            if j + 1 < KRYLOV_DIM {
                basis.push(w.iter().map(|x| x / b).collect());
            }
        }
        let m = alpha.len();
        let mut t = DMatrix::<f64>::zeros(m, m);
        for i in 0..m {
            t[(i, i)] = alpha[i];
            if i + 1 < m {
                t[(i, i + 1)] = beta[i];
                t[(i + 1, i)] = beta[i];
            }
        }
        let eig = SymmetricEigen::new(t);
        let coeffs = |dt: f64| -> Vec<C64> {
            (0..m)
                .map(|i| {
                    (0..m)
                        .map(|k| {
                            C64::from_polar(eig.eigenvectors[(i, k)] * eig.eigenvectors[(0, k)], -sign * eig.eigenvalues[k] * dt)
                        })
                        .sum()
                })
                .collect()
        };
        tau = tau.min(remaining);
        loop {
            let c = coeffs(tau);
            let err = if breakdown { 0.0 } else { beta[m - 1] * c[m - 1].norm() };
            if err <= tol * tau / theta.abs() || tau < 1e-12 {
                worst = worst.max(err);
                psi = vec![C64::new(0.0, 0.0); n];
                for (ci, v) in c.iter().zip(&basis) {
                    for (p, x) in psi.iter_mut().zip(v) {
                        *p += ci * x * norm;
                    }
                }
                remaining -= tau;
                tau *= 1.5;
                break;
            }
            tau *= 0.5;
        }
        if tau < 1e-12 && remaining > 0.0 {
            return Err(Error::Convergence { achieved: worst, requested: tol });
        }
    }
    let norm: f64 = psi.iter().map(|a| a.norm_sqr()).sum::<f64>().sqrt();
    let drift = (norm - norm0).abs();
    if drift > 1e-9 {
        return Err(Error::Convergence { achieved: drift, requested: 1e-9 });
    }
    Ok(psi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::{LinkId, Vertex};
    use approx::assert_abs_diff_eq;

    fn star() -> Lattice {
        // Target x-link (0,0) with complete left and right neighbor sets.
        let links = vec![
            LinkId::x(0, 0),
            LinkId::y(0, 0),
            LinkId::x(-1, 0),
            LinkId::y(0, -1),
            LinkId::x(1, 0),
            LinkId::y(1, 0),
            LinkId::y(1, -1),
        ];
        Lattice::from_links(links, Spin::HALF).unwrap()
    }

    #[test]
    fn single_link_is_diagonal() {
        let lat = Lattice::build(1, 1, Spin::ONE).unwrap();
        let p = ModelParams { m: 0.3, kappa: 1.0, j: 1.0, g: 0.7 };
        let h = build_h_mio(&lat, &p).unwrap();
        assert_eq!(h.nnz(), 2);
        for &(r, c, v) in h.entries() {
            assert_eq!(r, c);
            let sz = r as f64 - 1.0;
            assert_abs_diff_eq!(v.re, -0.6 * sz + 0.245 * sz * sz, epsilon = 1e-14);
        }
    }

    #[test]
    fn electric_term_is_constant_for_spin_half() {
        let lat = Lattice::build(3, 3, Spin::HALF).unwrap();
        let h = build_h_mio(&lat, &ModelParams { g: 1.0, ..Default::default() }).unwrap();
        assert!(h.entries().iter().all(|&(r, c, v)| r == c && (v.re - 9.0 / 8.0).abs() < 1e-14));
    }

    #[test]
    fn star_matches_projector_construction() {
        let lat = star();
        let p = ModelParams { kappa: 1.0, ..Default::default() };
        let h = build_h_mio(&lat, &p).unwrap();
        assert!(h.is_hermitian());
        let t = lat.index_of(LinkId::x(0, 0)).unwrap();
        let l: Vec<usize> = lat.left_neighbor_links(LinkId::x(0, 0)).unwrap().links().iter().map(|x| lat.index_of(*x).unwrap()).collect();
        let r: Vec<usize> = lat.right_neighbor_links(LinkId::x(0, 0)).unwrap().links().iter().map(|x| lat.index_of(*x).unwrap()).collect();
        let mut expected = 0;
        for i in 0..128u64 {
            let c = LinkConfig::from_index(i, 7, Spin::HALF);
            let one_up = |s: &[usize]| s.iter().map(|&q| c.levels[q] as usize).sum::<usize>() == 1;
            if one_up(&l) && one_up(&r) {
                expected += 1;
                let mut f = c.levels.clone();
                f[t] ^= 1;
                let j = LinkConfig::new(f).index(Spin::HALF) as usize;
                assert!(h.entries().iter().any(|&(a, b, v)| a == j && b == i as usize && v == C64::new(-1.0, 0.0)));
            }
        }
        assert_eq!(h.entries().iter().filter(|e| e.0 != e.1).count(), expected);
    }

    #[test]
    fn mio_preserves_dynamical_sector() {
        let lat = Lattice::build(3, 3, Spin::HALF).unwrap();
        let p = ModelParams { m: 0.42, kappa: 1.0, j: 0.5, g: 0.0 };
        let h = build_h_mio(&lat, &p).unwrap();
        let sector = GaussSector::dynamical(&lat);
        let Basis::Links { configs, .. } = h.basis() else { panic!() };
        for &(r, c, _) in h.entries() {
            assert_eq!(sector.allows(&lat, &configs[r].levels), sector.allows(&lat, &configs[c].levels));
        }
    }

    #[test]
    fn qlm_commutes_with_gauss_on_chainlet() {
        let lat = Lattice::from_links(vec![LinkId::x(0, 0)], Spin::HALF)
            .unwrap()
            .with_matter_sites(&[Vertex::new(0, 0), Vertex::new(1, 0)])
            .unwrap();
        let h = build_h_qlm(&lat, &ModelParams { m: 0.3, kappa: 1.0, j: 0.0, g: 0.5 }).unwrap();
        assert!(h.is_hermitian());
        for &(r, c, _) in h.entries() {
            assert_eq!(qlm_gauss_values(&lat, r), qlm_gauss_values(&lat, c));
        }
        assert!(h.entries().iter().any(|e| e.0 != e.1));
    }

    #[test]
    fn qlm_without_coupling_is_diagonal() {
        let lat = star();
        let h = build_h_qlm(&lat, &ModelParams { m: 0.3, kappa: 0.0, j: 0.0, g: 0.5 }).unwrap();
        assert!(h.entries().iter().all(|e| e.0 == e.1));
    }

    #[test]
    fn sector_projection_of_identity() {
        let lat = Lattice::build(3, 3, Spin::HALF).unwrap();
        let h = build_h_mio(&lat, &ModelParams { g: 2.0, ..Default::default() }).unwrap();
        let sector = GaussSector::dynamical(&lat);
        let m = sector_project(&h, &lat, &sector).unwrap();
        let n = enumerate_sector(&lat, &sector).unwrap().len();
        assert_eq!(m.nrows(), n);
        assert!((m - DMatrix::identity(n, n) * C64::new(4.5, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn rabi_oscillation() {
        // Two-state block from a single coupling flip.
        let lat = star();
        let p = ModelParams { kappa: 0.7, ..Default::default() };
        let h = build_h_mio(&lat, &p).unwrap();
        let (r, c, _) = *h.entries().iter().find(|e| e.0 != e.1).unwrap();
        let mut psi = vec![C64::new(0.0, 0.0); h.dim()];
        psi[c] = C64::new(1.0, 0.0);
        for theta in [0.0, 0.3, 1.1, 2.5] {
            let out = exact_evolve(&h, &psi, theta).unwrap();
            assert_abs_diff_eq!(out[c].norm_sqr(), (0.7 * theta as f64).cos().powi(2), epsilon = 1e-12);
            assert_abs_diff_eq!(out[r].norm_sqr(), (0.7 * theta as f64).sin().powi(2), epsilon = 1e-12);
        }
    }

    #[test]
    fn krylov_agrees_with_dense() {
        let lat = Lattice::build(3, 3, Spin::HALF).unwrap();
        let p = ModelParams { m: 0.42, kappa: 1.0, j: 0.5, g: 0.0 };
        let h = build_h_mio(&lat, &p).unwrap();
        let mut psi = vec![C64::new(0.0, 0.0); h.dim()];
        let c = most_connected_config(&lat, &p, None).unwrap();
        psi[c.index(Spin::HALF) as usize] = C64::new(1.0, 0.0);
        let dense = exact_evolve(&h, &psi, 3.0).unwrap();
        let kry = Propagator::krylov(&h, 1e-12).evolve(&psi, 3.0).unwrap();
        let diff: f64 = dense.iter().zip(&kry).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
        assert!(diff < 1e-9, "{diff}");
    }

    #[test]
    fn energy_is_conserved() {
        let lat = Lattice::build(3, 3, Spin::HALF).unwrap();
        let p = ModelParams { m: 0.42, kappa: 1.0, j: 0.5, g: 0.0 };
        let configs = enumerate_sector(&lat, &GaussSector::dynamical(&lat)).unwrap();
        let h = build_h_mio_on(&lat, &p, configs).unwrap();
        let prop = Propagator::new(&h);
        let mut psi = vec![C64::new(0.0, 0.0); h.dim()];
        psi[0] = C64::new(0.6, 0.0);
        psi[h.dim() - 1] = C64::new(0.0, 0.8);
        let e0 = h.expectation(&psi);
        for k in 0..=40 {
            let theta = k as f64 * std::f64::consts::PI / 10.0;
            let out = prop.evolve(&psi, theta).unwrap();
            assert!((h.expectation(&out) - e0).abs() < 1e-8);
            assert!((out.iter().map(|a| a.norm_sqr()).sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn components_are_sorted() {
        let lat = Lattice::build(3, 3, Spin::HALF).unwrap();
        let p = ModelParams { m: 0.42, kappa: 1.0, j: 0.5, g: 0.0 };
        let configs = enumerate_sector(&lat, &GaussSector::dynamical(&lat)).unwrap();
        let h = build_h_mio_on(&lat, &p, configs).unwrap();
        let comps = connected_components(&h);
        assert!(comps.windows(2).all(|w| w[0].len() >= w[1].len()));
        assert_eq!(comps.iter().map(Vec::len).sum::<usize>(), h.dim());
    }

    #[test]
    fn dump_has_header() {
        let lat = Lattice::build(1, 1, Spin::HALF).unwrap();
        let h = build_h_mio(&lat, &ModelParams { m: 1.0, ..Default::default() }).unwrap();
        let d = h.dump();
        assert!(d.starts_with("basis links spin=1/2 states=2\ndim 2\nnnz 2\n"));
    }
}
