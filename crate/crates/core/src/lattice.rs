//! Square-lattice geometry for the link model.
//!
//! A lattice is described by an `Lx × Ly` grid of links drawn in the rotated
//! (medial) picture: grid cell `(i, j)` holds a horizontal link when `i + j`
//! is even and a vertical link otherwise. Each link is addressed by its
//! origin vertex and direction, `(r, e_ν)`. Links are enumerated row-major by
//! `(ry, rx)` of the origin, with the `x` link before the `y` link.
//!
//! Boundaries are open. Matter sites default to the vertices whose four
//! links all exist; Gauss's law is imposed only there.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Upper bound on the number of raw configurations a brute-force enumeration may visit.
pub const ENUMERATION_BOUND: u128 = 1 << 26;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Axis {
    X,
    Y,
}

impl Axis {
    pub fn unit(self) -> (i32, i32) {
        match self {
            Axis::X => (1, 0),
            Axis::Y => (0, 1),
        }
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Axis::X => "x",
            Axis::Y => "y",
        })
    }
}

impl FromStr for Axis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "x" | "X" => Ok(Axis::X),
            "y" | "Y" => Ok(Axis::Y),
            _ => Err(Error::Parse(format!("unknown axis '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Vertex {
    pub rx: i32,
    pub ry: i32,
}

impl Vertex {
    pub const fn new(rx: i32, ry: i32) -> Self {
        Vertex { rx, ry }
    }

    pub fn offset(self, dx: i32, dy: i32) -> Self {
        Vertex::new(self.rx + dx, self.ry + dy)
    }

    /// Staggering sign `(-1)^(rx+ry)`.
    pub fn parity(self) -> f64 {
        if (self.rx + self.ry).rem_euclid(2) == 0 {
            1.0
        } else {
            -1.0
        }
    }
}

impl fmt::Display for Vertex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.rx, self.ry)
    }
}

/// A link `(r, e_ν)`. Ordering is row-major on the origin, then axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct LinkId {
    pub origin: Vertex,
    pub axis: Axis,
}

impl LinkId {
    pub const fn new(rx: i32, ry: i32, axis: Axis) -> Self {
        LinkId {
            origin: Vertex::new(rx, ry),
            axis,
        }
    }

    pub fn x(rx: i32, ry: i32) -> Self {
        LinkId::new(rx, ry, Axis::X)
    }

    pub fn y(rx: i32, ry: i32) -> Self {
        LinkId::new(rx, ry, Axis::Y)
    }

    /// The far endpoint `r + e_ν`.
    pub fn head(self) -> Vertex {
        let (dx, dy) = self.axis.unit();
        self.origin.offset(dx, dy)
    }

    pub fn endpoints(self) -> [Vertex; 2] {
        [self.origin, self.head()]
    }

    pub fn shifted(self, dx: i32, dy: i32) -> Self {
        LinkId {
            origin: self.origin.offset(dx, dy),
            axis: self.axis,
        }
    }

    fn sort_key(&self) -> (i32, i32, Axis) {
        (self.origin.ry, self.origin.rx, self.axis)
    }
}

impl PartialOrd for LinkId {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for LinkId {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.sort_key().cmp(&other.sort_key())
    }
}

impl fmt::Display for LinkId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.origin.rx, self.origin.ry, self.axis)
    }
}

/// Spin representation carried by every link, stored as `2S`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Spin {
    twice: u32,
}

impl Spin {
    pub const HALF: Spin = Spin { twice: 1 };
    pub const ONE: Spin = Spin { twice: 2 };

    pub fn from_twice(twice: u32) -> Result<Self> {
        if twice == 0 {
            return Err(Error::InvalidSpin { twice });
        }
        Ok(Spin { twice })
    }

    pub fn twice(self) -> u32 {
        self.twice
    }

    pub fn value(self) -> f64 {
        self.twice as f64 / 2.0
    }

    /// Number of physical levels, `2S + 1`.
    pub fn levels(self) -> usize {
        self.twice as usize + 1
    }

    /// The `s^z` eigenvalue of level `l`, i.e. `l - S`.
    pub fn sz(self, level: usize) -> f64 {
        level as f64 - self.value()
    }
}

impl fmt::Display for Spin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.twice % 2 == 0 {
            write!(f, "{}", self.twice / 2)
        } else {
            write!(f, "{}/2", self.twice)
        }
    }
}

impl FromStr for Spin {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let bad = || Error::Parse(format!("invalid spin '{s}'"));
        let twice = match s.split_once('/') {
            Some((num, "2")) => num.trim().parse::<u32>().map_err(|_| bad())?,
            Some(_) => return Err(bad()),
            None => 2 * s.parse::<u32>().map_err(|_| bad())?,
        };
        Spin::from_twice(twice)
    }
}

/// A left or right projector neighbor set, in the order `P¹, P², P³`.
///
/// Members that fall outside the lattice keep their coordinates but are
/// flagged absent.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NeighborSet {
    pub candidates: [LinkId; 3],
    pub present: [bool; 3],
}

impl NeighborSet {
    pub fn is_complete(&self) -> bool {
        self.present.iter().all(|&p| p)
    }

    pub fn links(&self) -> Vec<LinkId> {
        self.candidates
            .iter()
            .zip(self.present)
            .filter_map(|(l, p)| p.then_some(*l))
            .collect()
    }

    pub fn absent(&self) -> Vec<LinkId> {
        self.candidates
            .iter()
            .zip(self.present)
            .filter_map(|(l, p)| (!p).then_some(*l))
            .collect()
    }
}

/// Per-link `s^z` data stored as level indices, `s^z = l - S`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LinkConfig {
    pub levels: Vec<u8>,
}

impl LinkConfig {
    pub fn new(levels: Vec<u8>) -> Self {
        LinkConfig { levels }
    }

    pub fn uniform(n_links: usize, level: u8) -> Self {
        LinkConfig {
            levels: vec![level; n_links],
        }
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    /// Little-endian mixed-radix index with uniform radix `2S + 1`.
    pub fn index(&self, spin: Spin) -> u64 {
        let base = spin.levels() as u64;
        self.levels
            .iter()
            .rev()
            .fold(0u64, |acc, &l| acc * base + l as u64)
    }

    pub fn from_index(mut index: u64, n_links: usize, spin: Spin) -> Self {
        let base = spin.levels() as u64;
        let levels = (0..n_links)
            .map(|_| {
                let l = (index % base) as u8;
                index /= base;
                l
            })
            .collect();
        LinkConfig { levels }
    }

    pub fn validate(&self, lat: &Lattice) -> Result<()> {
        if self.levels.len() != lat.num_links() {
            return Err(Error::LengthMismatch {
                what: "link configuration",
                expected: lat.num_links(),
                got: self.levels.len(),
            });
        }
        let dim = lat.spin().levels();
        for (q, &l) in self.levels.iter().enumerate() {
            if l as usize >= dim {
                return Err(Error::LevelOutOfRange {
                    qudit: q,
                    level: l as usize,
                    dim,
                });
            }
        }
        Ok(())
    }
}

impl fmt::Display for LinkConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for l in &self.levels {
            write!(f, "{l}")?;
        }
        Ok(())
    }
}

/// Matter occupation `n_r ∈ {0, 1}` per vertex, in lattice vertex order.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Occupancy(pub Vec<u8>);

impl Occupancy {
    pub fn vacuum(lat: &Lattice) -> Self {
        Occupancy(vec![0; lat.num_vertices()])
    }

    /// Every matter site occupied; other vertices empty.
    pub fn filled(lat: &Lattice) -> Self {
        Occupancy(lat.matter.iter().map(|&m| m as u8).collect())
    }

    pub fn get(&self, vertex_index: usize) -> u8 {
        self.0[vertex_index]
    }

    pub fn validate(&self, lat: &Lattice) -> Result<()> {
        if self.0.len() != lat.num_vertices() {
            return Err(Error::LengthMismatch {
                what: "occupancy",
                expected: lat.num_vertices(),
                got: self.0.len(),
            });
        }
        if let Some(&bad) = self.0.iter().find(|&&n| n > 1) {
            return Err(Error::Parse(format!("occupation {bad} is not hardcore")));
        }
        Ok(())
    }
}

/// The constraint imposed at one vertex.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SiteRule {
    /// Not a matter site; no constraint.
    Unconstrained,
    /// Matter integrated out: any hardcore occupation `n ∈ {0, 1}` is allowed.
    Free,
    /// Occupation fixed to the given value.
    Pinned(u8),
}

/// A Gauss-law sector: one [`SiteRule`] per vertex.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct GaussSector {
    pub rules: Vec<SiteRule>,
}

impl GaussSector {
    /// The sector explored by the matter-integrated-out dynamics.
    pub fn dynamical(lat: &Lattice) -> Self {
        GaussSector {
            rules: lat
                .matter
                .iter()
                .map(|&m| if m { SiteRule::Free } else { SiteRule::Unconstrained })
                .collect(),
        }
    }

    /// Every matter site pinned to the given occupation.
    pub fn pinned(lat: &Lattice, occupancy: &Occupancy) -> Self {
        GaussSector {
            rules: lat
                .matter
                .iter()
                .zip(&occupancy.0)
                .map(|(&m, &n)| if m { SiteRule::Pinned(n) } else { SiteRule::Unconstrained })
                .collect(),
        }
    }

    /// Gauss penalty of a single configuration: `Σ_r min_n (n + Σ s^z)²`.
    ///
    /// Levels above `2S` are ignored (they are accounted as leakage).
    pub fn penalty(&self, lat: &Lattice, levels: &[u8]) -> f64 {
        let s = lat.spin.value();
        self.rules
            .iter()
            .enumerate()
            .map(|(v, rule)| {
                let sum: f64 = lat.incident[v].iter().map(|&q| levels[q] as f64 - s).sum();
                match rule {
                    SiteRule::Unconstrained => 0.0,
                    SiteRule::Pinned(n) => (*n as f64 + sum).powi(2),
                    SiteRule::Free => sum.powi(2).min((1.0 + sum).powi(2)),
                }
            })
            .sum()
    }

    pub fn allows(&self, lat: &Lattice, levels: &[u8]) -> bool {
        self.penalty(lat, levels) < 1e-12
    }
}

/// An open-boundary square lattice of links.
#[derive(Debug, Clone, PartialEq)]
pub struct Lattice {
    extents: Option<(usize, usize)>,
    spin: Spin,
    links: Vec<LinkId>,
    link_index: HashMap<LinkId, usize>,
    vertices: Vec<Vertex>,
    vertex_index: HashMap<Vertex, usize>,
    incident: Vec<Vec<usize>>,
    matter: Vec<bool>,
}

impl Lattice {
    /// Builds the `lx × ly` grid of links.
    pub fn build(lx: usize, ly: usize, spin: Spin) -> Result<Self> {
        if lx == 0 || ly == 0 {
            return Err(Error::EmptyLattice { lx, ly });
        }
        let mut links = Vec::with_capacity(lx * ly);
        for i in 0..lx as i32 {
            for j in 0..ly as i32 {
                // The link grid is the vertex grid rotated by 45 degrees.
                if (i - j).rem_euclid(2) == 0 {
                    links.push(LinkId::x((i + j) / 2, (i - j).div_euclid(2)));
                } else {
                    links.push(LinkId::y((i + j + 1) / 2, (i - j - 1).div_euclid(2)));
                }
            }
        }
        let min_x = links.iter().flat_map(|l| l.endpoints()).map(|v| v.rx).min().unwrap_or(0);
        let min_y = links.iter().flat_map(|l| l.endpoints()).map(|v| v.ry).min().unwrap_or(0);
        let links = links.into_iter().map(|l| l.shifted(-min_x, -min_y)).collect();
        let mut lat = Lattice::from_links(links, spin)?;
        lat.extents = Some((lx, ly));
        Ok(lat)
    }

    /// Builds a lattice from an explicit link set.
    pub fn from_links(mut links: Vec<LinkId>, spin: Spin) -> Result<Self> {
        if links.is_empty() {
            return Err(Error::EmptyLattice { lx: 0, ly: 0 });
        }
        links.sort();
        if links.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Parse("duplicate link".into()));
        }
        let link_index: HashMap<LinkId, usize> =
            links.iter().enumerate().map(|(i, l)| (*l, i)).collect();
        let mut vertices: Vec<Vertex> = links.iter().flat_map(|l| l.endpoints()).collect();
        vertices.sort_by_key(|v| (v.ry, v.rx));
        vertices.dedup();
        let vertex_index: HashMap<Vertex, usize> =
            vertices.iter().enumerate().map(|(i, v)| (*v, i)).collect();
        let mut incident = vec![Vec::new(); vertices.len()];
        for (q, l) in links.iter().enumerate() {
            for v in l.endpoints() {
                incident[vertex_index[&v]].push(q);
            }
        }
        let matter = incident.iter().map(|inc| inc.len() == 4).collect();
        Ok(Lattice {
            extents: None,
            spin,
            links,
            link_index,
            vertices,
            vertex_index,
            incident,
            matter,
        })
    }

    /// Replaces the default matter sites with an explicit set.
    pub fn with_matter_sites(mut self, sites: &[Vertex]) -> Result<Self> {
        let mut matter = vec![false; self.vertices.len()];
        for v in sites {
            let i = self.vertex(*v)?;
            matter[i] = true;
        }
        self.matter = matter;
        Ok(self)
    }

    pub fn extents(&self) -> Option<(usize, usize)> {
        self.extents
    }

    /// Extents of the vertex bounding box, `(max rx + 1, max ry + 1)`.
    pub fn vertex_extents(&self) -> (usize, usize) {
        let w = self.vertices.iter().map(|v| v.rx).max().unwrap_or(0) + 1;
        let h = self.vertices.iter().map(|v| v.ry).max().unwrap_or(0) + 1;
        (w as usize, h as usize)
    }

    pub fn spin(&self) -> Spin {
        self.spin
    }

    pub fn num_links(&self) -> usize {
        self.links.len()
    }

    pub fn num_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn links(&self) -> &[LinkId] {
        &self.links
    }

    pub fn vertices(&self) -> &[Vertex] {
        &self.vertices
    }

    pub fn link(&self, index: usize) -> LinkId {
        self.links[index]
    }

    pub fn contains(&self, link: LinkId) -> bool {
        self.link_index.contains_key(&link)
    }

    pub fn index_of(&self, link: LinkId) -> Result<usize> {
        self.link_index
            .get(&link)
            .copied()
            .ok_or_else(|| Error::UnknownLink(link.to_string()))
    }

    pub fn vertex(&self, v: Vertex) -> Result<usize> {
        self.vertex_index
            .get(&v)
            .copied()
            .ok_or(Error::UnknownVertex { rx: v.rx, ry: v.ry })
    }

    /// Link indices touching the vertex with the given index.
    pub fn incident(&self, vertex_index: usize) -> &[usize] {
        &self.incident[vertex_index]
    }

    pub fn is_matter_site(&self, vertex_index: usize) -> bool {
        self.matter[vertex_index]
    }

    pub fn matter_sites(&self) -> Vec<usize> {
        (0..self.vertices.len()).filter(|&v| self.matter[v]).collect()
    }

    fn neighbor_set(&self, candidates: [LinkId; 3]) -> NeighborSet {
        NeighborSet {
            candidates,
            present: candidates.map(|l| self.contains(l)),
        }
    }

    /// The left projector set of `link`.
    pub fn left_neighbor_links(&self, link: LinkId) -> Result<NeighborSet> {
        self.index_of(link)?;
        let r = link.origin;
        let c = match link.axis {
            Axis::X => [
                LinkId::y(r.rx, r.ry),
                LinkId::x(r.rx - 1, r.ry),
                LinkId::y(r.rx, r.ry - 1),
            ],
            Axis::Y => [
                LinkId::x(r.rx, r.ry),
                LinkId::x(r.rx - 1, r.ry),
                LinkId::y(r.rx, r.ry - 1),
            ],
        };
        Ok(self.neighbor_set(c))
    }

    /// The right projector set of `link`.
    pub fn right_neighbor_links(&self, link: LinkId) -> Result<NeighborSet> {
        self.index_of(link)?;
        let r = link.origin;
        let c = match link.axis {
            Axis::X => [
                LinkId::x(r.rx + 1, r.ry),
                LinkId::y(r.rx + 1, r.ry),
                LinkId::y(r.rx + 1, r.ry - 1),
            ],
            Axis::Y => [
                LinkId::y(r.rx, r.ry + 1),
                LinkId::x(r.rx - 1, r.ry + 1),
                LinkId::x(r.rx, r.ry + 1),
            ],
        };
        Ok(self.neighbor_set(c))
    }

    /// Links carrying a coupling term: both endpoints are matter sites.
    pub fn coupling_links(&self) -> Vec<usize> {
        (0..self.links.len())
            .filter(|&q| {
                self.links[q]
                    .endpoints()
                    .iter()
                    .all(|v| self.matter[self.vertex_index[v]])
            })
            .collect()
    }

    /// Plaquettes as link tuples `(bottom, right, top, left)`.
    pub fn plaquettes(&self) -> Vec<[LinkId; 4]> {
        self.links
            .iter()
            .filter(|l| l.axis == Axis::X)
            .filter_map(|l| {
                let r = l.origin;
                let p = [
                    *l,
                    LinkId::y(r.rx + 1, r.ry),
                    LinkId::x(r.rx, r.ry + 1),
                    LinkId::y(r.rx, r.ry),
                ];
                p.iter().all(|x| self.contains(*x)).then_some(p)
            })
            .collect()
    }

    pub fn plaquette_indices(&self) -> Vec<[usize; 4]> {
        self.plaquettes()
            .into_iter()
            .map(|p| p.map(|l| self.link_index[&l]))
            .collect()
    }

    /// Serializes the geometry into a plain text block.
    pub fn describe(&self) -> String {
        let mut out = String::new();
        match self.extents {
            Some((lx, ly)) => out.push_str(&format!("extents {lx} {ly}\n")),
            None => out.push_str("extents custom\n"),
        }
        out.push_str(&format!("spin {}\nboundary open\nlinks {}\n", self.spin, self.links.len()));
        for (i, l) in self.links.iter().enumerate() {
            out.push_str(&format!("{i} {} {} {}\n", l.origin.rx, l.origin.ry, l.axis));
        }
        let sites = self.matter_sites();
        out.push_str(&format!("matter {}\n", sites.len()));
        for v in sites {
            let v = self.vertices[v];
            out.push_str(&format!("{} {}\n", v.rx, v.ry));
        }
        out
    }

    /// Parses the output of [`Lattice::describe`].
    pub fn parse_description(text: &str) -> Result<Self> {
        let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty());
        let mut next = |what: &str| {
            lines
                .next()
                .ok_or_else(|| Error::Parse(format!("missing {what}")))
        };
        let field = |line: &str, key: &str| -> Result<String> {
            line.strip_prefix(key)
                .map(|s| s.trim().to_string())
                .ok_or_else(|| Error::Parse(format!("expected '{key}', got '{line}'")))
        };
        let num = |s: &str| -> Result<i64> {
            s.parse::<i64>().map_err(|_| Error::Parse(format!("bad integer '{s}'")))
        };
        let extents = field(next("extents")?, "extents")?;
        let spin: Spin = field(next("spin")?, "spin")?.parse()?;
        let boundary = field(next("boundary")?, "boundary")?;
        if boundary != "open" {
            return Err(Error::Parse(format!("unsupported boundary '{boundary}'")));
        }
        let n = num(&field(next("links")?, "links")?)? as usize;
        let mut links = Vec::with_capacity(n);
        for _ in 0..n {
            let parts: Vec<&str> = next("link row")?.split_whitespace().collect();
            if parts.len() != 4 {
                return Err(Error::Parse("link rows need 4 fields".into()));
            }
            links.push(LinkId::new(
                num(parts[1])? as i32,
                num(parts[2])? as i32,
                parts[3].parse()?,
            ));
        }
        let m = num(&field(next("matter")?, "matter")?)? as usize;
        let mut sites = Vec::with_capacity(m);
        for _ in 0..m {
            let parts: Vec<&str> = next("matter row")?.split_whitespace().collect();
            if parts.len() != 2 {
                return Err(Error::Parse("matter rows need 2 fields".into()));
            }
            sites.push(Vertex::new(num(parts[0])? as i32, num(parts[1])? as i32));
        }
        let mut lat = Lattice::from_links(links, spin)?.with_matter_sites(&sites)?;
        if extents != "custom" {
            let e: Vec<&str> = extents.split_whitespace().collect();
            if e.len() != 2 {
                return Err(Error::Parse(format!("bad extents '{extents}'")));
            }
            lat.extents = Some((num(e[0])? as usize, num(e[1])? as usize));
        }
        Ok(lat)
    }
}

/// `(-1)^(rx+ry) [n_r + Σ s^z]` over the existing links at `vertex`.
pub fn gauss_charge(
    lat: &Lattice,
    config: &LinkConfig,
    occupancy: &Occupancy,
    vertex: Vertex,
) -> Result<f64> {
    let v = lat.vertex(vertex)?;
    let s = lat.spin.value();
    let field: f64 = lat.incident[v]
        .iter()
        .map(|&q| config.levels[q] as f64 - s)
        .sum();
    Ok(vertex.parity() * (occupancy.get(v) as f64 + field))
}

/// All configurations with `G_r = 0` at every matter site for the given occupancy.
pub fn enumerate_physical_configs(lat: &Lattice, occupancy: &Occupancy) -> Result<Vec<LinkConfig>> {
    occupancy.validate(lat)?;
    enumerate_sector(lat, &GaussSector::pinned(lat, occupancy))
}

/// All configurations satisfying `sector`, sorted by mixed-radix index.
pub fn enumerate_sector(lat: &Lattice, sector: &GaussSector) -> Result<Vec<LinkConfig>> {
    let base = lat.spin.levels() as u128;
    let size = base.checked_pow(lat.num_links() as u32).unwrap_or(u128::MAX);
    if size > ENUMERATION_BOUND {
        return Err(Error::EnumerationBound {
            what: "configuration enumeration",
            size,
            bound: ENUMERATION_BOUND,
        });
    }
    // Each vertex is checked once its highest-index link is assigned.
    let mut closes: Vec<Vec<usize>> = vec![Vec::new(); lat.num_links()];
    for (v, inc) in lat.incident.iter().enumerate() {
        if sector.rules[v] != SiteRule::Unconstrained {
            if let Some(&last) = inc.iter().max() {
                closes[last].push(v);
            }
        }
    }
    let twice_s = lat.spin.twice() as i32;
    let ok = |v: usize, levels: &[u8]| -> bool {
        // 2 * (n + Σ s^z), kept integral
        let twice_field: i32 = lat.incident[v]
            .iter()
            .map(|&q| 2 * levels[q] as i32 - twice_s)
            .sum();
        match sector.rules[v] {
            SiteRule::Unconstrained => true,
            SiteRule::Pinned(n) => 2 * n as i32 + twice_field == 0,
            SiteRule::Free => twice_field == 0 || twice_field == -2,
        }
    };
    let mut out = Vec::new();
    let mut levels = vec![0u8; lat.num_links()];
    fn dfs(
        k: usize,
        levels: &mut Vec<u8>,
        base: u8,
        closes: &[Vec<usize>],
        ok: &dyn Fn(usize, &[u8]) -> bool,
        out: &mut Vec<LinkConfig>,
    ) {
        if k == levels.len() {
            out.push(LinkConfig::new(levels.clone()));
            return;
        }
        for l in 0..base {
            levels[k] = l;
            if closes[k].iter().all(|&v| ok(v, levels)) {
                dfs(k + 1, levels, base, closes, ok, out);
            }
        }
        levels[k] = 0;
    }
    dfs(0, &mut levels, base as u8, &closes, &ok, &mut out);
    let spin = lat.spin;
    out.sort_by_key(|c| c.index(spin));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn half(lx: usize, ly: usize) -> Lattice {
        Lattice::build(lx, ly, Spin::HALF).unwrap()
    }

    #[test]
    fn link_counts() {
        assert_eq!(half(4, 4).num_links(), 16);
        assert_eq!(half(1, 1).num_links(), 1);
        assert_eq!(half(3, 3).num_links(), 9);
        assert!(matches!(
            Lattice::build(0, 3, Spin::HALF),
            Err(Error::EmptyLattice { .. })
        ));
    }

    #[test]
    fn three_by_three_plaquettes_share_center() {
        let lat = half(3, 3);
        let p = lat.plaquette_indices();
        assert_eq!(p.len(), 2);
        let shared: Vec<usize> = p[0].iter().filter(|q| p[1].contains(q)).copied().collect();
        assert_eq!(shared.len(), 1);
        assert_eq!(lat.coupling_links(), shared);
    }

    #[test]
    fn single_link_has_no_structure() {
        let lat = half(1, 1);
        assert!(lat.plaquettes().is_empty());
        let l = lat.left_neighbor_links(lat.link(0)).unwrap();
        assert!(l.links().is_empty());
        assert_eq!(l.absent().len(), 3);
        assert!(lat.coupling_links().is_empty());
    }

    #[test]
    fn four_by_four_cells() {
        let lat = half(4, 4);
        assert_eq!(lat.plaquettes().len(), 4);
        assert_eq!(lat.coupling_links().len(), 4);
    }

    #[test]
    fn neighbor_sets_follow_definitions() {
        let lat = half(3, 3);
        let c = lat.link(lat.coupling_links()[0]);
        let r = c.origin;
        let l = lat.left_neighbor_links(c).unwrap();
        assert_eq!(l.candidates[0], LinkId::y(r.rx, r.ry));
        assert_eq!(l.candidates[1], LinkId::x(r.rx - 1, r.ry));
        assert_eq!(l.candidates[2], LinkId::y(r.rx, r.ry - 1));
        assert!(l.is_complete());
        let rr = lat.right_neighbor_links(c).unwrap();
        assert_eq!(rr.candidates[0], LinkId::x(r.rx + 1, r.ry));
        assert!(rr.is_complete());
    }

    #[test]
    fn vertical_right_set() {
        let lat = Lattice::from_links(
            vec![
                LinkId::y(1, 1),
                LinkId::y(1, 2),
                LinkId::x(0, 2),
                LinkId::x(1, 2),
            ],
            Spin::HALF,
        )
        .unwrap();
        let rr = lat.right_neighbor_links(LinkId::y(1, 1)).unwrap();
        assert_eq!(
            rr.candidates,
            [LinkId::y(1, 2), LinkId::x(0, 2), LinkId::x(1, 2)]
        );
        assert!(rr.is_complete());
    }

    #[test]
    fn gauss_charge_arithmetic() {
        let lat = half(3, 3);
        let centre = lat.link(lat.coupling_links()[0]).origin;
        let v = lat.vertex(centre).unwrap();
        let cfg = LinkConfig::uniform(lat.num_links(), 0);
        let mut occ = Occupancy::vacuum(&lat);
        occ.0[v] = 1;
        let g = gauss_charge(&lat, &cfg, &occ, centre).unwrap();
        assert_eq!(g, centre.parity() * (1.0 - 2.0));

        let spin1 = Lattice::build(3, 3, Spin::ONE).unwrap();
        let cfg = LinkConfig::uniform(spin1.num_links(), 1);
        let occ = Occupancy::vacuum(&spin1);
        for &vx in spin1.vertices() {
            assert_eq!(gauss_charge(&spin1, &cfg, &occ, vx).unwrap(), 0.0);
        }
    }

    #[test]
    fn enumeration_small_cases() {
        let lat = half(1, 1);
        let all = enumerate_physical_configs(&lat, &Occupancy::vacuum(&lat)).unwrap();
        assert_eq!(all.len(), 2);

        let lat = half(3, 3);
        let vac = enumerate_physical_configs(&lat, &Occupancy::vacuum(&lat)).unwrap();
        let fil = enumerate_physical_configs(&lat, &Occupancy::filled(&lat)).unwrap();
        assert!(!vac.is_empty() && !fil.is_empty());
        let dynamical = enumerate_sector(&lat, &GaussSector::dynamical(&lat)).unwrap();
        assert!(dynamical.len() >= vac.len() + fil.len());
    }

    #[test]
    fn enumeration_respects_bound() {
        let lat = Lattice::build(6, 6, Spin::HALF).unwrap();
        assert!(matches!(
            enumerate_sector(&lat, &GaussSector::dynamical(&lat)),
            Err(Error::EnumerationBound { .. })
        ));
    }

    #[test]
    fn description_round_trip() {
        let lat = half(4, 4);
        let back = Lattice::parse_description(&lat.describe()).unwrap();
        assert_eq!(lat, back);
        let custom = Lattice::from_links(vec![LinkId::x(0, 0)], Spin::ONE)
            .unwrap()
            .with_matter_sites(&[Vertex::new(0, 0), Vertex::new(1, 0)])
            .unwrap();
        assert_eq!(Lattice::parse_description(&custom.describe()).unwrap(), custom);
    }

    #[test]
    fn spin_parsing() {
        assert_eq!("1/2".parse::<Spin>().unwrap(), Spin::HALF);
        assert_eq!("1".parse::<Spin>().unwrap(), Spin::ONE);
        assert_eq!("3/2".parse::<Spin>().unwrap().twice(), 3);
        assert!("0".parse::<Spin>().is_err());
        assert!("1/3".parse::<Spin>().is_err());
    }

    proptest! {
        #[test]
        fn indices_are_a_bijection(lx in 1usize..7, ly in 1usize..7) {
            let lat = half(lx, ly);
            prop_assert_eq!(lat.num_links(), lx * ly);
            for (i, l) in lat.links().iter().enumerate() {
                prop_assert_eq!(lat.index_of(*l).unwrap(), i);
            }
            prop_assert!(lat.vertices().iter().all(|v| v.rx >= 0 && v.ry >= 0));
        }

        #[test]
        fn neighbor_sets_cover_endpoint_stars(lx in 2usize..7, ly in 2usize..7) {
            let lat = half(lx, ly);
            for &q in &lat.coupling_links() {
                let l = lat.link(q);
                let mut got: Vec<LinkId> = lat.left_neighbor_links(l).unwrap().links();
                got.extend(lat.right_neighbor_links(l).unwrap().links());
                got.push(l);
                got.sort();
                let mut want: Vec<LinkId> = l
                    .endpoints()
                    .iter()
                    .flat_map(|v| lat.incident(lat.vertex(*v).unwrap()).to_vec())
                    .map(|i| lat.link(i))
                    .collect();
                want.sort();
                want.dedup();
                prop_assert_eq!(got.len(), 7);
                prop_assert_eq!(got, want);
            }
        }

        #[test]
        fn plaquettes_are_closed_squares(lx in 1usize..7, ly in 1usize..7) {
            let lat = half(lx, ly);
            for p in lat.plaquettes() {
                let mut ids = p.to_vec();
                ids.sort();
                ids.dedup();
                prop_assert_eq!(ids.len(), 4);
                let mut degree: HashMap<Vertex, usize> = HashMap::new();
                for l in p {
                    for v in l.endpoints() {
                        *degree.entry(v).or_default() += 1;
                    }
                }
                prop_assert_eq!(degree.len(), 4);
                prop_assert!(degree.values().all(|&d| d == 2));
            }
        }

        #[test]
        fn gauss_charge_is_linear_and_staggered(
            levels in proptest::collection::vec(0u8..3, 9),
            other in proptest::collection::vec(0u8..3, 9),
        ) {
            let lat = Lattice::build(3, 3, Spin::ONE).unwrap();
            let occ = Occupancy::vacuum(&lat);
            let a = LinkConfig::new(levels);
            let b = LinkConfig::new(other);
            for &v in lat.vertices() {
                let s = lat.incident(lat.vertex(v).unwrap()).len() as f64;
                let ga = gauss_charge(&lat, &a, &occ, v).unwrap();
                let gb = gauss_charge(&lat, &b, &occ, v).unwrap();
                // sum of field values, recovered with the S offsets
                let sum = LinkConfig::new(a.levels.iter().zip(&b.levels).map(|(x, y)| x + y).collect());
                let gs = gauss_charge(&lat, &sum, &occ, v).unwrap();
                prop_assert!((gs - (ga + gb + v.parity() * s)).abs() < 1e-12);
                prop_assert!((ga.abs() - (ga * v.parity()).abs()).abs() < 1e-12);
            }
        }

        #[test]
        fn enumerated_configs_are_gauss_free(filled in any::<bool>(), lx in 1usize..5, ly in 1usize..5) {
            let lat = half(lx, ly);
            let occ = if filled { Occupancy::filled(&lat) } else { Occupancy::vacuum(&lat) };
            let configs = enumerate_physical_configs(&lat, &occ).unwrap();
            for c in &configs {
                for v in lat.matter_sites() {
                    let g = gauss_charge(&lat, c, &occ, lat.vertices()[v]).unwrap();
                    prop_assert_eq!(g, 0.0);
                }
            }
            // Exhaustive cross-check against the raw filter.
            let n = lat.num_links();
            let brute = (0..1u64 << n)
                .map(|i| LinkConfig::from_index(i, n, Spin::HALF))
                .filter(|c| lat.matter_sites().iter().all(|&v| {
                    gauss_charge(&lat, c, &occ, lat.vertices()[v]).unwrap() == 0.0
                }))
                .count();
            prop_assert_eq!(configs.len(), brute);
        }
    }
}
