//! TOML run configuration.

use std::path::PathBuf;

use qlink_core::hamiltonian::{implied_occupancy, most_connected_config, ModelParams};
use qlink_core::noise::NoiseModel;
use qlink_core::{GaussSector, Lattice, LinkConfig, Occupancy, Spin};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Trotter,
    Exact,
    Both,
}

impl Mode {
    pub fn runs_trotter(self) -> bool {
        matches!(self, Mode::Trotter | Mode::Both)
    }

    pub fn runs_exact(self) -> bool {
        matches!(self, Mode::Exact | Mode::Both)
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Trotter => "trotter",
            Mode::Exact => "exact",
            Mode::Both => "both",
        })
    }
}

impl std::str::FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "trotter" => Ok(Mode::Trotter),
            "exact" => Ok(Mode::Exact),
            "both" => Ok(Mode::Both),
            _ => Err(format!("unknown mode '{s}' (trotter, exact, both)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatticeSection {
    pub lx: usize,
    pub ly: usize,
    /// `"1/2"`, `"1"`, ...
    pub spin: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamsSection {
    pub m: f64,
    pub kappa: f64,
    #[serde(default)]
    pub j: f64,
    #[serde(default)]
    pub g: f64,
}

/// Matter occupation the initial configuration is checked against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum OccupancySpec {
    /// `"filled"`, `"vacuum"` or `"implied"`.
    Named(String),
    /// One 0/1 entry per vertex.
    Explicit(Vec<u8>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct InitialSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub levels: Option<Vec<u8>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub occupancy: Option<OccupancySpec>,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub dtheta: f64,
    pub steps: usize,
    #[serde(default)]
    pub mode: Mode,
    #[serde(default = "one")]
    pub snapshot_stride: usize,
    /// Link indices averaged into `M`; coupling links when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub observe: Option<Vec<usize>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Rates {
    pub p_1q: f64,
    pub p_cx: f64,
    pub p_ms: f64,
}

fn none_name() -> String {
    "none".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSection {
    #[serde(default = "none_name")]
    pub model: String,
    /// Overrides `model` when present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rates: Option<Rates>,
    #[serde(default = "one")]
    pub shots: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for NoiseSection {
    fn default() -> Self {
        NoiseSection { model: none_name(), rates: None, shots: 1, seed: 0 }
    }
}

fn out_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default = "out_dir")]
    pub dir: PathBuf,
    #[serde(default)]
    pub emit_circuit: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threads: Option<usize>,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection { dir: out_dir(), emit_circuit: false, threads: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub lattice: LatticeSection,
    pub params: ParamsSection,
    #[serde(default)]
    pub initial: InitialSection,
    pub run: RunSection,
    #[serde(default)]
    pub noise: NoiseSection,
    #[serde(default)]
    pub output: OutputSection,
}

pub const PRESETS: [&str; 3] = ["system-i", "system-ii", "system-iii"];

/// Everything a run needs, checked against the lattice.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub lattice: Lattice,
    pub params: ModelParams,
    pub initial: LinkConfig,
    pub occupancy: Occupancy,
    pub subset: Vec<usize>,
    pub noise: NoiseModel,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| CliError::Io { path: path.display().to_string(), source })?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// A complete configuration for one of the named systems.
    pub fn preset(name: &str) -> Result<Self> {
        let (lx, ly, j) = match name {
            "system-i" | "system-ii" => (4, 4, 0.0),
            "system-iii" => (3, 3, 0.5),
            _ => return Err(CliError::config("initial.preset", format!("unknown preset '{name}' (expected one of {})", PRESETS.join(", ")))),
        };
        Ok(RunConfig {
            lattice: LatticeSection { lx, ly, spin: "1/2".into() },
            params: ParamsSection { m: 0.42, kappa: 1.0, j, g: 0.0 },
            initial: InitialSection { preset: Some(name.into()), levels: None, occupancy: None },
            run: RunSection {
                dtheta: 0.01 * std::f64::consts::PI,
                steps: 400,
                mode: if name == "system-iii" { Mode::Both } else { Mode::Trotter },
                snapshot_stride: 1,
                observe: None,
            },
            noise: NoiseSection::default(),
            output: OutputSection::default(),
        })
    }

    /// Validates every field, reporting all problems together.
    pub fn resolve(&self) -> Result<Resolved> {
        let mut problems: Vec<(String, String)> = Vec::new();
        let mut bad = |f: &str, m: String| problems.push((f.into(), m));

        if !(self.run.dtheta > 0.0 && self.run.dtheta.is_finite()) {
            bad("run.dtheta", format!("must be positive and finite, got {}", self.run.dtheta));
        }
        if self.run.steps == 0 {
            bad("run.steps", "must be at least 1".into());
        }
        if self.run.snapshot_stride == 0 {
            bad("run.snapshot_stride", "must be at least 1".into());
        }
        for (name, v) in [("params.m", self.params.m), ("params.kappa", self.params.kappa), ("params.j", self.params.j), ("params.g", self.params.g)] {
            if !v.is_finite() {
                bad(name, format!("must be finite, got {v}"));
            }
        }
        if self.output.threads == Some(0) {
            bad("output.threads", "must be at least 1".into());
        }
        let noise = match self.noise.rates {
            Some(r) => NoiseModel::new(r.p_1q, r.p_cx, r.p_ms).map_err(|e| e.to_string()),
            None => NoiseModel::by_name(&self.noise.model).map_err(|e| e.to_string()),
        };
        let noise = match noise {
            Ok(n) => Some(n),
            Err(e) => {
                bad(if self.noise.rates.is_some() { "noise.rates" } else { "noise.model" }, e);
                None
            }
        };
        if noise.is_some_and(|n| !n.is_null()) {
            if self.noise.shots == 0 {
                bad("noise.shots", "must be at least 1 when noise is active".into());
            }
            if self.run.mode == Mode::Exact {
                bad("noise.model", "exact mode is noiseless".into());
            }
        }
        let spin = match self.lattice.spin.parse::<Spin>() {
            Ok(s) => Some(s),
            Err(e) => {
                bad("lattice.spin", e.to_string());
                None
            }
        };
        if self.lattice.lx == 0 || self.lattice.ly == 0 {
            bad("lattice", "extents must be positive".into());
        }
        let lattice = match spin {
            Some(s) if self.lattice.lx > 0 && self.lattice.ly > 0 => match Lattice::build(self.lattice.lx, self.lattice.ly, s) {
                Ok(l) => Some(l),
                Err(e) => {
                    bad("lattice", e.to_string());
                    None
                }
            },
            _ => None,
        };
        let params = ModelParams { m: self.params.m, kappa: self.params.kappa, j: self.params.j, g: self.params.g };

        let mut resolved = None;
        if let Some(lat) = lattice {
            let n = lat.num_links();
            let subset = match &self.run.observe {
                Some(s) => {
                    if s.is_empty() {
                        bad("run.observe", "must name at least one link".into());
                    }
                    if let Some(&q) = s.iter().find(|&&q| q >= n) {
                        bad("run.observe", format!("link {q} out of range (lattice has {n} links)"));
                    }
                    s.clone()
                }
                None => {
                    let c = lat.coupling_links();
                    if c.is_empty() {
                        (0..n).collect()
                    } else {
                        c
                    }
                }
            };
            let initial = match (&self.initial.preset, &self.initial.levels) {
                (Some(_), Some(_)) => {
                    bad("initial", "give either preset or levels, not both".into());
                    None
                }
                (None, None) => {
                    bad("initial", "needs a preset or explicit levels".into());
                    None
                }
                (None, Some(levels)) => {
                    let c = LinkConfig::new(levels.clone());
                    match c.validate(&lat) {
                        Ok(()) => Some(c),
                        Err(e) => {
                            bad("initial.levels", e.to_string());
                            None
                        }
                    }
                }
                (Some(name), None) => {
                    let filter = match name.as_str() {
                        "system-i" => Some(Some(Occupancy::filled(&lat))),
                        "system-ii" => Some(Some(Occupancy::vacuum(&lat))),
                        "system-iii" => Some(None),
                        _ => None,
                    };
                    match filter {
                        None => {
                            bad("initial.preset", format!("unknown preset '{name}' (expected one of {})", PRESETS.join(", ")));
                            None
                        }
                        Some(occ) => match most_connected_config(&lat, &params, occ.as_ref()) {
                            Ok(c) => Some(c),
                            Err(e) => {
                                bad("initial.preset", format!("cannot resolve '{name}' on this lattice: {e}"));
                                None
                            }
                        },
                    }
                }
            };
            if let Some(initial) = initial {
                let occupancy = match &self.initial.occupancy {
                    None => implied_occupancy(&lat, &initial).ok_or("no 0/1 matter occupation satisfies Gauss's law".to_string()),
                    Some(OccupancySpec::Named(s)) => match s.as_str() {
                        "filled" => Ok(Occupancy::filled(&lat)),
                        "vacuum" => Ok(Occupancy::vacuum(&lat)),
                        "implied" => implied_occupancy(&lat, &initial).ok_or("no 0/1 matter occupation satisfies Gauss's law".to_string()),
                        _ => Err(format!("unknown occupancy '{s}' (filled, vacuum, implied, or a 0/1 list)")),
                    },
                    Some(OccupancySpec::Explicit(v)) => {
                        let o = Occupancy(v.clone());
                        o.validate(&lat).map(|_| o).map_err(|e| e.to_string())
                    }
                };
                match occupancy {
                    Err(e) => bad("initial.occupancy", e),
                    Ok(occ) => {
                        let sector = GaussSector::pinned(&lat, &occ);
                        if !sector.allows(&lat, &initial.levels) {
                            bad("initial", format!("configuration {initial} violates Gauss's law for the declared occupancy"));
                        } else if let Some(noise) = noise {
                            resolved = Some(Resolved { lattice: lat, params, initial, occupancy: occ, subset, noise });
                        }
                    }
                }
            }
        }
        if !problems.is_empty() {
            return Err(CliError::Config { problems });
        }
        resolved.ok_or_else(|| CliError::config("config", "could not be resolved"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const SAMPLE: &str = r#"
[lattice]
lx = 3
ly = 3
spin = "1/2"

[params]
m = 0.42
kappa = 1.0
j = 0.5

[initial]
preset = "system-iii"

[run]
dtheta = 0.0314
steps = 10
mode = "both"
"#;

    #[test]
    fn parses_with_defaults() {
        let c = RunConfig::parse(SAMPLE).unwrap();
        assert_eq!(c.run.snapshot_stride, 1);
        assert_eq!(c.noise.model, "none");
        assert_eq!(c.output.dir, PathBuf::from("out"));
        assert_eq!(c.run.mode, Mode::Both);
    }

    #[test]
    fn round_trips() {
        for name in PRESETS {
            let c = RunConfig::preset(name).unwrap();
            assert_eq!(RunConfig::parse(&c.to_toml().unwrap()).unwrap(), c);
        }
        let mut c = RunConfig::parse(SAMPLE).unwrap();
        c.initial = InitialSection { preset: None, levels: Some(vec![0; 9]), occupancy: Some(OccupancySpec::Explicit(vec![0; 16])) };
        c.noise.rates = Some(Rates { p_1q: 1e-3, p_cx: 1e-2, p_ms: 5e-3 });
        c.output.threads = Some(2);
        assert_eq!(RunConfig::parse(&c.to_toml().unwrap()).unwrap(), c);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::parse(&SAMPLE.replace("steps = 10", "steps = 10\nstep = 3")).is_err());
    }

    #[test]
    fn reports_every_bad_field() {
        let mut c = RunConfig::parse(SAMPLE).unwrap();
        c.run.steps = 0;
        c.run.dtheta = -1.0;
        c.lattice.spin = "x".into();
        let CliError::Config { problems } = c.resolve().unwrap_err() else { panic!() };
        let fields: Vec<&str> = problems.iter().map(|(f, _)| f.as_str()).collect();
        assert!(fields.contains(&"run.steps"));
        assert!(fields.contains(&"run.dtheta"));
        assert!(fields.contains(&"lattice.spin"));
    }

    #[test]
    fn active_noise_needs_shots() {
        let mut c = RunConfig::parse(SAMPLE).unwrap();
        c.run.mode = Mode::Trotter;
        c.noise.model = "model1".into();
        c.noise.shots = 0;
        assert!(c.resolve().is_err());
        c.noise.shots = 3;
        assert!(c.resolve().is_ok());
    }

    #[test]
    fn preset_resolves_and_passes_gauss_check() {
        let r = RunConfig::parse(SAMPLE).unwrap().resolve().unwrap();
        assert_eq!(r.subset, r.lattice.coupling_links());
        assert!(GaussSector::pinned(&r.lattice, &r.occupancy).allows(&r.lattice, &r.initial.levels));
    }

    #[test]
    fn gauss_violating_levels_rejected() {
        let mut c = RunConfig::parse(SAMPLE).unwrap();
        let r = c.resolve().unwrap();
        let mut levels = r.initial.levels.clone();
        let q = r.lattice.coupling_links()[0];
        levels[q] ^= 1;
        c.initial = InitialSection { preset: None, levels: Some(levels), occupancy: Some(OccupancySpec::Explicit(r.occupancy.0.clone())) };
        let CliError::Config { problems } = c.resolve().unwrap_err() else { panic!() };
        assert_eq!(problems[0].0, "initial");
    }

    #[test]
    fn unknown_preset_rejected() {
        assert!(RunConfig::preset("system-iv").is_err());
    }

    proptest! {
        #[test]
        fn arbitrary_configs_round_trip(
            m in -5.0f64..5.0,
            kappa in -5.0f64..5.0,
            dtheta in 1e-6f64..1.0,
            steps in 1usize..100_000,
            seed in any::<u64>(),
            shots in 1usize..1000,
            levels in proptest::collection::vec(0u8..3, 0..20),
            observe in proptest::option::of(proptest::collection::vec(0usize..40, 1..5)),
            mode in prop_oneof![Just(Mode::Trotter), Just(Mode::Exact), Just(Mode::Both)],
        ) {
            let mut c = RunConfig::preset("system-i").unwrap();
            c.params.m = m;
            c.params.kappa = kappa;
            c.run.dtheta = dtheta;
            c.run.steps = steps;
            c.run.mode = mode;
            c.run.observe = observe;
            c.noise.seed = seed;
            c.noise.shots = shots;
            c.initial = InitialSection { preset: None, levels: Some(levels), occupancy: Some(OccupancySpec::Named("implied".into())) };
            prop_assert_eq!(RunConfig::parse(&c.to_toml().unwrap()).unwrap(), c);
        }
    }
}
