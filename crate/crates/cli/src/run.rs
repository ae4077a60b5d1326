//! Run orchestration and artifact emission.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use qlink_core::circuits::{export, minimal_dimensions, schedule_census, trotter_step, Circuit, GateCensus, TermKind};
use qlink_core::hamiltonian::{build_h_mio_on, Basis, Propagator, DENSE_LIMIT};
use qlink_core::noise::{run_trajectories, NoiseModel};
use qlink_core::observables::{gauss_violation, leakage, local_sz_map, sector_local_sz, sector_magnetization};
use qlink_core::{enumerate_sector, FusedProgram, Gate, GaussSector, Lattice, RegisterShape, StateVector, C64};
use sha2::{Digest, Sha256};

use crate::config::{Resolved, RunConfig};
use crate::error::{CliError, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// States at or below this many amplitudes run their shots in parallel.
const PARALLEL_SHOT_LIMIT: usize = 1 << 20;

/// What a run produced.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub steps: usize,
    pub initial: String,
    pub register_dims: Vec<usize>,
    pub census: GateCensus,
    pub max_gauss_violation: Option<f64>,
    pub max_leakage: Option<f64>,
    /// `max_k |M − M_exact|` in `both` mode.
    pub max_abs_diff: Option<f64>,
    pub written: Vec<PathBuf>,
}

struct Series {
    /// `values[k]`: `(M, gauss_violation, leakage)` after `k` steps.
    values: Vec<[f64; 3]>,
    stderr: Option<Vec<[f64; 3]>>,
    sz: Vec<Vec<f64>>,
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|source| CliError::Io { path: path.display().to_string(), source })
}

/// Header line shared by all outputs. The hash covers everything except the
/// `[output]` section, which cannot change results.
fn provenance(config: &RunConfig) -> Result<String> {
    let physics = RunConfig { output: Default::default(), ..config.clone() };
    let hash = Sha256::digest(physics.to_toml()?.as_bytes());
    let hex: String = hash.iter().map(|b| format!("{b:02x}")).collect();
    Ok(format!("# qlink {VERSION} config-sha256={hex} seed={}\n", config.noise.seed))
}

/// Runs `f` on a pool capped at the configured thread count.
fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    match threads {
        None => f(),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| CliError::Threads(e.to_string()))?
            .install(f),
    }
}

fn census_table(schedule: &[Circuit]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:<28} {:>7} {:>7} {:>11} {:>8}", "term", "single", "two", "entangling", "virtual");
    let row = |out: &mut String, name: &str, c: GateCensus| {
        let _ = writeln!(out, "{:<28} {:>7} {:>7} {:>11} {:>8}", name, c.single_qudit, c.two_qudit, c.entangling, c.virtual_gates);
    };
    for c in schedule.iter().filter(|c| !c.gates.is_empty()) {
        row(&mut out, &c.label, c.census());
    }
    for kind in [TermKind::Mass, TermKind::Electric, TermKind::Coupling, TermKind::Plaquette] {
        let terms: Vec<&Circuit> = schedule.iter().filter(|c| c.kind == kind && !c.gates.is_empty()).collect();
        if !terms.is_empty() {
            let total = terms.iter().map(|c| c.census()).fold(GateCensus::default(), |a, b| a + b);
            row(&mut out, &format!("{kind} total ({})", terms.len()), total);
        }
    }
    row(&mut out, "total", schedule_census(schedule));
    out
}

fn register_line(dims: &[usize]) -> String {
    let mut counts: Vec<(usize, usize)> = Vec::new();
    for &d in dims {
        match counts.iter_mut().find(|(k, _)| *k == d) {
            Some((_, n)) => *n += 1,
            None => counts.push((d, 1)),
        }
    }
    counts.sort_unstable();
    let factors: Vec<String> = counts.iter().map(|(d, n)| format!("{d}^{n}")).collect();
    let total: f64 = dims.iter().map(|&d| d as f64).product();
    format!("register {} ({total:.0} amplitudes)\n", factors.join(" x "))
}

/// Writes one Trotter step as `circuit.qd` and its census as `report.txt`.
pub fn emit_circuit(config: &RunConfig) -> Result<Vec<PathBuf>> {
    let r = config.resolve()?;
    let schedule = trotter_step(&r.lattice, &r.params, config.run.dtheta)?;
    let dims = minimal_dimensions(&r.lattice, &schedule);
    let dir = &config.output.dir;
    fs::create_dir_all(dir).map_err(|source| CliError::Io { path: dir.display().to_string(), source })?;
    let header = provenance(config)?;
    let circuit = dir.join("circuit.qd");
    write_file(&circuit, &format!("{header}{}", export(&r.lattice, &schedule, &dims)))?;
    let report = dir.join("report.txt");
    let mut text = header;
    text.push_str(&register_line(&dims));
    text.push('\n');
    text.push_str(&census_table(&schedule));
    write_file(&report, &text)?;
    Ok(vec![circuit, report])
}

fn trotter_series(config: &RunConfig, r: &Resolved, schedule: &[Circuit], dims: &[usize]) -> Result<Series> {
    let lat = &r.lattice;
    let shape = RegisterShape::new(dims.to_vec())?;
    let segments: Vec<&[Gate]> = schedule.iter().map(|c| c.gates.as_slice()).collect();
    let program = FusedProgram::compile(&shape, &segments)?;
    let levels: Vec<usize> = r.initial.levels.iter().map(|&l| l as usize).collect();
    let psi0 = StateVector::new_basis_state(shape.clone(), &levels)?;
    let sector = GaussSector::dynamical(lat);
    let stride = config.run.snapshot_stride;
    let observe = |step: usize, s: &StateVector| -> qlink_core::Result<Vec<f64>> {
        let sz = local_sz_map(s, lat)?;
        let m = r.subset.iter().map(|&q| sz[q]).sum::<f64>() / r.subset.len() as f64;
        let mut v = vec![m, gauss_violation(s, lat, &sector)?, leakage(s, lat)?];
        if step % stride == 0 {
            v.extend(sz);
        } else {
            v.extend(std::iter::repeat_n(0.0, sz.len()));
        }
        Ok(v)
    };
    let noisy = !r.noise.is_null();
    let (model, shots) = if noisy { (r.noise, config.noise.shots) } else { (NoiseModel::none(), 1) };
    let parallel = noisy && shape.total() <= PARALLEL_SHOT_LIMIT;
    let t = run_trajectories(&program, config.run.steps, &psi0, &model, shots, observe, config.noise.seed, parallel)?;
    Ok(Series {
        values: t.mean.iter().map(|row| [row[0], row[1], row[2]]).collect(),
        stderr: noisy.then(|| t.stderr.iter().map(|row| [row[0], row[1], row[2]]).collect()),
        sz: t.mean.iter().map(|row| row[3..].to_vec()).collect(),
    })
}

fn exact_series(config: &RunConfig, r: &Resolved) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let lat: &Lattice = &r.lattice;
    let configs = enumerate_sector(lat, &GaussSector::dynamical(lat))?;
    let h = build_h_mio_on(lat, &r.params, configs)?;
    let Basis::Links { configs, .. } = h.basis() else {
        unreachable!("link basis requested")
    };
    let lookup: HashMap<&[u8], usize> = configs.iter().enumerate().map(|(i, c)| (c.levels.as_slice(), i)).collect();
    let start = *lookup
        .get(r.initial.levels.as_slice())
        .ok_or_else(|| CliError::config("initial", "configuration lies outside the dynamical sector"))?;
    let mut psi = vec![C64::new(0.0, 0.0); configs.len()];
    psi[start] = C64::new(1.0, 0.0);
    let prop = Propagator::new(&h);
    let dense = h.dim() <= DENSE_LIMIT;
    let dtheta = config.run.dtheta;
    let stride = config.run.snapshot_stride;
    let mut m = Vec::with_capacity(config.run.steps + 1);
    let mut sz = Vec::with_capacity(config.run.steps + 1);
    let psi0 = psi.clone();
    for k in 0..=config.run.steps {
        if k > 0 {
            psi = if dense { prop.evolve(&psi0, k as f64 * dtheta)? } else { prop.evolve(&psi, dtheta)? };
        }
        m.push(sector_magnetization(&psi, configs, lat, &r.subset)?);
        sz.push(if k % stride == 0 { sector_local_sz(&psi, configs, lat) } else { Vec::new() });
    }
    Ok((m, sz))
}

fn fmt(x: f64) -> String {
    format!("{x:.15e}")
}

/// Executes the configured run and writes `trajectory.csv`, `snapshots.txt`
/// and `report.txt`, plus `circuit.qd` when requested.
pub fn run(config: &RunConfig) -> Result<RunSummary> {
    with_threads(config.output.threads, || run_inner(config))
}

fn run_inner(config: &RunConfig) -> Result<RunSummary> {
    let r = config.resolve()?;
    let lat = &r.lattice;
    let mode = config.run.mode;
    let steps = config.run.steps;
    let dtheta = config.run.dtheta;
    let dir = &config.output.dir;
    fs::create_dir_all(dir).map_err(|source| CliError::Io { path: dir.display().to_string(), source })?;
    let header = provenance(config)?;

    let schedule = trotter_step(lat, &r.params, dtheta)?;
    let dims = minimal_dimensions(lat, &schedule);
    let trotter = if mode.runs_trotter() { Some(trotter_series(config, &r, &schedule, &dims)?) } else { None };
    let exact = if mode.runs_exact() { Some(exact_series(config, &r)?) } else { None };

    let mut csv = header.clone();
    let mut cols = vec!["step", "theta"];
    if trotter.is_some() {
        cols.extend(["M", "gauss_violation", "leakage"]);
        if trotter.as_ref().is_some_and(|t| t.stderr.is_some()) {
            cols.extend(["M_stderr", "gauss_violation_stderr", "leakage_stderr"]);
        }
    }
    if exact.is_some() {
        cols.push("M_exact");
    }
    if trotter.is_some() && exact.is_some() {
        cols.push("abs_diff");
    }
    csv.push_str(&cols.join(","));
    csv.push('\n');
    let mut max_diff: Option<f64> = None;
    for k in 0..=steps {
        let mut row = vec![k.to_string(), fmt(k as f64 * dtheta)];
        if let Some(t) = &trotter {
            row.extend(t.values[k].iter().map(|&x| fmt(x)));
            if let Some(se) = &t.stderr {
                row.extend(se[k].iter().map(|&x| fmt(x)));
            }
        }
        if let Some((m, _)) = &exact {
            row.push(fmt(m[k]));
        }
        if let (Some(t), Some((m, _))) = (&trotter, &exact) {
            let d = (t.values[k][0] - m[k]).abs();
            max_diff = Some(max_diff.map_or(d, |x: f64| x.max(d)));
            row.push(fmt(d));
        }
        csv.push_str(&row.join(","));
        csv.push('\n');
    }
    let mut written = Vec::new();
    let path = dir.join("trajectory.csv");
    write_file(&path, &csv)?;
    written.push(path);

    let mut snaps = header.clone();
    for k in (0..=steps).step_by(config.run.snapshot_stride) {
        let sz = match (&trotter, &exact) {
            (Some(t), _) => &t.sz[k],
            (None, Some((_, sz))) => &sz[k],
            (None, None) => unreachable!("mode runs at least one evolution"),
        };
        let _ = writeln!(snaps, "step {k} theta {}", fmt(k as f64 * dtheta));
        for (q, link) in lat.links().iter().enumerate() {
            let _ = writeln!(snaps, "{q} {} {} {} {}", link.origin.rx, link.origin.ry, link.axis, fmt(sz[q]));
        }
        snaps.push('\n');
    }
    let path = dir.join("snapshots.txt");
    write_file(&path, &snaps)?;
    written.push(path);

    if config.output.emit_circuit {
        let path = dir.join("circuit.qd");
        write_file(&path, &format!("{header}{}", export(lat, &schedule, &dims)))?;
        written.push(path);
    }

    let max_of = |i: usize| trotter.as_ref().map(|t| t.values.iter().map(|v| v[i]).fold(0.0, f64::max));
    let summary = RunSummary {
        steps,
        initial: r.initial.to_string(),
        register_dims: dims.clone(),
        census: schedule_census(&schedule),
        max_gauss_violation: max_of(1),
        max_leakage: max_of(2),
        max_abs_diff: max_diff,
        written: Vec::new(),
    };

    let mut report = header;
    let _ = writeln!(report, "lattice {}x{} spin {} links {}", config.lattice.lx, config.lattice.ly, lat.spin(), lat.num_links());
    let _ = writeln!(report, "params m={} kappa={} j={} g={}", r.params.m, r.params.kappa, r.params.j, r.params.g);
    let _ = writeln!(report, "initial {}", summary.initial);
    let subset: Vec<String> = r.subset.iter().map(|q| q.to_string()).collect();
    let _ = writeln!(report, "observe {}", subset.join(" "));
    let _ = writeln!(report, "mode {} steps {steps} dtheta {}", mode, fmt(dtheta));
    if !r.noise.is_null() {
        let _ = writeln!(report, "noise p_1q={:e} p_cx={:e} p_ms={:e} shots {}", r.noise.p_1q, r.noise.p_cx, r.noise.p_ms, config.noise.shots);
    }
    report.push_str(&register_line(&dims));
    report.push('\n');
    report.push_str(&census_table(&schedule));
    report.push('\n');
    if let Some(v) = summary.max_gauss_violation {
        let _ = writeln!(report, "max gauss_violation {}", fmt(v));
    }
    if let Some(v) = summary.max_leakage {
        let _ = writeln!(report, "max leakage {}", fmt(v));
    }
    if let Some(v) = summary.max_abs_diff {
        let _ = writeln!(report, "max |M - M_exact| {}", fmt(v));
    }
    report.push('\n');
    report.push_str(&lat.describe());
    let path = dir.join("report.txt");
    write_file(&path, &report)?;
    written.push(path);

    Ok(RunSummary { written, ..summary })
}
