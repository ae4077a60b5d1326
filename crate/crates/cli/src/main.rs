use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use qlink_cli::{emit_circuit, run, CliError, Mode, RunConfig};

/// Trotterized and exact quench dynamics of the quantum link model.
#[derive(Debug, Parser)]
#[command(name = "qlink", version)]
struct Args {
    /// TOML run configuration.
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Start from a named system instead of a config file.
    #[arg(long, value_parser = ["system-i", "system-ii", "system-iii"])]
    preset: Option<String>,
    #[arg(long)]
    mode: Option<Mode>,
    /// none, model1 or model2.
    #[arg(long)]
    noise: Option<String>,
    #[arg(long)]
    shots: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    dtheta: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write one Trotter step and its gate census, then exit.
    #[arg(long)]
    emit_circuit: bool,
    #[arg(long)]
    threads: Option<usize>,
    /// Print the resolved configuration, with the initial state pinned, and exit.
    #[arg(long)]
    print_config: bool,
}

fn load(args: &Args) -> Result<RunConfig, CliError> {
    let mut c = match (&args.config, &args.preset) {
        (Some(path), _) => RunConfig::load(path)?,
        (None, Some(name)) => RunConfig::preset(name)?,
        (None, None) => return Err(CliError::config("config", "pass --config PATH or --preset NAME")),
    };
    if let Some(m) = args.mode {
        c.run.mode = m;
    }
    if let Some(n) = &args.noise {
        c.noise.model = n.clone();
        c.noise.rates = None;
    }
    if let Some(s) = args.shots {
        c.noise.shots = s;
    }
    if let Some(s) = args.seed {
        c.noise.seed = s;
    }
    if let Some(d) = args.dtheta {
        c.run.dtheta = d;
    }
    if let Some(s) = args.steps {
        c.run.steps = s;
    }
    if let Some(o) = &args.out {
        c.output.dir = o.clone();
    }
    if args.threads.is_some() {
        c.output.threads = args.threads;
    }
    Ok(c)
}

fn main() -> ExitCode {
    let args = Args::parse();
    let result = load(&args).and_then(|mut config| {
        if args.print_config {
            let r = config.resolve()?;
            config.initial.preset = None;
            config.initial.levels = Some(r.initial.levels.clone());
            print!("{}", config.to_toml()?);
            return Ok(());
        }
        if args.emit_circuit {
            for p in emit_circuit(&config)? {
                println!("wrote {}", p.display());
            }
            return Ok(());
        }
        let s = run(&config)?;
        println!("initial {}", s.initial);
        if let Some(v) = s.max_gauss_violation {
            println!("max gauss_violation {v:e}");
        }
        if let Some(v) = s.max_leakage {
            println!("max leakage {v:e}");
        }
        if let Some(v) = s.max_abs_diff {
            println!("max |M - M_exact| {v:e}");
        }
        for p in &s.written {
            println!("wrote {}", p.display());
        }
        Ok(())
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
