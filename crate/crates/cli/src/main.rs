use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use jflow_cli::config::{resolve, PotentialSpec, RunConfig};
use jflow_cli::{configure_threads, execute, CliError, Command, EXIT_ERROR};
use toric_jflow::calabi::RadialScheme;

#[derive(Parser)]
#[command(
    name = "jflow",
    version,
    about = "Stability checks, J-flow runs and the radial Calabi example"
)]
struct Cli {
    /// Reserved; no command is stochastic.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Sub,
}

#[derive(Subcommand)]
enum Sub {
    /// Check every proper face of P against nc for the class pair (P, Q).
    Stability(StabilityArgs),
    /// Evolve the J-flow on a grid over P and classify the outcome.
    Flow(FlowArgs),
    /// Run the radial example on the blowup polytope.
    Calabi(CalabiArgs),
    /// Validate a config and print it with all defaults filled in.
    Report(ReportArgs),
}

#[derive(Args)]
#[command(allow_negative_numbers = true)]
struct StabilityArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    p: Option<PathBuf>,
    #[arg(long)]
    q: Option<PathBuf>,
    #[arg(long)]
    tol: Option<f64>,
    /// Report JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
#[command(allow_negative_numbers = true)]
struct FlowArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    p: Option<PathBuf>,
    #[arg(long)]
    q: Option<PathBuf>,
    /// Smooth correction of the initial potential on P, in y1..yn.
    #[arg(long)]
    u0: Option<String>,
    /// Smooth correction of the target potential on Q.
    #[arg(long)]
    g: Option<String>,
    #[arg(long)]
    h: Option<f64>,
    #[arg(long)]
    cfl: Option<f64>,
    #[arg(long)]
    dt: Option<f64>,
    #[arg(long)]
    t_end: Option<f64>,
    #[arg(long)]
    diag_every: Option<f64>,
    /// Point of Q° whose preimage is tracked, as comma-separated coordinates.
    #[arg(long)]
    track: Vec<String>,
    #[arg(long)]
    diagnostics: Option<PathBuf>,
    #[arg(long)]
    outcome: Option<PathBuf>,
    #[arg(long)]
    state: Option<PathBuf>,
}

#[derive(Args)]
#[command(allow_negative_numbers = true)]
struct CalabiArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    a: Option<String>,
    #[arg(long)]
    b: Option<String>,
    /// Number of radial nodes.
    #[arg(long)]
    grid: Option<usize>,
    #[arg(long)]
    t_end: Option<f64>,
    /// Time between snapshots in the CSV.
    #[arg(long)]
    every: Option<f64>,
    #[arg(long, value_parser = parse_scheme)]
    scheme: Option<RadialScheme>,
    /// Snapshot CSV with columns t, B, f, trace, det.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    summary: Option<PathBuf>,
}

#[derive(Args)]
#[command(allow_negative_numbers = true)]
struct ReportArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_scheme(s: &str) -> Result<RadialScheme, String> {
    match s {
        "semi_implicit" => Ok(RadialScheme::SemiImplicit),
        "explicit_rk2" => Ok(RadialScheme::ExplicitRk2),
        _ => Err(format!("unknown scheme `{s}` (semi_implicit, explicit_rk2)")),
    }
}

/// Start from `--config` when given, else from defaults for `command`.
fn base_config(path: &Option<PathBuf>, command: Command) -> Result<(RunConfig, PathBuf), CliError> {
    match path {
        Some(path) => {
            let mut cfg = RunConfig::load(path)?;
            if cfg.command != command && cfg.command != Command::Report {
                return Err(CliError::Config(format!(
                    "{}: config is for `{:?}`, not `{:?}`",
                    path.display(),
                    cfg.command,
                    command
                )));
            }
            cfg.command = command;
            let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
            Ok((cfg, dir))
        }
        None => Ok((RunConfig::new(command), PathBuf::from("."))),
    }
}

fn cwd_path(p: PathBuf) -> PathBuf {
    resolve(&std::env::current_dir().unwrap_or_default(), &p)
}

fn build(cli: Cli) -> Result<(RunConfig, PathBuf, Option<PathBuf>), CliError> {
    let (mut cfg, base, echo) = match cli.command {
        Sub::Stability(a) => {
            let (mut cfg, base) = base_config(&a.config, Command::Stability)?;
            if let Some(p) = a.p {
                cfg.p = Some(cwd_path(p));
            }
            if let Some(q) = a.q {
                cfg.q = Some(cwd_path(q));
            }
            if let Some(t) = a.tol {
                cfg.tolerances.stability = t;
            }
            if let Some(o) = a.out {
                cfg.outputs.report = Some(cwd_path(o));
            }
            (cfg, base, None)
        }
        Sub::Flow(a) => {
            let (mut cfg, base) = base_config(&a.config, Command::Flow)?;
            if let Some(p) = a.p {
                cfg.p = Some(cwd_path(p));
            }
            if let Some(q) = a.q {
                cfg.q = Some(cwd_path(q));
            }
            if let Some(v) = a.u0 {
                cfg.u0 = PotentialSpec::Expr { v };
            }
            if let Some(v) = a.g {
                cfg.g = PotentialSpec::Expr { v };
            }
            let s = &mut cfg.solver;
            s.h = a.h.unwrap_or(s.h);
            s.cfl = a.cfl.unwrap_or(s.cfl);
            s.dt = a.dt.or(s.dt);
            s.t_end = a.t_end.unwrap_or(s.t_end);
            s.diag_every = a.diag_every.unwrap_or(s.diag_every);
            for t in &a.track {
                let z = t
                    .split(',')
                    .map(|c| {
                        c.trim()
                            .parse::<f64>()
                            .map_err(|_| CliError::Config(format!("--track `{t}`: bad coordinate `{c}`")))
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                cfg.tracked_z.push(z);
            }
            let o = &mut cfg.outputs;
            o.diagnostics = a.diagnostics.map(cwd_path).or(o.diagnostics.take());
            o.outcome = a.outcome.map(cwd_path).or(o.outcome.take());
            o.state = a.state.map(cwd_path).or(o.state.take());
            (cfg, base, None)
        }
        Sub::Calabi(a) => {
            let (mut cfg, base) = base_config(&a.config, Command::Calabi)?;
            let c = &mut cfg.calabi;
            c.n = a.n.unwrap_or(c.n);
            c.a = a.a.unwrap_or(c.a.clone());
            c.b = a.b.unwrap_or(c.b.clone());
            c.grid = a.grid.unwrap_or(c.grid);
            c.every = a.every.or(c.every);
            c.scheme = a.scheme.unwrap_or(c.scheme);
            if a.config.is_none() && a.t_end.is_none() {
                cfg.solver.t_end = 50.0;
            }
            cfg.solver.t_end = a.t_end.unwrap_or(cfg.solver.t_end);
            let o = &mut cfg.outputs;
            o.csv = a.out.map(cwd_path).or(o.csv.take());
            o.summary = a.summary.map(cwd_path).or(o.summary.take());
            (cfg, base, None)
        }
        Sub::Report(a) => {
            let cfg = RunConfig::load(&a.config)?;
            let base = a.config.parent().map(Path::to_path_buf).unwrap_or_default();
            (cfg, base, Some(a.out.map(cwd_path).unwrap_or_default()))
        }
    };
    if cli.seed.is_some() {
        cfg.seed = cli.seed;
    }
    Ok((cfg, base, echo))
}

/// Print to stdout; a closed pipe is not an error.
fn emit(text: &str) -> Result<(), CliError> {
    match writeln!(std::io::stdout().lock(), "{text}") {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(CliError::Io(format!("stdout: {e}"))),
        _ => Ok(()),
    }
}

fn run(cli: Cli) -> Result<i32, CliError> {
    configure_threads()?;
    let (cfg, base, echo) = build(cli)?;
    if let Some(out) = echo {
        cfg.validate(cfg.command, &base)?;
        let text = cfg.to_json();
        if out.as_os_str().is_empty() {
            emit(&text)?;
        } else {
            std::fs::write(&out, text + "\n").map_err(|e| CliError::Io(format!("{}: {e}", out.display())))?;
        }
        return Ok(0);
    }
    let output = execute(&cfg, &base)?;
    emit(&serde_json::to_string_pretty(&output.json).expect("json"))?;
    Ok(output.code)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_ERROR as u8 } else { 0 });
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("jflow: {e}");
            ExitCode::from(if e.exit_code() == 0 { EXIT_ERROR } else { e.exit_code() } as u8)
        }
    }
}
