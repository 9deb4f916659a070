//! Batch front-end: stability checks, grid J-flow runs and the radial Calabi
//! example, with JSON reports and CSV series.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::Serialize;
use thiserror::Error;
use toric_jflow::calabi::{classify_exact, radial_run_with, CaseTag, RadialOptions, RadialProfile};
use toric_jflow::flow::{init_flow, DiagRow, FlowError, Outcome, OutcomeTag};
use toric_jflow::polytope::{check_face_stability, Verdict};
use toric_jflow::rational::to_f64;
use toric_jflow::transition::GeometryPair;

pub mod config;

use config::{read_polytope, resolve};
pub use config::{Command, PotentialSpec, RunConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_ERROR: i32 = 1;
pub const EXIT_VIOLATED: i32 = 2;
pub const EXIT_MARGINAL: i32 = 3;
pub const EXIT_DEGENERATING: i32 = 4;
pub const EXIT_UNDECIDED: i32 = 5;
pub const EXIT_STEP_FAILURE: i32 = 6;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Io(String),
    #[error("{0}")]
    Run(String),
    #[error("step failure: {0}")]
    StepFailure(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::StepFailure(_) => EXIT_STEP_FAILURE,
            _ => EXIT_ERROR,
        }
    }
}

/// Fixed 17-significant-digit rendering used in every CSV.
pub fn fmt_num(x: f64) -> String {
    format!("{x:.16e}")
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| io_err(path, e))?;
    std::fs::write(path, text + "\n").map_err(|e| io_err(path, e))
}

fn csv_writer(path: &Path, header: &[&str]) -> Result<csv::Writer<std::fs::File>, CliError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| io_err(path, e))?;
    w.write_record(header).map_err(|e| io_err(path, e))?;
    Ok(w)
}

fn write_row<W: Write>(w: &mut csv::Writer<W>, path: &Path, values: &[f64]) -> Result<(), CliError> {
    w.write_record(values.iter().map(|&x| fmt_num(x)))
        .map_err(|e| io_err(path, e))
}

/// Result of one command: the process exit code and the JSON echoed to stdout.
pub struct CommandOutput {
    pub code: i32,
    pub json: serde_json::Value,
}

pub fn execute(config: &RunConfig, base: &Path) -> Result<CommandOutput, CliError> {
    config.validate(config.command, base)?;
    match config.command {
        Command::Stability => cmd_stability(config, base),
        Command::Flow => cmd_flow(config, base),
        Command::Calabi => cmd_calabi(config, base),
        Command::Report => Ok(CommandOutput {
            code: EXIT_OK,
            json: serde_json::to_value(config).expect("config serializes"),
        }),
    }
}

fn out_path(base: &Path, p: &Option<PathBuf>) -> Option<PathBuf> {
    p.as_ref().map(|p| resolve(base, p))
}

pub fn cmd_stability(config: &RunConfig, base: &Path) -> Result<CommandOutput, CliError> {
    let p = read_polytope(&resolve(base, config.p.as_ref().expect("validated")))?;
    let q = read_polytope(&resolve(base, config.q.as_ref().expect("validated")))?;
    let report = check_face_stability(&p, &q, config.tolerances.stability)
        .map_err(|e| CliError::Config(format!("P, Q: {e}")))?;
    let code = if report.any(Verdict::Violated) {
        EXIT_VIOLATED
    } else if report.any(Verdict::Marginal) {
        EXIT_MARGINAL
    } else {
        EXIT_OK
    };
    if let Some(path) = out_path(base, &config.outputs.report) {
        write_json(&path, &report)?;
    }
    Ok(CommandOutput {
        code,
        json: serde_json::to_value(&report).expect("report serializes"),
    })
}

#[derive(Serialize)]
struct OutcomeRecord<'a> {
    outcome: &'a Outcome,
    steps: usize,
    diagnostics: usize,
    nc: f64,
}

#[derive(Serialize)]
struct NodeState {
    index: Vec<usize>,
    y: Vec<f64>,
    v: f64,
    #[serde(rename = "U")]
    image: Vec<f64>,
    trace: f64,
    det: f64,
}

#[derive(Serialize)]
struct FinalState {
    t: f64,
    h: f64,
    origin: Vec<f64>,
    shape: Vec<usize>,
    nc: f64,
    nodes: Vec<NodeState>,
}

pub fn cmd_flow(config: &RunConfig, base: &Path) -> Result<CommandOutput, CliError> {
    let p = Arc::new(read_polytope(&resolve(base, config.p.as_ref().expect("validated")))?);
    let q = Arc::new(read_polytope(&resolve(base, config.q.as_ref().expect("validated")))?);
    let u0 = config.u0.build(p)?;
    let g = config.g.build(q)?;
    let pair = GeometryPair::new(u0, g).map_err(|e| CliError::Config(e.to_string()))?;
    for z in &config.tracked_z {
        if z.len() != pair.q().dim() {
            return Err(CliError::Config(format!(
                "tracked_z entry {z:?} has the wrong dimension"
            )));
        }
    }
    let mut state = init_flow(&pair, config.solver.h, config.flow_options()).map_err(|e| match e {
        FlowError::InvalidGrid(_) | FlowError::NotConvex { .. } => CliError::Config(e.to_string()),
        e => CliError::Run(e.to_string()),
    })?;
    let result = state.run(config.solver.t_end, config.solver.diag_every);
    let rows = match &result {
        Ok(rep) => &rep.trace.rows,
        Err(f) => &f.trace.rows,
    };
    if let Some(path) = out_path(base, &config.outputs.diagnostics) {
        let mut w = csv_writer(&path, &DiagRow::COLUMNS)?;
        for r in rows {
            write_row(&mut w, &path, &r.values())?;
        }
        w.flush().map_err(|e| io_err(&path, e))?;
    }
    let report = match result {
        Ok(rep) => rep,
        Err(f) => {
            return Err(match f.error {
                FlowError::StepFailure { .. } => CliError::StepFailure(f.error.to_string()),
                e => CliError::Run(e.to_string()),
            })
        }
    };
    let record = OutcomeRecord {
        outcome: &report.outcome,
        steps: report.trace.steps,
        diagnostics: report.trace.rows.len(),
        nc: state.nc,
    };
    if let Some(path) = out_path(base, &config.outputs.outcome) {
        write_json(&path, &record)?;
    }
    if let Some(path) = out_path(base, &config.outputs.state) {
        let cores = state.evaluate(&state.v).map_err(|e| CliError::Run(e.to_string()))?;
        let grid = state.grid();
        let nodes = state
            .nodes()
            .iter()
            .zip(&cores)
            .zip(&state.v)
            .map(|((nd, c), &v)| NodeState {
                index: nd.index.clone(),
                y: nd.y.iter().copied().collect(),
                v,
                image: c.image.iter().copied().collect(),
                trace: c.trace(),
                det: c.det(),
            })
            .collect();
        let fs = FinalState {
            t: state.t,
            h: grid.h,
            origin: grid.origin.iter().copied().collect(),
            shape: grid.shape.clone(),
            nc: state.nc,
            nodes,
        };
        write_json(&path, &fs)?;
    }
    let code = match report.outcome.tag {
        OutcomeTag::Converged => EXIT_OK,
        OutcomeTag::Degenerating => EXIT_DEGENERATING,
        OutcomeTag::Undecided => EXIT_UNDECIDED,
    };
    Ok(CommandOutput {
        code,
        json: serde_json::to_value(&record).expect("outcome serializes"),
    })
}

#[derive(Debug, Serialize)]
pub struct CalabiSummary {
    pub case: CaseTag,
    pub nc: f64,
    pub nc_exact: String,
    pub lambda: Option<f64>,
    pub nc_prime: Option<f64>,
    pub squeeze_point: Option<f64>,
    pub t_end: f64,
    pub static_residual: f64,
    pub min_det: f64,
    pub steps: usize,
}

/// Trace must come this close to `nc′` for the squeeze point.
const SQUEEZE_TOL: f64 = 1e-2;

pub fn cmd_calabi(config: &RunConfig, base: &Path) -> Result<CommandOutput, CliError> {
    let c = &config.calabi;
    let (a, b) = config.calabi_ab()?;
    let info = classify_exact(c.n, &a, &b).map_err(|e| CliError::Config(e.to_string()))?;
    let (af, bf) = (to_f64(&a), to_f64(&b));
    let init = RadialProfile::linear(c.n, af, bf, c.grid).map_err(|e| CliError::Config(e.to_string()))?;
    let t_end = config.solver.t_end;
    let opts = RadialOptions {
        t_end,
        scheme: c.scheme,
        record_every: c.every.unwrap_or(t_end / 10.0),
        ..Default::default()
    };
    let csv_path = out_path(base, &config.outputs.csv);
    let mut writer = match &csv_path {
        Some(path) => Some(csv_writer(path, &["t", "B", "f", "trace", "det"])?),
        None => None,
    };
    let mut write_failure = None;
    let (fin, trace) = radial_run_with(&init, &opts, |t, prof| {
        let (Some(w), Some(path)) = (writer.as_mut(), csv_path.as_ref()) else {
            return;
        };
        if write_failure.is_some() {
            return;
        }
        let (tr, det) = (prof.traces(), prof.dets());
        for i in 0..prof.nodes.len() {
            if let Err(e) = write_row(w, path, &[t, prof.nodes[i], prof.f[i], tr[i], det[i]]) {
                write_failure = Some(e);
                return;
            }
        }
    })
    .map_err(|e| CliError::Run(e.to_string()))?;
    if let Some(e) = write_failure {
        return Err(e);
    }
    if let (Some(mut w), Some(path)) = (writer, csv_path.as_ref()) {
        w.flush().map_err(|e| io_err(path, e))?;
    }
    let squeeze_point = info.nc_prime.and_then(|ncp| fin.squeeze_point(ncp, SQUEEZE_TOL));
    let summary = CalabiSummary {
        case: info.tag,
        nc: info.nc,
        nc_exact: toric_jflow::rational::format_rational(&toric_jflow::calabi::nc_formula_exact(c.n, &a, &b)),
        lambda: info.lambda,
        nc_prime: info.nc_prime,
        squeeze_point,
        t_end: *trace.times.last().unwrap_or(&0.0),
        static_residual: *trace.static_residual.last().unwrap_or(&f64::NAN),
        min_det: *trace.min_det.last().unwrap_or(&f64::NAN),
        steps: trace.steps,
    };
    if let Some(path) = out_path(base, &config.outputs.summary) {
        write_json(&path, &summary)?;
    }
    Ok(CommandOutput {
        code: EXIT_OK,
        json: serde_json::to_value(&summary).expect("summary serializes"),
    })
}

/// Size the global rayon pool from `JFLOW_THREADS` when set.
pub fn configure_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var("JFLOW_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Config(format!("JFLOW_THREADS = `{raw}` must be a positive integer")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Config(format!("JFLOW_THREADS: {e}")))
}
