use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use toric_jflow::calabi::RadialScheme;
use toric_jflow::expr::CompiledExpr;
use toric_jflow::flow::FlowOptions;
use toric_jflow::polytope::{polytope_from_text, DelzantPolytope, STABILITY_TOL};
use toric_jflow::potential::{canonical_potential, Correction, SymplecticPotential};
use toric_jflow::rational::{parse_rational, to_f64, Rational};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Command {
    Stability,
    Flow,
    Calabi,
    Report,
}

/// `{"canonical": true}` or `{"v": "<expression in y1..yn>"}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged, deny_unknown_fields)]
pub enum PotentialSpec {
    Canonical { canonical: bool },
    Expr { v: String },
}

impl Default for PotentialSpec {
    fn default() -> Self {
        PotentialSpec::Canonical { canonical: true }
    }
}

impl PotentialSpec {
    pub fn build(&self, p: Arc<DelzantPolytope>) -> Result<SymplecticPotential, CliError> {
        match self {
            PotentialSpec::Canonical { canonical: true } => Ok(canonical_potential(p)),
            PotentialSpec::Canonical { canonical: false } => Err(CliError::Config(
                "potential: `canonical` must be true; give `v` for a correction".into(),
            )),
            PotentialSpec::Expr { v } => {
                let expr =
                    CompiledExpr::new(v, p.dim()).map_err(|e| CliError::Config(format!("potential `{v}`: {e}")))?;
                SymplecticPotential::new(p, Correction::Expr(expr))
                    .map_err(|e| CliError::Config(format!("potential `{v}`: {e}")))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalabiParams {
    pub n: usize,
    pub a: String,
    pub b: String,
    pub grid: usize,
    pub scheme: RadialScheme,
    /// Time between CSV snapshots; `t_end / 10` when absent.
    pub every: Option<f64>,
}

impl Default for CalabiParams {
    fn default() -> Self {
        CalabiParams {
            n: 2,
            a: "1.5".into(),
            b: "2".into(),
            grid: 2048,
            scheme: RadialScheme::SemiImplicit,
            every: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverParams {
    pub h: f64,
    pub cfl: f64,
    pub dt: Option<f64>,
    pub max_halvings: usize,
    pub t_end: f64,
    pub diag_every: f64,
}

impl Default for SolverParams {
    fn default() -> Self {
        let f = FlowOptions::default();
        SolverParams {
            h: 2.0 / 24.0,
            cfl: f.cfl,
            dt: None,
            max_halvings: f.max_halvings,
            t_end: 10.0,
            diag_every: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Tolerances {
    pub stability: f64,
    pub static_residual: f64,
    pub window_converged: usize,
    pub delta_converged: f64,
    pub delta_degenerate: f64,
    pub window_degenerate: usize,
}

impl Default for Tolerances {
    fn default() -> Self {
        let f = FlowOptions::default();
        Tolerances {
            stability: STABILITY_TOL,
            static_residual: f.tol_static,
            window_converged: f.window_converged,
            delta_converged: f.delta_converged,
            delta_degenerate: f.delta_degenerate,
            window_degenerate: f.window_degenerate,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Outputs {
    /// Stability report JSON.
    pub report: Option<PathBuf>,
    pub diagnostics: Option<PathBuf>,
    pub outcome: Option<PathBuf>,
    /// Final grid state JSON.
    pub state: Option<PathBuf>,
    /// Radial snapshot CSV.
    pub csv: Option<PathBuf>,
    pub summary: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub command: Command,
    #[serde(default)]
    pub p: Option<PathBuf>,
    #[serde(default)]
    pub q: Option<PathBuf>,
    #[serde(default)]
    pub u0: PotentialSpec,
    #[serde(default)]
    pub g: PotentialSpec,
    #[serde(default)]
    pub calabi: CalabiParams,
    #[serde(default)]
    pub solver: SolverParams,
    #[serde(default)]
    pub tracked_z: Vec<Vec<f64>>,
    #[serde(default)]
    pub tolerances: Tolerances,
    #[serde(default)]
    pub outputs: Outputs,
    /// Reserved; nothing is random.
    #[serde(default)]
    pub seed: Option<u64>,
}

impl RunConfig {
    pub fn new(command: Command) -> Self {
        RunConfig {
            command,
            p: None,
            q: None,
            u0: PotentialSpec::default(),
            g: PotentialSpec::default(),
            calabi: CalabiParams::default(),
            solver: SolverParams::default(),
            tracked_z: Vec::new(),
            tolerances: Tolerances::default(),
            outputs: Outputs::default(),
            seed: None,
        }
    }

    pub fn from_json(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| CliError::Config(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn flow_options(&self) -> FlowOptions {
        let t = &self.tolerances;
        FlowOptions {
            cfl: self.solver.cfl,
            dt: self.solver.dt,
            max_halvings: self.solver.max_halvings,
            tol_static: t.static_residual,
            window_converged: t.window_converged,
            delta_converged: t.delta_converged,
            delta_degenerate: t.delta_degenerate,
            window_degenerate: t.window_degenerate,
            tracked_z: self.tracked_z.clone(),
        }
    }

    /// Range and presence checks for the fields `command` reads.
    pub fn validate(&self, command: Command, base: &Path) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        let s = &self.solver;
        let t = &self.tolerances;
        if !(t.stability >= 0.0) {
            return bad(format!("tolerances.stability = {} must be non-negative", t.stability));
        }
        match command {
            Command::Stability | Command::Flow => {
                for (name, path) in [("p", &self.p), ("q", &self.q)] {
                    match path {
                        None => return bad(format!("missing polytope `{name}`")),
                        Some(path) if !resolve(base, path).is_file() => {
                            return bad(format!(
                                "polytope `{name}`: {} does not exist",
                                resolve(base, path).display()
                            ))
                        }
                        _ => {}
                    }
                }
            }
            _ => {}
        }
        match command {
            Command::Flow => {
                if !(s.h > 0.0 && s.h.is_finite()) {
                    return bad(format!("solver.h = {} must be positive", s.h));
                }
                if !(s.cfl > 0.0 && s.cfl <= 1.0) {
                    return bad(format!("solver.cfl = {} must lie in (0, 1]", s.cfl));
                }
                if let Some(dt) = s.dt {
                    if !(dt > 0.0 && dt.is_finite()) {
                        return bad(format!("solver.dt = {dt} must be positive"));
                    }
                }
                if !(s.t_end > 0.0 && s.t_end.is_finite()) {
                    return bad(format!("solver.t_end = {} must be positive", s.t_end));
                }
                if !(s.diag_every > 0.0 && s.diag_every.is_finite()) {
                    return bad(format!("solver.diag_every = {} must be positive", s.diag_every));
                }
                if !(t.static_residual > 0.0 && t.delta_converged > 0.0 && t.delta_degenerate > 0.0) {
                    return bad("flow tolerances must be positive".into());
                }
                if t.window_converged == 0 || t.window_degenerate == 0 {
                    return bad("diagnostic windows must be at least 1".into());
                }
            }
            Command::Calabi => {
                let c = &self.calabi;
                self.calabi_ab()?;
                if c.n < 2 {
                    return bad(format!("calabi.n = {} must be at least 2", c.n));
                }
                if c.grid < 3 {
                    return bad(format!("calabi.grid = {} must be at least 3", c.grid));
                }
                if !(s.t_end > 0.0 && s.t_end.is_finite()) {
                    return bad(format!("solver.t_end = {} must be positive", s.t_end));
                }
                if let Some(e) = c.every {
                    if !(e > 0.0 && e.is_finite()) {
                        return bad(format!("calabi.every = {e} must be positive"));
                    }
                }
            }
            _ => {}
        }
        Ok(())
    }

    /// Exact `(a, b)` of the radial example.
    pub fn calabi_ab(&self) -> Result<(Rational, Rational), CliError> {
        let parse = |name: &str, s: &str| {
            let r =
                parse_rational(s).ok_or_else(|| CliError::Config(format!("calabi.{name} = `{s}` is not a number")))?;
            if to_f64(&r) <= 1.0 {
                return Err(CliError::Config(format!("calabi.{name} = {s} must exceed 1")));
            }
            Ok(r)
        };
        Ok((parse("a", &self.calabi.a)?, parse("b", &self.calabi.b)?))
    }
}

/// Paths in a config are relative to the config file.
pub fn resolve(base: &Path, path: &Path) -> PathBuf {
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        base.join(path)
    }
}

pub fn read_polytope(path: &Path) -> Result<DelzantPolytope, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    polytope_from_text(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}
