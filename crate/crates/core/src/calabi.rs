//! Radially symmetric flow on the blow-up of ℙⁿ at a point.
//!
//! With `B = Σ yⁱ` and the ansatz `U(y) = f(B)·y/B` the flow reduces to
//!
//! ```text
//! f_t = (1/θ''(f)) · ∂_B τ,        τ = f' + (n−1) f / B = tr DU
//! ```
//!
//! on `[1, b]` with `f(1) = 1`, `f(b) = a`, where
//! `θ(B) = (B−1)log(B−1) + (a−B)log(a−B)` is the radial part of the target
//! potential. The spatial discretisation is conservative in `w = B^{n−1} f`,
//! which makes every profile `cB + C·B^{1−n}` an exact discrete steady state.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use num_traits::{One, Signed, Zero};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expr::CompiledExpr;
use crate::polytope::{blowup_polytope, PolytopeError};
use crate::potential::{Correction, RadialCorrection, SymplecticPotential};
use crate::rational::{int, to_f64, Rational};
use crate::transition::GeometryPair;

/// Tolerance of the `nc = n − 1` comparison in floating point.
pub const CASE2_TOL: f64 = 1e-12;
/// Rounding-level decrease tolerated between neighbouring nodes on a plateau.
const MONOTONE_SLACK: f64 = 1e-13;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CalabiError {
    #[error("invalid parameters: {0}")]
    InvalidParameters(String),
    #[error("no root of the squeeze equation in (1, b)")]
    NoRoot,
    #[error("profile lost monotonicity at t = {t}")]
    StepFailure { t: f64 },
    #[error(transparent)]
    Polytope(#[from] PolytopeError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum CaseTag {
    Case1,
    Case2,
    Case3,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CaseInfo {
    pub tag: CaseTag,
    pub nc: f64,
    pub lambda: Option<f64>,
    pub nc_prime: Option<f64>,
}

fn check_params(n: usize, a: f64, b: f64) -> Result<(), CalabiError> {
    if n < 2 {
        return Err(CalabiError::InvalidParameters(format!("n = {n} must be at least 2")));
    }
    if !(a > 1.0 && a.is_finite()) {
        return Err(CalabiError::InvalidParameters(format!("a = {a} must exceed 1")));
    }
    if !(b > 1.0 && b.is_finite()) {
        return Err(CalabiError::InvalidParameters(format!("b = {b} must exceed 1")));
    }
    Ok(())
}

/// `nc = n(a b^{n−1} − 1)/(bⁿ − 1)`.
pub fn nc_formula(n: usize, a: f64, b: f64) -> f64 {
    let n_f = n as f64;
    n_f * (a * b.powi(n as i32 - 1) - 1.0) / (b.powi(n as i32) - 1.0)
}

pub fn nc_formula_exact(n: usize, a: &Rational, b: &Rational) -> Rational {
    let bn1 = num_traits::pow(b.clone(), n - 1);
    let bn = &bn1 * b;
    int(n as i64) * (a * &bn1 - Rational::one()) / (bn - Rational::one())
}

pub fn classify(n: usize, a: f64, b: f64) -> Result<CaseInfo, CalabiError> {
    check_params(n, a, b)?;
    let nc = nc_formula(n, a, b);
    let gap = nc - (n as f64 - 1.0);
    let tag = if gap.abs() <= CASE2_TOL {
        CaseTag::Case2
    } else if gap > 0.0 {
        CaseTag::Case1
    } else {
        CaseTag::Case3
    };
    finish_case(n, a, b, nc, tag)
}

/// Classification with the threshold `nc = n − 1` decided in exact arithmetic.
pub fn classify_exact(n: usize, a: &Rational, b: &Rational) -> Result<CaseInfo, CalabiError> {
    check_params(n, to_f64(a), to_f64(b))?;
    let nc = nc_formula_exact(n, a, b);
    let gap = &nc - int(n as i64 - 1);
    let tag = if gap.is_zero() {
        CaseTag::Case2
    } else if gap.is_positive() {
        CaseTag::Case1
    } else {
        CaseTag::Case3
    };
    finish_case(n, to_f64(a), to_f64(b), to_f64(&nc), tag)
}

fn finish_case(n: usize, a: f64, b: f64, nc: f64, tag: CaseTag) -> Result<CaseInfo, CalabiError> {
    let (lambda, nc_prime) = if tag == CaseTag::Case3 {
        let l = solve_lambda(n, a, b)?;
        (Some(l), Some((n as f64 - 1.0) / l))
    } else {
        (None, None)
    };
    Ok(CaseInfo {
        tag,
        nc,
        lambda,
        nc_prime,
    })
}

/// `F(λ) = (n−1)b/λ + λ^{n−1}/b^{n−1} − na`, strictly decreasing on `(1, b)`.
pub fn squeeze_equation(n: usize, a: f64, b: f64, lambda: f64) -> f64 {
    let n_f = n as f64;
    (n_f - 1.0) * b / lambda + (lambda / b).powi(n as i32 - 1) - n_f * a
}

/// Root of the squeeze equation in `(1, b)`.
pub fn solve_lambda(n: usize, a: f64, b: f64) -> Result<f64, CalabiError> {
    check_params(n, a, b)?;
    let f = |l: f64| squeeze_equation(n, a, b, l);
    if f(1.0) <= 0.0 || f(b) >= 0.0 {
        return Err(CalabiError::NoRoot);
    }
    let (mut lo, mut hi) = (1.0, b);
    while hi - lo > 1e-15 * hi {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if f(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let l = 0.5 * (lo + hi);
    let n_f = n as f64;
    let via_volume = n_f * (a * b.powi(n as i32 - 1) - l.powi(n as i32 - 1)) / (b.powi(n as i32) - l.powi(n as i32));
    let via_lambda = (n_f - 1.0) / l;
    debug_assert!((via_volume - via_lambda).abs() < 1e-10);
    Ok(l)
}

/// Nodal radial profile on `[1, b]`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RadialProfile {
    pub n: usize,
    pub a: f64,
    pub b: f64,
    pub nodes: Vec<f64>,
    pub f: Vec<f64>,
}

pub fn uniform_nodes(b: f64, count: usize) -> Vec<f64> {
    let h = (b - 1.0) / (count - 1) as f64;
    let mut nodes: Vec<f64> = (0..count).map(|i| 1.0 + i as f64 * h).collect();
    nodes[count - 1] = b;
    nodes
}

impl RadialProfile {
    pub fn from_fn(n: usize, a: f64, b: f64, count: usize, f: impl Fn(f64) -> f64) -> Result<Self, CalabiError> {
        check_params(n, a, b)?;
        if count < 3 {
            return Err(CalabiError::InvalidParameters(format!(
                "grid of {count} nodes is too small"
            )));
        }
        let nodes = uniform_nodes(b, count);
        let mut vals: Vec<f64> = nodes.iter().map(|&x| f(x)).collect();
        vals[0] = 1.0;
        vals[count - 1] = a;
        Ok(RadialProfile {
            n,
            a,
            b,
            nodes,
            f: vals,
        })
    }

    /// `f₀(B) = 1 + (a−1)(B−1)/(b−1)`, the profile of the symmetric canonical pair.
    pub fn linear(n: usize, a: f64, b: f64, count: usize) -> Result<Self, CalabiError> {
        RadialProfile::from_fn(n, a, b, count, |x| 1.0 + (a - 1.0) * (x - 1.0) / (b - 1.0))
    }

    fn face_coefficients(&self) -> Vec<f64> {
        let n = self.n as i32;
        self.nodes
            .windows(2)
            .map(|w| self.n as f64 / (w[1].powi(n) - w[0].powi(n)))
            .collect()
    }

    /// `τ = f' + (n−1)f/B` at cell faces (midpoints), exact on `span{B, B^{1−n}}`.
    pub fn face_traces(&self) -> Vec<f64> {
        let p = self.n as i32 - 1;
        let alpha = self.face_coefficients();
        (0..self.nodes.len() - 1)
            .map(|i| alpha[i] * (self.nodes[i + 1].powi(p) * self.f[i + 1] - self.nodes[i].powi(p) * self.f[i]))
            .collect()
    }

    /// `tr DU` at the nodes.
    pub fn traces(&self) -> Vec<f64> {
        let faces = self.face_traces();
        let m = self.nodes.len();
        let mut out = vec![0.0; m];
        for i in 1..m - 1 {
            out[i] = 0.5 * (faces[i - 1] + faces[i]);
        }
        if m > 2 {
            out[0] = 1.5 * faces[0] - 0.5 * faces[1];
            out[m - 1] = 1.5 * faces[m - 2] - 0.5 * faces[m - 3];
        } else {
            out[0] = faces[0];
            out[1] = faces[0];
        }
        out
    }

    /// `f'` at the nodes.
    pub fn slopes(&self) -> Vec<f64> {
        let k = self.n as f64 - 1.0;
        self.traces()
            .iter()
            .zip(self.nodes.iter().zip(&self.f))
            .map(|(t, (&x, &fv))| t - k * fv / x)
            .collect()
    }

    /// `det DU = f'·(f/B)^{n−1}` at the nodes.
    pub fn dets(&self) -> Vec<f64> {
        let p = self.n as i32 - 1;
        self.slopes()
            .iter()
            .zip(self.nodes.iter().zip(&self.f))
            .map(|(s, (&x, &fv))| s * (fv / x).powi(p))
            .collect()
    }

    fn locate(&self, x: f64) -> (usize, f64) {
        let m = self.nodes.len();
        let h = (self.b - 1.0) / (m - 1) as f64;
        let i = (((x - 1.0) / h).floor().max(0.0) as usize).min(m - 2);
        let s = ((x - self.nodes[i]) / (self.nodes[i + 1] - self.nodes[i])).clamp(0.0, 1.0);
        (i, s)
    }

    /// Piecewise-linear interpolation of `f`.
    pub fn value(&self, x: f64) -> f64 {
        let (i, s) = self.locate(x);
        self.f[i] + s * (self.f[i + 1] - self.f[i])
    }

    /// `(f, f')` at an arbitrary `B`, interpolating the node traces.
    pub fn value_and_slope(&self, x: f64) -> (f64, f64) {
        let tr = self.traces();
        let (i, s) = self.locate(x);
        let fv = self.value(x);
        let t = tr[i] + s * (tr[i + 1] - tr[i]);
        (fv, t - (self.n as f64 - 1.0) * fv / x)
    }

    /// `sup |τ − c|` over the cell faces.
    pub fn static_residual(&self, c: f64) -> f64 {
        self.face_traces().iter().map(|t| (t - c).abs()).fold(0.0, f64::max)
    }

    /// `½ ∫_P (tr DU)² dy` for the embedded profile.
    pub fn energy(&self) -> f64 {
        let n = self.n as i32;
        let fact: f64 = (1..=self.n).map(|k| k as f64).product();
        let faces = self.face_traces();
        0.5 * faces
            .iter()
            .zip(self.nodes.windows(2))
            .map(|(t, w)| t * t * (w[1].powi(n) - w[0].powi(n)))
            .sum::<f64>()
            / fact
    }

    pub fn is_monotone(&self) -> bool {
        self.f.windows(2).all(|w| w[1] > w[0])
    }

    pub fn sup_diff(&self, other: &RadialProfile) -> f64 {
        self.f
            .iter()
            .zip(&other.f)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    /// Leftmost `B` at which the trace comes within `tol` of `c`, linearly
    /// interpolated between nodes.
    pub fn squeeze_point(&self, c: f64, tol: f64) -> Option<f64> {
        let tr = self.traces();
        let res: Vec<f64> = tr.iter().map(|t| (t - c).abs()).collect();
        let i = res.iter().position(|&r| r < tol)?;
        if i == 0 {
            return Some(self.nodes[0]);
        }
        let (r0, r1) = (res[i - 1], res[i]);
        let s = ((r0 - tol) / (r0 - r1)).clamp(0.0, 1.0);
        Some(self.nodes[i - 1] + s * (self.nodes[i] - self.nodes[i - 1]))
    }
}

/// Steady profile `f = cB + (1−c)B^{1−n}` with `c = (ab^{n−1}−1)/(bⁿ−1)`.
pub fn static_case1(n: usize, a: f64, b: f64, count: usize) -> Result<RadialProfile, CalabiError> {
    let info = classify(n, a, b)?;
    if info.tag != CaseTag::Case1 {
        return Err(CalabiError::InvalidParameters(format!(
            "({a}, {b}) is not in the convergent regime"
        )));
    }
    let c = info.nc / n as f64;
    let p = 1 - n as i32;
    let f = move |x: f64| c * x + (1.0 - c) * x.powi(p);
    debug_assert!((f(b) - a).abs() < 1e-12 * a);
    RadialProfile::from_fn(n, a, b, count, f)
}

/// The squeezed limit: `f ≡ 1` on `[1, λ]`, `f = (nc'/n)B + (λ^{n−1}/n)B^{1−n}` on `[λ, b]`.
pub fn limit_case3(n: usize, a: f64, b: f64, count: usize) -> Result<RadialProfile, CalabiError> {
    let info = classify(n, a, b)?;
    if info.tag != CaseTag::Case3 {
        return Err(CalabiError::InvalidParameters(format!(
            "({a}, {b}) is not in the squeezing regime"
        )));
    }
    let l = info.lambda.unwrap();
    let slope = info.nc_prime.unwrap() / n as f64;
    let k = l.powi(n as i32 - 1) / n as f64;
    let p = 1 - n as i32;
    let f = move |x: f64| if x <= l { 1.0 } else { slope * x + k * x.powi(p) };
    debug_assert!((f(b) - a).abs() < 1e-10);
    RadialProfile::from_fn(n, a, b, count, f)
}

/// `1/θ''(f) = (f−1)(a−f)/(a−1)`, clamped at zero outside `[1, a]`.
pub fn inverse_theta2(a: f64, f: f64) -> f64 {
    ((f - 1.0) * (a - f) / (a - 1.0)).max(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RadialScheme {
    /// Backward Euler with the coefficient `1/θ''` frozen over the step.
    SemiImplicit,
    /// Explicit midpoint rule under the parabolic step restriction.
    ExplicitRk2,
}

#[derive(Debug, Clone, Serialize)]
pub struct RadialOptions {
    pub t_end: f64,
    pub scheme: RadialScheme,
    pub dt_max: f64,
    pub dt_initial: f64,
    /// Largest nodal change accepted in one semi-implicit step.
    pub max_change: f64,
    /// Record a trace entry every this many time units.
    pub record_every: f64,
    /// Stop early once `sup|τ − nc|` drops below this.
    pub stop_residual: Option<f64>,
}

impl Default for RadialOptions {
    fn default() -> Self {
        RadialOptions {
            t_end: 50.0,
            scheme: RadialScheme::SemiImplicit,
            dt_max: 0.05,
            dt_initial: 1e-6,
            max_change: 2e-3,
            record_every: 0.1,
            stop_residual: None,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct RadialTrace {
    pub times: Vec<f64>,
    pub static_residual: Vec<f64>,
    pub energy: Vec<f64>,
    pub min_det: Vec<f64>,
    pub steps: usize,
}

impl RadialTrace {
    fn push(&mut self, t: f64, prof: &RadialProfile, nc: f64) {
        self.times.push(t);
        self.static_residual.push(prof.static_residual(nc));
        self.energy.push(prof.energy());
        self.min_det
            .push(prof.dets().iter().copied().fold(f64::INFINITY, f64::min));
    }
}

/// Right-hand side `(1/θ''(f))·∂_B τ` at interior nodes (zero at the ends).
fn radial_rhs(prof: &RadialProfile, alpha: &[f64], f: &[f64]) -> Vec<f64> {
    let m = f.len();
    let p = prof.n as i32 - 1;
    let h = prof.nodes[1] - prof.nodes[0];
    let faces: Vec<f64> = (0..m - 1)
        .map(|i| alpha[i] * (prof.nodes[i + 1].powi(p) * f[i + 1] - prof.nodes[i].powi(p) * f[i]))
        .collect();
    let mut out = vec![0.0; m];
    for i in 1..m - 1 {
        out[i] = inverse_theta2(prof.a, f[i]) * (faces[i] - faces[i - 1]) / h;
    }
    out
}

/// Thomas algorithm; `lower[0]` and `upper[m−1]` are ignored.
fn solve_tridiagonal(lower: &[f64], diag: &[f64], upper: &[f64], rhs: &[f64]) -> Vec<f64> {
    let m = diag.len();
    let mut c = vec![0.0; m];
    let mut d = vec![0.0; m];
    c[0] = upper[0] / diag[0];
    d[0] = rhs[0] / diag[0];
    for i in 1..m {
        let den = diag[i] - lower[i] * c[i - 1];
        c[i] = if i + 1 < m { upper[i] / den } else { 0.0 };
        d[i] = (rhs[i] - lower[i] * d[i - 1]) / den;
    }
    let mut x = vec![0.0; m];
    x[m - 1] = d[m - 1];
    for i in (0..m - 1).rev() {
        x[i] = d[i] - c[i] * x[i + 1];
    }
    x
}

fn semi_implicit_step(prof: &RadialProfile, alpha: &[f64], dt: f64) -> Vec<f64> {
    let m = prof.f.len();
    let p = prof.n as i32 - 1;
    let h = prof.nodes[1] - prof.nodes[0];
    let mut lower = vec![0.0; m];
    let mut diag = vec![1.0; m];
    let mut upper = vec![0.0; m];
    for i in 1..m - 1 {
        let k = dt * inverse_theta2(prof.a, prof.f[i]) / h;
        lower[i] = -k * alpha[i - 1] * prof.nodes[i - 1].powi(p);
        diag[i] = 1.0 + k * (alpha[i] + alpha[i - 1]) * prof.nodes[i].powi(p);
        upper[i] = -k * alpha[i] * prof.nodes[i + 1].powi(p);
    }
    solve_tridiagonal(&lower, &diag, &upper, &prof.f)
}

/// Evolve the radial profile to `opts.t_end` with Dirichlet ends.
pub fn radial_run(profile: &RadialProfile, opts: &RadialOptions) -> Result<(RadialProfile, RadialTrace), CalabiError> {
    radial_run_with(profile, opts, |_, _| {})
}

/// As [`radial_run`], calling `on_record(t, profile)` at every trace entry.
pub fn radial_run_with(
    profile: &RadialProfile,
    opts: &RadialOptions,
    mut on_record: impl FnMut(f64, &RadialProfile),
) -> Result<(RadialProfile, RadialTrace), CalabiError> {
    if !profile.is_monotone() {
        return Err(CalabiError::InvalidParameters(
            "initial profile is not increasing".into(),
        ));
    }
    let nc = nc_formula(profile.n, profile.a, profile.b);
    let alpha = profile.face_coefficients();
    let h = profile.nodes[1] - profile.nodes[0];
    let mut prof = profile.clone();
    let mut trace = RadialTrace::default();
    trace.push(0.0, &prof, nc);
    on_record(0.0, &prof);
    let mut t = 0.0;
    let mut next_record = opts.record_every;
    let mut dt = opts.dt_initial.min(opts.dt_max);
    let dmax = 0.25 * (profile.a - 1.0);
    let p = profile.n as i32 - 1;
    let geo = profile
        .nodes
        .iter()
        .enumerate()
        .skip(1)
        .take(profile.nodes.len() - 2)
        .map(|(i, x)| (alpha[i] + alpha[i - 1]) * x.powi(p))
        .fold(0.0, f64::max);
    while t < opts.t_end * (1.0 - 1e-14) {
        if let Some(tol) = opts.stop_residual {
            if prof.static_residual(nc) < tol {
                break;
            }
        }
        let remaining = opts.t_end - t;
        let stop_at = next_record.min(opts.t_end);
        let mut accepted = None;
        match opts.scheme {
            RadialScheme::ExplicitRk2 => {
                let dt_cfl = 0.2 * h / (dmax * geo);
                let step = dt_cfl.min(remaining).min((stop_at - t).max(1e-300));
                let k1 = radial_rhs(&prof, &alpha, &prof.f);
                let mid: Vec<f64> = prof.f.iter().zip(&k1).map(|(f, k)| f + 0.5 * step * k).collect();
                let k2 = radial_rhs(&prof, &alpha, &mid);
                let new: Vec<f64> = prof.f.iter().zip(&k2).map(|(f, k)| f + step * k).collect();
                accepted = Some((new, step));
            }
            RadialScheme::SemiImplicit => {
                for _ in 0..60 {
                    let step = dt.min(remaining).min((stop_at - t).max(1e-300));
                    let new = semi_implicit_step(&prof, &alpha, step);
                    let change = new.iter().zip(&prof.f).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
                    let monotone = new.windows(2).all(|w| w[1] >= w[0] - MONOTONE_SLACK);
                    if monotone && change <= opts.max_change {
                        if change < 0.5 * opts.max_change {
                            dt = (dt * 1.25).min(opts.dt_max);
                        }
                        accepted = Some((new, step));
                        break;
                    }
                    dt *= 0.5;
                }
            }
        }
        let Some((new, step)) = accepted else {
            return Err(CalabiError::StepFailure { t });
        };
        if !new.windows(2).all(|w| w[1] >= w[0] - MONOTONE_SLACK) {
            return Err(CalabiError::StepFailure { t });
        }
        prof.f = new;
        t += step;
        trace.steps += 1;
        if t >= next_record * (1.0 - 1e-12) || t >= opts.t_end * (1.0 - 1e-14) {
            trace.push(t, &prof, nc);
            on_record(t, &prof);
            while next_record <= t * (1.0 + 1e-12) {
                next_record += opts.record_every;
            }
        }
    }
    if trace.times.last() != Some(&t) {
        trace.push(t, &prof, nc);
        on_record(t, &prof);
    }
    Ok((prof, trace))
}

/// `U(y) = f(B)·y/B` and its Jacobian for the embedded profile.
pub fn embed_radial(profile: &RadialProfile, y: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let bsum = y.sum();
    let (f, fp) = profile.value_and_slope(bsum.clamp(1.0, profile.b));
    let n = y.len();
    let image = y * (f / bsum);
    let mut du = DMatrix::identity(n, n) * (f / bsum);
    for i in 0..n {
        for j in 0..n {
            du[(i, j)] += (fp - f / bsum) * y[i] / bsum;
        }
    }
    (image, du)
}

fn sum_expr(n: usize) -> String {
    (1..=n).map(|i| format!("y{i}")).collect::<Vec<_>>().join(" + ")
}

/// Correction `−B log B` turning the canonical potential into the symmetric one
/// with radial part equal to the canonical `(B−1)log(B−1) + (c−B)log(c−B)`.
pub fn symmetric_correction(n: usize) -> Correction {
    let s = sum_expr(n);
    Correction::Expr(CompiledExpr::new(&format!("-({s})*log({s})"), n).expect("well-formed"))
}

/// `P = blowup(b)` with `u = canonical − B log B`, `Q = blowup(a)` with `g` likewise.
/// The radial profile of this pair is the linear `f₀`.
pub fn symmetric_pair(n: usize, a: &Rational, b: &Rational) -> Result<GeometryPair, CalabiError> {
    let p = Arc::new(blowup_polytope(n, b.clone())?);
    let q = Arc::new(blowup_polytope(n, a.clone())?);
    let u = SymplecticPotential::new(p, symmetric_correction(n)).expect("dimension matches");
    let g = SymplecticPotential::new(q, symmetric_correction(n)).expect("dimension matches");
    Ok(GeometryPair::new(u, g).expect("blowups share normals"))
}

/// Source potential on `blowup(b)` whose transition to the symmetric target is
/// the embedding of `profile`: `v = φ(B)` with
/// `φ' = θ'(f) − log B − log(B−1) + log(b−B) − 1`.
pub fn radial_source_potential(profile: &RadialProfile) -> Result<SymplecticPotential, CalabiError> {
    let n = profile.n;
    let p = Arc::new(blowup_polytope(n, Rational::from_float(profile.b).expect("finite"))?);
    let prof = profile.clone();
    let (a, b) = (profile.a, profile.b);
    let phi = move |x: f64| {
        let (f, fp) = prof.value_and_slope(x);
        let d1 = ((f - 1.0) / (a - f)).ln() - x.ln() - (x - 1.0).ln() + (b - x).ln() - 1.0;
        let d2 = fp / inverse_theta2(a, f) - 1.0 / x - 1.0 / (x - 1.0) - 1.0 / (b - x);
        [0.0, d1, d2]
    };
    let corr = Correction::Radial(RadialCorrection::new("profile", phi));
    Ok(SymplecticPotential::new(p, corr).expect("dimension matches"))
}
