//! The J-flow `∂u/∂t = tr DU − nc` evolved through the smooth part `v` of
//! `u = u_G + v` on the cell-centred nodes of a regular grid clipped to `P`.
//!
//! Derivatives of `v` come from fixed linear stencils: central differences
//! where the full neighbourhood is present, otherwise a least-squares cubic
//! fit over a small window of nodes inside `P̄`. The singular part `u_G` is
//! always handled in closed form by the transition module, so nodes lying on
//! faces are evaluated through the vertex-chart formulas.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::polytope::{compute_nc, DelzantPolytope, PolytopeError};
use crate::potential::{chart_jet, hess_with, inverse_hess_extended, Jet, PotentialError, SymplecticPotential};
use crate::quadrature::{grid_cells, Grid};
use crate::transition::{
    complete_sample, inverse_point_with, transition_core, GeometryPair, TransitionCore, TransitionError,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FlowError {
    #[error(transparent)]
    Transition(#[from] TransitionError),
    #[error(transparent)]
    Polytope(#[from] PolytopeError),
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("potential is not convex at node {node} ({y:?})")]
    NotConvex { node: usize, y: Vec<f64> },
    #[error("step failed at t = {t} after {halvings} halvings of dt")]
    StepFailure { t: f64, halvings: usize },
    #[error("parabolic residual needs two snapshots")]
    InsufficientHistory,
    #[error("point {0:?} is not covered by the grid")]
    OutsideGrid(Vec<f64>),
}

#[derive(Debug, Clone, Serialize)]
pub struct FlowOptions {
    pub cfl: f64,
    /// Fixed time step overriding the CFL rule.
    pub dt: Option<f64>,
    pub max_halvings: usize,
    pub tol_static: f64,
    pub window_converged: usize,
    pub delta_converged: f64,
    pub delta_degenerate: f64,
    pub window_degenerate: usize,
    /// Points of `Q°` whose preimages are tracked.
    pub tracked_z: Vec<Vec<f64>>,
}

impl Default for FlowOptions {
    fn default() -> Self {
        FlowOptions {
            cfl: 0.2,
            dt: None,
            max_halvings: 10,
            tol_static: 1e-4,
            window_converged: 50,
            delta_converged: 1e-3,
            delta_degenerate: 1e-3,
            window_degenerate: 100,
            tracked_z: Vec::new(),
        }
    }
}

/// A static residual this small means the state is already a fixed point.
const STATIONARY: f64 = 1e-10;

#[derive(Debug, Clone)]
pub struct Node {
    pub index: Vec<usize>,
    pub y: DVector<f64>,
    /// Quadrature weight: clipped cell volume plus any orphaned cells.
    pub weight: f64,
}

/// Linear map from nodal values of `v` to `(∇v, Hess v)` at one node.
#[derive(Debug, Clone)]
struct Stencil {
    /// `(node, slot, weight)`; slots `0..n` are the gradient, the rest the
    /// upper-triangular Hessian in row-major order.
    entries: Vec<(usize, usize, f64)>,
    central: bool,
}

fn jet_width(n: usize) -> usize {
    n + n * (n + 1) / 2
}

impl Stencil {
    /// From per-neighbour weight blocks of width [`jet_width`].
    fn new(n: usize, nodes: &[usize], weights: &[f64], central: bool) -> Stencil {
        let m = jet_width(n);
        let mut entries: Vec<(usize, usize, f64)> = Vec::new();
        for (k, &node) in nodes.iter().enumerate() {
            for slot in 0..m {
                let w = weights[k * m + slot];
                if w != 0.0 {
                    entries.push((node, slot, w));
                }
            }
        }
        entries.sort_by_key(|&(node, slot, _)| (slot, node));
        let mut merged: Vec<(usize, usize, f64)> = Vec::with_capacity(entries.len());
        for e in entries {
            match merged.last_mut() {
                Some(last) if last.0 == e.0 && last.1 == e.1 => last.2 += e.2,
                _ => merged.push(e),
            }
        }
        merged.retain(|e| e.2 != 0.0);
        Stencil {
            entries: merged,
            central,
        }
    }

    fn apply(&self, n: usize, v: &[f64]) -> Jet {
        let mut acc = vec![0.0; jet_width(n)];
        for &(node, slot, w) in &self.entries {
            acc[slot] += w * v[node];
        }
        let grad = DVector::from_column_slice(&acc[..n]);
        let mut hess = DMatrix::zeros(n, n);
        let mut idx = n;
        for i in 0..n {
            for j in i..n {
                hess[(i, j)] = acc[idx];
                hess[(j, i)] = acc[idx];
                idx += 1;
            }
        }
        Jet { grad, hess }
    }

    fn gradient(&self, n: usize, v: &[f64]) -> DVector<f64> {
        let mut grad = DVector::zeros(n);
        for &(node, slot, w) in &self.entries {
            if slot < n {
                grad[slot] += w * v[node];
            }
        }
        grad
    }
}

/// One row of the diagnostics time series.
#[derive(Debug, Clone, Serialize)]
pub struct DiagRow {
    pub t: f64,
    pub dt: f64,
    pub energy: f64,
    /// `∫ g^{kl}(U) ∂_k trDU ∂_l trDU dy`, the predicted `−dE/dt`.
    pub dissipation: f64,
    pub max_trace: f64,
    pub min_trace: f64,
    pub min_det: f64,
    pub max_det: f64,
    pub max_compat: f64,
    pub max_partial: f64,
    pub parabolic_residual: f64,
    pub tracked_min_distance: f64,
    pub static_residual: f64,
    pub vertex_error: f64,
    pub max_boundary_hess_v: f64,
}

impl DiagRow {
    pub const COLUMNS: [&'static str; 15] = [
        "t",
        "dt",
        "energy",
        "dissipation",
        "max_trace",
        "min_trace",
        "min_det",
        "max_det",
        "max_compat",
        "max_partial",
        "parabolic_residual",
        "tracked_min_distance",
        "static_residual",
        "vertex_error",
        "max_boundary_hess_v",
    ];

    pub fn values(&self) -> [f64; 15] {
        [
            self.t,
            self.dt,
            self.energy,
            self.dissipation,
            self.max_trace,
            self.min_trace,
            self.min_det,
            self.max_det,
            self.max_compat,
            self.max_partial,
            self.parabolic_residual,
            self.tracked_min_distance,
            self.static_residual,
            self.vertex_error,
            self.max_boundary_hess_v,
        ]
    }
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct DiagnosticsTrace {
    pub rows: Vec<DiagRow>,
    pub steps: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum OutcomeTag {
    Converged,
    Degenerating,
    Undecided,
}

#[derive(Debug, Clone, Serialize)]
pub struct Outcome {
    pub tag: OutcomeTag,
    pub t: f64,
    pub static_residual: f64,
    pub min_det: f64,
    /// Nodes with `det DU < δ_deg` at the final snapshot.
    pub degenerate_nodes: Vec<usize>,
    /// Range of `Σ yⁱ` over the degenerate nodes.
    pub degenerate_sum_range: Option<(f64, f64)>,
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub trace: DiagnosticsTrace,
    pub outcome: Outcome,
}

/// A failed run together with the diagnostics gathered before the failure.
#[derive(Debug, Clone, Error)]
#[error("{error}")]
pub struct RunFailure {
    pub error: FlowError,
    pub trace: DiagnosticsTrace,
}

/// `U`-field at one instant, kept for the parabolic residual.
#[derive(Debug, Clone)]
pub struct Snapshot {
    pub t: f64,
    pub images: Vec<DVector<f64>>,
}

/// Last known image at a node with the data for a first-order prediction.
#[derive(Debug, Clone)]
struct Warm {
    image: DVector<f64>,
    grad_v: DVector<f64>,
    g_inv: DMatrix<f64>,
}

#[derive(Debug, Clone)]
pub struct GridFlowState {
    p: Arc<DelzantPolytope>,
    h_switch: f64,
    target: SymplecticPotential,
    grid: Grid,
    nodes: Vec<Node>,
    node_at: Vec<Option<usize>>,
    stencils: Vec<Stencil>,
    full_neighbourhood: Vec<bool>,
    pub v: Vec<f64>,
    pub t: f64,
    pub dt: f64,
    pub nc: f64,
    warm: Vec<Option<Warm>>,
    pub options: FlowOptions,
}

fn monomials(n: usize, degree: usize) -> Vec<Vec<usize>> {
    let mut out = vec![vec![0; n]];
    for d in 1..=degree {
        let mut level = Vec::new();
        fn rec(n: usize, left: usize, pos: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
            if pos == n - 1 {
                cur[pos] = left;
                out.push(cur.clone());
                return;
            }
            for k in (0..=left).rev() {
                cur[pos] = k;
                rec(n, left - k, pos + 1, cur, out);
            }
        }
        rec(n, d, 0, &mut vec![0; n], &mut level);
        out.extend(level);
    }
    out
}

impl GridFlowState {
    pub fn polytope(&self) -> &DelzantPolytope {
        &self.p
    }

    pub fn target(&self) -> &SymplecticPotential {
        &self.target
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn dim(&self) -> usize {
        self.p.dim()
    }

    /// Number of nodes using the least-squares boundary stencil.
    pub fn boundary_stencil_count(&self) -> usize {
        self.stencils.iter().filter(|s| !s.central).count()
    }

    fn neighbour(&self, index: &[usize], offset: &[i64]) -> Option<usize> {
        let mut idx = Vec::with_capacity(index.len());
        for (k, (&i, &o)) in index.iter().zip(offset).enumerate() {
            let j = i as i64 + o;
            if j < 0 || j >= self.grid.shape[k] as i64 {
                return None;
            }
            idx.push(j as usize);
        }
        self.node_at[self.grid.ravel(&idx)]
    }

    fn central_stencil(&self, node: usize) -> Option<Stencil> {
        let n = self.dim();
        let h = self.grid.h;
        let m = jet_width(n);
        let index = &self.nodes[node].index;
        let mut nodes = vec![node];
        let mut weights = vec![0.0; m];
        let hpos = |i: usize, j: usize| -> usize {
            // position of (i, j), i ≤ j, in the upper-triangular block
            n + i * n - i * (i + 1) / 2 + j
        };
        for k in 0..n {
            weights[hpos(k, k)] += -2.0 / (h * h);
        }
        for k in 0..n {
            for sign in [-1i64, 1] {
                let mut off = vec![0i64; n];
                off[k] = sign;
                let nb = self.neighbour(index, &off)?;
                let mut w = vec![0.0; m];
                w[k] = sign as f64 / (2.0 * h);
                w[hpos(k, k)] = 1.0 / (h * h);
                nodes.push(nb);
                weights.extend(w);
            }
        }
        let mut full = true;
        for k in 0..n {
            for l in k + 1..n {
                let corner = |sk: i64, sl: i64| {
                    let mut off = vec![0i64; n];
                    off[k] = sk;
                    off[l] = sl;
                    self.neighbour(index, &off)
                };
                let (pp, mm, pm, mp) = (corner(1, 1), corner(-1, -1), corner(1, -1), corner(-1, 1));
                let push = |nb: usize, c: f64, nodes: &mut Vec<usize>, weights: &mut Vec<f64>| {
                    let mut w = vec![0.0; m];
                    w[hpos(k, l)] = c / (h * h);
                    nodes.push(nb);
                    weights.extend(w);
                };
                match (pp, mm, pm, mp) {
                    (Some(pp), Some(mm), Some(pm), Some(mp)) => {
                        for (nb, c) in [(pp, 0.25), (mm, 0.25), (pm, -0.25), (mp, -0.25)] {
                            push(nb, c, &mut nodes, &mut weights);
                        }
                    }
                    // seven-point forms using only one diagonal
                    (Some(a), Some(b), _, _) | (_, _, Some(a), Some(b)) => {
                        full = false;
                        let sign = if pp.is_some() && mm.is_some() { 1.0 } else { -1.0 };
                        push(a, 0.5 * sign, &mut nodes, &mut weights);
                        push(b, 0.5 * sign, &mut nodes, &mut weights);
                        push(node, sign, &mut nodes, &mut weights);
                        for (axis, s) in [(k, 1i64), (k, -1), (l, 1), (l, -1)] {
                            let mut off = vec![0i64; n];
                            off[axis] = s;
                            let nb = self.neighbour(index, &off)?;
                            push(nb, -0.5 * sign, &mut nodes, &mut weights);
                        }
                    }
                    _ => return None,
                }
            }
        }
        Some(Stencil::new(n, &nodes, &weights, full))
    }

    fn fitted_stencil(&self, node: usize, degrees: &[usize], radii: std::ops::RangeInclusive<i64>) -> Option<Stencil> {
        let n = self.dim();
        let h = self.grid.h;
        let m = jet_width(n);
        let index = self.nodes[node].index.clone();
        for &degree in degrees {
            let monos = monomials(n, degree);
            for radius in radii.clone() {
                let width = (2 * radius + 1) as usize;
                let mut window = Vec::new();
                for flat in 0..width.pow(n as u32) {
                    let mut rest = flat;
                    let mut off = vec![0i64; n];
                    for o in off.iter_mut() {
                        *o = (rest % width) as i64 - radius;
                        rest /= width;
                    }
                    if let Some(nb) = self.neighbour(&index, &off) {
                        window.push((nb, off));
                    }
                }
                if window.len() < monos.len() {
                    continue;
                }
                let a = DMatrix::from_fn(window.len(), monos.len(), |r, c| {
                    monos[c]
                        .iter()
                        .zip(&window[r].1)
                        .map(|(&e, &o)| (o as f64).powi(e as i32))
                        .product::<f64>()
                });
                let svd = a.svd(true, true);
                let smax = svd.singular_values.max();
                let smin = svd.singular_values.min();
                if smin <= 1e-9 * smax {
                    continue;
                }
                let pinv = svd.pseudo_inverse(1e-12 * smax).ok()?;
                let find = |exp: &[usize]| monos.iter().position(|mono| mono.as_slice() == exp).unwrap();
                let mut weights = vec![0.0; window.len() * m];
                for k in 0..n {
                    let mut e = vec![0; n];
                    e[k] = 1;
                    let row = find(&e);
                    for r in 0..window.len() {
                        weights[r * m + k] = pinv[(row, r)] / h;
                    }
                }
                let mut pos = n;
                for i in 0..n {
                    for j in i..n {
                        let mut e = vec![0; n];
                        e[i] += 1;
                        e[j] += 1;
                        let row = find(&e);
                        let scale = if i == j { 2.0 } else { 1.0 } / (h * h);
                        for r in 0..window.len() {
                            weights[r * m + pos] = scale * pinv[(row, r)];
                        }
                        pos += 1;
                    }
                }
                let nodes: Vec<usize> = window.into_iter().map(|(nb, _)| nb).collect();
                return Some(Stencil::new(n, &nodes, &weights, false));
            }
        }
        None
    }

    /// Axis-by-axis differences, one-sided along axes where the node lacks a neighbour.
    fn axis_stencil(&self, node: usize) -> Option<Stencil> {
        let n = self.dim();
        let h = self.grid.h;
        let m = jet_width(n);
        let index = &self.nodes[node].index;
        let unit = |pairs: &[(usize, i64)]| {
            let mut off = vec![0i64; n];
            for &(k, s) in pairs {
                off[k] += s;
            }
            self.neighbour(index, &off)
        };
        // `None` = central, `Some(s)` = one-sided towards `s`
        let mut side = Vec::with_capacity(n);
        for k in 0..n {
            let (p, q) = (unit(&[(k, 1)]), unit(&[(k, -1)]));
            if p.is_some() && q.is_some() {
                side.push(None);
            } else {
                let s = if p.is_some() { 1 } else { -1 };
                unit(&[(k, 2 * s)])?;
                side.push(Some(s));
            }
        }
        let hpos = |i: usize, j: usize| n + i * n - i * (i + 1) / 2 + j;
        let mut nodes = Vec::new();
        let mut weights = Vec::new();
        let mut add = |nb: usize, slot: usize, c: f64| {
            let mut w = vec![0.0; m];
            w[slot] = c;
            nodes.push(nb);
            weights.extend(w);
        };
        for k in 0..n {
            match side[k] {
                None => {
                    let (p, q) = (unit(&[(k, 1)])?, unit(&[(k, -1)])?);
                    add(p, k, 0.5 / h);
                    add(q, k, -0.5 / h);
                    add(p, hpos(k, k), 1.0 / (h * h));
                    add(q, hpos(k, k), 1.0 / (h * h));
                    add(node, hpos(k, k), -2.0 / (h * h));
                }
                Some(s) => {
                    let (p1, p2) = (unit(&[(k, s)])?, unit(&[(k, 2 * s)])?);
                    let sf = s as f64;
                    add(node, k, -1.5 * sf / h);
                    add(p1, k, 2.0 * sf / h);
                    add(p2, k, -0.5 * sf / h);
                    add(node, hpos(k, k), 1.0 / (h * h));
                    add(p1, hpos(k, k), -2.0 / (h * h));
                    add(p2, hpos(k, k), 1.0 / (h * h));
                }
            }
            for l in k + 1..n {
                let slot = hpos(k, l);
                match (side[k], side[l]) {
                    (None, None) => {
                        let corners = [(1i64, 1i64), (-1, -1), (1, -1), (-1, 1)].map(|(a, b)| unit(&[(k, a), (l, b)]));
                        match corners {
                            [Some(pp), Some(mm), Some(pm), Some(mp)] => {
                                for (nb, c) in [(pp, 0.25), (mm, 0.25), (pm, -0.25), (mp, -0.25)] {
                                    add(nb, slot, c / (h * h));
                                }
                            }
                            [Some(a), Some(b), _, _] | [_, _, Some(a), Some(b)] => {
                                let sign = if corners[0].is_some() && corners[1].is_some() {
                                    1.0
                                } else {
                                    -1.0
                                };
                                add(a, slot, 0.5 * sign / (h * h));
                                add(b, slot, 0.5 * sign / (h * h));
                                add(node, slot, sign / (h * h));
                                for (axis, s) in [(k, 1i64), (k, -1), (l, 1), (l, -1)] {
                                    add(unit(&[(axis, s)])?, slot, -0.5 * sign / (h * h));
                                }
                            }
                            _ => return None,
                        }
                    }
                    (Some(s), None) | (None, Some(s)) => {
                        // one-sided difference of the central derivative along the other axis
                        let (one, cen) = if side[k].is_some() { (k, l) } else { (l, k) };
                        let sf = s as f64;
                        for (t, c) in [(1i64, 1.0), (-1, -1.0)] {
                            add(unit(&[(one, s), (cen, t)])?, slot, sf * c * 0.5 / (h * h));
                            add(unit(&[(cen, t)])?, slot, -sf * c * 0.5 / (h * h));
                        }
                    }
                    (Some(sk), Some(sl)) => {
                        let c = (sk * sl) as f64 / (h * h);
                        add(node, slot, c);
                        add(unit(&[(k, sk)])?, slot, -c);
                        add(unit(&[(l, sl)])?, slot, -c);
                        add(unit(&[(k, sk), (l, sl)])?, slot, c);
                    }
                }
            }
        }
        Some(Stencil::new(n, &nodes, &weights, false))
    }

    /// `(∇v, Hess v)` at every node.
    pub fn node_jets(&self, v: &[f64]) -> Vec<Jet> {
        let n = self.dim();
        self.stencils.iter().map(|s| s.apply(n, v)).collect()
    }

    fn eval_node(&self, i: usize, v: &[f64], warm: Option<&Warm>) -> Result<TransitionCore, FlowError> {
        let jet = self.stencils[i].apply(self.dim(), v);
        // U moves by G⁻¹ δ(∇v) to first order
        let start = warm.map(|w| {
            let guess = &w.image + &w.g_inv * (&jet.grad - &w.grad_v);
            if self.target.polytope().min_distance(&guess) > 0.0 {
                guess
            } else {
                w.image.clone()
            }
        });
        Ok(transition_core(
            &self.p,
            self.h_switch,
            &self.nodes[i].y,
            &jet,
            &self.target,
            start.as_ref(),
        )?)
    }

    /// Transition data at every node for the correction values `v`.
    pub fn evaluate(&self, v: &[f64]) -> Result<Vec<TransitionCore>, FlowError> {
        (0..self.nodes.len())
            .into_par_iter()
            .map(|i| self.eval_node(i, v, self.warm[i].as_ref()))
            .collect()
    }

    fn node_convex(&self, i: usize, jet: &Jet) -> bool {
        let y = &self.nodes[i].y;
        let d = self.p.distances(y);
        if d.min() >= self.h_switch {
            return hess_with(&self.p, &d, &jet.hess).cholesky().is_some();
        }
        let vx = self.p.best_chart(y);
        let Ok(cj) = chart_jet(&self.p, vx, y, jet) else {
            return false;
        };
        // Hess_c u = C^{-1/2} (I + C^{1/2} R C^{1/2}) C^{-1/2}
        let s = cj.c.map(f64::sqrt);
        let n = s.len();
        let m = DMatrix::from_fn(n, n, |a, b| if a == b { 1.0 } else { 0.0 } + s[a] * cj.r[(a, b)] * s[b]);
        m.cholesky().is_some()
    }

    /// First node at which `u_G + v` fails to be strictly convex.
    pub fn check_convex(&self, v: &[f64]) -> Result<(), FlowError> {
        let n = self.dim();
        let bad = (0..self.nodes.len())
            .into_par_iter()
            .find_first(|&i| !self.node_convex(i, &self.stencils[i].apply(n, v)));
        match bad {
            Some(i) => Err(FlowError::NotConvex {
                node: i,
                y: self.nodes[i].y.iter().copied().collect(),
            }),
            None => Ok(()),
        }
    }

    /// `tr DU − nc` at every node.
    pub fn rhs(&self) -> Result<Vec<f64>, FlowError> {
        Ok(self.evaluate(&self.v)?.iter().map(|c| c.trace() - self.nc).collect())
    }

    fn remember(&mut self, v: &[f64], cores: &[TransitionCore]) {
        let n = self.dim();
        for ((w, c), s) in self.warm.iter_mut().zip(cores).zip(&self.stencils) {
            *w = Some(Warm {
                image: c.image.clone(),
                grad_v: s.gradient(n, v),
                g_inv: c.g_inv.clone(),
            });
        }
    }

    fn cfl_dt(&self, cores: &[TransitionCore]) -> f64 {
        let rho = cores
            .iter()
            .map(|c| c.g_inv.clone().symmetric_eigenvalues().max())
            .fold(0.0, f64::max);
        if rho <= 0.0 {
            return f64::INFINITY;
        }
        self.options.cfl * self.grid.h * self.grid.h / rho
    }

    /// One midpoint-rule step of length at most `limit`.
    pub fn step_limited(&mut self, limit: f64) -> Result<f64, FlowError> {
        let cores = self.evaluate(&self.v)?;
        let v0 = self.v.clone();
        self.remember(&v0, &cores);
        let k1: Vec<f64> = cores.iter().map(|c| c.trace() - self.nc).collect();
        let mut dt = self.options.dt.unwrap_or_else(|| self.cfl_dt(&cores)).min(limit);
        for halving in 0..=self.options.max_halvings {
            let mid: Vec<f64> = self.v.iter().zip(&k1).map(|(v, k)| v + 0.5 * dt * k).collect();
            if self.check_convex(&mid).is_ok() {
                if let Ok(mid_cores) = self.evaluate(&mid) {
                    let new: Vec<f64> = self
                        .v
                        .iter()
                        .zip(&mid_cores)
                        .map(|(v, c)| v + dt * (c.trace() - self.nc))
                        .collect();
                    if self.check_convex(&new).is_ok() {
                        self.remember(&mid, &mid_cores);
                        self.v = new;
                        self.t += dt;
                        self.dt = dt;
                        return Ok(dt);
                    }
                }
            }
            if halving == self.options.max_halvings {
                break;
            }
            dt *= 0.5;
        }
        Err(FlowError::StepFailure {
            t: self.t,
            halvings: self.options.max_halvings,
        })
    }

    pub fn step(&mut self) -> Result<f64, FlowError> {
        self.step_limited(f64::INFINITY)
    }

    /// Correction jet at an arbitrary point, interpolated from the node jets.
    pub fn jet_at(&self, y: &DVector<f64>) -> Result<Jet, FlowError> {
        let n = self.dim();
        let h = self.grid.h;
        let s: Vec<f64> = (0..n).map(|k| (y[k] - self.grid.origin[k]) / h - 0.5).collect();
        let base: Vec<i64> = s.iter().map(|x| x.floor() as i64).collect();
        let frac: Vec<f64> = s.iter().zip(&base).map(|(x, b)| x - *b as f64).collect();
        let mut corners = Vec::with_capacity(1 << n);
        for mask in 0..(1usize << n) {
            let mut idx = Vec::with_capacity(n);
            let mut w = 1.0;
            for k in 0..n {
                let bit = (mask >> k) & 1;
                let j = base[k] + bit as i64;
                w *= if bit == 1 { frac[k] } else { 1.0 - frac[k] };
                idx.push(j);
            }
            let inside = idx
                .iter()
                .zip(&self.grid.shape)
                .all(|(&j, &sh)| j >= 0 && (j as usize) < sh);
            let node = if inside {
                let u: Vec<usize> = idx.iter().map(|&j| j as usize).collect();
                self.node_at[self.grid.ravel(&u)]
            } else {
                None
            };
            corners.push((node, w));
        }
        if corners.iter().all(|(nd, _)| nd.is_some()) {
            let mut jet = Jet::zero(n);
            for (nd, w) in corners {
                let j = self.stencils[nd.unwrap()].apply(n, &self.v);
                jet.grad += j.grad * w;
                jet.hess += j.hess * w;
            }
            return Ok(jet);
        }
        // near the boundary: Taylor expansion from the closest node
        let nearest = self
            .nearest_node(y)
            .ok_or_else(|| FlowError::OutsideGrid(y.iter().copied().collect()))?;
        let j = self.stencils[nearest].apply(n, &self.v);
        let dy = y - &self.nodes[nearest].y;
        Ok(Jet {
            grad: &j.grad + &j.hess * dy,
            hess: j.hess,
        })
    }

    fn nearest_node(&self, y: &DVector<f64>) -> Option<usize> {
        let n = self.dim();
        let h = self.grid.h;
        let centre: Vec<i64> = (0..n)
            .map(|k| ((y[k] - self.grid.origin[k]) / h - 0.5).round() as i64)
            .collect();
        let mut best: Option<(f64, usize)> = None;
        for radius in 1i64..=4 {
            let width = (2 * radius + 1) as usize;
            for flat in 0..width.pow(n as u32) {
                let mut rest = flat;
                let mut idx = Vec::with_capacity(n);
                let mut ok = true;
                for k in 0..n {
                    let j = centre[k] + (rest % width) as i64 - radius;
                    rest /= width;
                    if j < 0 || j >= self.grid.shape[k] as i64 {
                        ok = false;
                        break;
                    }
                    idx.push(j as usize);
                }
                if !ok {
                    continue;
                }
                if let Some(nd) = self.node_at[self.grid.ravel(&idx)] {
                    let dist = (&self.nodes[nd].y - y).norm();
                    if best.is_none_or(|b| dist < b.0) {
                        best = Some((dist, nd));
                    }
                }
            }
            if best.is_some() {
                return best.map(|b| b.1);
            }
        }
        None
    }

    /// Transition data of the current state at any point of `P̄`.
    pub fn transition_at(&self, y: &DVector<f64>) -> Result<TransitionCore, FlowError> {
        let jet = self.jet_at(y)?;
        Ok(transition_core(&self.p, self.h_switch, y, &jet, &self.target, None)?)
    }

    /// Preimage of `z ∈ Q°` under the current transition map.
    pub fn inverse_point(&self, z: &DVector<f64>) -> Result<DVector<f64>, FlowError> {
        let eval = |y: &DVector<f64>| -> Result<TransitionCore, TransitionError> {
            let jet = self.jet_at(y).map_err(|_| PotentialError::OutsidePolytope {
                min_distance: self.p.min_distance(y),
            })?;
            transition_core(&self.p, self.h_switch, y, &jet, &self.target, None)
        };
        Ok(inverse_point_with(&self.p, z, eval)?)
    }

    pub fn snapshot(&self) -> Result<Snapshot, FlowError> {
        let cores = self.evaluate(&self.v)?;
        Ok(Snapshot {
            t: self.t,
            images: cores.into_iter().map(|c| c.image).collect(),
        })
    }

    /// `½ Σ w (tr DU)²` over the nodes.
    pub fn energy(&self) -> Result<f64, FlowError> {
        let cores = self.evaluate(&self.v)?;
        Ok(self.energy_of(&cores))
    }

    fn energy_of(&self, cores: &[TransitionCore]) -> f64 {
        0.5 * cores
            .iter()
            .zip(&self.nodes)
            .map(|(c, nd)| nd.weight * c.trace() * c.trace())
            .sum::<f64>()
    }

    /// Residual of the divergence-form evolution of `U` between two snapshots,
    /// over nodes with a complete neighbourhood.
    pub fn parabolic_residual(&self, prev: &Snapshot, cur: &Snapshot) -> Result<f64, FlowError> {
        Ok(self
            .parabolic_residuals(prev, cur)?
            .into_iter()
            .flatten()
            .fold(0.0, f64::max))
    }

    /// Per-node residual, `None` where the centred stencil is incomplete.
    pub fn parabolic_residuals(&self, prev: &Snapshot, cur: &Snapshot) -> Result<Vec<Option<f64>>, FlowError> {
        let dt = cur.t - prev.t;
        if dt <= 0.0 || prev.images.len() != self.nodes.len() || cur.images.len() != self.nodes.len() {
            return Err(FlowError::InsufficientHistory);
        }
        let n = self.dim();
        let rows: Vec<Option<f64>> = (0..self.nodes.len())
            .into_par_iter()
            .map(|i| {
                if !self.full_neighbourhood[i] {
                    return None;
                }
                let a = self.evolution_rhs(i, &prev.images)?;
                let b = self.evolution_rhs(i, &cur.images)?;
                let mut worst: f64 = 0.0;
                for k in 0..n {
                    let dudt = (cur.images[i][k] - prev.images[i][k]) / dt;
                    worst = worst.max((dudt - 0.5 * (a[k] + b[k])).abs());
                }
                Some(worst)
            })
            .collect();
        Ok(rows)
    }

    /// `g^{kj} U^i_{kj} − (g^{ij})_l U^l_k U^k_j + (g^{kj})_l U^l_k U^i_j` from a nodal `U` field.
    fn evolution_rhs(&self, i: usize, field: &[DVector<f64>]) -> Option<DVector<f64>> {
        let n = self.dim();
        let h = self.grid.h;
        let index = &self.nodes[i].index;
        let at = |off: &[i64]| -> Option<&DVector<f64>> { self.neighbour(index, off).map(|nd| &field[nd]) };
        let u0 = &field[i];
        // first and second derivatives of U by central differences
        let mut du = DMatrix::zeros(n, n); // du[(l, k)] = ∂U^l/∂y^k
        let mut d2 = vec![DMatrix::zeros(n, n); n]; // d2[i][(k, j)]
        for k in 0..n {
            let mut p = vec![0i64; n];
            let mut m = vec![0i64; n];
            p[k] = 1;
            m[k] = -1;
            let (up, um) = (at(&p)?, at(&m)?);
            for l in 0..n {
                du[(l, k)] = (up[l] - um[l]) / (2.0 * h);
                d2[l][(k, k)] = (up[l] - 2.0 * u0[l] + um[l]) / (h * h);
            }
            for j in k + 1..n {
                let corner = |sk: i64, sj: i64| -> Option<&DVector<f64>> {
                    let mut off = vec![0i64; n];
                    off[k] = sk;
                    off[j] = sj;
                    at(&off)
                };
                let (pp, pm, mp, mm) = (corner(1, 1)?, corner(1, -1)?, corner(-1, 1)?, corner(-1, -1)?);
                for l in 0..n {
                    let v = (pp[l] - pm[l] - mp[l] + mm[l]) / (4.0 * h * h);
                    d2[l][(k, j)] = v;
                    d2[l][(j, k)] = v;
                }
            }
        }
        let q = self.target.polytope();
        let eps = 1e-5 * q.diameter();
        if q.min_distance(u0) <= 4.0 * eps {
            return None;
        }
        let ginv = inverse_hess_extended(&self.target, u0).ok()?;
        let mut dg = Vec::with_capacity(n); // dg[l] = ∂g^{..}/∂z^l
        for l in 0..n {
            let mut zp = u0.clone();
            let mut zm = u0.clone();
            zp[l] += eps;
            zm[l] -= eps;
            let gp = inverse_hess_extended(&self.target, &zp).ok()?;
            let gm = inverse_hess_extended(&self.target, &zm).ok()?;
            dg.push((gp - gm) / (2.0 * eps));
        }
        let mut out = DVector::zeros(n);
        for ii in 0..n {
            let mut acc = 0.0;
            for k in 0..n {
                for j in 0..n {
                    acc += ginv[(k, j)] * d2[ii][(k, j)];
                    for l in 0..n {
                        acc -= dg[l][(ii, j)] * du[(l, k)] * du[(k, j)];
                        acc += dg[l][(k, j)] * du[(l, k)] * du[(ii, j)];
                    }
                }
            }
            out[ii] = acc;
        }
        Some(out)
    }

    /// Full diagnostics of the current state.
    pub fn diagnose(&self, prev: Option<&Snapshot>) -> Result<(DiagRow, Snapshot, Vec<f64>), FlowError> {
        let n = self.dim();
        let cores = self.evaluate(&self.v)?;
        let samples: Vec<_> = cores
            .par_iter()
            .map(|c| complete_sample(c.clone(), &self.target))
            .collect();
        let traces: Vec<f64> = samples.iter().map(|s| s.trace).collect();
        let dets: Vec<f64> = samples.iter().map(|s| s.det).collect();
        let energy = self.energy_of(&cores);
        let dissipation: f64 = (0..self.nodes.len())
            .map(|i| {
                let g = self.stencils[i].gradient(n, &traces);
                self.nodes[i].weight * (g.transpose() * &cores[i].g_inv * &g)[(0, 0)]
            })
            .sum();
        let max_of = |it: &mut dyn Iterator<Item = f64>| it.fold(f64::NEG_INFINITY, f64::max);
        let min_of = |it: &mut dyn Iterator<Item = f64>| it.fold(f64::INFINITY, f64::min);
        let snapshot = Snapshot {
            t: self.t,
            images: cores.iter().map(|c| c.image.clone()).collect(),
        };
        let parabolic_residual = match prev {
            Some(p) if p.t < self.t => self.parabolic_residual(p, &snapshot)?,
            _ => f64::NAN,
        };
        let mut tracked = f64::NAN;
        for z in &self.options.tracked_z {
            let z = DVector::from_column_slice(z);
            let y = self.inverse_point(&z)?;
            let d = self.p.euclidean_boundary_distance(&y);
            tracked = if tracked.is_nan() { d } else { tracked.min(d) };
        }
        let q = self.target.polytope();
        let mut vertex_error: f64 = 0.0;
        for vp in self.p.vertices() {
            let vq = q
                .vertex_by_facets(&vp.facets)
                .ok_or(PotentialError::NoVertexChart)
                .map_err(TransitionError::from)?;
            let core = self.transition_at(&vp.coords)?;
            vertex_error = vertex_error.max((core.image - &q.vertices()[vq].coords).amax());
        }
        let jets = self.node_jets(&self.v);
        let max_boundary_hess_v = (0..self.nodes.len())
            .filter(|&i| !self.stencils[i].central)
            .map(|i| jets[i].hess.amax())
            .fold(0.0, f64::max);
        let row = DiagRow {
            t: self.t,
            dt: self.dt,
            energy,
            dissipation,
            max_trace: max_of(&mut traces.iter().copied()),
            min_trace: min_of(&mut traces.iter().copied()),
            min_det: min_of(&mut dets.iter().copied()),
            max_det: max_of(&mut dets.iter().copied()),
            max_compat: max_of(&mut samples.iter().map(|s| s.compat_residual)),
            max_partial: max_of(&mut samples.iter().map(|s| s.partial_bound)),
            parabolic_residual,
            tracked_min_distance: tracked,
            static_residual: max_of(&mut traces.iter().map(|t| (t - self.nc).abs())),
            vertex_error,
            max_boundary_hess_v,
        };
        Ok((row, snapshot, dets))
    }

    fn outcome(&self, tag: OutcomeTag, row: &DiagRow, dets: &[f64]) -> Outcome {
        let degenerate_nodes: Vec<usize> = (0..dets.len())
            .filter(|&i| dets[i] < self.options.delta_degenerate)
            .collect();
        let degenerate_sum_range = if degenerate_nodes.is_empty() {
            None
        } else {
            let sums = degenerate_nodes.iter().map(|&i| self.nodes[i].y.sum());
            let (lo, hi) = sums.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), s| (a.min(s), b.max(s)));
            Some((lo, hi))
        };
        Outcome {
            tag,
            t: self.t,
            static_residual: row.static_residual,
            min_det: row.min_det,
            degenerate_nodes,
            degenerate_sum_range,
        }
    }

    /// Evolve to `t_end`, recording diagnostics every `diag_every` time units,
    /// and stop early once converged.
    pub fn run(&mut self, t_end: f64, diag_every: f64) -> Result<RunReport, RunFailure> {
        let mut trace = DiagnosticsTrace::default();
        let fail = |error: FlowError, trace: &DiagnosticsTrace| RunFailure {
            error,
            trace: trace.clone(),
        };
        let (row, mut snap, mut dets) = self.diagnose(None).map_err(|e| fail(e, &trace))?;
        let mut streak = 0usize;
        let mut last = row.clone();
        trace.rows.push(row);
        let opts = self.options.clone();
        let converged_now = |row: &DiagRow, streak: usize| {
            row.min_det > opts.delta_converged && (row.static_residual < STATIONARY || streak >= opts.window_converged)
        };
        if last.static_residual < opts.tol_static && last.min_det > opts.delta_converged {
            streak = 1;
        }
        if converged_now(&last, streak) {
            let outcome = self.outcome(OutcomeTag::Converged, &last, &dets);
            return Ok(RunReport { trace, outcome });
        }
        let mut next_diag = self.t + diag_every;
        while self.t < t_end * (1.0 - 1e-12) {
            let target = next_diag.min(t_end);
            while self.t < target - 1e-12 * target.abs().max(1.0) {
                self.step_limited(target - self.t).map_err(|e| fail(e, &trace))?;
                trace.steps += 1;
            }
            self.t = self.t.max(target);
            let (row, s, d) = self.diagnose(Some(&snap)).map_err(|e| fail(e, &trace))?;
            snap = s;
            dets = d;
            if row.static_residual < opts.tol_static && row.min_det > opts.delta_converged {
                streak += 1;
            } else {
                streak = 0;
            }
            last = row.clone();
            trace.rows.push(row);
            if converged_now(&last, streak) {
                let outcome = self.outcome(OutcomeTag::Converged, &last, &dets);
                return Ok(RunReport { trace, outcome });
            }
            next_diag += diag_every;
        }
        let tag = if degenerating(&trace, opts.window_degenerate, opts.delta_degenerate) {
            OutcomeTag::Degenerating
        } else {
            OutcomeTag::Undecided
        };
        let outcome = self.outcome(tag, &last, &dets);
        Ok(RunReport { trace, outcome })
    }
}

/// `min det DU` below `delta` and still decreasing across the last `window` diagnostics.
pub fn degenerating(trace: &DiagnosticsTrace, window: usize, delta: f64) -> bool {
    let rows = &trace.rows;
    if rows.len() < window || window < 2 {
        return false;
    }
    let tail = &rows[rows.len() - window..];
    tail.iter().all(|r| r.min_det < delta) && tail[window - 1].min_det < tail[0].min_det
}

/// Nodes, weights and stencils for the flow of `pair` on a grid of spacing `h`,
/// starting from `v = u₀ − u_G`.
pub fn init_flow(pair: &GeometryPair, h: f64, options: FlowOptions) -> Result<GridFlowState, FlowError> {
    let p = pair.p_arc().clone();
    let n = p.dim();
    let (lo, hi) = p.bounding_box();
    for k in 0..n {
        if !(h > 0.0) || (hi[k] - lo[k]) / h < 8.0 - 1e-9 {
            return Err(FlowError::InvalidGrid(format!(
                "spacing {h} gives fewer than 8 cells along axis {}",
                k + 1
            )));
        }
    }
    let nc = compute_nc(pair.p(), pair.q())?;
    let grid = Grid::covering(&p, h);
    let cells = grid_cells(&p, &grid);
    let mut node_at = vec![None; grid.len()];
    let mut nodes = Vec::new();
    let mut orphans = Vec::new();
    for cell in &cells {
        if p.min_distance(&cell.center) >= -1e-12 {
            node_at[grid.ravel(&cell.index)] = Some(nodes.len());
            nodes.push(Node {
                index: cell.index.clone(),
                y: cell.center.clone(),
                weight: cell.volume,
            });
        } else {
            orphans.push(cell);
        }
    }
    if nodes.is_empty() {
        return Err(FlowError::InvalidGrid("no grid nodes inside the polytope".into()));
    }
    let h_switch = pair.source.h_switch();
    let mut state = GridFlowState {
        p,
        h_switch,
        target: pair.target.clone(),
        grid,
        node_at,
        stencils: Vec::new(),
        full_neighbourhood: Vec::new(),
        v: Vec::new(),
        t: 0.0,
        dt: 0.0,
        nc,
        warm: vec![None; nodes.len()],
        nodes,
        options,
    };
    for cell in orphans {
        let nd = state
            .nearest_node(&cell.centroid)
            .or_else(|| {
                (0..state.nodes.len()).min_by(|&a, &b| {
                    let da = (&state.nodes[a].y - &cell.centroid).norm();
                    let db = (&state.nodes[b].y - &cell.centroid).norm();
                    da.total_cmp(&db)
                })
            })
            .expect("at least one node");
        state.nodes[nd].weight += cell.volume;
    }
    let mut stencils = Vec::with_capacity(state.nodes.len());
    let mut full = Vec::with_capacity(state.nodes.len());
    for i in 0..state.nodes.len() {
        let central = state.central_stencil(i);
        full.push(
            central.is_some() && {
                let idx = &state.nodes[i].index;
                (0..3usize.pow(n as u32)).all(|flat| {
                    let mut rest = flat;
                    let off: Vec<i64> = (0..n)
                        .map(|_| {
                            let o = (rest % 3) as i64 - 1;
                            rest /= 3;
                            o
                        })
                        .collect();
                    state.neighbour(idx, &off).is_some()
                })
            },
        );
        let stencil = central
            .or_else(|| state.fitted_stencil(i, &[2], 1..=1))
            .or_else(|| state.axis_stencil(i))
            .or_else(|| state.fitted_stencil(i, &[2, 3], 2..=4))
            .ok_or_else(|| FlowError::InvalidGrid(format!("no usable stencil at node {i}")))?;
        stencils.push(stencil);
    }
    state.stencils = stencils;
    state.full_neighbourhood = full;
    let source = &pair.source;
    state.v = state.nodes.iter().map(|nd| source.correction().value(&nd.y)).collect();
    state.check_convex(&state.v)?;
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::CompiledExpr;
    use crate::polytope::{blowup_polytope, volume};
    use crate::potential::{canonical_potential, Correction};
    use crate::rational::parse_rational;

    fn pair(a: &str, v: Option<&str>) -> GeometryPair {
        let p = Arc::new(blowup_polytope(2, parse_rational("2").unwrap()).unwrap());
        let q = Arc::new(blowup_polytope(2, parse_rational(a).unwrap()).unwrap());
        let corr = match v {
            Some(src) => Correction::Expr(CompiledExpr::new(src, 2).unwrap()),
            None => Correction::Zero,
        };
        GeometryPair::new(SymplecticPotential::new(p, corr).unwrap(), canonical_potential(q)).unwrap()
    }

    #[test]
    fn stencils_are_exact_on_quadratics() {
        let st = init_flow(&pair("2", None), 2.0 / 16.0, FlowOptions::default()).unwrap();
        let v: Vec<f64> = st
            .nodes()
            .iter()
            .map(|nd| 0.3 * nd.y[0] * nd.y[0] - 0.2 * nd.y[0] * nd.y[1] + nd.y[1])
            .collect();
        for (i, jet) in st.node_jets(&v).iter().enumerate() {
            let y = &st.nodes()[i].y;
            assert!((jet.grad[0] - (0.6 * y[0] - 0.2 * y[1])).abs() < 1e-9);
            assert!((jet.grad[1] - (1.0 - 0.2 * y[0])).abs() < 1e-9);
            assert!((jet.hess[(0, 0)] - 0.6).abs() < 1e-8 && (jet.hess[(0, 1)] + 0.2).abs() < 1e-8);
        }
        assert!(st.boundary_stencil_count() > 0);
        let total: f64 = st.nodes().iter().map(|nd| nd.weight).sum();
        assert!((total - volume(st.polytope())).abs() < 1e-12);
    }

    #[test]
    fn identity_pair_is_stationary() {
        let mut st = init_flow(&pair("2", None), 2.0 / 16.0, FlowOptions::default()).unwrap();
        assert!(st.rhs().unwrap().iter().all(|r| r.abs() < 1e-10));
        let rep = st.run(1.0, 0.1).unwrap();
        assert_eq!(rep.outcome.tag, OutcomeTag::Converged);
        assert_eq!(rep.trace.steps, 0);
        assert!((rep.trace.rows[0].energy - 0.5 * 4.0 * 1.5).abs() < 1e-9);
    }

    #[test]
    fn rejects_bad_setups() {
        assert!(matches!(
            init_flow(&pair("2", None), 0.5, FlowOptions::default()),
            Err(FlowError::InvalidGrid(_))
        ));
        assert!(matches!(
            init_flow(&pair("2", Some("-3*(y1^2 + y2^2)")), 2.0 / 16.0, FlowOptions::default()),
            Err(FlowError::NotConvex { .. })
        ));
        let mut st = init_flow(
            &pair("1.5", None),
            2.0 / 16.0,
            FlowOptions {
                dt: Some(1e3),
                max_halvings: 2,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(matches!(st.step(), Err(FlowError::StepFailure { .. })));
    }

    #[test]
    fn one_step_lowers_energy() {
        let mut st = init_flow(&pair("1.5", None), 2.0 / 16.0, FlowOptions::default()).unwrap();
        let e0 = st.energy().unwrap();
        st.step().unwrap();
        assert!(st.energy().unwrap() < e0);
    }
}
