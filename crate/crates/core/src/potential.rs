//! Symplectic potentials `u = Σ d_i log d_i + v` with Guillemin boundary
//! behaviour, their derivatives, the inverse Hessian extended to the closed
//! polytope through vertex charts, and Legendre-dual gradients.
//!
//! Near a vertex `q` with tight facets `T` and edge matrix `E` write
//! `y = q + E c`, so `c_i = d_{T_i}(y)`. In these coordinates
//!
//! ```text
//! ∂u/∂c_i  = log c_i + ρ_i(c)
//! Hess_c u = C⁻¹ + R(c),        C = diag(c)
//! ```
//!
//! with `ρ` and `R` smooth up to the boundary of the chart. Everything that has
//! to survive on faces is written in terms of `(c, ρ, R)`.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::expr::CompiledExpr;
use crate::polytope::DelzantPolytope;

/// Points closer than this to a facet cannot be evaluated directly.
pub const EVAL_FLOOR: f64 = 1e-12;
const NEWTON_CAP: usize = 200;
const OUTSIDE_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PotentialError {
    #[error("evaluation too close to the boundary (min distance {min_distance:e})")]
    BoundaryEvaluation { min_distance: f64 },
    #[error("point outside the polytope (min distance {min_distance:e})")]
    OutsidePolytope { min_distance: f64 },
    #[error("no vertex chart covers the point")]
    NoVertexChart,
    #[error("Newton iteration did not converge after {iterations} steps (residual {residual:e})")]
    NewtonDivergence { iterations: usize, residual: f64 },
    #[error("Hessian is not positive definite")]
    NotConvex,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
}

/// Gradient and Hessian of a smooth correction at a point.
#[derive(Debug, Clone, PartialEq)]
pub struct Jet {
    pub grad: DVector<f64>,
    pub hess: DMatrix<f64>,
}

impl Jet {
    pub fn zero(n: usize) -> Self {
        Jet {
            grad: DVector::zeros(n),
            hess: DMatrix::zeros(n, n),
        }
    }
}

type RadialFn = dyn Fn(f64) -> [f64; 3] + Send + Sync;

/// `v(y) = φ(Σ y_i)`, given by a closure returning `[φ, φ', φ'']`.
#[derive(Clone)]
pub struct RadialCorrection {
    label: String,
    phi: Arc<RadialFn>,
}

impl RadialCorrection {
    pub fn new(label: impl Into<String>, phi: impl Fn(f64) -> [f64; 3] + Send + Sync + 'static) -> Self {
        RadialCorrection {
            label: label.into(),
            phi: Arc::new(phi),
        }
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn phi(&self, b: f64) -> [f64; 3] {
        (self.phi)(b)
    }
}

impl fmt::Debug for RadialCorrection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RadialCorrection").field("label", &self.label).finish()
    }
}

/// The smooth part `v` of a symplectic potential.
#[derive(Debug, Clone, Default)]
pub enum Correction {
    #[default]
    Zero,
    Expr(CompiledExpr),
    Radial(RadialCorrection),
}

impl Correction {
    pub fn value(&self, y: &DVector<f64>) -> f64 {
        match self {
            Correction::Zero => 0.0,
            Correction::Expr(e) => e.value(y.as_slice()),
            Correction::Radial(r) => r.phi(y.sum())[0],
        }
    }

    pub fn jet(&self, y: &DVector<f64>) -> Jet {
        let n = y.len();
        match self {
            Correction::Zero => Jet::zero(n),
            Correction::Expr(e) => {
                let (g, h) = e.jet(y.as_slice());
                Jet {
                    grad: DVector::from_vec(g),
                    hess: DMatrix::from_vec(n, n, h),
                }
            }
            Correction::Radial(r) => {
                let [_, d1, d2] = r.phi(y.sum());
                Jet {
                    grad: DVector::from_element(n, d1),
                    hess: DMatrix::from_element(n, n, d2),
                }
            }
        }
    }

    pub fn describe(&self) -> String {
        match self {
            Correction::Zero => "0".to_string(),
            Correction::Expr(e) => e.source().to_string(),
            Correction::Radial(r) => format!("radial:{}", r.label()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SymplecticPotential {
    polytope: Arc<DelzantPolytope>,
    correction: Correction,
    h_switch: f64,
}

impl SymplecticPotential {
    pub fn new(polytope: Arc<DelzantPolytope>, correction: Correction) -> Result<Self, PotentialError> {
        if let Correction::Expr(e) = &correction {
            if e.dim() != polytope.dim() {
                return Err(PotentialError::DimensionMismatch {
                    expected: polytope.dim(),
                    got: e.dim(),
                });
            }
        }
        let h_switch = 1e-3 * polytope.diameter();
        Ok(SymplecticPotential {
            polytope,
            correction,
            h_switch,
        })
    }

    pub fn polytope(&self) -> &DelzantPolytope {
        &self.polytope
    }

    pub fn polytope_arc(&self) -> &Arc<DelzantPolytope> {
        &self.polytope
    }

    pub fn correction(&self) -> &Correction {
        &self.correction
    }

    pub fn dim(&self) -> usize {
        self.polytope.dim()
    }

    /// Width of the boundary layer in which chart formulas replace direct ones.
    pub fn h_switch(&self) -> f64 {
        self.h_switch
    }

    pub fn jet(&self, y: &DVector<f64>) -> Jet {
        self.correction.jet(y)
    }
}

pub fn canonical_potential(p: Arc<DelzantPolytope>) -> SymplecticPotential {
    SymplecticPotential::new(p, Correction::Zero).expect("zero correction fits any dimension")
}

fn interior_distances(p: &DelzantPolytope, y: &DVector<f64>) -> Result<DVector<f64>, PotentialError> {
    if y.len() != p.dim() {
        return Err(PotentialError::DimensionMismatch {
            expected: p.dim(),
            got: y.len(),
        });
    }
    let d = p.distances(y);
    let min = d.min();
    if min <= EVAL_FLOOR {
        return Err(PotentialError::BoundaryEvaluation { min_distance: min });
    }
    Ok(d)
}

pub fn eval(u: &SymplecticPotential, y: &DVector<f64>) -> Result<f64, PotentialError> {
    let d = interior_distances(u.polytope(), y)?;
    Ok(d.iter().map(|&di| di * di.ln()).sum::<f64>() + u.correction.value(y))
}

/// `∇u` from the facet distances and the correction gradient.
pub fn grad_with(p: &DelzantPolytope, d: &DVector<f64>, grad_v: &DVector<f64>) -> DVector<f64> {
    let w = d.map(|di| di.ln() + 1.0);
    p.normal_rows().tr_mul(&w) + grad_v
}

/// `Hess u` from the facet distances and the correction Hessian.
pub fn hess_with(p: &DelzantPolytope, d: &DVector<f64>, hess_v: &DMatrix<f64>) -> DMatrix<f64> {
    let n = p.dim();
    let m = p.num_facets();
    // column-major: rows[(k, i)] = r[i * m + k]
    let r = p.normal_rows().as_slice();
    let mut h = hess_v.clone();
    let hs = h.as_mut_slice();
    for k in 0..m {
        let inv = 1.0 / d[k];
        for i in 0..n {
            let a = r[i * m + k] * inv;
            if a == 0.0 {
                continue;
            }
            for j in 0..n {
                hs[j * n + i] += a * r[j * m + k];
            }
        }
    }
    h
}

pub fn grad(u: &SymplecticPotential, y: &DVector<f64>) -> Result<DVector<f64>, PotentialError> {
    let d = interior_distances(u.polytope(), y)?;
    Ok(grad_with(u.polytope(), &d, &u.jet(y).grad))
}

pub fn hess(u: &SymplecticPotential, y: &DVector<f64>) -> Result<DMatrix<f64>, PotentialError> {
    let d = interior_distances(u.polytope(), y)?;
    Ok(hess_with(u.polytope(), &d, &u.jet(y).hess))
}

/// Smooth data of a potential in the chart of one vertex.
#[derive(Debug, Clone)]
pub struct ChartJet {
    pub vertex: usize,
    /// Chart coordinates `c_i = d_{T_i}(y)`, clamped at zero.
    pub c: DVector<f64>,
    /// `∂u/∂c_i − log c_i`.
    pub rho: DVector<f64>,
    /// `Hess_c u − C⁻¹`.
    pub r: DMatrix<f64>,
}

impl ChartJet {
    /// `(Hess_c u)⁻¹ = (I + C R)⁻¹ C`, finite on the whole chart.
    pub fn inverse_hess(&self) -> Result<DMatrix<f64>, PotentialError> {
        let n = self.c.len();
        let mut m = DMatrix::identity(n, n);
        for i in 0..n {
            for j in 0..n {
                m[(i, j)] += self.c[i] * self.r[(i, j)];
            }
        }
        let cm = DMatrix::from_diagonal(&self.c);
        let k = m.lu().solve(&cm).ok_or(PotentialError::NotConvex)?;
        Ok(symmetrize(k))
    }
}

pub(crate) fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    (&m + m.transpose()) * 0.5
}

/// Chart data at `y` for the vertex `vertex`, given the correction jet at `y`.
pub fn chart_jet(p: &DelzantPolytope, vertex: usize, y: &DVector<f64>, jet: &Jet) -> Result<ChartJet, PotentialError> {
    let v = &p.vertices()[vertex];
    let n = p.dim();
    let d = p.distances(y);
    let rows = p.normal_rows();
    let c = DVector::from_iterator(n, v.facets.iter().map(|&k| d[k].max(0.0)));
    let mut s = jet.grad.clone();
    let mut m = jet.hess.clone();
    for k in 0..p.num_facets() {
        if v.facets.binary_search(&k).is_ok() {
            continue;
        }
        if d[k] <= 0.0 {
            return Err(PotentialError::NoVertexChart);
        }
        let lw = d[k].ln() + 1.0;
        let inv = 1.0 / d[k];
        for i in 0..n {
            let a = rows[(k, i)];
            s[i] += lw * a;
            if a == 0.0 {
                continue;
            }
            for j in 0..n {
                m[(i, j)] += a * inv * rows[(k, j)];
            }
        }
    }
    let e = &v.edge_matrix;
    let rho = e.tr_mul(&s).add_scalar(1.0);
    let r = symmetrize(e.tr_mul(&(m * e)));
    Ok(ChartJet { vertex, c, rho, r })
}

/// `[u^{ij}]` from explicit source data, valid on the closed polytope.
pub fn inverse_hess_extended_with(
    p: &DelzantPolytope,
    h_switch: f64,
    y: &DVector<f64>,
    jet: &Jet,
) -> Result<DMatrix<f64>, PotentialError> {
    let d = p.distances(y);
    let min = d.min();
    if min < -OUTSIDE_TOL {
        return Err(PotentialError::OutsidePolytope { min_distance: min });
    }
    if min >= h_switch && min > EVAL_FLOOR {
        let h = hess_with(p, &d, &jet.hess);
        let inv = h.cholesky().ok_or(PotentialError::NotConvex)?.inverse();
        return Ok(symmetrize(inv));
    }
    let q = p.best_chart(y);
    let cj = chart_jet(p, q, y, jet)?;
    let e = &p.vertices()[q].edge_matrix;
    Ok(symmetrize(e * cj.inverse_hess()? * e.transpose()))
}

pub fn inverse_hess_extended(u: &SymplecticPotential, y: &DVector<f64>) -> Result<DMatrix<f64>, PotentialError> {
    inverse_hess_extended_with(u.polytope(), u.h_switch, y, &u.jet(y))
}

/// Solution of `∇g = x` written in one vertex chart of `Q`.
#[derive(Debug, Clone)]
pub struct ChartSolution {
    pub vertex: usize,
    pub w: DVector<f64>,
    pub point: DVector<f64>,
    pub jet: ChartJet,
}

/// Solve `w_i = exp(log_a_i − ρ_i(w))` in the chart of `vertex`; this is
/// `∂g/∂w = log_a` with `log_a = Eᵀx`, and stays well posed when some
/// `exp(log_a_i)` underflow (the solution then lies on the facet `w_i = 0`).
pub fn solve_chart(
    g: &SymplecticPotential,
    vertex: usize,
    log_a: &DVector<f64>,
    w0: Option<&DVector<f64>>,
) -> Result<ChartSolution, PotentialError> {
    let q = g.polytope();
    let vx = &q.vertices()[vertex];
    let n = q.dim();
    let point_of = |w: &DVector<f64>| &vx.coords + &vx.edge_matrix * w;
    let jet_at = |w: &DVector<f64>| -> Result<(DVector<f64>, ChartJet), PotentialError> {
        let z = point_of(w);
        let cj = chart_jet(q, vertex, &z, &g.jet(&z))?;
        Ok((z, cj))
    };
    let targets = |cj: &ChartJet| DVector::from_iterator(n, (0..n).map(|i| (log_a[i] - cj.rho[i]).exp()));
    let residual = |w: &DVector<f64>, t: &DVector<f64>| -> f64 {
        (0..n)
            .map(|i| (w[i] - t[i]).abs() / (w[i] + t[i] + f64::MIN_POSITIVE))
            .fold(0.0, f64::max)
    };

    let mut w = match w0 {
        Some(w) => w.map(|x| x.max(0.0)),
        None => {
            let (_, cj0) = jet_at(&DVector::zeros(n))?;
            targets(&cj0)
        }
    };
    // pull the start back into the chart domain
    let mut state = None;
    for _ in 0..200 {
        if let Ok(s) = jet_at(&w) {
            state = Some(s);
            break;
        }
        w *= 0.5;
    }
    let (mut z, mut cj) = state.ok_or(PotentialError::NoVertexChart)?;
    let mut t = targets(&cj);
    let mut res = residual(&w, &t);

    for it in 0..NEWTON_CAP {
        if res <= 1e-13 {
            return Ok(ChartSolution {
                vertex,
                w,
                point: z,
                jet: cj,
            });
        }
        let f = &w - &t;
        let mut jac = DMatrix::identity(n, n);
        for i in 0..n {
            for j in 0..n {
                jac[(i, j)] += t[i] * cj.r[(i, j)];
            }
        }
        let step = jac.lu().solve(&(-&f)).ok_or(PotentialError::NotConvex)?;
        let fnorm = f.amax();
        let mut alpha = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let cand = (&w + &step * alpha).map(|x| x.max(0.0));
            if let Ok((zc, cjc)) = jet_at(&cand) {
                let tc = targets(&cjc);
                let rc = residual(&cand, &tc);
                if (&cand - &tc).amax() < fnorm || rc < res {
                    w = cand;
                    z = zc;
                    cj = cjc;
                    t = tc;
                    res = rc;
                    accepted = true;
                    break;
                }
            }
            alpha *= 0.5;
        }
        if !accepted {
            // no further decrease possible: accept if already at rounding level
            if res <= 1e-10 {
                return Ok(ChartSolution {
                    vertex,
                    w,
                    point: z,
                    jet: cj,
                });
            }
            return Err(PotentialError::NewtonDivergence {
                iterations: it + 1,
                residual: res,
            });
        }
    }
    if res <= 1e-10 {
        return Ok(ChartSolution {
            vertex,
            w,
            point: z,
            jet: cj,
        });
    }
    Err(PotentialError::NewtonDivergence {
        iterations: NEWTON_CAP,
        residual: res,
    })
}

/// The chart in which the solution of `∇g = x` is expected to sit: the vertex
/// whose predicted chart coordinates are smallest.
pub fn chart_for_covector(g: &SymplecticPotential, x: &DVector<f64>) -> Result<(usize, DVector<f64>), PotentialError> {
    let q = g.polytope();
    let mut best: Option<(f64, usize, DVector<f64>)> = None;
    for (idx, v) in q.vertices().iter().enumerate() {
        let la = v.edge_matrix.tr_mul(x);
        let cj = chart_jet(q, idx, &v.coords, &g.jet(&v.coords))?;
        let score = (0..q.dim())
            .map(|i| la[i] - cj.rho[i])
            .fold(f64::NEG_INFINITY, f64::max);
        if best.as_ref().is_none_or(|b| score < b.0) {
            best = Some((score, idx, la));
        }
    }
    let (_, idx, la) = best.ok_or(PotentialError::NoVertexChart)?;
    Ok((idx, la))
}

/// The unique `z ∈ Q` with `∇g(z) = x`.
pub fn legendre_dual_grad(g: &SymplecticPotential, x: &DVector<f64>) -> Result<DVector<f64>, PotentialError> {
    legendre_dual_grad_from(g, x, None)
}

/// As [`legendre_dual_grad`], warm-started from `start` when it is interior.
pub fn legendre_dual_grad_from(
    g: &SymplecticPotential,
    x: &DVector<f64>,
    start: Option<&DVector<f64>>,
) -> Result<DVector<f64>, PotentialError> {
    legendre_dual_with_jet(g, x, start).map(|(z, _)| z)
}

/// Like [`legendre_dual_grad_from`], also returning the correction jet at the solution.
pub fn legendre_dual_with_jet(
    g: &SymplecticPotential,
    x: &DVector<f64>,
    start: Option<&DVector<f64>>,
) -> Result<(DVector<f64>, Jet), PotentialError> {
    let q = g.polytope();
    if x.len() != q.dim() {
        return Err(PotentialError::DimensionMismatch {
            expected: q.dim(),
            got: x.len(),
        });
    }
    let tol = 1e-13 * (1.0 + x.norm());
    let loose = 1e-10 * (1.0 + x.norm());
    let mut z = match start {
        Some(s) if q.min_distance(s) > EVAL_FLOOR => s.clone(),
        _ => q.vertex_centroid(),
    };
    let merit = |z: &DVector<f64>, d: &DVector<f64>| -> f64 {
        d.iter().map(|&di| di * di.ln()).sum::<f64>() + g.correction.value(z) - x.dot(z)
    };
    let mut d = q.distances(&z);
    let mut jet = g.jet(&z);
    let mut r = grad_with(q, &d, &jet.grad) - x;
    let mut psi = None;
    let mut iterations = 0;
    while iterations < NEWTON_CAP {
        if r.norm() <= tol {
            return Ok((z, jet));
        }
        iterations += 1;
        let h = hess_with(q, &d, &jet.hess);
        let step = match h.clone().cholesky() {
            Some(ch) => ch.solve(&(-&r)),
            None => match h.lu().solve(&(-&r)) {
                Some(s) => s,
                None => break,
            },
        };
        let slope = r.dot(&step);
        let rnorm = r.norm();
        let mut alpha = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let cand = &z + &step * alpha;
            let dc = q.distances(&cand);
            if dc.min() > EVAL_FLOOR {
                let jc = g.jet(&cand);
                let rc = grad_with(q, &dc, &jc.grad) - x;
                // the merit is only needed when the residual fails to drop
                let better = rc.norm() < rnorm || {
                    let p0 = *psi.get_or_insert_with(|| merit(&z, &d));
                    merit(&cand, &dc) <= p0 + 1e-4 * alpha * slope
                };
                if better {
                    z = cand;
                    d = dc;
                    jet = jc;
                    r = rc;
                    psi = None;
                    accepted = true;
                    break;
                }
            }
            alpha *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    if r.norm() <= loose {
        return Ok((z, jet));
    }
    // The solution is beyond the reach of interior floating point (e.g. |x| in
    // the hundreds): finish in the vertex chart where it lives.
    let (vertex, la) = chart_for_covector(g, x)?;
    match solve_chart(g, vertex, &la, None) {
        Ok(sol) => {
            let jet = g.jet(&sol.point);
            Ok((sol.point, jet))
        }
        Err(_) => Err(PotentialError::NewtonDivergence {
            iterations,
            residual: r.norm(),
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::polytope::{blowup_polytope, build_polytope, cube};
    use crate::rational::{int, parse_rational};

    fn segment() -> Arc<DelzantPolytope> {
        Arc::new(cube(1, int(1)).unwrap())
    }

    fn trapezoid() -> Arc<DelzantPolytope> {
        Arc::new(blowup_polytope(2, int(2)).unwrap())
    }

    fn v1(x: f64) -> DVector<f64> {
        DVector::from_element(1, x)
    }

    fn v2(a: f64, b: f64) -> DVector<f64> {
        DVector::from_vec(vec![a, b])
    }

    #[test]
    fn segment_values() {
        let u = canonical_potential(segment());
        let y = v1(0.5);
        assert!((eval(&u, &y).unwrap() + 2f64.ln()).abs() < 1e-15);
        assert!(grad(&u, &y).unwrap()[0].abs() < 1e-15);
        assert!((hess(&u, &y).unwrap()[(0, 0)] - 4.0).abs() < 1e-12);
        assert!(matches!(
            eval(&u, &v1(0.0)),
            Err(PotentialError::BoundaryEvaluation { .. })
        ));
    }

    #[test]
    fn trapezoid_matches_closed_form() {
        let u = canonical_potential(trapezoid());
        let (a, b) = (0.4, 0.9);
        let s: f64 = a + b;
        let want = a * a.ln() + b * b.ln() + (s - 1.0) * (s - 1.0).ln() + (2.0 - s) * (2.0 - s).ln();
        assert!((eval(&u, &v2(a, b)).unwrap() - want).abs() < 1e-14);
        let sq = canonical_potential(Arc::new(cube(2, int(1)).unwrap()));
        assert!(grad(&sq, &v2(0.5, 0.5)).unwrap().norm() < 1e-15);
    }

    #[test]
    fn extended_inverse_hessian() {
        let u = canonical_potential(segment());
        for y in [0.0, 1e-9, 1e-4, 0.3, 0.5, 0.999, 1.0] {
            let g = inverse_hess_extended(&u, &v1(y)).unwrap()[(0, 0)];
            assert!((g - y * (1.0 - y)).abs() < 1e-14, "y={y}: {g}");
        }
        let t = canonical_potential(trapezoid());
        let g = inverse_hess_extended(&t, &v2(1.0, 0.0)).unwrap();
        assert!(g.amax() < 1e-15);
        let y = v2(0.5, 0.8);
        let prod = inverse_hess_extended(&t, &y).unwrap() * hess(&t, &y).unwrap();
        assert!((prod - DMatrix::identity(2, 2)).amax() < 1e-8);
        assert!(matches!(
            inverse_hess_extended(&t, &v2(0.1, 0.1)),
            Err(PotentialError::OutsidePolytope { .. })
        ));
    }

    #[test]
    fn chart_and_direct_branches_agree() {
        let p = trapezoid();
        let e = CompiledExpr::new("0.1*y1*y1 + 0.05*y1*y2 - 0.02*y2^3", 2).unwrap();
        let u = SymplecticPotential::new(p.clone(), Correction::Expr(e)).unwrap();
        let y = v2(1.2, 0.01);
        let direct = hess(&u, &y).unwrap().try_inverse().unwrap();
        for vx in 0..p.vertices().len() {
            if let Ok(cj) = chart_jet(&p, vx, &y, &u.jet(&y)) {
                let ev = &p.vertices()[vx].edge_matrix;
                let viachart = ev * cj.inverse_hess().unwrap() * ev.transpose();
                assert!((viachart - &direct).amax() < 1e-10);
            }
        }
        // on the facet y2 = 0: tangent direction survives, normal collapses
        let g = inverse_hess_extended(&u, &v2(1.2, 0.0)).unwrap();
        assert!(g[(1, 1)].abs() < 1e-15 && g[(0, 1)].abs() < 1e-15);
        assert!(g[(0, 0)] > 0.0);
    }

    #[test]
    fn legendre_dual_examples() {
        let g = canonical_potential(segment());
        assert!((legendre_dual_grad(&g, &v1(0.0)).unwrap()[0] - 0.5).abs() < 1e-12);
        assert!((legendre_dual_grad(&g, &v1(3f64.ln())).unwrap()[0] - 0.75).abs() < 1e-12);
        let far = legendre_dual_grad(&g, &v1(1e3)).unwrap()[0];
        assert!(far <= 1.0 && 1.0 - far < 1e-3);
        let far = legendre_dual_grad(&g, &v1(-1e3)).unwrap()[0];
        assert!(far >= 0.0 && far < 1e-3);
        let mid = legendre_dual_grad(&g, &v1(30.0)).unwrap()[0];
        assert!(((1.0 - mid) - 1.0 / (1.0 + 30f64.exp())).abs() <= 2.0 * f64::EPSILON);
    }

    #[test]
    fn legendre_involution() {
        let p = Arc::new(
            build_polytope(
                vec![vec![1, 0], vec![0, 1], vec![-1, -1], vec![1, 1]],
                vec![int(0), int(0), parse_rational("2").unwrap(), int(-1)],
            )
            .unwrap(),
        );
        let e = CompiledExpr::new("0.2*exp(0.3*y1) + 0.1*y2^2", 2).unwrap();
        let u = SymplecticPotential::new(p, Correction::Expr(e)).unwrap();
        for &(a, b) in &[(0.5, 0.8), (0.01, 1.2), (1.3, 0.6), (0.2, 0.81), (1e-6, 1.0)] {
            let y = v2(a, b);
            let x = grad(&u, &y).unwrap();
            let back = legendre_dual_grad(&u, &x).unwrap();
            assert!((back - &y).norm() < 1e-8, "{a},{b}");
        }
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let e = CompiledExpr::new("0.3*sin(y1)*y2 + 0.1*y1^2", 2).unwrap();
        let u = SymplecticPotential::new(trapezoid(), Correction::Expr(e)).unwrap();
        let h = 1e-5;
        for &(a, b) in &[(0.5, 0.8), (0.3, 1.1), (1.2, 0.3)] {
            let y = v2(a, b);
            let g = grad(&u, &y).unwrap();
            let hs = hess(&u, &y).unwrap();
            for i in 0..2 {
                let mut yp = y.clone();
                let mut ym = y.clone();
                yp[i] += h;
                ym[i] -= h;
                let fd = (eval(&u, &yp).unwrap() - eval(&u, &ym).unwrap()) / (2.0 * h);
                assert!((fd - g[i]).abs() <= 1e-6 * g[i].abs().max(1.0));
                let col = (grad(&u, &yp).unwrap() - grad(&u, &ym).unwrap()) / (2.0 * h);
                for j in 0..2 {
                    assert!((col[j] - hs[(j, i)]).abs() <= 1e-6 * hs[(j, i)].abs().max(1.0));
                }
            }
        }
    }
}
