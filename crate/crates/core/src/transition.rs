//! The transition map `U = ∇f ∘ ∇u : P̄ → Q̄`, its Jacobian
//! `DU = [g^{ij}(U)] · Hess u`, spectral data, and integral functionals.
//!
//! Away from `∂P` the image is the Legendre-dual point of `∇u(y)`. Inside the
//! boundary layer both potentials are written in the vertex chart nearest to
//! `y`; with `a_i = c_i e^{ρ_i(c)}` the image solves `w_i = a_i e^{−ρ'_i(w)}`
//! and the Jacobian is
//!
//! ```text
//! DU_c = (I + W R')⁻¹ · diag(e^{ρ − ρ'}) · (I + C R)
//! ```
//!
//! which is finite on every face.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use thiserror::Error;

use crate::polytope::{DelzantPolytope, Face, PolytopeError};
use crate::potential::{
    chart_jet, grad_with, hess_with, inverse_hess_extended_with, legendre_dual_with_jet, solve_chart, symmetrize, Jet,
    PotentialError, SymplecticPotential,
};
use crate::quadrature::{face_rule, grid_cells, Grid};

/// A point on a facet of `P` must land within this distance of the matching facet of `Q`.
pub const FACE_TOL: f64 = 1e-7;
const ON_FACE: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TransitionError {
    #[error(transparent)]
    Potential(#[from] PotentialError),
    #[error(transparent)]
    Polytope(#[from] PolytopeError),
    #[error("source and target polytopes have different normals")]
    NormalMismatch,
    #[error("face mismatch: facet {facet} at distance {distance:e} from the image")]
    FaceMismatch { facet: usize, distance: f64 },
    #[error("face has dimension 0")]
    PointFace,
}

/// Which formula produced a sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalPath {
    Interior,
    Chart,
}

/// Image point and Jacobian at one source point.
#[derive(Debug, Clone)]
pub struct TransitionCore {
    pub y: DVector<f64>,
    pub image: DVector<f64>,
    pub du: DMatrix<f64>,
    /// `[g^{ij}]` at the image.
    pub g_inv: DMatrix<f64>,
    /// Source Hessian when `y` is interior, `None` on the chart path.
    pub source_hess: Option<DMatrix<f64>>,
    pub path: EvalPath,
}

impl TransitionCore {
    pub fn trace(&self) -> f64 {
        self.du.trace()
    }

    pub fn det(&self) -> f64 {
        self.du.clone().determinant()
    }
}

#[derive(Debug, Clone)]
pub struct TransitionSample {
    pub y: DVector<f64>,
    pub image: DVector<f64>,
    pub du: DMatrix<f64>,
    pub g_inv: DMatrix<f64>,
    pub eigenvalues: Vec<f64>,
    pub trace: f64,
    pub det: f64,
    pub compat_residual: f64,
    pub partial_bound: f64,
    pub path: EvalPath,
}

/// Flat per-sample record for reports.
#[derive(Debug, Clone, Serialize)]
pub struct SampleRecord {
    pub y: Vec<f64>,
    #[serde(rename = "U")]
    pub image: Vec<f64>,
    pub trace: f64,
    pub det: f64,
    pub eigenvalues: Vec<f64>,
    pub compat_residual: f64,
    pub partial_bound: f64,
}

impl TransitionSample {
    pub fn record(&self) -> SampleRecord {
        SampleRecord {
            y: self.y.iter().copied().collect(),
            image: self.image.iter().copied().collect(),
            trace: self.trace,
            det: self.det,
            eigenvalues: self.eigenvalues.clone(),
            compat_residual: self.compat_residual,
            partial_bound: self.partial_bound,
        }
    }
}

/// Source potential `u` on `P` and target potential `g` on `Q`.
#[derive(Debug, Clone)]
pub struct GeometryPair {
    pub source: SymplecticPotential,
    pub target: SymplecticPotential,
}

impl GeometryPair {
    pub fn new(source: SymplecticPotential, target: SymplecticPotential) -> Result<Self, TransitionError> {
        if !source.polytope().same_normals(target.polytope()) {
            return Err(TransitionError::NormalMismatch);
        }
        Ok(GeometryPair { source, target })
    }

    pub fn p(&self) -> &DelzantPolytope {
        self.source.polytope()
    }

    pub fn q(&self) -> &DelzantPolytope {
        self.target.polytope()
    }

    pub fn p_arc(&self) -> &Arc<DelzantPolytope> {
        self.source.polytope_arc()
    }
}

/// Max asymmetry of `G⁻¹ DUᵀ`.
pub fn compat_of(g_inv: &DMatrix<f64>, du: &DMatrix<f64>) -> f64 {
    let m = g_inv * du.transpose();
    let mut worst: f64 = 0.0;
    for i in 0..m.nrows() {
        for j in 0..i {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

/// Image point and Jacobian for source data given by the facet geometry of `P`,
/// the boundary-layer width `h_switch`, and the jet of the correction at `y`.
/// `warm` is a previous image used to start the Newton solves.
pub fn transition_core(
    p: &DelzantPolytope,
    h_switch: f64,
    y: &DVector<f64>,
    jet: &Jet,
    g: &SymplecticPotential,
    warm: Option<&DVector<f64>>,
) -> Result<TransitionCore, TransitionError> {
    let q = g.polytope();
    let d = p.distances(y);
    let dmin = d.min();
    if dmin < -1e-9 {
        return Err(PotentialError::OutsidePolytope { min_distance: dmin }.into());
    }
    let core = if dmin >= h_switch {
        let x = grad_with(p, &d, &jet.grad);
        let h = hess_with(p, &d, &jet.hess);
        let (image, g_jet) = legendre_dual_with_jet(g, &x, warm)?;
        let g_inv = inverse_hess_extended_with(q, g.h_switch(), &image, &g_jet)?;
        let du = &g_inv * &h;
        TransitionCore {
            y: y.clone(),
            image,
            du,
            g_inv,
            source_hess: Some(h),
            path: EvalPath::Interior,
        }
    } else {
        let vx = p.best_chart(y);
        let cj = chart_jet(p, vx, y, jet)?;
        let facets = &p.vertices()[vx].facets;
        let vq = q.vertex_by_facets(facets).ok_or(PotentialError::NoVertexChart)?;
        let n = p.dim();
        let log_a = DVector::from_iterator(n, (0..n).map(|i| cj.c[i].ln() + cj.rho[i]));
        let w0 = warm.map(|z| {
            let dz = q.distances(z);
            DVector::from_iterator(n, facets.iter().map(|&k| dz[k].max(0.0)))
        });
        let sol = solve_chart(g, vq, &log_a, w0.as_ref())?;
        let (w, rp) = (&sol.w, &sol.jet.r);
        let mut left = DMatrix::identity(n, n);
        let mut right = DMatrix::identity(n, n);
        for i in 0..n {
            for j in 0..n {
                left[(i, j)] += w[i] * rp[(i, j)];
                right[(i, j)] += cj.c[i] * cj.r[(i, j)];
            }
        }
        let lam = DVector::from_iterator(n, (0..n).map(|i| (cj.rho[i] - sol.jet.rho[i]).exp()));
        let lu = left.lu();
        let du_c = lu
            .solve(&DMatrix::from_diagonal(&lam))
            .ok_or(PotentialError::NotConvex)?
            * right;
        let g_inv_c = symmetrize(lu.solve(&DMatrix::from_diagonal(w)).ok_or(PotentialError::NotConvex)?);
        let e = &q.vertices()[vq].edge_matrix;
        let e_inv = &p.vertices()[vx].normal_matrix;
        let du = e * du_c * e_inv;
        let g_inv = symmetrize(e * g_inv_c * e.transpose());
        TransitionCore {
            y: y.clone(),
            image: sol.point,
            du,
            g_inv,
            source_hess: None,
            path: EvalPath::Chart,
        }
    };
    // faces go to faces
    let dq = q.distances(&core.image);
    for k in 0..p.num_facets() {
        if d[k] <= ON_FACE && dq[k].abs() > FACE_TOL {
            return Err(TransitionError::FaceMismatch {
                facet: k,
                distance: dq[k],
            });
        }
    }
    Ok(core)
}

/// Fill in spectrum, compatibility residual and the partial bound.
pub fn complete_sample(core: TransitionCore, g: &SymplecticPotential) -> TransitionSample {
    let n = core.du.nrows();
    let eigenvalues = match &core.source_hess {
        // Hess u · x = λ G(U) x, written as the symmetric Lᵀ G⁻¹ L with Hess u = L Lᵀ
        Some(h) => match h.clone().cholesky() {
            Some(ch) => {
                let l = ch.l();
                let s = symmetrize(l.transpose() * &core.g_inv * &l);
                let mut ev: Vec<f64> = s.symmetric_eigenvalues().iter().copied().collect();
                ev.sort_by(f64::total_cmp);
                ev
            }
            None => real_spectrum(&core.du),
        },
        None => real_spectrum(&core.du),
    };
    let trace = core.du.trace();
    let det = core.du.clone().determinant();
    let compat_residual = compat_of(&core.g_inv, &core.du);
    let dq = g.polytope().min_distance(&core.image);
    let partial_bound = if dq >= g.h_switch() && dq > crate::potential::EVAL_FLOOR {
        // Σ ∂U^j/∂y^i ∂U^l/∂y^k g^{ik} g_{jl}
        match core.g_inv.clone().try_inverse() {
            Some(gm) => (gm * &core.du * &core.g_inv * core.du.transpose()).trace(),
            None => (&core.du * &core.du).trace(),
        }
    } else {
        (&core.du * &core.du).trace()
    };
    debug_assert_eq!(eigenvalues.len(), n);
    TransitionSample {
        y: core.y,
        image: core.image,
        du: core.du,
        g_inv: core.g_inv,
        eigenvalues,
        trace,
        det,
        compat_residual,
        partial_bound,
        path: core.path,
    }
}

fn real_spectrum(m: &DMatrix<f64>) -> Vec<f64> {
    let mut ev: Vec<f64> = m.clone().complex_eigenvalues().iter().map(|z| z.re).collect();
    ev.sort_by(f64::total_cmp);
    ev
}

pub fn transition_core_at(pair: &GeometryPair, y: &DVector<f64>) -> Result<TransitionCore, TransitionError> {
    transition_core(
        pair.p(),
        pair.source.h_switch(),
        y,
        &pair.source.jet(y),
        &pair.target,
        None,
    )
}

pub fn transition_at(pair: &GeometryPair, y: &DVector<f64>) -> Result<TransitionSample, TransitionError> {
    Ok(complete_sample(transition_core_at(pair, y)?, &pair.target))
}

pub fn compatibility_residual(pair: &GeometryPair, y: &DVector<f64>) -> Result<f64, TransitionError> {
    let core = transition_core_at(pair, y)?;
    Ok(compat_of(&core.g_inv, &core.du))
}

/// Central finite-difference Jacobian of `U` at step `h`.
pub fn fd_jacobian(pair: &GeometryPair, y: &DVector<f64>, h: f64) -> Result<DMatrix<f64>, TransitionError> {
    let n = y.len();
    let mut jac = DMatrix::zeros(n, n);
    for k in 0..n {
        let mut yp = y.clone();
        let mut ym = y.clone();
        yp[k] += h;
        ym[k] -= h;
        let up = transition_core_at(pair, &yp)?.image;
        let um = transition_core_at(pair, &ym)?.image;
        jac.set_column(k, &((up - um) / (2.0 * h)));
    }
    Ok(jac)
}

/// Compatibility residual with `DU` replaced by a finite-difference Jacobian.
pub fn fd_compatibility_residual(pair: &GeometryPair, y: &DVector<f64>, h: f64) -> Result<f64, TransitionError> {
    let core = transition_core_at(pair, y)?;
    Ok(compat_of(&core.g_inv, &fd_jacobian(pair, y, h)?))
}

/// `det(I + t DU)` for each `t`.
pub fn characteristic_check(pair: &GeometryPair, y: &DVector<f64>, ts: &[f64]) -> Result<Vec<f64>, TransitionError> {
    let core = transition_core_at(pair, y)?;
    let n = y.len();
    Ok(ts
        .iter()
        .map(|&t| (DMatrix::identity(n, n) + &core.du * t).determinant())
        .collect())
}

/// Trace of `DU` restricted to the tangent space of a face.
pub fn face_trace(du: &DMatrix<f64>, face: &Face) -> f64 {
    let n = du.nrows();
    if face.dim == n {
        return du.trace();
    }
    let p = face.dim;
    let t = DMatrix::from_fn(n, p, |i, j| face.tangent_basis[j][i] as f64);
    let tt = t.transpose() * &t;
    let m = tt
        .lu()
        .solve(&(t.transpose() * du * &t))
        .expect("tangent basis has full rank");
    m.trace()
}

/// `∫_F tr(DU|_TF) dσ_F` by Gauss quadrature on the exact triangulation of `F`.
pub fn face_trace_integral(pair: &GeometryPair, face: &Face, quad_order: usize) -> Result<f64, TransitionError> {
    if face.dim == 0 {
        return Err(TransitionError::PointFace);
    }
    let mut total = 0.0;
    for (pt, w) in face_rule(pair.p(), face, quad_order) {
        let core = transition_core_at(pair, &pt)?;
        total += w * face_trace(&core.du, face);
    }
    Ok(total)
}

/// `½ ∫_P (tr DU)² dy` by Gauss quadrature on the triangulation of `P`.
pub fn energy(pair: &GeometryPair, quad_order: usize) -> Result<f64, TransitionError> {
    let mut total = 0.0;
    for (pt, w) in face_rule(pair.p(), pair.p().top_face(), quad_order) {
        let tr = transition_core_at(pair, &pt)?.trace();
        total += w * tr * tr;
    }
    Ok(0.5 * total)
}

/// `∫_P tr DU dy` with one centroid sample per clipped grid cell of spacing `h`.
pub fn trace_integral_grid(pair: &GeometryPair, h: f64) -> Result<f64, TransitionError> {
    let grid = Grid::covering(pair.p(), h);
    let mut total = 0.0;
    for cell in grid_cells(pair.p(), &grid) {
        total += cell.volume * transition_core_at(pair, &cell.centroid)?.trace();
    }
    Ok(total)
}

/// The unique `y ∈ P` with `U(y) = z`.
pub fn inverse_point(pair: &GeometryPair, z: &DVector<f64>) -> Result<DVector<f64>, TransitionError> {
    inverse_point_with(pair.p(), z, |y| transition_core_at(pair, y))
}

/// Damped Newton on `U(y) − z` for any evaluator of the transition map.
pub fn inverse_point_with<F>(p: &DelzantPolytope, z: &DVector<f64>, eval: F) -> Result<DVector<f64>, TransitionError>
where
    F: Fn(&DVector<f64>) -> Result<TransitionCore, TransitionError>,
{
    let tol = 1e-12 * (1.0 + z.norm());
    let mut y = p.vertex_centroid();
    let mut core = eval(&y)?;
    let mut r = &core.image - z;
    for it in 0..100 {
        if r.norm() <= tol {
            return Ok(y);
        }
        let step = core
            .du
            .clone()
            .lu()
            .solve(&(-&r))
            .ok_or(PotentialError::NewtonDivergence {
                iterations: it,
                residual: r.norm(),
            })?;
        let mut alpha = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let cand = &y + &step * alpha;
            if p.min_distance(&cand) > 0.0 {
                if let Ok(c) = eval(&cand) {
                    let rc = &c.image - z;
                    if rc.norm() < r.norm() {
                        y = cand;
                        core = c;
                        r = rc;
                        accepted = true;
                        break;
                    }
                }
            }
            alpha *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    if r.norm() <= 1e3 * tol {
        return Ok(y);
    }
    Err(PotentialError::NewtonDivergence {
        iterations: 100,
        residual: r.norm(),
    }
    .into())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::CompiledExpr;
    use crate::polytope::{blowup_polytope, trace_class_integral, volume};
    use crate::potential::{canonical_potential, Correction};
    use crate::rational::{int, parse_rational};

    fn trapezoid(a: &str) -> Arc<DelzantPolytope> {
        Arc::new(blowup_polytope(2, parse_rational(a).unwrap()).unwrap())
    }

    fn pair(a: &str, v: Option<&str>) -> GeometryPair {
        let p = trapezoid("2");
        let q = trapezoid(a);
        let corr = match v {
            Some(src) => Correction::Expr(CompiledExpr::new(src, 2).unwrap()),
            None => Correction::Zero,
        };
        GeometryPair::new(SymplecticPotential::new(p, corr).unwrap(), canonical_potential(q)).unwrap()
    }

    fn v2(a: f64, b: f64) -> DVector<f64> {
        DVector::from_vec(vec![a, b])
    }

    #[test]
    fn identity_pair() {
        let pr = pair("2", None);
        for y in [v2(0.5, 0.9), v2(1.0, 0.0), v2(0.3, 0.7), v2(1.1, 1e-5)] {
            let s = transition_at(&pr, &y).unwrap();
            assert!((&s.image - &y).norm() < 1e-10);
            assert!((&s.du - DMatrix::identity(2, 2)).amax() < 1e-8);
            assert!((s.trace - 2.0).abs() < 1e-8 && (s.det - 1.0).abs() < 1e-8);
            assert!(s.compat_residual < 1e-10);
        }
    }

    #[test]
    fn vertices_are_fixed() {
        let pr = pair("1.1", Some("0.1*y1*y2"));
        for (vp, vq) in pr.p().vertices().iter().zip(pr.q().vertices()) {
            let s = transition_at(&pr, &vp.coords).unwrap();
            assert!((&s.image - &vq.coords).norm() < 1e-12);
            assert_eq!(s.path, EvalPath::Chart);
        }
    }

    #[test]
    fn diagonal_symmetry_and_inverse() {
        let pr = pair("1.1", None);
        let s = transition_at(&pr, &v2(0.7, 0.7)).unwrap();
        assert!((s.image[0] - s.image[1]).abs() < 1e-12);
        let z = v2(0.6, 0.45);
        let y = inverse_point(&pr, &z).unwrap();
        assert!((transition_at(&pr, &y).unwrap().image - &z).norm() < 1e-9);
        let y = inverse_point(&pr, &v2(0.525, 0.525)).unwrap();
        assert!((y[0] - y[1]).abs() < 1e-10);
    }

    #[test]
    fn spectrum_and_compatibility() {
        let pr = pair("1.1", Some("0.05*y1^2 + 0.1*sin(y2)"));
        for y in [v2(0.5, 0.9), v2(1.3, 0.2), v2(0.2, 0.85), v2(1.2, 1e-4)] {
            let s = transition_at(&pr, &y).unwrap();
            assert!(s.eigenvalues.iter().all(|&l| l > 0.0));
            let sum: f64 = s.eigenvalues.iter().sum();
            let prod: f64 = s.eigenvalues.iter().product();
            assert!((sum - s.trace).abs() < 1e-8 * s.trace.abs());
            assert!((prod - s.det).abs() < 1e-8 * s.det.abs());
            assert!(s.det <= (s.trace / 2.0).powi(2) * (1.0 + 1e-12));
            assert!(s.partial_bound < s.trace * s.trace);
            assert!(s.compat_residual < 1e-8);
        }
        let y = v2(0.6, 0.8);
        let e1 = fd_compatibility_residual(&pr, &y, 1e-3).unwrap();
        let e2 = fd_compatibility_residual(&pr, &y, 5e-4).unwrap();
        assert!(e2 < e1 && e1 / e2 > 3.0, "{e1} {e2}");
        let ch = characteristic_check(&pr, &y, &[0.0, 1e-6]).unwrap();
        assert!((ch[0] - 1.0).abs() < 1e-14);
        let tr = transition_at(&pr, &y).unwrap().trace;
        assert!(((ch[1] - 1.0) / 1e-6 - tr).abs() < 1e-5);
    }

    #[test]
    fn face_integrals_are_class_invariant() {
        for v in [None, Some("0.1*y1*y2 + 0.05*y1^2")] {
            let pr = pair("1.1", v);
            let edge = pr.p().face_by_facets(&[3]).unwrap().clone();
            let fi = face_trace_integral(&pr, &edge, 8).unwrap();
            assert!((fi - 1.0).abs() < 1e-6, "{fi}");
            let top = pr.p().top_face().clone();
            let ti = face_trace_integral(&pr, &top, 10).unwrap();
            let want = trace_class_integral(pr.p(), pr.q()).unwrap();
            assert!((ti - want).abs() < 1e-4 * want, "{ti} vs {want}");
        }
        let id = pair("2", None);
        let top = id.p().top_face().clone();
        assert!((face_trace_integral(&id, &top, 4).unwrap() - 2.0 * volume(id.p())).abs() < 1e-8);
        assert!((energy(&id, 4).unwrap() - 0.5 * 4.0 * volume(id.p())).abs() < 1e-8);
        let e = energy(&pair("2", Some("0.2*y1^2")), 8).unwrap();
        assert!(e >= 3.0 - 1e-9);
        let _ = int(0);
    }
}
