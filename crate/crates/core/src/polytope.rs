//! Delzant polytopes, their face lattice, lattice-normalized volumes, Minkowski
//! sums within a common normal fan, and the face-wise stability inequality.
//!
//! Everything combinatorial is exact: vertices are solved over the rationals,
//! the Delzant determinant test is an integer test, and face volumes come out
//! of an exact triangulation. Floating point only appears in the accessors
//! used by the numerical layers above.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use nalgebra::{DMatrix, DVector};
use num_integer::Integer;
use num_traits::{One, Signed, ToPrimitive, Zero};
use serde::Serialize;
use thiserror::Error;

use crate::rational::{self, int, parse_rational, to_f64, Rational};

/// Default absolute tolerance for the pass/marginal/violated split.
pub const STABILITY_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolytopeError {
    #[error("dimension must be at least 1")]
    ZeroDimension,
    #[error("facet {facet}: expected {expected} normal entries, found {found}")]
    DimensionMismatch {
        facet: usize,
        expected: usize,
        found: usize,
    },
    #[error("facet {facet}: normal {normal:?} is not primitive")]
    NonPrimitiveNormal { facet: usize, normal: Vec<i64> },
    #[error("polytope is unbounded")]
    Unbounded,
    #[error("polytope has empty interior")]
    EmptyInterior,
    #[error("vertex {vertex} violates the Delzant condition: {reason}")]
    NotDelzant { vertex: String, reason: String },
    #[error("facet {facet} is redundant (never supports a face of codimension one)")]
    RedundantFacet { facet: usize },
    #[error("polytopes do not share the same facet normals")]
    NormalMismatch,
    #[error("t must be non-negative")]
    NegativeScale,
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
}

/// A vertex with its tight facets and the primitive edge vectors leaving it.
#[derive(Debug, Clone)]
pub struct Vertex {
    /// Exact coordinates.
    pub point: Vec<Rational>,
    pub coords: DVector<f64>,
    /// Indices of the `n` facets through this vertex, sorted.
    pub facets: Vec<usize>,
    /// `edges[j]` is the primitive edge vector with `<u_{facets[i]}, e_j> = δ_ij`.
    pub edges: Vec<Vec<i64>>,
    /// Columns are the edge vectors.
    pub edge_matrix: DMatrix<f64>,
    /// Rows are the normals of `facets`; inverse of `edge_matrix`.
    pub normal_matrix: DMatrix<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Face {
    /// Facets whose intersection is this face, sorted.
    pub facet_ids: Vec<usize>,
    pub dim: usize,
    /// Lattice basis of the tangent lattice `TF ∩ M`.
    pub tangent_basis: Vec<Vec<i64>>,
    /// Indices into `DelzantPolytope::vertices`.
    pub vertices: Vec<usize>,
    /// Vertex whose edge basis defines `tangent_basis`.
    pub anchor: usize,
}

#[derive(Debug, Clone)]
pub struct DelzantPolytope {
    dim: usize,
    normals: Vec<Vec<i64>>,
    offsets: Vec<Rational>,
    normal_rows: DMatrix<f64>,
    offsets_f64: DVector<f64>,
    vertices: Vec<Vertex>,
    faces: Vec<Face>,
    face_index: HashMap<Vec<usize>, usize>,
}

impl DelzantPolytope {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_facets(&self) -> usize {
        self.normals.len()
    }

    pub fn normals(&self) -> &[Vec<i64>] {
        &self.normals
    }

    pub fn offsets(&self) -> &[Rational] {
        &self.offsets
    }

    pub fn offsets_f64(&self) -> &DVector<f64> {
        &self.offsets_f64
    }

    /// `m × n` matrix whose rows are the facet normals.
    pub fn normal_rows(&self) -> &DMatrix<f64> {
        &self.normal_rows
    }

    pub fn vertices(&self) -> &[Vertex] {
        &self.vertices
    }

    pub fn faces(&self) -> &[Face] {
        &self.faces
    }

    pub fn face_by_facets(&self, facet_ids: &[usize]) -> Option<&Face> {
        let mut key = facet_ids.to_vec();
        key.sort_unstable();
        self.face_index.get(&key).map(|&i| &self.faces[i])
    }

    pub fn top_face(&self) -> &Face {
        self.face_by_facets(&[]).expect("full polytope is always a face")
    }

    /// `d_i(y) = <u_i, y> + b_i` for every facet.
    pub fn distances(&self, y: &DVector<f64>) -> DVector<f64> {
        &self.normal_rows * y + &self.offsets_f64
    }

    pub fn distance(&self, facet: usize, y: &DVector<f64>) -> f64 {
        self.normal_rows.row(facet).dot(&y.transpose()) + self.offsets_f64[facet]
    }

    pub fn min_distance(&self, y: &DVector<f64>) -> f64 {
        self.distances(y).min()
    }

    pub fn contains(&self, y: &DVector<f64>, tol: f64) -> bool {
        self.min_distance(y) >= -tol
    }

    /// Euclidean distance to the boundary (facet distances divided by |u_i|).
    pub fn euclidean_boundary_distance(&self, y: &DVector<f64>) -> f64 {
        let d = self.distances(y);
        (0..self.num_facets())
            .map(|i| d[i] / self.normal_rows.row(i).norm())
            .fold(f64::INFINITY, f64::min)
    }

    pub fn bounding_box(&self) -> (DVector<f64>, DVector<f64>) {
        let n = self.dim;
        let mut lo = DVector::from_element(n, f64::INFINITY);
        let mut hi = DVector::from_element(n, f64::NEG_INFINITY);
        for v in &self.vertices {
            for k in 0..n {
                lo[k] = lo[k].min(v.coords[k]);
                hi[k] = hi[k].max(v.coords[k]);
            }
        }
        (lo, hi)
    }

    pub fn diameter(&self) -> f64 {
        let mut best: f64 = 0.0;
        for (i, a) in self.vertices.iter().enumerate() {
            for b in &self.vertices[i + 1..] {
                best = best.max((&a.coords - &b.coords).norm());
            }
        }
        best
    }

    pub fn vertex_centroid(&self) -> DVector<f64> {
        let mut c = DVector::zeros(self.dim);
        for v in &self.vertices {
            c += &v.coords;
        }
        c / self.vertices.len() as f64
    }

    /// Vertex chart best suited to evaluate near `y`: the vertex whose
    /// non-incident facets are all as far from `y` as possible.
    pub fn best_chart(&self, y: &DVector<f64>) -> usize {
        let d = self.distances(y);
        let mut best = (f64::NEG_INFINITY, 0usize);
        for (idx, v) in self.vertices.iter().enumerate() {
            let far = (0..self.num_facets())
                .filter(|k| v.facets.binary_search(k).is_err())
                .map(|k| d[k])
                .fold(f64::INFINITY, f64::min);
            if far > best.0 {
                best = (far, idx);
            }
        }
        best.1
    }

    /// Index of the vertex with the given tight-facet set.
    pub fn vertex_by_facets(&self, facets: &[usize]) -> Option<usize> {
        self.vertices.iter().position(|v| v.facets == facets)
    }

    pub fn same_normals(&self, other: &DelzantPolytope) -> bool {
        self.normals == other.normals
    }

    /// Face points in floating point.
    pub fn face_points(&self, face: &Face) -> Vec<DVector<f64>> {
        face.vertices.iter().map(|&i| self.vertices[i].coords.clone()).collect()
    }
}

impl fmt::Display for DelzantPolytope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&to_text(self))
    }
}

fn gcd_all(v: &[i64]) -> i64 {
    v.iter().fold(0i64, |g, &x| g.gcd(&x))
}

fn combinations(m: usize, k: usize) -> Vec<Vec<usize>> {
    fn rec(start: usize, m: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..m {
            if m - i < k - cur.len() {
                break;
            }
            cur.push(i);
            rec(i + 1, m, k, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(0, m, k, &mut Vec::new(), &mut out);
    out
}

fn exact_distance(normal: &[i64], offset: &Rational, y: &[Rational]) -> Rational {
    let mut acc = offset.clone();
    for (u, x) in normal.iter().zip(y) {
        acc += int(*u) * x;
    }
    acc
}

fn point_label(p: &[Rational]) -> String {
    let parts: Vec<String> = p.iter().map(rational::format_rational).collect();
    format!("({})", parts.join(", "))
}

fn integer_rank(normals: &[Vec<i64>], n: usize) -> usize {
    let mut rows: Vec<Vec<Rational>> = normals.iter().map(|r| r.iter().map(|&x| int(x)).collect()).collect();
    let mut rank = 0;
    for col in 0..n {
        let Some(piv) = (rank..rows.len()).find(|&r| !rows[r][col].is_zero()) else {
            continue;
        };
        rows.swap(piv, rank);
        for r in 0..rows.len() {
            if r != rank && !rows[r][col].is_zero() {
                let factor = &rows[r][col] / &rows[rank][col];
                for c in col..n {
                    let sub = &factor * &rows[rank][c];
                    rows[r][c] -= sub;
                }
            }
        }
        rank += 1;
    }
    rank
}

/// Validate facet data and build the polytope `{y : <u_i, y> + b_i >= 0}`.
pub fn build_polytope(normals: Vec<Vec<i64>>, offsets: Vec<Rational>) -> Result<DelzantPolytope, PolytopeError> {
    let n = normals.first().map(|u| u.len()).unwrap_or(0);
    if n == 0 {
        return Err(PolytopeError::ZeroDimension);
    }
    if offsets.len() != normals.len() {
        return Err(PolytopeError::Parse {
            line: 0,
            message: format!("{} normals but {} offsets", normals.len(), offsets.len()),
        });
    }
    for (i, u) in normals.iter().enumerate() {
        if u.len() != n {
            return Err(PolytopeError::DimensionMismatch {
                facet: i,
                expected: n,
                found: u.len(),
            });
        }
        if gcd_all(u) != 1 {
            return Err(PolytopeError::NonPrimitiveNormal {
                facet: i,
                normal: u.clone(),
            });
        }
    }
    let m = normals.len();
    if m < n + 1 || integer_rank(&normals, n) < n {
        return Err(PolytopeError::Unbounded);
    }

    // vertices: feasible solutions of every n-subset of facet equations
    let mut found: BTreeMap<Vec<Rational>, ()> = BTreeMap::new();
    for subset in combinations(m, n) {
        let a: Vec<Vec<Rational>> = subset
            .iter()
            .map(|&i| normals[i].iter().map(|&x| int(x)).collect())
            .collect();
        let b: Vec<Rational> = subset.iter().map(|&i| -offsets[i].clone()).collect();
        let Some(y) = rational::solve(a, b) else { continue };
        let feasible = (0..m).all(|k| !exact_distance(&normals[k], &offsets[k], &y).is_negative());
        if feasible {
            found.insert(y, ());
        }
    }
    if found.is_empty() {
        return Err(PolytopeError::EmptyInterior);
    }
    let points: Vec<Vec<Rational>> = found.into_keys().collect();

    let tight_sets: Vec<Vec<usize>> = points
        .iter()
        .map(|p| {
            (0..m)
                .filter(|&k| exact_distance(&normals[k], &offsets[k], p).is_zero())
                .collect()
        })
        .collect();

    // every edge ray leaving a simple vertex must be cut by some facet
    for tight in tight_sets.iter().filter(|t| t.len() == n) {
        let rows: Vec<Vec<Rational>> = tight
            .iter()
            .map(|&i| normals[i].iter().map(|&x| int(x)).collect())
            .collect();
        let Some(inv) = rational::inverse(&rows) else { continue };
        for j in 0..n {
            let blocked = (0..m).any(|k| {
                let s = (0..n).fold(Rational::zero(), |acc, i| acc + int(normals[k][i]) * &inv[i][j]);
                s.is_negative()
            });
            if !blocked {
                return Err(PolytopeError::Unbounded);
            }
        }
    }

    // centroid of the vertices lies in the relative interior
    let count = int(points.len() as i64);
    let centroid: Vec<Rational> = (0..n)
        .map(|k| points.iter().fold(Rational::zero(), |acc, p| acc + &p[k]) / &count)
        .collect();
    if (0..m).any(|k| exact_distance(&normals[k], &offsets[k], &centroid).is_zero()) {
        return Err(PolytopeError::EmptyInterior);
    }

    let mut vertices = Vec::with_capacity(points.len());
    for (p, tight) in points.into_iter().zip(tight_sets) {
        if tight.len() != n {
            return Err(PolytopeError::NotDelzant {
                vertex: point_label(&p),
                reason: format!("{} facets meet (expected {n})", tight.len()),
            });
        }
        let rows: Vec<Vec<Rational>> = tight
            .iter()
            .map(|&i| normals[i].iter().map(|&x| int(x)).collect())
            .collect();
        let det = rational::det(rows.clone());
        if det.abs() != Rational::one() {
            return Err(PolytopeError::NotDelzant {
                vertex: point_label(&p),
                reason: format!("normal determinant {det} is not ±1"),
            });
        }
        let inv = rational::inverse(&rows).expect("unimodular matrix is invertible");
        let edges: Vec<Vec<i64>> = (0..n)
            .map(|j| (0..n).map(|i| inv[i][j].to_integer().to_i64().unwrap()).collect())
            .collect();
        let edge_matrix = DMatrix::from_fn(n, n, |i, j| edges[j][i] as f64);
        let normal_matrix = DMatrix::from_fn(n, n, |i, j| normals[tight[i]][j] as f64);
        let coords = DVector::from_iterator(n, p.iter().map(to_f64));
        vertices.push(Vertex {
            point: p,
            coords,
            facets: tight,
            edges,
            edge_matrix,
            normal_matrix,
        });
    }

    for k in 0..m {
        if !vertices.iter().any(|v| v.facets.contains(&k)) {
            return Err(PolytopeError::RedundantFacet { facet: k });
        }
    }

    let normal_rows = DMatrix::from_fn(m, n, |i, j| normals[i][j] as f64);
    let offsets_f64 = DVector::from_iterator(m, offsets.iter().map(to_f64));
    let mut poly = DelzantPolytope {
        dim: n,
        normals,
        offsets,
        normal_rows,
        offsets_f64,
        vertices,
        faces: Vec::new(),
        face_index: HashMap::new(),
    };
    let faces = collect_faces(&poly);
    poly.face_index = faces
        .iter()
        .enumerate()
        .map(|(i, f)| (f.facet_ids.clone(), i))
        .collect();
    poly.faces = faces;
    Ok(poly)
}

fn collect_faces(p: &DelzantPolytope) -> Vec<Face> {
    let n = p.dim;
    let mut seen: BTreeMap<(usize, Vec<usize>), Face> = BTreeMap::new();
    for (vi, v) in p.vertices.iter().enumerate() {
        for mask in 0u32..(1u32 << n) {
            let ids: Vec<usize> = (0..n).filter(|j| mask & (1 << j) != 0).map(|j| v.facets[j]).collect();
            let dim = n - ids.len();
            let key = (dim, ids.clone());
            if seen.contains_key(&key) {
                continue;
            }
            let tangent_basis: Vec<Vec<i64>> = (0..n)
                .filter(|j| mask & (1 << j) == 0)
                .map(|j| v.edges[j].clone())
                .collect();
            let verts: Vec<usize> = p
                .vertices
                .iter()
                .enumerate()
                .filter(|(_, w)| ids.iter().all(|i| w.facets.contains(i)))
                .map(|(i, _)| i)
                .collect();
            seen.insert(
                key,
                Face {
                    facet_ids: ids,
                    dim,
                    tangent_basis,
                    vertices: verts,
                    anchor: vi,
                },
            );
        }
    }
    seen.into_values().collect()
}

/// All faces of every dimension, ordered by dimension then facet ids.
pub fn enumerate_faces(p: &DelzantPolytope) -> &[Face] {
    p.faces()
}

fn face_simplices(p: &DelzantPolytope, face: &Face) -> Vec<Vec<Vec<Rational>>> {
    if face.dim == 0 {
        return vec![vec![p.vertices[face.vertices[0]].point.clone()]];
    }
    let n = p.dim;
    let count = int(face.vertices.len() as i64);
    let apex: Vec<Rational> = (0..n)
        .map(|k| {
            face.vertices
                .iter()
                .fold(Rational::zero(), |acc, &i| acc + &p.vertices[i].point[k])
                / &count
        })
        .collect();
    let mut out = Vec::new();
    for k in 0..p.num_facets() {
        if face.facet_ids.contains(&k) {
            continue;
        }
        let mut ids = face.facet_ids.clone();
        ids.push(k);
        ids.sort_unstable();
        let Some(sub) = p.face_by_facets(&ids) else { continue };
        if sub.dim + 1 != face.dim {
            continue;
        }
        for mut s in face_simplices(p, sub) {
            s.push(apex.clone());
            out.push(s);
        }
    }
    out
}

/// Exact volume of a face in its lattice-normalized measure σ_F.
pub fn lattice_volume_exact(p: &DelzantPolytope, face: &Face) -> Rational {
    if face.dim == 0 {
        return Rational::one();
    }
    let anchor = &p.vertices[face.anchor];
    let coord_facets: Vec<usize> = anchor
        .facets
        .iter()
        .copied()
        .filter(|k| !face.facet_ids.contains(k))
        .collect();
    let coords = |y: &[Rational]| -> Vec<Rational> {
        coord_facets
            .iter()
            .map(|&k| exact_distance(&p.normals[k], &p.offsets[k], y))
            .collect()
    };
    let mut total = Rational::zero();
    for simplex in face_simplices(p, face) {
        let c: Vec<Vec<Rational>> = simplex.iter().map(|x| coords(x)).collect();
        let m: Vec<Vec<Rational>> = (1..c.len())
            .map(|i| (0..face.dim).map(|k| &c[i][k] - &c[0][k]).collect())
            .collect();
        total += rational::det(m).abs();
    }
    total / rational::factorial(face.dim)
}

/// Exact triangulation of a face: simplex vertices in floating point together
/// with each simplex's σ_F-volume.
pub fn face_triangulation(p: &DelzantPolytope, face: &Face) -> Vec<(Vec<DVector<f64>>, f64)> {
    let f64_point = |x: &[Rational]| DVector::from_iterator(x.len(), x.iter().map(to_f64));
    if face.dim == 0 {
        return vec![(vec![p.vertices[face.vertices[0]].coords.clone()], 1.0)];
    }
    let anchor = &p.vertices[face.anchor];
    let coord_facets: Vec<usize> = anchor
        .facets
        .iter()
        .copied()
        .filter(|k| !face.facet_ids.contains(k))
        .collect();
    let scale = rational::factorial(face.dim);
    face_simplices(p, face)
        .into_iter()
        .map(|simplex| {
            let c: Vec<Vec<Rational>> = simplex
                .iter()
                .map(|x| {
                    coord_facets
                        .iter()
                        .map(|&k| exact_distance(&p.normals[k], &p.offsets[k], x))
                        .collect()
                })
                .collect();
            let m: Vec<Vec<Rational>> = (1..c.len())
                .map(|i| (0..face.dim).map(|k| &c[i][k] - &c[0][k]).collect())
                .collect();
            let vol = to_f64(&(rational::det(m).abs() / &scale));
            (simplex.iter().map(|x| f64_point(x)).collect(), vol)
        })
        .collect()
}

pub fn lattice_volume(p: &DelzantPolytope, face: &Face) -> f64 {
    to_f64(&lattice_volume_exact(p, face))
}

pub fn volume_exact(p: &DelzantPolytope) -> Rational {
    lattice_volume_exact(p, p.top_face())
}

pub fn volume(p: &DelzantPolytope) -> f64 {
    to_f64(&volume_exact(p))
}

/// `P + tQ` for polytopes with a common normal fan: offsets add.
pub fn minkowski_sum_offsets(
    p: &DelzantPolytope,
    q: &DelzantPolytope,
    t: &Rational,
) -> Result<DelzantPolytope, PolytopeError> {
    if !p.same_normals(q) {
        return Err(PolytopeError::NormalMismatch);
    }
    if t.is_negative() {
        return Err(PolytopeError::NegativeScale);
    }
    let offsets = p.offsets.iter().zip(&q.offsets).map(|(a, b)| a + t * b).collect();
    build_polytope(p.normals.clone(), offsets)
}

/// Monomial coefficients of the exact polynomial through `(k, values[k])`, k = 0..deg.
fn interpolate_integer_nodes(values: &[Rational]) -> Vec<Rational> {
    let m = values.len();
    let a: Vec<Vec<Rational>> = (0..m)
        .map(|k| (0..m).map(|j| num_traits::pow(int(k as i64), j)).collect())
        .collect();
    rational::solve(a, values.to_vec()).expect("Vandermonde on distinct nodes")
}

/// Coefficients of `t ↦ vol_σ(F_t)` where `F_t` is the face of `P + tQ` with the
/// same facet ids as `face`; degree `face.dim`, exact.
pub fn face_volume_polynomial(
    p: &DelzantPolytope,
    q: &DelzantPolytope,
    face: &Face,
) -> Result<Vec<Rational>, PolytopeError> {
    let mut values = Vec::with_capacity(face.dim + 1);
    for k in 0..=face.dim {
        let pt = minkowski_sum_offsets(p, q, &int(k as i64))?;
        let f = pt
            .face_by_facets(&face.facet_ids)
            .ok_or(PolytopeError::NormalMismatch)?;
        values.push(lattice_volume_exact(&pt, f));
    }
    Ok(interpolate_integer_nodes(&values))
}

/// Coefficients of `vol(P + tQ)`.
pub fn volume_polynomial(p: &DelzantPolytope, q: &DelzantPolytope) -> Result<Vec<Rational>, PolytopeError> {
    face_volume_polynomial(p, q, p.top_face())
}

/// `d/dt vol(P + tQ)` at `t = 0`, i.e. `n V(P[n-1], Q)`.
pub fn trace_class_integral_exact(p: &DelzantPolytope, q: &DelzantPolytope) -> Result<Rational, PolytopeError> {
    Ok(volume_polynomial(p, q)?.swap_remove(1))
}

pub fn trace_class_integral(p: &DelzantPolytope, q: &DelzantPolytope) -> Result<f64, PolytopeError> {
    trace_class_integral_exact(p, q).map(|r| to_f64(&r))
}

pub fn compute_nc_exact(p: &DelzantPolytope, q: &DelzantPolytope) -> Result<Rational, PolytopeError> {
    Ok(trace_class_integral_exact(p, q)? / volume_exact(p))
}

pub fn compute_nc(p: &DelzantPolytope, q: &DelzantPolytope) -> Result<f64, PolytopeError> {
    compute_nc_exact(p, q).map(|r| to_f64(&r))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Pass,
    Marginal,
    Violated,
}

#[derive(Debug, Clone, Serialize)]
pub struct FaceStability {
    pub facet_ids: Vec<usize>,
    pub dim: usize,
    pub lhs: f64,
    pub lhs_exact: String,
    pub verdict: Verdict,
}

#[derive(Debug, Clone, Serialize)]
pub struct StabilityReport {
    pub nc: f64,
    pub nc_exact: String,
    pub tol: f64,
    pub per_face: Vec<FaceStability>,
}

impl StabilityReport {
    pub fn any(&self, verdict: Verdict) -> bool {
        self.per_face.iter().any(|f| f.verdict == verdict)
    }

    pub fn faces_with(&self, verdict: Verdict) -> impl Iterator<Item = &FaceStability> {
        self.per_face.iter().filter(move |f| f.verdict == verdict)
    }
}

pub fn classify_lhs(lhs: f64, nc: f64, tol: f64) -> Verdict {
    if (lhs - nc).abs() <= tol {
        Verdict::Marginal
    } else if lhs > nc + tol {
        Verdict::Violated
    } else {
        Verdict::Pass
    }
}

/// Average face trace `p V_TF(F[p-1], F') / vol(F)` against `nc`, for every
/// proper face of dimension `1..n-1`.
pub fn check_face_stability(
    p: &DelzantPolytope,
    q: &DelzantPolytope,
    tol: f64,
) -> Result<StabilityReport, PolytopeError> {
    let nc = compute_nc_exact(p, q)?;
    let nc_f = to_f64(&nc);
    let mut per_face = Vec::new();
    for face in p.faces() {
        if face.dim == 0 || face.dim == p.dim {
            continue;
        }
        let poly = face_volume_polynomial(p, q, face)?;
        let lhs = &poly[1] / &poly[0];
        let lhs_f = to_f64(&lhs);
        per_face.push(FaceStability {
            facet_ids: face.facet_ids.clone(),
            dim: face.dim,
            lhs: lhs_f,
            lhs_exact: rational::format_rational(&lhs),
            verdict: classify_lhs(lhs_f, nc_f, tol),
        });
    }
    Ok(StabilityReport {
        nc: nc_f,
        nc_exact: rational::format_rational(&nc),
        tol,
        per_face,
    })
}

/// Parse the text format: `dim n` header, then one `u_1 … u_n b` line per facet.
/// `#` starts a comment.
pub fn parse_polytope_text(text: &str) -> Result<(Vec<Vec<i64>>, Vec<Rational>), PolytopeError> {
    let mut dim: Option<usize> = None;
    let mut normals = Vec::new();
    let mut offsets = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |message: String| PolytopeError::Parse {
            line: lineno + 1,
            message,
        };
        let tokens: Vec<&str> = line.split_whitespace().collect();
        match dim {
            None => {
                if tokens.len() != 2 || tokens[0] != "dim" {
                    return Err(err(format!("expected `dim n` header, found `{line}`")));
                }
                let n: usize = tokens[1]
                    .parse()
                    .map_err(|_| err(format!("bad dimension `{}`", tokens[1])))?;
                if n == 0 {
                    return Err(PolytopeError::ZeroDimension);
                }
                dim = Some(n);
            }
            Some(n) => {
                if tokens.len() != n + 1 {
                    return Err(err(format!(
                        "facet {}: expected {} entries, found {}",
                        normals.len(),
                        n + 1,
                        tokens.len()
                    )));
                }
                let u = tokens[..n]
                    .iter()
                    .map(|t| {
                        t.parse::<i64>()
                            .map_err(|_| err(format!("facet {}: non-integer normal entry `{t}`", normals.len())))
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                let b = parse_rational(tokens[n])
                    .ok_or_else(|| err(format!("facet {}: bad offset `{}`", normals.len(), tokens[n])))?;
                normals.push(u);
                offsets.push(b);
            }
        }
    }
    if dim.is_none() {
        return Err(PolytopeError::Parse {
            line: 0,
            message: "missing `dim n` header".into(),
        });
    }
    Ok((normals, offsets))
}

pub fn polytope_from_text(text: &str) -> Result<DelzantPolytope, PolytopeError> {
    let (normals, offsets) = parse_polytope_text(text)?;
    build_polytope(normals, offsets)
}

pub fn to_text(p: &DelzantPolytope) -> String {
    let mut s = format!("dim {}\n", p.dim);
    for (u, b) in p.normals.iter().zip(&p.offsets) {
        let parts: Vec<String> = u.iter().map(|x| x.to_string()).collect();
        s.push_str(&format!("{} {}\n", parts.join(" "), rational::format_rational(b)));
    }
    s
}

/// The ℙⁿ-blowup polytope `{y >= 0, 1 <= Σy <= b}`.
pub fn blowup_polytope(n: usize, b: Rational) -> Result<DelzantPolytope, PolytopeError> {
    let mut normals = Vec::new();
    let mut offsets = Vec::new();
    for i in 0..n {
        let mut u = vec![0i64; n];
        u[i] = 1;
        normals.push(u);
        offsets.push(Rational::zero());
    }
    normals.push(vec![-1; n]);
    offsets.push(b);
    normals.push(vec![1; n]);
    offsets.push(int(-1));
    build_polytope(normals, offsets)
}

/// `[0, s]^n`.
pub fn cube(n: usize, side: Rational) -> Result<DelzantPolytope, PolytopeError> {
    let mut normals = Vec::new();
    let mut offsets = Vec::new();
    for i in 0..n {
        let mut u = vec![0i64; n];
        u[i] = 1;
        normals.push(u.clone());
        offsets.push(Rational::zero());
        u[i] = -1;
        normals.push(u);
        offsets.push(side.clone());
    }
    build_polytope(normals, offsets)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn q(s: &str) -> Rational {
        parse_rational(s).unwrap()
    }

    fn trapezoid(b: &str) -> DelzantPolytope {
        blowup_polytope(2, q(b)).unwrap()
    }

    #[test]
    fn builds_blowup_trapezoid() {
        let p = build_polytope(
            vec![vec![1, 0], vec![0, 1], vec![-1, -1], vec![1, 1]],
            vec![q("0"), q("0"), q("2"), q("-1")],
        )
        .unwrap();
        let pts: Vec<Vec<Rational>> = p.vertices().iter().map(|v| v.point.clone()).collect();
        for want in [["0", "1"], ["0", "2"], ["1", "0"], ["2", "0"]] {
            assert!(pts.contains(&vec![q(want[0]), q(want[1])]));
        }
        assert_eq!(pts.len(), 4);
    }

    #[test]
    fn unit_square() {
        let p = build_polytope(
            vec![vec![1, 0], vec![0, 1], vec![-1, 0], vec![0, -1]],
            vec![q("0"), q("0"), q("1"), q("1")],
        )
        .unwrap();
        assert_eq!(p.vertices().len(), 4);
        assert_eq!(volume_exact(&p), q("1"));
    }

    #[test]
    fn rejects_non_delzant_vertex() {
        // oracle: at (1,0) the normals (0,1), (-2,-1) have determinant 2
        let m = vec![vec![0i64, 1], vec![-2, -1]];
        assert_eq!(m[0][0] * m[1][1] - m[0][1] * m[1][0], 2);
        let err = build_polytope(vec![vec![1, 0], vec![0, 1], vec![-2, -1]], vec![q("0"), q("0"), q("2")]).unwrap_err();
        assert!(matches!(err, PolytopeError::NotDelzant { .. }), "{err:?}");
    }

    #[test]
    fn rejects_invalid_inputs() {
        assert!(matches!(
            build_polytope(vec![vec![2, 0], vec![0, 1], vec![-1, -1]], vec![q("0"), q("0"), q("1")]),
            Err(PolytopeError::NonPrimitiveNormal { facet: 0, .. })
        ));
        assert_eq!(
            build_polytope(vec![vec![1, 0], vec![0, 1], vec![0, -1]], vec![q("0"), q("0"), q("1")]).unwrap_err(),
            PolytopeError::Unbounded
        );
        assert_eq!(
            build_polytope(vec![vec![1, 0], vec![-1, 0]], vec![q("0"), q("1")]).unwrap_err(),
            PolytopeError::Unbounded
        );
        assert_eq!(
            build_polytope(vec![vec![1], vec![-1]], vec![q("0"), q("-1")]).unwrap_err(),
            PolytopeError::EmptyInterior
        );
        assert_eq!(
            build_polytope(vec![vec![1], vec![-1]], vec![q("0"), q("0")]).unwrap_err(),
            PolytopeError::EmptyInterior
        );
        assert!(matches!(
            build_polytope(
                vec![vec![1, 0], vec![0, 1], vec![-1, -1], vec![-1, 0]],
                vec![q("0"), q("0"), q("1"), q("5")]
            ),
            Err(PolytopeError::RedundantFacet { facet: 3 })
        ));
    }

    #[test]
    fn face_counts() {
        let count = |p: &DelzantPolytope| {
            let mut c = vec![0; p.dim() + 1];
            for f in enumerate_faces(p) {
                c[f.dim] += 1;
            }
            c
        };
        assert_eq!(count(&trapezoid("2")), vec![4, 4, 1]);
        assert_eq!(count(&cube(2, q("1")).unwrap()), vec![4, 4, 1]);
        assert_eq!(count(&cube(3, q("1")).unwrap()), vec![8, 12, 6, 1]);
    }

    #[test]
    fn face_tangent_basis_is_annihilated() {
        let p = cube(3, q("2")).unwrap();
        for f in p.faces() {
            assert_eq!(f.tangent_basis.len(), f.dim);
            for t in &f.tangent_basis {
                for &i in &f.facet_ids {
                    let s: i64 = p.normals()[i].iter().zip(t).map(|(a, b)| a * b).sum();
                    assert_eq!(s, 0);
                }
            }
        }
    }

    #[test]
    fn lattice_volumes() {
        let p = trapezoid("2");
        // shoelace over (1,0),(2,0),(0,2),(0,1)
        let poly = [(1.0, 0.0), (2.0, 0.0), (0.0, 2.0), (0.0, 1.0)];
        let shoelace: f64 = (0..4)
            .map(|i| {
                let (a, b) = (poly[i], poly[(i + 1) % 4]);
                a.0 * b.1 - b.0 * a.1
            })
            .sum::<f64>()
            / 2.0;
        assert_eq!(volume(&p), shoelace.abs());
        assert_eq!(volume_exact(&p), q("1.5"));
        let inner = p.face_by_facets(&[3]).unwrap();
        assert_eq!(lattice_volume_exact(&p, inner), q("1"));
        let outer = p.face_by_facets(&[2]).unwrap();
        assert_eq!(lattice_volume_exact(&p, outer), q("2"));
        let vertex = p.faces().iter().find(|f| f.dim == 0).unwrap();
        assert_eq!(lattice_volume(&p, vertex), 1.0);
        let c3 = cube(3, q("1.5")).unwrap();
        assert_eq!(volume_exact(&c3), q("3.375"));
        let square_face = c3.faces().iter().find(|f| f.dim == 2).unwrap();
        assert_eq!(lattice_volume_exact(&c3, square_face), q("2.25"));
    }

    #[test]
    fn minkowski_offsets_add() {
        let p = trapezoid("2");
        let qq = trapezoid("1.1");
        let s = minkowski_sum_offsets(&p, &qq, &q("1")).unwrap();
        assert_eq!(s.offsets(), &[q("0"), q("0"), q("3.1"), q("-2")]);
        let s0 = minkowski_sum_offsets(&p, &qq, &q("0")).unwrap();
        assert_eq!(s0.offsets(), p.offsets());
        let s2 = minkowski_sum_offsets(&p, &p, &q("1")).unwrap();
        assert_eq!(s2.offsets(), &[q("0"), q("0"), q("4"), q("-2")]);
        let sq = cube(2, q("1")).unwrap();
        assert_eq!(
            minkowski_sum_offsets(&p, &sq, &q("1")).unwrap_err(),
            PolytopeError::NormalMismatch
        );
    }

    #[test]
    fn trace_class_integral_examples() {
        let p = trapezoid("2");
        assert_eq!(trace_class_integral_exact(&p, &p).unwrap(), q("3"));
        // d/dt ((2+1.1t)^2 - (1+t)^2)/2 at 0 = (4.4 - 2)/2
        assert_eq!(trace_class_integral_exact(&p, &trapezoid("1.1")).unwrap(), q("1.2"));
        let s1 = cube(2, q("1")).unwrap();
        let s2 = cube(2, q("2")).unwrap();
        assert_eq!(trace_class_integral_exact(&s1, &s2).unwrap(), q("4"));
    }

    #[test]
    fn nc_examples() {
        let p = trapezoid("2");
        assert_eq!(compute_nc_exact(&p, &p).unwrap(), q("2"));
        assert_eq!(compute_nc_exact(&p, &trapezoid("1.1")).unwrap(), q("0.8"));
        assert_eq!(compute_nc_exact(&p, &trapezoid("1.25")).unwrap(), q("1"));
    }

    #[test]
    fn stability_examples() {
        let p = trapezoid("2");
        let r = check_face_stability(&p, &trapezoid("1.1"), STABILITY_TOL).unwrap();
        let violated: Vec<_> = r.faces_with(Verdict::Violated).collect();
        assert_eq!(violated.len(), 1);
        assert_eq!(violated[0].facet_ids, vec![3]);
        assert_eq!(violated[0].lhs, 1.0);
        let mut others: Vec<f64> = r.faces_with(Verdict::Pass).map(|f| f.lhs).collect();
        others.sort_by(f64::total_cmp);
        assert_eq!(others, vec![0.1, 0.1, 0.55]);

        let r = check_face_stability(&p, &p, STABILITY_TOL).unwrap();
        assert!(r.per_face.iter().all(|f| f.verdict == Verdict::Pass && f.lhs == 1.0));

        let r = check_face_stability(&p, &trapezoid("1.25"), STABILITY_TOL).unwrap();
        let marginal: Vec<_> = r.faces_with(Verdict::Marginal).collect();
        assert_eq!(marginal.len(), 1);
        assert_eq!(marginal[0].facet_ids, vec![3]);
    }

    #[test]
    fn text_format_round_trip() {
        let p = trapezoid("1.1");
        let back = polytope_from_text(&to_text(&p)).unwrap();
        assert_eq!(back.normals(), p.normals());
        assert_eq!(back.offsets(), p.offsets());
        let bad = polytope_from_text("dim 2\n1 0 0\n0 1\n");
        assert!(matches!(bad, Err(PolytopeError::Parse { line: 3, .. })));
        assert!(matches!(
            polytope_from_text("1 0 0"),
            Err(PolytopeError::Parse { line: 1, .. })
        ));
    }
}
