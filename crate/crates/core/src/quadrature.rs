//! Quadrature on polytopes: Gauss rules on the exact face triangulation, and a
//! regular grid of cells clipped to the polytope.

use nalgebra::DVector;

use crate::polytope::{face_triangulation, DelzantPolytope, Face};

/// Gauss–Legendre nodes and weights on `[0, 1]`.
pub fn gauss_legendre(m: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(m >= 1);
    let mut nodes = Vec::with_capacity(m);
    let mut weights = Vec::with_capacity(m);
    for i in 0..m {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (m as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=m {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            if m == 1 {
                p0 = 1.0;
                p1 = x;
            }
            dp = m as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        nodes.push(0.5 * (1.0 - x));
        weights.push(1.0 / ((1.0 - x * x) * dp * dp));
    }
    (nodes, weights)
}

/// Collapsed-coordinate Gauss rule on a simplex; weights sum to `volume`.
pub fn simplex_rule(vertices: &[DVector<f64>], volume: f64, order: usize) -> Vec<(DVector<f64>, f64)> {
    let p = vertices.len() - 1;
    if p == 0 {
        return vec![(vertices[0].clone(), volume)];
    }
    let (x, w) = gauss_legendre(order);
    let mut out = Vec::with_capacity(order.pow(p as u32));
    let mut idx = vec![0usize; p];
    let mut fact = 1.0;
    for k in 2..=p {
        fact *= k as f64;
    }
    loop {
        // P(ξ) = (1−ξ₁)v₀ + ξ₁[(1−ξ₂)v₁ + ξ₂[...]]
        let mut point = vertices[p].clone();
        for level in (0..p).rev() {
            let xi = x[idx[level]];
            point = &vertices[level] * (1.0 - xi) + point * xi;
        }
        let mut weight = volume * fact;
        for (level, &i) in idx.iter().enumerate() {
            weight *= w[i] * x[i].powi((p - 1 - level) as i32);
        }
        out.push((point, weight));
        let mut k = 0;
        loop {
            if k == p {
                return out;
            }
            idx[k] += 1;
            if idx[k] < order {
                break;
            }
            idx[k] = 0;
            k += 1;
        }
    }
}

/// Gauss rule on a face in its lattice measure σ_F.
pub fn face_rule(p: &DelzantPolytope, face: &Face, order: usize) -> Vec<(DVector<f64>, f64)> {
    face_triangulation(p, face)
        .into_iter()
        .flat_map(|(verts, vol)| simplex_rule(&verts, vol, order))
        .collect()
}

/// One grid cell intersected with the polytope.
#[derive(Debug, Clone)]
pub struct Cell {
    pub index: Vec<usize>,
    pub center: DVector<f64>,
    pub centroid: DVector<f64>,
    pub volume: f64,
    pub full: bool,
}

/// Regular axis-aligned grid of spacing `h` anchored at the lower corner of
/// the bounding box.
#[derive(Debug, Clone)]
pub struct Grid {
    pub origin: DVector<f64>,
    pub h: f64,
    pub shape: Vec<usize>,
}

impl Grid {
    pub fn covering(p: &DelzantPolytope, h: f64) -> Grid {
        let (lo, hi) = p.bounding_box();
        let shape = (0..p.dim())
            .map(|k| (((hi[k] - lo[k]) / h) - 1e-9).ceil().max(1.0) as usize)
            .collect();
        Grid { origin: lo, h, shape }
    }

    pub fn center(&self, index: &[usize]) -> DVector<f64> {
        DVector::from_iterator(
            index.len(),
            index
                .iter()
                .enumerate()
                .map(|(k, &i)| self.origin[k] + (i as f64 + 0.5) * self.h),
        )
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn unravel(&self, mut flat: usize) -> Vec<usize> {
        let mut idx = vec![0; self.shape.len()];
        for k in (0..self.shape.len()).rev() {
            idx[k] = flat % self.shape[k];
            flat /= self.shape[k];
        }
        idx
    }

    pub fn ravel(&self, index: &[usize]) -> usize {
        index.iter().zip(&self.shape).fold(0, |acc, (&i, &s)| acc * s + i)
    }
}

fn clip_polygon(poly: Vec<[f64; 2]>, a: [f64; 2], b: f64) -> Vec<[f64; 2]> {
    let inside = |p: &[f64; 2]| a[0] * p[0] + a[1] * p[1] + b;
    let mut out = Vec::with_capacity(poly.len() + 1);
    for i in 0..poly.len() {
        let cur = poly[i];
        let next = poly[(i + 1) % poly.len()];
        let (dc, dn) = (inside(&cur), inside(&next));
        if dc >= 0.0 {
            out.push(cur);
        }
        if (dc >= 0.0) != (dn >= 0.0) {
            let t = dc / (dc - dn);
            out.push([cur[0] + t * (next[0] - cur[0]), cur[1] + t * (next[1] - cur[1])]);
        }
    }
    out
}

fn polygon_area_centroid(poly: &[[f64; 2]]) -> (f64, [f64; 2]) {
    let mut area = 0.0;
    let (mut cx, mut cy) = (0.0, 0.0);
    for i in 0..poly.len() {
        let p = poly[i];
        let q = poly[(i + 1) % poly.len()];
        let cross = p[0] * q[1] - q[0] * p[1];
        area += cross;
        cx += (p[0] + q[0]) * cross;
        cy += (p[1] + q[1]) * cross;
    }
    area *= 0.5;
    if area.abs() < 1e-300 {
        return (0.0, poly.first().copied().unwrap_or([0.0, 0.0]));
    }
    (area, [cx / (6.0 * area), cy / (6.0 * area)])
}

/// Subcell sampling depth for cut cells in dimension ≥ 3.
const SUBDIVISION: usize = 6;

fn clip_cell(p: &DelzantPolytope, lo: &DVector<f64>, h: f64) -> Option<(f64, DVector<f64>, bool)> {
    let n = p.dim();
    let rows = p.normal_rows();
    let offs = p.offsets_f64();
    let full_vol = h.powi(n as i32);
    // distance extremes of each facet over the cell
    let mut cut = false;
    for k in 0..p.num_facets() {
        let mut min = offs[k];
        let mut max = offs[k];
        for j in 0..n {
            let a = rows[(k, j)];
            let (u, v) = (a * lo[j], a * (lo[j] + h));
            min += u.min(v);
            max += u.max(v);
        }
        if max <= 0.0 {
            return None;
        }
        if min < 0.0 {
            cut = true;
        }
    }
    let center = lo.add_scalar(0.5 * h);
    if !cut {
        return Some((full_vol, center, true));
    }
    match n {
        1 => {
            let (mut a, mut b) = (lo[0], lo[0] + h);
            for k in 0..p.num_facets() {
                let u = rows[(k, 0)];
                let x = -offs[k] / u;
                if u > 0.0 {
                    a = a.max(x);
                } else {
                    b = b.min(x);
                }
            }
            (b > a).then(|| (b - a, DVector::from_element(1, 0.5 * (a + b)), false))
        }
        2 => {
            let mut poly = vec![
                [lo[0], lo[1]],
                [lo[0] + h, lo[1]],
                [lo[0] + h, lo[1] + h],
                [lo[0], lo[1] + h],
            ];
            for k in 0..p.num_facets() {
                poly = clip_polygon(poly, [rows[(k, 0)], rows[(k, 1)]], offs[k]);
                if poly.len() < 3 {
                    return None;
                }
            }
            let (area, c) = polygon_area_centroid(&poly);
            (area > 0.0).then(|| (area, DVector::from_vec(vec![c[0], c[1]]), false))
        }
        _ => {
            let s = SUBDIVISION;
            let sub = h / s as f64;
            let mut vol = 0.0;
            let mut acc = DVector::zeros(n);
            let total = s.pow(n as u32);
            for flat in 0..total {
                let mut rest = flat;
                let mut c = lo.clone();
                for j in 0..n {
                    c[j] += (rest % s) as f64 * sub + 0.5 * sub;
                    rest /= s;
                }
                if p.min_distance(&c) >= 0.0 {
                    vol += sub.powi(n as i32);
                    acc += &c;
                }
            }
            (vol > 0.0).then(|| {
                let centroid = acc * (sub.powi(n as i32) / vol);
                (vol, centroid, false)
            })
        }
    }
}

/// All grid cells meeting the interior of `p`, in row-major index order.
pub fn grid_cells(p: &DelzantPolytope, grid: &Grid) -> Vec<Cell> {
    let mut out = Vec::new();
    for flat in 0..grid.len() {
        let index = grid.unravel(flat);
        let center = grid.center(&index);
        let lo = center.add_scalar(-0.5 * grid.h);
        if let Some((volume, centroid, full)) = clip_cell(p, &lo, grid.h) {
            out.push(Cell {
                index,
                center,
                centroid,
                volume,
                full,
            });
        }
    }
    out
}
