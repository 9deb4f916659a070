//! Acceptance suite: one PASS/FAIL line per criterion, exit status 1 if any fails.

use std::sync::Arc;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use toric_jflow::calabi::{
    classify_exact, embed_radial, radial_run, solve_lambda, symmetric_pair, CaseTag, RadialOptions, RadialProfile,
};
use toric_jflow::expr::CompiledExpr;
use toric_jflow::flow::{init_flow, DiagRow, FlowOptions, OutcomeTag};
use toric_jflow::polytope::{
    blowup_polytope, check_face_stability, compute_nc_exact, trace_class_integral_exact, volume, DelzantPolytope,
    Verdict,
};
use toric_jflow::potential::{canonical_potential, grad, legendre_dual_grad, Correction, SymplecticPotential};
use toric_jflow::rational::{int, parse_rational, Rational};
use toric_jflow::transition::{energy, fd_compatibility_residual, trace_integral_grid, transition_at, GeometryPair};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn r(s: &str) -> Rational {
    parse_rational(s).unwrap()
}

fn trapezoid(b: &str) -> Arc<DelzantPolytope> {
    Arc::new(blowup_polytope(2, r(b)).unwrap())
}

fn potential(p: Arc<DelzantPolytope>, v: Option<&str>) -> SymplecticPotential {
    match v {
        Some(src) => SymplecticPotential::new(p, Correction::Expr(CompiledExpr::new(src, 2).unwrap())).unwrap(),
        None => canonical_potential(p),
    }
}

fn pair(b: &str, a: &str, u: Option<&str>, g: Option<&str>) -> GeometryPair {
    GeometryPair::new(potential(trapezoid(b), u), potential(trapezoid(a), g)).unwrap()
}

fn max_abs_diff(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
}

fn vertex_error(rows: &[DiagRow]) -> f64 {
    rows.iter().map(|r| r.vertex_error).fold(0.0, f64::max)
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let (a, b) = (1.5, 2.0);
    let init = RadialProfile::linear(2, a, b, 2048).unwrap();
    let (fin, _) = radial_run(
        &init,
        &RadialOptions {
            t_end: 50.0,
            ..Default::default()
        },
    )
    .unwrap();
    let elapsed = start.elapsed().as_secs_f64();
    let exact: Vec<f64> = fin.nodes.iter().map(|&x| 2.0 / 3.0 * x + 1.0 / 3.0 / x).collect();
    let diff = max_abs_diff(&fin.f, &exact);
    outcome(
        diff < 1e-4 && elapsed < 30.0,
        format!("sup|f - f_static| = {diff:.2e}, runtime {elapsed:.1} s"),
    )
}

fn criterion_2() -> Outcome {
    let (n, a, b) = (2, 1.1, 2.0);
    let lambda = solve_lambda(n, a, b).unwrap();
    // 4 + λ² = 4.4 λ
    let oracle = 2.2 - (2.2f64 * 2.2 - 4.0).sqrt();
    let init = RadialProfile::linear(n, a, b, 2048).unwrap();
    let (fin, _) = radial_run(
        &init,
        &RadialOptions {
            t_end: 50.0,
            ..Default::default()
        },
    )
    .unwrap();
    let nc_prime = (n as f64 - 1.0) / lambda;
    let squeeze = fin.squeeze_point(nc_prime, 1e-2).unwrap_or(f64::NAN);
    let traces = fin.traces();
    let dets = fin.dets();
    let mut left: f64 = 0.0;
    let mut right_det = f64::INFINITY;
    for (i, &x) in fin.nodes.iter().enumerate() {
        if x <= lambda - 0.05 {
            left = left.max((traces[i] - 1.0 / x).abs());
        }
        if x >= lambda + 0.05 {
            right_det = right_det.min(dets[i]);
        }
    }
    let pass = (lambda - oracle).abs() < 1e-6
        && (lambda - 1.2834849).abs() < 1e-6
        && (squeeze - lambda).abs() < 0.02
        && left < 1e-2
        && right_det > 1e-3;
    outcome(
        pass,
        format!(
            "lambda = {lambda:.7} (oracle {oracle:.7}), squeeze at {squeeze:.5}, left residual {left:.2e}, right min det {right_det:.4}"
        ),
    )
}

fn criterion_3() -> Outcome {
    let (p, q) = (trapezoid("2"), trapezoid("1.25"));
    let nc = compute_nc_exact(&p, &q).unwrap();
    let case = classify_exact(2, &r("1.25"), &r("2")).unwrap();
    let report = check_face_stability(&p, &q, 1e-9).unwrap();
    let marginal: Vec<Vec<usize>> = report
        .faces_with(Verdict::Marginal)
        .map(|f| f.facet_ids.clone())
        .collect();
    let pass =
        nc == int(1) && case.tag == CaseTag::Case2 && marginal == vec![vec![3]] && !report.any(Verdict::Violated);
    outcome(
        pass,
        format!("nc = {nc} (exact), case {:?}, marginal faces {marginal:?}", case.tag),
    )
}

fn criterion_4() -> Outcome {
    let rep = check_face_stability(&trapezoid("2"), &trapezoid("1.1"), 1e-9).unwrap();
    let violated: Vec<_> = rep.faces_with(Verdict::Violated).collect();
    let first = violated.len() == 1
        && violated[0].facet_ids == vec![3]
        && (violated[0].lhs - 1.0).abs() < 1e-9
        && (rep.nc - 0.8).abs() < 1e-9;
    let id = check_face_stability(&trapezoid("2"), &trapezoid("2"), 1e-9).unwrap();
    let lhs: Vec<f64> = id.per_face.iter().map(|f| f.lhs).collect();
    let second = (id.nc - 2.0).abs() < 1e-9
        && lhs.len() == 4
        && lhs.iter().all(|l| (l - 1.0).abs() < 1e-9)
        && id.per_face.iter().all(|f| f.verdict == Verdict::Pass);
    outcome(
        first && second,
        format!(
            "(1.1,2): violated {:?} lhs {:.6} nc {:.6}; (2,2): lhs {lhs:?} nc {:.6}",
            violated.iter().map(|f| f.facet_ids.clone()).collect::<Vec<_>>(),
            violated.first().map_or(f64::NAN, |f| f.lhs),
            rep.nc,
            id.nc
        ),
    )
}

fn criterion_5() -> Outcome {
    let want = 1.2;
    let exact = trace_class_integral_exact(&trapezoid("2"), &trapezoid("1.1")).unwrap();
    let mut worst: f64 = 0.0;
    let mut vals = Vec::new();
    for v in [
        None,
        Some("0.1*y1*y2 + 0.05*y1^2"),
        Some("0.08*sin(y1)*cos(y2) + 0.1*y2^2"),
    ] {
        let pr = pair("2", "1.1", v, None);
        let h = pr.p().diameter() / 64.0;
        let integral = trace_integral_grid(&pr, h).unwrap();
        worst = worst.max((integral - want).abs() / want);
        vals.push(integral);
    }
    outcome(
        worst < 1e-3 && exact == r("6/5"),
        format!("integrals {vals:.6?} vs {want} (class value {exact}), worst relative error {worst:.2e}"),
    )
}

fn criterion_6() -> (Outcome, f64) {
    let pr = pair("2", "2", Some("0.1*y1*y2 + 0.05*y1^2"), None);
    let mut st = init_flow(&pr, 2.0 / 96.0, FlowOptions::default()).unwrap();
    let rep = st.run(0.2, 0.02).unwrap();
    let rows = &rep.trace.rows;
    let mut energy_ok = true;
    let mut trace_ok = true;
    let mut worst_ratio: f64 = 0.0;
    for w in rows.windows(2) {
        let dt = w[1].t - w[0].t;
        energy_ok &= w[1].energy <= w[0].energy + 1e-8 * dt;
        trace_ok &= w[1].max_trace <= w[0].max_trace + 1e-3 && w[1].min_trace >= w[0].min_trace - 1e-3;
        let de = (w[1].energy - w[0].energy) / dt;
        let predicted = -0.5 * (w[0].dissipation + w[1].dissipation);
        if de.abs() > 1e-6 {
            worst_ratio = worst_ratio.max((de - predicted).abs() / predicted.abs());
        }
    }
    trace_ok &= rows
        .iter()
        .all(|r| r.max_trace <= rows[0].max_trace + 1e-3 && r.min_trace >= rows[0].min_trace - 1e-3);
    let pass = energy_ok && trace_ok && worst_ratio < 0.05 && rows.len() == 11;
    let first = &rows[0];
    let last = rows.last().unwrap();
    (
        outcome(
            pass,
            format!(
                "E {:.8} -> {:.8}, tr range [{:.5}, {:.5}] -> [{:.5}, {:.5}], worst dissipation mismatch {:.2}%",
                first.energy,
                last.energy,
                first.min_trace,
                first.max_trace,
                last.min_trace,
                last.max_trace,
                100.0 * worst_ratio
            ),
        ),
        vertex_error(rows),
    )
}

fn criterion_7() -> Outcome {
    let pairs = [
        pair("2", "1.1", None, None),
        pair("2", "1.1", Some("0.05*y1^2 + 0.1*sin(y2)"), None),
        pair("2", "1.5", Some("0.1*y1*y2 + 0.05*y1^2"), Some("0.02*(y1^2 + y2^2)")),
    ];
    let mut rng = StdRng::seed_from_u64(7);
    let (mut count, mut bad) = (0usize, Vec::new());
    let mut worst_compat: f64 = 0.0;
    for (k, pr) in pairs.iter().enumerate() {
        let target = if k == 2 { 334 } else { 333 };
        let mut taken = 0;
        while taken < target {
            let y = DVector::from_vec(vec![rng.random_range(0.0..2.0), rng.random_range(0.0..2.0)]);
            if pr.p().min_distance(&y) < 1e-3 {
                continue;
            }
            taken += 1;
            count += 1;
            let s = transition_at(pr, &y).unwrap();
            worst_compat = worst_compat.max(s.compat_residual);
            let ok = s.eigenvalues.iter().all(|&l| l > 0.0)
                && s.det <= (s.trace / 2.0).powi(2) * (1.0 + 1e-12)
                && s.partial_bound < s.trace * s.trace
                && s.compat_residual < 1e-8;
            if !ok {
                bad.push(y);
            }
        }
    }
    // finite-difference Jacobian: residual shrinks ≈ 4× per halving of the step
    let mut ratios = Vec::new();
    for (k, pr) in pairs.iter().enumerate().skip(1) {
        let y = DVector::from_vec(vec![0.6 + 0.1 * k as f64, 0.7]);
        let e1 = fd_compatibility_residual(pr, &y, 2e-2).unwrap();
        let e2 = fd_compatibility_residual(pr, &y, 1e-2).unwrap();
        ratios.push(e1 / e2);
    }
    let fd_ok = ratios.iter().all(|&q| (3.0..5.5).contains(&q));
    outcome(
        bad.is_empty() && count == 1000 && fd_ok,
        format!(
            "{count} samples, {} violations, max compat {worst_compat:.1e}, FD halving ratios {ratios:.2?}",
            bad.len()
        ),
    )
}

fn criterion_8() -> (Outcome, f64) {
    let start = Instant::now();
    let (a, b) = (1.5, 2.0);
    let pr = symmetric_pair(2, &r("1.5"), &r("2")).unwrap();
    let mut st = init_flow(&pr, 2.0 / 96.0, FlowOptions::default()).unwrap();
    let init = RadialProfile::linear(2, a, b, 2049).unwrap();
    let mut errs = Vec::new();
    let mut vtx: f64 = 0.0;
    for t in [0.1, 1.0] {
        let rep = st.run(t, 0.1).unwrap();
        vtx = vtx.max(vertex_error(&rep.trace.rows));
        let (radial, _) = radial_run(
            &init,
            &RadialOptions {
                t_end: t,
                max_change: 1e-4,
                ..Default::default()
            },
        )
        .unwrap();
        let cores = st.evaluate(&st.v).unwrap();
        let err = st
            .nodes()
            .iter()
            .zip(&cores)
            .map(|(nd, c)| (&c.image - embed_radial(&radial, &nd.y).0).amax())
            .fold(0.0, f64::max);
        errs.push(err);
    }
    let elapsed = start.elapsed().as_secs_f64();
    (
        outcome(
            errs.iter().all(|&e| e < 5e-3) && elapsed < 300.0,
            format!(
                "sup|U_grid - U_radial| at t=0.1, 1.0: {:.2e} and {:.2e}, runtime {elapsed:.0} s at 96x96 cells",
                errs[0], errs[1]
            ),
        ),
        vtx,
    )
}

fn criterion_9(run_vertex_errors: &[f64]) -> Outcome {
    // Legendre involution
    let mut rng = StdRng::seed_from_u64(9);
    let targets = [
        potential(trapezoid("1.1"), None),
        potential(trapezoid("1.5"), Some("0.02*(y1^2 + y2^2)")),
    ];
    let mut legendre: f64 = 0.0;
    for g in &targets {
        for _ in 0..200 {
            let x = DVector::from_vec(vec![rng.random_range(-6.0..6.0), rng.random_range(-6.0..6.0)]);
            let z = legendre_dual_grad(g, &x).unwrap();
            legendre = legendre.max((grad(g, &z).unwrap() - &x).amax() / (1.0 + x.amax()));
        }
    }
    // identity pair
    let id = pair("2", "2", None, None);
    let mut id_err: f64 = 0.0;
    for y in [[0.5, 0.9], [1.0, 0.0], [0.3, 0.7], [1.9, 0.05], [0.0, 2.0]] {
        let y = DVector::from_vec(y.to_vec());
        let s = transition_at(&id, &y).unwrap();
        id_err = id_err
            .max((&s.image - &y).amax())
            .max((&s.du - DMatrix::identity(2, 2)).amax());
    }
    let e = energy(&id, 6).unwrap();
    let e_want = 0.5 * 4.0 * volume(id.p());
    let mut st = init_flow(&id, 2.0 / 32.0, FlowOptions::default()).unwrap();
    let rep = st.run(1.0, 0.1).unwrap();
    let converged = rep.outcome.tag == OutcomeTag::Converged
        && rep.outcome.t == 0.0
        && rep.trace.steps == 0
        && rep.outcome.static_residual < 1e-10;
    let vtx = run_vertex_errors
        .iter()
        .copied()
        .fold(vertex_error(&rep.trace.rows), f64::max);
    let pass = vtx < 1e-9 && legendre < 1e-8 && id_err < 1e-9 && (e - e_want).abs() < 1e-9 && converged;
    outcome(
        pass,
        format!(
            "max vertex drift {vtx:.1e}, Legendre round trip {legendre:.1e}, identity |U - id| {id_err:.1e}, E = {e:.12} (want {e_want}), {:?} at t = {} after {} steps",
            rep.outcome.tag, rep.outcome.t, rep.trace.steps
        ),
    )
}

fn main() {
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let print = |id: usize, name: &'static str, o: Outcome, results: &mut Vec<(usize, &str, Outcome)>| {
        println!(
            "{} criterion {id} ({name}): {}",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
        results.push((id, name, o));
    };
    print(1, "case 1 radial convergence", criterion_1(), &mut results);
    print(2, "case 3 degeneration", criterion_2(), &mut results);
    print(3, "case 2 threshold", criterion_3(), &mut results);
    print(4, "stability checker", criterion_4(), &mut results);
    print(5, "trace integral class invariance", criterion_5(), &mut results);
    let (o6, v6) = criterion_6();
    print(6, "monotonicity", o6, &mut results);
    print(7, "spectral invariants", criterion_7(), &mut results);
    let (o8, v8) = criterion_8();
    print(8, "grid/radial cross-validation", o8, &mut results);
    print(9, "structural identities", criterion_9(&[v6, v8]), &mut results);
    let failed = results.iter().filter(|(_, _, o)| !o.pass).count();
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
