//! Shared helpers for the integration suites: scenario loading, seeded
//! generators, and the brute-force active-set QP oracle.
//!
//! Each integration test binary compiles this module; not every binary uses
//! every helper.
#![allow(dead_code)]

use coop_dmpc::coordinator::Scenario;
use coop_dmpc::qp::{CscMatrix, QpProblem};
use coop_dmpc::scenario::parse_scenario;
use coop_dmpc::trajectory::PeriodicTrajectory;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use std::path::PathBuf;

pub fn scenario_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../scenarios")
        .join(name)
}

pub fn load_scenario(name: &str) -> Scenario {
    parse_scenario(&scenario_path(name)).expect("shipped scenario parses")
}

pub fn shipped_scenarios() -> Vec<(String, Scenario)> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios");
    let mut out = Vec::new();
    let mut paths: Vec<PathBuf> = std::fs::read_dir(&dir)
        .expect("scenarios directory exists")
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "json"))
        .collect();
    paths.sort();
    for path in paths {
        let name = path.file_stem().unwrap().to_string_lossy().into_owned();
        out.push((name, parse_scenario(&path).expect("scenario parses")));
    }
    out
}

pub fn random_trajectory(rng: &mut impl Rng, period: usize, dim: usize) -> PeriodicTrajectory {
    PeriodicTrajectory::new(
        (0..period)
            .map(|_| DVector::from_fn(dim, |_, _| rng.random_range(-3.0..3.0)))
            .collect(),
    )
    .expect("non-empty")
}

/// A random strictly convex box-constrained QP that is feasible by
/// construction (the bounds bracket a random point).
pub struct RandomQp {
    pub dense_p: DMatrix<f64>,
    pub dense_a: DMatrix<f64>,
    pub problem: QpProblem,
}

pub fn random_qp(rng: &mut impl Rng) -> RandomQp {
    let n = rng.random_range(1..=4);
    let m = rng.random_range(1..=4);
    let factor = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    let dense_p = &factor.transpose() * &factor + DMatrix::identity(n, n) * 0.1;
    let q: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
    let dense_a = DMatrix::from_fn(m, n, |_, _| rng.random_range(-1.0..1.0));
    let anchor = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
    let az = &dense_a * &anchor;
    let l: Vec<f64> = (0..m)
        .map(|i| az[i] - rng.random_range(0.05..1.0))
        .collect();
    let u: Vec<f64> = (0..m)
        .map(|i| az[i] + rng.random_range(0.05..1.0))
        .collect();
    let problem = QpProblem::new(
        CscMatrix::from_dense(&dense_p),
        q,
        CscMatrix::from_dense(&dense_a),
        l,
        u,
    );
    RandomQp {
        dense_p,
        dense_a,
        problem,
    }
}

#[derive(Clone, Copy, PartialEq)]
enum RowStatus {
    Inactive,
    AtLower,
    AtUpper,
}

/// Exhaustive active-set enumeration for small strictly convex QPs: solve the
/// equality-constrained problem for every bound assignment and return the
/// KKT-consistent optimum. Independent of the iterative solver.
pub fn enumerate_box_qp(qp: &RandomQp) -> Option<(DVector<f64>, f64)> {
    let p = &qp.dense_p;
    let q = DVector::from_column_slice(&qp.problem.q);
    let a = &qp.dense_a;
    let l = &qp.problem.l;
    let u = &qp.problem.u;
    let n = p.nrows();
    let m = a.nrows();
    let tol = 1e-9;

    let mut best: Option<(DVector<f64>, f64)> = None;
    for mask in 0..3usize.pow(m as u32) {
        let mut status = Vec::with_capacity(m);
        let mut rest = mask;
        for _ in 0..m {
            status.push(match rest % 3 {
                0 => RowStatus::Inactive,
                1 => RowStatus::AtLower,
                _ => RowStatus::AtUpper,
            });
            rest /= 3;
        }
        let active: Vec<usize> = (0..m)
            .filter(|&i| status[i] != RowStatus::Inactive)
            .collect();
        let na = active.len();
        let mut kkt = DMatrix::zeros(n + na, n + na);
        kkt.view_mut((0, 0), (n, n)).copy_from(p);
        for (row, &i) in active.iter().enumerate() {
            for c in 0..n {
                kkt[(n + row, c)] = a[(i, c)];
                kkt[(c, n + row)] = a[(i, c)];
            }
        }
        let mut rhs = DVector::zeros(n + na);
        for c in 0..n {
            rhs[c] = -q[c];
        }
        for (row, &i) in active.iter().enumerate() {
            rhs[n + row] = match status[i] {
                RowStatus::AtLower => l[i],
                RowStatus::AtUpper => u[i],
                RowStatus::Inactive => unreachable!(),
            };
        }
        let Some(sol) = kkt.clone().lu().solve(&rhs) else {
            continue;
        };
        // Singular systems (dependent active rows) can come back from the LU
        // as garbage; accept only genuine solutions of the KKT equations.
        let kkt_residual = (&kkt * &sol - &rhs).amax();
        if kkt_residual > 1e-8 * (1.0 + rhs.amax()) {
            continue;
        }
        let z = DVector::from(sol.rows(0, n).clone_owned());
        // Dual feasibility under the convention P z + q + A' lambda = 0.
        let mut consistent = true;
        for (row, &i) in active.iter().enumerate() {
            let lambda = sol[n + row];
            match status[i] {
                RowStatus::AtLower if lambda > tol => consistent = false,
                RowStatus::AtUpper if lambda < -tol => consistent = false,
                _ => {}
            }
        }
        if !consistent {
            continue;
        }
        // Primal feasibility of the inactive rows.
        let az = a * &z;
        for i in 0..m {
            if status[i] == RowStatus::Inactive && (az[i] < l[i] - tol || az[i] > u[i] + tol) {
                consistent = false;
                break;
            }
        }
        if !consistent {
            continue;
        }
        let objective = 0.5 * (z.transpose() * p * &z)[(0, 0)] + q.dot(&z);
        match &best {
            Some((_, best_obj)) if *best_obj <= objective => {}
            _ => best = Some((z, objective)),
        }
    }
    best
}
