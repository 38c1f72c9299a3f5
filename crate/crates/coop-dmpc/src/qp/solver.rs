//! ADMM iteration, Ruiz equilibration, and active-set polishing.

use super::csc::CscMatrix;
use super::ldl::LdlFactor;
use super::{dot, inf_norm, kkt_residuals, QpError, QpProblem, QpSettings, QpSolution, QpStatus};

const MIN_SCALING: f64 = 1e-6;
const MAX_SCALING: f64 = 1e6;
/// ADMM runs to this tolerance before the first polishing attempt; polishing
/// closes the gap to `eps_abs`.
const POLISH_TRIGGER: f64 = 1e-6;
/// Regularization levels tried by polishing. The small tier resolves
/// low-curvature directions exactly through refinement; the large tier is the
/// fallback for degenerate active sets.
const POLISH_DELTAS: [f64; 2] = [1e-11, 1e-7];
const POLISH_REFINE_STEPS: usize = 6;
const RHO_EQ_FACTOR: f64 = 1e3;

/// Optional initial iterate carried over from a related solve.
#[derive(Debug, Clone)]
pub struct WarmStart {
    pub z: Vec<f64>,
    pub lambda: Vec<f64>,
}

struct Scaled {
    p: CscMatrix,
    q: Vec<f64>,
    a: CscMatrix,
    l: Vec<f64>,
    u: Vec<f64>,
    /// Variable scaling: original x = d .* scaled x.
    d: Vec<f64>,
    /// Constraint scaling: original y = e .* scaled y / c.
    e: Vec<f64>,
    /// Cost scaling.
    c: f64,
}

/// Modified Ruiz equilibration of the stacked [[P, A'], [A, 0]] matrix plus
/// cost normalization.
fn ruiz_equilibrate(problem: &QpProblem, iters: usize) -> Scaled {
    let n = problem.num_vars();
    let m = problem.num_constraints();
    let mut p = problem.p.clone();
    let mut q = problem.q.clone();
    let mut a = problem.a.clone();
    let mut l = problem.l.clone();
    let mut u = problem.u.clone();
    let mut d = vec![1.0; n];
    let mut e = vec![1.0; m];
    let mut c = 1.0;

    let clamp = |v: f64| v.clamp(MIN_SCALING, MAX_SCALING);
    for _ in 0..iters {
        let p_cols = p.col_inf_norms();
        let a_cols = a.col_inf_norms();
        let a_rows = a.row_inf_norms();
        let delta_d: Vec<f64> = (0..n)
            .map(|j| {
                let norm = p_cols[j].max(a_cols[j]);
                if norm < 1e-12 {
                    1.0
                } else {
                    clamp(1.0 / norm.sqrt())
                }
            })
            .collect();
        let delta_e: Vec<f64> = (0..m)
            .map(|i| {
                if a_rows[i] < 1e-12 {
                    1.0
                } else {
                    clamp(1.0 / a_rows[i].sqrt())
                }
            })
            .collect();
        p.scale(&delta_d, &delta_d);
        a.scale(&delta_e, &delta_d);
        for j in 0..n {
            q[j] *= delta_d[j];
            d[j] *= delta_d[j];
        }
        for i in 0..m {
            l[i] *= delta_e[i];
            u[i] *= delta_e[i];
            e[i] *= delta_e[i];
        }
        // Cost normalization.
        let p_cols = p.col_inf_norms();
        let mean_p = if n > 0 {
            p_cols.iter().sum::<f64>() / n as f64
        } else {
            0.0
        };
        let gamma_denom = mean_p.max(inf_norm(&q));
        if gamma_denom > 1e-12 {
            let gamma = clamp(1.0 / gamma_denom);
            p.scale_values(gamma);
            for v in &mut q {
                *v *= gamma;
            }
            c *= gamma;
        }
    }
    Scaled {
        p,
        q,
        a,
        l,
        u,
        d,
        e,
        c,
    }
}

/// `[[P + sigma I, A'], [A, -diag(1/rho)]]` as a full symmetric matrix.
fn build_kkt(p: &CscMatrix, a: &CscMatrix, sigma: f64, rho: &[f64]) -> CscMatrix {
    let n = p.ncols();
    let m = a.nrows();
    let mut triplets: Vec<(usize, usize, f64)> = Vec::with_capacity(p.nnz() + 2 * a.nnz() + n + m);
    triplets.extend(p.triplets());
    for j in 0..n {
        triplets.push((j, j, sigma));
    }
    for (r, c, v) in a.triplets() {
        triplets.push((c, n + r, v));
        triplets.push((n + r, c, v));
    }
    for (i, &rho_i) in rho.iter().enumerate() {
        triplets.push((n + i, n + i, -1.0 / rho_i));
    }
    CscMatrix::from_triplets(n + m, n + m, triplets)
}

pub fn solve_qp(problem: &QpProblem, settings: &QpSettings) -> Result<QpSolution, QpError> {
    solve_qp_warm(problem, settings, None)
}

pub fn solve_qp_warm(
    problem: &QpProblem,
    settings: &QpSettings,
    warm: Option<&WarmStart>,
) -> Result<QpSolution, QpError> {
    problem.validate()?;
    let n = problem.num_vars();
    let m = problem.num_constraints();

    let scaled = ruiz_equilibrate(problem, settings.scaling_iters);

    // Equality rows get a stiffer step parameter; detected on the original
    // bounds since scaling preserves the property.
    let is_eq: Vec<bool> = (0..m)
        .map(|i| problem.u[i].is_finite() && problem.u[i] - problem.l[i] <= 1e-12)
        .collect();
    let rho: Vec<f64> = is_eq
        .iter()
        .map(|&eq| {
            if eq {
                (settings.rho * RHO_EQ_FACTOR).clamp(1e-6, 1e6)
            } else {
                settings.rho
            }
        })
        .collect();

    let kkt = build_kkt(&scaled.p, &scaled.a, settings.sigma, &rho);
    let factor = LdlFactor::new(&kkt).map_err(|_| QpError::NonConvex)?;
    // Quasi-definite KKT of a convex problem has exactly n positive pivots.
    if factor.positive_pivots() != n {
        return Err(QpError::NonConvex);
    }

    let mut x = vec![0.0; n];
    let mut z = vec![0.0; m];
    let mut y = vec![0.0; m];
    if let Some(w) = warm {
        assert_eq!(w.z.len(), n, "warm start primal dimension");
        assert_eq!(w.lambda.len(), m, "warm start dual dimension");
        for j in 0..n {
            x[j] = w.z[j] / scaled.d[j];
        }
        for i in 0..m {
            y[i] = w.lambda[i] * scaled.c / scaled.e[i];
        }
        scaled.a.mul_vec(&x, &mut z);
        for i in 0..m {
            z[i] = z[i].clamp(scaled.l[i], scaled.u[i]);
        }
    }

    let mut rhs = vec![0.0; n + m];
    let mut work = vec![0.0; n + m];
    let mut z_prev = vec![0.0; m];
    // Unscaled iterates at the previous residual check, for infeasibility
    // certificates.
    let mut x_check = vec![0.0; n];
    let mut y_check = vec![0.0; m];
    let mut x_u = vec![0.0; n];
    let mut y_u = vec![0.0; m];
    let mut z_u = vec![0.0; m];

    let loose_eps = if settings.polish {
        settings.eps_abs.max(POLISH_TRIGGER)
    } else {
        settings.eps_abs
    };
    let mut phase_eps = loose_eps;
    let mut iterations = 0;
    let mut best: Option<QpSolution> = None;
    // Polishing is also attempted periodically before ADMM convergence: for a
    // convex problem any certified KKT point is optimal, so an early correct
    // active-set guess ends the solve. Backs off exponentially when wrong.
    let mut next_polish_attempt = 10 * settings.check_interval.max(1);

    while iterations < settings.max_iter {
        iterations += 1;
        // x-update through the KKT system.
        for j in 0..n {
            rhs[j] = settings.sigma * x[j] - scaled.q[j];
        }
        for i in 0..m {
            rhs[n + i] = z[i] - y[i] / rho[i];
        }
        factor.solve_with(&mut rhs, &mut work);
        z_prev.copy_from_slice(&z);
        for i in 0..m {
            // Recover A x_tilde from the dual block of the KKT solve.
            let z_tilde = z[i] + (rhs[n + i] - y[i]) / rho[i];
            let z_pre = settings.alpha * z_tilde + (1.0 - settings.alpha) * z[i] + y[i] / rho[i];
            z[i] = z_pre.clamp(scaled.l[i], scaled.u[i]);
            y[i] = rho[i] * (z_pre - z[i]);
        }
        for j in 0..n {
            x[j] = settings.alpha * rhs[j] + (1.0 - settings.alpha) * x[j];
        }

        let checkpoint = iterations % settings.check_interval == 0 || iterations == settings.max_iter;
        if !checkpoint {
            continue;
        }

        // Residuals on the original data.
        for j in 0..n {
            x_u[j] = scaled.d[j] * x[j];
        }
        for i in 0..m {
            y_u[i] = scaled.e[i] * y[i] / scaled.c;
            z_u[i] = z[i] / scaled.e[i];
        }
        let mut ax = vec![0.0; m];
        problem.a.mul_vec(&x_u, &mut ax);
        let mut px = vec![0.0; n];
        problem.p.mul_vec(&x_u, &mut px);
        let mut aty = vec![0.0; n];
        problem.a.transpose_mul_vec(&y_u, &mut aty);

        let r_prim = (0..m)
            .map(|i| (ax[i] - z_u[i]).abs())
            .fold(0.0_f64, f64::max);
        let r_dual = (0..n)
            .map(|j| (px[j] + problem.q[j] + aty[j]).abs())
            .fold(0.0_f64, f64::max);
        let eps_prim = phase_eps + settings.eps_rel * inf_norm(&ax).max(inf_norm(&z_u));
        let eps_dual = phase_eps
            + settings.eps_rel
                * inf_norm(&px)
                    .max(inf_norm(&problem.q))
                    .max(inf_norm(&aty));

        let polish_now = settings.polish && iterations >= next_polish_attempt;
        if polish_now {
            next_polish_attempt = iterations * 2;
        }
        if r_prim <= eps_prim && r_dual <= eps_dual || polish_now {
            if let Some(sol) = try_finish(problem, settings, &x_u, &y_u, iterations) {
                return Ok(sol);
            }
        }
        if r_prim <= eps_prim && r_dual <= eps_dual {
            if phase_eps > settings.eps_abs {
                // Polishing could not certify; tighten and continue.
                phase_eps = settings.eps_abs;
            } else {
                // Converged at the target level but below certification:
                // remember the best iterate and keep iterating.
                let res = kkt_residuals(problem, &x_u, &y_u);
                let better = best
                    .as_ref()
                    .map(|b| res.primal.max(res.dual) < b.primal_residual.max(b.dual_residual))
                    .unwrap_or(true);
                if better {
                    best = Some(make_solution(
                        problem,
                        x_u.clone(),
                        y_u.clone(),
                        QpStatus::MaxIter,
                        iterations,
                        false,
                    ));
                }
            }
        }

        // Infeasibility certificates from the drift since the last check.
        let dy: Vec<f64> = (0..m).map(|i| y_u[i] - y_check[i]).collect();
        let dx: Vec<f64> = (0..n).map(|j| x_u[j] - x_check[j]).collect();
        if is_primal_infeasibility_certificate(problem, &dy, settings.eps_prim_inf) {
            let mut sol = make_solution(
                problem,
                x_u.clone(),
                y_u.clone(),
                QpStatus::PrimalInfeasible,
                iterations,
                false,
            );
            sol.objective = f64::INFINITY;
            sol.certificate = Some(dy);
            return Ok(sol);
        }
        if is_dual_infeasibility_certificate(problem, &dx, settings.eps_dual_inf) {
            let mut sol = make_solution(
                problem,
                x_u.clone(),
                y_u.clone(),
                QpStatus::DualInfeasible,
                iterations,
                false,
            );
            sol.objective = f64::NEG_INFINITY;
            sol.certificate = Some(dx);
            return Ok(sol);
        }
        x_check.copy_from_slice(&x_u);
        y_check.copy_from_slice(&y_u);
    }

    // Ran out of iterations: last chance via polishing, then classify from
    // true residuals.
    for j in 0..n {
        x_u[j] = scaled.d[j] * x[j];
    }
    for i in 0..m {
        y_u[i] = scaled.e[i] * y[i] / scaled.c;
    }
    if let Some(sol) = try_finish(problem, settings, &x_u, &y_u, iterations) {
        return Ok(sol);
    }
    let raw = make_solution(problem, x_u, y_u, QpStatus::MaxIter, iterations, false);
    Ok(match best {
        Some(b)
            if b.primal_residual.max(b.dual_residual)
                < raw.primal_residual.max(raw.dual_residual) =>
        {
            b
        }
        _ => raw,
    })
}

/// Polish (if enabled) and certify a candidate; returns a solved solution
/// only when the absolute residuals reach `eps_abs`.
fn try_finish(
    problem: &QpProblem,
    settings: &QpSettings,
    x_u: &[f64],
    y_u: &[f64],
    iterations: usize,
) -> Option<QpSolution> {
    if settings.polish {
        for delta in POLISH_DELTAS {
            let Some((xp, yp)) = polish(problem, y_u, delta) else {
                continue;
            };
            let res = kkt_residuals(problem, &xp, &yp);
            let comp_tol = settings.eps_abs * (1.0 + inf_norm(&yp));
            if res.primal <= settings.eps_abs
                && res.dual <= settings.eps_abs
                && res.complementarity <= comp_tol
                && dual_signs_ok(problem, &yp)
            {
                return Some(make_solution(
                    problem,
                    xp,
                    yp,
                    QpStatus::Solved,
                    iterations,
                    true,
                ));
            }
        }
    }
    let res = kkt_residuals(problem, x_u, y_u);
    if res.primal <= settings.eps_abs && res.dual <= settings.eps_abs {
        return Some(make_solution(
            problem,
            x_u.to_vec(),
            y_u.to_vec(),
            QpStatus::Solved,
            iterations,
            false,
        ));
    }
    None
}

fn make_solution(
    problem: &QpProblem,
    z: Vec<f64>,
    lambda: Vec<f64>,
    status: QpStatus,
    iterations: usize,
    polished: bool,
) -> QpSolution {
    let res = kkt_residuals(problem, &z, &lambda);
    let objective = problem.objective(&z);
    QpSolution {
        objective,
        status,
        primal_residual: res.primal,
        dual_residual: res.dual,
        iterations,
        polished,
        certificate: None,
        z,
        lambda,
    }
}

fn dual_signs_ok(problem: &QpProblem, lambda: &[f64]) -> bool {
    let tol = 1e-9 * inf_norm(lambda).max(1.0);
    for (i, &lam) in lambda.iter().enumerate() {
        let eq = problem.u[i].is_finite() && problem.u[i] - problem.l[i] <= 1e-12;
        if eq {
            continue;
        }
        if lam > tol && !problem.u[i].is_finite() {
            return false;
        }
        if lam < -tol && !problem.l[i].is_finite() {
            return false;
        }
    }
    true
}

/// Active-set refinement: solve the equality-constrained QP on the active
/// rows guessed from the dual signs, with slight regularization and iterative
/// refinement against the unregularized KKT system.
fn polish(problem: &QpProblem, y: &[f64], delta: f64) -> Option<(Vec<f64>, Vec<f64>)> {
    let n = problem.num_vars();
    let m = problem.num_constraints();

    let mut active: Vec<(usize, f64)> = Vec::new(); // (row, pinned bound)
    for i in 0..m {
        let eq = problem.u[i].is_finite() && problem.u[i] - problem.l[i] <= 1e-12;
        if eq || y[i] < 0.0 {
            active.push((i, problem.l[i]));
        } else if y[i] > 0.0 {
            active.push((i, problem.u[i]));
        }
    }
    let ma = active.len();
    if active.iter().any(|&(_, b)| !b.is_finite()) {
        return None;
    }

    let mut row_of = vec![usize::MAX; m];
    for (k, &(i, _)) in active.iter().enumerate() {
        row_of[i] = k;
    }
    let g = CscMatrix::from_triplets(
        ma,
        n,
        problem
            .a
            .triplets()
            .filter(|&(r, _, _)| row_of[r] != usize::MAX)
            .map(|(r, c, v)| (row_of[r], c, v)),
    );

    // [[P + delta I, G'], [G, -delta I]] with refinement against the
    // unregularized system.
    let mut triplets: Vec<(usize, usize, f64)> = Vec::new();
    triplets.extend(problem.p.triplets());
    for j in 0..n {
        triplets.push((j, j, delta));
    }
    for (r, c, v) in g.triplets() {
        triplets.push((c, n + r, v));
        triplets.push((n + r, c, v));
    }
    for k in 0..ma {
        triplets.push((n + k, n + k, -delta));
    }
    let kkt = CscMatrix::from_triplets(n + ma, n + ma, triplets);
    let factor = LdlFactor::new(&kkt).ok()?;
    if factor.positive_pivots() != n {
        return None;
    }

    let mut rhs = vec![0.0; n + ma];
    for j in 0..n {
        rhs[j] = -problem.q[j];
    }
    for (k, &(_, b)) in active.iter().enumerate() {
        rhs[n + k] = b;
    }
    let mut sol = factor.solve(&rhs);
    // Iterative refinement of the true (unregularized) KKT residual.
    let mut work = vec![0.0; n + ma];
    for _ in 0..POLISH_REFINE_STEPS {
        let mut resid = rhs.clone();
        let xs = &sol[..n];
        let lam = &sol[n..];
        let mut px = vec![0.0; n];
        problem.p.mul_vec(xs, &mut px);
        let mut gtl = vec![0.0; n];
        g.transpose_mul_vec(lam, &mut gtl);
        for j in 0..n {
            resid[j] -= px[j] + gtl[j];
        }
        let mut gx = vec![0.0; ma];
        g.mul_vec(xs, &mut gx);
        for k in 0..ma {
            resid[n + k] -= gx[k];
        }
        if inf_norm(&resid) < 1e-15 {
            break;
        }
        factor.solve_with(&mut resid, &mut work);
        for (s, r) in sol.iter_mut().zip(&resid) {
            *s += r;
        }
    }

    let xp = sol[..n].to_vec();
    let mut yp = vec![0.0; m];
    for (k, &(i, _)) in active.iter().enumerate() {
        yp[i] = sol[n + k];
    }
    // Reject sign-inconsistent guesses: a lower-active row needs lambda <= 0,
    // an upper-active row lambda >= 0.
    let sign_tol = 1e-8 * inf_norm(&yp).max(1.0);
    for &(i, _) in &active {
        let eq = problem.u[i].is_finite() && problem.u[i] - problem.l[i] <= 1e-12;
        if eq {
            continue;
        }
        if y[i] < 0.0 && yp[i] > sign_tol {
            return None;
        }
        if y[i] > 0.0 && yp[i] < -sign_tol {
            return None;
        }
    }
    Some((xp, yp))
}

/// Farkas-style certificate test: `dy` proves no feasible point exists.
fn is_primal_infeasibility_certificate(problem: &QpProblem, dy: &[f64], eps: f64) -> bool {
    let norm = inf_norm(dy);
    if norm < 1e-12 {
        return false;
    }
    let m = problem.num_constraints();
    let n = problem.num_vars();
    let mut aty = vec![0.0; n];
    problem.a.transpose_mul_vec(dy, &mut aty);
    if inf_norm(&aty) > eps * norm {
        return false;
    }
    let mut support = 0.0;
    for i in 0..m {
        let d = dy[i];
        if d > 0.0 {
            if !problem.u[i].is_finite() {
                return false;
            }
            support += problem.u[i] * d;
        } else if d < 0.0 {
            if !problem.l[i].is_finite() {
                return false;
            }
            support += problem.l[i] * d;
        }
    }
    support <= -eps * norm
}

/// Certificate test for an unbounded descent direction `dx`.
fn is_dual_infeasibility_certificate(problem: &QpProblem, dx: &[f64], eps: f64) -> bool {
    let norm = inf_norm(dx);
    if norm < 1e-12 {
        return false;
    }
    let n = problem.num_vars();
    let m = problem.num_constraints();
    let mut pdx = vec![0.0; n];
    problem.p.mul_vec(dx, &mut pdx);
    if inf_norm(&pdx) > eps * norm {
        return false;
    }
    if dot(&problem.q, dx) > -eps * norm {
        return false;
    }
    let mut adx = vec![0.0; m];
    problem.a.mul_vec(dx, &mut adx);
    for i in 0..m {
        let v = adx[i];
        let lo_ok = !problem.l[i].is_finite() || v >= -eps * norm;
        let hi_ok = !problem.u[i].is_finite() || v <= eps * norm;
        match (problem.l[i].is_finite(), problem.u[i].is_finite()) {
            (true, true) => {
                if v.abs() > eps * norm {
                    return false;
                }
            }
            (true, false) => {
                if !lo_ok {
                    return false;
                }
            }
            (false, true) => {
                if !hi_ok {
                    return false;
                }
            }
            (false, false) => {}
        }
    }
    true
}
