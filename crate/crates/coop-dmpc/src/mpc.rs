//! Assembly and solution of each agent's local problems: the tracking MPC
//! against a fixed periodic reference, and the cooperation problem where the
//! reference itself is a decision variable penalized by the neighbors'
//! communicated trajectories and by drift from the previously optimal
//! reference.
//!
//! Decision vector layout (cooperation problem):
//!
//! ```text
//! [ x(0..N) | u(0..N-1) | x_ref(0..T-1) | u_ref(0..T-1) ]
//! ```
//!
//! Constraints: initial condition, dynamics over the horizon, stage boxes for
//! k in 0..N-1, terminal equality `x(N) = x_ref(N mod T)`, periodic reference
//! dynamics (the wrap row enforces periodicity), and tightened reference
//! boxes. The terminal ingredients are the equality constraint with zero
//! terminal cost; the terminal control law is the reference input itself.

use crate::agent::{AgentId, AgentModel, BoundSet, CooperationReference};
use crate::cooperation::{CooperationCostSpec, CooperationError};
use crate::graph::Graph;
use crate::qp::{
    solve_qp_warm, CscMatrix, QpError, QpProblem, QpSettings, QpSolution, QpStatus, WarmStart,
};
use crate::trajectory::{shifted_sq_distance, PeriodicTrajectory};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

/// Tie-breaking regularizer for the initialization solve, which omits the
/// coupling and drift terms and would otherwise leave the reference
/// underdetermined among zero-tracking-cost candidates. Large enough that
/// the tie-break is resolvable at the solver's certification level.
pub const INIT_REGULARIZER: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum LocalSolveError {
    #[error("agent {agent}: {source}")]
    Qp {
        agent: AgentId,
        #[source]
        source: QpError,
    },
    #[error("agent {agent}: local problem infeasible")]
    Infeasible { agent: AgentId },
    #[error("agent {agent}: local problem unbounded (dual infeasible)")]
    Unbounded { agent: AgentId },
    #[error(
        "agent {agent}: solver stopped at max iterations (primal {primal:.3e}, dual {dual:.3e})"
    )]
    NotConverged {
        agent: AgentId,
        primal: f64,
        dual: f64,
    },
    #[error("agent {agent}: reference is not admissible (max residual {residual:.3e})")]
    InvalidReference { agent: AgentId, residual: f64 },
    #[error(transparent)]
    Cooperation(#[from] CooperationError),
}

/// Index maps from the decision vector into its blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LocalProblemLayout {
    pub agent: AgentId,
    pub state_dim: usize,
    pub input_dim: usize,
    pub output_dim: usize,
    pub horizon: usize,
    pub period: usize,
    pub with_reference: bool,
}

impl LocalProblemLayout {
    pub fn decision_dim(&self) -> usize {
        let base = (self.horizon + 1) * self.state_dim + self.horizon * self.input_dim;
        if self.with_reference {
            base + self.period * (self.state_dim + self.input_dim)
        } else {
            base
        }
    }

    /// Index of state coordinate `i` at prediction step `k` (0..=N).
    pub fn x_index(&self, k: usize, i: usize) -> usize {
        debug_assert!(k <= self.horizon && i < self.state_dim);
        k * self.state_dim + i
    }

    /// Index of input coordinate `i` at prediction step `k` (0..N).
    pub fn u_index(&self, k: usize, i: usize) -> usize {
        debug_assert!(k < self.horizon && i < self.input_dim);
        (self.horizon + 1) * self.state_dim + k * self.input_dim + i
    }

    /// Index of reference state coordinate `i` at slot `k` (mod T).
    pub fn ref_x_index(&self, k: usize, i: usize) -> usize {
        debug_assert!(self.with_reference && i < self.state_dim);
        (self.horizon + 1) * self.state_dim
            + self.horizon * self.input_dim
            + (k % self.period) * self.state_dim
            + i
    }

    /// Index of reference input coordinate `i` at slot `k` (mod T).
    pub fn ref_u_index(&self, k: usize, i: usize) -> usize {
        debug_assert!(self.with_reference && i < self.input_dim);
        (self.horizon + 1) * self.state_dim
            + self.horizon * self.input_dim
            + self.period * self.state_dim
            + (k % self.period) * self.input_dim
            + i
    }

    /// Human-readable decision variable names, by block.
    pub fn variable_names(&self) -> Vec<String> {
        let mut names = vec![String::new(); self.decision_dim()];
        for k in 0..=self.horizon {
            for i in 0..self.state_dim {
                names[self.x_index(k, i)] = format!("x[{k}][{i}]");
            }
        }
        for k in 0..self.horizon {
            for i in 0..self.input_dim {
                names[self.u_index(k, i)] = format!("u[{k}][{i}]");
            }
        }
        if self.with_reference {
            for k in 0..self.period {
                for i in 0..self.state_dim {
                    names[self.ref_x_index(k, i)] = format!("x_ref[{k}][{i}]");
                }
                for i in 0..self.input_dim {
                    names[self.ref_u_index(k, i)] = format!("u_ref[{k}][{i}]");
                }
            }
        }
        names
    }
}

/// A local QP plus the metadata needed to interpret its solution.
#[derive(Debug, Clone)]
pub struct AssembledQp {
    pub problem: QpProblem,
    pub layout: LocalProblemLayout,
    /// Constant dropped from the QP objective; the model objective is
    /// `qp objective + offset`.
    pub objective_offset: f64,
}

/// What the agent solves at a given time step.
pub enum LocalStage<'a> {
    /// Decentralized initialization: coupling and drift terms omitted, with a
    /// small regularizer selecting a canonical reference.
    Initialization,
    /// Regular sequential step against fixed neighbor trajectories and the
    /// previously optimal reference.
    Cooperative {
        neighbors: &'a BTreeMap<AgentId, PeriodicTrajectory>,
        previous: &'a CooperationReference,
    },
}

/// Everything a local solve needs besides the agent and its state.
pub struct SolveContext<'a> {
    pub cost_spec: &'a CooperationCostSpec,
    pub graph: &'a Graph,
    pub delta: f64,
    pub horizon: usize,
    pub period: usize,
    pub settings: &'a QpSettings,
    /// Debug sink: when set, each solve dumps its QP, solution, and cost
    /// breakdown as JSON into the directory, tagged with this timestep.
    pub dump: Option<(&'a std::path::Path, usize)>,
}

fn dump_solve(
    ctx: &SolveContext<'_>,
    assembled: &AssembledQp,
    sol: &QpSolution,
    result: &LocalSolveResult,
) {
    let Some((dir, t)) = ctx.dump else {
        return;
    };
    let path = dir.join(format!("qp_t{t:04}_agent{}.json", result.agent));
    let mut problem = assembled.problem.clone();
    problem.names = Some(crate::qp::QpNames {
        variables: assembled.layout.variable_names(),
        constraints: Vec::new(),
    });
    let doc = serde_json::json!({
        "t": t,
        "agent": result.agent,
        "problem": problem.dump_json(),
        "objective_offset": assembled.objective_offset,
        "solution": sol,
        "cost": result.cost,
    });
    if let Err(err) = std::fs::write(&path, serde_json::to_vec_pretty(&doc).expect("serializable"))
    {
        log::warn!("could not write QP dump {}: {err}", path.display());
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostBreakdown {
    /// Tracking cost of the rolled-out input sequence against the reference.
    pub tracking: f64,
    /// Combined cooperation cost against the neighbor view.
    pub cooperation: f64,
    /// Drift penalty `delta * d(reference, previous reference)`.
    pub drift: f64,
}

impl CostBreakdown {
    pub fn total(&self) -> f64 {
        self.tracking + self.cooperation + self.drift
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverDiagnostics {
    pub iterations: usize,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub polished: bool,
}

/// Solution of one local problem.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LocalSolveResult {
    pub agent: AgentId,
    /// Optimal input sequence `u*(0..N-1 | t)`.
    #[serde(with = "crate::serde_util::serde_dvec_list")]
    pub u_seq: Vec<DVector<f64>>,
    /// Predicted states `x*(0..N | t)`.
    #[serde(with = "crate::serde_util::serde_dvec_list")]
    pub x_pred: Vec<DVector<f64>>,
    /// Optimal artificial reference with its lift.
    pub reference: CooperationReference,
    /// Cost terms recomputed from the solution, not from solver internals.
    pub cost: CostBreakdown,
    /// QP objective plus the dropped constant.
    pub model_objective: f64,
    pub solver: SolverDiagnostics,
    /// Raw QP iterates for warm-starting the next solve; not serialized.
    #[serde(skip)]
    pub qp_primal: Vec<f64>,
    #[serde(skip)]
    pub qp_dual: Vec<f64>,
}

impl LocalSolveResult {
    /// Gap between the solver's objective and the recomputed breakdown; the
    /// initialization regularizer keeps this slightly above zero there.
    pub fn objective_gap(&self) -> f64 {
        (self.model_objective - self.cost.total()).abs()
    }

    /// Warm-start data for a subsequent solve of the same layout.
    pub fn warm_start(&self) -> WarmStart {
        WarmStart {
            z: self.qp_primal.clone(),
            lambda: self.qp_dual.clone(),
        }
    }
}

/// Shifted previous solution: the recursive-feasibility witness.
#[derive(Debug, Clone)]
pub struct ShiftCandidate {
    pub u_seq: Vec<DVector<f64>>,
    pub reference: CooperationReference,
}

struct QpBuilder {
    triplets_p: Vec<(usize, usize, f64)>,
    q: Vec<f64>,
    offset: f64,
    triplets_a: Vec<(usize, usize, f64)>,
    l: Vec<f64>,
    u: Vec<f64>,
}

impl QpBuilder {
    fn new(dim: usize) -> Self {
        Self {
            triplets_p: Vec::new(),
            q: vec![0.0; dim],
            offset: 0.0,
            triplets_a: Vec::new(),
            l: Vec::new(),
            u: Vec::new(),
        }
    }

    fn row(&mut self, entries: &[(usize, f64)], lo: f64, hi: f64) {
        let r = self.l.len();
        for &(c, v) in entries {
            self.triplets_a.push((r, c, v));
        }
        self.l.push(lo);
        self.u.push(hi);
    }

    /// Add `(v_a - v_b)' W (v_a - v_b)` where the blocks are decision
    /// variables located by the index closures.
    fn quadratic_difference(
        &mut self,
        w: &DMatrix<f64>,
        idx_a: impl Fn(usize) -> usize,
        idx_b: impl Fn(usize) -> usize,
    ) {
        let d = w.nrows();
        for i in 0..d {
            for j in 0..d {
                let wij = w[(i, j)];
                if wij == 0.0 {
                    continue;
                }
                let (ai, aj) = (idx_a(i), idx_a(j));
                let (bi, bj) = (idx_b(i), idx_b(j));
                self.triplets_p.push((ai, aj, 2.0 * wij));
                self.triplets_p.push((bi, bj, 2.0 * wij));
                self.triplets_p.push((ai, bj, -2.0 * wij));
                self.triplets_p.push((bi, aj, -2.0 * wij));
            }
        }
    }

    /// Add `(v - target)' W (v - target)` with a fixed target vector.
    fn quadratic_to_target(
        &mut self,
        w: &DMatrix<f64>,
        idx: impl Fn(usize) -> usize,
        target: &DVector<f64>,
    ) {
        let d = w.nrows();
        let wt = w * target;
        for i in 0..d {
            for j in 0..d {
                let wij = w[(i, j)];
                if wij != 0.0 {
                    self.triplets_p.push((idx(i), idx(j), 2.0 * wij));
                }
            }
            self.q[idx(i)] -= 2.0 * wt[i];
        }
        self.offset += target.dot(&wt);
    }

    fn finish(self, dim: usize, layout: LocalProblemLayout) -> AssembledQp {
        let m = self.l.len();
        AssembledQp {
            problem: QpProblem::new(
                CscMatrix::from_triplets(dim, dim, self.triplets_p),
                self.q,
                CscMatrix::from_triplets(m, dim, self.triplets_a),
                self.l,
                self.u,
            ),
            layout,
            objective_offset: self.offset,
        }
    }
}

/// Shared constraint structure of both local problems: initial condition,
/// dynamics, stage boxes, terminal equality.
fn push_horizon_constraints(
    b: &mut QpBuilder,
    agent: &AgentModel,
    layout: &LocalProblemLayout,
    x_now: &DVector<f64>,
) {
    let n = agent.state_dim();
    let q = agent.input_dim();
    let horizon = layout.horizon;
    // Initial condition x(0) = x_now.
    for i in 0..n {
        b.row(&[(layout.x_index(0, i), 1.0)], x_now[i], x_now[i]);
    }
    // Dynamics A x(k) + B u(k) - x(k+1) = 0.
    for k in 0..horizon {
        for i in 0..n {
            let mut entries = Vec::with_capacity(n + q + 1);
            for j in 0..n {
                let v = agent.a[(i, j)];
                if v != 0.0 {
                    entries.push((layout.x_index(k, j), v));
                }
            }
            for j in 0..q {
                let v = agent.b[(i, j)];
                if v != 0.0 {
                    entries.push((layout.u_index(k, j), v));
                }
            }
            entries.push((layout.x_index(k + 1, i), -1.0));
            b.row(&entries, 0.0, 0.0);
        }
    }
    // Stage boxes for k in 0..N-1.
    for k in 0..horizon {
        for i in 0..n {
            b.row(
                &[(layout.x_index(k, i), 1.0)],
                agent.state_bounds.lower[i],
                agent.state_bounds.upper[i],
            );
        }
        for i in 0..q {
            b.row(
                &[(layout.u_index(k, i), 1.0)],
                agent.input_bounds.lower[i],
                agent.input_bounds.upper[i],
            );
        }
    }
}

/// Tracking MPC against a fixed admissible reference.
pub fn assemble_tracking_qp(
    agent: &AgentModel,
    x_now: &DVector<f64>,
    reference: &CooperationReference,
    horizon: usize,
) -> Result<AssembledQp, LocalSolveError> {
    assert!(horizon >= 1, "horizon must be at least 1");
    let report = agent.validate_admissible(reference);
    if !report.is_admissible() {
        return Err(LocalSolveError::InvalidReference {
            agent: agent.id,
            residual: report
                .max_dynamics_residual()
                .max(report.max_output_residual()),
        });
    }
    let layout = LocalProblemLayout {
        agent: agent.id,
        state_dim: agent.state_dim(),
        input_dim: agent.input_dim(),
        output_dim: agent.output_dim(),
        horizon,
        period: reference.period(),
        with_reference: false,
    };
    let dim = layout.decision_dim();
    let mut b = QpBuilder::new(dim);
    push_horizon_constraints(&mut b, agent, &layout, x_now);
    // Terminal equality against the fixed reference.
    let n = agent.state_dim();
    let xt_terminal = reference.x.at(horizon);
    for i in 0..n {
        b.row(
            &[(layout.x_index(horizon, i), 1.0)],
            xt_terminal[i],
            xt_terminal[i],
        );
    }
    // Stage costs against fixed targets.
    for k in 0..horizon {
        b.quadratic_to_target(&agent.q_weight, |i| layout.x_index(k, i), reference.x.at(k));
        b.quadratic_to_target(&agent.r_weight, |i| layout.u_index(k, i), reference.u.at(k));
    }
    Ok(b.finish(dim, layout))
}

/// The cooperation problem: tracking constraints plus the reference blocks as
/// decision variables with periodic dynamics and tightened boxes; objective
/// is tracking + combined cooperation cost + drift penalty.
pub fn assemble_cooperation_qp(
    agent: &AgentModel,
    x_now: &DVector<f64>,
    stage: &LocalStage<'_>,
    ctx: &SolveContext<'_>,
) -> Result<AssembledQp, LocalSolveError> {
    assert!(ctx.horizon >= 1, "horizon must be at least 1");
    assert!(ctx.period >= 1, "period must be at least 1");
    let n = agent.state_dim();
    let q = agent.input_dim();
    let p = agent.output_dim();
    let horizon = ctx.horizon;
    let period = ctx.period;
    let layout = LocalProblemLayout {
        agent: agent.id,
        state_dim: n,
        input_dim: q,
        output_dim: p,
        horizon,
        period,
        with_reference: true,
    };
    let dim = layout.decision_dim();
    let mut b = QpBuilder::new(dim);
    push_horizon_constraints(&mut b, agent, &layout, x_now);

    // Terminal equality x(N) - x_ref(N mod T) = 0.
    for i in 0..n {
        b.row(
            &[
                (layout.x_index(horizon, i), 1.0),
                (layout.ref_x_index(horizon, i), -1.0),
            ],
            0.0,
            0.0,
        );
    }
    // Periodic reference dynamics, wrap row included.
    for k in 0..period {
        for i in 0..n {
            let mut entries = Vec::with_capacity(n + q + 1);
            for j in 0..n {
                let v = agent.a[(i, j)];
                if v != 0.0 {
                    entries.push((layout.ref_x_index(k, j), v));
                }
            }
            for j in 0..q {
                let v = agent.b[(i, j)];
                if v != 0.0 {
                    entries.push((layout.ref_u_index(k, j), v));
                }
            }
            entries.push((layout.ref_x_index(k + 1, i), -1.0));
            // For period 1 the diagonal terms combine; triplet summation
            // handles the duplicates.
            b.row(&entries, 0.0, 0.0);
        }
    }
    // Tightened reference boxes.
    for k in 0..period {
        for i in 0..n {
            b.row(
                &[(layout.ref_x_index(k, i), 1.0)],
                agent.ref_state_bounds.lower[i],
                agent.ref_state_bounds.upper[i],
            );
        }
        for i in 0..q {
            b.row(
                &[(layout.ref_u_index(k, i), 1.0)],
                agent.ref_input_bounds.lower[i],
                agent.ref_input_bounds.upper[i],
            );
        }
    }

    // Tracking cost with the reference as a decision variable.
    for k in 0..horizon {
        b.quadratic_difference(
            &agent.q_weight,
            |i| layout.x_index(k, i),
            |i| layout.ref_x_index(k, i),
        );
        b.quadratic_difference(
            &agent.r_weight,
            |i| layout.u_index(k, i),
            |i| layout.ref_u_index(k, i),
        );
    }

    // Output rows of the reference: y_ref(k) = C x_ref(k) + D u_ref(k),
    // substituted directly into the cooperation and drift terms.
    let cd = {
        let mut m = DMatrix::zeros(p, n + q);
        m.view_mut((0, 0), (p, n)).copy_from(&agent.c);
        m.view_mut((0, n), (p, q)).copy_from(&agent.d);
        m
    };
    let ref_block_index = |k: usize, i: usize| {
        if i < n {
            layout.ref_x_index(k, i)
        } else {
            layout.ref_u_index(k, i - n)
        }
    };

    match stage {
        LocalStage::Initialization => {
            // Canonical tie-break: pull the reference towards the equilibrium
            // candidate at the current state with zero input.
            let reg = DMatrix::identity(n, n) * INIT_REGULARIZER;
            let reg_u = DMatrix::identity(q, q) * INIT_REGULARIZER;
            let zero_u = DVector::zeros(q);
            for k in 0..period {
                b.quadratic_to_target(&reg, |i| layout.ref_x_index(k, i), x_now);
                b.quadratic_to_target(&reg_u, |i| layout.ref_u_index(k, i), &zero_u);
            }
        }
        LocalStage::Cooperative {
            neighbors,
            previous,
        } => {
            let prev_report = agent.validate_admissible(previous);
            if !prev_report.is_admissible() {
                return Err(LocalSolveError::InvalidReference {
                    agent: agent.id,
                    residual: prev_report
                        .max_dynamics_residual()
                        .max(prev_report.max_output_residual()),
                });
            }
            // Combined cooperation cost 1/2 v'Hv + g'v + c over vec(y_ref),
            // mapped through the output rows.
            let qf = ctx.cost_spec.combined_cost_quadratic_form_present(
                ctx.graph,
                agent.id,
                period,
                p,
                neighbors,
            )?;
            b.offset += qf.c;
            for k1 in 0..period {
                for k2 in 0..period {
                    let block = qf.h.view((k1 * p, k2 * p), (p, p));
                    if block.amax() == 0.0 {
                        continue;
                    }
                    // 1/2 y1' H12 y2 pairs contribute cd' H12 cd between the
                    // reference blocks of k1 and k2.
                    let w = cd.transpose() * block * &cd;
                    for i in 0..(n + q) {
                        for j in 0..(n + q) {
                            if w[(i, j)] != 0.0 {
                                b.triplets_p.push((
                                    ref_block_index(k1, i),
                                    ref_block_index(k2, j),
                                    w[(i, j)],
                                ));
                            }
                        }
                    }
                }
            }
            for k in 0..period {
                let gk = qf.g.rows(k * p, p);
                let mapped = cd.transpose() * gk;
                for i in 0..(n + q) {
                    b.q[ref_block_index(k, i)] += mapped[i];
                }
            }

            // Drift term: delta * sum_k ||y_ref(k) - y_prev(k+1)||^2 with the
            // previous reference shifted by one step.
            let shifted_prev = previous.y.shift();
            let delta_w = DMatrix::identity(p, p) * ctx.delta;
            for k in 0..period {
                let target = shifted_prev.at(k);
                // Express (y_ref(k) - target)' (delta I) (y_ref(k) - target)
                // in the reference block via the output rows.
                let w = cd.transpose() * &delta_w * &cd;
                let wt = cd.transpose() * &delta_w * target;
                for i in 0..(n + q) {
                    for j in 0..(n + q) {
                        if w[(i, j)] != 0.0 {
                            b.triplets_p.push((
                                ref_block_index(k, i),
                                ref_block_index(k, j),
                                2.0 * w[(i, j)],
                            ));
                        }
                    }
                    b.q[ref_block_index(k, i)] -= 2.0 * wt[i];
                }
                b.offset += ctx.delta * target.norm_squared();
            }
        }
    }

    Ok(b.finish(dim, layout))
}

fn run_qp(
    agent: &AgentModel,
    assembled: &AssembledQp,
    settings: &QpSettings,
    warm: Option<&WarmStart>,
) -> Result<QpSolution, LocalSolveError> {
    let sol = solve_qp_warm(&assembled.problem, settings, warm).map_err(|source| {
        LocalSolveError::Qp {
            agent: agent.id,
            source,
        }
    })?;
    match sol.status {
        QpStatus::Solved => Ok(sol),
        QpStatus::PrimalInfeasible => Err(LocalSolveError::Infeasible { agent: agent.id }),
        QpStatus::DualInfeasible => Err(LocalSolveError::Unbounded { agent: agent.id }),
        QpStatus::MaxIter => Err(LocalSolveError::NotConverged {
            agent: agent.id,
            primal: sol.primal_residual,
            dual: sol.dual_residual,
        }),
    }
}

fn extract_horizon(
    layout: &LocalProblemLayout,
    z: &[f64],
) -> (Vec<DVector<f64>>, Vec<DVector<f64>>) {
    let x_pred = (0..=layout.horizon)
        .map(|k| DVector::from_fn(layout.state_dim, |i, _| z[layout.x_index(k, i)]))
        .collect();
    let u_seq = (0..layout.horizon)
        .map(|k| DVector::from_fn(layout.input_dim, |i, _| z[layout.u_index(k, i)]))
        .collect();
    (x_pred, u_seq)
}

fn extract_reference(
    agent: &AgentModel,
    layout: &LocalProblemLayout,
    z: &[f64],
) -> CooperationReference {
    let x_steps: Vec<DVector<f64>> = (0..layout.period)
        .map(|k| DVector::from_fn(layout.state_dim, |i, _| z[layout.ref_x_index(k, i)]))
        .collect();
    let u_steps: Vec<DVector<f64>> = (0..layout.period)
        .map(|k| DVector::from_fn(layout.input_dim, |i, _| z[layout.ref_u_index(k, i)]))
        .collect();
    let y_steps: Vec<DVector<f64>> = x_steps
        .iter()
        .zip(&u_steps)
        .map(|(x, u)| agent.output(x, u))
        .collect();
    CooperationReference {
        y: PeriodicTrajectory::new(y_steps).expect("period >= 1"),
        x: PeriodicTrajectory::new(x_steps).expect("period >= 1"),
        u: PeriodicTrajectory::new(u_steps).expect("period >= 1"),
    }
}

/// Tracking cost of rolling `u_seq` forward from `x_now` under the exact
/// dynamics, measured against the reference lift. This is the
/// solver-independent tracking cost used everywhere in diagnostics.
pub fn rollout_tracking_cost(
    agent: &AgentModel,
    x_now: &DVector<f64>,
    u_seq: &[DVector<f64>],
    reference: &CooperationReference,
) -> f64 {
    let mut x = x_now.clone();
    let mut cost = 0.0;
    for (k, u) in u_seq.iter().enumerate() {
        let dx = &x - reference.x.at(k);
        let du = u - reference.u.at(k);
        cost += (dx.transpose() * &agent.q_weight * &dx)[(0, 0)];
        cost += (du.transpose() * &agent.r_weight * &du)[(0, 0)];
        x = agent.step_dynamics(&x, u);
    }
    cost
}

/// Solve the cooperation problem (or its decentralized initialization).
pub fn solve_local_problem(
    agent: &AgentModel,
    x_now: &DVector<f64>,
    stage: &LocalStage<'_>,
    ctx: &SolveContext<'_>,
    warm: Option<&WarmStart>,
) -> Result<LocalSolveResult, LocalSolveError> {
    let assembled = assemble_cooperation_qp(agent, x_now, stage, ctx)?;
    let sol = run_qp(agent, &assembled, ctx.settings, warm)?;
    let (x_pred, u_seq) = extract_horizon(&assembled.layout, &sol.z);
    let reference = extract_reference(agent, &assembled.layout, &sol.z);

    let tracking = rollout_tracking_cost(agent, x_now, &u_seq, &reference);
    let (cooperation, drift) = match stage {
        LocalStage::Initialization => (0.0, 0.0),
        LocalStage::Cooperative {
            neighbors,
            previous,
        } => {
            let coop = ctx
                .cost_spec
                .eval_combined_cost_present(ctx.graph, agent.id, &reference.y, neighbors)?;
            let d = shifted_sq_distance(&reference.y, &previous.y)
                .expect("periods match by construction");
            (coop, ctx.delta * d)
        }
    };

    let result = LocalSolveResult {
        agent: agent.id,
        u_seq,
        x_pred,
        reference,
        cost: CostBreakdown {
            tracking,
            cooperation,
            drift,
        },
        model_objective: sol.objective + assembled.objective_offset,
        solver: SolverDiagnostics {
            iterations: sol.iterations,
            primal_residual: sol.primal_residual,
            dual_residual: sol.dual_residual,
            polished: sol.polished,
        },
        qp_primal: sol.z.clone(),
        qp_dual: sol.lambda.clone(),
    };
    dump_solve(ctx, &assembled, &sol, &result);
    Ok(result)
}

/// Solve the plain tracking problem against a fixed reference (the fallback
/// for agents that skip their slot in the sequence).
pub fn solve_tracking_problem(
    agent: &AgentModel,
    x_now: &DVector<f64>,
    reference: &CooperationReference,
    ctx: &SolveContext<'_>,
) -> Result<LocalSolveResult, LocalSolveError> {
    let assembled = assemble_tracking_qp(agent, x_now, reference, ctx.horizon)?;
    let sol = run_qp(agent, &assembled, ctx.settings, None)?;
    let (x_pred, u_seq) = extract_horizon(&assembled.layout, &sol.z);
    let tracking = rollout_tracking_cost(agent, x_now, &u_seq, reference);
    let result = LocalSolveResult {
        agent: agent.id,
        u_seq,
        x_pred,
        reference: reference.clone(),
        cost: CostBreakdown {
            tracking,
            cooperation: 0.0,
            drift: 0.0,
        },
        model_objective: sol.objective + assembled.objective_offset,
        solver: SolverDiagnostics {
            iterations: sol.iterations,
            primal_residual: sol.primal_residual,
            dual_residual: sol.dual_residual,
            polished: sol.polished,
        },
        qp_primal: sol.z.clone(),
        qp_dual: sol.lambda.clone(),
    };
    dump_solve(ctx, &assembled, &sol, &result);
    Ok(result)
}

/// Shift a previous solution by one step: rotate the reference, drop the
/// first input and append the terminal control (the reference input at the
/// horizon slot). Under the terminal equality constraint this candidate is
/// feasible at the next step.
pub fn candidate_shift(
    prev_inputs: &[DVector<f64>],
    prev_reference: &CooperationReference,
) -> ShiftCandidate {
    let horizon = prev_inputs.len();
    let mut u_seq: Vec<DVector<f64>> = prev_inputs[1..].to_vec();
    u_seq.push(prev_reference.u.at(horizon).clone());
    ShiftCandidate {
        u_seq,
        reference: prev_reference.shift(),
    }
}

/// Worst constraint residual of the shift candidate rolled forward from
/// `x_start`: stage-box violations, terminal equality mismatch, and candidate
/// reference admissibility, all as a single max.
pub fn candidate_feasibility_residual(
    agent: &AgentModel,
    x_start: &DVector<f64>,
    cand: &ShiftCandidate,
) -> f64 {
    let mut residual: f64 = 0.0;
    let mut x = x_start.clone();
    for u in &cand.u_seq {
        let report = agent.check_constraints(&x, u, BoundSet::Nominal);
        residual = residual.max(-report.worst().min(0.0));
        x = agent.step_dynamics(&x, u);
    }
    let horizon = cand.u_seq.len();
    residual = residual.max((&x - cand.reference.x.at(horizon)).amax());
    let report = agent.validate_admissible(&cand.reference);
    residual = residual
        .max(report.max_dynamics_residual())
        .max(report.max_output_residual());
    for &(_, _, margin) in &report.bound_violations {
        residual = residual.max(-margin);
    }
    residual
}
