//! Post-run certificates: the composite value function, synchronization and
//! periodicity residuals, and feasibility reports.
//!
//! Everything here is recomputed from trace data alone — references, input
//! sequences, and model parameters — never from solver-reported objectives,
//! so the checks are independent of the solver implementation.

use crate::agent::{AgentId, ConstraintId};
use crate::graph::Graph;
use crate::mpc::{candidate_feasibility_residual, candidate_shift, rollout_tracking_cost};
use crate::trace::{SimTrace, StepRecord};
use crate::trajectory::shifted_sq_distance;
use serde::Serialize;
use std::collections::BTreeMap;
use std::fmt;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum DiagnosticsError {
    #[error("trace has no record for t = {0}")]
    MissingTimestep(usize),
    #[error("synchronization error needs at least two agents at t = {0}")]
    NeedTwoAgents(usize),
    #[error("periodicity residual at t = {t} needs t + {period} <= {last}")]
    OutOfRange { t: usize, period: usize, last: usize },
    #[error("agent {0} is missing from the trace models")]
    UnknownModel(AgentId),
}

fn record(trace: &SimTrace, t: usize) -> Result<&StepRecord, DiagnosticsError> {
    trace.record(t).ok_or(DiagnosticsError::MissingTimestep(t))
}

/// The three terms of the composite value function at time `t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LyapunovComponents {
    /// Fleet cooperation cost of the optimal references.
    pub cooperation: f64,
    /// Sum of tracking costs, each recomputed by rolling the optimal input
    /// sequence forward from the recorded state.
    pub tracking: f64,
    /// Sum of the delta-weighted drift terms against the previous references.
    pub drift: f64,
}

impl LyapunovComponents {
    pub fn total(&self) -> f64 {
        self.cooperation + self.tracking + self.drift
    }
}

/// Composite value function `V(t)`: cooperation cost plus all tracking costs
/// plus the drift penalties. The drift term is zero at an agent's first
/// appearance (the initialization omits it).
pub fn lyapunov_components(
    trace: &SimTrace,
    t: usize,
) -> Result<LyapunovComponents, DiagnosticsError> {
    let rec = record(trace, t)?;
    let prev = if t > 0 { trace.record(t - 1) } else { None };

    let graph = Graph::new(rec.graph_edges.iter().copied()).expect("trace edges are valid");
    let refs: BTreeMap<AgentId, crate::trajectory::PeriodicTrajectory> = rec
        .agents
        .iter()
        .map(|(&id, a)| (id, a.reference.y.clone()))
        .collect();
    let cooperation = trace
        .cooperation
        .eval_global_cost(&graph, &refs)
        .expect("trace references are consistent");

    let mut tracking = 0.0;
    let mut drift = 0.0;
    for (&id, agent_rec) in &rec.agents {
        let model = trace
            .models
            .get(&id)
            .ok_or(DiagnosticsError::UnknownModel(id))?;
        tracking += rollout_tracking_cost(
            model,
            &agent_rec.state,
            &agent_rec.input_sequence,
            &agent_rec.reference,
        );
        if let Some(prev_rec) = prev {
            if let Some(prev_agent) = prev_rec.agents.get(&id) {
                let d = shifted_sq_distance(&agent_rec.reference.y, &prev_agent.reference.y)
                    .expect("periods match within a trace");
                drift += trace.delta[&id] * d;
            }
        }
    }
    Ok(LyapunovComponents {
        cooperation,
        tracking,
        drift,
    })
}

pub fn lyapunov_value(trace: &SimTrace, t: usize) -> Result<f64, DiagnosticsError> {
    Ok(lyapunov_components(trace, t)?.total())
}

/// `V(t)` for every recorded timestep.
pub fn lyapunov_series(trace: &SimTrace) -> Result<Vec<(usize, f64)>, DiagnosticsError> {
    trace
        .records
        .iter()
        .map(|r| Ok((r.t, lyapunov_value(trace, r.t)?)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MonotonicityBreach {
    pub t_from: usize,
    pub t_to: usize,
    pub increase: f64,
}

/// Verify `V(t+1) <= V(t) + tol` between consecutive records. Pairs where
/// the agent set changes (join/leave events) are not comparable and are
/// skipped.
pub fn check_monotonicity(
    trace: &SimTrace,
    tol: f64,
) -> Result<Result<(), MonotonicityBreach>, DiagnosticsError> {
    let series = lyapunov_series(trace)?;
    for pair in series.windows(2) {
        let (t0, v0) = pair[0];
        let (t1, v1) = pair[1];
        let a0: Vec<AgentId> = record(trace, t0)?.agents.keys().copied().collect();
        let a1: Vec<AgentId> = record(trace, t1)?.agents.keys().copied().collect();
        if a0 != a1 {
            continue;
        }
        if v1 - v0 > tol {
            return Ok(Err(MonotonicityBreach {
                t_from: t0,
                t_to: t1,
                increase: v1 - v0,
            }));
        }
    }
    Ok(Ok(()))
}

/// Synchronization spread at time `t`, over both the optimal references and
/// the realized outputs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SyncError {
    /// `max_{i,j,k} ||y_i(k|t) - y_j(k|t)||_inf` over reference pairs.
    pub reference_spread: f64,
    /// `max_{i,j} ||y_i(t) - y_j(t)||_inf` over realized outputs.
    pub output_spread: f64,
}

pub fn sync_error(trace: &SimTrace, t: usize) -> Result<SyncError, DiagnosticsError> {
    let rec = record(trace, t)?;
    if rec.agents.len() < 2 {
        return Err(DiagnosticsError::NeedTwoAgents(t));
    }
    let agents: Vec<_> = rec.agents.values().collect();
    let mut reference_spread: f64 = 0.0;
    let mut output_spread: f64 = 0.0;
    for (i, a) in agents.iter().enumerate() {
        for b in &agents[i + 1..] {
            output_spread = output_spread.max((&a.output - &b.output).amax());
            let period = a.reference.y.period().max(b.reference.y.period());
            for k in 0..period {
                reference_spread =
                    reference_spread.max((a.reference.y.at(k) - b.reference.y.at(k)).amax());
            }
        }
    }
    Ok(SyncError {
        reference_spread,
        output_spread,
    })
}

/// `max_i ||x_i(t + T) - x_i(t)||_inf` over agents present at both times.
pub fn periodicity_residual(trace: &SimTrace, t: usize) -> Result<f64, DiagnosticsError> {
    let last = trace.last_t().ok_or(DiagnosticsError::MissingTimestep(t))?;
    let period = trace.period;
    if t + period > last {
        return Err(DiagnosticsError::OutOfRange { t, period, last });
    }
    let now = record(trace, t)?;
    let later = record(trace, t + period)?;
    let mut worst: f64 = 0.0;
    for (id, a) in &now.agents {
        if let Some(b) = later.agents.get(id) {
            worst = worst.max((&b.state - &a.state).amax());
        }
    }
    Ok(worst)
}

/// Per-(t, agent) feasibility data.
#[derive(Debug, Clone, Serialize)]
pub struct FeasibilityEntry {
    pub t: usize,
    pub agent: AgentId,
    /// Worst signed margin of the realized `(x(t), u(t))` against the nominal
    /// constraint set; negative means violation.
    pub nominal_margin: f64,
    /// Feasibility residual of the shifted candidate, rolled forward from the
    /// next recorded state. Absent for the final record.
    pub candidate_residual: Option<f64>,
    /// Worst residual of the optimal reference's admissibility check.
    pub reference_residual: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct FeasibilityReport {
    pub entries: Vec<FeasibilityEntry>,
    /// Minimum nominal margin over the whole run.
    pub worst_nominal_margin: f64,
    /// Maximum candidate residual over the whole run.
    pub worst_candidate_residual: f64,
    /// Maximum reference admissibility residual over the whole run.
    pub worst_reference_residual: f64,
    /// Nominal violations beyond the reporting slack.
    pub violations: Vec<(usize, AgentId, ConstraintId, f64)>,
}

/// Slack applied when listing nominal constraint violations.
pub const NOMINAL_VIOLATION_SLACK: f64 = 1e-9;

pub fn feasibility_report(trace: &SimTrace) -> Result<FeasibilityReport, DiagnosticsError> {
    let mut entries = Vec::new();
    let mut violations = Vec::new();
    let mut worst_nominal_margin = f64::INFINITY;
    let mut worst_candidate_residual: f64 = 0.0;
    let mut worst_reference_residual: f64 = 0.0;

    for (idx, rec) in trace.records.iter().enumerate() {
        let next = trace.records.get(idx + 1);
        for (&id, agent_rec) in &rec.agents {
            let model = trace
                .models
                .get(&id)
                .ok_or(DiagnosticsError::UnknownModel(id))?;
            let report = model.check_constraints(
                &agent_rec.state,
                &agent_rec.input,
                crate::agent::BoundSet::Nominal,
            );
            let nominal_margin = report.worst();
            worst_nominal_margin = worst_nominal_margin.min(nominal_margin);
            for (cid, margin) in report.violations(NOMINAL_VIOLATION_SLACK) {
                violations.push((rec.t, id, cid, margin));
            }

            let admissibility = model.validate_admissible(&agent_rec.reference);
            let mut reference_residual = admissibility
                .max_dynamics_residual()
                .max(admissibility.max_output_residual());
            for &(_, _, margin) in &admissibility.bound_violations {
                reference_residual = reference_residual.max(-margin);
            }
            worst_reference_residual = worst_reference_residual.max(reference_residual);

            let candidate_residual = next.and_then(|next_rec| {
                next_rec.agents.get(&id).map(|next_agent| {
                    let cand =
                        candidate_shift(&agent_rec.input_sequence, &agent_rec.reference);
                    candidate_feasibility_residual(model, &next_agent.state, &cand)
                })
            });
            if let Some(res) = candidate_residual {
                worst_candidate_residual = worst_candidate_residual.max(res);
            }

            entries.push(FeasibilityEntry {
                t: rec.t,
                agent: id,
                nominal_margin,
                candidate_residual,
                reference_residual,
            });
        }
    }
    Ok(FeasibilityReport {
        entries,
        worst_nominal_margin,
        worst_candidate_residual,
        worst_reference_residual,
        violations,
    })
}

impl FeasibilityReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for FeasibilityReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "feasibility: worst nominal margin {:+.3e}, worst candidate residual {:.3e}, worst reference residual {:.3e}",
            self.worst_nominal_margin, self.worst_candidate_residual, self.worst_reference_residual
        )?;
        if self.violations.is_empty() {
            writeln!(f, "no nominal constraint violations beyond {NOMINAL_VIOLATION_SLACK:.0e}")
        } else {
            writeln!(f, "{} violation(s):", self.violations.len())?;
            for (t, agent, cid, margin) in &self.violations {
                writeln!(f, "  t={t} agent={agent} {cid}: margin {margin:+.3e}")?;
            }
            Ok(())
        }
    }
}

/// Cross-check of two computation paths: the solver-reported objective of
/// every solve against the cost terms recomputed from trace data alone (the
/// tracking cost by rolling the inputs forward, the combined cooperation
/// cost against the neighbor view reconstructed from the message protocol,
/// and the drift term from the stored references). Returns the worst gap.
///
/// The initialization stage carries a small tie-break regularizer inside the
/// solver objective, so its gap is bounded by the regularizer magnitude
/// rather than zero; skipped agents solve the plain tracking problem.
pub fn objective_consistency(trace: &SimTrace) -> Result<f64, DiagnosticsError> {
    let mut worst: f64 = 0.0;
    for (idx, rec) in trace.records.iter().enumerate() {
        let prev = if idx > 0 {
            trace.records.get(idx - 1)
        } else {
            None
        };
        let graph = Graph::new(rec.graph_edges.iter().copied()).expect("trace edges are valid");
        for (&id, agent_rec) in &rec.agents {
            let model = trace
                .models
                .get(&id)
                .ok_or(DiagnosticsError::UnknownModel(id))?;
            let tracking = rollout_tracking_cost(
                model,
                &agent_rec.state,
                &agent_rec.input_sequence,
                &agent_rec.reference,
            );
            let recomputed = match agent_rec.stage {
                crate::trace::StageTag::Skipped => tracking,
                crate::trace::StageTag::Initialization => {
                    // The init objective carries the tie-break regularizer.
                    let mut reg = 0.0;
                    for k in 0..agent_rec.reference.period() {
                        reg += (agent_rec.reference.x.at(k) - &agent_rec.state).norm_squared();
                        reg += agent_rec.reference.u.at(k).norm_squared();
                    }
                    tracking + crate::mpc::INIT_REGULARIZER * reg
                }
                crate::trace::StageTag::Cooperative => {
                    // Rebuild the neighbor view the solve saw from the
                    // freshness tags.
                    let mut view = BTreeMap::new();
                    for (&nb, tag) in &agent_rec.mailbox_view {
                        let traj = match tag {
                            crate::trace::Freshness::Fresh => {
                                rec.agents.get(&nb).map(|a| a.reference.y.clone())
                            }
                            crate::trace::Freshness::Shifted => prev
                                .and_then(|p| p.agents.get(&nb))
                                .map(|a| a.reference.y.shift()),
                        };
                        if let Some(traj) = traj {
                            view.insert(nb, traj);
                        }
                    }
                    let coop = trace
                        .cooperation
                        .eval_combined_cost_present(&graph, id, &agent_rec.reference.y, &view)
                        .expect("trace view is consistent");
                    let drift = prev
                        .and_then(|p| p.agents.get(&id))
                        .map(|p_agent| {
                            trace.delta[&id]
                                * shifted_sq_distance(
                                    &agent_rec.reference.y,
                                    &p_agent.reference.y,
                                )
                                .expect("periods match")
                        })
                        .unwrap_or(0.0);
                    tracking + coop + drift
                }
            };
            worst = worst.max((recomputed - agent_rec.model_objective).abs());
        }
    }
    Ok(worst)
}

/// Running sum of the fleet drift term; its convergence certifies that the
/// references settle onto a fixed orbit.
pub fn drift_running_sum(trace: &SimTrace) -> Result<Vec<(usize, f64)>, DiagnosticsError> {
    let mut total = 0.0;
    let mut out = Vec::with_capacity(trace.records.len());
    for rec in &trace.records {
        total += lyapunov_components(trace, rec.t)?.drift;
        out.push((rec.t, total));
    }
    Ok(out)
}
