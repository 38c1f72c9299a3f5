//! The sequential coordination protocol and the closed-loop engine.
//!
//! Within each time step the agents solve in a fixed order. Each agent builds
//! its neighbor view from its mailbox: trajectories received earlier in this
//! step are used as-is, everything else is the one-step shift of the previous
//! step's broadcast. After solving, the agent broadcasts its optimal
//! reference exactly once. When every agent has solved, all apply the first
//! input of their optimal sequence and the fleet state advances.
//!
//! Initialization is decentralized: each agent's first solve omits the
//! coupling and drift terms, so joining agents can enter a running fleet
//! without any global coordination.

use crate::agent::{AgentId, AgentModel};
use crate::cooperation::CooperationCostSpec;
use crate::graph::Graph;
use crate::mpc::{
    solve_local_problem, solve_tracking_problem, LocalSolveError, LocalSolveResult, LocalStage,
    SolveContext,
};
use crate::qp::{QpSettings, WarmStart};
use crate::scenario::ScenarioError;
use crate::trace::{
    fnv1a_hex, AgentRecord, Freshness, Message, SimTrace, StageTag, StepRecord,
};
use crate::trajectory::PeriodicTrajectory;
use nalgebra::DVector;
use serde::Serialize;
use std::collections::{BTreeMap, BTreeSet};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error("agent {agent}: initialization infeasible: {source}")]
    InfeasibleInitialization {
        agent: AgentId,
        #[source]
        source: LocalSolveError,
    },
    #[error("agent {agent} at t={t}: local problem failed: {source}")]
    LocalInfeasible {
        agent: AgentId,
        t: usize,
        #[source]
        source: LocalSolveError,
    },
    #[error("agent {0} is unknown")]
    UnknownAgent(AgentId),
    #[error("agent {0} already exists")]
    DuplicateAgent(AgentId),
    #[error("engine is not initialized; call initialize() first")]
    NotInitialized,
    #[error("engine is already initialized")]
    AlreadyInitialized,
    #[error(
        "agent {agent} at t={t}: stale mailbox entry from {from} (computed at {computed_at})"
    )]
    StaleMailbox {
        agent: AgentId,
        from: AgentId,
        t: usize,
        computed_at: usize,
    },
}

/// Full description of one closed-loop run.
#[derive(Debug, Clone, Serialize)]
pub struct Scenario {
    pub agents: Vec<AgentModel>,
    pub graph: Graph,
    pub cooperation: CooperationCostSpec,
    pub period: usize,
    pub horizon: usize,
    pub delta: BTreeMap<AgentId, f64>,
    #[serde(with = "serde_x0")]
    pub x0: BTreeMap<AgentId, DVector<f64>>,
    pub steps: usize,
    pub solver: QpSettings,
    /// Solve order within each time step; `None` means ascending ids.
    pub order: Option<Vec<AgentId>>,
    /// `(agent, t)` pairs that skip their slot and fall back to tracking
    /// their shifted previous reference.
    pub skips: BTreeSet<(AgentId, usize)>,
}

mod serde_x0 {
    use super::AgentId;
    use nalgebra::DVector;
    use serde::{Serialize, Serializer};
    use std::collections::BTreeMap;

    pub fn serialize<S: Serializer>(
        map: &BTreeMap<AgentId, DVector<f64>>,
        s: S,
    ) -> Result<S::Ok, S::Error> {
        let plain: BTreeMap<AgentId, Vec<f64>> = map
            .iter()
            .map(|(&id, v)| (id, v.iter().copied().collect()))
            .collect();
        plain.serialize(s)
    }
}

impl Scenario {
    pub fn validate(&self) -> Result<(), ScenarioError> {
        if self.agents.is_empty() {
            return Err(ScenarioError::NoAgents);
        }
        if self.period == 0 || self.horizon == 0 {
            return Err(ScenarioError::BadHorizon {
                horizon: self.horizon,
                period: self.period,
            });
        }
        let mut ids = BTreeSet::new();
        let p = self.agents[0].output_dim();
        for a in &self.agents {
            if !ids.insert(a.id) {
                return Err(ScenarioError::DuplicateAgentId(a.id));
            }
            if a.output_dim() != p {
                return Err(ScenarioError::MixedOutputDims {
                    agent: a.id,
                    got: a.output_dim(),
                    expected: p,
                });
            }
        }
        for (a, b) in self.graph.edges() {
            for v in [a, b] {
                if !ids.contains(&v) {
                    return Err(ScenarioError::EdgeUnknownAgent(v));
                }
            }
        }
        self.cooperation
            .validate(&self.graph)
            .map_err(ScenarioError::Cooperation)?;
        for (&id, offset) in &self.cooperation.offsets {
            if !ids.contains(&id) {
                return Err(ScenarioError::OffsetUnknownAgent(id));
            }
            if offset.len() != p {
                return Err(ScenarioError::BadOffsetDim {
                    agent: id,
                    got: offset.len(),
                    expected: p,
                });
            }
        }
        for a in &self.agents {
            let delta = self
                .delta
                .get(&a.id)
                .ok_or(ScenarioError::MissingDelta(a.id))?;
            if !delta.is_finite() || *delta <= 0.0 {
                return Err(ScenarioError::NonPositiveDelta(a.id));
            }
            let x0 = self.x0.get(&a.id).ok_or(ScenarioError::MissingX0(a.id))?;
            if x0.len() != a.state_dim() {
                return Err(ScenarioError::BadX0Dim {
                    agent: a.id,
                    got: x0.len(),
                    expected: a.state_dim(),
                });
            }
        }
        if let Some(order) = &self.order {
            let order_set: BTreeSet<AgentId> = order.iter().copied().collect();
            if order.len() != order_set.len() || order_set != ids {
                return Err(ScenarioError::BadOrder);
            }
        }
        for &(id, t) in &self.skips {
            if !ids.contains(&id) {
                return Err(ScenarioError::SkipUnknownAgent(id));
            }
            if t == 0 {
                return Err(ScenarioError::SkipAtInitialization(id));
            }
        }
        Ok(())
    }

    pub fn agent(&self, id: AgentId) -> Option<&AgentModel> {
        self.agents.iter().find(|a| a.id == id)
    }

    fn fingerprint(&self) -> String {
        let json = serde_json::to_string(self).expect("scenario serializes");
        fnv1a_hex(json.as_bytes())
    }
}

#[derive(Debug, Clone)]
pub struct MailboxEntry {
    pub trajectory: PeriodicTrajectory,
    pub computed_at: usize,
}

#[derive(Debug, Clone)]
pub struct AgentRuntime {
    pub x: DVector<f64>,
    /// Round index at which this agent runs its decentralized initialization.
    pub join_round: usize,
    pub last: Option<LocalSolveResult>,
    pub mailbox: BTreeMap<AgentId, MailboxEntry>,
}

/// Mutable per-run state of the fleet.
#[derive(Debug, Clone)]
pub struct FleetState {
    /// Time of the last completed solve round.
    pub t: usize,
    pub agents: BTreeMap<AgentId, AgentRuntime>,
}

/// Closed-loop engine: owns the scenario, the fleet state, and the trace
/// being built.
pub struct Engine {
    scenario: Scenario,
    state: FleetState,
    trace: SimTrace,
    warm: BTreeMap<AgentId, WarmStart>,
    initialized: bool,
    qp_dump_dir: Option<std::path::PathBuf>,
}

impl Engine {
    pub fn new(scenario: Scenario) -> Result<Self, RunError> {
        scenario.validate()?;
        let fingerprint = scenario.fingerprint();
        let agents = scenario
            .agents
            .iter()
            .map(|a| {
                (
                    a.id,
                    AgentRuntime {
                        x: scenario.x0[&a.id].clone(),
                        join_round: 0,
                        last: None,
                        mailbox: BTreeMap::new(),
                    },
                )
            })
            .collect();
        let trace = SimTrace {
            fingerprint,
            horizon: scenario.horizon,
            period: scenario.period,
            cooperation: scenario.cooperation.clone(),
            models: scenario.agents.iter().map(|a| (a.id, a.clone())).collect(),
            delta: scenario.delta.clone(),
            records: Vec::new(),
        };
        Ok(Self {
            scenario,
            state: FleetState {
                t: 0,
                agents,
            },
            trace,
            warm: BTreeMap::new(),
            initialized: false,
            qp_dump_dir: None,
        })
    }

    /// Convenience: run the whole scenario and return the trace.
    pub fn run(scenario: Scenario) -> Result<SimTrace, RunError> {
        let steps = scenario.steps;
        let mut engine = Self::new(scenario)?;
        engine.initialize()?;
        for _ in 0..steps {
            engine.step()?;
        }
        Ok(engine.into_trace())
    }

    pub fn state(&self) -> &FleetState {
        &self.state
    }

    /// Dump every solved QP (problem, solution, breakdown) into a directory.
    pub fn set_qp_dump_dir(&mut self, dir: std::path::PathBuf) {
        self.qp_dump_dir = Some(dir);
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    pub fn trace(&self) -> &SimTrace {
        &self.trace
    }

    pub fn into_trace(self) -> SimTrace {
        self.trace
    }

    /// Round 0: every agent solves its decentralized initialization, shares
    /// the result, and applies its first input, producing x(1).
    pub fn initialize(&mut self) -> Result<(), RunError> {
        if self.initialized {
            return Err(RunError::AlreadyInitialized);
        }
        self.round(0)?;
        self.state.t = 0;
        self.initialized = true;
        self.advance_states();
        Ok(())
    }

    /// Run the next solve round and apply the resulting inputs.
    pub fn step(&mut self) -> Result<(), RunError> {
        if !self.initialized {
            return Err(RunError::NotInitialized);
        }
        let t_next = self.state.t + 1;
        self.round(t_next)?;
        self.state.t = t_next;
        self.advance_states();
        Ok(())
    }

    /// Apply each agent's first optimal input under the exact dynamics.
    fn advance_states(&mut self) {
        for (id, rt) in self.state.agents.iter_mut() {
            if let Some(last) = &rt.last {
                let model = self
                    .scenario
                    .agents
                    .iter()
                    .find(|a| a.id == *id)
                    .expect("runtime agent exists in scenario");
                rt.x = model.step_dynamics(&rt.x, &last.u_seq[0]);
            }
        }
    }

    /// Remove an agent and all its edges. The rest of the fleet continues
    /// without re-initialization.
    pub fn drop_agent(&mut self, id: AgentId) -> Result<(), RunError> {
        if !self.initialized {
            return Err(RunError::NotInitialized);
        }
        if self.state.agents.remove(&id).is_none() {
            return Err(RunError::UnknownAgent(id));
        }
        self.scenario.agents.retain(|a| a.id != id);
        self.scenario.graph.remove_vertex(id);
        for rt in self.state.agents.values_mut() {
            rt.mailbox.remove(&id);
        }
        self.warm.remove(&id);
        Ok(())
    }

    /// Add an agent mid-run; it runs its decentralized initialization at the
    /// next solve round.
    pub fn add_agent(
        &mut self,
        model: AgentModel,
        x0: DVector<f64>,
        neighbors: &[AgentId],
        delta: f64,
    ) -> Result<(), RunError> {
        if !self.initialized {
            return Err(RunError::NotInitialized);
        }
        let id = model.id;
        if self.state.agents.contains_key(&id) {
            return Err(RunError::DuplicateAgent(id));
        }
        for &nb in neighbors {
            if !self.state.agents.contains_key(&nb) {
                return Err(RunError::UnknownAgent(nb));
            }
        }
        assert_eq!(x0.len(), model.state_dim(), "x0 dimension");
        assert!(delta > 0.0, "delta must be positive");
        self.scenario.agents.push(model);
        self.scenario.agents.sort_by_key(|a| a.id);
        for &nb in neighbors {
            self.scenario
                .graph
                .insert_edge(id, nb)
                .expect("distinct ids");
        }
        self.scenario.delta.insert(id, delta);
        self.scenario.x0.insert(id, x0.clone());
        self.state.agents.insert(
            id,
            AgentRuntime {
                x: x0,
                join_round: self.state.t + 1,
                last: None,
                mailbox: BTreeMap::new(),
            },
        );
        Ok(())
    }

    fn solve_order(&self) -> Vec<AgentId> {
        let live: BTreeSet<AgentId> = self.state.agents.keys().copied().collect();
        match &self.scenario.order {
            Some(order) => {
                let mut out: Vec<AgentId> =
                    order.iter().copied().filter(|id| live.contains(id)).collect();
                // Agents that joined after the order was fixed go last.
                for id in &live {
                    if !out.contains(id) {
                        out.push(*id);
                    }
                }
                out
            }
            None => live.into_iter().collect(),
        }
    }

    /// One sequential solve round at time `t`.
    fn round(&mut self, t: usize) -> Result<(), RunError> {
        let order = self.solve_order();
        let mut records: BTreeMap<AgentId, AgentRecord> = BTreeMap::new();
        let mut messages = Vec::new();

        for &id in &order {
            let model = self
                .scenario
                .agent(id)
                .expect("ordered agent exists")
                .clone();
            let rt = &self.state.agents[&id];
            let x_now = rt.x.clone();
            let delta = self.scenario.delta[&id];
            let ctx = SolveContext {
                cost_spec: &self.scenario.cooperation,
                graph: &self.scenario.graph,
                delta,
                horizon: self.scenario.horizon,
                period: self.scenario.period,
                settings: &self.scenario.solver,
                dump: self.qp_dump_dir.as_deref().map(|dir| (dir, t)),
            };

            // Neighbor view per the protocol rule: broadcasts from this round
            // are fresh, previous-round broadcasts are shifted once.
            let mut view: BTreeMap<AgentId, PeriodicTrajectory> = BTreeMap::new();
            let mut view_tags: BTreeMap<AgentId, Freshness> = BTreeMap::new();
            for nb in self.scenario.graph.neighbors(id) {
                match rt.mailbox.get(&nb) {
                    Some(entry) if entry.computed_at == t => {
                        view.insert(nb, entry.trajectory.clone());
                        view_tags.insert(nb, Freshness::Fresh);
                    }
                    Some(entry) if entry.computed_at + 1 == t => {
                        view.insert(nb, entry.trajectory.shift());
                        view_tags.insert(nb, Freshness::Shifted);
                    }
                    Some(entry) => {
                        return Err(RunError::StaleMailbox {
                            agent: id,
                            from: nb,
                            t,
                            computed_at: entry.computed_at,
                        });
                    }
                    // A neighbor that has not produced anything yet (it joins
                    // later in this round) is simply absent from the view.
                    None => {}
                }
            }

            let is_init = rt.join_round == t;
            let is_skipped = !is_init && self.scenario.skips.contains(&(id, t));
            let (result, stage_tag) = if is_init {
                let result = solve_local_problem(
                    &model,
                    &x_now,
                    &LocalStage::Initialization,
                    &ctx,
                    None,
                )
                .map_err(|source| RunError::InfeasibleInitialization { agent: id, source })?;
                (result, StageTag::Initialization)
            } else if is_skipped {
                let previous = rt
                    .last
                    .as_ref()
                    .expect("skipped agent has a previous solution")
                    .reference
                    .clone();
                let shifted = previous.shift();
                let mut result = solve_tracking_problem(&model, &x_now, &shifted, &ctx)
                    .map_err(|source| RunError::LocalInfeasible {
                        agent: id,
                        t,
                        source,
                    })?;
                // Bookkeeping: the combined cost against the current view and
                // the (exactly zero) drift of the shifted reference.
                result.cost.cooperation = self
                    .scenario
                    .cooperation
                    .eval_combined_cost_present(&self.scenario.graph, id, &shifted.y, &view)
                    .map_err(|source| RunError::LocalInfeasible {
                        agent: id,
                        t,
                        source: LocalSolveError::Cooperation(source),
                    })?;
                result.cost.drift = delta
                    * crate::trajectory::shifted_sq_distance(&shifted.y, &previous.y)
                        .expect("periods match");
                (result, StageTag::Skipped)
            } else {
                let previous = rt
                    .last
                    .as_ref()
                    .expect("non-init agent has a previous solution")
                    .reference
                    .clone();
                let stage = LocalStage::Cooperative {
                    neighbors: &view,
                    previous: &previous,
                };
                let result =
                    solve_local_problem(&model, &x_now, &stage, &ctx, self.warm.get(&id))
                        .map_err(|source| RunError::LocalInfeasible {
                            agent: id,
                            t,
                            source,
                        })?;
                (result, StageTag::Cooperative)
            };

            // Broadcast once to all neighbors.
            let recipients = self.scenario.graph.neighbors(id);
            for &nb in &recipients {
                if let Some(nb_rt) = self.state.agents.get_mut(&nb) {
                    nb_rt.mailbox.insert(
                        id,
                        MailboxEntry {
                            trajectory: result.reference.y.clone(),
                            computed_at: t,
                        },
                    );
                }
            }
            messages.push(Message {
                from: id,
                to: recipients,
            });

            let output = model.output(&x_now, &result.u_seq[0]);
            records.insert(
                id,
                AgentRecord {
                    state: x_now,
                    input: result.u_seq[0].clone(),
                    output,
                    reference: result.reference.clone(),
                    input_sequence: result.u_seq.clone(),
                    cost: result.cost,
                    model_objective: result.model_objective,
                    stage: stage_tag,
                    mailbox_view: view_tags,
                    solver: result.solver,
                },
            );
            if stage_tag != StageTag::Skipped {
                self.warm.insert(id, result.warm_start());
            }
            self.state.agents.get_mut(&id).expect("agent exists").last = Some(result);
        }

        // Record any model added since the trace was created.
        for a in &self.scenario.agents {
            self.trace.models.entry(a.id).or_insert_with(|| a.clone());
            self.trace.delta.entry(a.id).or_insert(self.scenario.delta[&a.id]);
        }
        self.trace.records.push(StepRecord {
            t,
            graph_edges: self.scenario.graph.edges().collect(),
            agents: records,
            messages,
        });
        Ok(())
    }
}

#[cfg(test)]
pub(crate) mod test_support {
    use super::*;
    use crate::agent::BoxBounds;
    use nalgebra::DMatrix;

    pub(crate) fn study_agent(id: u32) -> AgentModel {
        AgentModel::double_integrator(
            AgentId(id),
            BoxBounds::symmetric(&[4.1, 4.1, 2.1, 2.1]),
            BoxBounds::symmetric(&[1.1, 1.1]),
            BoxBounds::symmetric(&[4.0, 4.0, 2.0, 2.0]),
            BoxBounds::symmetric(&[1.0, 1.0]),
            DMatrix::identity(4, 4),
            DMatrix::identity(2, 2),
        )
        .unwrap()
    }

    pub(crate) fn sync4_scenario(steps: usize) -> Scenario {
        let agents: Vec<AgentModel> = (1..=4).map(study_agent).collect();
        let ids: Vec<AgentId> = agents.iter().map(|a| a.id).collect();
        let x0: BTreeMap<AgentId, DVector<f64>> = [
            (1, [1.5, 0.9, 0.0, 0.0]),
            (2, [1.0, 2.0, 0.0, 0.0]),
            (3, [1.5, 2.0, 0.0, 0.0]),
            (4, [1.4, 1.35, 0.0, 0.0]),
        ]
        .into_iter()
        .map(|(id, x)| (AgentId(id), DVector::from_column_slice(&x)))
        .collect();
        Scenario {
            graph: Graph::all_to_all(&ids),
            cooperation: CooperationCostSpec::synchronization(),
            period: 10,
            horizon: 10,
            delta: ids.iter().map(|&id| (id, 1e-7)).collect(),
            x0,
            steps,
            solver: QpSettings::default(),
            order: None,
            skips: BTreeSet::new(),
            agents,
        }
    }

}
