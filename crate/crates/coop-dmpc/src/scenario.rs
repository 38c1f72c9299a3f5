//! Scenario files: the JSON schema, validation with JSON-pointer error
//! paths, and seeded random scenario generation for property suites.

use crate::agent::{AgentId, AgentModel, BoxBounds, ModelError};
use crate::cooperation::{CooperationCostSpec, CooperationError, CooperationKind};
use crate::coordinator::Scenario;
use crate::graph::{Graph, GraphError};
use crate::qp::QpSettings;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read scenario file: {0}")]
    Io(#[from] std::io::Error),
    #[error("scenario schema violation at {pointer}: {message}")]
    Schema { pointer: String, message: String },
    #[error("scenario has no agents")]
    NoAgents,
    #[error("duplicate agent id {0}")]
    DuplicateAgentId(AgentId),
    #[error("horizon/period must be positive (horizon {horizon}, period {period})")]
    BadHorizon { horizon: usize, period: usize },
    #[error("agent {agent}: output dimension {got} differs from fleet dimension {expected}")]
    MixedOutputDims {
        agent: AgentId,
        got: usize,
        expected: usize,
    },
    #[error("graph edge references unknown agent {0}")]
    EdgeUnknownAgent(AgentId),
    #[error(transparent)]
    Cooperation(#[from] CooperationError),
    #[error("cooperation offset references unknown agent {0}")]
    OffsetUnknownAgent(AgentId),
    #[error("agent {agent}: offset has dimension {got}, expected {expected}")]
    BadOffsetDim {
        agent: AgentId,
        got: usize,
        expected: usize,
    },
    #[error("agent {0} has no delta entry")]
    MissingDelta(AgentId),
    #[error("agent {0}: delta must be > 0")]
    NonPositiveDelta(AgentId),
    #[error("agent {0} has no initial state")]
    MissingX0(AgentId),
    #[error("agent {agent}: x0 has dimension {got}, expected {expected}")]
    BadX0Dim {
        agent: AgentId,
        got: usize,
        expected: usize,
    },
    #[error("order must be a permutation of the agent ids")]
    BadOrder,
    #[error("skip list references unknown agent {0}")]
    SkipUnknownAgent(AgentId),
    #[error("agent {0}: cannot skip the initialization round (t = 0)")]
    SkipAtInitialization(AgentId),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioFile {
    period: usize,
    horizon: usize,
    steps: usize,
    delta: DeltaSpec,
    graph: GraphSpec,
    #[serde(default)]
    cooperation: Option<CooperationSpec>,
    #[serde(default)]
    solver: Option<QpSettings>,
    #[serde(default)]
    order: Option<Vec<u32>>,
    #[serde(default)]
    skips: Option<Vec<SkipSpec>>,
    /// Seed for randomized test scenarios; ignored by deterministic runs.
    #[serde(default)]
    #[allow(dead_code)]
    seed: Option<u64>,
    agents: Vec<AgentSpec>,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum DeltaSpec {
    Scalar(f64),
    PerAgent(BTreeMap<String, f64>),
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum GraphSpec {
    Preset(GraphPreset),
    Edges { edges: Vec<(u32, u32)> },
}

#[derive(Debug, Deserialize)]
enum GraphPreset {
    #[serde(rename = "all_to_all")]
    AllToAll,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CooperationSpec {
    kind: CooperationKind,
    #[serde(default)]
    weights: Option<Vec<WeightSpec>>,
    #[serde(default)]
    offsets: Option<BTreeMap<String, Vec<f64>>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct WeightSpec {
    i: u32,
    j: u32,
    w: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SkipSpec {
    agent: u32,
    t: usize,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct AgentSpec {
    id: u32,
    model: ModelSpec,
    x0: Vec<f64>,
    bounds: BoundsSpec,
    tightened_bounds: BoundsSpec,
    #[serde(default, alias = "Q")]
    q: Option<MatrixSpec>,
    #[serde(default, alias = "R")]
    r: Option<MatrixSpec>,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum ModelSpec {
    Preset(ModelPreset),
    Explicit {
        a: Vec<Vec<f64>>,
        b: Vec<Vec<f64>>,
        c: Vec<Vec<f64>>,
        d: Vec<Vec<f64>>,
    },
}

#[derive(Debug, Deserialize)]
enum ModelPreset {
    #[serde(rename = "double_integrator")]
    DoubleIntegrator,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct BoundsSpec {
    state: BoxSpec,
    input: BoxSpec,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum BoxSpec {
    /// Symmetric box `|v_i| <= limits[i]`.
    Symmetric { limits: Vec<f64> },
    Explicit { lower: Vec<f64>, upper: Vec<f64> },
}

impl BoxSpec {
    fn into_bounds(self) -> BoxBounds {
        match self {
            BoxSpec::Symmetric { limits } => BoxBounds::symmetric(&limits),
            BoxSpec::Explicit { lower, upper } => BoxBounds { lower, upper },
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum MatrixSpec {
    Diagonal { diag: Vec<f64> },
    Full(Vec<Vec<f64>>),
}

impl MatrixSpec {
    fn into_matrix(self) -> DMatrix<f64> {
        match self {
            MatrixSpec::Diagonal { diag } => {
                DMatrix::from_diagonal(&DVector::from_vec(diag))
            }
            MatrixSpec::Full(rows) => {
                let nrows = rows.len();
                let ncols = rows.first().map_or(0, |r| r.len());
                DMatrix::from_fn(nrows, ncols, |r, c| rows[r][c])
            }
        }
    }
}

fn dense(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, |r| r.len());
    DMatrix::from_fn(nrows, ncols, |r, c| rows[r][c])
}

/// Parse and fully validate a scenario file. Schema violations carry the
/// JSON-pointer path of the offending field.
pub fn parse_scenario(path: &Path) -> Result<Scenario, ScenarioError> {
    let text = std::fs::read_to_string(path)?;
    parse_scenario_str(&text)
}

pub fn parse_scenario_str(text: &str) -> Result<Scenario, ScenarioError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let file: ScenarioFile =
        serde_path_to_error::deserialize(de).map_err(|e| ScenarioError::Schema {
            pointer: e.path().to_string(),
            message: e.inner().to_string(),
        })?;
    build_scenario(file)
}

fn build_scenario(file: ScenarioFile) -> Result<Scenario, ScenarioError> {
    let mut agents = Vec::with_capacity(file.agents.len());
    let mut x0 = BTreeMap::new();
    for spec in file.agents {
        let id = AgentId(spec.id);
        let state_bounds = spec.bounds.state.into_bounds();
        let input_bounds = spec.bounds.input.into_bounds();
        let ref_state_bounds = spec.tightened_bounds.state.into_bounds();
        let ref_input_bounds = spec.tightened_bounds.input.into_bounds();
        let model = match spec.model {
            ModelSpec::Preset(ModelPreset::DoubleIntegrator) => {
                let q = spec
                    .q
                    .map(MatrixSpec::into_matrix)
                    .unwrap_or_else(|| DMatrix::identity(4, 4));
                let r = spec
                    .r
                    .map(MatrixSpec::into_matrix)
                    .unwrap_or_else(|| DMatrix::identity(2, 2));
                log::info!("agent {id}: double integrator preset, Q/R defaults applied where omitted");
                AgentModel::double_integrator(
                    id,
                    state_bounds,
                    input_bounds,
                    ref_state_bounds,
                    ref_input_bounds,
                    q,
                    r,
                )?
            }
            ModelSpec::Explicit { a, b, c, d } => {
                let a = dense(&a);
                let b = dense(&b);
                let c = dense(&c);
                let d = dense(&d);
                let n = a.nrows();
                let qdim = b.ncols();
                let q = spec
                    .q
                    .map(MatrixSpec::into_matrix)
                    .unwrap_or_else(|| DMatrix::identity(n, n));
                let r = spec
                    .r
                    .map(MatrixSpec::into_matrix)
                    .unwrap_or_else(|| DMatrix::identity(qdim, qdim));
                AgentModel::new(
                    id,
                    a,
                    b,
                    c,
                    d,
                    state_bounds,
                    input_bounds,
                    ref_state_bounds,
                    ref_input_bounds,
                    q,
                    r,
                )?
            }
        };
        x0.insert(id, DVector::from_vec(spec.x0));
        agents.push(model);
    }
    agents.sort_by_key(|a| a.id);
    let ids: Vec<AgentId> = agents.iter().map(|a| a.id).collect();

    let graph = match file.graph {
        GraphSpec::Preset(GraphPreset::AllToAll) => Graph::all_to_all(&ids),
        GraphSpec::Edges { edges } => Graph::new(
            edges
                .into_iter()
                .map(|(a, b)| (AgentId(a), AgentId(b))),
        )?,
    };

    let delta: BTreeMap<AgentId, f64> = match file.delta {
        DeltaSpec::Scalar(v) => ids.iter().map(|&id| (id, v)).collect(),
        DeltaSpec::PerAgent(map) => map
            .into_iter()
            .map(|(k, v)| {
                let id = k.parse::<u32>().map_err(|_| ScenarioError::Schema {
                    pointer: "/delta".into(),
                    message: format!("agent key {k:?} is not an integer id"),
                })?;
                Ok((AgentId(id), v))
            })
            .collect::<Result<_, ScenarioError>>()?,
    };

    let cooperation = match file.cooperation {
        None => CooperationCostSpec::synchronization(),
        Some(spec) => {
            let mut weights = BTreeMap::new();
            for w in spec.weights.unwrap_or_default() {
                let (i, j) = (AgentId(w.i), AgentId(w.j));
                weights.insert((i.min(j), i.max(j)), w.w);
            }
            let mut offsets = BTreeMap::new();
            for (k, v) in spec.offsets.unwrap_or_default() {
                let id = k.parse::<u32>().map_err(|_| ScenarioError::Schema {
                    pointer: "/cooperation/offsets".into(),
                    message: format!("agent key {k:?} is not an integer id"),
                })?;
                offsets.insert(AgentId(id), v);
            }
            CooperationCostSpec {
                kind: spec.kind,
                weights,
                offsets,
            }
        }
    };

    let solver = file.solver.unwrap_or_default();
    log::info!(
        "solver settings: eps_abs={:.1e} eps_rel={:.1e} max_iter={} rho={}",
        solver.eps_abs,
        solver.eps_rel,
        solver.max_iter,
        solver.rho
    );

    let scenario = Scenario {
        agents,
        graph,
        cooperation,
        period: file.period,
        horizon: file.horizon,
        delta,
        x0,
        steps: file.steps,
        solver,
        order: file
            .order
            .map(|o| o.into_iter().map(AgentId).collect()),
        skips: file
            .skips
            .unwrap_or_default()
            .into_iter()
            .map(|s| (AgentId(s.agent), s.t))
            .collect::<BTreeSet<_>>(),
    };
    scenario.validate()?;
    Ok(scenario)
}

/// Model families used by the random scenario generator.
enum RandomFamily {
    SingleIntegrator,
    DoubleIntegrator1D,
    PlanarDoubleIntegrator,
}

/// Seeded random feasible LTI scenario: integrator-chain agents started at
/// admissible equilibria, on a random connected graph. Initialization is
/// feasible by construction.
pub fn random_feasible_scenario(seed: u64) -> Scenario {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let family = match rng.random_range(0..3u8) {
        0 => RandomFamily::SingleIntegrator,
        1 => RandomFamily::DoubleIntegrator1D,
        _ => RandomFamily::PlanarDoubleIntegrator,
    };
    let m = rng.random_range(2..=4usize);
    let period = rng.random_range(4..=8usize);
    let horizon = rng.random_range(period.saturating_sub(2).max(2)..=period + 3);
    let steps = rng.random_range(8..=12usize);

    let make_agent = |id: u32, rng: &mut ChaCha8Rng| -> (AgentModel, DVector<f64>) {
        match family {
            RandomFamily::SingleIntegrator => {
                let limit = rng.random_range(3.0..6.0);
                let agent = AgentModel::new(
                    AgentId(id),
                    DMatrix::identity(1, 1),
                    DMatrix::identity(1, 1),
                    DMatrix::identity(1, 1),
                    DMatrix::zeros(1, 1),
                    BoxBounds::symmetric(&[limit]),
                    BoxBounds::symmetric(&[1.5]),
                    BoxBounds::symmetric(&[limit - 0.5]),
                    BoxBounds::symmetric(&[1.0]),
                    DMatrix::identity(1, 1) * rng.random_range(0.5..2.0),
                    DMatrix::identity(1, 1) * rng.random_range(0.5..2.0),
                )
                .expect("valid random agent");
                let x0 = DVector::from_column_slice(&[rng.random_range(-2.0..2.0)]);
                (agent, x0)
            }
            RandomFamily::DoubleIntegrator1D => {
                let a = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0]);
                let b = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
                let agent = AgentModel::new(
                    AgentId(id),
                    a,
                    b,
                    DMatrix::identity(2, 2),
                    DMatrix::zeros(2, 1),
                    BoxBounds::symmetric(&[5.0, 2.5]),
                    BoxBounds::symmetric(&[1.2]),
                    BoxBounds::symmetric(&[4.5, 2.0]),
                    BoxBounds::symmetric(&[1.0]),
                    DMatrix::identity(2, 2) * rng.random_range(0.5..2.0),
                    DMatrix::identity(1, 1) * rng.random_range(0.5..2.0),
                )
                .expect("valid random agent");
                let x0 = DVector::from_column_slice(&[rng.random_range(-2.5..2.5), 0.0]);
                (agent, x0)
            }
            RandomFamily::PlanarDoubleIntegrator => {
                let agent = AgentModel::double_integrator(
                    AgentId(id),
                    BoxBounds::symmetric(&[4.1, 4.1, 2.1, 2.1]),
                    BoxBounds::symmetric(&[1.1, 1.1]),
                    BoxBounds::symmetric(&[4.0, 4.0, 2.0, 2.0]),
                    BoxBounds::symmetric(&[1.0, 1.0]),
                    DMatrix::identity(4, 4),
                    DMatrix::identity(2, 2),
                )
                .expect("valid planar agent");
                let x0 = DVector::from_column_slice(&[
                    rng.random_range(-2.0..2.0),
                    rng.random_range(-2.0..2.0),
                    0.0,
                    0.0,
                ]);
                (agent, x0)
            }
        }
    };

    let mut agents = Vec::new();
    let mut x0 = BTreeMap::new();
    for id in 1..=m as u32 {
        let (agent, x) = make_agent(id, &mut rng);
        x0.insert(agent.id, x);
        agents.push(agent);
    }
    let ids: Vec<AgentId> = agents.iter().map(|a| a.id).collect();

    // Random connected graph: a spanning chain plus random extra edges.
    let mut edges: BTreeSet<(AgentId, AgentId)> = BTreeSet::new();
    for w in ids.windows(2) {
        edges.insert((w[0], w[1]));
    }
    for i in 0..ids.len() {
        for j in (i + 1)..ids.len() {
            if rng.random_bool(0.4) {
                edges.insert((ids[i], ids[j]));
            }
        }
    }
    let graph = Graph::new(edges).expect("no self loops");

    Scenario {
        graph,
        cooperation: CooperationCostSpec::synchronization(),
        period,
        horizon,
        delta: ids.iter().map(|&id| (id, 1e-7)).collect(),
        x0,
        steps,
        solver: QpSettings::default(),
        order: None,
        skips: BTreeSet::new(),
        agents,
    }
}
