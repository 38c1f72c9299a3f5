//! Cooperation costs coupling the agents' artificial output trajectories.
//!
//! The cost is a sum of pairwise terms over graph edges, evaluated in both
//! directions, and is invariant under a simultaneous one-step rotation of all
//! trajectories. Two quadratic instances ship: plain synchronization
//! (`sum_k ||y_i(k) - y_j(k)||^2`) and offset synchronization, where each
//! agent's output is first translated by a per-agent offset so the fleet holds
//! a formation instead of collapsing onto one point.

use crate::agent::AgentId;
use crate::graph::Graph;
use crate::trajectory::PeriodicTrajectory;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum CooperationError {
    #[error("({0}, {1}) is not an edge of the communication graph")]
    UnknownEdge(AgentId, AgentId),
    #[error("trajectory for agent {0} is missing")]
    MissingTrajectory(AgentId),
    #[error(transparent)]
    Trajectory(#[from] crate::trajectory::TrajectoryError),
    #[error("edge weight for ({0}, {1}) must be nonnegative")]
    NegativeWeight(AgentId, AgentId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CooperationKind {
    Synchronization,
    OffsetSynchronization,
}

/// Pairwise quadratic cooperation cost with per-edge weights and optional
/// per-agent output offsets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CooperationCostSpec {
    pub kind: CooperationKind,
    /// Weights keyed by normalized edge (smaller id first); missing edges
    /// default to 1. Symmetry `w_ij = w_ji` is structural.
    #[serde(with = "serde_weights")]
    pub weights: BTreeMap<(AgentId, AgentId), f64>,
    /// Offsets for [`CooperationKind::OffsetSynchronization`]; missing agents
    /// default to zero.
    pub offsets: BTreeMap<AgentId, Vec<f64>>,
}

/// Edge-keyed maps serialize as `[i, j, w]` triples (tuple keys are not
/// representable as JSON object keys).
mod serde_weights {
    use super::AgentId;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};
    use std::collections::BTreeMap;

    pub fn serialize<S: Serializer>(
        map: &BTreeMap<(AgentId, AgentId), f64>,
        s: S,
    ) -> Result<S::Ok, S::Error> {
        let rows: Vec<(AgentId, AgentId, f64)> =
            map.iter().map(|(&(a, b), &w)| (a, b, w)).collect();
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(
        d: D,
    ) -> Result<BTreeMap<(AgentId, AgentId), f64>, D::Error> {
        let rows: Vec<(AgentId, AgentId, f64)> = Vec::deserialize(d)?;
        Ok(rows
            .into_iter()
            .map(|(a, b, w)| ((a.min(b), a.max(b)), w))
            .collect())
    }
}

impl CooperationCostSpec {
    pub fn synchronization() -> Self {
        Self {
            kind: CooperationKind::Synchronization,
            weights: BTreeMap::new(),
            offsets: BTreeMap::new(),
        }
    }

    pub fn validate(&self, graph: &Graph) -> Result<(), CooperationError> {
        for (&(a, b), &w) in &self.weights {
            if !graph.contains_edge(a, b) {
                return Err(CooperationError::UnknownEdge(a, b));
            }
            if w < 0.0 {
                return Err(CooperationError::NegativeWeight(a, b));
            }
        }
        Ok(())
    }

    pub fn weight(&self, i: AgentId, j: AgentId) -> f64 {
        *self.weights.get(&(i.min(j), i.max(j))).unwrap_or(&1.0)
    }

    fn offset(&self, i: AgentId, dim: usize) -> DVector<f64> {
        self.offsets
            .get(&i)
            .map(|o| DVector::from_column_slice(o))
            .unwrap_or_else(|| DVector::zeros(dim))
    }

    /// Target that agent `i`'s trajectory is compared against for neighbor
    /// `j`: `y_j(k) + (o_i - o_j)` per step.
    fn aligned_neighbor(
        &self,
        i: AgentId,
        j: AgentId,
        y_j: &PeriodicTrajectory,
    ) -> PeriodicTrajectory {
        match self.kind {
            CooperationKind::Synchronization => y_j.clone(),
            CooperationKind::OffsetSynchronization => {
                let delta = self.offset(i, y_j.dim()) - self.offset(j, y_j.dim());
                PeriodicTrajectory::new(y_j.iter().map(|v| v + &delta).collect())
                    .expect("non-empty trajectory")
            }
        }
    }

    /// One directed pairwise term `V_ij(y_i, y_j)`.
    pub fn eval_pair_cost(
        &self,
        graph: &Graph,
        edge: (AgentId, AgentId),
        y_i: &PeriodicTrajectory,
        y_j: &PeriodicTrajectory,
    ) -> Result<f64, CooperationError> {
        let (i, j) = edge;
        if !graph.contains_edge(i, j) {
            return Err(CooperationError::UnknownEdge(i, j));
        }
        if y_i.period() != y_j.period() || y_i.dim() != y_j.dim() {
            return Err(CooperationError::Trajectory(
                crate::trajectory::TrajectoryError::ShapeMismatch {
                    period_a: y_i.period(),
                    dim_a: y_i.dim(),
                    period_b: y_j.period(),
                    dim_b: y_j.dim(),
                },
            ));
        }
        let target = self.aligned_neighbor(i, j, y_j);
        let w = self.weight(i, j);
        let mut total = 0.0;
        for k in 0..y_i.period() {
            total += (y_i.at(k) - target.at(k)).norm_squared();
        }
        Ok(w * total)
    }

    /// Fleet cost: double sum over ordered neighbor pairs.
    pub fn eval_global_cost(
        &self,
        graph: &Graph,
        trajectories: &BTreeMap<AgentId, PeriodicTrajectory>,
    ) -> Result<f64, CooperationError> {
        let mut total = 0.0;
        for (i, j) in graph.edges() {
            let y_i = trajectories
                .get(&i)
                .ok_or(CooperationError::MissingTrajectory(i))?;
            let y_j = trajectories
                .get(&j)
                .ok_or(CooperationError::MissingTrajectory(j))?;
            total += self.eval_pair_cost(graph, (i, j), y_i, y_j)?;
            total += self.eval_pair_cost(graph, (j, i), y_j, y_i)?;
        }
        Ok(total)
    }

    /// The portion of the fleet cost touching agent `i`: both directions of
    /// every incident edge, with the neighbors held fixed. Every graph
    /// neighbor must be present.
    pub fn eval_combined_cost(
        &self,
        graph: &Graph,
        i: AgentId,
        y_i: &PeriodicTrajectory,
        neighbors: &BTreeMap<AgentId, PeriodicTrajectory>,
    ) -> Result<f64, CooperationError> {
        for j in graph.neighbors(i) {
            if !neighbors.contains_key(&j) {
                return Err(CooperationError::MissingTrajectory(j));
            }
        }
        self.eval_combined_cost_present(graph, i, y_i, neighbors)
    }

    /// Combined cost over exactly the supplied neighbors. Used where a
    /// neighbor may legitimately have no data yet (it joins the fleet later
    /// in the current round); the map must still be a subset of the graph
    /// neighborhood.
    pub fn eval_combined_cost_present(
        &self,
        graph: &Graph,
        i: AgentId,
        y_i: &PeriodicTrajectory,
        neighbors: &BTreeMap<AgentId, PeriodicTrajectory>,
    ) -> Result<f64, CooperationError> {
        let mut total = 0.0;
        for (&j, y_j) in neighbors {
            total += self.eval_pair_cost(graph, (i, j), y_i, y_j)?;
            total += self.eval_pair_cost(graph, (j, i), y_j, y_i)?;
        }
        Ok(total)
    }

    /// Exact quadratic expansion of the combined cost in `vec(y_i)`:
    /// `V(y) = 1/2 v' H v + g' v + c` with `v` the step-major stacking of the
    /// trajectory. For the shipped quadratic kinds `H` is diagonal. Every
    /// graph neighbor must be present.
    pub fn combined_cost_quadratic_form(
        &self,
        graph: &Graph,
        i: AgentId,
        period: usize,
        dim: usize,
        neighbors: &BTreeMap<AgentId, PeriodicTrajectory>,
    ) -> Result<QuadraticForm, CooperationError> {
        for j in graph.neighbors(i) {
            if !neighbors.contains_key(&j) {
                return Err(CooperationError::MissingTrajectory(j));
            }
        }
        self.combined_cost_quadratic_form_present(graph, i, period, dim, neighbors)
    }

    /// Quadratic expansion over exactly the supplied neighbors.
    pub fn combined_cost_quadratic_form_present(
        &self,
        graph: &Graph,
        i: AgentId,
        period: usize,
        dim: usize,
        neighbors: &BTreeMap<AgentId, PeriodicTrajectory>,
    ) -> Result<QuadraticForm, CooperationError> {
        let coords = period * dim;
        let mut h_diag = 0.0;
        let mut g = DVector::zeros(coords);
        let mut c = 0.0;
        for (&j, y_j) in neighbors {
            if !graph.contains_edge(i, j) {
                return Err(CooperationError::UnknownEdge(i, j));
            }
            if y_j.period() != period || y_j.dim() != dim {
                return Err(CooperationError::Trajectory(
                    crate::trajectory::TrajectoryError::ShapeMismatch {
                        period_a: period,
                        dim_a: dim,
                        period_b: y_j.period(),
                        dim_b: y_j.dim(),
                    },
                ));
            }
            // Both directed terms of edge (i, j) contribute
            // 2 w ||y_i - target||^2 = 1/2 v' (4w I) v - 4w target' v + 2w ||target||^2.
            let w = self.weight(i, j);
            let target = self.aligned_neighbor(i, j, y_j);
            h_diag += 4.0 * w;
            for k in 0..period {
                let tk = target.at(k);
                for d in 0..dim {
                    g[k * dim + d] -= 4.0 * w * tk[d];
                }
                c += 2.0 * w * tk.norm_squared();
            }
        }
        Ok(QuadraticForm {
            h: DMatrix::identity(coords, coords) * h_diag,
            g,
            c,
        })
    }
}

/// `1/2 v' H v + g' v + c` over the step-major stacking of one trajectory.
#[derive(Debug, Clone)]
pub struct QuadraticForm {
    pub h: DMatrix<f64>,
    pub g: DVector<f64>,
    pub c: f64,
}

impl QuadraticForm {
    pub fn eval(&self, v: &DVector<f64>) -> f64 {
        0.5 * (v.transpose() * &self.h * v)[(0, 0)] + self.g.dot(v) + self.c
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn id(v: u32) -> AgentId {
        AgentId(v)
    }

    fn traj(vals: &[f64]) -> PeriodicTrajectory {
        PeriodicTrajectory::new(vals.iter().map(|&v| DVector::from_column_slice(&[v])).collect())
            .unwrap()
    }

    #[test]
    fn identical_trajectories_cost_zero() {
        let g = Graph::all_to_all(&[id(1), id(2)]);
        let spec = CooperationCostSpec::synchronization();
        let y = traj(&[1.0, 2.0, 3.0]);
        assert_eq!(spec.eval_pair_cost(&g, (id(1), id(2)), &y, &y).unwrap(), 0.0);
    }

    #[test]
    fn single_step_pair_cost() {
        let g = Graph::all_to_all(&[id(1), id(2)]);
        let spec = CooperationCostSpec::synchronization();
        let cost = spec
            .eval_pair_cost(&g, (id(1), id(2)), &traj(&[0.0]), &traj(&[2.0]))
            .unwrap();
        assert_eq!(cost, 4.0);
    }

    #[test]
    fn offset_kind_cancels_formation() {
        let g = Graph::all_to_all(&[id(1), id(2)]);
        let mut spec = CooperationCostSpec {
            kind: CooperationKind::OffsetSynchronization,
            weights: BTreeMap::new(),
            offsets: BTreeMap::new(),
        };
        spec.offsets.insert(id(1), vec![1.5]);
        spec.offsets.insert(id(2), vec![-0.5]);
        // y_1 = y_2 + (o_1 - o_2) pointwise: cost zero.
        let y2 = traj(&[0.0, 1.0]);
        let y1 = traj(&[2.0, 3.0]);
        let cost = spec.eval_pair_cost(&g, (id(1), id(2)), &y1, &y2).unwrap();
        assert_abs_diff_eq!(cost, 0.0, epsilon = 1e-15);
    }

    #[test]
    fn unknown_edge_is_rejected() {
        let g = Graph::new([(id(1), id(2))]).unwrap();
        let spec = CooperationCostSpec::synchronization();
        let y = traj(&[0.0]);
        assert!(matches!(
            spec.eval_pair_cost(&g, (id(1), id(3)), &y, &y),
            Err(CooperationError::UnknownEdge(..))
        ));
    }

    #[test]
    fn global_cost_two_agents_both_directions() {
        let g = Graph::all_to_all(&[id(1), id(2)]);
        let spec = CooperationCostSpec::synchronization();
        let mut trajs = BTreeMap::new();
        trajs.insert(id(1), traj(&[0.0]));
        trajs.insert(id(2), traj(&[2.0]));
        // V_12 + V_21 = 4 + 4.
        assert_eq!(spec.eval_global_cost(&g, &trajs).unwrap(), 8.0);
    }

    #[test]
    fn global_cost_perturbation_counts_ordered_pairs() {
        let g = Graph::all_to_all(&[id(1), id(2), id(3), id(4)]);
        let spec = CooperationCostSpec::synchronization();
        let eps = 0.01;
        let mut trajs = BTreeMap::new();
        for a in 1..=4 {
            trajs.insert(id(a), traj(&[1.0, 2.0]));
        }
        let mut perturbed = traj(&[1.0, 2.0]).steps().to_vec();
        perturbed[0][0] += eps;
        trajs.insert(id(1), PeriodicTrajectory::new(perturbed).unwrap());
        // Six ordered pairs touch agent 1, each contributing eps^2.
        assert_abs_diff_eq!(
            spec.eval_global_cost(&g, &trajs).unwrap(),
            6.0 * eps * eps,
            epsilon = 1e-12
        );
    }

    #[test]
    fn combined_cost_single_neighbor() {
        let g = Graph::all_to_all(&[id(1), id(2)]);
        let spec = CooperationCostSpec::synchronization();
        let mut neighbors = BTreeMap::new();
        neighbors.insert(id(2), traj(&[3.0]));
        let cost = spec
            .eval_combined_cost(&g, id(1), &traj(&[1.0]), &neighbors)
            .unwrap();
        // Both ordered terms: 4 + 4.
        assert_eq!(cost, 8.0);
    }

    #[test]
    fn combined_cost_zero_when_matching_neighbors() {
        let g = Graph::all_to_all(&[id(1), id(2), id(3)]);
        let spec = CooperationCostSpec::synchronization();
        let y = traj(&[1.0, -2.0]);
        let mut neighbors = BTreeMap::new();
        neighbors.insert(id(2), y.clone());
        neighbors.insert(id(3), y.clone());
        assert_eq!(spec.eval_combined_cost(&g, id(1), &y, &neighbors).unwrap(), 0.0);
    }

    #[test]
    fn doubling_weight_doubles_cost() {
        let g = Graph::all_to_all(&[id(1), id(2)]);
        let mut spec = CooperationCostSpec::synchronization();
        let mut neighbors = BTreeMap::new();
        neighbors.insert(id(2), traj(&[3.0]));
        let base = spec
            .eval_combined_cost(&g, id(1), &traj(&[1.0]), &neighbors)
            .unwrap();
        spec.weights.insert((id(1), id(2)), 2.0);
        let doubled = spec
            .eval_combined_cost(&g, id(1), &traj(&[1.0]), &neighbors)
            .unwrap();
        assert_eq!(doubled, 2.0 * base);
    }

    #[test]
    fn missing_neighbor_data_is_an_error() {
        let g = Graph::all_to_all(&[id(1), id(2)]);
        let spec = CooperationCostSpec::synchronization();
        let neighbors = BTreeMap::new();
        assert!(matches!(
            spec.eval_combined_cost(&g, id(1), &traj(&[1.0]), &neighbors),
            Err(CooperationError::MissingTrajectory(..))
        ));
    }

    #[test]
    fn quadratic_form_single_neighbor_h_is_4i() {
        let g = Graph::all_to_all(&[id(1), id(2)]);
        let spec = CooperationCostSpec::synchronization();
        let mut neighbors = BTreeMap::new();
        neighbors.insert(
            id(2),
            PeriodicTrajectory::constant(3, DVector::from_column_slice(&[1.0, -1.0])),
        );
        let qf = spec
            .combined_cost_quadratic_form(&g, id(1), 3, 2, &neighbors)
            .unwrap();
        assert_eq!(qf.h, DMatrix::identity(6, 6) * 4.0);
    }

    #[test]
    fn quadratic_form_no_neighbors_is_zero() {
        let g = Graph::new([]).unwrap();
        let spec = CooperationCostSpec::synchronization();
        let neighbors = BTreeMap::new();
        let qf = spec
            .combined_cost_quadratic_form(&g, id(1), 4, 1, &neighbors)
            .unwrap();
        assert_eq!(qf.h, DMatrix::zeros(4, 4));
        assert_eq!(qf.g, DVector::zeros(4));
        assert_eq!(qf.c, 0.0);
    }

    #[test]
    fn quadratic_form_constant_term_is_cost_at_zero() {
        let g = Graph::all_to_all(&[id(1), id(2), id(3)]);
        let spec = CooperationCostSpec::synchronization();
        let mut neighbors = BTreeMap::new();
        neighbors.insert(id(2), traj(&[3.0, -1.0]));
        neighbors.insert(id(3), traj(&[0.5, 0.25]));
        let qf = spec
            .combined_cost_quadratic_form(&g, id(1), 2, 1, &neighbors)
            .unwrap();
        let zero = traj(&[0.0, 0.0]);
        let at_zero = spec
            .eval_combined_cost(&g, id(1), &zero, &neighbors)
            .unwrap();
        assert_abs_diff_eq!(qf.c, at_zero, epsilon = 1e-12);
    }

    #[test]
    fn quadratic_form_matches_eval_everywhere() {
        let g = Graph::all_to_all(&[id(1), id(2), id(3)]);
        let mut spec = CooperationCostSpec::synchronization();
        spec.weights.insert((id(1), id(2)), 0.5);
        spec.weights.insert((id(1), id(3)), 2.0);
        let mut neighbors = BTreeMap::new();
        neighbors.insert(id(2), traj(&[3.0, -1.0, 0.0]));
        neighbors.insert(id(3), traj(&[0.5, 0.25, -2.0]));
        let qf = spec
            .combined_cost_quadratic_form(&g, id(1), 3, 1, &neighbors)
            .unwrap();
        for probe in [
            traj(&[0.1, 0.2, 0.3]),
            traj(&[-1.0, 4.0, 2.0]),
            traj(&[0.0, 0.0, 0.0]),
        ] {
            let direct = spec.eval_combined_cost(&g, id(1), &probe, &neighbors).unwrap();
            let v = DVector::from_vec(probe.to_flat());
            assert_abs_diff_eq!(qf.eval(&v), direct, epsilon = 1e-10);
        }
    }

    #[test]
    fn shift_invariance_of_pair_cost() {
        let g = Graph::all_to_all(&[id(1), id(2)]);
        let spec = CooperationCostSpec::synchronization();
        let y1 = traj(&[1.0, 2.0, -0.5, 0.0]);
        let y2 = traj(&[0.5, -1.5, 2.5, 1.0]);
        let base = spec.eval_pair_cost(&g, (id(1), id(2)), &y1, &y2).unwrap();
        let shifted = spec
            .eval_pair_cost(&g, (id(1), id(2)), &y1.shift(), &y2.shift())
            .unwrap();
        assert_abs_diff_eq!(base, shifted, epsilon = 1e-12);
    }
}
