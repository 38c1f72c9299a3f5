//! Undirected communication graph over agent ids.

use crate::agent::AgentId;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GraphError {
    #[error("self-loop on agent {0}")]
    SelfLoop(AgentId),
}

/// Undirected edge set. Edges are stored with the smaller id first; neighbor
/// queries are sorted, so iteration over the graph is deterministic.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Graph {
    edges: BTreeSet<(AgentId, AgentId)>,
}

impl Graph {
    pub fn new(edges: impl IntoIterator<Item = (AgentId, AgentId)>) -> Result<Self, GraphError> {
        let mut set = BTreeSet::new();
        for (a, b) in edges {
            if a == b {
                return Err(GraphError::SelfLoop(a));
            }
            set.insert((a.min(b), a.max(b)));
        }
        Ok(Self { edges: set })
    }

    /// Complete graph over the given vertices.
    pub fn all_to_all(ids: &[AgentId]) -> Self {
        let mut edges = BTreeSet::new();
        for (idx, &a) in ids.iter().enumerate() {
            for &b in &ids[idx + 1..] {
                if a != b {
                    edges.insert((a.min(b), a.max(b)));
                }
            }
        }
        Self { edges }
    }

    pub fn contains_edge(&self, a: AgentId, b: AgentId) -> bool {
        self.edges.contains(&(a.min(b), a.max(b)))
    }

    /// Sorted neighbor list of `id`.
    pub fn neighbors(&self, id: AgentId) -> Vec<AgentId> {
        let mut out: Vec<AgentId> = self
            .edges
            .iter()
            .filter_map(|&(a, b)| {
                if a == id {
                    Some(b)
                } else if b == id {
                    Some(a)
                } else {
                    None
                }
            })
            .collect();
        out.sort_unstable();
        out
    }

    pub fn edges(&self) -> impl Iterator<Item = (AgentId, AgentId)> + '_ {
        self.edges.iter().copied()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn insert_edge(&mut self, a: AgentId, b: AgentId) -> Result<(), GraphError> {
        if a == b {
            return Err(GraphError::SelfLoop(a));
        }
        self.edges.insert((a.min(b), a.max(b)));
        Ok(())
    }

    /// Remove the vertex and every edge touching it.
    pub fn remove_vertex(&mut self, id: AgentId) {
        self.edges.retain(|&(a, b)| a != id && b != id);
    }
}
