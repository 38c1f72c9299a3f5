//! Closed-loop simulation traces: per-timestep records of states, inputs,
//! references, cost breakdowns, and the message log, plus CSV export.
//!
//! A trace carries the model data needed to recompute every diagnostic from
//! scratch (agents may join or leave mid-run, so the per-record graph is
//! snapshotted).

use crate::agent::{AgentId, AgentModel, CooperationReference};
use crate::cooperation::CooperationCostSpec;
use crate::mpc::{CostBreakdown, SolverDiagnostics};
use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{self, BufRead, Write};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageTag {
    Initialization,
    Cooperative,
    Skipped,
}

/// How a neighbor's trajectory entered a solve: received this timestep, or
/// the one-step shift of the previous timestep's broadcast.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Freshness {
    Fresh,
    Shifted,
}

/// One broadcast: an agent sharing its optimal reference with all neighbors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub from: AgentId,
    pub to: Vec<AgentId>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AgentRecord {
    /// State x(t) before applying this round's input.
    #[serde(with = "crate::serde_util::serde_dvec")]
    pub state: DVector<f64>,
    /// Applied input u(t) = u*(0|t).
    #[serde(with = "crate::serde_util::serde_dvec")]
    pub input: DVector<f64>,
    /// Output y(t).
    #[serde(with = "crate::serde_util::serde_dvec")]
    pub output: DVector<f64>,
    /// Optimal artificial reference y*(.|t) with its lift.
    pub reference: CooperationReference,
    /// Full optimal input sequence u*(.|t).
    #[serde(with = "crate::serde_util::serde_dvec_list")]
    pub input_sequence: Vec<DVector<f64>>,
    pub cost: CostBreakdown,
    /// Solver-reported objective (QP value plus dropped constant); checked
    /// against the recomputed breakdown by the diagnostics.
    pub model_objective: f64,
    pub stage: StageTag,
    /// What the solve saw per neighbor.
    pub mailbox_view: BTreeMap<AgentId, Freshness>,
    pub solver: SolverDiagnostics,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: usize,
    /// Graph edges in force during this round.
    pub graph_edges: Vec<(AgentId, AgentId)>,
    pub agents: BTreeMap<AgentId, AgentRecord>,
    pub messages: Vec<Message>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimTrace {
    /// Stable hash of the scenario configuration.
    pub fingerprint: String,
    pub horizon: usize,
    pub period: usize,
    pub cooperation: CooperationCostSpec,
    /// Model data for every agent that ever appeared.
    pub models: BTreeMap<AgentId, AgentModel>,
    pub delta: BTreeMap<AgentId, f64>,
    pub records: Vec<StepRecord>,
}

impl SimTrace {
    pub fn record(&self, t: usize) -> Option<&StepRecord> {
        self.records.iter().find(|r| r.t == t)
    }

    pub fn last_t(&self) -> Option<usize> {
        self.records.last().map(|r| r.t)
    }

    /// Agents present in the final record.
    pub fn final_agents(&self) -> Vec<AgentId> {
        self.records
            .last()
            .map(|r| r.agents.keys().copied().collect())
            .unwrap_or_default()
    }
}

/// FNV-1a over a byte string; used for scenario fingerprints so identical
/// configurations produce identical trace headers across runs.
pub(crate) fn fnv1a_hex(bytes: &[u8]) -> String {
    let mut hash: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    format!("{hash:016x}")
}

#[derive(Debug, Error)]
pub enum CsvError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
}

/// One flat CSV row of a trace export.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvRow {
    pub t: usize,
    pub agent: AgentId,
    pub x: Vec<f64>,
    pub u: Vec<f64>,
    pub y: Vec<f64>,
    pub tracking: f64,
    pub cooperation: f64,
    pub drift: f64,
    pub total: f64,
}

fn csv_dims(trace: &SimTrace) -> (usize, usize, usize) {
    let mut n = 0;
    let mut q = 0;
    let mut p = 0;
    for m in trace.models.values() {
        n = n.max(m.state_dim());
        q = q.max(m.input_dim());
        p = p.max(m.output_dim());
    }
    (n, q, p)
}

/// One row per `(t, agent)`, ordered by time then agent id. Numeric cells use
/// the shortest representation that round-trips; columns beyond an agent's
/// dimensions stay empty.
pub fn export_trace_csv(trace: &SimTrace, out: &mut impl Write) -> io::Result<()> {
    let (n, q, p) = csv_dims(trace);
    let mut header = String::from("t,agent");
    for i in 0..n {
        header.push_str(&format!(",x{i}"));
    }
    for i in 0..q {
        header.push_str(&format!(",u{i}"));
    }
    for i in 0..p {
        header.push_str(&format!(",y{i}"));
    }
    header.push_str(",J_tr,Vbar_c,delta_d,V_total");
    writeln!(out, "{header}")?;
    for record in &trace.records {
        for (id, agent) in &record.agents {
            let mut row = format!("{},{}", record.t, id);
            let pad = |row: &mut String, v: &DVector<f64>, len: usize| {
                for i in 0..len {
                    if i < v.len() {
                        row.push_str(&format!(",{}", v[i]));
                    } else {
                        row.push(',');
                    }
                }
            };
            pad(&mut row, &agent.state, n);
            pad(&mut row, &agent.input, q);
            pad(&mut row, &agent.output, p);
            row.push_str(&format!(
                ",{},{},{},{}",
                agent.cost.tracking,
                agent.cost.cooperation,
                agent.cost.drift,
                agent.cost.total()
            ));
            writeln!(out, "{row}")?;
        }
    }
    Ok(())
}

pub fn export_trace_csv_to_path(trace: &SimTrace, path: &std::path::Path) -> io::Result<()> {
    let mut file = io::BufWriter::new(std::fs::File::create(path)?);
    export_trace_csv(trace, &mut file)
}

/// Parse a trace CSV produced by [`export_trace_csv`].
pub fn parse_trace_csv(reader: impl BufRead) -> Result<Vec<CsvRow>, CsvError> {
    let mut lines = reader.lines().enumerate();
    let (_, header) = lines.next().ok_or(CsvError::Parse {
        line: 1,
        message: "empty file".into(),
    })?;
    let header = header?;
    let cols: Vec<&str> = header.split(',').collect();
    let count = |prefix: &str| cols.iter().filter(|c| {
        c.starts_with(prefix) && c[prefix.len()..].chars().all(|ch| ch.is_ascii_digit())
    }).count();
    let (n, q, p) = (count("x"), count("u"), count("y"));

    let mut rows = Vec::new();
    for (idx, line) in lines {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        let expect = 2 + n + q + p + 4;
        if fields.len() != expect {
            return Err(CsvError::Parse {
                line: idx + 1,
                message: format!("expected {expect} fields, got {}", fields.len()),
            });
        }
        let parse_f = |s: &str, what: &str| -> Result<f64, CsvError> {
            s.parse().map_err(|_| CsvError::Parse {
                line: idx + 1,
                message: format!("bad {what}: {s:?}"),
            })
        };
        let take_vec = |fields: &[&str]| -> Result<Vec<f64>, CsvError> {
            fields
                .iter()
                .filter(|s| !s.is_empty())
                .map(|s| parse_f(s, "number"))
                .collect()
        };
        let t = fields[0].parse().map_err(|_| CsvError::Parse {
            line: idx + 1,
            message: format!("bad t: {:?}", fields[0]),
        })?;
        let agent = AgentId(fields[1].parse().map_err(|_| CsvError::Parse {
            line: idx + 1,
            message: format!("bad agent: {:?}", fields[1]),
        })?);
        let mut at = 2;
        let x = take_vec(&fields[at..at + n])?;
        at += n;
        let u = take_vec(&fields[at..at + q])?;
        at += q;
        let y = take_vec(&fields[at..at + p])?;
        at += p;
        rows.push(CsvRow {
            t,
            agent,
            x,
            u,
            y,
            tracking: parse_f(fields[at], "J_tr")?,
            cooperation: parse_f(fields[at + 1], "Vbar_c")?,
            drift: parse_f(fields[at + 2], "delta_d")?,
            total: parse_f(fields[at + 3], "V_total")?,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fnv_is_stable() {
        assert_eq!(fnv1a_hex(b""), "cbf29ce484222325");
        assert_eq!(fnv1a_hex(b"a"), fnv1a_hex(b"a"));
        assert_ne!(fnv1a_hex(b"a"), fnv1a_hex(b"b"));
    }

    #[test]
    fn empty_trace_exports_header_only() {
        let trace = SimTrace {
            fingerprint: "0".into(),
            horizon: 3,
            period: 3,
            cooperation: CooperationCostSpec::synchronization(),
            models: BTreeMap::new(),
            delta: BTreeMap::new(),
            records: Vec::new(),
        };
        let mut buf = Vec::new();
        export_trace_csv(&trace, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "t,agent,J_tr,Vbar_c,delta_d,V_total\n");
    }
}
