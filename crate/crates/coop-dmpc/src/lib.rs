//! Sequential distributed MPC for periodic cooperation of multi-agent systems.
//!
//! A fleet of constrained linear agents, coupled only through a communication
//! graph, negotiates a common periodic output trajectory: each agent tracks an
//! artificial periodic reference that is itself a decision variable, and a
//! separable cooperation cost over communicated references pulls the fleet
//! towards the cooperative goal. Agents solve their local problems
//! sequentially within each time step and broadcast exactly once.
//!
//! The crate provides:
//!
//! * [`trajectory`] — periodic trajectory values and their algebra,
//! * [`agent`] — agent dynamics, constraint sets, and reference lifting,
//! * [`cooperation`] — separable cooperation costs and their quadratic forms,
//! * [`qp`] — a self-contained sparse operator-splitting QP solver,
//! * [`mpc`] — assembly and solution of the local tracking/cooperation problems,
//! * [`coordinator`] — the sequential protocol and closed-loop engine,
//! * [`diagnostics`] — value-function, synchronization, and feasibility checks,
//! * [`scenario`], [`trace`], [`plot`] — config loading, trace export, SVG plots.

pub mod agent;
pub mod cooperation;
pub mod coordinator;
pub mod diagnostics;
pub mod graph;
pub mod mpc;
pub mod plot;
pub mod scenario;
pub mod trace;
pub mod qp;
pub(crate) mod serde_util;
pub mod trajectory;

pub use agent::{AgentId, AgentModel, CooperationReference};
pub use cooperation::{CooperationCostSpec, CooperationKind};
pub use coordinator::{Engine, FleetState, Scenario};
pub use graph::Graph;
pub use trace::SimTrace;
pub use trajectory::PeriodicTrajectory;
