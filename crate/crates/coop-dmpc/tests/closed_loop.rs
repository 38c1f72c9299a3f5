//! Closed-loop behavior at the engine level: decoupled runs, pairwise
//! consensus geometry, one-step coupling decrease, and constructed failures.

mod common;

use common::load_scenario;
use coop_dmpc::agent::{AgentId, AgentModel, BoxBounds};
use coop_dmpc::coordinator::{Engine, RunError};
use coop_dmpc::diagnostics;
use coop_dmpc::trajectory::max_abs_difference;
use nalgebra::{DMatrix, DVector};

#[test]
fn decoupled_agent_converges_to_its_initial_orbit() {
    // No neighbors: the cooperation cost is identically zero and the agent
    // settles onto the orbit chosen at initialization.
    let trace = Engine::run(load_scenario("solo.json")).unwrap();
    let last_t = trace.last_t().unwrap();
    for t in 0..=last_t {
        let c = diagnostics::lyapunov_components(&trace, t).unwrap();
        assert_eq!(c.cooperation, 0.0);
    }
    assert!(diagnostics::check_monotonicity(&trace, 1e-6).unwrap().is_ok());

    let init_ref = &trace.record(0).unwrap().agents[&AgentId(1)].reference.y;
    let final_ref = &trace.record(last_t).unwrap().agents[&AgentId(1)].reference.y;
    assert!(max_abs_difference(init_ref, final_ref).unwrap() < 1e-6);
    // The realized state locks onto the reference orbit.
    let last = &trace.record(last_t).unwrap().agents[&AgentId(1)];
    let slot = last_t % trace.period;
    assert!((&last.state - final_ref.at(slot)).amax() < 1e-6);
}

#[test]
fn mirrored_pair_synchronizes_inside_the_hull() {
    // The sequential order breaks mirror symmetry (the first mover absorbs
    // most of the coupling cost), so the consensus is not the midpoint; it
    // is still an exact consensus inside the hull of the initial positions.
    let trace = Engine::run(load_scenario("pair_line.json")).unwrap();
    let last_t = trace.last_t().unwrap();
    let err = diagnostics::sync_error(&trace, last_t).unwrap();
    assert!(err.output_spread < 1e-6, "spread {}", err.output_spread);
    assert!(err.reference_spread < 1e-6);
    let last = trace.record(last_t).unwrap();
    for agent in last.agents.values() {
        for c in 0..2 {
            assert!(
                (-1.0 - 1e-6..=1.0 + 1e-6).contains(&agent.output[c]),
                "consensus left the hull of the initial positions: {}",
                agent.output[c]
            );
        }
    }
}

#[test]
fn first_coupled_step_decreases_each_combined_cost() {
    // Each agent's solve can always keep its shifted previous reference, so
    // the combined cost it reports is no worse than that fallback.
    let mut engine = Engine::new(load_scenario("sync4.json")).unwrap();
    engine.initialize().unwrap();
    engine.step().unwrap();
    let trace = engine.trace();
    let init = trace.record(0).unwrap();
    let step = trace.record(1).unwrap();
    let graph = coop_dmpc::graph::Graph::new(step.graph_edges.iter().copied()).unwrap();
    for (&id, agent) in &step.agents {
        // Reconstruct the view the agent saw.
        let mut view = std::collections::BTreeMap::new();
        for (&nb, tag) in &agent.mailbox_view {
            let y = match tag {
                coop_dmpc::trace::Freshness::Fresh => step.agents[&nb].reference.y.clone(),
                coop_dmpc::trace::Freshness::Shifted => init.agents[&nb].reference.y.shift(),
            };
            view.insert(nb, y);
        }
        let kept = trace
            .cooperation
            .eval_combined_cost_present(&graph, id, &init.agents[&id].reference.y.shift(), &view)
            .unwrap();
        let chosen = trace
            .cooperation
            .eval_combined_cost_present(&graph, id, &agent.reference.y, &view)
            .unwrap();
        assert!(
            chosen <= kept + 1e-9,
            "agent {id}: chosen {chosen} vs fallback {kept}"
        );
    }
}

#[test]
fn throttled_inputs_make_initialization_infeasible() {
    // Nonzero initial velocity with almost no control authority: the state
    // must leave the admissible box before any periodic orbit is reachable.
    let agent = AgentModel::double_integrator(
        AgentId(1),
        BoxBounds::symmetric(&[4.1, 4.1, 2.1, 2.1]),
        BoxBounds::symmetric(&[0.01, 0.01]),
        BoxBounds::symmetric(&[4.0, 4.0, 2.0, 2.0]),
        BoxBounds::symmetric(&[0.005, 0.005]),
        DMatrix::identity(4, 4),
        DMatrix::identity(2, 2),
    )
    .unwrap();
    let mut scenario = load_scenario("solo.json");
    scenario.agents = vec![agent];
    scenario
        .x0
        .insert(AgentId(1), DVector::from_column_slice(&[0.0, 0.0, 2.0, 2.0]));
    let mut engine = Engine::new(scenario).unwrap();
    let err = engine.initialize().unwrap_err();
    assert!(matches!(err, RunError::InfeasibleInitialization { .. }), "{err}");
}

#[test]
fn offset_formation_converges_to_configured_spacing() {
    let scenario = load_scenario("formation3_offset.json");
    let offsets = scenario.cooperation.offsets.clone();
    let trace = Engine::run(scenario).unwrap();
    let last = trace.record(trace.last_t().unwrap()).unwrap();
    // At the cooperative goal, y_i - y_j equals o_i - o_j on every chained
    // pair; with zero offsets in the remaining components the outputs agree.
    let pairs = [(AgentId(1), AgentId(2)), (AgentId(2), AgentId(3))];
    for (i, j) in pairs {
        let yi = &last.agents[&i].output;
        let yj = &last.agents[&j].output;
        for c in 0..4 {
            let expected = offsets[&i][c] - offsets[&j][c];
            assert!(
                ((yi[c] - yj[c]) - expected).abs() < 1e-6,
                "pair ({i},{j}) component {c}: {} vs {expected}",
                yi[c] - yj[c]
            );
        }
    }
    assert!(diagnostics::check_monotonicity(&trace, 1e-6).unwrap().is_ok());
}

#[test]
fn engine_rejects_out_of_order_lifecycle_calls() {
    let mut engine = Engine::new(load_scenario("solo.json")).unwrap();
    assert!(matches!(engine.step(), Err(RunError::NotInitialized)));
    assert!(matches!(engine.drop_agent(AgentId(1)), Err(RunError::NotInitialized)));
    engine.initialize().unwrap();
    assert!(matches!(engine.initialize(), Err(RunError::AlreadyInitialized)));
    assert!(matches!(
        engine.drop_agent(AgentId(9)),
        Err(RunError::UnknownAgent(AgentId(9)))
    ));
}

#[test]
fn saturating_transient_stays_feasible_and_monotone() {
    // Agents start in opposite corners, so inputs and velocities ride their
    // bounds during the approach; the guarantees must survive active
    // constraints, and with horizons both shorter and longer than the period.
    for horizon in [5, 10, 15] {
        let mut scenario = load_scenario("pair_line.json");
        scenario.period = 10;
        scenario.horizon = horizon;
        scenario.steps = 30;
        scenario
            .x0
            .insert(AgentId(1), DVector::from_column_slice(&[3.9, 3.9, 0.0, 0.0]));
        scenario
            .x0
            .insert(AgentId(2), DVector::from_column_slice(&[-3.9, -3.9, 0.0, 0.0]));
        let trace = Engine::run(scenario).unwrap();
        let report = diagnostics::feasibility_report(&trace).unwrap();
        assert!(report.is_clean(), "N={horizon}: {report}");
        assert!(report.worst_candidate_residual < 1e-7, "N={horizon}");
        assert!(
            diagnostics::check_monotonicity(&trace, 1e-6).unwrap().is_ok(),
            "N={horizon}"
        );
        let last_t = trace.last_t().unwrap();
        let err = diagnostics::sync_error(&trace, last_t).unwrap();
        assert!(err.output_spread < 1e-6, "N={horizon}: {}", err.output_spread);
    }
}

#[test]
fn objective_consistency_holds_with_skips() {
    let mut scenario = load_scenario("sync4.json");
    scenario.steps = 8;
    scenario.skips.insert((AgentId(3), 4));
    let trace = Engine::run(scenario).unwrap();
    let gap = diagnostics::objective_consistency(&trace).unwrap();
    assert!(gap < 1e-6, "gap {gap}");
}
