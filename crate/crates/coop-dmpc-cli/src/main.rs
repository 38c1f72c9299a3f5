//! Command-line front end: run scenarios, validate them, plot traces, and
//! reproduce the shipped 4-agent synchronization study.
//!
//! Exit codes: 0 success, 2 invalid scenario, 3 infeasible problem,
//! 4 diagnostic failure (constraint violation or value-function increase).

use clap::{Args, Parser, Subcommand, ValueEnum};
use coop_dmpc::coordinator::{Engine, RunError, Scenario};
use coop_dmpc::diagnostics;
use coop_dmpc::plot::{render_svg_to_path, PlotKind, PlotSpec};
use coop_dmpc::scenario::parse_scenario;
use coop_dmpc::trace::{export_trace_csv_to_path, SimTrace};
use coop_dmpc::AgentId;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

const EXIT_BAD_SCENARIO: u8 = 2;
const EXIT_INFEASIBLE: u8 = 3;
const EXIT_DIAGNOSTIC: u8 = 4;

/// Tolerance for the value-function monotonicity gate.
const MONOTONICITY_TOL: f64 = 1e-6;

const SYNC4_SCENARIO: &str =
    include_str!(concat!(env!("CARGO_MANIFEST_DIR"), "/../../scenarios/sync4.json"));

#[derive(Parser)]
#[command(
    name = "coop-dmpc",
    about = "Sequential distributed MPC simulator for periodic multi-agent cooperation",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario, export the trace, and verify the run diagnostics.
    Run(RunArgs),
    /// Validate a scenario file without running it.
    Check {
        #[arg(long)]
        scenario: PathBuf,
    },
    /// Render an SVG plot from an exported trace JSON.
    Plot(PlotArgs),
    /// Run the shipped 4-agent synchronization scenario and emit its figures
    /// and a reproduction summary.
    ReproPaper {
        #[arg(long, default_value = "out")]
        out_dir: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Scenario file to run.
    #[arg(long, required_unless_present = "batch")]
    scenario: Option<PathBuf>,
    /// Run every *.json scenario in a directory (concurrently).
    #[arg(long, conflicts_with = "scenario")]
    batch: Option<PathBuf>,
    /// Override the scenario's step count.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
    /// Dump each solved QP (problem + solution) as JSON into the output dir.
    #[arg(long)]
    dump_qp: bool,
    /// Comma list of agent:t pairs that skip their slot and fall back to
    /// tracking the shifted previous reference.
    #[arg(long)]
    skip: Option<String>,
    /// Comma list of agent ids fixing the solve order within a time step.
    #[arg(long)]
    order: Option<String>,
}

#[derive(Args)]
struct PlotArgs {
    /// Trace JSON produced by `run`.
    #[arg(long)]
    trace: PathBuf,
    #[arg(long, value_enum, default_value = "time-series")]
    kind: KindArg,
    /// Output component indices: one for time-series, two for phase.
    #[arg(long, default_value = "0")]
    components: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    TimeSeries,
    Phase,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter("COOP_DMPC_LOG")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Check { scenario } => cmd_check(&scenario),
        Command::Plot(args) => cmd_plot(args),
        Command::ReproPaper { out_dir } => cmd_repro_paper(&out_dir),
    }
}

fn fail(code: u8, message: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {message}");
    ExitCode::from(code)
}

fn load_scenario(path: &Path, args: Option<&RunArgs>) -> Result<Scenario, ExitCode> {
    let mut scenario =
        parse_scenario(path).map_err(|e| fail(EXIT_BAD_SCENARIO, format!("{}: {e}", path.display())))?;
    if let Some(args) = args {
        if let Some(steps) = args.steps {
            scenario.steps = steps;
        }
        if let Some(skip) = &args.skip {
            for pair in skip.split(',').filter(|s| !s.is_empty()) {
                let parsed = pair.split_once(':').and_then(|(a, t)| {
                    Some((a.trim().parse::<u32>().ok()?, t.trim().parse::<usize>().ok()?))
                });
                match parsed {
                    Some((agent, t)) => {
                        scenario.skips.insert((AgentId(agent), t));
                    }
                    None => {
                        return Err(fail(
                            EXIT_BAD_SCENARIO,
                            format!("--skip entry {pair:?} is not of the form agent:t"),
                        ))
                    }
                }
            }
        }
        if let Some(order) = &args.order {
            let ids: Result<Vec<AgentId>, _> = order
                .split(',')
                .map(|s| s.trim().parse::<u32>().map(AgentId))
                .collect();
            match ids {
                Ok(ids) => scenario.order = Some(ids),
                Err(_) => {
                    return Err(fail(
                        EXIT_BAD_SCENARIO,
                        format!("--order {order:?} is not a comma list of agent ids"),
                    ))
                }
            }
        }
        scenario
            .validate()
            .map_err(|e| fail(EXIT_BAD_SCENARIO, e))?;
    }
    Ok(scenario)
}

fn run_error_code(err: &RunError) -> u8 {
    match err {
        RunError::Scenario(_) => EXIT_BAD_SCENARIO,
        RunError::InfeasibleInitialization { .. } | RunError::LocalInfeasible { .. } => {
            EXIT_INFEASIBLE
        }
        _ => 1,
    }
}

/// Run one scenario to completion and enforce the run diagnostics.
fn execute(scenario: Scenario, out_dir: &Path, dump_qp: bool, label: &str) -> ExitCode {
    if let Err(e) = std::fs::create_dir_all(out_dir) {
        return fail(1, format!("cannot create {}: {e}", out_dir.display()));
    }
    let started = Instant::now();
    let mut engine = match Engine::new(scenario) {
        Ok(engine) => engine,
        Err(e) => return fail(run_error_code(&e), e),
    };
    if dump_qp {
        let dump_dir = out_dir.join("qp_dumps");
        if let Err(e) = std::fs::create_dir_all(&dump_dir) {
            return fail(1, format!("cannot create {}: {e}", dump_dir.display()));
        }
        engine.set_qp_dump_dir(dump_dir);
    }
    let steps = engine.scenario().steps;
    if let Err(e) = engine.initialize() {
        return fail(run_error_code(&e), e);
    }
    for _ in 0..steps {
        if let Err(e) = engine.step() {
            return fail(run_error_code(&e), e);
        }
    }
    let trace = engine.into_trace();
    let elapsed = started.elapsed();

    if let Err(e) = write_outputs(&trace, out_dir) {
        return fail(1, e);
    }
    match verify_run(&trace, label, elapsed.as_secs_f64()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(message) => fail(EXIT_DIAGNOSTIC, message),
    }
}

fn write_outputs(trace: &SimTrace, out_dir: &Path) -> Result<(), String> {
    let json_path = out_dir.join("trace.json");
    let file = std::fs::File::create(&json_path)
        .map_err(|e| format!("cannot write {}: {e}", json_path.display()))?;
    serde_json::to_writer(std::io::BufWriter::new(file), trace)
        .map_err(|e| format!("cannot serialize trace: {e}"))?;
    let csv_path = out_dir.join("trace.csv");
    export_trace_csv_to_path(trace, &csv_path)
        .map_err(|e| format!("cannot write {}: {e}", csv_path.display()))?;

    let report = diagnostics::feasibility_report(trace)
        .map_err(|e| format!("feasibility report failed: {e}"))?;
    let lyapunov = diagnostics::lyapunov_series(trace)
        .map_err(|e| format!("value function failed: {e}"))?;
    let doc = serde_json::json!({
        "lyapunov": lyapunov,
        "feasibility": report,
    });
    let diag_path = out_dir.join("diagnostics.json");
    std::fs::write(&diag_path, serde_json::to_vec_pretty(&doc).expect("serializable"))
        .map_err(|e| format!("cannot write {}: {e}", diag_path.display()))?;
    Ok(())
}

/// Post-run gate: constraint satisfaction and value-function monotonicity.
fn verify_run(trace: &SimTrace, label: &str, seconds: f64) -> Result<(), String> {
    let feasibility = diagnostics::feasibility_report(trace)
        .map_err(|e| format!("feasibility report failed: {e}"))?;
    let series = diagnostics::lyapunov_series(trace)
        .map_err(|e| format!("value function failed: {e}"))?;
    let monotone = diagnostics::check_monotonicity(trace, MONOTONICITY_TOL)
        .map_err(|e| format!("monotonicity check failed: {e}"))?;

    let v_first = series.first().map(|&(_, v)| v).unwrap_or(0.0);
    let v_last = series.last().map(|&(_, v)| v).unwrap_or(0.0);
    println!("[{label}] {} steps in {seconds:.3}s", trace.records.len());
    println!(
        "[{label}] V(0) = {v_first:.6e}, V(end) = {v_last:.6e}, worst nominal margin = {:+.3e}",
        feasibility.worst_nominal_margin
    );
    println!(
        "[{label}] worst candidate residual = {:.3e}, worst reference residual = {:.3e}",
        feasibility.worst_candidate_residual, feasibility.worst_reference_residual
    );
    if trace.records.last().is_some_and(|r| r.agents.len() >= 2) {
        if let Some(last_t) = trace.last_t() {
            if let Ok(err) = diagnostics::sync_error(trace, last_t) {
                println!(
                    "[{label}] final sync spread: outputs {:.3e}, references {:.3e}",
                    err.output_spread, err.reference_spread
                );
            }
        }
    }

    if !feasibility.is_clean() {
        return Err(format!(
            "{} nominal constraint violation(s); first: {:?}",
            feasibility.violations.len(),
            feasibility.violations.first()
        ));
    }
    if let Err(breach) = monotone {
        return Err(format!(
            "value function increased by {:.3e} between t={} and t={}",
            breach.increase, breach.t_from, breach.t_to
        ));
    }
    println!("[{label}] diagnostics clean: constraints satisfied, V(t) non-increasing");
    Ok(())
}

fn cmd_run(args: RunArgs) -> ExitCode {
    if let Some(batch_dir) = &args.batch {
        return cmd_run_batch(batch_dir, &args);
    }
    let path = args.scenario.clone().expect("clap enforces scenario|batch");
    let scenario = match load_scenario(&path, Some(&args)) {
        Ok(s) => s,
        Err(code) => return code,
    };
    let label = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "scenario".into());
    execute(scenario, &args.out_dir, args.dump_qp, &label)
}

fn cmd_run_batch(dir: &Path, args: &RunArgs) -> ExitCode {
    let mut paths: Vec<PathBuf> = match std::fs::read_dir(dir) {
        Ok(entries) => entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|ext| ext == "json"))
            .collect(),
        Err(e) => return fail(1, format!("cannot read {}: {e}", dir.display())),
    };
    paths.sort();
    if paths.is_empty() {
        return fail(EXIT_BAD_SCENARIO, format!("no scenario files in {}", dir.display()));
    }
    let codes: Vec<ExitCode> = std::thread::scope(|scope| {
        let handles: Vec<_> = paths
            .iter()
            .map(|path| {
                let args = &*args;
                scope.spawn(move || {
                    let scenario = match load_scenario(path, Some(args)) {
                        Ok(s) => s,
                        Err(code) => return code,
                    };
                    let label = path
                        .file_stem()
                        .map(|s| s.to_string_lossy().into_owned())
                        .unwrap_or_else(|| "scenario".into());
                    let out_dir = args.out_dir.join(&label);
                    execute(scenario, &out_dir, args.dump_qp, &label)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("no panics")).collect()
    });
    codes
        .into_iter()
        .max_by_key(|c| format!("{c:?}"))
        .unwrap_or(ExitCode::SUCCESS)
}

fn cmd_check(path: &Path) -> ExitCode {
    match load_scenario(path, None) {
        Ok(scenario) => {
            println!(
                "{}: ok ({} agents, T={}, N={}, {} steps)",
                path.display(),
                scenario.agents.len(),
                scenario.period,
                scenario.horizon,
                scenario.steps
            );
            ExitCode::SUCCESS
        }
        Err(code) => code,
    }
}

fn cmd_plot(args: PlotArgs) -> ExitCode {
    let text = match std::fs::read_to_string(&args.trace) {
        Ok(t) => t,
        Err(e) => return fail(1, format!("cannot read {}: {e}", args.trace.display())),
    };
    let trace: SimTrace = match serde_json::from_str(&text) {
        Ok(t) => t,
        Err(e) => return fail(EXIT_BAD_SCENARIO, format!("invalid trace JSON: {e}")),
    };
    let components: Vec<usize> = match args
        .components
        .split(',')
        .map(|s| s.trim().parse::<usize>())
        .collect()
    {
        Ok(c) => c,
        Err(_) => {
            return fail(
                EXIT_BAD_SCENARIO,
                format!("--components {:?} is not a comma list of indices", args.components),
            )
        }
    };
    let kind = match (args.kind, components.as_slice()) {
        (KindArg::TimeSeries, [c]) => PlotKind::TimeSeries { component: *c },
        (KindArg::Phase, [a, b]) => PlotKind::PhasePlot {
            x_component: *a,
            y_component: *b,
        },
        (KindArg::TimeSeries, _) => {
            return fail(EXIT_BAD_SCENARIO, "time-series needs exactly one component")
        }
        (KindArg::Phase, _) => {
            return fail(EXIT_BAD_SCENARIO, "phase needs exactly two components")
        }
    };
    match render_svg_to_path(&trace, &PlotSpec { kind }, &args.out) {
        Ok(()) => {
            println!("wrote {}", args.out.display());
            ExitCode::SUCCESS
        }
        Err(e) => fail(EXIT_BAD_SCENARIO, e),
    }
}

fn cmd_repro_paper(out_dir: &Path) -> ExitCode {
    let scenario = match coop_dmpc::scenario::parse_scenario_str(SYNC4_SCENARIO) {
        Ok(s) => s,
        Err(e) => return fail(EXIT_BAD_SCENARIO, format!("embedded scenario: {e}")),
    };
    if let Err(e) = std::fs::create_dir_all(out_dir) {
        return fail(1, format!("cannot create {}: {e}", out_dir.display()));
    }
    let started = Instant::now();
    let trace = match Engine::run(scenario) {
        Ok(t) => t,
        Err(e) => return fail(run_error_code(&e), e),
    };
    let elapsed = started.elapsed().as_secs_f64();
    if let Err(e) = write_outputs(&trace, out_dir) {
        return fail(1, e);
    }
    for (name, kind) in [
        ("fig_outputs_time.svg", PlotKind::TimeSeries { component: 0 }),
        (
            "fig_outputs_phase.svg",
            PlotKind::PhasePlot {
                x_component: 0,
                y_component: 1,
            },
        ),
    ] {
        if let Err(e) = render_svg_to_path(&trace, &PlotSpec { kind }, &out_dir.join(name)) {
            return fail(1, format!("cannot render {name}: {e}"));
        }
    }
    if let Err(message) = verify_run(&trace, "sync4", elapsed) {
        return fail(EXIT_DIAGNOSTIC, message);
    }

    // Reproduction summary mirroring the headline properties of the study.
    let last_t = trace.last_t().unwrap_or(0);
    let mut ok = true;
    let mut check = |name: &str, pass: bool, detail: String| {
        println!("{} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
        ok &= pass;
    };

    let mut worst_spread: f64 = 0.0;
    for t in 20..=last_t {
        if let Ok(err) = diagnostics::sync_error(&trace, t) {
            worst_spread = worst_spread.max(err.output_spread);
        }
    }
    check(
        "output synchronization (t >= 20)",
        worst_spread < 1e-3,
        format!("worst pairwise spread {worst_spread:.3e} < 1e-3"),
    );

    let mut band_ok = true;
    let mut band_range = (f64::INFINITY, f64::NEG_INFINITY);
    for t in 15..=last_t {
        if let Some(rec) = trace.record(t) {
            for a in rec.agents.values() {
                let y = a.output[0];
                band_ok &= (1.25..=1.37).contains(&y);
                band_range.0 = band_range.0.min(y);
                band_range.1 = band_range.1.max(y);
            }
        }
    }
    check(
        "first output in study band (t >= 15)",
        band_ok,
        format!("range [{:.4}, {:.4}] within [1.25, 1.37]", band_range.0, band_range.1),
    );

    let mut worst_period: f64 = 0.0;
    for t in 20..=last_t.saturating_sub(trace.period) {
        if let Ok(res) = diagnostics::periodicity_residual(&trace, t) {
            worst_period = worst_period.max(res);
        }
    }
    check(
        "periodic orbit (t >= 20)",
        worst_period < 1e-2,
        format!("worst |y(t+T) - y(t)| = {worst_period:.3e} < 1e-2"),
    );

    let v_c = diagnostics::lyapunov_components(&trace, last_t)
        .map(|c| c.cooperation)
        .unwrap_or(f64::NAN);
    check(
        "cooperation cost at end",
        v_c < 1e-4,
        format!("V_c = {v_c:.3e} < 1e-4"),
    );

    if ok {
        println!("reproduction summary: all checks passed");
        ExitCode::SUCCESS
    } else {
        fail(EXIT_DIAGNOSTIC, "reproduction summary: checks failed")
    }
}
