//! Static SVG plots of simulation traces: per-agent output time series and
//! phase plots with the final reference orbit overlaid as markers.

use crate::agent::AgentId;
use crate::trace::SimTrace;
use std::fmt::Write as _;
use std::io::{self, Write};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PlotError {
    #[error("output component {got} out of range (dimension {dim})")]
    BadComponent { got: usize, dim: usize },
    #[error("trace has no records to plot")]
    EmptyTrace,
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlotKind {
    /// One line per agent: output component vs time.
    TimeSeries { component: usize },
    /// One line per agent: component pair traced over time, with the final
    /// optimal reference orbits marked.
    PhasePlot { x_component: usize, y_component: usize },
}

#[derive(Debug, Clone, Copy)]
pub struct PlotSpec {
    pub kind: PlotKind,
}

const WIDTH: f64 = 800.0;
const HEIGHT: f64 = 500.0;
const MARGIN_LEFT: f64 = 64.0;
const MARGIN_RIGHT: f64 = 24.0;
const MARGIN_TOP: f64 = 24.0;
const MARGIN_BOTTOM: f64 = 48.0;

const GRID_COLOR: &str = "#dddddd";
const TICK_COLOR: &str = "#333333";
const LABEL_COLOR: &str = "#111111";

const PALETTE: [&str; 8] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

struct Axes {
    x_min: f64,
    x_max: f64,
    y_min: f64,
    y_max: f64,
}

impl Axes {
    fn from_ranges(xs: impl Iterator<Item = f64>, ys: impl Iterator<Item = f64>) -> Self {
        let mut x_min = f64::INFINITY;
        let mut x_max = f64::NEG_INFINITY;
        for v in xs {
            x_min = x_min.min(v);
            x_max = x_max.max(v);
        }
        let mut y_min = f64::INFINITY;
        let mut y_max = f64::NEG_INFINITY;
        for v in ys {
            y_min = y_min.min(v);
            y_max = y_max.max(v);
        }
        let pad = |min: &mut f64, max: &mut f64| {
            let span = *max - *min;
            let pad = if span.abs() < 1e-12 { 0.5 } else { 0.05 * span };
            *min -= pad;
            *max += pad;
        };
        pad(&mut x_min, &mut x_max);
        pad(&mut y_min, &mut y_max);
        Self {
            x_min,
            x_max,
            y_min,
            y_max,
        }
    }

    fn px(&self, x: f64) -> f64 {
        MARGIN_LEFT + (x - self.x_min) / (self.x_max - self.x_min) * (WIDTH - MARGIN_LEFT - MARGIN_RIGHT)
    }

    fn py(&self, y: f64) -> f64 {
        HEIGHT - MARGIN_BOTTOM
            - (y - self.y_min) / (self.y_max - self.y_min) * (HEIGHT - MARGIN_TOP - MARGIN_BOTTOM)
    }
}

fn color(idx: usize) -> &'static str {
    PALETTE[idx % PALETTE.len()]
}

fn fmt_tick(v: f64) -> String {
    if v == 0.0 {
        return "0".to_string();
    }
    let a = v.abs();
    if (1e-3..1e4).contains(&a) {
        format!("{v:.3}")
            .trim_end_matches('0')
            .trim_end_matches('.')
            .to_string()
    } else {
        format!("{v:.2e}")
    }
}

fn draw_frame(svg: &mut String, axes: &Axes, x_label: &str, y_label: &str) {
    let _ = write!(
        svg,
        r#"<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#
    );
    // Gridlines and ticks, five per axis.
    for i in 0..=5 {
        let fx = axes.x_min + (axes.x_max - axes.x_min) * i as f64 / 5.0;
        let px = axes.px(fx);
        let _ = write!(
            svg,
            r#"<line x1="{px:.1}" y1="{top}" x2="{px:.1}" y2="{bot}" stroke="{grid}" stroke-width="1"/>"#,
            grid = GRID_COLOR,
            top = MARGIN_TOP,
            bot = HEIGHT - MARGIN_BOTTOM
        );
        let _ = write!(
            svg,
            r#"<text x="{px:.1}" y="{y}" font-size="12" text-anchor="middle" fill="{ink}">{}</text>"#,
            fmt_tick(fx),
            ink = TICK_COLOR,
            y = HEIGHT - MARGIN_BOTTOM + 18.0
        );
        let fy = axes.y_min + (axes.y_max - axes.y_min) * i as f64 / 5.0;
        let py = axes.py(fy);
        let _ = write!(
            svg,
            r#"<line x1="{left}" y1="{py:.1}" x2="{right}" y2="{py:.1}" stroke="{grid}" stroke-width="1"/>"#,
            grid = GRID_COLOR,
            left = MARGIN_LEFT,
            right = WIDTH - MARGIN_RIGHT
        );
        let _ = write!(
            svg,
            r#"<text x="{x}" y="{py:.1}" font-size="12" text-anchor="end" dominant-baseline="middle" fill="{ink}">{}</text>"#,
            fmt_tick(fy),
            ink = TICK_COLOR,
            x = MARGIN_LEFT - 8.0
        );
    }
    // Axis frame.
    let _ = write!(
        svg,
        r#"<rect x="{left}" y="{top}" width="{w:.1}" height="{h:.1}" fill="none" stroke="{ink}" stroke-width="1"/>"#,
        ink = TICK_COLOR,
        left = MARGIN_LEFT,
        top = MARGIN_TOP,
        w = WIDTH - MARGIN_LEFT - MARGIN_RIGHT,
        h = HEIGHT - MARGIN_TOP - MARGIN_BOTTOM
    );
    let _ = write!(
        svg,
        r#"<text x="{x:.1}" y="{y}" font-size="14" text-anchor="middle" fill="{ink}">{x_label}</text>"#,
        ink = LABEL_COLOR,
        x = (MARGIN_LEFT + WIDTH - MARGIN_RIGHT) / 2.0,
        y = HEIGHT - 8.0
    );
    let _ = write!(
        svg,
        r#"<text x="16" y="{y:.1}" font-size="14" text-anchor="middle" fill="{ink}" transform="rotate(-90 16 {y:.1})">{y_label}</text>"#,
        ink = LABEL_COLOR,
        y = (MARGIN_TOP + HEIGHT - MARGIN_BOTTOM) / 2.0
    );
}

fn draw_legend(svg: &mut String, agents: &[AgentId]) {
    let x0 = WIDTH - MARGIN_RIGHT - 110.0;
    let mut y = MARGIN_TOP + 16.0;
    for (idx, id) in agents.iter().enumerate() {
        let _ = write!(
            svg,
            r#"<line x1="{x0}" y1="{y:.1}" x2="{x1}" y2="{y:.1}" stroke="{color}" stroke-width="2"/>"#,
            x1 = x0 + 24.0,
            color = color(idx)
        );
        let _ = write!(
            svg,
            r#"<text x="{x}" y="{y:.1}" font-size="12" dominant-baseline="middle" fill="{ink}">Agent {id}</text>"#,
            ink = LABEL_COLOR,
            x = x0 + 30.0
        );
        y += 18.0;
    }
}

fn polyline(svg: &mut String, axes: &Axes, points: &[(f64, f64)], color: &str) {
    if points.is_empty() {
        return;
    }
    if points.len() == 1 {
        let (x, y) = points[0];
        let _ = write!(
            svg,
            r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"#,
            axes.px(x),
            axes.py(y)
        );
        return;
    }
    let mut path = String::new();
    for (x, y) in points {
        let _ = write!(path, "{:.2},{:.2} ", axes.px(*x), axes.py(*y));
    }
    let _ = write!(
        svg,
        r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.8"/>"#,
        path.trim_end()
    );
}

fn cross_marker(svg: &mut String, axes: &Axes, x: f64, y: f64) {
    let (px, py) = (axes.px(x), axes.py(y));
    let r = 3.5;
    let _ = write!(
        svg,
        r#"<path d="M {x0:.2} {y0:.2} L {x1:.2} {y1:.2} M {x0:.2} {y1:.2} L {x1:.2} {y0:.2}" stroke="{ink}" stroke-width="1.2" fill="none"/>"#,
        ink = LABEL_COLOR,
        x0 = px - r,
        y0 = py - r,
        x1 = px + r,
        y1 = py + r
    );
}

/// Render a trace plot as a standalone SVG document.
pub fn render_svg(trace: &SimTrace, spec: &PlotSpec, out: &mut impl Write) -> Result<(), PlotError> {
    if trace.records.is_empty() {
        return Err(PlotError::EmptyTrace);
    }
    let agents: Vec<AgentId> = trace
        .records
        .iter()
        .flat_map(|r| r.agents.keys().copied())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    let check_component = |c: usize| -> Result<(), PlotError> {
        for rec in &trace.records {
            for a in rec.agents.values() {
                if c >= a.output.len() {
                    return Err(PlotError::BadComponent {
                        got: c,
                        dim: a.output.len(),
                    });
                }
            }
        }
        Ok(())
    };

    let mut svg = String::new();
    let _ = write!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    );

    match spec.kind {
        PlotKind::TimeSeries { component } => {
            check_component(component)?;
            let series: Vec<(AgentId, Vec<(f64, f64)>)> = agents
                .iter()
                .map(|&id| {
                    let pts = trace
                        .records
                        .iter()
                        .filter_map(|r| {
                            r.agents.get(&id).map(|a| (r.t as f64, a.output[component]))
                        })
                        .collect();
                    (id, pts)
                })
                .collect();
            let axes = Axes::from_ranges(
                series.iter().flat_map(|(_, pts)| pts.iter().map(|p| p.0)),
                series.iter().flat_map(|(_, pts)| pts.iter().map(|p| p.1)),
            );
            draw_frame(&mut svg, &axes, "t (time steps)", &format!("y[{component}]"));
            for (idx, (_, pts)) in series.iter().enumerate() {
                polyline(&mut svg, &axes, pts, color(idx));
            }
            draw_legend(&mut svg, &agents);
        }
        PlotKind::PhasePlot {
            x_component,
            y_component,
        } => {
            check_component(x_component)?;
            check_component(y_component)?;
            let series: Vec<(AgentId, Vec<(f64, f64)>)> = agents
                .iter()
                .map(|&id| {
                    let pts = trace
                        .records
                        .iter()
                        .filter_map(|r| {
                            r.agents
                                .get(&id)
                                .map(|a| (a.output[x_component], a.output[y_component]))
                        })
                        .collect();
                    (id, pts)
                })
                .collect();
            // Final reference orbits, closed, drawn as markers.
            let last = trace.records.last().expect("records nonempty");
            let orbits: Vec<Vec<(f64, f64)>> = last
                .agents
                .values()
                .map(|a| {
                    (0..=a.reference.y.period())
                        .map(|k| {
                            let y = a.reference.y.at(k);
                            (y[x_component], y[y_component])
                        })
                        .collect()
                })
                .collect();
            let axes = Axes::from_ranges(
                series
                    .iter()
                    .flat_map(|(_, pts)| pts.iter().map(|p| p.0))
                    .chain(orbits.iter().flatten().map(|p| p.0)),
                series
                    .iter()
                    .flat_map(|(_, pts)| pts.iter().map(|p| p.1))
                    .chain(orbits.iter().flatten().map(|p| p.1)),
            );
            draw_frame(
                &mut svg,
                &axes,
                &format!("y[{x_component}]"),
                &format!("y[{y_component}]"),
            );
            for (idx, (_, pts)) in series.iter().enumerate() {
                polyline(&mut svg, &axes, pts, color(idx));
            }
            for orbit in &orbits {
                for &(x, y) in orbit {
                    cross_marker(&mut svg, &axes, x, y);
                }
            }
            draw_legend(&mut svg, &agents);
        }
    }
    svg.push_str("</svg>");
    out.write_all(svg.as_bytes())?;
    Ok(())
}

pub fn render_svg_to_path(
    trace: &SimTrace,
    spec: &PlotSpec,
    path: &std::path::Path,
) -> Result<(), PlotError> {
    let mut file = io::BufWriter::new(std::fs::File::create(path)?);
    render_svg(trace, spec, &mut file)
}
