//! Static SVG rendering of a simulation trace.
//!
//! Four stacked panels: plant vs reference states, `‖x_e‖` and `V` on a log
//! scale, the control input with event markers, and the gain trajectories.
//! Every trace sample becomes one polyline vertex. Output depends only on
//! the trace, so identical traces give identical bytes.

use std::fmt::Write as _;

use crate::hybrid_integrator::SimulationResult;
use crate::linalg::dot;

/// Values below this are drawn at the bottom of the log panel.
pub const LOG_FLOOR: f64 = 1e-12;

const WIDTH: f64 = 900.0;
const PANEL_HEIGHT: f64 = 220.0;
const MARGIN_LEFT: f64 = 70.0;
const MARGIN_RIGHT: f64 = 20.0;
const MARGIN_TOP: f64 = 30.0;
const GAP: f64 = 40.0;
const COLORS: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf",
];

#[derive(Debug, Clone, Copy)]
pub struct PanelFrame {
    pub left: f64,
    pub top: f64,
    pub width: f64,
    pub height: f64,
}

struct Axis {
    t0: f64,
    t1: f64,
    y0: f64,
    y1: f64,
    frame: PanelFrame,
}

impl Axis {
    fn new(t0: f64, t1: f64, ys: impl Iterator<Item = f64>, frame: PanelFrame) -> Self {
        let (mut lo, mut hi) = ys.filter(|v| v.is_finite()).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
            (lo.min(v), hi.max(v))
        });
        if !lo.is_finite() {
            (lo, hi) = (0.0, 1.0);
        }
        if hi - lo <= 1e-12 * (1.0 + lo.abs().max(hi.abs())) {
            lo -= 0.5;
            hi += 0.5;
        }
        let t1 = if t1 > t0 { t1 } else { t0 + 1.0 };
        Self { t0, t1, y0: lo, y1: hi, frame }
    }

    fn px(&self, t: f64) -> f64 {
        self.frame.left + (t - self.t0) / (self.t1 - self.t0) * self.frame.width
    }

    fn py(&self, y: f64) -> f64 {
        let y = if y.is_finite() { y } else { self.y0 };
        self.frame.top + self.frame.height - (y - self.y0) / (self.y1 - self.y0) * self.frame.height
    }
}

pub fn panel_frame(index: usize) -> PanelFrame {
    PanelFrame {
        left: MARGIN_LEFT,
        top: MARGIN_TOP + index as f64 * (PANEL_HEIGHT + GAP),
        width: WIDTH - MARGIN_LEFT - MARGIN_RIGHT,
        height: PANEL_HEIGHT,
    }
}

fn polyline(out: &mut String, axis: &Axis, ts: &[f64], ys: &[f64], color: &str, dashed: bool, label: &str) {
    let mut pts = String::new();
    for (t, y) in ts.iter().zip(ys) {
        if !pts.is_empty() {
            pts.push(' ');
        }
        let _ = write!(pts, "{:.3},{:.3}", axis.px(*t), axis.py(*y));
    }
    let dash = if dashed { " stroke-dasharray=\"6 3\"" } else { "" };
    let _ = writeln!(
        out,
        "<polyline data-series=\"{label}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.2\"{dash} points=\"{pts}\"/>"
    );
}

fn frame_and_labels(out: &mut String, axis: &Axis, title: &str, log: bool) {
    let f = axis.frame;
    let _ = writeln!(
        out,
        "<rect x=\"{:.3}\" y=\"{:.3}\" width=\"{:.3}\" height=\"{:.3}\" fill=\"none\" stroke=\"#444\"/>",
        f.left, f.top, f.width, f.height
    );
    let _ = writeln!(
        out,
        "<text x=\"{:.3}\" y=\"{:.3}\" font-size=\"13\">{title}</text>",
        f.left,
        f.top - 8.0
    );
    let fmt = |v: f64| if log { format!("1e{v:.0}") } else { format!("{v:.3e}") };
    let _ = writeln!(
        out,
        "<text x=\"{:.3}\" y=\"{:.3}\" font-size=\"10\" text-anchor=\"end\">{}</text>",
        f.left - 4.0,
        f.top + 10.0,
        fmt(axis.y1)
    );
    let _ = writeln!(
        out,
        "<text x=\"{:.3}\" y=\"{:.3}\" font-size=\"10\" text-anchor=\"end\">{}</text>",
        f.left - 4.0,
        f.top + f.height,
        fmt(axis.y0)
    );
    let _ = writeln!(
        out,
        "<text x=\"{:.3}\" y=\"{:.3}\" font-size=\"10\">t = {:.3}</text>",
        f.left,
        f.top + f.height + 14.0,
        axis.t0
    );
    let _ = writeln!(
        out,
        "<text x=\"{:.3}\" y=\"{:.3}\" font-size=\"10\" text-anchor=\"end\">t = {:.3}</text>",
        f.left + f.width,
        f.top + f.height + 14.0,
        axis.t1
    );
}

fn log_clip(v: f64) -> f64 {
    v.max(LOG_FLOOR).log10()
}

/// Renders the four-panel chart.
pub fn render_svg(result: &SimulationResult) -> String {
    let trace = &result.trace;
    let ts: Vec<f64> = trace.iter().map(|r| r.t).collect();
    let (t0, t1) = (ts.first().copied().unwrap_or(0.0), ts.last().copied().unwrap_or(1.0));
    let n = trace.first().map_or(0, |r| r.x.len());
    let height = MARGIN_TOP + 4.0 * PANEL_HEIGHT + 3.0 * GAP + 30.0;

    let mut out = String::new();
    let _ = writeln!(
        out,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH:.0}\" height=\"{height:.0}\" viewBox=\"0 0 {WIDTH:.0} {height:.0}\" font-family=\"sans-serif\">"
    );
    let _ = writeln!(out, "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>");

    // states
    let _ = writeln!(out, "<g id=\"panel-states\">");
    let axis = Axis::new(
        t0,
        t1,
        trace.iter().flat_map(|r| r.x.iter().chain(&r.x_hat).copied()),
        panel_frame(0),
    );
    frame_and_labels(&mut out, &axis, "x (solid) and x_hat (dashed)", false);
    for k in 0..n {
        let c = COLORS[k % COLORS.len()];
        let xs: Vec<f64> = trace.iter().map(|r| r.x[k]).collect();
        let xh: Vec<f64> = trace.iter().map(|r| r.x_hat[k]).collect();
        polyline(&mut out, &axis, &ts, &xs, c, false, &format!("x{}", k + 1));
        polyline(&mut out, &axis, &ts, &xh, c, true, &format!("xhat{}", k + 1));
    }
    let _ = writeln!(out, "</g>");

    // error norm and V, log scale
    let _ = writeln!(out, "<g id=\"panel-lyapunov\">");
    let err: Vec<f64> = trace.iter().map(|r| log_clip(dot(&r.x_e, &r.x_e).sqrt())).collect();
    let v: Vec<f64> = trace.iter().map(|r| log_clip(r.v)).collect();
    let floor = LOG_FLOOR.log10();
    let axis = Axis::new(t0, t1, err.iter().chain(&v).copied().chain([floor]), panel_frame(1));
    frame_and_labels(&mut out, &axis, "|x_e| (solid) and V (dashed), log10", true);
    polyline(&mut out, &axis, &ts, &err, COLORS[0], false, "error-norm");
    polyline(&mut out, &axis, &ts, &v, COLORS[1], true, "V");
    let _ = writeln!(out, "</g>");

    // control input with events
    let _ = writeln!(out, "<g id=\"panel-input\">");
    let u: Vec<f64> = trace.iter().map(|r| r.u).collect();
    let axis = Axis::new(t0, t1, u.iter().copied(), panel_frame(2));
    frame_and_labels(&mut out, &axis, "u with switching events", false);
    for e in &result.events {
        let x = axis.px(e.t);
        let _ = writeln!(
            out,
            "<line class=\"event\" data-kind=\"{}\" x1=\"{x:.3}\" y1=\"{:.3}\" x2=\"{x:.3}\" y2=\"{:.3}\" stroke=\"#999\" stroke-width=\"0.6\"/>",
            e.kind.label(),
            axis.frame.top,
            axis.frame.top + axis.frame.height
        );
    }
    polyline(&mut out, &axis, &ts, &u, COLORS[0], false, "u");
    let _ = writeln!(out, "</g>");

    // gains
    let _ = writeln!(out, "<g id=\"panel-gains\">");
    let axis = Axis::new(t0, t1, trace.iter().flat_map(|r| r.gains.iter().copied()), panel_frame(3));
    frame_and_labels(&mut out, &axis, "adaptive gains", false);
    for (k, name) in result.gain_names.iter().enumerate() {
        let g: Vec<f64> = trace.iter().map(|r| r.gains[k]).collect();
        polyline(&mut out, &axis, &ts, &g, COLORS[k % COLORS.len()], false, name);
    }
    let _ = writeln!(out, "</g>");
    out.push_str("</svg>\n");
    out
}
