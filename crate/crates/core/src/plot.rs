//! Deterministic SVG renderings of sweep results: coefficient scatter,
//! residual-norm scatter, and residual time traces. Everything is emitted
//! with plain string formatting so identical inputs produce identical
//! bytes, and nothing here computes statistics beyond per-level means.

use crate::error::{Error, Result};
use crate::signals::Signal;
use crate::train::Criterion;
use crate::analysis::SweepCsvRow;
use std::fmt::Write as _;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const MARGIN_LEFT: f64 = 72.0;
const MARGIN_RIGHT: f64 = 24.0;
const MARGIN_TOP: f64 = 24.0;
const MARGIN_BOTTOM: f64 = 56.0;

const LS_COLOR: &str = "#1f77b4";
const IV_COLOR: &str = "#d62728";
const REFERENCE_COLOR: &str = "#666666";

/// Linear data-to-pixel mapping for the plot area.
struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn new(xs: &[f64], ys: &[f64]) -> Frame {
        let (x0, x1) = padded_span(xs);
        let (y0, y1) = padded_span(ys);
        Frame { x0, x1, y0, y1 }
    }

    fn sx(&self, x: f64) -> f64 {
        MARGIN_LEFT + (x - self.x0) / (self.x1 - self.x0) * (WIDTH - MARGIN_LEFT - MARGIN_RIGHT)
    }

    fn sy(&self, y: f64) -> f64 {
        HEIGHT - MARGIN_BOTTOM
            - (y - self.y0) / (self.y1 - self.y0) * (HEIGHT - MARGIN_TOP - MARGIN_BOTTOM)
    }
}

fn padded_span(values: &[f64]) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in values {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    // degenerate spans still need a nonzero extent to map through
    let pad = if hi > lo { 0.05 * (hi - lo) } else { 0.5 * hi.abs().max(1e-12) };
    (lo - pad, hi + pad)
}

fn fmt_coord(v: f64) -> String {
    format!("{:.2}", v)
}

fn fmt_tick(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    let a = v.abs();
    if (1e-3..1e4).contains(&a) {
        let s = format!("{v:.4}");
        let s = s.trim_end_matches('0').trim_end_matches('.');
        s.to_string()
    } else {
        format!("{v:.2e}")
    }
}

struct SvgCanvas {
    body: String,
}

impl SvgCanvas {
    fn new() -> SvgCanvas {
        let mut body = String::new();
        let _ = writeln!(
            body,
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" \
             viewBox=\"0 0 {WIDTH} {HEIGHT}\" font-family=\"sans-serif\" font-size=\"12\">"
        );
        let _ = writeln!(body, "<rect width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>");
        SvgCanvas { body }
    }

    fn axes(&mut self, frame: &Frame, x_label: &str, y_label: &str, log_y: bool) {
        let left = MARGIN_LEFT;
        let right = WIDTH - MARGIN_RIGHT;
        let top = MARGIN_TOP;
        let bottom = HEIGHT - MARGIN_BOTTOM;
        let _ = writeln!(
            self.body,
            "<rect x=\"{left}\" y=\"{top}\" width=\"{}\" height=\"{}\" fill=\"none\" \
             stroke=\"#333333\"/>",
            right - left,
            bottom - top
        );
        for i in 0..=4 {
            let t = i as f64 / 4.0;
            let xv = frame.x0 + t * (frame.x1 - frame.x0);
            let yv = frame.y0 + t * (frame.y1 - frame.y0);
            let px = fmt_coord(frame.sx(xv));
            let py = fmt_coord(frame.sy(yv));
            let _ = writeln!(
                self.body,
                "<line x1=\"{px}\" y1=\"{bottom}\" x2=\"{px}\" y2=\"{}\" stroke=\"#333333\"/>",
                bottom + 5.0
            );
            let _ = writeln!(
                self.body,
                "<text x=\"{px}\" y=\"{}\" text-anchor=\"middle\">{}</text>",
                bottom + 20.0,
                fmt_tick(xv)
            );
            let _ = writeln!(
                self.body,
                "<line x1=\"{}\" y1=\"{py}\" x2=\"{left}\" y2=\"{py}\" stroke=\"#333333\"/>",
                left - 5.0
            );
            let label = if log_y { format!("1e{}", fmt_tick(yv)) } else { fmt_tick(yv) };
            let _ = writeln!(
                self.body,
                "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{label}</text>",
                left - 8.0,
                frame.sy(yv) + 4.0
            );
        }
        let _ = writeln!(
            self.body,
            "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{x_label}</text>",
            (left + right) / 2.0,
            HEIGHT - 12.0
        );
        let _ = writeln!(
            self.body,
            "<text x=\"16\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {})\">\
             {y_label}</text>",
            (top + bottom) / 2.0,
            (top + bottom) / 2.0
        );
    }

    fn circle(&mut self, x: f64, y: f64, color: &str) {
        let _ = writeln!(
            self.body,
            "<circle cx=\"{}\" cy=\"{}\" r=\"3\" fill=\"{color}\" fill-opacity=\"0.55\"/>",
            fmt_coord(x),
            fmt_coord(y)
        );
    }

    fn cross(&mut self, x: f64, y: f64, color: &str) {
        let (x, y) = (fmt_coord(x), fmt_coord(y));
        let _ = writeln!(
            self.body,
            "<path d=\"M {x} {y} m -3 -3 l 6 6 m 0 -6 l -6 6\" stroke=\"{color}\" \
             stroke-width=\"1.5\" fill=\"none\"/>"
        );
    }

    fn polyline(&mut self, pts: &[(f64, f64)], color: &str, dashed: bool) {
        if pts.is_empty() {
            return;
        }
        let coords: Vec<String> =
            pts.iter().map(|(x, y)| format!("{},{}", fmt_coord(*x), fmt_coord(*y))).collect();
        let dash = if dashed { " stroke-dasharray=\"6 4\"" } else { "" };
        let _ = writeln!(
            self.body,
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"{dash}/>",
            coords.join(" ")
        );
    }

    fn legend(&mut self, entries: &[(&str, &str)]) {
        for (i, (label, color)) in entries.iter().enumerate() {
            let y = MARGIN_TOP + 16.0 + 18.0 * i as f64;
            let x = WIDTH - MARGIN_RIGHT - 150.0;
            let _ = writeln!(
                self.body,
                "<line x1=\"{x}\" y1=\"{y}\" x2=\"{}\" y2=\"{y}\" stroke=\"{color}\" \
                 stroke-width=\"2\"/>",
                x + 22.0
            );
            let _ = writeln!(
                self.body,
                "<text x=\"{}\" y=\"{}\">{label}</text>",
                x + 28.0,
                y + 4.0
            );
        }
    }

    fn finish(mut self) -> String {
        self.body.push_str("</svg>\n");
        self.body
    }
}

/// Successful rows with a finite value picked by `value`, as (sigma, value).
fn finite_points(rows: &[SweepCsvRow], criterion: Criterion, value: fn(&SweepCsvRow) -> f64) -> Vec<(f64, f64)> {
    rows.iter()
        .filter(|r| r.criterion == criterion && value(r).is_finite() && r.sigma_nu.is_finite())
        .map(|r| (r.sigma_nu, value(r)))
        .collect()
}

/// Mean of the values at each distinct noise level, in ascending level
/// order. Exposed for tests and reused by both scatter plots.
pub fn mean_by_sigma(points: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let mut sorted = points.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut out: Vec<(f64, f64, usize)> = Vec::new();
    for (s, v) in sorted {
        match out.last_mut() {
            Some((ls, sum, n)) if *ls == s => {
                *sum += v;
                *n += 1;
            }
            _ => out.push((s, v, 1)),
        }
    }
    out.into_iter().map(|(s, sum, n)| (s, sum / n as f64)).collect()
}

fn scatter_svg(
    rows: &[SweepCsvRow],
    value: fn(&SweepCsvRow) -> f64,
    y_label: &str,
    log_y: bool,
    reference: Option<(&str, f64)>,
) -> Result<String> {
    let transform = |v: f64| if log_y { v.log10() } else { v };
    let mut ls = finite_points(rows, Criterion::LeastSquares, value);
    let mut iv = finite_points(rows, Criterion::InstrumentalVariable, value);
    for pts in [&mut ls, &mut iv] {
        for p in pts.iter_mut() {
            p.1 = transform(p.1);
        }
        pts.retain(|p| p.1.is_finite());
    }
    if ls.is_empty() && iv.is_empty() {
        return Err(Error::EmptyResults("no plottable rows".into()));
    }
    let reference = reference.map(|(label, v)| (label, transform(v))).filter(|r| r.1.is_finite());
    let xs: Vec<f64> = ls.iter().chain(&iv).map(|p| p.0).collect();
    let mut ys: Vec<f64> = ls.iter().chain(&iv).map(|p| p.1).collect();
    if let Some((_, r)) = reference {
        ys.push(r);
    }
    let frame = Frame::new(&xs, &ys);

    let mut svg = SvgCanvas::new();
    svg.axes(&frame, "noise level", y_label, log_y);
    if let Some((label, r)) = reference {
        let y = frame.sy(r);
        svg.polyline(
            &[(MARGIN_LEFT, y), (WIDTH - MARGIN_RIGHT, y)],
            REFERENCE_COLOR,
            true,
        );
        let _ = writeln!(
            svg.body,
            "<text x=\"{}\" y=\"{}\" fill=\"{REFERENCE_COLOR}\">{label}</text>",
            MARGIN_LEFT + 6.0,
            y - 6.0
        );
    }
    for (s, v) in &ls {
        svg.circle(frame.sx(*s), frame.sy(*v), LS_COLOR);
    }
    for (s, v) in &iv {
        svg.cross(frame.sx(*s), frame.sy(*v), IV_COLOR);
    }
    let ls_mean: Vec<(f64, f64)> =
        mean_by_sigma(&ls).into_iter().map(|(s, v)| (frame.sx(s), frame.sy(v))).collect();
    let iv_mean: Vec<(f64, f64)> =
        mean_by_sigma(&iv).into_iter().map(|(s, v)| (frame.sx(s), frame.sy(v))).collect();
    svg.polyline(&ls_mean, LS_COLOR, false);
    svg.polyline(&iv_mean, IV_COLOR, false);
    svg.legend(&[("least squares", LS_COLOR), ("instrumental variables", IV_COLOR)]);
    Ok(svg.finish())
}

/// Scatter of the monitored first-layer coefficient against the noise
/// level, with per-criterion means and a dashed line at the coefficient's
/// pretrained value. Failed (NaN) rows are skipped.
pub fn coefficient_scatter_svg(rows: &[SweepCsvRow], pretrained_value: f64) -> Result<String> {
    scatter_svg(
        rows,
        |r| r.monitored_coeff,
        "monitored coefficient",
        false,
        Some(("pretrained value", pretrained_value)),
    )
}

/// Scatter of the noiseless-data residual norms against the noise level on
/// a log axis, with per-criterion means and a dashed line at the pretrained
/// parameters' own residual (the attainable floor).
pub fn residual_norm_svg(rows: &[SweepCsvRow], noiseless_floor: f64) -> Result<String> {
    scatter_svg(
        rows,
        |r| r.residual_norm,
        "log10 residual norm",
        true,
        Some(("pretraining floor", noiseless_floor)),
    )
}

/// Overlaid residual time traces, one polyline per labeled signal.
pub fn residual_trace_svg(traces: &[(String, Signal)]) -> Result<String> {
    let traces: Vec<&(String, Signal)> = traces.iter().filter(|(_, s)| s.len() > 0).collect();
    if traces.is_empty() {
        return Err(Error::EmptyResults("no traces to draw".into()));
    }
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (_, s) in &traces {
        let ts = s.ts();
        xs.extend((0..s.len()).map(|k| k as f64 * ts));
        ys.extend_from_slice(s.values());
    }
    let frame = Frame::new(&xs, &ys);
    let palette = [LS_COLOR, IV_COLOR, "#2ca02c", "#9467bd", "#8c564b", "#e377c2"];
    let mut svg = SvgCanvas::new();
    svg.axes(&frame, "time (s)", "normalized residual", false);
    let mut legend: Vec<(&str, &str)> = Vec::new();
    for (i, (label, s)) in traces.iter().enumerate() {
        let color = palette[i % palette.len()];
        let ts = s.ts();
        let pts: Vec<(f64, f64)> = s
            .values()
            .iter()
            .enumerate()
            .map(|(k, v)| (frame.sx(k as f64 * ts), frame.sy(*v)))
            .collect();
        svg.polyline(&pts, color, false);
        legend.push((label.as_str(), color));
    }
    svg.legend(&legend);
    Ok(svg.finish())
}
