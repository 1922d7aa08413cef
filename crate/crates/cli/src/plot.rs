//! Static SVG line charts of capacity trajectories.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use mfcap::sim::TrajectoryLog;

use crate::error::CliError;

/// Agents drawn per edge; larger populations are thinned evenly.
pub const MAX_PLOTTED_AGENTS: usize = 200;

const WIDTH: f64 = 960.0;
const HEIGHT: f64 = 600.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 60.0;

const PALETTE: [&str; 10] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
];

/// Evenly spaced agent indices, at most `MAX_PLOTTED_AGENTS` of them.
pub fn plotted_agents(p: usize) -> Vec<usize> {
    if p <= MAX_PLOTTED_AGENTS {
        (0..p).collect()
    } else {
        (0..MAX_PLOTTED_AGENTS).map(|i| i * p / MAX_PLOTTED_AGENTS).collect()
    }
}

fn nice_ticks(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    let span = (hi - lo).max(1e-12);
    let raw = span / count as f64;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 5.0, 10.0].iter().map(|m| m * mag).find(|s| span / s <= count as f64).unwrap_or(10.0 * mag);
    let mut t = (lo / step).ceil() * step;
    let mut out = Vec::new();
    while t <= hi + 1e-9 * step {
        out.push(t);
        t += step;
    }
    out
}

/// Renders one polyline per plotted agent per edge.
pub fn render_svg(log: &TrajectoryLog, title: &str) -> Result<String, CliError> {
    if log.times.is_empty() || log.capacities.is_empty() {
        return Err(CliError::validation("EmptyLog", "cannot plot a log without samples"));
    }
    let agents = plotted_agents(log.capacities[0].nrows());
    let m = log.capacities[0].ncols();
    let (t0, t1) = (log.times[0], *log.times.last().unwrap());
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for caps in &log.capacities {
        for &k in &agents {
            for e in 0..m {
                lo = lo.min(caps[(k, e)]);
                hi = hi.max(caps[(k, e)]);
            }
        }
    }
    if !(lo.is_finite() && hi.is_finite()) {
        return Err(CliError::validation("NonFiniteLog", "log contains non-finite capacities"));
    }
    if hi - lo < 1e-9 {
        lo -= 1.0;
        hi += 1.0;
    }
    let pw = WIDTH - LEFT - RIGHT;
    let ph = HEIGHT - TOP - BOTTOM;
    let tspan = if t1 > t0 { t1 - t0 } else { 1.0 };
    let sx = |t: f64| LEFT + (t - t0) / tspan * pw;
    let sy = |v: f64| TOP + (hi - v) / (hi - lo) * ph;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{}</text>"#, LEFT + pw / 2.0, escape(title));
    for t in nice_ticks(t0, t0 + tspan, 8) {
        let x = sx(t);
        let _ = writeln!(s, r##"<line x1="{x:.2}" y1="{TOP}" x2="{x:.2}" y2="{:.2}" stroke="#e5e5e5"/>"##, TOP + ph);
        let _ = writeln!(s, r#"<text x="{x:.2}" y="{:.2}" text-anchor="middle">{}</text>"#, TOP + ph + 18.0, fmt_tick(t));
    }
    for v in nice_ticks(lo, hi, 6) {
        let y = sy(v);
        let _ = writeln!(s, r##"<line x1="{LEFT}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="#e5e5e5"/>"##, LEFT + pw);
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"#, LEFT - 6.0, y + 4.0, fmt_tick(v));
    }
    let _ = writeln!(s, r#"<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">time</text>"#, LEFT + pw / 2.0, HEIGHT - 15.0);
    let _ = writeln!(
        s,
        r#"<text x="18" y="{0}" text-anchor="middle" transform="rotate(-90 18 {0})">capacity</text>"#,
        TOP + ph / 2.0
    );

    for e in 0..m {
        let color = PALETTE[e % PALETTE.len()];
        let _ = writeln!(s, r#"<g fill="none" stroke="{color}" stroke-width="0.6" stroke-opacity="0.45">"#);
        for &k in &agents {
            s.push_str("<polyline points=\"");
            for (i, (t, caps)) in log.times.iter().zip(&log.capacities).enumerate() {
                if i > 0 {
                    s.push(' ');
                }
                let _ = write!(s, "{:.2},{:.2}", sx(*t), sy(caps[(k, e)]));
            }
            s.push_str("\"/>\n");
        }
        s.push_str("</g>\n");
        let ly = TOP + 14.0 + 18.0 * e as f64;
        let lx = LEFT + pw + 16.0;
        let _ = writeln!(s, r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="3"/>"#, lx + 20.0);
        let label = log.edge_labels.get(e).cloned().unwrap_or_else(|| format!("e{}", e + 1));
        let _ = writeln!(s, r#"<text x="{}" y="{}">{}</text>"#, lx + 26.0, ly + 4.0, escape(&label));
    }
    s.push_str("</svg>\n");
    Ok(s)
}

fn fmt_tick(v: f64) -> String {
    let r = (v * 1e6).round() / 1e6;
    if r == r.trunc() {
        format!("{}", r as i64)
    } else {
        format!("{r}")
    }
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Writes `capacities.svg` into `dir`.
pub fn emit_plots(log: &TrajectoryLog, dir: &Path, title: &str) -> Result<PathBuf, CliError> {
    let svg = render_svg(log, title)?;
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let path = dir.join("capacities.svg");
    std::fs::write(&path, svg).map_err(|e| CliError::io(&path, e))?;
    Ok(path)
}
