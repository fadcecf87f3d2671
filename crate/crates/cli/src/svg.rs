//! Static SVG rendering. Output depends only on the inputs, with every
//! coordinate printed to two decimals.

use std::fmt::Write;

use meterflow::estimators::{OccupancyTrajectory, PairHistogram};

const WIDTH: f64 = 800.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 50.0;

struct Frame {
    x: (f64, f64),
    y: (f64, f64),
}

impl Frame {
    fn new(x: (f64, f64), y: (f64, f64)) -> Self {
        let widen = |(lo, hi): (f64, f64)| if hi > lo { (lo, hi) } else { (lo - 0.5, lo + 0.5) };
        Self { x: widen(x), y: widen(y) }
    }

    fn px(&self, x: f64) -> f64 {
        MARGIN + (x - self.x.0) / (self.x.1 - self.x.0) * (WIDTH - 2.0 * MARGIN)
    }

    fn py(&self, y: f64) -> f64 {
        HEIGHT - MARGIN - (y - self.y.0) / (self.y.1 - self.y.0) * (HEIGHT - 2.0 * MARGIN)
    }
}

fn header(out: &mut String, title: &str) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(out, r#"<text x="{:.2}" y="20" text-anchor="middle">{}</text>"#, WIDTH / 2.0, escape(title));
}

fn axes(out: &mut String, frame: &Frame, x_label: &str, y_label: &str) {
    let (x0, x1, y0, y1) = (frame.px(frame.x.0), frame.px(frame.x.1), frame.py(frame.y.0), frame.py(frame.y.1));
    let _ = writeln!(out, r#"<path d="M{x0:.2},{y1:.2} L{x0:.2},{y0:.2} L{x1:.2},{y0:.2}" fill="none" stroke="black"/>"#);
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let xv = frame.x.0 + f * (frame.x.1 - frame.x.0);
        let yv = frame.y.0 + f * (frame.y.1 - frame.y.0);
        let _ = writeln!(out, r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{xv:.1}</text>"#, frame.px(xv), y0 + 16.0);
        let _ = writeln!(out, r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{yv:.1}</text>"#, x0 - 6.0, frame.py(yv) + 4.0);
    }
    let _ = writeln!(out, r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#, WIDTH / 2.0, HEIGHT - 10.0, escape(x_label));
    let _ = writeln!(
        out,
        r#"<text x="14" y="{:.2}" text-anchor="middle" transform="rotate(-90 14 {:.2})">{}</text>"#,
        HEIGHT / 2.0,
        HEIGHT / 2.0,
        escape(y_label)
    );
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Box-stem plot of the occupancy quantiles, with the truth as a step line.
pub fn occupancy_plot(traj: &OccupancyTrajectory, truth: Option<&[(f64, f64)]>, capacity: usize) -> String {
    let mut times: Vec<f64> = traj.eval_times.clone();
    if let Some(t) = truth {
        times.extend(t.iter().map(|p| p.0));
    }
    let lo = times.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = times.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let top = traj
        .quantiles
        .iter()
        .map(|q| q[4])
        .chain(truth.into_iter().flatten().map(|p| p.1))
        .fold(capacity as f64, f64::max);
    let frame = Frame::new((lo, hi), (0.0, top));
    let mut out = String::new();
    header(&mut out, "Occupied spaces");
    axes(&mut out, &frame, "minutes", "cars");
    let half = (0.4 * (WIDTH - 2.0 * MARGIN) / traj.eval_times.len().max(1) as f64).clamp(1.0, 6.0);
    for (t, q) in traj.eval_times.iter().zip(&traj.quantiles) {
        let x = frame.px(*t);
        let _ = writeln!(
            out,
            r#"<line x1="{x:.2}" y1="{:.2}" x2="{x:.2}" y2="{:.2}" stroke="steelblue"/>"#,
            frame.py(q[0]),
            frame.py(q[4])
        );
        let _ = writeln!(
            out,
            r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="lightsteelblue" stroke="steelblue"/>"#,
            x - half,
            frame.py(q[3]),
            2.0 * half,
            (frame.py(q[1]) - frame.py(q[3])).max(0.5)
        );
        let _ = writeln!(
            out,
            r#"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="navy" stroke-width="2"/>"#,
            x - half,
            frame.py(q[2]),
            x + half,
            frame.py(q[2])
        );
    }
    if let Some(points) = truth.filter(|p| !p.is_empty()) {
        let mut d = format!("M{:.2},{:.2}", frame.px(points[0].0), frame.py(points[0].1));
        for pair in points.windows(2) {
            let _ = write!(d, " L{:.2},{:.2} L{:.2},{:.2}", frame.px(pair[1].0), frame.py(pair[0].1), frame.px(pair[1].0), frame.py(pair[1].1));
        }
        let _ = writeln!(out, r#"<path d="{d}" fill="none" stroke="firebrick" stroke-width="1.5"/>"#);
    }
    out.push_str("</svg>\n");
    out
}

/// Two-parameter histogram as a grey-scale heat map.
pub fn pair_plot(hist: &PairHistogram) -> String {
    let frame = Frame::new((hist.x_grid.lo, hist.x_grid.hi), (hist.y_grid.lo, hist.y_grid.hi));
    let mut out = String::new();
    header(&mut out, &format!("{} vs {}", hist.y, hist.x));
    let peak = hist.counts.iter().flatten().copied().max().unwrap_or(0).max(1) as f64;
    let dx = (frame.px(frame.x.1) - frame.px(frame.x.0)) / hist.x_grid.bins as f64;
    let dy = (frame.py(frame.y.0) - frame.py(frame.y.1)) / hist.y_grid.bins as f64;
    for (i, row) in hist.counts.iter().enumerate() {
        for (j, &count) in row.iter().enumerate() {
            if count == 0 {
                continue;
            }
            let shade = (255.0 * (1.0 - count as f64 / peak)).round() as u8;
            let _ = writeln!(
                out,
                r#"<rect x="{:.2}" y="{:.2}" width="{dx:.2}" height="{dy:.2}" fill="rgb({shade},{shade},{shade})"/>"#,
                frame.px(frame.x.0) + i as f64 * dx,
                frame.py(frame.y.0) - (j + 1) as f64 * dy,
            );
        }
    }
    axes(&mut out, &frame, hist.x, hist.y);
    out.push_str("</svg>\n");
    out
}
