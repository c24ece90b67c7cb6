//! SVG plots of a sweep: MSE and FID against λ on a log axis, and MSE against FID.
//!
//! λ = 0 cannot sit on a log axis, so it is drawn one decade left of the smallest positive
//! λ with a break marker on the axis in between. The GAN baseline, which has no λ, is a
//! dashed horizontal line in the λ plots and a separately labelled point in the scatter.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::sweep::{SweepResult, SweepRow, SWEEP_CSV};

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 440.0;
const LEFT: f64 = 80.0;
const RIGHT: f64 = 30.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 60.0;

pub const MSE_PLOT: &str = "mse_vs_lambda.svg";
pub const FID_PLOT: &str = "fid_vs_lambda.svg";
pub const SCATTER_PLOT: &str = "mse_vs_fid.svg";

/// Position of λ values on the x axis, in "decade" units.
#[derive(Debug, Clone, Copy, PartialEq)]
struct LambdaAxis {
    /// log10 of the smallest positive λ, if any.
    min_log: Option<f64>,
    max_log: Option<f64>,
}

impl LambdaAxis {
    fn new(lambdas: &[f64]) -> Self {
        let logs: Vec<f64> = lambdas
            .iter()
            .filter(|&&l| l > 0.0)
            .map(|l| l.log10())
            .collect();
        Self {
            min_log: logs.iter().copied().reduce(f64::min),
            max_log: logs.iter().copied().reduce(f64::max),
        }
    }

    fn zero_pos(&self) -> f64 {
        self.min_log.map_or(0.0, |m| m.floor() - 1.0)
    }

    fn pos(&self, lambda: f64) -> f64 {
        if lambda > 0.0 {
            lambda.log10()
        } else {
            self.zero_pos()
        }
    }

    fn range(&self) -> (f64, f64) {
        let lo = self.zero_pos();
        let hi = self.max_log.map_or(lo, |m| m.ceil().max(lo + 1.0));
        (lo - 0.3, hi + 0.3)
    }
}

fn linear_range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let v: Vec<f64> = values.filter(|x| x.is_finite()).collect();
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min).min(0.0);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !hi.is_finite() || hi <= lo {
        return (lo, lo + 1.0);
    }
    (lo, hi + 0.08 * (hi - lo))
}

fn scale(v: f64, (lo, hi): (f64, f64), a: f64, b: f64) -> f64 {
    a + (v - lo) / (hi - lo) * (b - a)
}

struct Frame {
    x: (f64, f64),
    y: (f64, f64),
}

impl Frame {
    fn px(&self, x: f64) -> f64 {
        scale(x, self.x, LEFT, WIDTH - RIGHT)
    }

    fn py(&self, y: f64) -> f64 {
        scale(y, self.y, HEIGHT - BOTTOM, TOP)
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

fn fmt_num(v: f64) -> String {
    if v == 0.0 {
        "0".into()
    } else if v.abs() >= 1e4 || v.abs() < 1e-2 {
        format!("{v:.1e}")
    } else {
        format!("{}", (v * 1000.0).round() / 1000.0)
    }
}

fn lambda_label(l: f64) -> String {
    if l == 0.0 {
        return "0".into();
    }
    let e = l.log10();
    if (e - e.round()).abs() < 1e-9 {
        format!("1e{}", e.round() as i64)
    } else {
        format!("{l}")
    }
}

fn open_svg(title: &str, x_label: &str, y_label: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(
        s,
        r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="22" text-anchor="middle" font-size="15">{}</text>"#,
        WIDTH / 2.0,
        escape(title)
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        (LEFT + WIDTH - RIGHT) / 2.0,
        HEIGHT - 15.0,
        escape(x_label)
    );
    let _ = writeln!(
        s,
        r#"<text x="18" y="{y}" text-anchor="middle" transform="rotate(-90 18 {y})">{}</text>"#,
        escape(y_label),
        y = (TOP + HEIGHT - BOTTOM) / 2.0
    );
    s
}

fn axes(s: &mut String, f: &Frame) {
    let (x0, x1, y0, y1) = (LEFT, WIDTH - RIGHT, HEIGHT - BOTTOM, TOP);
    let _ = writeln!(
        s,
        r#"<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>"#
    );
    let _ = writeln!(
        s,
        r#"<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>"#
    );
    for i in 0..=5 {
        let v = f.y.0 + (f.y.1 - f.y.0) * i as f64 / 5.0;
        let y = f.py(v);
        let _ = writeln!(
            s,
            r#"<line x1="{}" y1="{y}" x2="{x0}" y2="{y}" stroke="black"/>"#,
            x0 - 5.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#,
            x0 - 8.0,
            y + 4.0,
            fmt_num(v)
        );
    }
}

fn linear_x_ticks(s: &mut String, f: &Frame) {
    let y0 = HEIGHT - BOTTOM;
    for i in 0..=5 {
        let v = f.x.0 + (f.x.1 - f.x.0) * i as f64 / 5.0;
        let x = f.px(v);
        let _ = writeln!(
            s,
            r#"<line x1="{x}" y1="{y0}" x2="{x}" y2="{}" stroke="black"/>"#,
            y0 + 5.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{x}" y="{}" text-anchor="middle">{}</text>"#,
            y0 + 20.0,
            fmt_num(v)
        );
    }
}

fn lambda_ticks(s: &mut String, f: &Frame, axis: &LambdaAxis, has_zero: bool) {
    let y0 = HEIGHT - BOTTOM;
    let tick = |s: &mut String, pos: f64, label: &str| {
        let x = f.px(pos);
        let _ = writeln!(
            s,
            r#"<line x1="{x}" y1="{y0}" x2="{x}" y2="{}" stroke="black"/>"#,
            y0 + 5.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{x}" y="{}" text-anchor="middle">{label}</text>"#,
            y0 + 20.0
        );
    };
    if has_zero {
        tick(s, axis.zero_pos(), "0");
    }
    if let (Some(lo), Some(hi)) = (axis.min_log, axis.max_log) {
        for e in (lo.floor() as i64)..=(hi.ceil() as i64) {
            tick(s, e as f64, &format!("1e{e}"));
        }
        if has_zero {
            // axis break between the λ = 0 slot and the first decade
            let x = f.px(axis.zero_pos() + 0.5);
            let _ = writeln!(
                s,
                r#"<rect x="{}" y="{}" width="8" height="8" fill="white"/>"#,
                x - 4.0,
                y0 - 4.0
            );
            for dx in [-4.0, 2.0] {
                let _ = writeln!(
                    s,
                    r#"<line class="axis-break" x1="{}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#,
                    x + dx - 2.0,
                    y0 + 5.0,
                    x + dx + 2.0,
                    y0 - 5.0
                );
            }
        }
    }
}

fn marker(s: &mut String, x: f64, y: f64, color: &str) {
    let _ = writeln!(s, r#"<circle cx="{x}" cy="{y}" r="4" fill="{color}"/>"#);
}

fn lambda_plot(
    result: &SweepResult,
    metric: fn(&SweepRow) -> Option<f64>,
    title: &str,
    y_label: &str,
) -> String {
    let rows: Vec<(f64, f64)> = result
        .lambda_rows()
        .into_iter()
        .filter_map(|r| Some((r.lambda?, metric(r)?)))
        .collect();
    let gan = result.baseline("gan").and_then(metric);
    let axis = LambdaAxis::new(&rows.iter().map(|r| r.0).collect::<Vec<_>>());
    let frame = Frame {
        x: axis.range(),
        y: linear_range(rows.iter().map(|r| r.1).chain(gan)),
    };
    let mut s = open_svg(title, "λ", y_label);
    axes(&mut s, &frame);
    lambda_ticks(&mut s, &frame, &axis, rows.iter().any(|r| r.0 == 0.0));
    if let Some(g) = gan {
        let y = frame.py(g);
        let _ = writeln!(
            s,
            r#"<line x1="{LEFT}" y1="{y}" x2="{}" y2="{y}" stroke="gray" stroke-dasharray="6 4"/>"#,
            WIDTH - RIGHT
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="end" fill="gray">GAN</text>"#,
            WIDTH - RIGHT - 4.0,
            y - 5.0
        );
    }
    if rows.len() > 1 {
        let pts: Vec<String> = rows
            .iter()
            .map(|&(l, v)| format!("{},{}", frame.px(axis.pos(l)), frame.py(v)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="steelblue"/>"#,
            pts.join(" ")
        );
    }
    for &(l, v) in &rows {
        marker(&mut s, frame.px(axis.pos(l)), frame.py(v), "steelblue");
    }
    s.push_str("</svg>\n");
    s
}

fn scatter_plot(result: &SweepResult) -> String {
    let mut pts: Vec<(String, f64, f64, &str)> = result
        .lambda_rows()
        .into_iter()
        .filter_map(|r| {
            Some((
                format!("λ={}", lambda_label(r.lambda?)),
                r.median_test_fid?,
                r.median_test_mse?,
                "steelblue",
            ))
        })
        .collect();
    if let Some(g) = result.baseline("gan") {
        if let (Some(fid), Some(mse)) = (g.median_test_fid, g.median_test_mse) {
            pts.push(("GAN".into(), fid, mse, "gray"));
        }
    }
    let frame = Frame {
        x: linear_range(pts.iter().map(|p| p.1)),
        y: linear_range(pts.iter().map(|p| p.2)),
    };
    let mut s = open_svg("MSE vs FID", "FID", "constraint MSE");
    axes(&mut s, &frame);
    linear_x_ticks(&mut s, &frame);
    for (label, fid, mse, color) in &pts {
        let (x, y) = (frame.px(*fid), frame.py(*mse));
        marker(&mut s, x, y, color);
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}">{}</text>"#,
            x + 6.0,
            y - 6.0,
            escape(label)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Writes the three plots and the rows, sorted by λ with the GAN baseline first, as CSV.
pub fn emit_plots(result: &SweepResult, out_dir: &Path) -> Result<Vec<PathBuf>> {
    if result.rows.is_empty() {
        return Err(Error::invalid(
            "nothing to plot: the sweep result has no rows",
        ));
    }
    std::fs::create_dir_all(out_dir)?;
    let mut sorted = SweepResult {
        rows: result
            .rows
            .iter()
            .filter(|r| r.lambda.is_none())
            .cloned()
            .collect(),
    };
    sorted
        .rows
        .extend(result.lambda_rows().into_iter().cloned());
    let files = [
        (
            MSE_PLOT,
            lambda_plot(
                &sorted,
                |r| r.median_test_mse,
                "Constraint MSE vs λ",
                "median test constraint MSE",
            ),
        ),
        (
            FID_PLOT,
            lambda_plot(
                &sorted,
                |r| r.median_test_fid,
                "FID vs λ",
                "median test FID",
            ),
        ),
        (SCATTER_PLOT, scatter_plot(&sorted)),
    ];
    let mut written = Vec::new();
    for (name, svg) in files {
        let path = out_dir.join(name);
        std::fs::write(&path, svg)?;
        written.push(path);
    }
    let csv = out_dir.join(SWEEP_CSV);
    sorted.write_csv(&csv)?;
    written.push(csv);
    Ok(written)
}
