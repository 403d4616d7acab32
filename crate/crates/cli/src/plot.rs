//! Four-panel SVG line charts drawn from a sweep table.
//!
//! Panels: re-identification rate vs `lambda_cfg`, quality vs `lambda_cfg`,
//! mean identity distance vs `lambda_cfg` (one series per `lambda_ipa` and
//! solver), and re-identification rate vs `lambda_ipa` (one series per
//! `lambda_cfg` and solver).

use std::collections::BTreeMap;
use std::fmt::Write;

use crate::error::CliResult;
use crate::table::Table;

const PANEL_W: f64 = 440.0;
const PANEL_H: f64 = 320.0;
const MARGIN: f64 = 56.0;
const COLORS: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

#[derive(Debug, Clone, Copy)]
struct Row {
    cfg: f64,
    ipa: f64,
    reid: f64,
    quality: f64,
    distance: f64,
}

type Series = BTreeMap<String, Vec<(f64, f64)>>;

fn rows(t: &Table) -> CliResult<Vec<(String, Row)>> {
    let (c, i, s) = (t.require("lambda_cfg")?, t.require("lambda_ipa")?, t.require("solver")?);
    let (r, q, d) = (t.require("reid_rate")?, t.require("quality")?, t.require("mean_identity_distance")?);
    (0..t.rows.len())
        .map(|k| {
            Ok((
                t.rows[k][s].clone(),
                Row {
                    cfg: t.f64_at(k, c)?,
                    ipa: t.f64_at(k, i)?,
                    reid: t.f64_at(k, r)?,
                    quality: t.f64_at(k, q)?,
                    distance: t.f64_at(k, d)?,
                },
            ))
        })
        .collect()
}

fn group(rows: &[(String, Row)], key: impl Fn(&str, &Row) -> String, xy: impl Fn(&Row) -> (f64, f64)) -> Series {
    let mut out = Series::new();
    for (solver, r) in rows {
        out.entry(key(solver, r)).or_default().push(xy(r));
    }
    for pts in out.values_mut() {
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    }
    out
}

fn extent(vals: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        let pad = if lo.abs() > 1e-12 { lo.abs() * 0.1 } else { 0.5 };
        return (lo - pad, hi + pad);
    }
    (lo, hi)
}

struct Axes {
    title: &'static str,
    xlabel: &'static str,
    ylabel: &'static str,
    fixed_y: Option<(f64, f64)>,
}

fn panel(svg: &mut String, ox: f64, oy: f64, axes: &Axes, series: &Series) {
    let Axes { title, xlabel, ylabel, fixed_y } = axes;
    let (x0, x1) = extent(series.values().flatten().map(|p| p.0));
    let (y0, y1) = fixed_y.unwrap_or_else(|| extent(series.values().flatten().map(|p| p.1)));
    let (left, top) = (ox + MARGIN, oy + 30.0);
    let (w, h) = (PANEL_W - MARGIN - 16.0, PANEL_H - 30.0 - MARGIN);
    let px = |x: f64| left + (x - x0) / (x1 - x0) * w;
    let py = |y: f64| top + h - (y - y0) / (y1 - y0) * h;

    let _ = writeln!(svg, r#"<g class="panel">"#);
    let _ = writeln!(
        svg,
        r#"<text x="{:.2}" y="{:.2}" font-size="14" text-anchor="middle">{title}</text>"#,
        left + w / 2.0,
        oy + 18.0
    );
    let _ = writeln!(
        svg,
        r##"<rect x="{left:.2}" y="{top:.2}" width="{w:.2}" height="{h:.2}" fill="none" stroke="#444"/>"##
    );
    for k in 0..=4 {
        let f = k as f64 / 4.0;
        let (xv, yv) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
        let _ = writeln!(
            svg,
            r#"<text x="{:.2}" y="{:.2}" font-size="10" text-anchor="middle">{xv:.2}</text>"#,
            px(xv),
            top + h + 14.0
        );
        let _ = writeln!(
            svg,
            r#"<text x="{:.2}" y="{:.2}" font-size="10" text-anchor="end">{yv:.3}</text>"#,
            left - 4.0,
            py(yv) + 3.0
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{:.2}" y="{:.2}" font-size="11" text-anchor="middle">{xlabel}</text>"#,
        left + w / 2.0,
        top + h + 32.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="{:.2}" y="{:.2}" font-size="11" text-anchor="middle" transform="rotate(-90 {:.2} {:.2})">{ylabel}</text>"#,
        ox + 12.0,
        top + h / 2.0,
        ox + 12.0,
        top + h / 2.0
    );
    if series.is_empty() {
        let _ = writeln!(
            svg,
            r#"<text x="{:.2}" y="{:.2}" font-size="12" text-anchor="middle">no data</text>"#,
            left + w / 2.0,
            top + h / 2.0
        );
    }
    for (k, (name, pts)) in series.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let path: Vec<String> = pts.iter().map(|(x, y)| format!("{:.2},{:.2}", px(*x), py(*y))).collect();
        let _ =
            writeln!(svg, r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#, path.join(" "));
        for (x, y) in pts {
            let _ = writeln!(svg, r#"<circle cx="{:.2}" cy="{:.2}" r="2.5" fill="{color}"/>"#, px(*x), py(*y));
        }
        let ly = top + 12.0 + 13.0 * k as f64;
        let _ = writeln!(
            svg,
            r#"<text x="{:.2}" y="{ly:.2}" font-size="10" fill="{color}" text-anchor="end">{name}</text>"#,
            left + w - 4.0
        );
    }
    let _ = writeln!(svg, "</g>");
}

fn label(v: f64) -> String {
    format!("{v:.2}")
}

pub fn render(t: &Table) -> CliResult<String> {
    let rows = rows(t)?;
    let by_ipa = |s: &str, r: &Row| format!("ipa={} {s}", label(r.ipa));
    let by_cfg = |s: &str, r: &Row| format!("cfg={} {s}", label(r.cfg));
    let reid_cfg = group(&rows, by_ipa, |r| (r.cfg, r.reid));
    let qual_cfg = group(&rows, by_ipa, |r| (r.cfg, r.quality));
    let dist_cfg = group(&rows, by_ipa, |r| (r.cfg, r.distance));
    let reid_ipa = group(&rows, by_cfg, |r| (r.ipa, r.reid));

    let (width, height) = (2.0 * PANEL_W, 2.0 * PANEL_H);
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" viewBox="0 0 {width:.0} {height:.0}" font-family="sans-serif">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let rate = Some((0.0, 1.0));
    let panels = [
        (
            0.0,
            0.0,
            Axes { title: "re-identification rate", xlabel: "lambda_cfg", ylabel: "reid_rate", fixed_y: rate },
            &reid_cfg,
        ),
        (
            PANEL_W,
            0.0,
            Axes { title: "quality (W2 to world)", xlabel: "lambda_cfg", ylabel: "quality", fixed_y: None },
            &qual_cfg,
        ),
        (
            0.0,
            PANEL_H,
            Axes { title: "identity distance", xlabel: "lambda_cfg", ylabel: "mean_identity_distance", fixed_y: None },
            &dist_cfg,
        ),
        (
            PANEL_W,
            PANEL_H,
            Axes { title: "re-identification rate", xlabel: "lambda_ipa", ylabel: "reid_rate", fixed_y: rate },
            &reid_ipa,
        ),
    ];
    for (ox, oy, axes, series) in &panels {
        panel(&mut svg, *ox, *oy, axes, series);
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}
