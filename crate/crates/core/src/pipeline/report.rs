//! Human-readable summary and SVG curves from the artifacts of a run.

use std::fmt::Write as _;
use std::path::Path;

use super::{read_json, write, BiasReport, SweepManifest, BIAS_REPORT, SWEEP_MANIFEST, TRAIN_LOG_JSON};
use crate::error::{Error, Result};
use crate::metrics::MetricValues;
use crate::training::TrainLog;

pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

const COLORS: &[&str] = &["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"];

/// A self-contained line chart with min/max axis labels.
pub fn svg_line_chart(title: &str, x_label: &str, series: &[Series]) -> String {
    let (w, h, pad) = (480.0, 300.0, 50.0);
    let all: Vec<(f64, f64)> = series
        .iter()
        .flat_map(|s| s.points.iter().copied())
        .filter(|p| p.0.is_finite() && p.1.is_finite())
        .collect();
    let bounds = |f: fn(&(f64, f64)) -> f64| {
        let lo = all.iter().map(f).fold(f64::INFINITY, f64::min);
        let hi = all.iter().map(f).fold(f64::NEG_INFINITY, f64::max);
        if !lo.is_finite() {
            (0.0, 1.0)
        } else if hi - lo < 1e-12 {
            (lo - 0.5, hi + 0.5)
        } else {
            (lo, hi)
        }
    };
    let (x0, x1) = bounds(|p| p.0);
    let (y0, y1) = bounds(|p| p.1);
    let sx = |x: f64| pad + (x - x0) / (x1 - x0) * (w - 2.0 * pad);
    let sy = |y: f64| h - pad - (y - y0) / (y1 - y0) * (h - 2.0 * pad);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{title}</text>"#, w / 2.0);
    let _ = writeln!(
        s,
        r#"<path d="M{pad} {pad} V{} H{}" fill="none" stroke="black"/>"#,
        h - pad,
        w - pad
    );
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{x_label}</text>"#, w / 2.0, h - 12.0);
    let _ = writeln!(s, r#"<text x="{pad}" y="{}" text-anchor="middle">{x0:.4}</text>"#, h - pad + 14.0);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{x1:.4}</text>"#, w - pad, h - pad + 14.0);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{y0:.4}</text>"#, pad - 4.0, h - pad);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{y1:.4}</text>"#, pad - 4.0, pad + 4.0);
    for (i, ser) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let pts: Vec<String> = ser
            .points
            .iter()
            .filter(|p| p.0.is_finite() && p.1.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            pts.join(" ")
        );
        for p in &pts {
            let (cx, cy) = p.split_once(',').expect("formatted pair");
            let _ = writeln!(s, r#"<circle cx="{cx}" cy="{cy}" r="3" fill="{color}"/>"#);
        }
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" fill="{color}">{}</text>"#,
            w - pad + 4.0 - 120.0,
            pad + 14.0 * (i as f64 + 1.0),
            ser.name
        );
    }
    s.push_str("</svg>\n");
    s
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"))
}

fn table_row(name: &str, m: &MetricValues) -> String {
    format!(
        "| {name} | {} | {} | {} | {} | {} | {} | {} |\n",
        cell(m.seat_mean_abs),
        cell(m.stereoset.map(|s| s.ss)),
        cell(m.stereoset.map(|s| s.lm)),
        cell(m.stereoset.map(|s| s.icat)),
        cell(m.crows),
        cell(m.mean_d),
        cell(m.ppl),
    )
}

const HEADER: &str = "| model | SEAT mean abs d | SS | LM | ICAT | CrowS | mean D | ppl |\n|---|---|---|---|---|---|---|---|\n";

const SWEEP_METRICS: &[(&str, fn(&MetricValues) -> Option<f64>)] = &[
    ("seat", |m| m.seat_mean_abs),
    ("ss", |m| m.stereoset.map(|s| s.ss)),
    ("lm", |m| m.stereoset.map(|s| s.lm)),
    ("icat", |m| m.stereoset.map(|s| s.icat)),
    ("crows", |m| m.crows),
    ("mean_d", |m| m.mean_d),
    ("ppl", |m| m.ppl),
];

fn sweep_outputs(dir: &Path, manifest: &SweepManifest, md: &mut String) -> Result<()> {
    let mut csv = String::from("groups,metric,before,after\n");
    md.push_str("\n## Corpus-size sweep\n\n| groups | mean D before | mean D after | ppl after |\n|---|---|---|---|\n");
    for p in &manifest.points {
        let _ = writeln!(
            md,
            "| {} | {} | {} | {} |",
            p.groups,
            cell(p.report.before.mean_d),
            cell(p.report.after.mean_d),
            cell(p.report.after.ppl)
        );
        for (name, get) in SWEEP_METRICS {
            let _ = writeln!(
                csv,
                "{},{name},{},{}",
                p.groups,
                cell(get(&p.report.before)),
                cell(get(&p.report.after))
            );
        }
    }
    write(&dir.join("sweep.csv"), csv)?;
    for (name, get) in SWEEP_METRICS {
        let series = |label: &str, pick: fn(&BiasReport) -> &MetricValues| Series {
            name: label.to_string(),
            points: manifest
                .points
                .iter()
                .filter_map(|p| get(pick(&p.report)).map(|v| (p.groups as f64, v)))
                .collect(),
        };
        let before = series("before", |r| &r.before);
        let after = series("after", |r| &r.after);
        if after.points.is_empty() {
            continue;
        }
        let svg = svg_line_chart(&format!("{name} vs corpus size"), "groups", &[before, after]);
        write(&dir.join(format!("sweep_{name}.svg")), svg)?;
    }
    Ok(())
}

/// Writes `report.md`, `train_curves.svg` and, after a sweep, `sweep.csv`
/// plus one `sweep_<metric>.svg` per available metric. Returns the
/// markdown.
pub fn report(dir: &Path) -> Result<String> {
    let bias_path = dir.join(BIAS_REPORT);
    let sweep_path = dir.join(SWEEP_MANIFEST);
    if !bias_path.exists() && !sweep_path.exists() {
        return Err(Error::Validation(format!(
            "{} has neither {BIAS_REPORT} nor {SWEEP_MANIFEST}; run the pipeline first",
            dir.display()
        )));
    }
    let mut md = String::from("# Debiasing report\n");
    if bias_path.exists() {
        let bias: BiasReport = read_json(&bias_path)?;
        md.push('\n');
        md.push_str(HEADER);
        md.push_str(&table_row("before", &bias.before));
        md.push_str(&table_row("after", &bias.after));
        let _ = writeln!(
            md,
            "\n{} aligned groups trained on; {} filtered groups excluded from training statistics.",
            bias.aligned_groups, bias.filtered_groups
        );
        for (name, v) in &bias.after.seat {
            let before = bias.before.seat.iter().find(|s| &s.0 == name).map(|s| s.1);
            let _ = writeln!(md, "\nSEAT `{name}`: {} → {:.4}", cell(before), v);
        }
    }
    let log_path = dir.join(TRAIN_LOG_JSON);
    if log_path.exists() {
        let log: TrainLog = read_json(&log_path)?;
        let rows: Vec<_> = std::iter::once(&log.initial).chain(&log.epochs).collect();
        let pick = |name: &str, f: fn(&crate::training::EpochRecord) -> f64| Series {
            name: name.to_string(),
            points: rows.iter().map(|r| (r.epoch as f64, f(r))).collect(),
        };
        let svg = svg_line_chart(
            "training losses",
            "epoch",
            &[pick("L_b", |r| r.l_b), pick("L_r", |r| r.l_r), pick("mean D", |r| r.mean_d)],
        );
        write(&dir.join("train_curves.svg"), svg)?;
        let svg = svg_line_chart("held-out pseudo-perplexity", "epoch", &[pick("ppl", |r| r.ppl)]);
        write(&dir.join("ppl_curve.svg"), svg)?;
    }
    if sweep_path.exists() {
        let manifest: SweepManifest = read_json(&sweep_path)?;
        sweep_outputs(dir, &manifest, &mut md)?;
    }
    write(&dir.join("report.md"), &md)?;
    Ok(md)
}
