//! Merges the CSVs of a run directory into step-aligned curves, a per-layer
//! gate table and an optional SVG plot.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use ptu_core::ptu::gate_csv_header;
use ptu_core::train::SUMMARY_HEADER;

use crate::commands::SELECTION_HEADER;
use crate::config::ExperimentConfig;
use crate::error::{io_err, CliError, Result};

pub const CURVE_HEADER: &str = "step,train_loss,val_acc";
pub const CURVES_FILE: &str = "report_curves.csv";
pub const GATES_FILE: &str = "report_gates.csv";
pub const PLOT_FILE: &str = "report_curves.svg";

#[derive(Clone, Debug, PartialEq)]
pub struct CurvePoint {
    pub step: usize,
    pub train_loss: f64,
    pub val_acc: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GateRow {
    pub run: String,
    pub layer: usize,
    pub mean_r: f64,
    pub mean_z: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunReport {
    /// Label and checkpoints of every curve file, in file-name order.
    pub curves: Vec<(String, Vec<CurvePoint>)>,
    pub gates: Vec<GateRow>,
    pub written: Vec<PathBuf>,
}

fn malformed(file: &Path, line: usize, msg: impl Into<String>) -> CliError {
    CliError::Malformed {
        file: file.display().to_string(),
        line,
        msg: msg.into(),
    }
}

fn field<T: std::str::FromStr>(file: &Path, line: usize, name: &str, v: Option<&str>) -> Result<T> {
    let v = v.ok_or_else(|| malformed(file, line, format!("missing `{name}`")))?;
    v.parse()
        .map_err(|_| malformed(file, line, format!("bad `{name}` value `{v}`")))
}

fn parse_curve(file: &Path, text: &str) -> Result<Vec<CurvePoint>> {
    let mut out: Vec<CurvePoint> = Vec::new();
    for (i, row) in text.lines().enumerate().skip(1) {
        let n = i + 1;
        let cols: Vec<&str> = row.split(',').collect();
        if cols.len() != 3 {
            return Err(malformed(
                file,
                n,
                format!("expected 3 columns, found {}", cols.len()),
            ));
        }
        let p = CurvePoint {
            step: field(file, n, "step", Some(cols[0]))?,
            train_loss: field(file, n, "train_loss", Some(cols[1]))?,
            val_acc: field(file, n, "val_acc", Some(cols[2]))?,
        };
        if out.last().is_some_and(|q| q.step >= p.step) {
            return Err(malformed(file, n, "steps must increase"));
        }
        out.push(p);
    }
    Ok(out)
}

fn parse_gates(file: &Path, text: &str, run: &str, width: usize) -> Result<Vec<GateRow>> {
    let mut out = Vec::new();
    for (i, row) in text.lines().enumerate().skip(1) {
        let n = i + 1;
        let cols: Vec<&str> = row.split(',').collect();
        if cols.len() != width {
            return Err(malformed(
                file,
                n,
                format!("expected {width} columns, found {}", cols.len()),
            ));
        }
        for (j, c) in cols.iter().enumerate().skip(3) {
            field::<u64>(file, n, &format!("column {}", j + 1), Some(c))?;
        }
        out.push(GateRow {
            run: run.to_string(),
            layer: field(file, n, "layer", Some(cols[0]))?,
            mean_r: field(file, n, "mean_r", Some(cols[1]))?,
            mean_z: field(file, n, "mean_z", Some(cols[2]))?,
        });
    }
    Ok(out)
}

/// Reads every run CSV in `dir`. Files written by the report itself are
/// skipped, so reporting twice gives the same result.
pub fn read_run_dir(dir: &Path, setting: &str) -> Result<RunReport> {
    if !dir.is_dir() {
        return Err(CliError::Missing(format!(
            "run directory {} does not exist",
            dir.display()
        )));
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(io_err(dir))?
        .map(|e| e.map(|e| e.path()).map_err(io_err(dir)))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .filter(|p| p.extension().is_some_and(|e| e == "csv"))
        .collect();
    files.sort();
    let gate_header = gate_csv_header();
    let gate_width = gate_header.split(',').count();
    let prefix = format!("{setting}_");
    let mut report = RunReport {
        curves: Vec::new(),
        gates: Vec::new(),
        written: Vec::new(),
    };
    for f in files {
        let stem = f
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        if stem.starts_with("report_") {
            continue;
        }
        let text = std::fs::read_to_string(&f).map_err(io_err(&f))?;
        let label = stem.strip_prefix(&prefix).unwrap_or(&stem).to_string();
        match text.lines().next().unwrap_or("") {
            CURVE_HEADER => report.curves.push((label, parse_curve(&f, &text)?)),
            h if h == gate_header => report
                .gates
                .extend(parse_gates(&f, &text, &label, gate_width)?),
            SUMMARY_HEADER | SELECTION_HEADER => {}
            "" => return Err(malformed(&f, 1, "empty file")),
            h => return Err(malformed(&f, 1, format!("unrecognized header `{h}`"))),
        }
    }
    if report.curves.is_empty() && report.gates.is_empty() {
        return Err(CliError::Missing(format!(
            "no run CSVs in {}",
            dir.display()
        )));
    }
    Ok(report)
}

/// One row per recorded step; blank cells where a run has no checkpoint.
pub fn merged_curves_csv(curves: &[(String, Vec<CurvePoint>)]) -> String {
    let mut steps: Vec<usize> = curves
        .iter()
        .flat_map(|(_, c)| c.iter().map(|p| p.step))
        .collect();
    steps.sort_unstable();
    steps.dedup();
    let by_step: Vec<BTreeMap<usize, &CurvePoint>> = curves
        .iter()
        .map(|(_, c)| c.iter().map(|p| (p.step, p)).collect())
        .collect();
    let mut out = String::from("step");
    for (label, _) in curves {
        let _ = write!(out, ",{label}_train_loss,{label}_val_acc");
    }
    out.push('\n');
    for s in steps {
        let _ = write!(out, "{s}");
        for m in &by_step {
            match m.get(&s) {
                Some(p) => {
                    let _ = write!(out, ",{},{}", p.train_loss, p.val_acc);
                }
                None => out.push_str(",,"),
            }
        }
        out.push('\n');
    }
    out
}

pub fn gate_table_csv(gates: &[GateRow]) -> String {
    let mut out = String::from("run,layer,mean_r,mean_z\n");
    for g in gates {
        let _ = writeln!(out, "{},{},{},{}", g.run, g.layer, g.mean_r, g.mean_z);
    }
    out
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

/// Validation accuracy against step, one line per run.
pub fn curves_svg(curves: &[(String, Vec<CurvePoint>)]) -> String {
    let (w, h, left, right, top, bottom) = (640.0, 400.0, 56.0, 140.0, 20.0, 44.0);
    let max_step = curves
        .iter()
        .flat_map(|(_, c)| c.iter().map(|p| p.step))
        .max()
        .unwrap_or(1)
        .max(1) as f64;
    let x = |s: usize| left + (w - left - right) * s as f64 / max_step;
    let y = |a: f64| top + (h - top - bottom) * (1.0 - a.clamp(0.0, 1.0));
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    for i in 0..=5 {
        let a = i as f64 / 5.0;
        let _ = writeln!(
            s,
            r##"<line x1="{left}" y1="{0:.1}" x2="{1:.1}" y2="{0:.1}" stroke="#ddd"/>"##,
            y(a),
            w - right
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{a:.1}</text>"#,
            left - 6.0,
            y(a) + 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">step</text>"#,
        (left + w - right) / 2.0,
        h - 10.0
    );
    let _ = writeln!(
        s,
        r#"<text x="{left}" y="{:.1}" text-anchor="start">0</text>"#,
        h - bottom + 16.0
    );
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{max_step}</text>"#,
        w - right,
        h - bottom + 16.0
    );
    for (i, (label, c)) in curves.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = c
            .iter()
            .map(|p| format!("{:.1},{:.1}", x(p.step), y(p.val_acc)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            pts.join(" ")
        );
        let ly = top + 16.0 * i as f64 + 8.0;
        let _ = writeln!(
            s,
            r#"<line x1="{0:.1}" y1="{ly:.1}" x2="{1:.1}" y2="{ly:.1}" stroke="{color}" stroke-width="2"/>"#,
            w - right + 10.0,
            w - right + 30.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}">{label}</text>"#,
            w - right + 36.0,
            ly + 4.0
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Writes the merged curves, the gate table and, when enabled, the plot.
pub fn cmd_report(cfg: &ExperimentConfig, dry_run: bool, log: &mut dyn Write) -> Result<RunReport> {
    let mut report = read_run_dir(&cfg.out, &cfg.setting)?;
    let mut outputs = vec![
        (CURVES_FILE, merged_curves_csv(&report.curves)),
        (GATES_FILE, gate_table_csv(&report.gates)),
    ];
    if cfg.report_svg {
        outputs.push((PLOT_FILE, curves_svg(&report.curves)));
    }
    let labels: Vec<&str> = report.curves.iter().map(|(l, _)| l.as_str()).collect();
    let _ = writeln!(log, "curves: {}", labels.join(", "));
    for g in &report.gates {
        let _ = writeln!(
            log,
            "{} layer {}: mean r {:.4}, mean z {:.4}",
            g.run, g.layer, g.mean_r, g.mean_z
        );
    }
    for (name, body) in outputs {
        let path = cfg.out.join(name);
        if dry_run {
            let _ = writeln!(log, "would write {}", path.display());
        } else {
            std::fs::write(&path, body).map_err(io_err(&path))?;
            report.written.push(path);
        }
    }
    Ok(report)
}
