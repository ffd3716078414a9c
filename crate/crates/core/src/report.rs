//! Report assembly: a strategy comparison table plus SVG plots, built
//! purely from the artifacts runs already wrote. Nothing is recomputed
//! here; every cell comes from a record field, and cells a record lacks
//! are flagged as gaps.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::Result;
use crate::search::{DetectionResult, SearchResult};
use crate::svcca::CorrelationReport;

/// One named coefficient report, as the `svcca` command writes them.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LayerCorrelation {
    pub layer: String,
    pub report: CorrelationReport,
}

/// What a report emission produced.
#[derive(Clone, Debug)]
pub struct ReportFiles {
    pub csv: PathBuf,
    pub table: PathBuf,
    pub plots: Vec<PathBuf>,
    /// Count of table cells whose record field was missing.
    pub gaps: usize,
}

const COLUMNS: [(&str, &str); 10] = [
    ("run", ""),
    ("model", "/model"),
    ("strategy", "/strategy"),
    ("cutoff", "/cutoff"),
    ("params", "/params"),
    ("macs", "/macs"),
    ("best_val_auprc", "/record/best_val_auprc"),
    ("test_auprc", "/record/test_auprc"),
    ("test_auroc", "/record/test_auroc"),
    ("halvings", "/record/halvings"),
];

fn cell(summary: &Value, pointer: &str, gaps: &mut usize) -> String {
    match summary.pointer(pointer) {
        None => {
            *gaps += 1;
            "-".to_string()
        }
        // An explicit null is a field that legitimately doesn't apply
        // (e.g. no cutoff under full finetuning), not a gap.
        Some(Value::Null) => "-".to_string(),
        Some(Value::String(s)) => s.clone(),
        Some(v) => v.to_string(),
    }
}

/// Emit `report.csv`, an aligned `report.txt`, and one SVG per plot-worthy
/// artifact found in `dirs` (`search.json`, `detection.json`,
/// `svcca.json`). Returns the files written and how many cells were
/// flagged missing; callers decide whether gaps are fatal.
pub fn emit_report(dirs: &[PathBuf], out: &Path) -> Result<ReportFiles> {
    fs::create_dir_all(out)?;
    let mut gaps = 0;
    let mut rows: Vec<Vec<String>> = Vec::new();
    let mut plots = Vec::new();
    for dir in dirs {
        let run = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| dir.display().to_string());
        let summary_path = dir.join("summary.json");
        let summary: Value = if summary_path.exists() {
            serde_json::from_str(&fs::read_to_string(&summary_path)?)?
        } else {
            Value::Null
        };
        let mut row = vec![run.clone()];
        for (_, pointer) in COLUMNS.iter().skip(1) {
            row.push(cell(&summary, pointer, &mut gaps));
        }
        rows.push(row);

        let search = dir.join("search.json");
        if search.exists() {
            let result: SearchResult = serde_json::from_str(&fs::read_to_string(&search)?)?;
            let path = out.join(format!("search_{run}.svg"));
            fs::write(&path, search_plot(&result))?;
            plots.push(path);
        }
        let detection = dir.join("detection.json");
        if detection.exists() {
            let result: DetectionResult =
                serde_json::from_str(&fs::read_to_string(&detection)?)?;
            let path = out.join(format!("detection_{run}.svg"));
            fs::write(&path, detection_plot(&result))?;
            plots.push(path);
        }
        let svcca = dir.join("svcca.json");
        if svcca.exists() {
            let layers: Vec<LayerCorrelation> =
                serde_json::from_str(&fs::read_to_string(&svcca)?)?;
            let path = out.join(format!("svcca_{run}.svg"));
            fs::write(&path, svcca_plot(&layers))?;
            plots.push(path);
        }
    }

    let csv_path = out.join("report.csv");
    let mut w = csv::Writer::from_path(&csv_path)?;
    w.write_record(COLUMNS.iter().map(|c| c.0))?;
    for row in &rows {
        w.write_record(row)?;
    }
    w.flush()?;

    let table_path = out.join("report.txt");
    fs::write(&table_path, text_table(&rows))?;

    Ok(ReportFiles {
        csv: csv_path,
        table: table_path,
        plots,
        gaps,
    })
}

fn text_table(rows: &[Vec<String>]) -> String {
    let header: Vec<String> = COLUMNS.iter().map(|c| c.0.to_string()).collect();
    let mut widths: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
    for row in rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let fmt = |cells: &[String]| {
        let padded: Vec<String> = cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:<w$}"))
            .collect();
        padded.join("  ").trim_end().to_string()
    };
    let rule = widths
        .iter()
        .map(|w| "-".repeat(*w))
        .collect::<Vec<_>>()
        .join("  ");
    let mut lines = vec![fmt(&header), rule];
    lines.extend(rows.iter().map(|r| fmt(r)));
    lines.join("\n") + "\n"
}

/// A polyline with an optional emphasized point.
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
    pub dashed: bool,
    /// Index into `points` to mark with a filled circle.
    pub marker: Option<usize>,
}

const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#7f7f7f",
];
const W: f64 = 640.0;
const H: f64 = 420.0;
const ML: f64 = 62.0;
const MR: f64 = 18.0;
const MT: f64 = 38.0;
const MB: f64 = 48.0;

fn ticks(lo: f64, hi: f64) -> Vec<f64> {
    let span = (hi - lo).max(1e-12);
    let raw = span / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 2.5, 5.0, 10.0]
        .iter()
        .map(|m| m * mag)
        .find(|&s| span / s <= 6.0)
        .unwrap_or(mag * 10.0);
    let first = (lo / step).ceil() * step;
    let mut t = Vec::new();
    let mut v = first;
    while v <= hi + step * 1e-9 {
        t.push(v);
        v += step;
    }
    t
}

fn fmt_tick(v: f64) -> String {
    if v == v.trunc() && v.abs() < 1e6 {
        format!("{}", v as i64)
    } else {
        let s = format!("{v:.3}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    }
}

/// Hand-rolled line plot; returns a complete SVG document.
pub fn line_plot(title: &str, xlabel: &str, ylabel: &str, series: &[Series]) -> String {
    let pts: Vec<(f64, f64)> = series.iter().flat_map(|s| s.points.iter().copied()).collect();
    let (mut x0, mut x1) = pts
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| {
            (a.min(p.0), b.max(p.0))
        });
    let (mut y0, mut y1) = pts
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| {
            (a.min(p.1), b.max(p.1))
        });
    if !x0.is_finite() {
        (x0, x1) = (0.0, 1.0);
    }
    if !y0.is_finite() {
        (y0, y1) = (0.0, 1.0);
    }
    if x1 - x0 < 1e-12 {
        x1 = x0 + 1.0;
    }
    let pad = ((y1 - y0) * 0.08).max(1e-3);
    y0 -= pad;
    y1 += pad;
    let sx = |x: f64| ML + (x - x0) / (x1 - x0) * (W - ML - MR);
    let sy = |y: f64| H - MB - (y - y0) / (y1 - y0) * (H - MT - MB);

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {W} {H}\" \
         font-family=\"sans-serif\" font-size=\"12\">\n"
    ));
    svg.push_str(&format!(
        "<rect x=\"0\" y=\"0\" width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n"
    ));
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">{}</text>\n",
        W / 2.0,
        escape(title)
    ));
    for t in ticks(x0, x1) {
        let x = sx(t);
        svg.push_str(&format!(
            "<line x1=\"{x:.1}\" y1=\"{:.1}\" x2=\"{x:.1}\" y2=\"{:.1}\" stroke=\"#ddd\"/>\n",
            MT,
            H - MB
        ));
        svg.push_str(&format!(
            "<text x=\"{x:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>\n",
            H - MB + 16.0,
            fmt_tick(t)
        ));
    }
    for t in ticks(y0, y1) {
        let y = sy(t);
        svg.push_str(&format!(
            "<line x1=\"{:.1}\" y1=\"{y:.1}\" x2=\"{:.1}\" y2=\"{y:.1}\" stroke=\"#ddd\"/>\n",
            ML,
            W - MR
        ));
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{y:.1}\" text-anchor=\"end\" dy=\"4\">{}</text>\n",
            ML - 6.0,
            fmt_tick(t)
        ));
    }
    svg.push_str(&format!(
        "<rect x=\"{ML}\" y=\"{MT}\" width=\"{:.1}\" height=\"{:.1}\" fill=\"none\" stroke=\"#444\"/>\n",
        W - ML - MR,
        H - MT - MB
    ));
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>\n",
        W / 2.0,
        H - 10.0,
        escape(xlabel)
    ));
    svg.push_str(&format!(
        "<text x=\"16\" y=\"{:.1}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {:.1})\">{}</text>\n",
        H / 2.0,
        H / 2.0,
        escape(ylabel)
    ));
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let coords: Vec<String> = s
            .points
            .iter()
            .map(|p| format!("{:.2},{:.2}", sx(p.0), sy(p.1)))
            .collect();
        let dash = if s.dashed { " stroke-dasharray=\"6 4\"" } else { "" };
        svg.push_str(&format!(
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.8\"{dash}/>\n",
            coords.join(" ")
        ));
        if let Some(m) = s.marker {
            if let Some(p) = s.points.get(m) {
                svg.push_str(&format!(
                    "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"5\" fill=\"#2ca02c\" stroke=\"#145214\"/>\n",
                    sx(p.0),
                    sy(p.1)
                ));
            }
        }
        let ly = MT + 16.0 + 16.0 * i as f64;
        svg.push_str(&format!(
            "<line x1=\"{:.1}\" y1=\"{ly:.1}\" x2=\"{:.1}\" y2=\"{ly:.1}\" stroke=\"{color}\" stroke-width=\"2\"{dash}/>\n",
            W - MR - 150.0,
            W - MR - 126.0
        ));
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{ly:.1}\" dy=\"4\">{}</text>\n",
            W - MR - 120.0,
            escape(&s.label)
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Validation score against cutoff, peak marked.
pub fn search_plot(result: &SearchResult) -> String {
    let mut points: Vec<(f64, f64)> = result
        .stage1_scores
        .iter()
        .chain(&result.stage2_scores)
        .map(|&(k, s)| (k as f64, s))
        .collect();
    points.sort_by(|a, b| a.0.total_cmp(&b.0));
    let marker = points
        .iter()
        .position(|&(k, _)| k as usize == result.chosen.index);
    let series = vec![Series {
        label: format!("peak at layer {}", result.chosen.index),
        points,
        dashed: false,
        marker,
    }];
    line_plot(
        "Validation AUPRC by truncation point",
        "cutoff (layer index)",
        "validation AUPRC",
        &series,
    )
}

/// Overlap gap against cutoff with the threshold and the detected point.
pub fn detection_plot(result: &DetectionResult) -> String {
    let points: Vec<(f64, f64)> = result
        .gaps
        .iter()
        .map(|&(k, g)| (k as f64, g))
        .collect();
    let marker = result
        .gaps
        .iter()
        .position(|&(k, _)| k == result.detected.index);
    let (x0, x1) = (points.first().map_or(0.0, |p| p.0), points.last().map_or(1.0, |p| p.0));
    let series = vec![
        Series {
            label: format!("gap (detected at layer {})", result.detected.index),
            points,
            dashed: false,
            marker,
        },
        Series {
            label: format!("tau = {}", result.tau),
            points: vec![(x0, result.tau), (x1, result.tau)],
            dashed: true,
            marker: None,
        },
    ];
    line_plot(
        "Correlation overlap by truncation point",
        "cutoff (layer index)",
        "area gap to random baseline",
        &series,
    )
}

/// Per-layer coefficient curves with their random baselines.
pub fn svcca_plot(layers: &[LayerCorrelation]) -> String {
    let mut series = Vec::new();
    for l in layers {
        series.push(Series {
            label: l.layer.clone(),
            points: l
                .report
                .cca
                .coeffs
                .iter()
                .enumerate()
                .map(|(i, &c)| (i as f64 + 1.0, c))
                .collect(),
            dashed: false,
            marker: None,
        });
        series.push(Series {
            label: format!("{} baseline", l.layer),
            points: l
                .report
                .baseline
                .iter()
                .enumerate()
                .map(|(i, &c)| (i as f64 + 1.0, c))
                .collect(),
            dashed: true,
            marker: None,
        });
    }
    line_plot(
        "CCA coefficients with random baselines",
        "component",
        "correlation",
        &series,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::TruncationPoint;
    use crate::svcca::CcaReport;
    use crate::training::ExperimentRecord;

    fn fake_summary(dir: &Path, strategy: &str, test_auprc: f64) {
        let summary = crate::experiment::ExperimentSummary {
            model: "micro".into(),
            strategy: strategy.into(),
            cutoff: Some(9),
            unfreeze: None,
            params: 12345,
            macs: 67890,
            classes: 2,
            record: ExperimentRecord {
                epochs: Vec::new(),
                best_epoch: 1,
                best_val_auprc: 0.875,
                test_auprc,
                test_auroc: 0.9,
                halvings: 2,
                diverged: false,
            },
        };
        fs::create_dir_all(dir).unwrap();
        fs::write(
            dir.join("summary.json"),
            serde_json::to_string_pretty(&summary).unwrap(),
        )
        .unwrap();
    }

    fn point(index: usize) -> TruncationPoint {
        TruncationPoint {
            index,
            layer: format!("conv{index}"),
            block: 1,
            out_channels: 8,
            spatial: Some((16, 16)),
            cum_params: 100,
            cum_macs: Some(1000),
        }
    }

    #[test]
    fn table_has_one_row_per_run_and_exact_cells() {
        let tmp = tempfile::tempdir().unwrap();
        let a = tmp.path().join("ftl");
        let b = tmp.path().join("ttl");
        fake_summary(&a, "ftl", 0.8125);
        fake_summary(&b, "ttl", 0.75);
        let out = tmp.path().join("report");
        let files = emit_report(&[a, b], &out).unwrap();
        assert_eq!(files.gaps, 0);
        let csv = fs::read_to_string(&files.csv).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 3, "header plus one row per run");
        assert!(lines[1].contains("0.8125") && lines[1].contains("12345"));
        assert!(lines[2].starts_with("ttl,"));
        let table = fs::read_to_string(&files.table).unwrap();
        assert!(table.contains("strategy") && table.contains("0.875"));
    }

    #[test]
    fn missing_fields_are_flagged_as_gaps() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("partial");
        fs::create_dir_all(&dir).unwrap();
        fs::write(
            dir.join("summary.json"),
            r#"{"model":"micro","strategy":"ftl","params":5}"#,
        )
        .unwrap();
        let out = tmp.path().join("report");
        let files = emit_report(&[dir], &out).unwrap();
        assert!(files.gaps >= 4, "cutoff, macs and record fields missing");
        let csv = fs::read_to_string(&files.csv).unwrap();
        assert!(csv.contains(",-,"));
    }

    #[test]
    fn search_plot_marks_the_peak() {
        let result = SearchResult {
            stage1_scores: vec![(3, 0.5), (9, 0.8), (15, 0.6)],
            stage2_scores: vec![(7, 0.9), (11, 0.7)],
            chosen: point(7),
            total_trainings: 5,
            skipped: Vec::new(),
        };
        let svg = search_plot(&result);
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert!(svg.contains("polyline"));
        assert!(svg.contains("peak at layer 7"));
        assert!(svg.contains("circle"), "the argmax point is marked");
    }

    #[test]
    fn detection_plot_highlights_the_detected_point_and_threshold() {
        let result = DetectionResult {
            gaps: vec![(3, 0.6), (6, 0.4), (9, 0.02)],
            dims: vec![(3, 8), (6, 16), (9, 32)],
            tau: 0.05,
            detected: point(6),
            fallback_used: false,
            finetunes: 2,
            confirm: None,
        };
        let svg = detection_plot(&result);
        assert!(svg.contains("tau = 0.05"));
        assert!(svg.contains("detected at layer 6"));
        assert!(svg.contains("#2ca02c"), "detected point drawn in green");
        assert!(svg.contains("stroke-dasharray"), "threshold drawn dashed");
    }

    #[test]
    fn svcca_plot_draws_curve_and_baseline_per_layer() {
        let layers = vec![LayerCorrelation {
            layer: "conv2".into(),
            report: CorrelationReport {
                cca: CcaReport {
                    coeffs: vec![0.9, 0.7, 0.5],
                    mean: 0.7,
                    kept_x: 3,
                    kept_y: 3,
                },
                baseline: vec![0.2, 0.1, 0.05],
                baseline_mean: 0.11666666,
                auc_gap: 0.58,
            },
        }];
        let svg = svcca_plot(&layers);
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(svg.contains("conv2 baseline"));
        let report_dir = tempfile::tempdir().unwrap();
        let run = report_dir.path().join("cmp");
        fs::create_dir_all(&run).unwrap();
        fs::write(
            run.join("svcca.json"),
            serde_json::to_string(&layers).unwrap(),
        )
        .unwrap();
        fake_summary(&run, "ftl", 0.5);
        let out = report_dir.path().join("out");
        let files = emit_report(&[run], &out).unwrap();
        assert_eq!(files.plots.len(), 1);
        assert!(files.plots[0].file_name().unwrap().to_str().unwrap().starts_with("svcca_"));
    }

    #[test]
    fn axis_ticks_are_round_numbers() {
        let t = ticks(0.0, 1.0);
        assert!(t.contains(&0.0));
        assert!(t.iter().any(|&v| (v - 1.0).abs() < 1e-9));
        let wide = ticks(0.0, 17.0);
        assert!(wide.len() >= 3 && wide.len() <= 7);
        for w in wide.windows(2) {
            assert!(w[1] > w[0]);
        }
    }
}
