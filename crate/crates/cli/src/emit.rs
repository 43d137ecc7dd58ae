//! CSV, SVG and JSON output. CSV schemas are fixed; plots are best effort.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Serialize;

use saliency_audit::crop::CropReport;
use saliency_audit::fidelity::{AccuracyCurve, FidelityReport};
use saliency_audit::tensor::Direction;

use crate::error::{CliError, Result};

pub const CURVES_HEADER: [&str; 6] = [
    "estimator",
    "perturbation",
    "direction",
    "shifted",
    "n",
    "accuracy",
];
pub const FIDELITY_HEADER: [&str; 8] = [
    "estimator",
    "n_star",
    "F",
    "U",
    "delta",
    "delta_tilde",
    "bound",
    "delta_sys",
];
pub const CROP_HEADER: [&str; 7] = [
    "estimator",
    "region_method",
    "mean_Sc",
    "mean_a",
    "s",
    "ci_half",
    "pct_pixels",
];
pub const HISTOGRAM_HEADER: [&str; 4] = ["estimator", "bin_low", "bin_high", "count"];
pub const CALIBRATION_HEADER: [&str; 2] = ["sigma", "accuracy"];
pub const TRAIN_LOG_HEADER: [&str; 2] = ["epoch", "loss"];

/// Shortest decimal that parses back to the same `f64`; `-0` prints as `0`.
pub fn num(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    format!("{v}")
}

/// Writes a header and rows with `\n` line endings.
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let fail = |e: csv::Error| CliError::output(path, e.into());
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)
        .map_err(fail)?;
    w.write_record(header).map_err(fail)?;
    for r in rows {
        w.write_record(r).map_err(fail)?;
    }
    w.flush().map_err(|e| CliError::output(path, e))
}

pub fn curve_rows(curves: &[AccuracyCurve]) -> Vec<Vec<String>> {
    curves
        .iter()
        .flat_map(|c| {
            c.n_grid.iter().zip(&c.accuracy).map(move |(&n, &a)| {
                vec![
                    c.estimator.clone(),
                    c.perturbation.clone(),
                    c.direction.tag().to_owned(),
                    c.shifted.to_string(),
                    num(n),
                    num(a),
                ]
            })
        })
        .collect()
}

pub fn write_curves(path: &Path, curves: &[AccuracyCurve]) -> Result<()> {
    write_csv(path, &CURVES_HEADER, &curve_rows(curves))
}

/// Parses a curves file back into curves, grouping consecutive rows that
/// share estimator, perturbation, direction and shift flag.
pub fn read_curves(path: &Path) -> Result<Vec<AccuracyCurve>> {
    let bad = |msg: String| CliError::Data(format!("{}: {msg}", path.display()));
    let mut reader = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => CliError::reading(path, io),
        other => bad(format!("{other:?}")),
    })?;
    let header = reader.headers().map_err(|e| bad(e.to_string()))?.clone();
    if header.iter().ne(CURVES_HEADER) {
        return Err(bad("unexpected header".into()));
    }
    let mut out: Vec<AccuracyCurve> = Vec::new();
    let mut pending: Option<PendingCurve> = None;
    for rec in reader.records() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        let field = |i: usize| rec.get(i).ok_or_else(|| bad("short row".into()));
        let direction = Direction::from_tag(field(2)?)
            .ok_or_else(|| bad(format!("bad direction {}", &rec[2])))?;
        let shifted: bool = field(3)?
            .parse()
            .map_err(|_| bad(format!("bad flag {}", &rec[3])))?;
        let n: f64 = field(4)?
            .parse()
            .map_err(|_| bad(format!("bad n {}", &rec[4])))?;
        let a: f64 = field(5)?
            .parse()
            .map_err(|_| bad(format!("bad accuracy {}", &rec[5])))?;
        let same = matches!(&pending, Some(p)
            if p.estimator == rec[0] && p.perturbation == rec[1] && p.direction == direction && p.shifted == shifted);
        if !same {
            if let Some(p) = pending.take() {
                out.push(p.finish()?);
            }
            pending = Some(PendingCurve {
                estimator: rec[0].to_owned(),
                perturbation: rec[1].to_owned(),
                direction,
                shifted,
                n_grid: Vec::new(),
                accuracy: Vec::new(),
            });
        }
        let p = pending.as_mut().expect("just set");
        p.n_grid.push(n);
        p.accuracy.push(a);
    }
    if let Some(p) = pending {
        out.push(p.finish()?);
    }
    Ok(out)
}

struct PendingCurve {
    estimator: String,
    perturbation: String,
    direction: Direction,
    shifted: bool,
    n_grid: Vec<f64>,
    accuracy: Vec<f64>,
}

impl PendingCurve {
    fn finish(self) -> Result<AccuracyCurve> {
        AccuracyCurve::new(
            self.estimator,
            self.perturbation,
            self.direction,
            self.shifted,
            self.n_grid,
            self.accuracy,
        )
        .map_err(|e| CliError::Data(e.to_string()))
    }
}

pub fn write_fidelity(path: &Path, report: &FidelityReport) -> Result<()> {
    let rows: Vec<Vec<String>> = report
        .rows
        .iter()
        .map(|r| {
            vec![
                r.estimator.clone(),
                num(r.n_star),
                num(r.f),
                num(r.u),
                num(r.delta),
                num(r.delta_tilde),
                num(r.bound),
                num(r.delta_sys),
            ]
        })
        .collect();
    write_csv(path, &FIDELITY_HEADER, &rows)
}

pub fn write_crop(path: &Path, reports: &[CropReport]) -> Result<()> {
    let rows: Vec<Vec<String>> = reports
        .iter()
        .map(|r| {
            vec![
                r.estimator.clone(),
                r.region_method.clone(),
                num(r.mean_sc),
                num(r.mean_a),
                num(r.mean_s),
                num(r.ci_half),
                num(r.pct_pixels),
            ]
        })
        .collect();
    write_csv(path, &CROP_HEADER, &rows)
}

/// Score histogram of one estimator over `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Histogram {
    pub estimator: String,
    pub counts: Vec<u64>,
}

pub fn write_histograms(path: &Path, hists: &[Histogram]) -> Result<()> {
    let mut rows = Vec::new();
    for h in hists {
        let bins = h.counts.len() as f64;
        for (i, c) in h.counts.iter().enumerate() {
            rows.push(vec![
                h.estimator.clone(),
                num(i as f64 / bins),
                num((i + 1) as f64 / bins),
                c.to_string(),
            ]);
        }
    }
    write_csv(path, &HISTOGRAM_HEADER, &rows)
}

pub fn write_calibration(path: &Path, curve: &[(f64, f64)]) -> Result<()> {
    let rows: Vec<Vec<String>> = curve.iter().map(|&(s, a)| vec![num(s), num(a)]).collect();
    write_csv(path, &CALIBRATION_HEADER, &rows)
}

pub fn write_train_log(path: &Path, losses: &[f64]) -> Result<()> {
    let rows: Vec<Vec<String>> = losses
        .iter()
        .enumerate()
        .map(|(i, &l)| vec![(i + 1).to_string(), num(l)])
        .collect();
    write_csv(path, &TRAIN_LOG_HEADER, &rows)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text =
        serde_json::to_string_pretty(value).map_err(|e| CliError::Invalid(e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::output(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| CliError::output(path, e))
}

/// A named polyline for [`line_plot`].
#[derive(Debug, Clone)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
    pub dashed: bool,
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

fn esc(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

/// Standalone SVG line chart with a legend on the right.
pub fn line_plot(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let (w, h) = (720.0, 420.0);
    let (left, right, top, bottom) = (60.0, 190.0, 36.0, 50.0);
    let pts = series.iter().flat_map(|s| s.points.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (
        f64::INFINITY,
        f64::NEG_INFINITY,
        f64::INFINITY,
        f64::NEG_INFINITY,
    );
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    if y1 <= y0 {
        y1 = y0 + 1.0;
    }
    let pw = w - left - right;
    let ph = h - top - bottom;
    let sx = |x: f64| left + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| top + (1.0 - (y - y0) / (y1 - y0)) * ph;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#,
        left + pw / 2.0,
        esc(title)
    );
    let _ = writeln!(
        s,
        r#"<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    );
    for i in 0..=4 {
        let t = i as f64 / 4.0;
        let (xv, yv) = (x0 + t * (x1 - x0), y0 + t * (y1 - y0));
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{:.3}</text>"#,
            sx(xv),
            top + ph + 16.0,
            xv
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{:.3}</text>"#,
            left - 6.0,
            sy(yv) + 4.0,
            yv
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        left + pw / 2.0,
        h - 10.0,
        esc(x_label)
    );
    let _ = writeln!(
        s,
        r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">{}</text>"#,
        top + ph / 2.0,
        top + ph / 2.0,
        esc(y_label)
    );
    for (i, ser) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let path: Vec<String> = ser
            .points
            .iter()
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        let dash = if ser.dashed {
            r#" stroke-dasharray="6 3""#
        } else {
            ""
        };
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5"{dash} points="{}"/>"#,
            path.join(" ")
        );
        let ly = top + 14.0 + 18.0 * i as f64;
        let lx = w - right + 12.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"{dash}/>"#,
            lx + 22.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}">{}</text>"#,
            lx + 28.0,
            ly + 4.0,
            esc(&ser.label)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// One line per (estimator, direction) for curves with the given shift flag.
pub fn curves_plot(curves: &[AccuracyCurve], shifted: bool) -> String {
    let series: Vec<Series> = curves
        .iter()
        .filter(|c| c.shifted == shifted)
        .map(|c| Series {
            label: format!("{} {}", c.estimator, c.direction),
            points: c
                .n_grid
                .iter()
                .copied()
                .zip(c.accuracy.iter().copied())
                .collect(),
            dashed: c.direction == Direction::LiF,
        })
        .collect();
    let perturbation = curves
        .first()
        .map(|c| c.perturbation.as_str())
        .unwrap_or("");
    let title = format!(
        "{}accuracy vs perturbed fraction ({perturbation})",
        if shifted { "shifted masks: " } else { "" }
    );
    line_plot(&title, "fraction of pixels perturbed", "accuracy", &series)
}

pub fn histogram_plot(hists: &[Histogram]) -> String {
    let series: Vec<Series> = hists
        .iter()
        .map(|h| {
            let total = h.counts.iter().sum::<u64>().max(1) as f64;
            let bins = h.counts.len() as f64;
            Series {
                label: h.estimator.clone(),
                points: h
                    .counts
                    .iter()
                    .enumerate()
                    .map(|(i, &c)| ((i as f64 + 0.5) / bins, c as f64 / total))
                    .collect(),
                dashed: false,
            }
        })
        .collect();
    line_plot(
        "normalized importance scores",
        "score",
        "fraction of pixels",
        &series,
    )
}

pub fn calibration_plot(curve: &[(f64, f64)], threshold: f64) -> String {
    let series = vec![
        Series {
            label: "full blur".into(),
            points: curve.to_vec(),
            dashed: false,
        },
        Series {
            label: "threshold".into(),
            points: vec![
                (curve.first().map_or(0.0, |p| p.0), threshold),
                (curve.last().map_or(1.0, |p| p.0), threshold),
            ],
            dashed: true,
        },
    ];
    line_plot(
        "accuracy on fully blurred images",
        "sigma",
        "accuracy",
        &series,
    )
}
