//! Static figure rendering: loss curves from the metric log and
//! precision/recall curves from a prediction dump, emitted as SVG.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::domain::GroundTruth;
use crate::infer_eval::{precision_recall_curve, Detection};

use super::HarnessError;

pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f",
];

/// Minimal line plot: fixed canvas, linear axes spanning the data.
pub fn render_svg(title: &str, series: &[Series], path: &Path) -> Result<(), HarnessError> {
    const W: f64 = 860.0;
    const H: f64 = 540.0;
    const ML: f64 = 70.0;
    const MR: f64 = 180.0;
    const MT: f64 = 50.0;
    const MB: f64 = 55.0;
    let all: Vec<(f64, f64)> = series.iter().flat_map(|s| s.points.iter().copied()).collect();
    let (x0, x1) = span(all.iter().map(|p| p.0));
    let (y0, y1) = span(all.iter().map(|p| p.1));
    let px = |x: f64| ML + (x - x0) / (x1 - x0).max(1e-12) * (W - ML - MR);
    let py = |y: f64| H - MB - (y - y0) / (y1 - y0).max(1e-12) * (H - MT - MB);

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n\
         <rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"28\" font-size=\"18\" font-family=\"sans-serif\">{}</text>\n",
        ML,
        xml_escape(title)
    ));
    // axes
    svg.push_str(&format!(
        "<line x1=\"{ML}\" y1=\"{0}\" x2=\"{1}\" y2=\"{0}\" stroke=\"black\"/>\n\
         <line x1=\"{ML}\" y1=\"{MT}\" x2=\"{ML}\" y2=\"{0}\" stroke=\"black\"/>\n",
        H - MB,
        W - MR
    ));
    for i in 0..=4 {
        let fx = x0 + (x1 - x0) * i as f64 / 4.0;
        let fy = y0 + (y1 - y0) * i as f64 / 4.0;
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"11\" font-family=\"sans-serif\" text-anchor=\"middle\">{:.3}</text>\n",
            px(fx),
            H - MB + 18.0,
            fx
        ));
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"11\" font-family=\"sans-serif\" text-anchor=\"end\">{:.3}</text>\n",
            ML - 6.0,
            py(fy) + 4.0,
            fy
        ));
    }
    for (si, s) in series.iter().enumerate() {
        let color = PALETTE[si % PALETTE.len()];
        let pts: Vec<String> = s
            .points
            .iter()
            .map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y)))
            .collect();
        svg.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.6\" points=\"{}\"/>\n",
            pts.join(" ")
        ));
        let ly = MT + 18.0 * si as f64;
        svg.push_str(&format!(
            "<line x1=\"{0}\" y1=\"{ly:.1}\" x2=\"{1}\" y2=\"{ly:.1}\" stroke=\"{color}\" stroke-width=\"2\"/>\n\
             <text x=\"{2}\" y=\"{3:.1}\" font-size=\"12\" font-family=\"sans-serif\">{4}</text>\n",
            W - MR + 10.0,
            W - MR + 34.0,
            W - MR + 40.0,
            ly + 4.0,
            xml_escape(&s.name)
        ));
    }
    svg.push_str("</svg>\n");
    fs::write(path, svg).map_err(|e| HarnessError::Data(format!("write {}: {e}", path.display())))
}

fn span(vals: impl Iterator<Item = f64>) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for v in vals {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if lo == hi {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Loss-component curves parsed from a metrics.jsonl file.
pub fn loss_series_from_log(path: &Path) -> Result<Vec<Series>, HarnessError> {
    let text = fs::read_to_string(path)
        .map_err(|e| HarnessError::Data(format!("read {}: {e}", path.display())))?;
    let keys = ["total", "tem_bcls", "pem_bcls", "pem_loc", "r_loc", "r_cls"];
    let mut series: Vec<Series> = keys
        .iter()
        .map(|k| Series { name: k.to_string(), points: Vec::new() })
        .collect();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let v: serde_json::Value = serde_json::from_str(line)
            .map_err(|e| HarnessError::Data(format!("{}: {e}", path.display())))?;
        let step = v["step"].as_f64().ok_or_else(|| {
            HarnessError::Data(format!("{}: log line without step", path.display()))
        })?;
        for (s, k) in series.iter_mut().zip(&keys) {
            if let Some(val) = v[*k].as_f64() {
                s.points.push((step, val));
            }
        }
    }
    if series[0].points.is_empty() {
        return Err(HarnessError::Data(format!("{}: empty metric log", path.display())));
    }
    Ok(series)
}

/// Per-class PR curves at one tIoU threshold.
pub fn pr_series(
    preds: &BTreeMap<String, Vec<Detection>>,
    gts: &BTreeMap<String, Vec<GroundTruth>>,
    labels: &[String],
    thr: f64,
) -> Vec<Series> {
    labels
        .iter()
        .enumerate()
        .filter_map(|(c, name)| {
            let pts = precision_recall_curve(preds, gts, c, thr);
            if pts.is_empty() {
                None
            } else {
                Some(Series { name: name.clone(), points: pts })
            }
        })
        .collect()
}
