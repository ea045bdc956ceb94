// SPDX-License-Identifier: Apache-2.0

//! Figure data and self-contained SVG rendering.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::LabeledExample;
use crate::metrics::{self, EvalReport, GMeanThreshold, Grouping, Histogram};
use crate::rauq::ScoreRecord;

const WIDTH: f64 = 480.0;
const HEIGHT: f64 = 360.0;
const MARGIN: f64 = 48.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapPoint {
    pub method_id: String,
    pub extrinsic_auroc: f64,
    pub intrinsic_auroc: f64,
}

/// One point per method with both extrinsic and intrinsic AUROC. Methods
/// missing either group are listed in the returned notes.
pub fn hallucination_map(report: &EvalReport) -> (Vec<MapPoint>, Vec<String>) {
    let mut points = Vec::new();
    let mut notes = Vec::new();
    for method in report.methods() {
        let get = |group: &str| {
            report
                .cell(method, Grouping::ByHalluType, group)
                .and_then(|c| c.auroc)
                .map(|e| e.value)
        };
        match (get("extrinsic"), get("intrinsic")) {
            (Some(x), Some(y)) => points.push(MapPoint {
                method_id: method.to_string(),
                extrinsic_auroc: x,
                intrinsic_auroc: y,
            }),
            (x, y) => notes.push(format!(
                "{method}: omitted from hallucination map (missing {})",
                match (x, y) {
                    (None, None) => "extrinsic and intrinsic AUROC",
                    (None, _) => "extrinsic AUROC",
                    _ => "intrinsic AUROC",
                }
            )),
        }
    }
    (points, notes)
}

pub fn map_csv(points: &[MapPoint]) -> String {
    let mut out = String::from("method_id,extrinsic_auroc,intrinsic_auroc\n");
    for p in points {
        let _ = writeln!(out, "{},{},{}", p.method_id, p.extrinsic_auroc, p.intrinsic_auroc);
    }
    out
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn svg_open(title: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" viewBox=\"0 0 {WIDTH} {HEIGHT}\">\n\
         <title>{}</title>\n\
         <rect x=\"0\" y=\"0\" width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>\n",
        escape(title)
    )
}

/// Maps `[lo, hi]` onto the plot's horizontal extent.
#[derive(Debug, Clone, Copy)]
pub struct Axis {
    pub lo: f64,
    pub hi: f64,
    pub px_lo: f64,
    pub px_hi: f64,
}

impl Axis {
    pub fn to_px(&self, v: f64) -> f64 {
        self.px_lo + (v - self.lo) / (self.hi - self.lo) * (self.px_hi - self.px_lo)
    }

    pub fn from_px(&self, px: f64) -> f64 {
        self.lo + (px - self.px_lo) / (self.px_hi - self.px_lo) * (self.hi - self.lo)
    }
}

fn axes_frame(out: &mut String, x_label: &str, y_label: &str) {
    let _ = writeln!(
        out,
        "<line x1=\"{MARGIN}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n\
         <line x1=\"{MARGIN}\" y1=\"{MARGIN}\" x2=\"{MARGIN}\" y2=\"{b}\" stroke=\"black\"/>\n\
         <text x=\"{cx}\" y=\"{ty}\" text-anchor=\"middle\" font-size=\"12\">{xl}</text>\n\
         <text x=\"14\" y=\"{cy}\" text-anchor=\"middle\" font-size=\"12\" transform=\"rotate(-90 14 {cy})\">{yl}</text>",
        b = HEIGHT - MARGIN,
        r = WIDTH - MARGIN,
        cx = WIDTH / 2.0,
        ty = HEIGHT - 12.0,
        cy = HEIGHT / 2.0,
        xl = escape(x_label),
        yl = escape(y_label),
    );
}

/// Scatter of extrinsic (x) against intrinsic (y) AUROC on `[0, 1]^2`.
pub fn map_svg(points: &[MapPoint]) -> String {
    let x = Axis { lo: 0.0, hi: 1.0, px_lo: MARGIN, px_hi: WIDTH - MARGIN };
    let y = Axis { lo: 0.0, hi: 1.0, px_lo: HEIGHT - MARGIN, px_hi: MARGIN };
    let mut out = svg_open("Hallucination map");
    axes_frame(&mut out, "extrinsic AUROC", "intrinsic AUROC");
    let _ = writeln!(
        out,
        "<line x1=\"{:.6}\" y1=\"{:.6}\" x2=\"{:.6}\" y2=\"{:.6}\" stroke=\"#bbb\" stroke-dasharray=\"4 4\"/>",
        x.to_px(0.0),
        y.to_px(0.0),
        x.to_px(1.0),
        y.to_px(1.0)
    );
    for p in points {
        let (px, py) = (x.to_px(p.extrinsic_auroc), y.to_px(p.intrinsic_auroc));
        let _ = writeln!(
            out,
            "<g class=\"point\" data-method=\"{id}\" data-extrinsic=\"{ex}\" data-intrinsic=\"{inn}\">\
             <circle cx=\"{px:.6}\" cy=\"{py:.6}\" r=\"4\" fill=\"#2b6cb0\"/>\
             <text x=\"{tx:.6}\" y=\"{py:.6}\" font-size=\"10\">{id}</text></g>",
            id = escape(&p.method_id),
            ex = p.extrinsic_auroc,
            inn = p.intrinsic_auroc,
            tx = px + 6.0,
        );
    }
    out.push_str("</svg>\n");
    out
}

/// Score distributions of one method on one dataset, split by label, over a
/// shared range, with the G-mean threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramFigure {
    pub method_id: String,
    pub dataset_id: String,
    pub faithful: Histogram,
    pub hallucinated: Histogram,
    pub threshold: GMeanThreshold,
}

/// Builds a figure for every (method, dataset) pair with both classes
/// present. Pairs with a single class are listed in the notes.
pub fn histogram_figures(
    records: &[ScoreRecord],
    examples: &[LabeledExample],
    binarize_threshold: f64,
    bins: usize,
) -> Result<(Vec<HistogramFigure>, Vec<String>), metrics::MetricError> {
    let by_id: HashMap<&str, &LabeledExample> = examples.iter().map(|e| (e.trace_id.as_str(), e)).collect();
    // (trace_id, score, hallucinated) per (method, dataset)
    type Rows<'a> = Vec<(&'a str, f64, bool)>;
    let mut groups: BTreeMap<(&str, &str), Rows> = BTreeMap::new();
    for r in records {
        if let Some(ex) = by_id.get(r.trace_id.as_str()) {
            groups
                .entry((r.method_id.as_str(), ex.dataset_id.as_str()))
                .or_default()
                .push((r.trace_id.as_str(), r.score, ex.quality < binarize_threshold));
        }
    }
    let mut figures = Vec::new();
    let mut notes = Vec::new();
    for ((method, dataset), mut rows) in groups {
        rows.sort_by(|a, b| a.0.cmp(b.0));
        let scores: Vec<f64> = rows.iter().map(|r| r.1).collect();
        let labels: Vec<bool> = rows.iter().map(|r| r.2).collect();
        let threshold = match metrics::gmean_threshold(&scores, &labels) {
            Ok(t) => t,
            Err(metrics::MetricError::SingleClass) => {
                notes.push(format!("{method} on {dataset}: histogram omitted (single class)"));
                continue;
            }
            Err(e) => return Err(e),
        };
        let lo = scores.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let split = |want: bool| -> Vec<f64> {
            rows.iter().filter(|r| r.2 == want).map(|r| r.1).collect()
        };
        figures.push(HistogramFigure {
            method_id: method.to_string(),
            dataset_id: dataset.to_string(),
            faithful: metrics::histogram_in_range(&split(false), bins, lo, hi, true)?,
            hallucinated: metrics::histogram_in_range(&split(true), bins, lo, hi, true)?,
            threshold,
        });
    }
    Ok((figures, notes))
}

/// Rows `series,left,right,value`; the threshold row repeats the cut in both
/// edge columns and carries the G-mean as its value.
pub fn histogram_csv(fig: &HistogramFigure) -> String {
    let mut out = String::from("series,left,right,value\n");
    for (name, h) in [("faithful", &fig.faithful), ("hallucinated", &fig.hallucinated)] {
        for (v, w) in h.heights.iter().zip(h.edges.windows(2)) {
            let _ = writeln!(out, "{name},{},{},{v}", w[0], w[1]);
        }
    }
    let t = fig.threshold.threshold;
    let _ = writeln!(out, "gmean_threshold,{t},{t},{}", fig.threshold.gmean());
    out
}

/// Horizontal axis used by [`histogram_svg`].
pub fn histogram_axis(fig: &HistogramFigure) -> Axis {
    let e = &fig.faithful.edges;
    Axis {
        lo: e[0],
        hi: e[e.len() - 1],
        px_lo: MARGIN,
        px_hi: WIDTH - MARGIN,
    }
}

pub fn histogram_svg(fig: &HistogramFigure) -> String {
    let x = histogram_axis(fig);
    let top = fig
        .faithful
        .heights
        .iter()
        .chain(&fig.hallucinated.heights)
        .copied()
        .fold(0.0f64, f64::max);
    let y = Axis {
        lo: 0.0,
        hi: if top > 0.0 { top } else { 1.0 },
        px_lo: HEIGHT - MARGIN,
        px_hi: MARGIN,
    };
    let mut out = svg_open(&format!("{} on {}", fig.method_id, fig.dataset_id));
    axes_frame(&mut out, &format!("{} score", fig.method_id), "density");
    for (class, h, color) in [
        ("faithful", &fig.faithful, "#2b6cb0"),
        ("hallucinated", &fig.hallucinated, "#c53030"),
    ] {
        for (v, w) in h.heights.iter().zip(h.edges.windows(2)) {
            let (x0, x1) = (x.to_px(w[0]), x.to_px(w[1]));
            let (y0, y1) = (y.to_px(*v), y.to_px(0.0));
            let _ = writeln!(
                out,
                "<rect class=\"{class}\" x=\"{x0:.6}\" y=\"{y0:.6}\" width=\"{:.6}\" height=\"{:.6}\" \
                 fill=\"{color}\" fill-opacity=\"0.45\" data-left=\"{}\" data-right=\"{}\" data-density=\"{v}\"/>",
                x1 - x0,
                y1 - y0,
                w[0],
                w[1],
            );
        }
    }
    let t = fig.threshold.threshold;
    if t.is_finite() {
        let px = x.to_px(t);
        let _ = writeln!(
            out,
            "<line class=\"threshold\" data-threshold=\"{t}\" x1=\"{px:.6}\" y1=\"{MARGIN}\" x2=\"{px:.6}\" y2=\"{}\" \
             stroke=\"black\" stroke-dasharray=\"6 3\"/>",
            HEIGHT - MARGIN
        );
    } else {
        let _ = writeln!(
            out,
            "<text class=\"threshold\" data-threshold=\"{t}\" x=\"{MARGIN}\" y=\"{}\" font-size=\"10\">\
             threshold at {t}: every score is on one side</text>",
            MARGIN - 8.0
        );
    }
    out.push_str("</svg>\n");
    out
}

/// File-name-safe form of an id.
pub fn slug(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '.' || c == '_' { c } else { '_' })
        .collect()
}
