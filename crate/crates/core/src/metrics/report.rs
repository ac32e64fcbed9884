//! Per-class rows, macro averages and the Table-1-style rendering.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::OverlapKind;
use crate::dataset::ClassLabel;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: ClassLabel,
    /// `None` when the class has no ground truth.
    pub ap: Option<f64>,
    pub ar: Option<f64>,
    /// True positives over all counted detections; `None` without detections.
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub n_gt: usize,
    pub n_det: usize,
}

impl ClassMetrics {
    /// A row known only by its published AP / AR. Counts are not available,
    /// so the row is marked as having ground truth.
    pub fn published(class: ClassLabel, ap: f64, ar: f64) -> Self {
        Self {
            class,
            ap: Some(ap),
            ar: Some(ar),
            precision: None,
            recall: Some(ar),
            n_gt: 1,
            n_det: 0,
        }
    }

    pub fn empty(class: ClassLabel) -> Self {
        Self {
            class,
            ap: None,
            ar: None,
            precision: None,
            recall: None,
            n_gt: 0,
            n_det: 0,
        }
    }
}

/// Averages as printed in a source table, checked against the recomputed
/// means.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrintedAverage {
    pub ap: f64,
    pub ar: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub model_tag: String,
    pub metric: OverlapKind,
    pub thresh: f64,
    pub max_dets: usize,
    pub ap_method: String,
    pub match_rule: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub printed_average: Option<PrintedAverage>,
}

impl ReportMeta {
    pub fn new(model_tag: impl Into<String>, metric: OverlapKind, thresh: f64) -> Self {
        Self {
            model_tag: model_tag.into(),
            metric,
            thresh,
            max_dets: 100,
            ap_method: "all-point area under the interpolated precision-recall curve".into(),
            match_rule: "greedy by descending score; overlap >= threshold counts".into(),
            printed_average: None,
        }
    }

    pub fn ap_header(&self) -> String {
        format!("AP@[{}={:.2}]", self.metric.label(), self.thresh)
    }

    pub fn ar_header(&self) -> String {
        format!("AR@[{}={:.2}]", self.metric.label(), self.thresh)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AverageRow {
    pub ap: Option<f64>,
    pub ar: Option<f64>,
    /// Classes with ground truth that entered the means.
    pub n_classes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub meta: ReportMeta,
    pub classes: Vec<ClassMetrics>,
    pub average: AverageRow,
    pub warnings: Vec<String>,
}

fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

/// Rows in fixed class order (missing classes get an empty row) plus macro
/// averages over the classes that have ground truth.
pub fn build_report(per_class: &[ClassMetrics], meta: ReportMeta) -> MetricsReport {
    let classes: Vec<ClassMetrics> = ClassLabel::ALL
        .iter()
        .map(|&c| {
            per_class
                .iter()
                .find(|m| m.class == c)
                .cloned()
                .unwrap_or_else(|| ClassMetrics::empty(c))
        })
        .collect();
    let included: Vec<&ClassMetrics> = classes.iter().filter(|m| m.n_gt > 0).collect();
    let aps: Vec<f64> = included.iter().filter_map(|m| m.ap).collect();
    let ars: Vec<f64> = included.iter().filter_map(|m| m.ar).collect();
    let average = AverageRow {
        ap: mean(&aps),
        ar: mean(&ars),
        n_classes: included.len(),
    };
    let mut warnings = Vec::new();
    for m in classes.iter().filter(|m| m.n_gt == 0) {
        warnings.push(format!(
            "{} has no ground truth in this set; excluded from the averages",
            m.class.display_name()
        ));
    }
    if let Some(p) = meta.printed_average {
        for (name, printed, computed) in [("AP", p.ap, average.ap), ("AR", p.ar, average.ar)] {
            let Some(c) = computed else { continue };
            if format!("{printed:.6}") != format!("{c:.6}") {
                let mut msg = format!(
                    "{}: printed average {name} {printed:.6} is not the arithmetic mean of its rows ({c:.6}); the mean is reported",
                    meta.model_tag
                );
                let other = if name == "AP" { &ars } else { &aps };
                if let Some(o) = mean(other) {
                    if format!("{o:.6}") == format!("{printed:.6}") {
                        let other_name = if name == "AP" { "AR" } else { "AP" };
                        let _ = write!(msg, "; the printed value equals the mean of the {other_name} column");
                    }
                }
                warnings.push(msg);
            }
        }
    }
    MetricsReport {
        meta,
        classes,
        average,
        warnings,
    }
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.6}"))
}

/// Pads every column to its widest cell and renders a markdown table.
fn render_table(header: &[String], rows: &[Vec<String>], right_align_from: usize) -> String {
    let widths: Vec<usize> = (0..header.len())
        .map(|c| {
            rows.iter()
                .map(|r| r[c].chars().count())
                .chain(std::iter::once(header[c].chars().count()))
                .max()
                .unwrap_or(0)
                .max(3)
        })
        .collect();
    let line = |cells: &[String]| {
        let mut s = String::from("|");
        for (c, v) in cells.iter().enumerate() {
            if c >= right_align_from {
                let _ = write!(s, " {v:>w$} |", w = widths[c]);
            } else {
                let _ = write!(s, " {v:<w$} |", w = widths[c]);
            }
        }
        s.push('\n');
        s
    };
    let mut out = line(header);
    out.push('|');
    for (c, w) in widths.iter().enumerate() {
        if c >= right_align_from {
            let _ = write!(out, " {}: |", "-".repeat(w - 1));
        } else {
            let _ = write!(out, " :{} |", "-".repeat(w - 1));
        }
    }
    out.push('\n');
    for r in rows {
        out.push_str(&line(r));
    }
    out
}

impl MetricsReport {
    pub fn to_markdown(&self) -> String {
        Comparison {
            columns: vec![self.clone()],
        }
        .to_markdown()
    }
}

/// Several models side by side, one AP/AR column pair each.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub columns: Vec<MetricsReport>,
}

impl Comparison {
    pub fn to_markdown(&self) -> String {
        let mut header = vec!["Abnormality".to_string()];
        let mut model_row = vec!["Model".to_string()];
        for r in &self.columns {
            header.push(r.meta.ap_header());
            header.push(r.meta.ar_header());
            model_row.push(r.meta.model_tag.clone());
            model_row.push(String::new());
        }
        let mut rows = vec![model_row];
        for (i, class) in ClassLabel::ALL.iter().enumerate() {
            let mut row = vec![class.display_name().to_string()];
            for r in &self.columns {
                row.push(cell(r.classes[i].ap));
                row.push(cell(r.classes[i].ar));
            }
            rows.push(row);
        }
        let mut avg = vec!["Average".to_string()];
        for r in &self.columns {
            avg.push(cell(r.average.ap));
            avg.push(cell(r.average.ar));
        }
        rows.push(avg);
        let mut out = render_table(&header, &rows, 1);
        let mut notes: Vec<String> = Vec::new();
        if let Some(first) = self.columns.first() {
            notes.push(format!(
                "AP: {}. Matching: {} ({}, threshold {:.2}). AR: recall with at most {} detections per reading.",
                first.meta.ap_method,
                first.meta.match_rule,
                first.meta.metric,
                first.meta.thresh,
                first.meta.max_dets
            ));
        }
        for r in &self.columns {
            notes.extend(r.warnings.iter().map(|w| format!("Warning: {w}")));
        }
        if !notes.is_empty() {
            out.push('\n');
            for n in notes {
                out.push_str(&n);
                out.push('\n');
            }
        }
        out
    }
}

/// A model's published per-class AP / AR with the averages printed beside
/// them, in the fixed class order.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReferenceColumn {
    pub tag: &'static str,
    pub ap: [f64; 5],
    pub ar: [f64; 5],
    pub printed: PrintedAverage,
}

pub const TABLE1_BASELINE: ReferenceColumn = ReferenceColumn {
    tag: "Mask R-CNN (image only)",
    ap: [0.429326, 0.125410, 0.043422, 0.113867, 0.030728],
    ar: [0.810000, 0.529412, 0.226519, 0.308642, 0.410959],
    printed: PrintedAverage {
        ap: 0.148551,
        ar: 0.457106,
    },
};

pub const TABLE1_MULTIMODAL: ReferenceColumn = ReferenceColumn {
    tag: "Mask R-CNN (images + fixations)",
    ap: [0.436229, 0.092772, 0.052553, 0.010061, 0.001856],
    ar: [0.760000, 0.192513, 0.165746, 0.086420, 0.027397],
    printed: PrintedAverage {
        ap: 0.246415,
        ar: 0.144261,
    },
};

impl ReferenceColumn {
    pub fn report(&self) -> MetricsReport {
        let rows: Vec<ClassMetrics> = ClassLabel::ALL
            .iter()
            .enumerate()
            .map(|(i, &c)| ClassMetrics::published(c, self.ap[i], self.ar[i]))
            .collect();
        let mut meta = ReportMeta::new(self.tag, OverlapKind::IoBB, 0.5);
        meta.printed_average = Some(self.printed);
        build_report(&rows, meta)
    }
}
