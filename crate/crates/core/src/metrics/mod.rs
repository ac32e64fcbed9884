//! Box overlap, detection matching, and per-class AP / AR.

mod report;

use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::dataset::ClassLabel;
use crate::detector::Detection;
use crate::error::{Error, Result};
use crate::geometry::BBox;

pub use report::{
    build_report, AverageRow, ClassMetrics, Comparison, MetricsReport, PrintedAverage, ReferenceColumn,
    ReportMeta, TABLE1_BASELINE, TABLE1_MULTIMODAL,
};

/// Intersection over the predicted box's own area.
pub fn iobb(pred: &BBox, gt: &BBox) -> Result<f64> {
    let a = pred.area();
    if !(a > 0.0) {
        return Err(Error::invalid(format!("iobb: predicted box {:?} has no area", pred.to_array())));
    }
    Ok((pred.intersection_area(gt) / a).clamp(0.0, 1.0))
}

/// Intersection over union.
pub fn iou(a: &BBox, b: &BBox) -> Result<f64> {
    if !(a.area() > 0.0) && !(b.area() > 0.0) {
        return Err(Error::invalid("iou: both boxes have zero area"));
    }
    Ok(a.iou(b).clamp(0.0, 1.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OverlapKind {
    #[serde(rename = "iobb")]
    IoBB,
    #[serde(rename = "iou")]
    IoU,
}

impl OverlapKind {
    pub fn overlap(self, pred: &BBox, gt: &BBox) -> Result<f64> {
        match self {
            OverlapKind::IoBB => iobb(pred, gt),
            OverlapKind::IoU => iou(pred, gt),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            OverlapKind::IoBB => "IoBB",
            OverlapKind::IoU => "IoU",
        }
    }
}

impl fmt::Display for OverlapKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl std::str::FromStr for OverlapKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "iobb" => Ok(OverlapKind::IoBB),
            "iou" => Ok(OverlapKind::IoU),
            _ => Err(Error::invalid(format!("unknown metric `{s}` (expected iobb or iou)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricConfig {
    pub kind: OverlapKind,
    pub thresh: f64,
    /// Detections per reading and class considered for AR.
    pub max_dets: usize,
}

impl MetricConfig {
    pub fn new(kind: OverlapKind, thresh: f64) -> Self {
        Self {
            kind,
            thresh,
            max_dets: 100,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.thresh > 0.0 && self.thresh <= 1.0) {
            return Err(Error::invalid(format!("threshold must lie in (0, 1], got {}", self.thresh)));
        }
        if self.max_dets == 0 {
            return Err(Error::invalid("max_dets must be >= 1"));
        }
        Ok(())
    }
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self::new(OverlapKind::IoBB, 0.5)
    }
}

/// A scored box as seen by the matcher.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoredBox {
    pub bbox: BBox,
    pub score: f64,
}

impl From<&Detection> for ScoredBox {
    fn from(d: &Detection) -> Self {
        Self {
            bbox: d.bbox,
            score: d.score,
        }
    }
}

/// Descending score, then box coordinates.
fn rank_order(a: &ScoredBox, b: &ScoredBox) -> Ordering {
    b.score.total_cmp(&a.score).then(a.bbox.lex_cmp(&b.bbox))
}

/// Indices of `dets` in ranking order.
fn ranking(dets: &[ScoredBox]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&i, &j| rank_order(&dets[i], &dets[j]));
    order
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatchResult {
    /// Per detection, in input order: the matched gt index, or `None` (FP).
    pub det_to_gt: Vec<Option<usize>>,
    /// Per gt: whether some detection claimed it.
    pub gt_matched: Vec<bool>,
}

impl MatchResult {
    pub fn n_tp(&self) -> usize {
        self.det_to_gt.iter().filter(|m| m.is_some()).count()
    }
}

/// Greedy matching of one class's detections in one reading.
///
/// Detections are visited by descending score; each claims the unclaimed
/// gt with the highest overlap, provided that overlap is `>= thresh`
/// (ties go to the lower gt index). Unmatched detections are false
/// positives.
pub fn match_detections(dets: &[ScoredBox], gts: &[BBox], thresh: f64, kind: OverlapKind) -> Result<MatchResult> {
    let mut det_to_gt = vec![None; dets.len()];
    let mut gt_matched = vec![false; gts.len()];
    for i in ranking(dets) {
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if gt_matched[g] {
                continue;
            }
            let o = kind.overlap(&dets[i].bbox, gt)?;
            if o >= thresh && best.is_none_or(|(_, bo)| o > bo) {
                best = Some((g, o));
            }
        }
        if let Some((g, _)) = best {
            gt_matched[g] = true;
            det_to_gt[i] = Some(g);
        }
    }
    Ok(MatchResult {
        det_to_gt,
        gt_matched,
    })
}

/// One reading's detections and ground truth for a single class.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ClassSample {
    pub dets: Vec<ScoredBox>,
    pub gts: Vec<BBox>,
}

/// Pooled counts for one class over many readings.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassCurve {
    /// `(score, is_tp)` for every ranked detection, highest score first.
    pub ranked: Vec<(f64, bool)>,
    pub n_gt: usize,
    /// Gts matched by the top `max_dets` detections of their reading.
    pub recalled: usize,
}

/// Matches every reading, keeps the top `max_dets` per reading, and pools the
/// results in a global ranking (ties: reading order, then box).
pub fn class_curve(samples: &[ClassSample], cfg: &MetricConfig) -> Result<ClassCurve> {
    let mut pooled: Vec<(ScoredBox, usize, bool)> = Vec::new();
    let mut n_gt = 0;
    let mut recalled = 0;
    for (r, s) in samples.iter().enumerate() {
        let order = ranking(&s.dets);
        let top: Vec<ScoredBox> = order.iter().take(cfg.max_dets).map(|&i| s.dets[i]).collect();
        let m = match_detections(&top, &s.gts, cfg.thresh, cfg.kind)?;
        n_gt += s.gts.len();
        recalled += m.gt_matched.iter().filter(|&&b| b).count();
        pooled.extend(top.iter().zip(&m.det_to_gt).map(|(d, g)| (*d, r, g.is_some())));
    }
    pooled.sort_by(|a, b| rank_order(&a.0, &b.0).then(a.1.cmp(&b.1)));
    Ok(ClassCurve {
        ranked: pooled.into_iter().map(|(d, _, tp)| (d.score, tp)).collect(),
        n_gt,
        recalled,
    })
}

impl ClassCurve {
    /// All-point area under the precision envelope; `None` without gts.
    pub fn average_precision(&self) -> Option<f64> {
        if self.n_gt == 0 {
            return None;
        }
        let mut tp = 0usize;
        let mut points: Vec<(f64, f64)> = Vec::with_capacity(self.ranked.len());
        for (k, &(_, is_tp)) in self.ranked.iter().enumerate() {
            tp += is_tp as usize;
            points.push((tp as f64 / self.n_gt as f64, tp as f64 / (k + 1) as f64));
        }
        let mut envelope = 0.0f64;
        for p in points.iter_mut().rev() {
            envelope = envelope.max(p.1);
            p.1 = envelope;
        }
        let mut ap = 0.0;
        let mut prev_recall = 0.0;
        for (r, p) in points {
            ap += (r - prev_recall) * p;
            prev_recall = r;
        }
        Some(ap)
    }

    pub fn average_recall(&self) -> Option<f64> {
        (self.n_gt > 0).then(|| self.recalled as f64 / self.n_gt as f64)
    }

    pub fn n_tp(&self) -> usize {
        self.ranked.iter().filter(|r| r.1).count()
    }

    /// Fraction of ranked detections that are true positives.
    pub fn precision(&self) -> Option<f64> {
        (!self.ranked.is_empty()).then(|| self.n_tp() as f64 / self.ranked.len() as f64)
    }
}

/// AP for one reading's detections of one class.
pub fn average_precision(dets: &[ScoredBox], gts: &[BBox], thresh: f64, kind: OverlapKind) -> Result<Option<f64>> {
    let cfg = MetricConfig {
        kind,
        thresh,
        max_dets: usize::MAX,
    };
    let sample = ClassSample {
        dets: dets.to_vec(),
        gts: gts.to_vec(),
    };
    Ok(class_curve(&[sample], &cfg)?.average_precision())
}

/// Recall using the top `max_dets` detections.
pub fn average_recall(
    dets: &[ScoredBox],
    gts: &[BBox],
    thresh: f64,
    kind: OverlapKind,
    max_dets: usize,
) -> Result<Option<f64>> {
    let cfg = MetricConfig { kind, thresh, max_dets };
    let sample = ClassSample {
        dets: dets.to_vec(),
        gts: gts.to_vec(),
    };
    Ok(class_curve(&[sample], &cfg)?.average_recall())
}

/// Ground truth for one reading: `(box, class)` pairs.
pub type GroundTruth = Vec<(BBox, ClassLabel)>;

/// Per-class metrics over a set of readings, in fixed class order.
pub fn evaluate_detections(per_reading: &[(Vec<Detection>, GroundTruth)], cfg: &MetricConfig) -> Result<Vec<ClassMetrics>> {
    cfg.validate()?;
    ClassLabel::ALL
        .iter()
        .map(|&class| {
            let samples: Vec<ClassSample> = per_reading
                .iter()
                .map(|(dets, gts)| ClassSample {
                    dets: dets.iter().filter(|d| d.label == class).map(ScoredBox::from).collect(),
                    gts: gts.iter().filter(|g| g.1 == class).map(|g| g.0).collect(),
                })
                .collect();
            let curve = class_curve(&samples, cfg)?;
            Ok(ClassMetrics {
                class,
                ap: curve.average_precision(),
                ar: curve.average_recall(),
                precision: curve.precision(),
                recall: curve.average_recall(),
                n_gt: curve.n_gt,
                n_det: curve.ranked.len(),
            })
        })
        .collect()
}
