//! Matching anchors / proposals to ground truth and sampling a training plan.

use rand::seq::SliceRandom;
use rand::Rng;

use super::anchors::encode;
use super::config::ModelConfig;
use crate::dataset::{BinaryMask, TargetBox};
use crate::geometry::BBox;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AssignParams {
    pub fg_thresh: f64,
    pub bg_thresh: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MatchState {
    Positive,
    Background,
    Ignored,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AssignedTarget {
    pub state: MatchState,
    /// Index of the best-overlapping target, if any target exists.
    pub gt: Option<usize>,
    /// Head class index: 0 for background, `ClassLabel::id() + 1` otherwise.
    pub label: usize,
    /// `encode(box, gt)` for positives, zero otherwise.
    pub deltas: [f64; 4],
    pub iou: f64,
}

/// Labels every box against the targets.
///
/// IoU >= `fg_thresh` is positive, IoU < `bg_thresh` background, anything
/// in between ignored. In addition, for every target the box(es) with the
/// highest non-zero IoU are forced positive so each target has at least one.
pub fn assign_targets(boxes: &[BBox], targets: &[TargetBox], p: &AssignParams) -> Vec<AssignedTarget> {
    let ious: Vec<Vec<f64>> = boxes
        .iter()
        .map(|b| targets.iter().map(|t| b.iou(&t.bbox)).collect())
        .collect();
    let mut out: Vec<AssignedTarget> = ious
        .iter()
        .map(|row| {
            let best = row
                .iter()
                .enumerate()
                .fold(None, |acc: Option<(usize, f64)>, (i, &v)| match acc {
                    Some((_, bv)) if bv >= v => acc,
                    _ => Some((i, v)),
                });
            let (gt, iou) = best.map_or((None, 0.0), |(i, v)| (Some(i), v));
            let state = if gt.is_some() && iou >= p.fg_thresh {
                MatchState::Positive
            } else if iou < p.bg_thresh {
                MatchState::Background
            } else {
                MatchState::Ignored
            };
            AssignedTarget {
                state,
                gt,
                label: 0,
                deltas: [0.0; 4],
                iou,
            }
        })
        .collect();
    for t in 0..targets.len() {
        let best = ious.iter().map(|row| row[t]).fold(0.0, f64::max);
        if best <= 0.0 {
            continue;
        }
        for (a, row) in out.iter_mut().zip(&ious) {
            if row[t] == best {
                a.state = MatchState::Positive;
            }
        }
    }
    for (a, b) in out.iter_mut().zip(boxes) {
        if a.state == MatchState::Positive {
            let t = &targets[a.gt.expect("positives have a target")];
            a.label = t.label.id() + 1;
            a.deltas = encode(b, &t.bbox);
        }
    }
    out
}

/// Samples the gt mask at the centres of a `size x size` grid laid over `b`.
pub fn crop_mask(mask: &BinaryMask, b: &BBox, size: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(size * size);
    let (bw, bh) = (b.width() / size as f64, b.height() / size as f64);
    for i in 0..size {
        let y = b.y_min + (i as f64 + 0.5) * bh;
        for j in 0..size {
            let x = b.x_min + (j as f64 + 0.5) * bw;
            let inside = x >= 0.0 && y >= 0.0 && (x as usize) < mask.width && (y as usize) < mask.height;
            out.push(if inside && mask.get(x as usize, y as usize) { 1.0 } else { 0.0 });
        }
    }
    out
}

/// One anchor contributing to the RPN losses.
#[derive(Clone, Debug, PartialEq)]
pub struct RpnSample {
    pub anchor: usize,
    pub positive: bool,
    pub deltas: [f64; 4],
}

/// One region fed through the heads.
#[derive(Clone, Debug, PartialEq)]
pub struct RoiSample {
    pub bbox: BBox,
    pub label: usize,
    pub deltas: [f64; 4],
    /// Mask target on the ROI grid; empty for background regions.
    pub mask: Vec<f64>,
}

/// Everything the loss needs besides the network outputs.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainPlan {
    pub rpn: Vec<RpnSample>,
    pub rois: Vec<RoiSample>,
}

/// Up to `batch` indices with at most `batch * pos_fraction` positives,
/// returned in ascending order.
fn sample_indices<R: Rng>(assigned: &[AssignedTarget], batch: usize, pos_fraction: f64, rng: &mut R) -> Vec<usize> {
    let mut pos: Vec<usize> = Vec::new();
    let mut neg: Vec<usize> = Vec::new();
    for (i, a) in assigned.iter().enumerate() {
        match a.state {
            MatchState::Positive => pos.push(i),
            MatchState::Background => neg.push(i),
            MatchState::Ignored => {}
        }
    }
    pos.shuffle(rng);
    neg.shuffle(rng);
    let n_pos = pos.len().min((batch as f64 * pos_fraction).floor() as usize);
    let n_neg = neg.len().min(batch - n_pos);
    let mut picked: Vec<usize> = pos[..n_pos].iter().chain(&neg[..n_neg]).copied().collect();
    picked.sort_unstable();
    picked
}

impl TrainPlan {
    /// Samples RPN anchors and head regions for one training step.
    /// Ground-truth boxes are appended to the proposals before matching.
    pub fn sample<R: Rng>(
        anchors: &[BBox],
        proposals: &[BBox],
        targets: &[TargetBox],
        config: &ModelConfig,
        rng: &mut R,
    ) -> TrainPlan {
        let rpn_assigned = assign_targets(
            anchors,
            targets,
            &AssignParams {
                fg_thresh: config.rpn_fg_thresh,
                bg_thresh: config.rpn_bg_thresh,
            },
        );
        let rpn = sample_indices(&rpn_assigned, config.rpn_batch, config.rpn_pos_fraction, rng)
            .into_iter()
            .map(|i| RpnSample {
                anchor: i,
                positive: rpn_assigned[i].state == MatchState::Positive,
                deltas: rpn_assigned[i].deltas,
            })
            .collect();

        let candidates: Vec<BBox> = proposals.iter().copied().chain(targets.iter().map(|t| t.bbox)).collect();
        let assigned = assign_targets(
            &candidates,
            targets,
            &AssignParams {
                fg_thresh: config.head_fg_thresh,
                bg_thresh: config.head_bg_thresh,
            },
        );
        let rois = sample_indices(&assigned, config.head_batch, config.head_pos_fraction, rng)
            .into_iter()
            .map(|i| Self::roi_sample(&candidates[i], &assigned[i], targets, config.roi_size))
            .collect();
        TrainPlan { rpn, rois }
    }

    pub(crate) fn roi_sample(b: &BBox, a: &AssignedTarget, targets: &[TargetBox], roi_size: usize) -> RoiSample {
        let positive = a.state == MatchState::Positive;
        RoiSample {
            bbox: *b,
            label: if positive { a.label } else { 0 },
            deltas: a.deltas,
            mask: match (positive, a.gt) {
                (true, Some(g)) => crop_mask(&targets[g].mask, b, roi_size),
                _ => Vec::new(),
            },
        }
    }

    pub fn n_rpn_positive(&self) -> usize {
        self.rpn.iter().filter(|s| s.positive).count()
    }

    pub fn n_roi_positive(&self) -> usize {
        self.rois.iter().filter(|r| r.label > 0).count()
    }
}
