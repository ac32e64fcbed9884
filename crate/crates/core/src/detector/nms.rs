use std::cmp::Ordering;

use crate::geometry::BBox;

/// Greedy non-maximum suppression.
///
/// Boxes are visited in descending score order (lower index first on equal
/// scores); a box is dropped when its IoU with an already kept box exceeds
/// `iou_thresh`. Returns kept indices in visiting order.
pub fn nms(boxes: &[BBox], scores: &[f64], iou_thresh: f64) -> Vec<usize> {
    assert_eq!(boxes.len(), scores.len(), "one score per box");
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| score_order(scores[a], scores[b]).then(a.cmp(&b)));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        if kept.iter().all(|&k| boxes[k].iou(&boxes[i]) <= iou_thresh) {
            kept.push(i);
        }
    }
    kept
}

/// Descending by score.
pub(crate) fn score_order(a: f64, b: f64) -> Ordering {
    b.total_cmp(&a)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Repeatedly take the best remaining box and discard everything that
    /// overlaps it too much.
    fn brute_force(boxes: &[BBox], scores: &[f64], t: f64) -> Vec<usize> {
        let mut alive: Vec<bool> = vec![true; boxes.len()];
        let mut kept = Vec::new();
        loop {
            let mut best: Option<usize> = None;
            for i in 0..boxes.len() {
                if alive[i] && best.is_none_or(|b| scores[i] > scores[b]) {
                    best = Some(i);
                }
            }
            let Some(b) = best else { break };
            kept.push(b);
            for i in 0..boxes.len() {
                if alive[i] && boxes[i].iou(&boxes[b]) > t {
                    alive[i] = false;
                }
            }
            alive[b] = false;
        }
        kept
    }

    #[test]
    fn single_box_kept() {
        assert_eq!(nms(&[BBox::new(0.0, 0.0, 1.0, 1.0)], &[0.1], 0.5), vec![0]);
    }

    #[test]
    fn identical_boxes_keep_best() {
        let b = BBox::new(1.0, 1.0, 5.0, 5.0);
        assert_eq!(nms(&[b, b], &[0.8, 0.9], 0.5), vec![1]);
        assert_eq!(nms(&[b, b], &[0.9, 0.9], 0.5), vec![0]);
    }

    proptest! {
        #[test]
        fn matches_brute_force(raw in prop::collection::vec((0u8..40, 0u8..40, 1u8..20, 1u8..20, 0u8..10), 1..50), t in 0.05f64..0.95) {
            let boxes: Vec<BBox> = raw.iter().map(|&(x, y, w, h, _)| {
                BBox::new(x as f64, y as f64, (x + w) as f64, (y + h) as f64)
            }).collect();
            // coarse scores force plenty of ties
            let scores: Vec<f64> = raw.iter().map(|r| r.4 as f64 / 10.0).collect();
            prop_assert_eq!(nms(&boxes, &scores, t), brute_force(&boxes, &scores, t));
        }
    }
}
