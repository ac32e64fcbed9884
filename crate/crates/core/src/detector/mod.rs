//! Two-branch Mask R-CNN-style detector at desk scale.
//!
//! Image and fixation map each get a small conv backbone (stride 8). The two
//! are combined element-wise, either on the raw grids before a single
//! backbone or on the backbone outputs. A region proposal network scores a
//! fixed anchor grid; the best proposals are pooled with ROI-align and fed to
//! a classification / box-regression head and a per-class mask head.

mod anchors;
mod config;
mod gradcheck;
mod loss;
mod model;
mod nms;
mod roi_align;
mod targets;

use serde::{Deserialize, Serialize};

use crate::dataset::ClassLabel;
use crate::geometry::BBox;

pub use anchors::{decode_boxes, decode_unclipped, encode, generate_anchors, MAX_LOG_SCALE};
pub use config::{Fusion, FusionPoint, ModelConfig, FEATURE_STRIDE};
pub use gradcheck::{detector_op_grad_suite, end_to_end_grad_check, GradCheckReport};
pub use loss::{bce_with_logits, smooth_l1, LossBreakdown};
pub use model::{Checkpoint, Detector, DetectorOutput, DetectorParams, Mode, OutputGrads, PlanSource, RawOutput, TrainPass};
pub use nms::nms;
pub use roi_align::{roi_align, roi_align_backward, RoiTaps};
pub use targets::{assign_targets, crop_mask, AssignParams, AssignedTarget, MatchState, RoiSample, RpnSample, TrainPlan};

/// One predicted abnormality.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub label: ClassLabel,
    pub score: f64,
    /// Mask probabilities on the ROI grid, row-major `mask_size x mask_size`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub mask: Vec<f64>,
    #[serde(default)]
    pub mask_size: usize,
}

impl Detection {
    /// Nearest-neighbour paste of the ROI mask into an image-sized grid.
    pub fn paste_mask(&self, img_w: usize, img_h: usize) -> Vec<f64> {
        let mut out = vec![0.0; img_w * img_h];
        if self.mask_size == 0 || self.mask.is_empty() {
            return out;
        }
        let b = &self.bbox;
        let m = self.mask_size as f64;
        for y in 0..img_h {
            let py = y as f64 + 0.5;
            if py < b.y_min || py >= b.y_max {
                continue;
            }
            let my = (((py - b.y_min) / b.height() * m) as usize).min(self.mask_size - 1);
            for x in 0..img_w {
                let px = x as f64 + 0.5;
                if px < b.x_min || px >= b.x_max {
                    continue;
                }
                let mx = (((px - b.x_min) / b.width() * m) as usize).min(self.mask_size - 1);
                out[y * img_w + x] = self.mask[my * self.mask_size + mx];
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paste_mask_fills_box_only() {
        let d = Detection {
            bbox: BBox::new(2.0, 2.0, 6.0, 6.0),
            label: ClassLabel::Atelectasis,
            score: 0.9,
            mask: vec![1.0, 0.5, 0.25, 0.0],
            mask_size: 2,
        };
        let m = d.paste_mask(8, 8);
        assert_eq!(m[2 * 8 + 2], 1.0);
        assert_eq!(m[2 * 8 + 5], 0.5);
        assert_eq!(m[5 * 8 + 2], 0.25);
        assert_eq!(m[0], 0.0);
        assert_eq!(m.iter().filter(|&&v| v > 0.0).count(), 12);
    }

    #[test]
    fn detection_json_uses_box_key() {
        let d = Detection {
            bbox: BBox::new(1.0, 2.0, 3.0, 4.0),
            label: ClassLabel::Consolidation,
            score: 0.5,
            mask: vec![],
            mask_size: 0,
        };
        let s = serde_json::to_string(&d).unwrap();
        assert!(s.contains("\"box\":[1.0,2.0,3.0,4.0]"), "{s}");
        assert!(s.contains("\"label\":\"consolidation\""));
    }
}
