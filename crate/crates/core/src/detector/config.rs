use serde::{Deserialize, Serialize};

use crate::dataset::ClassLabel;
use crate::error::{Error, Result};
use crate::tensor::CombineMode;

/// How the fixation map enters the network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    /// Baseline: the fixation map is ignored and no fixation branch exists.
    ImageOnly,
    Sum,
    Mul,
}

impl Fusion {
    pub fn combine_mode(self) -> Option<CombineMode> {
        match self {
            Fusion::ImageOnly => None,
            Fusion::Sum => Some(CombineMode::Sum),
            Fusion::Mul => Some(CombineMode::Mul),
        }
    }
}

/// Where image and fixation map are combined.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionPoint {
    /// Raw grids are combined and a single backbone runs on the result.
    Input,
    /// Each modality has its own backbone; the feature maps are combined.
    Feature,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub img_size: usize,
    pub fusion: Fusion,
    pub fusion_point: FusionPoint,
    /// Channels of the backbone output; inner layers use C/4, C/2, C.
    pub feat_channels: usize,
    /// Anchor side lengths in pixels.
    pub anchor_scales: Vec<f64>,
    /// Anchor aspect ratios (height / width).
    pub anchor_ratios: Vec<f64>,
    pub rpn_pre_nms: usize,
    pub rpn_post_nms: usize,
    pub rpn_nms_thresh: f64,
    pub rpn_fg_thresh: f64,
    pub rpn_bg_thresh: f64,
    /// Anchors sampled per step for the objectness and RPN box losses.
    pub rpn_batch: usize,
    pub rpn_pos_fraction: f64,
    pub head_fg_thresh: f64,
    pub head_bg_thresh: f64,
    /// Proposals sampled per step for the head losses.
    pub head_batch: usize,
    pub head_pos_fraction: f64,
    pub roi_size: usize,
    pub head_hidden: usize,
    pub mask_channels: usize,
    /// Five abnormality classes plus background.
    pub n_classes: usize,
    pub score_thresh: f64,
    pub det_nms_thresh: f64,
    pub max_detections: usize,
    /// Kaiming gain for the output layers (RPN, class, box and mask logits).
    pub output_gain: f64,
    pub seed: u64,
}

pub const FEATURE_STRIDE: usize = 8;

impl ModelConfig {
    pub fn new(img_size: usize, fusion: Fusion, seed: u64) -> Self {
        let s = img_size as f64;
        Self {
            img_size,
            fusion,
            fusion_point: FusionPoint::Feature,
            feat_channels: 32,
            anchor_scales: vec![0.125 * s, 0.22 * s, 0.34 * s],
            anchor_ratios: vec![1.0],
            rpn_pre_nms: 200,
            rpn_post_nms: 50,
            rpn_nms_thresh: 0.7,
            rpn_fg_thresh: 0.7,
            rpn_bg_thresh: 0.3,
            rpn_batch: 64,
            rpn_pos_fraction: 0.5,
            head_fg_thresh: 0.5,
            head_bg_thresh: 0.5,
            head_batch: 32,
            head_pos_fraction: 0.25,
            roi_size: 7,
            head_hidden: 64,
            mask_channels: 8,
            n_classes: ClassLabel::COUNT + 1,
            score_thresh: 0.05,
            det_nms_thresh: 0.5,
            max_detections: 100,
            output_gain: 0.1,
            seed,
        }
    }

    pub fn with_fusion_point(mut self, point: FusionPoint) -> Self {
        self.fusion_point = point;
        self
    }

    pub fn feat_size(&self) -> usize {
        self.img_size / FEATURE_STRIDE
    }

    pub fn anchors_per_cell(&self) -> usize {
        self.anchor_scales.len() * self.anchor_ratios.len()
    }

    /// True when a separate fixation backbone exists.
    pub fn has_fixation_branch(&self) -> bool {
        self.fusion != Fusion::ImageOnly && self.fusion_point == FusionPoint::Feature
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidArgument(m));
        if self.img_size < 16 || self.img_size % FEATURE_STRIDE != 0 {
            return fail(format!("img_size must be a multiple of 8 and >= 16, got {}", self.img_size));
        }
        if self.feat_channels < 4 || self.feat_channels % 4 != 0 {
            return fail(format!("feat_channels must be a positive multiple of 4, got {}", self.feat_channels));
        }
        if self.anchor_scales.is_empty() || self.anchor_ratios.is_empty() {
            return fail("anchor scales and ratios must be non-empty".into());
        }
        if self.anchor_scales.iter().chain(&self.anchor_ratios).any(|v| !(*v > 0.0) || !v.is_finite()) {
            return fail("anchor scales and ratios must be positive".into());
        }
        for (name, fg, bg) in [
            ("rpn", self.rpn_fg_thresh, self.rpn_bg_thresh),
            ("head", self.head_fg_thresh, self.head_bg_thresh),
        ] {
            if !(0.0 <= bg && bg <= fg && fg <= 1.0 && fg > 0.0) {
                return fail(format!("{name} thresholds need 0 <= bg <= fg <= 1 and fg > 0, got fg {fg}, bg {bg}"));
            }
        }
        for (name, v) in [
            ("rpn_nms_thresh", self.rpn_nms_thresh),
            ("det_nms_thresh", self.det_nms_thresh),
        ] {
            if !(v > 0.0 && v < 1.0) {
                return fail(format!("{name} must lie in (0, 1), got {v}"));
            }
        }
        for (name, v) in [
            ("rpn_pos_fraction", self.rpn_pos_fraction),
            ("head_pos_fraction", self.head_pos_fraction),
            ("score_thresh", self.score_thresh),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return fail(format!("{name} must lie in [0, 1], got {v}"));
            }
        }
        if self.roi_size == 0 || self.head_hidden == 0 || self.mask_channels == 0 {
            return fail("roi_size, head_hidden and mask_channels must be >= 1".into());
        }
        if self.rpn_batch == 0 || self.head_batch == 0 || self.rpn_post_nms == 0 || self.rpn_pre_nms == 0 {
            return fail("sampling and proposal counts must be >= 1".into());
        }
        if self.n_classes != ClassLabel::COUNT + 1 {
            return fail(format!("n_classes must be {} (five classes plus background), got {}", ClassLabel::COUNT + 1, self.n_classes));
        }
        if !(self.output_gain > 0.0) {
            return fail("output_gain must be positive".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        let c = ModelConfig::new(64, Fusion::Sum, 1);
        c.validate().unwrap();
        assert_eq!(c.feat_size(), 8);
        assert_eq!(c.anchors_per_cell(), 3);
        assert!(c.has_fixation_branch());
        assert!(!ModelConfig::new(64, Fusion::ImageOnly, 1).has_fixation_branch());
    }

    #[test]
    fn rejects_bad_values() {
        let mut c = ModelConfig::new(60, Fusion::Sum, 1);
        assert!(c.validate().is_err());
        c = ModelConfig::new(64, Fusion::Sum, 1);
        c.rpn_bg_thresh = 0.8;
        assert!(c.validate().is_err());
        c = ModelConfig::new(64, Fusion::Sum, 1);
        c.anchor_scales.clear();
        assert!(c.validate().is_err());
        c = ModelConfig::new(64, Fusion::Sum, 1);
        c.n_classes = 3;
        assert!(c.validate().is_err());
    }

    #[test]
    fn json_round_trip() {
        let c = ModelConfig::new(64, Fusion::Mul, 9).with_fusion_point(FusionPoint::Input);
        let s = serde_json::to_string(&c).unwrap();
        assert!(s.contains("\"fusion\":\"mul\""));
        assert!(s.contains("\"fusion_point\":\"input\""));
        assert_eq!(serde_json::from_str::<ModelConfig>(&s).unwrap(), c);
    }
}
