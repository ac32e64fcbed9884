//! Finite-difference check of the full detector loss against backprop.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::config::{Fusion, FusionPoint, ModelConfig};
use super::loss::{bce_with_logits, smooth_l1, softmax_cross_entropy};
use super::model::{Detector, PlanSource};
use super::roi_align::{roi_align, roi_align_backward};
use super::targets::{RoiSample, RpnSample, TrainPlan};
use crate::dataset::GrayImage;
use crate::error::Result;
use crate::gaze::FixationMap;
use crate::geometry::BBox;
use crate::tensor::{grad_check, max_relative_error, Tensor};

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub seed: u64,
    pub fusion: Fusion,
    pub fusion_point: FusionPoint,
    /// `(layer name, parameter count, max relative error)`.
    pub layers: Vec<(String, usize, f64)>,
}

impl GradCheckReport {
    pub fn max_error(&self) -> f64 {
        self.layers.iter().map(|l| l.2).fold(0.0, f64::max)
    }
}

/// Small fused detector (32x32 input, one region) with randomized weights,
/// biases, inputs and a fixed training plan. Every parameter is perturbed by
/// `±eps` and the central difference of the total loss is compared with the
/// analytic gradient. Fusion settings cycle with the seed.
pub fn end_to_end_grad_check(seed: u64, eps: f64) -> Result<GradCheckReport> {
    let (fusion, point) = match seed % 4 {
        0 => (Fusion::Sum, FusionPoint::Feature),
        1 => (Fusion::Mul, FusionPoint::Feature),
        2 => (Fusion::Sum, FusionPoint::Input),
        _ => (Fusion::Mul, FusionPoint::Input),
    };
    let mut config = ModelConfig::new(32, fusion, seed).with_fusion_point(point);
    config.feat_channels = 8;
    config.head_hidden = 8;
    config.roi_size = 3;
    config.mask_channels = 4;
    let mut det = Detector::new(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    // non-zero biases keep ReLU inputs away from exact zeros
    for p in det.params.layers_mut() {
        p.bias.data_mut().iter_mut().for_each(|b| *b = rng.random_range(-0.1..0.1));
    }
    let n = 32 * 32;
    let image = GrayImage::new(32, 32, (0..n).map(|_| rng.random_range(0.0..1.0)).collect())?;
    let map = FixationMap {
        width: 32,
        height: 32,
        values: (0..n).map(|_| rng.random_range(0.0..1.0)).collect(),
    };
    let n_anchors = det.anchors().len();
    let mut delta = || -> [f64; 4] { std::array::from_fn(|_| rng.random_range(-1.5..1.5)) };
    let rpn: Vec<RpnSample> = (0..6)
        .map(|i| RpnSample {
            anchor: (i * 7 + seed as usize) % n_anchors,
            positive: i < 2,
            deltas: delta(),
        })
        .collect();
    let deltas = delta();
    let x0 = rng.random_range(0.0..16.0);
    let y0 = rng.random_range(0.0..16.0);
    let bbox = BBox::new(x0, y0, x0 + rng.random_range(6.0..16.0), y0 + rng.random_range(6.0..16.0));
    let plan = TrainPlan {
        rpn,
        rois: vec![RoiSample {
            bbox,
            label: rng.random_range(1..6),
            deltas,
            mask: (0..9).map(|_| rng.random_range(0..2) as f64).collect(),
        }],
    };

    let source = PlanSource::Fixed(&plan);
    det.train_step_grads(&image, Some(&map), source)?;
    let n_layers = det.params.layers_mut().len();
    let mut layers = Vec::with_capacity(n_layers);
    for li in 0..n_layers {
        let (name, analytic) = {
            let mut named = det.params.named_layers_mut();
            let (name, p) = &mut named[li];
            let mut g = p.weight.grad().expect("backward allocates every gradient").to_vec();
            g.extend_from_slice(p.bias.grad().expect("backward allocates every gradient"));
            (name.clone(), g)
        };
        let mut numeric = vec![0.0; analytic.len()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let orig = param_at(&mut det, li, j, None);
            param_at(&mut det, li, j, Some(orig + eps));
            let plus = det.loss(&image, Some(&map), source)?.total;
            param_at(&mut det, li, j, Some(orig - eps));
            let minus = det.loss(&image, Some(&map), source)?.total;
            param_at(&mut det, li, j, Some(orig));
            *slot = (plus - minus) / (2.0 * eps);
        }
        layers.push((name, analytic.len(), max_relative_error(&analytic, &numeric)));
    }
    Ok(GradCheckReport {
        seed,
        fusion,
        fusion_point: point,
        layers,
    })
}

/// Finite-difference checks of ROI-align and the three loss primitives.
/// Returns `(op, max relative error)` per op.
pub fn detector_op_grad_suite(seed: u64, eps: f64) -> Result<Vec<(&'static str, f64)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut out = Vec::new();
    let vec_of = |n: usize, rng: &mut ChaCha8Rng, lo: f64, hi: f64| -> Vec<f64> { (0..n).map(|_| rng.random_range(lo..hi)).collect() };

    let (c, h) = (rng.random_range(1..=3), rng.random_range(4..=7));
    let size = rng.random_range(2..=4);
    let scale = [1.0, 0.5, 0.25][rng.random_range(0..3)];
    let extent = h as f64 / scale;
    let boxes: Vec<BBox> = (0..2)
        .map(|_| {
            let x0 = rng.random_range(-0.1 * extent..0.7 * extent);
            let y0 = rng.random_range(-0.1 * extent..0.7 * extent);
            BBox::new(x0, y0, x0 + rng.random_range(0.1..0.5) * extent, y0 + rng.random_range(0.1..0.5) * extent)
        })
        .collect();
    let feat = Tensor::new(vec![1, c, h, h], vec_of(c * h * h, &mut rng, -1.0, 1.0))?;
    let r = vec_of(boxes.len() * c * size * size, &mut rng, -1.0, 1.0);
    let err = grad_check(
        |t| {
            let (y, _) = roi_align(&t[0], &boxes, size, scale)?;
            Ok(Tensor::scalar(y.data().iter().zip(&r).map(|(a, b)| a * b).sum()))
        },
        |t| {
            let (y, taps) = roi_align(&t[0], &boxes, size, scale)?;
            let g = Tensor::new(y.shape().to_vec(), r.clone())?;
            Ok(vec![roi_align_backward(t[0].shape(), &taps, &g)?])
        },
        &[feat],
        eps,
    )?;
    out.push(("roi_align", err));

    let n = 8;
    let x = Tensor::new(vec![n], vec_of(n, &mut rng, -6.0, 6.0))?;
    let y: Vec<f64> = (0..n).map(|_| rng.random_range(0..2) as f64).collect();
    let err = grad_check(
        |t| Ok(Tensor::scalar(t[0].data().iter().zip(&y).map(|(&x, &y)| bce_with_logits(x, y).0).sum())),
        |t| Ok(vec![Tensor::new(vec![n], t[0].data().iter().zip(&y).map(|(&x, &y)| bce_with_logits(x, y).1).collect())?]),
        &[x],
        eps,
    )?;
    out.push(("bce_with_logits", err));

    // keep clear of the |x| = 1 seam
    let x: Vec<f64> = (0..n)
        .map(|_| {
            let v: f64 = rng.random_range(-3.0..3.0);
            if (v.abs() - 1.0).abs() < 0.05 { v * 1.1 } else { v }
        })
        .collect();
    let err = grad_check(
        |t| Ok(Tensor::scalar(t[0].data().iter().map(|&x| smooth_l1(x).0).sum())),
        |t| Ok(vec![Tensor::new(vec![n], t[0].data().iter().map(|&x| smooth_l1(x).1).collect())?]),
        &[Tensor::new(vec![n], x)?],
        eps,
    )?;
    out.push(("smooth_l1", err));

    let k = rng.random_range(2..=6);
    let target = rng.random_range(0..k);
    let logits = Tensor::new(vec![k], vec_of(k, &mut rng, -4.0, 4.0))?;
    let err = grad_check(
        |t| Ok(Tensor::scalar(softmax_cross_entropy(t[0].data(), target).0)),
        |t| Ok(vec![Tensor::new(vec![k], softmax_cross_entropy(t[0].data(), target).1)?]),
        &[logits],
        eps,
    )?;
    out.push(("softmax_cross_entropy", err));
    Ok(out)
}

/// Reads (and optionally overwrites) element `j` of layer `li`, counting
/// weights first and then biases.
fn param_at(det: &mut Detector, li: usize, j: usize, set: Option<f64>) -> f64 {
    let mut layers = det.params.layers_mut();
    let p = &mut layers[li];
    let nw = p.weight.len();
    let slot = if j < nw {
        &mut p.weight.data_mut()[j]
    } else {
        &mut p.bias.data_mut()[j - nw]
    };
    if let Some(v) = set {
        *slot = v;
    }
    *slot
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detector_ops_pass() {
        for seed in 0..5 {
            for (op, e) in detector_op_grad_suite(seed, 1e-6).unwrap() {
                assert!(e < 1e-6, "seed {seed} {op}: {e}");
            }
        }
    }

    #[test]
    fn two_seeds_pass() {
        for seed in [0, 3] {
            let r = end_to_end_grad_check(seed, 1e-6).unwrap();
            assert!(r.max_error() < 1e-4, "{r:?}");
            assert!(r.layers.iter().all(|l| l.1 > 0));
        }
    }
}
