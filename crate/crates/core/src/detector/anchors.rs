//! Anchor grid and the (tx, ty, tw, th) box parameterization.

use crate::geometry::BBox;

/// Upper bound on `tw`/`th` before exponentiation.
pub const MAX_LOG_SCALE: f64 = 2.772588722239781; // ln 16

/// One anchor per (cell, scale, ratio), cell-major then scale then ratio.
///
/// Anchors are centred on cell centres mapped to image coordinates
/// (`(j + 0.5) * stride`). With `ratio = h / w`, the anchor has
/// `w = s / sqrt(ratio)` and `h = s * sqrt(ratio)`. Anchors are clipped to
/// the image.
pub fn generate_anchors(
    feat_h: usize,
    feat_w: usize,
    stride: f64,
    scales: &[f64],
    ratios: &[f64],
    img_w: f64,
    img_h: f64,
) -> Vec<BBox> {
    let mut out = Vec::with_capacity(feat_h * feat_w * scales.len() * ratios.len());
    for i in 0..feat_h {
        for j in 0..feat_w {
            let cx = (j as f64 + 0.5) * stride;
            let cy = (i as f64 + 0.5) * stride;
            for &s in scales {
                for &r in ratios {
                    let w = s / r.sqrt();
                    let h = s * r.sqrt();
                    out.push(BBox::from_center(cx, cy, w, h).clip(img_w, img_h));
                }
            }
        }
    }
    out
}

/// Regression target that maps `anchor` onto `gt`.
pub fn encode(anchor: &BBox, gt: &BBox) -> [f64; 4] {
    let (ax, ay) = anchor.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    let (gx, gy) = gt.center();
    [
        (gx - ax) / aw,
        (gy - ay) / ah,
        (gt.width() / aw).ln(),
        (gt.height() / ah).ln(),
    ]
}

/// Inverse of [`encode`], without clipping. Scale deltas are capped at ln 16.
pub fn decode_unclipped(anchor: &BBox, d: &[f64; 4]) -> BBox {
    let (ax, ay) = anchor.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    let cx = ax + d[0] * aw;
    let cy = ay + d[1] * ah;
    let w = aw * d[2].min(MAX_LOG_SCALE).exp();
    let h = ah * d[3].min(MAX_LOG_SCALE).exp();
    BBox::from_center(cx, cy, w, h)
}

/// Applies deltas to anchors and clips the results to the image.
pub fn decode_boxes(anchors: &[BBox], deltas: &[[f64; 4]], img_w: f64, img_h: f64) -> Vec<BBox> {
    assert_eq!(anchors.len(), deltas.len(), "one delta per anchor");
    anchors
        .iter()
        .zip(deltas)
        .map(|(a, d)| decode_unclipped(a, d).clip(img_w, img_h))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn count_and_shape() {
        let a = generate_anchors(8, 8, 8.0, &[8.0, 16.0, 24.0], &[1.0], 64.0, 64.0);
        assert_eq!(a.len(), 192);
        // interior anchor with ratio 1 is square with side = scale
        let mid = a[(3 * 8 + 3) * 3 + 1];
        assert_eq!((mid.width(), mid.height()), (16.0, 16.0));
        assert!(a.iter().all(|b| b.x_min >= 0.0 && b.x_max <= 64.0 && b.y_min >= 0.0 && b.y_max <= 64.0));
    }

    #[test]
    fn ratio_sets_aspect() {
        let a = generate_anchors(1, 1, 64.0, &[16.0], &[4.0], 64.0, 64.0);
        assert!((a[0].height() / a[0].width() - 4.0).abs() < 1e-12);
    }

    #[test]
    fn zero_deltas_are_identity() {
        let a = BBox::new(3.0, 4.0, 20.0, 30.0);
        assert_eq!(decode_boxes(&[a], &[[0.0; 4]], 64.0, 64.0)[0], a);
    }

    #[test]
    fn log_two_doubles_width() {
        let a = BBox::new(10.0, 10.0, 20.0, 20.0);
        let b = decode_unclipped(&a, &[0.0, 0.0, 2f64.ln(), 0.0]);
        assert!((b.width() - 20.0).abs() < 1e-12);
        assert_eq!(b.center(), a.center());
        assert_eq!(b.height(), 10.0);
    }

    #[test]
    fn scale_delta_is_capped() {
        let a = BBox::new(0.0, 0.0, 1.0, 1.0);
        let b = decode_unclipped(&a, &[0.0, 0.0, 50.0, 50.0]);
        assert!((b.width() - 16.0).abs() < 1e-9);
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (0.0f64..100.0, 0.0f64..100.0, 0.5f64..60.0, 0.5f64..60.0)
            .prop_map(|(x, y, w, h)| BBox::new(x, y, x + w, y + h))
    }

    proptest! {
        #[test]
        fn decode_inverts_encode(a in arb_box(), g in arb_box()) {
            let d = encode(&a, &g);
            prop_assume!(d[2] < MAX_LOG_SCALE && d[3] < MAX_LOG_SCALE);
            let back = decode_unclipped(&a, &d);
            for (u, v) in back.to_array().iter().zip(g.to_array()) {
                prop_assert!((u - v).abs() < 1e-9);
            }
            // and the other way round: deltas are recovered
            let again = encode(&a, &back);
            for (u, v) in again.iter().zip(d) {
                prop_assert!((u - v).abs() < 1e-9);
            }
        }
    }
}
