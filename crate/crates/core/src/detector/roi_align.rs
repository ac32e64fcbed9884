//! ROI-align with half-pixel alignment and a 2x2 sampling grid per bin.
//!
//! Feature value `(i, j)` sits at image coordinate `((j + 0.5), (i + 0.5)) /
//! spatial_scale`. Each output bin averages four bilinear samples placed on a
//! regular grid inside the bin. Samples more than one cell outside the map
//! contribute zero; samples between the border and that limit are clamped.

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::tensor::Tensor;

pub const SAMPLING_RATIO: usize = 2;

/// Bilinear taps for one box: per output cell, (flat spatial index, weight).
#[derive(Clone, Debug)]
pub struct RoiTaps {
    cells: Vec<Vec<(usize, f64)>>,
}

fn taps_for_box(
    b: &BBox,
    out_size: usize,
    spatial_scale: f64,
    feat_h: usize,
    feat_w: usize,
) -> Result<RoiTaps> {
    if !b.is_valid() {
        return Err(Error::invalid(format!("roi_align: degenerate box {:?}", b.to_array())));
    }
    let x0 = b.x_min * spatial_scale - 0.5;
    let y0 = b.y_min * spatial_scale - 0.5;
    let bin_w = b.width() * spatial_scale / out_size as f64;
    let bin_h = b.height() * spatial_scale / out_size as f64;
    let n = (SAMPLING_RATIO * SAMPLING_RATIO) as f64;
    let mut cells = Vec::with_capacity(out_size * out_size);
    for oy in 0..out_size {
        for ox in 0..out_size {
            let mut taps = Vec::with_capacity(16);
            for sy in 0..SAMPLING_RATIO {
                let y = y0 + bin_h * (oy as f64 + (sy as f64 + 0.5) / SAMPLING_RATIO as f64);
                for sx in 0..SAMPLING_RATIO {
                    let x = x0 + bin_w * (ox as f64 + (sx as f64 + 0.5) / SAMPLING_RATIO as f64);
                    bilinear_taps(y, x, feat_h, feat_w, 1.0 / n, &mut taps);
                }
            }
            cells.push(taps);
        }
    }
    Ok(RoiTaps { cells })
}

fn bilinear_taps(y: f64, x: f64, h: usize, w: usize, scale: f64, taps: &mut Vec<(usize, f64)>) {
    if y < -1.0 || y > h as f64 || x < -1.0 || x > w as f64 {
        return;
    }
    let (y_lo, y_hi, ly) = axis(y.max(0.0), h);
    let (x_lo, x_hi, lx) = axis(x.max(0.0), w);
    let (hy, hx) = (1.0 - ly, 1.0 - lx);
    taps.push((y_lo * w + x_lo, scale * hy * hx));
    taps.push((y_lo * w + x_hi, scale * hy * lx));
    taps.push((y_hi * w + x_lo, scale * ly * hx));
    taps.push((y_hi * w + x_hi, scale * ly * lx));
}

fn axis(v: f64, len: usize) -> (usize, usize, f64) {
    let lo = v.floor() as usize;
    if lo >= len - 1 {
        (len - 1, len - 1, 0.0)
    } else {
        (lo, lo + 1, v - lo as f64)
    }
}

/// Pooled features for every box, shape `[K, C, out, out]`, plus the taps
/// needed for the backward pass.
pub fn roi_align(
    features: &Tensor,
    boxes: &[BBox],
    out_size: usize,
    spatial_scale: f64,
) -> Result<(Tensor, Vec<RoiTaps>)> {
    let [n, c, h, w] = features.dims4("roi_align")?;
    if n != 1 {
        return Err(Error::invalid("roi_align expects a single feature map (N = 1)"));
    }
    if out_size == 0 {
        return Err(Error::invalid("roi_align out_size must be >= 1"));
    }
    let taps: Vec<RoiTaps> = boxes
        .iter()
        .map(|b| taps_for_box(b, out_size, spatial_scale, h, w))
        .collect::<Result<_>>()?;
    let f = features.data();
    let cells = out_size * out_size;
    let mut out = vec![0.0; boxes.len() * c * cells];
    for (k, t) in taps.iter().enumerate() {
        for ch in 0..c {
            let plane = &f[ch * h * w..(ch + 1) * h * w];
            let dst = &mut out[(k * c + ch) * cells..(k * c + ch + 1) * cells];
            for (cell, taps) in t.cells.iter().enumerate() {
                dst[cell] = taps.iter().map(|&(i, wt)| wt * plane[i]).sum();
            }
        }
    }
    let pooled = Tensor::from_op("roi_align", vec![boxes.len(), c, out_size, out_size], out)?;
    Ok((pooled, taps))
}

/// Scatters the pooled-feature gradient back onto the feature map.
pub fn roi_align_backward(feat_shape: &[usize], taps: &[RoiTaps], grad_out: &Tensor) -> Result<Tensor> {
    let [_, c, h, w]: [usize; 4] = feat_shape
        .try_into()
        .map_err(|_| Error::invalid("roi_align_backward needs a 4-d feature shape"))?;
    let g = grad_out.data();
    let cells = taps.first().map_or(0, |t| t.cells.len());
    if g.len() < taps.len() * c * cells {
        return Err(Error::Shape {
            op: "roi_align_backward",
            left: grad_out.shape().to_vec(),
            right: vec![taps.len(), c, cells],
        });
    }
    let mut gf = vec![0.0; c * h * w];
    for (k, t) in taps.iter().enumerate() {
        for ch in 0..c {
            let plane = &mut gf[ch * h * w..(ch + 1) * h * w];
            let src = &g[(k * c + ch) * cells..(k * c + ch + 1) * cells];
            for (cell, taps) in t.cells.iter().enumerate() {
                for &(i, wt) in taps {
                    plane[i] += wt * src[cell];
                }
            }
        }
    }
    Tensor::from_op("roi_align_backward", feat_shape.to_vec(), gf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn constant_map_pools_to_constant() {
        let f = Tensor::full(&[1, 3, 8, 8], 2.5);
        let boxes = [
            BBox::new(0.0, 0.0, 64.0, 64.0),
            BBox::new(5.3, 7.1, 20.9, 12.2),
            BBox::new(60.0, 60.0, 64.0, 64.0),
        ];
        let (p, _) = roi_align(&f, &boxes, 3, 1.0 / 8.0).unwrap();
        assert_eq!(p.shape(), &[3, 3, 3, 3]);
        assert!(p.data().iter().all(|&v| (v - 2.5).abs() < 1e-12));
    }

    #[test]
    fn box_over_one_cell_of_2x2_map() {
        // cell (0,0) spans [0,1]x[0,1] at scale 1; the four samples land at
        // feature coords (-0.25 | 0.25) per axis. -0.25 clamps to 0 (weight
        // all on index 0); 0.25 blends 0.75 / 0.25. Per axis the average
        // weight is therefore 0.875 on index 0 and 0.125 on index 1.
        let (a, b, c, d) = (1.0, 2.0, 4.0, 8.0);
        let f = Tensor::new(vec![1, 1, 2, 2], vec![a, b, c, d]).unwrap();
        let (p, _) = roi_align(&f, &[BBox::new(0.0, 0.0, 1.0, 1.0)], 1, 1.0).unwrap();
        let want = 0.875 * 0.875 * a + 0.875 * 0.125 * (b + c) + 0.125 * 0.125 * d;
        assert!((p.data()[0] - want).abs() < 1e-12);
        // when the neighbours share the cell's value the pool returns that value
        let f = Tensor::new(vec![1, 1, 2, 2], vec![3.0, 3.0, 3.0, 9.0]).unwrap();
        let (p, _) = roi_align(&f, &[BBox::new(0.0, 0.0, 1.0, 1.0)], 1, 1.0).unwrap();
        assert!((p.data()[0] - (3.0 + 0.125 * 0.125 * 6.0)).abs() < 1e-12);
    }

    #[test]
    fn affine_map_reads_value_at_box_centre() {
        // f(i, j) = 1 + 2j + 4i; bilinear sampling reproduces affine maps, so
        // a small box centred on cell (1, 1) pools to f(1, 1) = 7
        let vals: Vec<f64> = (0..9).map(|k| 1.0 + 2.0 * (k % 3) as f64 + 4.0 * (k / 3) as f64).collect();
        let f = Tensor::new(vec![1, 1, 3, 3], vals).unwrap();
        let (p, _) = roi_align(&f, &[BBox::new(1.4, 1.3, 1.6, 1.7)], 1, 1.0).unwrap();
        assert!((p.data()[0] - 7.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_box_is_an_error() {
        let f = Tensor::zeros(&[1, 1, 4, 4]);
        assert!(roi_align(&f, &[BBox::new(1.0, 1.0, 1.0, 3.0)], 2, 1.0).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f = Tensor::new(vec![1, 2, 4, 4], (0..32).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let boxes = vec![BBox::new(0.3, 0.2, 2.9, 3.7), BBox::new(1.1, 0.6, 4.0, 2.2)];
        let weights: Vec<f64> = (0..2 * 2 * 9).map(|_| rng.random_range(-1.0..1.0)).collect();
        let err = grad_check(
            |t| {
                let (p, _) = roi_align(&t[0], &boxes, 3, 1.0)?;
                Ok(Tensor::scalar(p.data().iter().zip(&weights).map(|(a, b)| a * b).sum()))
            },
            |t| {
                let (p, taps) = roi_align(&t[0], &boxes, 3, 1.0)?;
                let g = Tensor::new(p.shape().to_vec(), weights.clone())?;
                Ok(vec![roi_align_backward(t[0].shape(), &taps, &g)?])
            },
            &[f],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "{err}");
    }
}
