use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Fixation;
use crate::error::{Error, Result};
use crate::fsutil;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    #[default]
    Duration,
    Uniform,
}

/// Max-normalized fixation heatmap aligned with the image grid, row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FixationMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

impl FixationMap {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self::filled(width, height, 0.0)
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Self {
            width,
            height,
            values: vec![value; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn max(&self) -> f64 {
        self.values.iter().cloned().fold(0.0, f64::max)
    }

    /// 1 where the value reaches `threshold`, 0 elsewhere.
    pub fn binarize(&self, threshold: f64) -> FixationMap {
        FixationMap {
            width: self.width,
            height: self.height,
            values: self
                .values
                .iter()
                .map(|&v| if v >= threshold { 1.0 } else { 0.0 })
                .collect(),
        }
    }

    pub fn to_pgm(&self) -> Vec<u8> {
        let px: Vec<u8> = self.values.iter().map(|&v| fsutil::to_u8(v)).collect();
        fsutil::encode_pgm(self.width, self.height, &px)
    }

    /// Writes the 8-bit PGM and, if requested, a little-endian f64 sidecar
    /// holding the exact values.
    pub fn write(&self, pgm_path: &Path, raw_path: Option<&Path>) -> Result<()> {
        fsutil::write_atomic(pgm_path, &self.to_pgm())?;
        if let Some(raw) = raw_path {
            fsutil::write_atomic(raw, &fsutil::encode_f64_le(&self.values))?;
        }
        Ok(())
    }

    pub fn read_raw(path: &Path, width: usize, height: usize) -> Result<Self> {
        let values = fsutil::decode_f64_le(path, &fsutil::read_bytes(path)?)?;
        if values.len() != width * height {
            return Err(Error::parse(
                path,
                1,
                format!("expected {} values, found {}", width * height, values.len()),
            ));
        }
        Ok(Self {
            width,
            height,
            values,
        })
    }
}

/// Sum of isotropic Gaussians centred on each fixation, evaluated at integer
/// pixel coordinates and divided by its maximum.
///
/// Weight is the fixation duration or 1. An empty fixation list gives an
/// all-zero map, as does a set whose total contribution underflows to zero.
pub fn render_heatmap(
    fixations: &[Fixation],
    width: usize,
    height: usize,
    sigma_px: f64,
    weighting: Weighting,
) -> Result<FixationMap> {
    if width == 0 || height == 0 {
        return Err(Error::invalid(format!(
            "heatmap dimensions must be positive, got {width}x{height}"
        )));
    }
    if !(sigma_px > 0.0) || !sigma_px.is_finite() {
        return Err(Error::invalid(format!("sigma must be positive, got {sigma_px}")));
    }
    let mut map = FixationMap::zeros(width, height);
    if fixations.is_empty() {
        return Ok(map);
    }
    let two_sigma_sq = 2.0 * sigma_px * sigma_px;
    for f in fixations {
        let w = match weighting {
            Weighting::Duration => f.duration_ms(),
            Weighting::Uniform => 1.0,
        };
        if w <= 0.0 {
            continue;
        }
        for y in 0..height {
            let dy = y as f64 - f.cy_px;
            let row = &mut map.values[y * width..(y + 1) * width];
            for (x, v) in row.iter_mut().enumerate() {
                let dx = x as f64 - f.cx_px;
                *v += w * (-(dx * dx + dy * dy) / two_sigma_sq).exp();
            }
        }
    }
    let max = map.max();
    if max > 0.0 {
        map.values.iter_mut().for_each(|v| *v /= max);
    }
    Ok(map)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn fix(cx: f64, cy: f64, dur: f64) -> Fixation {
        Fixation {
            cx_px: cx,
            cy_px: cy,
            start_ms: 0.0,
            end_ms: dur,
            n_samples: 1,
        }
    }

    /// Direct evaluation of the Gaussian-sum formula, unnormalized.
    fn raw_at(fixations: &[Fixation], x: f64, y: f64, sigma: f64, weighting: Weighting) -> f64 {
        fixations
            .iter()
            .map(|f| {
                let w = match weighting {
                    Weighting::Duration => f.duration_ms(),
                    Weighting::Uniform => 1.0,
                };
                w * (-((x - f.cx_px).powi(2) + (y - f.cy_px).powi(2)) / (2.0 * sigma * sigma)).exp()
            })
            .sum()
    }

    #[test]
    fn empty_list_gives_zero_map() {
        let m = render_heatmap(&[], 16, 8, 3.0, Weighting::Duration).unwrap();
        assert_eq!(m.values.len(), 128);
        assert!(m.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_fixation_peaks_at_its_pixel() {
        let m = render_heatmap(&[fix(32.0, 32.0, 200.0)], 64, 64, 5.0, Weighting::Duration).unwrap();
        let (arg, &max) = m
            .values
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
            .unwrap();
        assert_eq!((arg % 64, arg / 64), (32, 32));
        assert_eq!(max, 1.0);
    }

    #[test]
    fn two_fixations_six_sigma_apart() {
        let sigma = 4.0;
        let f = [fix(20.0, 30.0, 150.0), fix(20.0 + 6.0 * sigma, 30.0, 150.0)];
        let m = render_heatmap(&f, 64, 64, sigma, Weighting::Duration).unwrap();
        // direct evaluation: each centre sees 150 * (1 + e^-18)
        let peak = raw_at(&f, 20.0, 30.0, sigma, Weighting::Duration);
        assert!((peak - 150.0 * (1.0 + (-18.0f64).exp())).abs() < 1e-9);
        for cx in [20usize, 44] {
            let v = m.get(cx, 30);
            assert!((v - 1.0).abs() < 1e-6, "{v}");
            for (dx, dy) in [(1i64, 0i64), (-1, 0), (0, 1), (0, -1)] {
                let n = m.get((cx as i64 + dx) as usize, (30 + dy) as usize);
                assert!(n < v);
            }
        }
        assert!(m.get(32, 30) < 0.5);
    }

    #[test]
    fn uniform_weighting_ignores_duration() {
        let f = [fix(5.0, 5.0, 1000.0), fix(25.0, 5.0, 10.0)];
        let m = render_heatmap(&f, 32, 12, 2.0, Weighting::Uniform).unwrap();
        assert!((m.get(5, 5) - m.get(25, 5)).abs() < 1e-12);
    }

    #[test]
    fn bad_arguments() {
        assert!(render_heatmap(&[], 0, 4, 1.0, Weighting::Uniform).is_err());
        assert!(render_heatmap(&[], 4, 4, 0.0, Weighting::Uniform).is_err());
    }

    #[test]
    fn binarize_threshold() {
        let m = render_heatmap(&[fix(8.0, 8.0, 100.0)], 16, 16, 2.0, Weighting::Duration).unwrap();
        let b = m.binarize(0.5);
        assert!(b.values.iter().all(|&v| v == 0.0 || v == 1.0));
        assert_eq!(b.get(8, 8), 1.0);
        assert_eq!(b.get(0, 0), 0.0);
    }

    #[test]
    fn pgm_uses_rounded_bytes() {
        let m = FixationMap {
            width: 3,
            height: 1,
            values: vec![0.0, 0.5, 1.0],
        };
        let pgm = m.to_pgm();
        assert_eq!(&pgm[pgm.len() - 3..], &[0, 128, 255]);
    }

    fn arb_fixations() -> impl Strategy<Value = Vec<Fixation>> {
        prop::collection::vec((-10.0f64..74.0, -10.0f64..74.0, 1.0f64..800.0), 1..12)
            .prop_map(|v| v.into_iter().map(|(x, y, d)| fix(x, y, d)).collect())
    }

    proptest! {
        #[test]
        fn matches_direct_evaluation(f in arb_fixations(), sigma in 1.0f64..12.0, seed in 0u64..1000) {
            let m = render_heatmap(&f, 64, 48, sigma, Weighting::Duration).unwrap();
            let max = (0..48).flat_map(|y| (0..64).map(move |x| (x, y)))
                .map(|(x, y)| raw_at(&f, x as f64, y as f64, sigma, Weighting::Duration))
                .fold(0.0, f64::max);
            for k in 0..100u64 {
                let h = (seed * 7919 + k * 104729) as usize;
                let (x, y) = (h % 64, (h / 64) % 48);
                let want = raw_at(&f, x as f64, y as f64, sigma, Weighting::Duration) / max;
                let got = m.get(x, y);
                prop_assert!((got - want).abs() <= 1e-9 * want.abs().max(f64::MIN_POSITIVE), "{} vs {}", got, want);
            }
        }

        #[test]
        fn normalization_invariants(f in arb_fixations(), sigma in 1.0f64..12.0) {
            let m = render_heatmap(&f, 64, 48, sigma, Weighting::Duration).unwrap();
            prop_assert!(m.values.iter().all(|&v| (0.0..=1.0).contains(&v)));
            prop_assert_eq!(m.max(), 1.0);
        }
    }
}
