//! Eye-tracker sample streams, fixation detection and fixation-map rendering.

mod heatmap;
mod io;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use heatmap::{render_heatmap, FixationMap, Weighting};
pub use io::{
    fixations_to_csv, gaze_to_csv, parse_fixations_csv, parse_gaze_csv, read_fixations_csv,
    read_gaze_csv,
};

/// Dispersion threshold, kernel sigma etc. are quoted for a 512-px-wide image
/// and scaled linearly with the actual width.
pub const REFERENCE_WIDTH: f64 = 512.0;
pub const DEFAULT_DISPERSION_PX: f64 = 25.0;
pub const DEFAULT_SIGMA_PX: f64 = 25.0;
pub const DEFAULT_MIN_DURATION_MS: f64 = 100.0;

pub fn scaled_to_width(value_at_512: f64, width: usize) -> f64 {
    value_at_512 * width as f64 / REFERENCE_WIDTH
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GazeSample {
    pub t_ms: f64,
    pub x_px: f64,
    pub y_px: f64,
    pub pupil_mm: Option<f64>,
    pub valid: bool,
}

impl GazeSample {
    pub fn at(t_ms: f64, x_px: f64, y_px: f64) -> Self {
        Self {
            t_ms,
            x_px,
            y_px,
            pupil_mm: None,
            valid: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fixation {
    pub cx_px: f64,
    pub cy_px: f64,
    pub start_ms: f64,
    pub end_ms: f64,
    /// Member sample count; 0 when the fixation was loaded precomputed.
    pub n_samples: usize,
}

impl Fixation {
    pub fn duration_ms(&self) -> f64 {
        self.end_ms - self.start_ms
    }
}

/// Parameters for turning a raw stream into fixations.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FixationParams {
    pub dispersion_px: f64,
    pub min_duration_ms: f64,
    pub margin_px: f64,
}

impl FixationParams {
    /// Default thresholds scaled to an image of the given width.
    pub fn for_width(width: usize) -> Self {
        Self {
            dispersion_px: scaled_to_width(DEFAULT_DISPERSION_PX, width),
            min_duration_ms: DEFAULT_MIN_DURATION_MS,
            margin_px: 0.0,
        }
    }
}

/// Drops invalid samples and samples outside `[-margin, extent + margin]`.
pub fn filter_gaze(samples: &[GazeSample], width: f64, height: f64, margin_px: f64) -> Vec<GazeSample> {
    samples
        .iter()
        .filter(|s| {
            s.valid
                && s.x_px >= -margin_px
                && s.x_px <= width + margin_px
                && s.y_px >= -margin_px
                && s.y_px <= height + margin_px
        })
        .copied()
        .collect()
}

pub(crate) fn check_sorted(samples: &[GazeSample]) -> Result<()> {
    if let Some(i) = samples
        .windows(2)
        .position(|w| !(w[1].t_ms > w[0].t_ms))
    {
        return Err(Error::invalid(format!(
            "gaze samples not strictly increasing in time at index {} ({} ms after {} ms)",
            i + 1,
            samples[i + 1].t_ms,
            samples[i].t_ms
        )));
    }
    Ok(())
}

#[derive(Clone, Copy)]
struct Extent {
    min_x: f64,
    max_x: f64,
    min_y: f64,
    max_y: f64,
}

impl Extent {
    fn of(s: &GazeSample) -> Self {
        Self {
            min_x: s.x_px,
            max_x: s.x_px,
            min_y: s.y_px,
            max_y: s.y_px,
        }
    }

    fn grow(self, s: &GazeSample) -> Self {
        Self {
            min_x: self.min_x.min(s.x_px),
            max_x: self.max_x.max(s.x_px),
            min_y: self.min_y.min(s.y_px),
            max_y: self.max_y.max(s.y_px),
        }
    }

    fn dispersion(&self) -> f64 {
        (self.max_x - self.min_x) + (self.max_y - self.min_y)
    }
}

/// Dispersion-threshold (I-DT) fixation identification.
///
/// From each start sample the window grows while the Manhattan span
/// `(max_x - min_x) + (max_y - min_y)` stays within `dispersion_px`. A window
/// whose time span reaches `min_duration_ms` becomes a fixation and the scan
/// resumes after it; otherwise the start advances by one sample.
pub fn detect_fixations(
    samples: &[GazeSample],
    dispersion_px: f64,
    min_duration_ms: f64,
) -> Result<Vec<Fixation>> {
    if !(dispersion_px > 0.0) || !(min_duration_ms > 0.0) {
        return Err(Error::invalid(format!(
            "dispersion ({dispersion_px}) and min duration ({min_duration_ms}) must be positive"
        )));
    }
    check_sorted(samples)?;
    let mut out = Vec::new();
    let mut i = 0;
    while i < samples.len() {
        let mut ext = Extent::of(&samples[i]);
        let mut j = i;
        while j + 1 < samples.len() {
            let grown = ext.grow(&samples[j + 1]);
            if grown.dispersion() > dispersion_px {
                break;
            }
            ext = grown;
            j += 1;
        }
        if samples[j].t_ms - samples[i].t_ms >= min_duration_ms {
            let members = &samples[i..=j];
            let n = members.len() as f64;
            out.push(Fixation {
                cx_px: members.iter().map(|s| s.x_px).sum::<f64>() / n,
                cy_px: members.iter().map(|s| s.y_px).sum::<f64>() / n,
                start_ms: samples[i].t_ms,
                end_ms: samples[j].t_ms,
                n_samples: members.len(),
            });
            i = j + 1;
        } else {
            i += 1;
        }
    }
    Ok(out)
}

/// Either a raw stream that still needs fixation detection, or fixations
/// that were computed upstream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GazeData {
    Raw(Vec<GazeSample>),
    Fixations(Vec<Fixation>),
}

impl GazeData {
    /// Filters and clusters raw samples; precomputed fixations pass through.
    pub fn fixations(&self, width: usize, height: usize, params: &FixationParams) -> Result<Vec<Fixation>> {
        match self {
            GazeData::Raw(samples) => {
                let kept = filter_gaze(samples, width as f64, height as f64, params.margin_px);
                detect_fixations(&kept, params.dispersion_px, params.min_duration_ms)
            }
            GazeData::Fixations(f) => Ok(f.clone()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn stream(points: &[(f64, f64)], dt: f64) -> Vec<GazeSample> {
        points
            .iter()
            .enumerate()
            .map(|(i, &(x, y))| GazeSample::at(i as f64 * dt, x, y))
            .collect()
    }

    /// Independent reimplementation: recomputes each window's extent from
    /// scratch instead of growing it incrementally.
    fn brute_force_idt(s: &[GazeSample], disp: f64, min_dur: f64) -> Vec<(usize, usize)> {
        let span = |v: Vec<f64>| {
            v.iter().cloned().fold(f64::MIN, f64::max) - v.iter().cloned().fold(f64::MAX, f64::min)
        };
        let dispersion = |a: usize, b: usize| {
            span(s[a..=b].iter().map(|p| p.x_px).collect())
                + span(s[a..=b].iter().map(|p| p.y_px).collect())
        };
        let mut out = Vec::new();
        let mut i = 0;
        while i < s.len() {
            let mut end = i;
            for j in i + 1..s.len() {
                if dispersion(i, j) <= disp {
                    end = j;
                } else {
                    break;
                }
            }
            if s[end].t_ms - s[i].t_ms >= min_dur {
                out.push((i, end));
                i = end + 1;
            } else {
                i += 1;
            }
        }
        out
    }

    #[test]
    fn filter_examples() {
        let inside = stream(&[(1.0, 1.0), (10.0, 5.0), (511.0, 400.0)], 10.0);
        assert_eq!(filter_gaze(&inside, 512.0, 512.0, 0.0), inside);

        let outside = stream(&[(-500.0, 10.0); 4], 10.0);
        assert!(filter_gaze(&outside, 512.0, 512.0, 0.0).is_empty());

        let mut mixed = stream(&(0..10).map(|i| (i as f64, 3.0)).collect::<Vec<_>>(), 5.0);
        for k in [1, 4, 8] {
            mixed[k].valid = false;
        }
        let kept = filter_gaze(&mixed, 512.0, 512.0, 0.0);
        assert_eq!(kept.len(), 7);
        let xs: Vec<f64> = kept.iter().map(|s| s.x_px).collect();
        assert_eq!(xs, vec![0.0, 2.0, 3.0, 5.0, 6.0, 7.0, 9.0]);
    }

    #[test]
    fn constant_gaze_is_one_fixation() {
        let s: Vec<GazeSample> = (0..30)
            .map(|i| GazeSample::at(i as f64 * 300.0 / 29.0, 100.0, 100.0))
            .collect();
        let f = detect_fixations(&s, 25.0, 100.0).unwrap();
        assert_eq!(f.len(), 1);
        assert_eq!((f[0].cx_px, f[0].cy_px), (100.0, 100.0));
        assert!((f[0].duration_ms() - 300.0).abs() < 1e-9);
        assert_eq!(f[0].n_samples, 30);
    }

    #[test]
    fn empty_input() {
        assert!(detect_fixations(&[], 25.0, 100.0).unwrap().is_empty());
    }

    #[test]
    fn unsorted_input_is_an_error() {
        let s = stream(&[(0.0, 0.0), (1.0, 1.0)], 10.0);
        let rev: Vec<_> = s.iter().rev().copied().collect();
        assert!(detect_fixations(&rev, 25.0, 100.0).is_err());
    }

    #[test]
    fn bad_thresholds_are_errors() {
        assert!(detect_fixations(&[], 0.0, 100.0).is_err());
        assert!(detect_fixations(&[], 10.0, -1.0).is_err());
    }

    #[test]
    fn precomputed_fixations_bypass_detection() {
        let f = vec![Fixation {
            cx_px: 3.0,
            cy_px: 4.0,
            start_ms: 0.0,
            end_ms: 50.0,
            n_samples: 0,
        }];
        let got = GazeData::Fixations(f.clone())
            .fixations(64, 64, &FixationParams::for_width(64))
            .unwrap();
        assert_eq!(got, f);
    }

    fn arb_stream() -> impl Strategy<Value = Vec<GazeSample>> {
        prop::collection::vec((1.0f64..20.0, 0.0f64..60.0, 0.0f64..60.0, any::<bool>()), 0..300).prop_map(
            |steps| {
                let mut t = 0.0;
                let (mut x, mut y) = (30.0, 30.0);
                steps
                    .into_iter()
                    .map(|(dt, nx, ny, jump)| {
                        t += dt;
                        if jump {
                            x = nx;
                            y = ny;
                        } else {
                            x += (nx - 30.0) * 0.02;
                            y += (ny - 30.0) * 0.02;
                        }
                        GazeSample::at(t, x, y)
                    })
                    .collect()
            },
        )
    }

    proptest! {
        #[test]
        fn matches_brute_force(s in arb_stream(), disp in 1.0f64..20.0, min_dur in 10.0f64..200.0) {
            let got = detect_fixations(&s, disp, min_dur).unwrap();
            let want = brute_force_idt(&s, disp, min_dur);
            prop_assert_eq!(got.len(), want.len());
            for (f, &(a, b)) in got.iter().zip(&want) {
                let n = (b - a + 1) as f64;
                let cx = s[a..=b].iter().map(|p| p.x_px).sum::<f64>() / n;
                let cy = s[a..=b].iter().map(|p| p.y_px).sum::<f64>() / n;
                prop_assert_eq!(f.start_ms, s[a].t_ms);
                prop_assert_eq!(f.end_ms, s[b].t_ms);
                prop_assert!((f.cx_px - cx).abs() < 1e-9 && (f.cy_px - cy).abs() < 1e-9);
            }
        }

        #[test]
        fn fixation_invariants(s in arb_stream(), disp in 1.0f64..20.0, min_dur in 10.0f64..200.0) {
            let got = detect_fixations(&s, disp, min_dur).unwrap();
            for w in got.windows(2) {
                prop_assert!(w[0].end_ms < w[1].start_ms);
            }
            for f in &got {
                prop_assert!(f.duration_ms() >= min_dur);
                let members: Vec<_> = s.iter().filter(|p| p.t_ms >= f.start_ms && p.t_ms <= f.end_ms).collect();
                let min_x = members.iter().map(|p| p.x_px).fold(f64::MAX, f64::min);
                let max_x = members.iter().map(|p| p.x_px).fold(f64::MIN, f64::max);
                prop_assert!(f.cx_px >= min_x - 1e-9 && f.cx_px <= max_x + 1e-9);
            }
        }

        #[test]
        fn raising_min_duration_never_adds_fixations(s in arb_stream(), disp in 1.0f64..20.0, a in 10.0f64..150.0, extra in 0.0f64..150.0) {
            let lo = detect_fixations(&s, disp, a).unwrap().len();
            let hi = detect_fixations(&s, disp, a + extra).unwrap().len();
            prop_assert!(hi <= lo);
        }

        #[test]
        fn filter_is_idempotent(s in arb_stream(), margin in 0.0f64..10.0) {
            let once = filter_gaze(&s, 50.0, 40.0, margin);
            prop_assert_eq!(filter_gaze(&once, 50.0, 40.0, margin), once);
        }
    }
}
