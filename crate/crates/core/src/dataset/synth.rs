//! Synthetic readings with known ground truth.
//!
//! Each image is a dark, lightly textured background with bright elliptical
//! lesions whose intensity and size depend on the class. The gaze stream
//! dwells near every lesion centre, once on an off-lesion distractor, and
//! includes interface glances (off-screen and invalid samples) at the start
//! and end of the session.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{ClassLabel, EllipseAnnotation, GrayImage, Reading};
use crate::error::{Error, Result};
use crate::gaze::{GazeData, GazeSample};

pub const SAMPLE_INTERVAL_MS: f64 = 16.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_readings: usize,
    pub img_size: usize,
    pub classes: Vec<ClassLabel>,
    pub lesions_min: usize,
    pub lesions_max: usize,
    /// Standard deviation of gaze jitter around a dwell centre, pixels.
    pub gaze_noise_px: f64,
    /// Off-lesion dwells per reading.
    pub distractors: usize,
}

impl SynthConfig {
    /// `n_classes` of the five classes in id order, 1–2 lesions per image.
    pub fn new(n_readings: usize, img_size: usize, n_classes: usize) -> Self {
        Self {
            n_readings,
            img_size,
            classes: ClassLabel::ALL[..n_classes.clamp(1, ClassLabel::COUNT)].to_vec(),
            lesions_min: 1,
            lesions_max: 2,
            gaze_noise_px: 0.3 * img_size as f64 / 64.0,
            distractors: 1,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.img_size < 32 {
            return Err(Error::invalid(format!("img_size must be >= 32, got {}", self.img_size)));
        }
        if self.n_readings == 0 {
            return Err(Error::invalid("n_readings must be >= 1"));
        }
        if self.classes.is_empty() {
            return Err(Error::invalid("at least one class is required"));
        }
        if self.lesions_min > self.lesions_max {
            return Err(Error::invalid("lesions_min exceeds lesions_max"));
        }
        if !(self.gaze_noise_px >= 0.0) {
            return Err(Error::invalid("gaze_noise_px must be non-negative"));
        }
        Ok(())
    }
}

/// Appearance prior for one class: lesion intensity and radius range as a
/// fraction of the image size.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassPrior {
    pub intensity: f64,
    pub radius_frac: (f64, f64),
}

impl ClassPrior {
    pub fn of(label: ClassLabel) -> Self {
        let (intensity, radius_frac) = match label {
            ClassLabel::EnlargedCardiacSilhouette => (0.92, (0.13, 0.18)),
            ClassLabel::Atelectasis => (0.55, (0.06, 0.09)),
            ClassLabel::PleuralAbnormality => (0.75, (0.08, 0.12)),
            ClassLabel::Consolidation => (0.85, (0.07, 0.10)),
            ClassLabel::PulmonaryEdema => (0.45, (0.11, 0.15)),
        };
        Self {
            intensity,
            radius_frac,
        }
    }
}

const BACKGROUND: f64 = 0.1;
const TEXTURE_SD: f64 = 0.02;

pub fn synth_generate(config: &SynthConfig, seed: u64) -> Result<Vec<Reading>> {
    config.validate()?;
    (0..config.n_readings)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            generate_one(config, format!("r{i:05}"), &mut rng)
        })
        .collect()
}

fn generate_one(config: &SynthConfig, id: String, rng: &mut ChaCha8Rng) -> Result<Reading> {
    let size = config.img_size;
    let s = size as f64;
    let n_lesions = rng.random_range(config.lesions_min..=config.lesions_max);
    let mut annotations: Vec<EllipseAnnotation> = Vec::with_capacity(n_lesions);
    for _ in 0..n_lesions {
        let label = *config.classes.choose(rng).expect("classes validated non-empty");
        let prior = ClassPrior::of(label);
        let r = rng.random_range(prior.radius_frac.0..prior.radius_frac.1) * s;
        let aspect: f64 = rng.random_range(0.8..1.25);
        let (rx, ry) = (r * aspect.sqrt(), r / aspect.sqrt());
        let reach = rx.max(ry);
        for _attempt in 0..50 {
            let cx = rng.random_range(reach + 1.0..s - reach - 1.0);
            let cy = rng.random_range(reach + 1.0..s - reach - 1.0);
            let clear = annotations.iter().all(|o| {
                let d = ((o.cx - cx).powi(2) + (o.cy - cy).powi(2)).sqrt();
                d >= o.rx.max(o.ry) + reach + 2.0
            });
            if clear {
                annotations.push(EllipseAnnotation {
                    cx,
                    cy,
                    rx,
                    ry,
                    label,
                });
                break;
            }
        }
    }

    let texture = Normal::new(0.0, TEXTURE_SD).expect("valid sd");
    let mut data = vec![0.0; size * size];
    for y in 0..size {
        for x in 0..size {
            let base = BACKGROUND + 0.04 * (y as f64 / s) + texture.sample(rng);
            let lesion = annotations
                .iter()
                .filter(|e| e.covers_pixel(x, y))
                .map(|e| ClassPrior::of(e.label).intensity)
                .fold(None, |m: Option<f64>, v| Some(m.map_or(v, |m| m.max(v))));
            let v = lesion.map_or(base, |i| i + texture.sample(rng));
            // stored images are 8-bit, so quantize here to keep disk round-trips exact
            data[y * size + x] = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
        }
    }
    let image = GrayImage::new(size, size, data)?;
    let gaze = synth_gaze(config, &annotations, rng);
    Ok(Reading {
        id,
        image,
        gaze: GazeData::Raw(gaze),
        annotations,
    })
}

fn synth_gaze(config: &SynthConfig, lesions: &[EllipseAnnotation], rng: &mut ChaCha8Rng) -> Vec<GazeSample> {
    let s = config.img_size as f64;
    let jitter = Normal::new(0.0, 0.5).expect("valid sd");
    let mut targets: Vec<(f64, f64)> = lesions
        .iter()
        .map(|e| {
            let j = |v: f64| v.clamp(-1.5, 1.5);
            (e.cx + j(jitter.sample(rng)), e.cy + j(jitter.sample(rng)))
        })
        .collect();
    for _ in 0..config.distractors {
        for _attempt in 0..100 {
            let p = (rng.random_range(2.0..s - 2.0), rng.random_range(2.0..s - 2.0));
            let off_lesion = lesions.iter().all(|e| {
                let d = ((e.cx - p.0).powi(2) + (e.cy - p.1).powi(2)).sqrt();
                d > e.rx.max(e.ry) + 4.0
            });
            if off_lesion {
                targets.push(p);
                break;
            }
        }
    }
    targets.shuffle(rng);

    let noise = Normal::new(0.0, config.gaze_noise_px.max(f64::MIN_POSITIVE)).expect("valid sd");
    let pupil = Normal::new(3.5f64, 0.1).expect("valid sd");
    let mut out = Vec::new();
    let mut t = 0.0;
    let mut push = |out: &mut Vec<GazeSample>, x: f64, y: f64, valid: bool, rng: &mut ChaCha8Rng| {
        out.push(GazeSample {
            t_ms: t,
            x_px: x,
            y_px: y,
            pupil_mm: if valid { Some((pupil.sample(rng) * 100.0).round() / 100.0) } else { None },
            valid,
        });
        t += SAMPLE_INTERVAL_MS;
    };
    // glance at the reporting interface left of the image, then a blink
    for _ in 0..6 {
        let y = s * 0.5 + noise.sample(rng);
        push(&mut out, -0.15 * s, y, true, rng);
    }
    for _ in 0..2 {
        push(&mut out, 0.0, 0.0, false, rng);
    }
    let mut pos = (s / 2.0, s / 2.0);
    for (tx, ty) in targets {
        for k in 1..=3 {
            let a = k as f64 / 4.0;
            push(&mut out, pos.0 + a * (tx - pos.0), pos.1 + a * (ty - pos.1), true, rng);
        }
        let dwell_ms: f64 = rng.random_range(250.0..450.0);
        let n = (dwell_ms / SAMPLE_INTERVAL_MS).round() as usize;
        for _ in 0..n {
            let (x, y) = (tx + noise.sample(rng), ty + noise.sample(rng));
            push(&mut out, x, y, true, rng);
        }
        pos = (tx, ty);
    }
    for _ in 0..6 {
        let y = s * 0.8 + noise.sample(rng);
        push(&mut out, -0.15 * s, y, true, rng);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaze::FixationParams;

    #[test]
    fn deterministic() {
        let c = SynthConfig::new(5, 48, 3);
        assert_eq!(synth_generate(&c, 7).unwrap(), synth_generate(&c, 7).unwrap());
        assert_ne!(synth_generate(&c, 7).unwrap(), synth_generate(&c, 8).unwrap());
    }

    #[test]
    fn zero_lesions() {
        let mut c = SynthConfig::new(10, 32, 5);
        c.lesions_min = 0;
        c.lesions_max = 0;
        assert!(synth_generate(&c, 1).unwrap().iter().all(|r| r.annotations.is_empty()));
    }

    #[test]
    fn validation() {
        assert!(synth_generate(&SynthConfig::new(1, 31, 2), 0).is_err());
        assert!(synth_generate(&SynthConfig::new(0, 64, 2), 0).is_err());
    }

    #[test]
    fn lesions_are_brighter_than_background() {
        let r = &synth_generate(&SynthConfig::new(1, 64, 2), 3).unwrap()[0];
        for e in &r.annotations {
            let v = r.image.data[(e.cy as usize) * 64 + e.cx as usize];
            assert!(v > 0.4, "{v}");
        }
        assert!(r.targets().is_ok());
    }

    #[test]
    fn gaze_dwells_on_lesions() {
        let c = SynthConfig::new(200, 64, 2);
        let readings = synth_generate(&c, 11).unwrap();
        let (mut hit, mut total) = (0, 0);
        for r in &readings {
            let fixations = r.gaze.fixations(64, 64, &FixationParams::for_width(64)).unwrap();
            for e in &r.annotations {
                total += 1;
                if fixations
                    .iter()
                    .any(|f| ((f.cx_px - e.cx).powi(2) + (f.cy_px - e.cy).powi(2)).sqrt() <= 3.0)
                {
                    hit += 1;
                }
            }
        }
        assert!(total > 200);
        assert!(hit as f64 >= 0.9 * total as f64, "{hit}/{total}");
    }
}
