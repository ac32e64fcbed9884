//! Epoch loop, loss logging, checkpointing, evaluation and paired runs.

mod curve;

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{GrayImage, Reading, TargetBox};
use crate::detector::{Detection, Detector, ModelConfig, PlanSource};
use crate::error::{Error, Result};
use crate::fsutil;
use crate::gaze::FixationMap;
use crate::metrics::{build_report, evaluate_detections, Comparison, MetricConfig, MetricsReport, ReportMeta};
use crate::tensor::sgd_step;

pub use curve::{LossCurve, StepLog, CSV_HEADER};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub seed: u64,
    /// Print a progress line every this many steps; 0 is silent.
    pub log_every: usize,
    /// Stop after this many epochs without a better validation loss.
    pub patience: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 15,
            lr: 0.01,
            momentum: 0.9,
            seed: 0,
            log_every: 0,
            patience: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be >= 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!("lr must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if self.patience == Some(0) {
            return Err(Error::invalid("patience must be >= 1 when set"));
        }
        Ok(())
    }
}

/// What the fixation input of a sample holds.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapSource {
    /// Rendered from the reading's gaze.
    #[default]
    Gaze,
    /// Constant 1 everywhere.
    Ones,
    /// Constant 0 everywhere.
    Zeros,
}

/// A reading reduced to what the detector consumes.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: GrayImage,
    pub map: Option<FixationMap>,
    pub targets: Vec<TargetBox>,
}

/// Builds samples; fixation maps are only rendered when the model uses them.
pub fn prepare(readings: &[Reading], config: &ModelConfig, maps: MapSource) -> Result<Vec<Sample>> {
    let needs_map = config.fusion.combine_mode().is_some();
    readings
        .iter()
        .map(|r| {
            let (w, h) = (r.image.width, r.image.height);
            if w != config.img_size || h != config.img_size {
                return Err(Error::invalid(format!(
                    "reading {} is {w}x{h}, model expects {s}x{s}",
                    r.id,
                    s = config.img_size
                )));
            }
            let map = match (needs_map, maps) {
                (false, _) => None,
                (true, MapSource::Gaze) => Some(r.fixation_map()?),
                (true, MapSource::Ones) => Some(FixationMap::filled(w, h, 1.0)),
                (true, MapSource::Zeros) => Some(FixationMap::zeros(w, h)),
            };
            Ok(Sample {
                id: r.id.clone(),
                image: r.image.clone(),
                map,
                targets: r.targets()?,
            })
        })
        .collect()
}

/// Seed for the proposal sampler at a given step.
fn step_seed(seed: u64, step: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (step as u64).wrapping_add(1)
}

/// Mean total loss with a fixed sampler per sample.
pub fn validation_loss(det: &Detector, samples: &[Sample], seed: u64) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::invalid("validation needs at least one sample"));
    }
    let mut sum = 0.0;
    for (i, s) in samples.iter().enumerate() {
        let source = PlanSource::Sample {
            targets: &s.targets,
            seed: step_seed(!seed, i),
        };
        sum += det.loss(&s.image, s.map.as_ref(), source)?.total;
    }
    Ok(sum / samples.len() as f64)
}

pub struct TrainOutcome {
    /// Weights from the epoch with the lowest validation loss.
    pub best: Detector,
    pub best_epoch: usize,
    pub last: Detector,
    pub curve: LossCurve,
}

pub const BEST_CHECKPOINT: &str = "best.json";
pub const LAST_CHECKPOINT: &str = "last.json";
pub const LOSS_CURVE: &str = "loss_curve.csv";

fn diverged(e: Error, step: usize) -> Error {
    match e {
        Error::NonFinite { .. } => Error::Diverged { step },
        other => other,
    }
}

/// SGD over the training samples, one reading per step, in a shuffled order
/// per epoch. With an output directory, the loss curve and the `best` / `last`
/// checkpoints are written after every epoch. The best epoch is chosen by
/// validation loss (training loss when there is no validation set).
pub fn train(
    model: &ModelConfig,
    train_set: &[Sample],
    val_set: &[Sample],
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let mut det = Detector::new(model.clone())?;
    let mut curve = LossCurve::default();
    let mut best: Option<(f64, usize, Detector)> = None;
    let mut since_best = 0;
    let mut step = 0usize;
    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);
        for &i in &order {
            step += 1;
            let s = &train_set[i];
            let source = PlanSource::Sample {
                targets: &s.targets,
                seed: step_seed(cfg.seed, step),
            };
            let loss = det
                .train_step_grads(&s.image, s.map.as_ref(), source)
                .map_err(|e| diverged(e, step))?;
            sgd_step(&mut det.params.layers_mut(), cfg.lr, cfg.momentum)?;
            curve.push(StepLog { step, epoch, loss });
            if cfg.log_every > 0 && step % cfg.log_every == 0 {
                eprintln!(
                    "[{}] epoch {epoch} step {step}: cls {:.4} bbox {:.4} mask {:.4} total {:.4}",
                    model_tag(model),
                    loss.classification,
                    loss.bbox,
                    loss.mask,
                    loss.total
                );
            }
        }
        let val = if val_set.is_empty() {
            curve.epoch_mean(epoch).map_or(f64::INFINITY, |m| m.total)
        } else {
            validation_loss(&det, val_set, cfg.seed).map_err(|e| diverged(e, step))?
        };
        curve.record_validation(epoch, val);
        if best.as_ref().is_none_or(|b| val < b.0) {
            best = Some((val, epoch, det.clone()));
            since_best = 0;
            if let Some(dir) = out_dir {
                det.save(&dir.join(BEST_CHECKPOINT), "best-val", Some(epoch))?;
            }
        } else {
            since_best += 1;
        }
        if let Some(dir) = out_dir {
            det.save(&dir.join(LAST_CHECKPOINT), &format!("epoch-{epoch}"), Some(epoch))?;
            curve.write_csv(&dir.join(LOSS_CURVE))?;
        }
        if cfg.log_every > 0 {
            eprintln!(
                "[{}] epoch {epoch} done: train {:.4}, validation {val:.4}",
                model_tag(model),
                curve.epoch_mean(epoch).map_or(f64::NAN, |m| m.total)
            );
        }
        if cfg.patience.is_some_and(|p| since_best >= p) {
            break;
        }
    }
    let (_, best_epoch, best) = best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        best,
        best_epoch,
        last: det,
        curve,
    })
}

/// Short label such as `image_only`, `sum_feature`, `mul_input`.
pub fn model_tag(config: &ModelConfig) -> String {
    let fusion = serde_json::to_value(config.fusion).ok();
    let fusion = fusion.as_ref().and_then(|v| v.as_str()).unwrap_or("?").to_string();
    if config.fusion.combine_mode().is_none() {
        return fusion;
    }
    let point = serde_json::to_value(config.fusion_point).ok();
    format!("{fusion}_{}", point.as_ref().and_then(|v| v.as_str()).unwrap_or("?"))
}

/// Inference over all samples, split across threads; results keep sample order.
pub fn predict(det: &Detector, samples: &[Sample]) -> Result<Vec<Vec<Detection>>> {
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get()).min(samples.len().max(1));
    let chunk = samples.len().div_ceil(threads).max(1);
    std::thread::scope(|scope| {
        let handles: Vec<_> = samples
            .chunks(chunk)
            .map(|part| {
                scope.spawn(move || {
                    part.iter()
                        .map(|s| det.infer(&s.image, s.map.as_ref()))
                        .collect::<Result<Vec<_>>>()
                })
            })
            .collect();
        let mut out = Vec::with_capacity(samples.len());
        for h in handles {
            out.extend(h.join().expect("inference thread panicked")?);
        }
        Ok(out)
    })
}

/// Runs inference and scores the detections per class.
pub fn evaluate(det: &Detector, samples: &[Sample], metric: &MetricConfig, tag: &str) -> Result<(MetricsReport, Vec<Vec<Detection>>)> {
    if samples.is_empty() {
        return Err(Error::invalid("evaluation needs at least one reading"));
    }
    metric.validate()?;
    let preds = predict(det, samples)?;
    let per_reading: Vec<_> = preds
        .iter()
        .zip(samples)
        .map(|(d, s)| (d.clone(), s.targets.iter().map(|t| (t.bbox, t.label)).collect()))
        .collect();
    let rows = evaluate_detections(&per_reading, metric)?;
    let mut meta = ReportMeta::new(tag, metric.kind, metric.thresh);
    meta.max_dets = metric.max_dets;
    Ok((build_report(&rows, meta), preds))
}

#[derive(Clone, Debug, Serialize)]
struct PredictionRecord<'a> {
    reading_id: &'a str,
    #[serde(rename = "box")]
    bbox: [f64; 4],
    label: crate::dataset::ClassLabel,
    score: f64,
}

/// JSON array of `{reading_id, box, label, score}`.
pub fn write_predictions(path: &Path, samples: &[Sample], preds: &[Vec<Detection>]) -> Result<()> {
    let records: Vec<PredictionRecord> = samples
        .iter()
        .zip(preds)
        .flat_map(|(s, ds)| {
            ds.iter().map(move |d| PredictionRecord {
                reading_id: &s.id,
                bbox: d.bbox.to_array(),
                label: d.label,
                score: d.score,
            })
        })
        .collect();
    fsutil::write_json(path, &records)
}

/// One side of a paired experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Arm {
    pub tag: String,
    pub model: ModelConfig,
    #[serde(default)]
    pub maps: MapSource,
}

pub struct ArmResult {
    pub arm: Arm,
    pub outcome: TrainOutcome,
    pub report: MetricsReport,
}

pub struct ComparisonOutcome {
    pub comparison: Comparison,
    pub arms: Vec<ArmResult>,
}

/// Trains and evaluates every arm on the same split with the same training
/// seed. Arms run on separate threads; results keep arm order. Each arm's
/// artifacts go to `out_dir/<tag>/`.
pub fn run_comparison(
    train_set: &[Reading],
    val_set: &[Reading],
    test_set: &[Reading],
    arms: &[Arm],
    cfg: &TrainConfig,
    metric: &MetricConfig,
    out_dir: Option<&Path>,
) -> Result<ComparisonOutcome> {
    if arms.is_empty() {
        return Err(Error::invalid("comparison needs at least one arm"));
    }
    let mut tags: Vec<&str> = arms.iter().map(|a| a.tag.as_str()).collect();
    tags.sort_unstable();
    tags.dedup();
    if tags.len() != arms.len() {
        return Err(Error::invalid("arm tags must be distinct"));
    }
    let results: Vec<Result<ArmResult>> = std::thread::scope(|scope| {
        let handles: Vec<_> = arms
            .iter()
            .map(|arm| {
                scope.spawn(move || -> Result<ArmResult> {
                    let dir: Option<PathBuf> = out_dir.map(|d| d.join(&arm.tag));
                    let tr = prepare(train_set, &arm.model, arm.maps)?;
                    let va = prepare(val_set, &arm.model, arm.maps)?;
                    let te = prepare(test_set, &arm.model, arm.maps)?;
                    let outcome = train(&arm.model, &tr, &va, cfg, dir.as_deref())?;
                    let (report, preds) = evaluate(&outcome.best, &te, metric, &arm.tag)?;
                    if let Some(d) = &dir {
                        fsutil::write_json(&d.join("report.json"), &report)?;
                        write_predictions(&d.join("predictions.json"), &te, &preds)?;
                    }
                    Ok(ArmResult {
                        arm: arm.clone(),
                        outcome,
                        report,
                    })
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("training thread panicked"))
            .collect()
    });
    let arms: Vec<ArmResult> = results.into_iter().collect::<Result<_>>()?;
    let comparison = Comparison {
        columns: arms.iter().map(|a| a.report.clone()).collect(),
    };
    if let Some(d) = out_dir {
        fsutil::write_json(&d.join("comparison.json"), &comparison)?;
        fsutil::write_atomic(&d.join("comparison.md"), comparison.to_markdown().as_bytes())?;
    }
    Ok(ComparisonOutcome { comparison, arms })
}
