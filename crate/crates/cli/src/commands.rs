use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::Args;
use serde::{Deserialize, Serialize};

use gfd_core::dataset::{load_dataset, split, synth_generate, write_dataset, Dataset, Manifest, ManifestEntry, SplitTag, SynthConfig};
use gfd_core::detector::{detector_op_grad_suite, end_to_end_grad_check, Detector, Fusion, FusionPoint, ModelConfig};
use gfd_core::fsutil;
use gfd_core::gaze::{
    detect_fixations, filter_gaze, fixations_to_csv, read_fixations_csv, read_gaze_csv, render_heatmap, scaled_to_width,
    Weighting, DEFAULT_DISPERSION_PX, DEFAULT_MIN_DURATION_MS, DEFAULT_SIGMA_PX,
};
use gfd_core::metrics::{Comparison, MetricConfig, MetricsReport, OverlapKind, TABLE1_BASELINE, TABLE1_MULTIMODAL};
use gfd_core::tensor::op_grad_suite;
use gfd_core::trainer::{self, model_tag, prepare, write_predictions, Arm, MapSource, TrainConfig};

use crate::settings::{announce, resolve};
use crate::Usage;

const GRAD_TOL: f64 = 1e-4;

fn is_false(b: &bool) -> bool {
    !*b
}

// ---- synth ----

#[derive(Args, Serialize)]
pub struct SynthFlags {
    /// JSON file with default settings; flags take precedence.
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Number of readings.
    #[arg(long)]
    n: Option<usize>,
    /// Image side length in pixels.
    #[arg(long)]
    size: Option<usize>,
    /// Number of abnormality classes to draw from (1-5).
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Train/val/test fractions, comma separated.
    #[arg(long, value_delimiter = ',')]
    split: Option<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SynthSettings {
    out: PathBuf,
    n: usize,
    #[serde(default = "default_size")]
    size: usize,
    #[serde(default = "default_classes")]
    classes: usize,
    #[serde(default)]
    seed: u64,
    #[serde(default = "default_split")]
    split: [f64; 3],
}

fn default_size() -> usize {
    64
}
fn default_classes() -> usize {
    2
}
fn default_split() -> [f64; 3] {
    [0.8, 0.1, 0.1]
}

pub fn synth(f: SynthFlags) -> anyhow::Result<()> {
    let s: SynthSettings = resolve(&f, f.config.as_deref(), true)?;
    announce(&s, Some(s.seed))?;
    if !(1..=5).contains(&s.classes) {
        return Err(Usage(format!("--classes must be in 1..=5, got {}", s.classes)).into());
    }
    let config = SynthConfig::new(s.n, s.size, s.classes);
    let readings = synth_generate(&config, s.seed)?;
    let idx: Vec<usize> = (0..readings.len()).collect();
    let parts = split(&idx, (s.split[0], s.split[1], s.split[2]), s.seed)?;
    let mut tags = vec![SplitTag::Train; readings.len()];
    for &i in &parts.val {
        tags[i] = SplitTag::Val;
    }
    for &i in &parts.test {
        tags[i] = SplitTag::Test;
    }
    let manifest = Manifest {
        readings: readings
            .iter()
            .zip(&tags)
            .map(|(r, &split)| ManifestEntry { id: r.id.clone(), split })
            .collect(),
        synth: None,
    }
    .with_synth(config, s.seed);
    write_dataset(&s.out, &readings, &manifest)?;
    let (a, b, c) = parts.sizes();
    println!("wrote {} readings to {} (train {a}, val {b}, test {c})", readings.len(), s.out.display());
    Ok(())
}

// ---- fixations ----

#[derive(Args, Serialize)]
pub struct FixationFlags {
    /// JSON file with default settings; flags take precedence.
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    /// Gaze CSV (`t_ms,x_px,y_px,pupil_mm,valid`).
    #[arg(long)]
    gaze: Option<PathBuf>,
    /// Maximum dispersion in pixels.
    #[arg(long)]
    dispersion: Option<f64>,
    /// Minimum fixation duration in milliseconds.
    #[arg(long)]
    min_dur: Option<f64>,
    /// Image width; with --height, drops samples outside the image.
    #[arg(long, requires = "height")]
    width: Option<f64>,
    #[arg(long, requires = "width")]
    height: Option<f64>,
    /// Output fixation CSV.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FixationSettings {
    gaze: PathBuf,
    #[serde(default = "default_dispersion")]
    dispersion: f64,
    #[serde(default = "default_min_dur")]
    min_dur: f64,
    #[serde(default)]
    width: Option<f64>,
    #[serde(default)]
    height: Option<f64>,
    out: PathBuf,
}

fn default_dispersion() -> f64 {
    DEFAULT_DISPERSION_PX
}
fn default_min_dur() -> f64 {
    DEFAULT_MIN_DURATION_MS
}

pub fn fixations(f: FixationFlags) -> anyhow::Result<()> {
    let s: FixationSettings = resolve(&f, f.config.as_deref(), false)?;
    announce(&s, None)?;
    let samples = read_gaze_csv(&s.gaze)?;
    let samples = match (s.width, s.height) {
        (Some(w), Some(h)) => filter_gaze(&samples, w, h, 0.0),
        _ => samples.into_iter().filter(|g| g.valid).collect(),
    };
    let fx = detect_fixations(&samples, s.dispersion, s.min_dur)?;
    fsutil::write_atomic(&s.out, fixations_to_csv(&fx).as_bytes())?;
    println!("{} fixations from {} samples -> {}", fx.len(), samples.len(), s.out.display());
    Ok(())
}

// ---- heatmap ----

#[derive(Args, Serialize)]
pub struct HeatmapFlags {
    /// JSON file with default settings; flags take precedence.
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    /// Fixation CSV (`cx_px,cy_px,start_ms,end_ms`).
    #[arg(long)]
    fixations: Option<PathBuf>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    /// Gaussian sigma in pixels (default scales with the width).
    #[arg(long)]
    sigma: Option<f64>,
    /// `duration` or `uniform`.
    #[arg(long)]
    weighting: Option<String>,
    /// Output PGM.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write the unquantized map as little-endian f64.
    #[arg(long)]
    raw: Option<PathBuf>,
    /// Emit a 0/1 mask: values >= this threshold become 1.
    #[arg(long)]
    binarize: Option<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeatmapSettings {
    fixations: PathBuf,
    width: usize,
    height: usize,
    #[serde(default)]
    sigma: Option<f64>,
    #[serde(default)]
    weighting: Weighting,
    out: PathBuf,
    #[serde(default)]
    raw: Option<PathBuf>,
    #[serde(default)]
    binarize: Option<f64>,
}

pub fn heatmap(f: HeatmapFlags) -> anyhow::Result<()> {
    let mut s: HeatmapSettings = resolve(&f, f.config.as_deref(), false)?;
    s.sigma = Some(s.sigma.unwrap_or_else(|| scaled_to_width(DEFAULT_SIGMA_PX, s.width)));
    announce(&s, None)?;
    let fx = read_fixations_csv(&s.fixations)?;
    let mut map = render_heatmap(&fx, s.width, s.height, s.sigma.unwrap_or_default(), s.weighting)?;
    if let Some(t) = s.binarize {
        if !(0.0..=1.0).contains(&t) {
            return Err(Usage(format!("--binarize must lie in [0, 1], got {t}")).into());
        }
        map = map.binarize(t);
    }
    map.write(&s.out, s.raw.as_deref())?;
    println!("{}x{} heatmap from {} fixations -> {}", s.width, s.height, fx.len(), s.out.display());
    Ok(())
}

// ---- shared training settings ----

#[derive(Args, Serialize)]
pub struct TrainingFlags {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Print a progress line every N steps (0 is silent).
    #[arg(long)]
    log_every: Option<usize>,
    /// Stop after N epochs without a better validation loss.
    #[arg(long)]
    patience: Option<usize>,
}

fn train_config(epochs: usize, lr: f64, momentum: f64, seed: u64, log_every: usize, patience: Option<usize>) -> TrainConfig {
    TrainConfig {
        epochs,
        lr,
        momentum,
        seed,
        log_every,
        patience,
    }
}

fn default_epochs() -> usize {
    TrainConfig::default().epochs
}
fn default_lr() -> f64 {
    TrainConfig::default().lr
}
fn default_momentum() -> f64 {
    TrainConfig::default().momentum
}

fn load_parts(root: &Path) -> anyhow::Result<(Dataset, usize)> {
    let ds = load_dataset(root)?;
    let size = match ds.readings.first() {
        Some(r) => r.image.width,
        None => bail!(Usage(format!("{}: dataset has no readings", root.display()))),
    };
    Ok((ds, size))
}

fn model_config(
    base: Option<ModelConfig>,
    size: usize,
    fusion: Option<Fusion>,
    point: Option<FusionPoint>,
    seed: u64,
) -> ModelConfig {
    let mut m = base.unwrap_or_else(|| ModelConfig::new(size, fusion.unwrap_or(Fusion::ImageOnly), seed));
    if let Some(fu) = fusion {
        m.fusion = fu;
    }
    if let Some(p) = point {
        m.fusion_point = p;
    }
    m
}

// ---- train ----

#[derive(Args, Serialize)]
pub struct TrainFlags {
    /// JSON file with default settings; flags take precedence. A `model`
    /// key holds a full detector configuration.
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    /// Dataset directory written by `synth`.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory for checkpoints and the loss curve.
    #[arg(long)]
    out: Option<PathBuf>,
    /// `image_only`, `sum` or `mul`.
    #[arg(long)]
    fusion: Option<String>,
    /// `input` or `feature`.
    #[arg(long)]
    fusion_point: Option<String>,
    /// Fixation input: `gaze`, `ones` or `zeros`.
    #[arg(long)]
    maps: Option<String>,
    #[command(flatten)]
    #[serde(flatten)]
    training: TrainingFlags,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainSettings {
    data: PathBuf,
    out: PathBuf,
    #[serde(default)]
    fusion: Option<Fusion>,
    #[serde(default)]
    fusion_point: Option<FusionPoint>,
    #[serde(default)]
    maps: MapSource,
    #[serde(default = "default_epochs")]
    epochs: usize,
    #[serde(default = "default_lr")]
    lr: f64,
    #[serde(default = "default_momentum")]
    momentum: f64,
    #[serde(default)]
    seed: u64,
    #[serde(default)]
    log_every: usize,
    #[serde(default)]
    patience: Option<usize>,
    #[serde(default)]
    model: Option<ModelConfig>,
}

pub fn train(f: TrainFlags) -> anyhow::Result<()> {
    let mut s: TrainSettings = resolve(&f, f.config.as_deref(), true)?;
    let (ds, size) = load_parts(&s.data)?;
    let model = model_config(s.model.take(), size, s.fusion, s.fusion_point, s.seed);
    s.model = Some(model.clone());
    announce(&s, Some(s.seed))?;
    let cfg = train_config(s.epochs, s.lr, s.momentum, s.seed, s.log_every, s.patience);
    let tr = prepare(&ds.part(SplitTag::Train), &model, s.maps)?;
    let va = prepare(&ds.part(SplitTag::Val), &model, s.maps)?;
    fsutil::write_json(&s.out.join("config.json"), &s)?;
    let out = trainer::train(&model, &tr, &va, &cfg, Some(&s.out))?;
    let means = out.curve.epoch_means();
    println!(
        "trained {} for {} epochs: mean loss {:.6} -> {:.6}, best epoch {}",
        model_tag(&model),
        means.len(),
        means.first().map_or(f64::NAN, |m| m.total),
        means.last().map_or(f64::NAN, |m| m.total),
        out.best_epoch
    );
    println!("artifacts in {}", s.out.display());
    Ok(())
}

// ---- eval ----

#[derive(Args, Serialize)]
pub struct EvalFlags {
    /// JSON file with default settings; flags take precedence.
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// `train`, `val` or `test`.
    #[arg(long)]
    split: Option<String>,
    /// `iobb` or `iou`.
    #[arg(long)]
    metric: Option<String>,
    #[arg(long)]
    thresh: Option<f64>,
    #[arg(long)]
    max_dets: Option<usize>,
    /// Fixation input: `gaze`, `ones` or `zeros`.
    #[arg(long)]
    maps: Option<String>,
    /// Directory for report.json, report.md and predictions.json.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EvalSettings {
    checkpoint: PathBuf,
    data: PathBuf,
    #[serde(default = "default_split_tag")]
    split: SplitTag,
    #[serde(default = "default_metric")]
    metric: OverlapKind,
    #[serde(default = "default_thresh")]
    thresh: f64,
    #[serde(default = "default_max_dets")]
    max_dets: usize,
    #[serde(default)]
    maps: MapSource,
    #[serde(default)]
    out: Option<PathBuf>,
}

fn default_split_tag() -> SplitTag {
    SplitTag::Test
}
fn default_metric() -> OverlapKind {
    OverlapKind::IoBB
}
fn default_thresh() -> f64 {
    0.5
}
fn default_max_dets() -> usize {
    100
}

fn metric_config(kind: OverlapKind, thresh: f64, max_dets: usize) -> anyhow::Result<MetricConfig> {
    let m = MetricConfig { kind, thresh, max_dets };
    m.validate()?;
    Ok(m)
}

pub fn eval(f: EvalFlags) -> anyhow::Result<()> {
    let s: EvalSettings = resolve(&f, f.config.as_deref(), false)?;
    announce(&s, None)?;
    let metric = metric_config(s.metric, s.thresh, s.max_dets)?;
    let (det, ck) = Detector::load(&s.checkpoint)?;
    let ds = load_dataset(&s.data)?;
    let samples = prepare(&ds.part(s.split), &det.config, s.maps)?;
    let tag = format!("{} ({})", model_tag(&det.config), ck.tag);
    let (report, preds) = trainer::evaluate(&det, &samples, &metric, &tag)?;
    if let Some(out) = &s.out {
        fsutil::write_json(&out.join("report.json"), &report)?;
        fsutil::write_atomic(&out.join("report.md"), report.to_markdown().as_bytes())?;
        write_predictions(&out.join("predictions.json"), &samples, &preds)?;
    }
    print!("{}", report.to_markdown());
    Ok(())
}

// ---- compare ----

#[derive(Args, Serialize)]
pub struct CompareFlags {
    /// JSON file with default settings; flags take precedence.
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory; one subdirectory per arm.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Fusion of the multimodal arm: `sum` or `mul`.
    #[arg(long)]
    fusion: Option<String>,
    /// `input` or `feature`.
    #[arg(long)]
    fusion_point: Option<String>,
    /// Fixation input of the multimodal arm: `gaze`, `ones` or `zeros`.
    #[arg(long)]
    maps: Option<String>,
    /// `iobb` or `iou`.
    #[arg(long)]
    metric: Option<String>,
    #[arg(long)]
    thresh: Option<f64>,
    #[arg(long)]
    max_dets: Option<usize>,
    #[command(flatten)]
    #[serde(flatten)]
    training: TrainingFlags,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CompareSettings {
    data: PathBuf,
    #[serde(default)]
    out: Option<PathBuf>,
    #[serde(default = "default_fusion")]
    fusion: Fusion,
    #[serde(default = "default_point")]
    fusion_point: FusionPoint,
    #[serde(default)]
    maps: MapSource,
    #[serde(default = "default_metric")]
    metric: OverlapKind,
    #[serde(default = "default_thresh")]
    thresh: f64,
    #[serde(default = "default_max_dets")]
    max_dets: usize,
    #[serde(default = "default_epochs")]
    epochs: usize,
    #[serde(default = "default_lr")]
    lr: f64,
    #[serde(default = "default_momentum")]
    momentum: f64,
    #[serde(default)]
    seed: u64,
    #[serde(default)]
    log_every: usize,
    #[serde(default)]
    patience: Option<usize>,
}

fn default_fusion() -> Fusion {
    Fusion::Sum
}
fn default_point() -> FusionPoint {
    FusionPoint::Feature
}

pub fn compare(f: CompareFlags) -> anyhow::Result<()> {
    let s: CompareSettings = resolve(&f, f.config.as_deref(), true)?;
    announce(&s, Some(s.seed))?;
    if s.fusion == Fusion::ImageOnly {
        return Err(Usage("--fusion for the multimodal arm must be sum or mul".into()).into());
    }
    let metric = metric_config(s.metric, s.thresh, s.max_dets)?;
    let (ds, size) = load_parts(&s.data)?;
    let baseline = ModelConfig::new(size, Fusion::ImageOnly, s.seed);
    let fused = ModelConfig::new(size, s.fusion, s.seed).with_fusion_point(s.fusion_point);
    let arms = [
        Arm {
            tag: model_tag(&baseline),
            model: baseline,
            maps: MapSource::Gaze,
        },
        Arm {
            tag: model_tag(&fused),
            model: fused,
            maps: s.maps,
        },
    ];
    let cfg = train_config(s.epochs, s.lr, s.momentum, s.seed, s.log_every, s.patience);
    let out = trainer::run_comparison(
        &ds.part(SplitTag::Train),
        &ds.part(SplitTag::Val),
        &ds.part(SplitTag::Test),
        &arms,
        &cfg,
        &metric,
        s.out.as_deref(),
    )?;
    print!("{}", out.comparison.to_markdown());
    Ok(())
}

// ---- gradcheck ----

#[derive(Args, Serialize)]
pub struct GradcheckFlags {
    /// JSON file with default settings; flags take precedence.
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    /// First seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Number of consecutive seeds to check.
    #[arg(long)]
    seeds: Option<u64>,
    /// Finite-difference step.
    #[arg(long)]
    eps: Option<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GradcheckSettings {
    #[serde(default)]
    seed: u64,
    #[serde(default = "default_seeds")]
    seeds: u64,
    #[serde(default = "default_eps")]
    eps: f64,
}

fn default_seeds() -> u64 {
    1
}
fn default_eps() -> f64 {
    1e-6
}

pub fn gradcheck(f: GradcheckFlags) -> anyhow::Result<()> {
    let s: GradcheckSettings = resolve(&f, f.config.as_deref(), true)?;
    announce(&s, Some(s.seed))?;
    if s.seeds == 0 {
        return Err(Usage("--seeds must be >= 1".into()).into());
    }
    let mut worst = 0.0f64;
    let mut line = |kind: &str, seed: u64, name: &str, err: f64| {
        worst = worst.max(err);
        let flag = if err < GRAD_TOL { "ok" } else { "FAIL" };
        println!("{kind:<8} seed {seed:<4} {name:<28} max rel err {err:.3e}  {flag}");
    };
    for seed in s.seed..s.seed + s.seeds {
        for (op, e) in op_grad_suite(seed, s.eps)? {
            line("op", seed, op, e);
        }
        for (op, e) in detector_op_grad_suite(seed, s.eps)? {
            line("op", seed, op, e);
        }
        let r = end_to_end_grad_check(seed, s.eps)?;
        for (name, _, e) in &r.layers {
            line("layer", seed, name, *e);
        }
    }
    println!("worst max rel err {worst:.3e} (tolerance {GRAD_TOL:e})");
    if !(worst < GRAD_TOL) {
        bail!("gradient check failed: {worst:.3e} >= {GRAD_TOL:e}");
    }
    Ok(())
}

// ---- report ----

#[derive(Args, Serialize)]
pub struct ReportFlags {
    /// JSON file with default settings; flags take precedence.
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    /// Saved report.json files, one column each.
    #[arg(long, num_args = 1..)]
    #[serde(skip_serializing_if = "Vec::is_empty")]
    reports: Vec<PathBuf>,
    /// Render the published reference values instead.
    #[arg(long)]
    #[serde(skip_serializing_if = "is_false")]
    published: bool,
    /// Write the markdown here as well as to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ReportSettings {
    #[serde(default)]
    reports: Vec<PathBuf>,
    #[serde(default)]
    published: bool,
    #[serde(default)]
    out: Option<PathBuf>,
}

pub fn report(f: ReportFlags) -> anyhow::Result<()> {
    let s: ReportSettings = resolve(&f, f.config.as_deref(), false)?;
    announce(&s, None)?;
    let mut columns: Vec<MetricsReport> = Vec::new();
    if s.published {
        columns.push(TABLE1_BASELINE.report());
        columns.push(TABLE1_MULTIMODAL.report());
    }
    for p in &s.reports {
        let r: MetricsReport = fsutil::read_json(p).with_context(|| format!("loading report {}", p.display()))?;
        columns.push(r);
    }
    if columns.is_empty() {
        return Err(Usage("nothing to render: pass --reports and/or --published".into()).into());
    }
    let md = Comparison { columns }.to_markdown();
    if let Some(out) = &s.out {
        fsutil::write_atomic(out, md.as_bytes())?;
    }
    print!("{md}");
    Ok(())
}
