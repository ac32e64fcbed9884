use std::cmp::Ordering;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::anchors::{decode_unclipped, generate_anchors};
use super::config::{FusionPoint, ModelConfig, FEATURE_STRIDE};
use super::loss::{bce_with_logits, smooth_l1, softmax, softmax_cross_entropy, LossBreakdown};
use super::nms::{nms, score_order};
use super::roi_align::{roi_align, roi_align_backward, RoiTaps};
use super::targets::TrainPlan;
use super::Detection;
use crate::dataset::{ClassLabel, GrayImage, TargetBox};
use crate::error::{Error, Result};
use crate::fsutil;
use crate::gaze::FixationMap;
use crate::geometry::BBox;
use crate::tensor::{
    combine_backward, conv2d, conv2d_backward, elementwise_combine, linear, linear_backward, relu,
    relu_backward, sigmoid_scalar, Layer, LayerParams, Sequential, Tape, Tensor,
};

/// All learnable layers. The fixation backbone exists only for feature-level
/// fusion.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorParams {
    pub image_backbone: Sequential,
    pub fixation_backbone: Option<Sequential>,
    pub rpn_trunk: Sequential,
    pub rpn_objectness: LayerParams,
    pub rpn_deltas: LayerParams,
    pub head_fc: LayerParams,
    pub head_cls: LayerParams,
    pub head_box: LayerParams,
    pub mask_head: Sequential,
}

fn backbone(c: usize, rng: &mut ChaCha8Rng) -> Sequential {
    let widths = [1, c / 4, c / 2, c, c];
    let params = (0..4)
        .map(|i| LayerParams::conv2d(widths[i + 1], widths[i], 3, 1.0, rng))
        .collect();
    let conv = |param| Layer::Conv { param, stride: 1, pad: 1 };
    let pool = Layer::MaxPool { k: 2, stride: 2 };
    let layers = vec![
        conv(0),
        Layer::Relu,
        pool,
        conv(1),
        Layer::Relu,
        pool,
        conv(2),
        Layer::Relu,
        pool,
        conv(3),
        Layer::Relu,
    ];
    Sequential::new(layers, params).expect("backbone indices are static")
}

/// Independent generator per component, so models that differ only in their
/// fusion settings share every common weight.
fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

impl DetectorParams {
    pub fn init(config: &ModelConfig) -> Self {
        let c = config.feat_channels;
        let a = config.anchors_per_cell();
        let r = config.roi_size;
        let g = config.output_gain;
        let image_backbone = backbone(c, &mut stream(config.seed, 0));
        let fixation_backbone = config
            .has_fixation_branch()
            .then(|| backbone(c, &mut stream(config.seed, 1)));
        let mut rng = stream(config.seed, 2);
        let rpn_trunk = Sequential::new(
            vec![Layer::Conv { param: 0, stride: 1, pad: 1 }, Layer::Relu],
            vec![LayerParams::conv2d(c, c, 3, 1.0, &mut rng)],
        )
        .expect("static indices");
        let rpn_objectness = LayerParams::conv2d(a, c, 1, g, &mut rng);
        let rpn_deltas = LayerParams::conv2d(4 * a, c, 1, g, &mut rng);
        let mut rng = stream(config.seed, 3);
        let head_fc = LayerParams::linear(config.head_hidden, c * r * r, 1.0, &mut rng);
        let head_cls = LayerParams::linear(config.n_classes, config.head_hidden, g, &mut rng);
        let head_box = LayerParams::linear(4, config.head_hidden, g, &mut rng);
        let mut rng = stream(config.seed, 4);
        let mask_head = Sequential::new(
            vec![
                Layer::Conv { param: 0, stride: 1, pad: 1 },
                Layer::Relu,
                Layer::Conv { param: 1, stride: 1, pad: 0 },
            ],
            vec![
                LayerParams::conv2d(config.mask_channels, c, 3, 1.0, &mut rng),
                LayerParams::conv2d(config.n_classes - 1, config.mask_channels, 1, g, &mut rng),
            ],
        )
        .expect("static indices");
        Self {
            image_backbone,
            fixation_backbone,
            rpn_trunk,
            rpn_objectness,
            rpn_deltas,
            head_fc,
            head_cls,
            head_box,
            mask_head,
        }
    }

    /// Every layer with a stable name, in a fixed order.
    pub fn named_layers_mut(&mut self) -> Vec<(String, &mut LayerParams)> {
        let mut out: Vec<(String, &mut LayerParams)> = Vec::new();
        for (i, p) in self.image_backbone.params.iter_mut().enumerate() {
            out.push((format!("image_backbone.conv{i}"), p));
        }
        if let Some(fb) = self.fixation_backbone.as_mut() {
            for (i, p) in fb.params.iter_mut().enumerate() {
                out.push((format!("fixation_backbone.conv{i}"), p));
            }
        }
        out.push(("rpn.conv".into(), &mut self.rpn_trunk.params[0]));
        out.push(("rpn.objectness".into(), &mut self.rpn_objectness));
        out.push(("rpn.deltas".into(), &mut self.rpn_deltas));
        out.push(("head.fc".into(), &mut self.head_fc));
        out.push(("head.cls".into(), &mut self.head_cls));
        out.push(("head.box".into(), &mut self.head_box));
        for (i, p) in self.mask_head.params.iter_mut().enumerate() {
            out.push((format!("mask_head.conv{i}"), p));
        }
        out
    }

    pub fn layers_mut(&mut self) -> Vec<&mut LayerParams> {
        self.named_layers_mut().into_iter().map(|(_, p)| p).collect()
    }

    pub fn n_params(&mut self) -> usize {
        self.layers_mut().iter().map(|p| p.n_params()).sum()
    }

    fn shapes(&mut self) -> Vec<(String, Vec<usize>, Vec<usize>)> {
        self.named_layers_mut()
            .into_iter()
            .map(|(n, p)| (n, p.weight.shape().to_vec(), p.bias.shape().to_vec()))
            .collect()
    }
}

/// Network outputs of a training-mode pass.
#[derive(Clone, Debug, PartialEq)]
pub struct RawOutput {
    /// `[1, A, Hf, Wf]` objectness logits.
    pub rpn_objectness: Tensor,
    /// `[1, 4A, Hf, Wf]` anchor deltas.
    pub rpn_deltas: Tensor,
    /// Post-NMS proposals (empty when the plan was supplied).
    pub proposals: Vec<BBox>,
    /// Regions fed to the heads.
    pub rois: Vec<BBox>,
    /// `[K, n_classes]`, `[K, 4]` and `[K, n_classes - 1, R, R]`; `None` when
    /// there are no regions.
    pub cls_logits: Option<Tensor>,
    pub box_deltas: Option<Tensor>,
    pub mask_logits: Option<Tensor>,
}

#[derive(Clone, Debug)]
enum FeatureCache {
    Single(Tape),
    Feature {
        image_feat: Tensor,
        fix_feat: Tensor,
        image_tape: Tape,
        fix_tape: Tape,
    },
}

#[derive(Clone, Debug)]
struct HeadCache {
    taps: Vec<RoiTaps>,
    flat: Tensor,
    hidden_pre: Tensor,
    hidden: Tensor,
    mask_tape: Tape,
    pooled_shape: Vec<usize>,
}

/// A training-mode forward pass with everything backward needs.
#[derive(Clone, Debug)]
pub struct TrainPass {
    pub plan: TrainPlan,
    pub output: RawOutput,
    features: Tensor,
    feature_cache: FeatureCache,
    rpn_hidden: Tensor,
    rpn_tape: Tape,
    head: Option<HeadCache>,
}

/// Gradients of the loss with respect to the network outputs.
#[derive(Clone, Debug)]
pub struct OutputGrads {
    pub rpn_objectness: Tensor,
    pub rpn_deltas: Tensor,
    pub cls_logits: Option<Tensor>,
    pub box_deltas: Option<Tensor>,
    pub mask_logits: Option<Tensor>,
}

/// Where the training samples come from.
#[derive(Clone, Copy, Debug)]
pub enum PlanSource<'a> {
    /// Use this plan verbatim (RPN proposals are not computed).
    Fixed(&'a TrainPlan),
    /// Match against `targets` and sample with a generator seeded by `seed`.
    Sample { targets: &'a [TargetBox], seed: u64 },
}

#[derive(Clone, Copy, Debug)]
pub enum Mode<'a> {
    Train(PlanSource<'a>),
    Infer,
}

#[derive(Clone, Debug, PartialEq)]
pub enum DetectorOutput {
    Train { output: RawOutput, loss: LossBreakdown },
    Infer(Vec<Detection>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub tag: String,
    pub seed: u64,
    #[serde(default)]
    pub epoch: Option<usize>,
    pub config: ModelConfig,
    pub params: DetectorParams,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Detector {
    pub config: ModelConfig,
    pub params: DetectorParams,
    anchors: Vec<BBox>,
}

fn add_into(acc: &mut Tensor, other: &Tensor) {
    debug_assert_eq!(acc.shape(), other.shape());
    for (a, b) in acc.data_mut().iter_mut().zip(other.data()) {
        *a += b;
    }
}

fn image_tensor(image: &GrayImage) -> Result<Tensor> {
    Tensor::new(vec![1, 1, image.height, image.width], image.data.clone())
}

impl Detector {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let params = DetectorParams::init(&config);
        Ok(Self::assemble(config, params))
    }

    fn assemble(config: ModelConfig, params: DetectorParams) -> Self {
        let f = config.feat_size();
        let s = config.img_size as f64;
        let anchors = generate_anchors(
            f,
            f,
            FEATURE_STRIDE as f64,
            &config.anchor_scales,
            &config.anchor_ratios,
            s,
            s,
        );
        Self {
            config,
            params,
            anchors,
        }
    }

    /// Rebuilds a detector from stored parameters after checking that every
    /// layer has the shape the configuration implies.
    pub fn from_parts(config: ModelConfig, mut params: DetectorParams) -> Result<Self> {
        config.validate()?;
        let mut expected = DetectorParams::init(&config);
        if expected.shapes() != params.shapes() {
            return Err(Error::invalid(
                "checkpoint parameters do not match the layer shapes of its configuration",
            ));
        }
        for p in params.layers_mut() {
            p.clear_state();
        }
        Ok(Self::assemble(config, params))
    }

    pub fn anchors(&self) -> &[BBox] {
        &self.anchors
    }

    pub fn checkpoint(&self, tag: &str, epoch: Option<usize>) -> Checkpoint {
        Checkpoint {
            tag: tag.to_string(),
            seed: self.config.seed,
            epoch,
            config: self.config.clone(),
            params: self.params.clone(),
        }
    }

    pub fn save(&self, path: &Path, tag: &str, epoch: Option<usize>) -> Result<()> {
        fsutil::write_json(path, &self.checkpoint(tag, epoch))
    }

    pub fn load(path: &Path) -> Result<(Self, Checkpoint)> {
        let ck: Checkpoint = fsutil::read_json(path)?;
        let det = Self::from_parts(ck.config.clone(), ck.params.clone())?;
        Ok((det, ck))
    }

    fn inputs(&self, image: &GrayImage, map: Option<&FixationMap>) -> Result<(Tensor, Option<Tensor>)> {
        let s = self.config.img_size;
        if image.width != s || image.height != s {
            return Err(Error::invalid(format!(
                "image is {}x{}, model expects {s}x{s}",
                image.width, image.height
            )));
        }
        let img = image_tensor(image)?;
        if self.config.fusion.combine_mode().is_none() {
            return Ok((img, None));
        }
        let map = map.ok_or_else(|| Error::invalid("this model needs a fixation map"))?;
        if map.width != s || map.height != s {
            return Err(Error::invalid(format!(
                "fixation map is {}x{}, model expects {s}x{s}",
                map.width, map.height
            )));
        }
        Ok((img, Some(Tensor::new(vec![1, 1, s, s], map.values.clone())?)))
    }

    fn features(&self, img: &Tensor, map: Option<&Tensor>) -> Result<(Tensor, FeatureCache)> {
        let p = &self.params;
        match (self.config.fusion.combine_mode(), map) {
            (Some(mode), Some(map)) => match self.config.fusion_point {
                FusionPoint::Input => {
                    let fused = elementwise_combine(img, map, mode)?;
                    let (f, tape) = p.image_backbone.forward(&fused)?;
                    Ok((f, FeatureCache::Single(tape)))
                }
                FusionPoint::Feature => {
                    let fb = p
                        .fixation_backbone
                        .as_ref()
                        .ok_or_else(|| Error::invalid("feature-level fusion needs a fixation backbone"))?;
                    let (image_feat, image_tape) = p.image_backbone.forward(img)?;
                    let (fix_feat, fix_tape) = fb.forward(map)?;
                    let f = elementwise_combine(&image_feat, &fix_feat, mode)?;
                    Ok((
                        f,
                        FeatureCache::Feature {
                            image_feat,
                            fix_feat,
                            image_tape,
                            fix_tape,
                        },
                    ))
                }
            },
            _ => {
                let (f, tape) = p.image_backbone.forward(img)?;
                Ok((f, FeatureCache::Single(tape)))
            }
        }
    }

    fn rpn(&self, features: &Tensor) -> Result<(Tensor, Tape, Tensor, Tensor)> {
        let (h, tape) = self.params.rpn_trunk.forward(features)?;
        let obj = conv2d(&h, &self.params.rpn_objectness, 1, 0)?;
        let del = conv2d(&h, &self.params.rpn_deltas, 1, 0)?;
        Ok((h, tape, obj, del))
    }

    /// Flat offset of anchor `k`'s channel `ch` inside an `[1, C, Hf, Wf]` map
    /// where `C` is a multiple of the anchors per cell.
    fn anchor_offset(&self, k: usize, ch_per_anchor: usize, ch: usize) -> usize {
        let a = self.config.anchors_per_cell();
        let f = self.config.feat_size();
        let (cell, ai) = (k / a, k % a);
        ((ai * ch_per_anchor + ch) * f * f) + cell
    }

    fn anchor_deltas(&self, del: &Tensor, k: usize) -> [f64; 4] {
        let d = del.data();
        std::array::from_fn(|c| d[self.anchor_offset(k, 4, c)])
    }

    /// Top-scoring decoded anchors after NMS.
    fn proposals(&self, obj: &Tensor, del: &Tensor) -> Vec<BBox> {
        let o = obj.data();
        let scores: Vec<f64> = (0..self.anchors.len()).map(|k| o[self.anchor_offset(k, 1, 0)]).collect();
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| score_order(scores[a], scores[b]).then(a.cmp(&b)));
        order.truncate(self.config.rpn_pre_nms);
        let s = self.config.img_size as f64;
        let mut boxes = Vec::with_capacity(order.len());
        let mut kept_scores = Vec::with_capacity(order.len());
        for k in order {
            let b = decode_unclipped(&self.anchors[k], &self.anchor_deltas(del, k)).clip(s, s);
            if b.width() >= 1.0 && b.height() >= 1.0 {
                boxes.push(b);
                kept_scores.push(scores[k]);
            }
        }
        let mut keep = nms(&boxes, &kept_scores, self.config.rpn_nms_thresh);
        keep.truncate(self.config.rpn_post_nms);
        keep.into_iter().map(|i| boxes[i]).collect()
    }

    fn head_forward(&self, features: &Tensor, rois: &[BBox]) -> Result<(HeadCache, Tensor, Tensor, Tensor)> {
        let (pooled, taps) = roi_align(features, rois, self.config.roi_size, 1.0 / FEATURE_STRIDE as f64)?;
        let pooled_shape = pooled.shape().to_vec();
        let k = rois.len();
        let (mask_logits, mask_tape) = self.params.mask_head.forward(&pooled)?;
        let flat = pooled.reshape(vec![k, pooled_shape[1..].iter().product()])?;
        let hidden_pre = linear(&flat, &self.params.head_fc)?;
        let hidden = relu(&hidden_pre);
        let cls = linear(&hidden, &self.params.head_cls)?;
        let bx = linear(&hidden, &self.params.head_box)?;
        Ok((
            HeadCache {
                taps,
                flat,
                hidden_pre,
                hidden,
                mask_tape,
                pooled_shape,
            },
            cls,
            bx,
            mask_logits,
        ))
    }

    /// Training-mode forward pass.
    pub fn train_pass(&self, image: &GrayImage, map: Option<&FixationMap>, source: PlanSource<'_>) -> Result<TrainPass> {
        let (img, map) = self.inputs(image, map)?;
        let (features, feature_cache) = self.features(&img, map.as_ref())?;
        let (rpn_hidden, rpn_tape, obj, del) = self.rpn(&features)?;
        let (plan, proposals) = match source {
            PlanSource::Fixed(plan) => {
                if let Some(s) = plan.rpn.iter().find(|s| s.anchor >= self.anchors.len()) {
                    return Err(Error::invalid(format!("plan refers to anchor {} of {}", s.anchor, self.anchors.len())));
                }
                (plan.clone(), Vec::new())
            }
            PlanSource::Sample { targets, seed } => {
                let proposals = self.proposals(&obj, &del);
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let plan = TrainPlan::sample(&self.anchors, &proposals, targets, &self.config, &mut rng);
                (plan, proposals)
            }
        };
        let rois: Vec<BBox> = plan.rois.iter().map(|r| r.bbox).collect();
        let (head, cls, bx, masks) = if rois.is_empty() {
            (None, None, None, None)
        } else {
            let (h, c, b, m) = self.head_forward(&features, &rois)?;
            (Some(h), Some(c), Some(b), Some(m))
        };
        Ok(TrainPass {
            plan,
            output: RawOutput {
                rpn_objectness: obj,
                rpn_deltas: del,
                proposals,
                rois,
                cls_logits: cls,
                box_deltas: bx,
                mask_logits: masks,
            },
            features,
            feature_cache,
            rpn_hidden,
            rpn_tape,
            head,
        })
    }

    /// Loss terms and their gradients with respect to the outputs.
    ///
    /// classification = mean objectness BCE over sampled anchors + mean
    /// softmax CE over sampled regions; bbox = smooth-L1 summed over the four
    /// coordinates and averaged over positives, for anchors and regions;
    /// mask = mean per-pixel BCE on the target class channel of positive
    /// regions.
    pub fn compute_loss(&self, pass: &TrainPass) -> Result<(LossBreakdown, OutputGrads)> {
        let out = &pass.output;
        let plan = &pass.plan;
        let mut g_obj = Tensor::zeros(out.rpn_objectness.shape());
        let mut g_del = Tensor::zeros(out.rpn_deltas.shape());
        let (mut cls_loss, mut box_loss, mut mask_loss) = (0.0, 0.0, 0.0);

        let n = plan.rpn.len() as f64;
        let n_pos = plan.n_rpn_positive() as f64;
        for s in &plan.rpn {
            let oi = self.anchor_offset(s.anchor, 1, 0);
            let (l, g) = bce_with_logits(out.rpn_objectness.data()[oi], if s.positive { 1.0 } else { 0.0 });
            cls_loss += l / n;
            g_obj.data_mut()[oi] += g / n;
            if s.positive {
                for c in 0..4 {
                    let di = self.anchor_offset(s.anchor, 4, c);
                    let (v, d) = smooth_l1(out.rpn_deltas.data()[di] - s.deltas[c]);
                    box_loss += v / n_pos;
                    g_del.data_mut()[di] += d / n_pos;
                }
            }
        }

        let (mut g_cls, mut g_box, mut g_mask) = (None, None, None);
        if let (Some(cls), Some(bx), Some(masks)) = (&out.cls_logits, &out.box_deltas, &out.mask_logits) {
            let k = plan.rois.len();
            let nc = self.config.n_classes;
            let r2 = self.config.roi_size * self.config.roi_size;
            let mc = nc - 1;
            let k_pos = plan.n_roi_positive() as f64;
            let mut gc = vec![0.0; k * nc];
            let mut gb = vec![0.0; k * 4];
            let mut gm = vec![0.0; k * mc * r2];
            for (i, roi) in plan.rois.iter().enumerate() {
                let (l, g) = softmax_cross_entropy(&cls.data()[i * nc..(i + 1) * nc], roi.label);
                cls_loss += l / k as f64;
                for (dst, v) in gc[i * nc..(i + 1) * nc].iter_mut().zip(g) {
                    *dst = v / k as f64;
                }
                if roi.label == 0 {
                    continue;
                }
                for c in 0..4 {
                    let (v, d) = smooth_l1(bx.data()[i * 4 + c] - roi.deltas[c]);
                    box_loss += v / k_pos;
                    gb[i * 4 + c] = d / k_pos;
                }
                if roi.mask.len() != r2 {
                    return Err(Error::invalid(format!(
                        "region {i} has a {}-value mask target, expected {r2}",
                        roi.mask.len()
                    )));
                }
                let base = (i * mc + roi.label - 1) * r2;
                let denom = k_pos * r2 as f64;
                for (p, &y) in roi.mask.iter().enumerate() {
                    let (l, g) = bce_with_logits(masks.data()[base + p], y);
                    mask_loss += l / denom;
                    gm[base + p] = g / denom;
                }
            }
            g_cls = Some(Tensor::new(cls.shape().to_vec(), gc)?);
            g_box = Some(Tensor::new(bx.shape().to_vec(), gb)?);
            g_mask = Some(Tensor::new(masks.shape().to_vec(), gm)?);
        }
        let loss = LossBreakdown::new(cls_loss, box_loss, mask_loss);
        if !loss.total.is_finite() {
            return Err(Error::NonFinite { op: "compute_loss" });
        }
        Ok((
            loss,
            OutputGrads {
                rpn_objectness: g_obj,
                rpn_deltas: g_del,
                cls_logits: g_cls,
                box_deltas: g_box,
                mask_logits: g_mask,
            },
        ))
    }

    /// Accumulates parameter gradients for one pass. Every layer ends up with
    /// a gradient buffer, even those the pass did not reach.
    pub fn backward(&mut self, pass: &TrainPass, grads: &OutputGrads) -> Result<()> {
        for p in self.params.layers_mut() {
            p.weight.grad_mut();
            p.bias.grad_mut();
        }
        let p = &mut self.params;
        let mut g_feat = Tensor::zeros(pass.features.shape());

        if let (Some(h), Some(gc), Some(gb), Some(gm)) =
            (&pass.head, &grads.cls_logits, &grads.box_deltas, &grads.mask_logits)
        {
            let mut g_hidden = linear_backward(&h.hidden, &mut p.head_cls, gc)?;
            add_into(&mut g_hidden, &linear_backward(&h.hidden, &mut p.head_box, gb)?);
            let g_pre = relu_backward(&h.hidden_pre, &g_hidden)?;
            let mut g_pooled = linear_backward(&h.flat, &mut p.head_fc, &g_pre)?.reshape(h.pooled_shape.clone())?;
            add_into(&mut g_pooled, &p.mask_head.backward(&h.mask_tape, gm)?);
            add_into(&mut g_feat, &roi_align_backward(pass.features.shape(), &h.taps, &g_pooled)?);
        }

        let mut g_h = conv2d_backward(&pass.rpn_hidden, &mut p.rpn_objectness, &grads.rpn_objectness, 1, 0)?;
        add_into(
            &mut g_h,
            &conv2d_backward(&pass.rpn_hidden, &mut p.rpn_deltas, &grads.rpn_deltas, 1, 0)?,
        );
        add_into(&mut g_feat, &p.rpn_trunk.backward(&pass.rpn_tape, &g_h)?);

        match &pass.feature_cache {
            FeatureCache::Single(tape) => {
                p.image_backbone.backward(tape, &g_feat)?;
            }
            FeatureCache::Feature {
                image_feat,
                fix_feat,
                image_tape,
                fix_tape,
            } => {
                let mode = self
                    .config
                    .fusion
                    .combine_mode()
                    .ok_or_else(|| Error::invalid("feature cache without a fusion mode"))?;
                let (gi, gf) = combine_backward(image_feat, fix_feat, mode, &g_feat)?;
                p.image_backbone.backward(image_tape, &gi)?;
                p.fixation_backbone
                    .as_mut()
                    .ok_or_else(|| Error::invalid("missing fixation backbone"))?
                    .backward(fix_tape, &gf)?;
            }
        }
        Ok(())
    }

    /// Forward, loss and backward for one reading. Gradients accumulate.
    pub fn train_step_grads(
        &mut self,
        image: &GrayImage,
        map: Option<&FixationMap>,
        source: PlanSource<'_>,
    ) -> Result<LossBreakdown> {
        let pass = self.train_pass(image, map, source)?;
        let (loss, grads) = self.compute_loss(&pass)?;
        self.backward(&pass, &grads)?;
        Ok(loss)
    }

    /// Loss only, no gradients.
    pub fn loss(&self, image: &GrayImage, map: Option<&FixationMap>, source: PlanSource<'_>) -> Result<LossBreakdown> {
        let pass = self.train_pass(image, map, source)?;
        Ok(self.compute_loss(&pass)?.0)
    }

    /// Detections for one reading, highest score first.
    pub fn infer(&self, image: &GrayImage, map: Option<&FixationMap>) -> Result<Vec<Detection>> {
        let (img, map) = self.inputs(image, map)?;
        let (features, _) = self.features(&img, map.as_ref())?;
        let (_, _, obj, del) = self.rpn(&features)?;
        let rois = self.proposals(&obj, &del);
        if rois.is_empty() {
            return Ok(Vec::new());
        }
        let (_, cls, bx, masks) = self.head_forward(&features, &rois)?;
        let nc = self.config.n_classes;
        let r2 = self.config.roi_size * self.config.roi_size;
        let s = self.config.img_size as f64;
        let mut per_class: Vec<Vec<(BBox, f64, usize)>> = vec![Vec::new(); nc - 1];
        for (i, roi) in rois.iter().enumerate() {
            let probs = softmax(&cls.data()[i * nc..(i + 1) * nc]);
            let d: [f64; 4] = std::array::from_fn(|c| bx.data()[i * 4 + c]);
            let b = decode_unclipped(roi, &d).clip(s, s);
            if !b.is_valid() {
                continue;
            }
            for c in 1..nc {
                if probs[c] > self.config.score_thresh {
                    per_class[c - 1].push((b, probs[c], i));
                }
            }
        }
        let mut dets = Vec::new();
        for (ci, cands) in per_class.iter().enumerate() {
            let boxes: Vec<BBox> = cands.iter().map(|c| c.0).collect();
            let scores: Vec<f64> = cands.iter().map(|c| c.1).collect();
            for j in nms(&boxes, &scores, self.config.det_nms_thresh) {
                let (b, score, i) = cands[j];
                let base = (i * (nc - 1) + ci) * r2;
                dets.push(Detection {
                    bbox: b,
                    label: ClassLabel::from_id(ci)?,
                    score,
                    mask: masks.data()[base..base + r2].iter().map(|&v| sigmoid_scalar(v)).collect(),
                    mask_size: self.config.roi_size,
                });
            }
        }
        dets.sort_by(detection_order);
        dets.truncate(self.config.max_detections);
        Ok(dets)
    }

    pub fn forward(&self, image: &GrayImage, map: Option<&FixationMap>, mode: Mode<'_>) -> Result<DetectorOutput> {
        match mode {
            Mode::Infer => Ok(DetectorOutput::Infer(self.infer(image, map)?)),
            Mode::Train(source) => {
                let pass = self.train_pass(image, map, source)?;
                let (loss, _) = self.compute_loss(&pass)?;
                Ok(DetectorOutput::Train {
                    output: pass.output,
                    loss,
                })
            }
        }
    }
}

/// Descending score, then class, then box.
pub(crate) fn detection_order(a: &Detection, b: &Detection) -> Ordering {
    score_order(a.score, b.score)
        .then(a.label.cmp(&b.label))
        .then(a.bbox.lex_cmp(&b.bbox))
}
