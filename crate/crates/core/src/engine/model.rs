//! Region-based instance segmentation: feature extractor, region proposal
//! network, RoIAlign pooling, box classification/regression and a mask
//! branch.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array2, Array3, Array4, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::backbone::{
    backbone_spec, prepare_image, Backbone, Normalization, Prepared, FEATURE_STRIDE,
};
use super::boxes::{
    best_overlap, decode_box, encode_box, filter_region_indices, generate_anchors, nms,
};
use super::nn::{
    bce_with_logits, relu_backward, relu_inplace, sigmoid, smooth_l1, Conv2d, Init, Linear, Param,
};
use super::roi_align::RoiAlignPlan;
use super::weights::{read_tensors, TensorMap, WeightsManifest};
use super::{ClassLabel, Detection, EngineError, ModelConfig, Segmenter, TensorMismatch};
use crate::data::{ScanRecord, MIN_IMAGE_SIDE};
use crate::metrics::box_iou_unchecked;
use crate::types::{BBox, Image, Mask};

const ANCHOR_SIZES: [f64; 3] = [8.0, 16.0, 32.0];
const ANCHOR_RATIOS: [f64; 3] = [0.5, 1.0, 2.0];
const NUM_ANCHORS: usize = ANCHOR_SIZES.len() * ANCHOR_RATIOS.len();
const RPN_CHANNELS: usize = 32;
const RPN_POS_IOU: f64 = 0.7;
const RPN_NEG_IOU: f64 = 0.3;
const RPN_BATCH: usize = 64;
const RPN_NMS: f64 = 0.7;
const RPN_WEIGHTS: [f64; 4] = [1.0, 1.0, 1.0, 1.0];
const PRE_NMS_TOP: usize = 200;
const POST_NMS_TRAIN: usize = 48;
const POST_NMS_TEST: usize = 24;
const ROI_BATCH: usize = 32;
const ROI_POSITIVES: usize = 16;
const MASK_ROIS: usize = 8;
const BOX_POOL: usize = 7;
const MASK_POOL: usize = 14;
const SAMPLING: usize = 2;
const BOX_WEIGHTS: [f64; 4] = [10.0, 10.0, 5.0, 5.0];
const HIDDEN: usize = 128;
const MASK_CHANNELS: usize = 32;
const DETECTION_NMS: f64 = 0.5;
/// Candidates scoring below this are never reported.
const MIN_SCORE: f64 = 0.05;
const SMOOTH_BETA: f32 = 1.0 / 9.0;
const MIN_BOX_SIDE: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Training,
    Inference,
}

#[derive(Clone, Debug)]
struct Heads {
    rpn_conv: Conv2d,
    rpn_obj: Conv2d,
    rpn_delta: Conv2d,
    box_fc: Linear,
    box_cls: Linear,
    box_reg: Linear,
    mask_conv1: Conv2d,
    mask_conv2: Conv2d,
    mask_logits: Conv2d,
}

impl Heads {
    fn new(channels: usize, rng: &mut impl Rng) -> Self {
        let mut box_cls = Linear::new("box_head.cls", HIDDEN, 1, Init::Normal(0.01), rng);
        // start with low foreground confidence
        box_cls.bias.value.fill(-2.0);
        Self {
            rpn_conv: Conv2d::new("rpn.conv", channels, RPN_CHANNELS, 3, 1, 1, Init::He, rng),
            rpn_obj: Conv2d::new(
                "rpn.objectness",
                RPN_CHANNELS,
                NUM_ANCHORS,
                1,
                1,
                0,
                Init::Normal(0.01),
                rng,
            ),
            rpn_delta: Conv2d::new(
                "rpn.deltas",
                RPN_CHANNELS,
                4 * NUM_ANCHORS,
                1,
                1,
                0,
                Init::Normal(0.01),
                rng,
            ),
            box_fc: Linear::new(
                "box_head.fc",
                channels * BOX_POOL * BOX_POOL,
                HIDDEN,
                Init::He,
                rng,
            ),
            box_cls,
            box_reg: Linear::new("box_head.reg", HIDDEN, 4, Init::Normal(0.001), rng),
            mask_conv1: Conv2d::new(
                "mask_head.conv1",
                channels,
                MASK_CHANNELS,
                3,
                1,
                1,
                Init::He,
                rng,
            ),
            mask_conv2: Conv2d::new(
                "mask_head.conv2",
                MASK_CHANNELS,
                MASK_CHANNELS,
                3,
                1,
                1,
                Init::He,
                rng,
            ),
            mask_logits: Conv2d::new(
                "mask_head.logits",
                MASK_CHANNELS,
                1,
                1,
                1,
                0,
                Init::Normal(0.01),
                rng,
            ),
        }
    }

    fn params(&self) -> Vec<&Param> {
        let mut v: Vec<&Param> = Vec::new();
        v.extend(self.rpn_conv.params());
        v.extend(self.rpn_obj.params());
        v.extend(self.rpn_delta.params());
        v.extend(self.box_fc.params());
        v.extend(self.box_cls.params());
        v.extend(self.box_reg.params());
        v.extend(self.mask_conv1.params());
        v.extend(self.mask_conv2.params());
        v.extend(self.mask_logits.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v: Vec<&mut Param> = Vec::new();
        v.extend(self.rpn_conv.params_mut());
        v.extend(self.rpn_obj.params_mut());
        v.extend(self.rpn_delta.params_mut());
        v.extend(self.box_fc.params_mut());
        v.extend(self.box_cls.params_mut());
        v.extend(self.box_reg.params_mut());
        v.extend(self.mask_conv1.params_mut());
        v.extend(self.mask_conv2.params_mut());
        v.extend(self.mask_logits.params_mut());
        v
    }
}

/// Per-component training losses for one image.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub rpn_objectness: f32,
    pub rpn_box: f32,
    pub classification: f32,
    pub box_regression: f32,
    pub mask: f32,
}

impl LossParts {
    pub fn total(&self) -> f32 {
        self.rpn_objectness + self.rpn_box + self.classification + self.box_regression + self.mask
    }
}

/// A scan prepared once for repeated training steps.
#[derive(Clone, Debug)]
pub struct TrainSample {
    pub(crate) prepared: Prepared,
    /// Ground-truth boxes in network-input coordinates.
    pub(crate) gt_boxes: Vec<BBox>,
    pub(crate) gt_masks: Vec<Mask>,
}

#[derive(Clone, Debug)]
pub struct SegmentationModel {
    config: ModelConfig,
    normalization: Normalization,
    backbone: Backbone,
    heads: Heads,
    mode: Mode,
}

/// Builds a model from pretrained weights. The backbone always comes from the
/// file; with `exclude_heads` every head is freshly drawn from
/// `config.random_seed`, otherwise heads are read from the file too.
pub fn build_model(
    config: &ModelConfig,
    weights_path: &Path,
    exclude_heads: bool,
) -> Result<SegmentationModel, EngineError> {
    let mut model = SegmentationModel::new_random(config)?;
    let manifest = WeightsManifest::load(&WeightsManifest::path_for(weights_path))?;
    let wanted: Vec<(String, Vec<usize>)> = if exclude_heads {
        model
            .backbone
            .params()
            .iter()
            .map(|p| (p.name.clone(), p.shape().to_vec()))
            .collect()
    } else {
        model
            .params()
            .iter()
            .map(|p| (p.name.clone(), p.shape().to_vec()))
            .collect()
    };
    let mismatches: Vec<TensorMismatch> = wanted
        .iter()
        .filter_map(|(name, shape)| {
            let found = manifest.tensors.get(name);
            (found != Some(shape)).then(|| TensorMismatch {
                name: name.clone(),
                expected: shape.clone(),
                found: found.cloned(),
            })
        })
        .collect();
    if !mismatches.is_empty() {
        return Err(EngineError::ShapeMismatch(mismatches));
    }
    if manifest.backbone_id != config.backbone_id {
        tracing::warn!(
            file = %manifest.backbone_id,
            config = %config.backbone_id,
            "weights were declared for a different backbone id but all shapes match"
        );
    }
    let (tensors, _) = read_tensors(weights_path)?;
    let mut subset = TensorMap::new();
    for (name, shape) in &wanted {
        match tensors.get(name) {
            Some(t) if t.shape() == shape.as_slice() => {
                subset.insert(name.clone(), t.clone());
            }
            other => {
                return Err(EngineError::ShapeMismatch(vec![TensorMismatch {
                    name: name.clone(),
                    expected: shape.clone(),
                    found: other.map(|t| t.shape().to_vec()),
                }]))
            }
        }
    }
    model.assign_tensors(&subset)?;
    model.normalization = manifest.normalization;
    Ok(model)
}

impl SegmentationModel {
    /// Fresh weights from `config.random_seed`. The backbone and the heads use
    /// separate streams, so head initialization does not depend on backbone
    /// size.
    pub fn new_random(config: &ModelConfig) -> Result<Self, EngineError> {
        config.validate()?;
        let spec = backbone_spec(&config.backbone_id)?;
        let mut backbone_rng = ChaCha8Rng::seed_from_u64(config.random_seed);
        let mut head_rng = ChaCha8Rng::seed_from_u64(config.random_seed ^ 0x6865_6164_7321);
        let backbone = Backbone::new(spec, &mut backbone_rng);
        let heads = Heads::new(backbone.out_channels(), &mut head_rng);
        Ok(Self {
            config: config.clone(),
            normalization: spec.normalization,
            backbone,
            heads,
            mode: Mode::Training,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub(crate) fn set_config(&mut self, config: ModelConfig) {
        self.config = config;
    }

    pub fn normalization(&self) -> Normalization {
        self.normalization
    }

    pub(crate) fn set_normalization(&mut self, n: Normalization) {
        self.normalization = n;
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut v = self.backbone.params();
        v.extend(self.heads.params());
        v
    }

    pub(crate) fn trainable_params(&mut self, include_backbone: bool) -> Vec<&mut Param> {
        let mut v = if include_backbone {
            self.backbone.params_mut()
        } else {
            Vec::new()
        };
        v.extend(self.heads.params_mut());
        v
    }

    pub fn tensors(&self) -> TensorMap {
        self.params()
            .into_iter()
            .map(|p| (p.name.clone(), p.value.clone()))
            .collect()
    }

    pub fn backbone_tensors(&self) -> TensorMap {
        self.backbone
            .params()
            .into_iter()
            .map(|p| (p.name.clone(), p.value.clone()))
            .collect()
    }

    pub fn head_tensors(&self) -> TensorMap {
        self.heads
            .params()
            .into_iter()
            .map(|p| (p.name.clone(), p.value.clone()))
            .collect()
    }

    /// Copies every tensor in `tensors` onto the parameter of the same name.
    pub(crate) fn assign_tensors(&mut self, tensors: &TensorMap) -> Result<(), EngineError> {
        let mut params: BTreeMap<String, &mut Param> = self
            .trainable_params(true)
            .into_iter()
            .map(|p| (p.name.clone(), p))
            .collect();
        let mut mismatches = Vec::new();
        for (name, value) in tensors {
            match params.get_mut(name) {
                Some(p) if p.shape() == value.shape() => p.assign(value.clone()),
                Some(p) => mismatches.push(TensorMismatch {
                    name: name.clone(),
                    expected: p.shape().to_vec(),
                    found: Some(value.shape().to_vec()),
                }),
                None => return Err(EngineError::Weights(format!("unexpected tensor {name}"))),
            }
        }
        if mismatches.is_empty() {
            Ok(())
        } else {
            Err(EngineError::ShapeMismatch(mismatches))
        }
    }

    /// Requires that `tensors` covers every parameter, then assigns.
    pub(crate) fn load_all_tensors(&mut self, tensors: &TensorMap) -> Result<(), EngineError> {
        let missing: Vec<TensorMismatch> = self
            .params()
            .iter()
            .filter(|p| !tensors.contains_key(&p.name))
            .map(|p| TensorMismatch {
                name: p.name.clone(),
                expected: p.shape().to_vec(),
                found: None,
            })
            .collect();
        if !missing.is_empty() {
            return Err(EngineError::ShapeMismatch(missing));
        }
        self.assign_tensors(tensors)
    }

    pub(crate) fn prepare_sample(&self, scan: &ScanRecord) -> Result<TrainSample, EngineError> {
        let gt = scan.ground_truth().ok_or_else(|| {
            EngineError::Config(format!("scan {} has no ground truth", scan.scan_id))
        })?;
        let prepared = prepare_image(scan.image(), self.config.input_size, &self.normalization);
        let gt_boxes = gt
            .boxes()
            .iter()
            .map(|b| b.scaled(prepared.scale))
            .collect();
        Ok(TrainSample {
            prepared,
            gt_boxes,
            gt_masks: gt.masks().to_vec(),
        })
    }

    fn anchors(&self, fh: usize, fw: usize) -> Vec<BBox> {
        generate_anchors(fh, fw, FEATURE_STRIDE, &ANCHOR_SIZES, &ANCHOR_RATIOS)
    }

    /// Forward pass with loss computation; when `backprop` is set, parameter
    /// gradients are accumulated (backbone gradients only if
    /// `update_backbone`).
    pub(crate) fn train_step(
        &mut self,
        sample: &TrainSample,
        rng: &mut ChaCha8Rng,
        backprop: bool,
        update_backbone: bool,
    ) -> LossParts {
        let mut loss = LossParts::default();
        let (feat, bcache) = self.backbone.forward(&sample.prepared.tensor);
        let (_, c, fh, fw) = feat.dim();
        let anchors = self.anchors(fh, fw);
        let gt = &sample.gt_boxes;
        let heads = &mut self.heads;

        // region proposal network
        let (mut t, tcache) = heads.rpn_conv.forward(&feat);
        relu_inplace(&mut t);
        let (obj, ocache) = heads.rpn_obj.forward(&t);
        let (del, dcache) = heads.rpn_delta.forward(&t);

        let g = gt.len();
        let ious: Vec<f64> = anchors
            .iter()
            .flat_map(|a| gt.iter().map(move |b| box_iou_unchecked(a, b)))
            .collect();
        let mut labels = vec![-1i8; anchors.len()];
        let mut matched = vec![0usize; anchors.len()];
        let mut gt_best = vec![0.0f64; g];
        for ai in 0..anchors.len() {
            let row = &ious[ai * g..(ai + 1) * g];
            let (best_g, best) =
                row.iter().enumerate().fold(
                    (0, 0.0),
                    |acc, (k, &v)| if v > acc.1 { (k, v) } else { acc },
                );
            matched[ai] = best_g;
            if best < RPN_NEG_IOU {
                labels[ai] = 0;
            } else if best >= RPN_POS_IOU {
                labels[ai] = 1;
            }
            for (k, &v) in row.iter().enumerate() {
                gt_best[k] = gt_best[k].max(v);
            }
        }
        for ai in 0..anchors.len() {
            for k in 0..g {
                if gt_best[k] > 0.0 && ious[ai * g + k] == gt_best[k] {
                    labels[ai] = 1;
                    matched[ai] = k;
                }
            }
        }
        let mut pos: Vec<usize> = (0..anchors.len()).filter(|&a| labels[a] == 1).collect();
        let mut neg: Vec<usize> = (0..anchors.len()).filter(|&a| labels[a] == 0).collect();
        pos.shuffle(rng);
        pos.truncate(RPN_BATCH / 2);
        neg.shuffle(rng);
        neg.truncate(RPN_BATCH - pos.len());
        let n = (pos.len() + neg.len()).max(1) as f32;
        let mut dobj = Array4::<f32>::zeros(obj.dim());
        let mut ddel = Array4::<f32>::zeros(del.dim());
        let locate = |ai: usize| {
            let (cell, a) = (ai / NUM_ANCHORS, ai % NUM_ANCHORS);
            (a, cell / fw, cell % fw)
        };
        for (&ai, target) in pos
            .iter()
            .map(|a| (a, 1.0))
            .chain(neg.iter().map(|a| (a, 0.0)))
        {
            let (a, i, j) = locate(ai);
            let (l, d) = bce_with_logits(obj[[0, a, i, j]], target);
            loss.rpn_objectness += l / n;
            dobj[[0, a, i, j]] = d / n;
        }
        for &ai in &pos {
            let (a, i, j) = locate(ai);
            let target = encode_box(&anchors[ai], &gt[matched[ai]], RPN_WEIGHTS);
            for (k, &tk) in target.iter().enumerate() {
                let (l, d) = smooth_l1(del[[0, a * 4 + k, i, j]] - tk as f32, SMOOTH_BETA);
                loss.rpn_box += l / n;
                ddel[[0, a * 4 + k, i, j]] = d / n;
            }
        }

        // region sampling: positives are the candidates the IoU filter keeps
        let mut cands = propose(self.config.input_size, &obj, &del, &anchors, POST_NMS_TRAIN);
        cands.extend(gt.iter().copied());
        let mut roi_pos = filter_region_indices(&cands, gt, self.config.roi_iou_threshold);
        let mut is_pos = vec![false; cands.len()];
        for &k in &roi_pos {
            is_pos[k] = true;
        }
        let mut roi_neg: Vec<usize> = (0..cands.len()).filter(|&k| !is_pos[k]).collect();
        roi_pos.shuffle(rng);
        roi_pos.truncate(ROI_POSITIVES);
        roi_neg.shuffle(rng);
        roi_neg.truncate(ROI_BATCH - roi_pos.len());
        let n_pos = roi_pos.len();
        let rois: Vec<BBox> = roi_pos.iter().chain(&roi_neg).map(|&k| cands[k]).collect();
        let roi_gt: Vec<usize> = rois[..n_pos]
            .iter()
            .map(|r| best_overlap(r, gt).map(|(k, _)| k).unwrap_or(0))
            .collect();
        let r = rois.len();
        let inv_stride = 1.0 / FEATURE_STRIDE as f64;
        let feat3 = feat.index_axis(Axis(0), 0);
        let mut dfeat3 = Array3::<f32>::zeros((c, fh, fw));

        // box head
        if r > 0 {
            let feat_rois: Vec<BBox> = rois.iter().map(|b| b.scaled(inv_stride)).collect();
            let plan = RoiAlignPlan::new(&feat_rois, fh, fw, BOX_POOL, SAMPLING);
            let flat = plan
                .forward(feat3)
                .into_shape_with_order((r, c * BOX_POOL * BOX_POOL))
                .expect("contiguous pool");
            let mut hid = heads.box_fc.infer(&flat);
            relu_inplace(&mut hid);
            let cls = heads.box_cls.infer(&hid);
            let reg = heads.box_reg.infer(&hid);
            let mut dcls = Array2::<f32>::zeros(cls.raw_dim());
            let mut dreg = Array2::<f32>::zeros(reg.raw_dim());
            let rn = r as f32;
            for k in 0..r {
                let (l, d) = bce_with_logits(cls[[k, 0]], if k < n_pos { 1.0 } else { 0.0 });
                loss.classification += l / rn;
                dcls[[k, 0]] = d / rn;
            }
            for k in 0..n_pos {
                let target = encode_box(&rois[k], &gt[roi_gt[k]], BOX_WEIGHTS);
                for (q, &tq) in target.iter().enumerate() {
                    let (l, d) = smooth_l1(reg[[k, q]] - tq as f32, SMOOTH_BETA);
                    loss.box_regression += l / rn;
                    dreg[[k, q]] = d / rn;
                }
            }
            if backprop {
                let mut dh =
                    heads.box_cls.backward(&dcls, &hid) + heads.box_reg.backward(&dreg, &hid);
                relu_backward(&mut dh, &hid);
                let dflat = heads.box_fc.backward(&dh, &flat);
                let dpool = dflat
                    .into_shape_with_order((r, c, BOX_POOL, BOX_POOL))
                    .expect("contiguous grad");
                plan.backward(&dpool, &mut dfeat3);
            }
        }

        // mask head
        let n_mask = n_pos.min(MASK_ROIS);
        if n_mask > 0 {
            let mrois: Vec<BBox> = rois[..n_mask]
                .iter()
                .map(|b| b.scaled(inv_stride))
                .collect();
            let plan = RoiAlignPlan::new(&mrois, fh, fw, MASK_POOL, SAMPLING);
            let pooled = plan.forward(feat3);
            let (mut m1, c1) = heads.mask_conv1.forward(&pooled);
            relu_inplace(&mut m1);
            let (mut m2, c2) = heads.mask_conv2.forward(&m1);
            relu_inplace(&mut m2);
            let (logits, c3) = heads.mask_logits.forward(&m2);
            let mut dlog = Array4::<f32>::zeros(logits.dim());
            let count = (n_mask * MASK_POOL * MASK_POOL) as f32;
            for k in 0..n_mask {
                let target =
                    mask_target(&rois[k], &sample.gt_masks[roi_gt[k]], sample.prepared.scale);
                for i in 0..MASK_POOL {
                    for j in 0..MASK_POOL {
                        let (l, d) =
                            bce_with_logits(logits[[k, 0, i, j]], target[i * MASK_POOL + j]);
                        loss.mask += l / count;
                        dlog[[k, 0, i, j]] = d / count;
                    }
                }
            }
            if backprop {
                let mut g = heads.mask_logits.backward(&dlog, &c3);
                relu_backward(&mut g, &m2);
                let mut g = heads.mask_conv2.backward(&g, &c2);
                relu_backward(&mut g, &m1);
                let g = heads.mask_conv1.backward(&g, &c1);
                plan.backward(&g, &mut dfeat3);
            }
        }

        if backprop {
            let mut dt =
                heads.rpn_obj.backward(&dobj, &ocache) + heads.rpn_delta.backward(&ddel, &dcache);
            relu_backward(&mut dt, &t);
            let dfeat = heads.rpn_conv.backward(&dt, &tcache) + dfeat3.insert_axis(Axis(0));
            if update_backbone {
                self.backbone.backward(dfeat, &bcache);
            }
        }
        loss
    }

    fn detect(&self, image: &Image) -> Vec<Detection> {
        let prep = prepare_image(image, self.config.input_size, &self.normalization);
        let heads = &self.heads;
        let feat = self.backbone.infer(&prep.tensor);
        let (_, c, fh, fw) = feat.dim();
        let mut t = heads.rpn_conv.infer(&feat);
        relu_inplace(&mut t);
        let obj = heads.rpn_obj.infer(&t);
        let del = heads.rpn_delta.infer(&t);
        let anchors = self.anchors(fh, fw);
        let props = propose(self.config.input_size, &obj, &del, &anchors, POST_NMS_TEST);
        if props.is_empty() {
            return Vec::new();
        }
        let inv_stride = 1.0 / FEATURE_STRIDE as f64;
        let feat3 = feat.index_axis(Axis(0), 0);
        let r = props.len();
        let feat_rois: Vec<BBox> = props.iter().map(|b| b.scaled(inv_stride)).collect();
        let flat = RoiAlignPlan::new(&feat_rois, fh, fw, BOX_POOL, SAMPLING)
            .forward(feat3)
            .into_shape_with_order((r, c * BOX_POOL * BOX_POOL))
            .expect("contiguous pool");
        let mut hid = heads.box_fc.infer(&flat);
        relu_inplace(&mut hid);
        let cls = heads.box_cls.infer(&hid);
        let reg = heads.box_reg.infer(&hid);

        // content region of the padded input
        let valid_h = prep.orig_height as f64 * prep.scale;
        let valid_w = prep.orig_width as f64 * prep.scale;
        let mut boxes = Vec::new();
        let mut scores = Vec::new();
        for k in 0..r {
            let score = sigmoid(cls[[k, 0]]) as f64;
            if score < MIN_SCORE {
                continue;
            }
            let d = [0, 1, 2, 3].map(|q| reg[[k, q]] as f64);
            let b = decode_box(&props[k], d, BOX_WEIGHTS).clipped(valid_h, valid_w);
            if b.height() >= MIN_BOX_SIDE && b.width() >= MIN_BOX_SIDE {
                boxes.push(b);
                scores.push(score);
            }
        }
        let keep: Vec<usize> = nms(&boxes, &scores, DETECTION_NMS)
            .into_iter()
            .take(self.config.max_detections_per_image)
            .collect();
        if keep.is_empty() {
            return Vec::new();
        }
        let kept: Vec<BBox> = keep.iter().map(|&k| boxes[k]).collect();
        let mrois: Vec<BBox> = kept.iter().map(|b| b.scaled(inv_stride)).collect();
        let pooled = RoiAlignPlan::new(&mrois, fh, fw, MASK_POOL, SAMPLING).forward(feat3);
        let mut m = heads.mask_conv1.infer(&pooled);
        relu_inplace(&mut m);
        let mut m = heads.mask_conv2.infer(&m);
        relu_inplace(&mut m);
        let logits = heads.mask_logits.infer(&m);

        let mut out = Vec::with_capacity(keep.len());
        for (n, &k) in keep.iter().enumerate() {
            let bin = &kept[n];
            let orig = bin.scaled(1.0 / prep.scale);
            let bbox = BBox::new(
                orig.r0.floor().max(0.0),
                orig.c0.floor().max(0.0),
                orig.r1.ceil().min(prep.orig_height as f64),
                orig.c1.ceil().min(prep.orig_width as f64),
            );
            if !bbox.is_valid() {
                continue;
            }
            let probs: Vec<f32> = (0..MASK_POOL * MASK_POOL)
                .map(|q| sigmoid(logits[[n, 0, q / MASK_POOL, q % MASK_POOL]]))
                .collect();
            let mask = paste_mask(
                &probs,
                bin,
                &bbox,
                prep.scale,
                prep.orig_height,
                prep.orig_width,
                self.config.mask_threshold,
            );
            out.push(Detection {
                bbox,
                class_label: ClassLabel::Tumor,
                score: scores[k],
                mask,
            });
        }
        out
    }
}

/// Decodes every anchor, keeps the top scorers and suppresses overlaps.
fn propose(
    input_size: usize,
    obj: &Array4<f32>,
    del: &Array4<f32>,
    anchors: &[BBox],
    keep: usize,
) -> Vec<BBox> {
    let (_, na, _, fw) = obj.dim();
    let size = input_size as f64;
    let mut cands: Vec<(f64, BBox)> = Vec::with_capacity(anchors.len());
    for (ai, anchor) in anchors.iter().enumerate() {
        let (cell, a) = (ai / na, ai % na);
        let (i, j) = (cell / fw, cell % fw);
        let d = [0, 1, 2, 3].map(|k| del[[0, a * 4 + k, i, j]] as f64);
        let b = decode_box(anchor, d, RPN_WEIGHTS).clipped(size, size);
        if b.height() >= MIN_BOX_SIDE && b.width() >= MIN_BOX_SIDE {
            cands.push((obj[[0, a, i, j]] as f64, b));
        }
    }
    cands.sort_by(|a, b| b.0.total_cmp(&a.0));
    cands.truncate(PRE_NMS_TOP);
    let boxes: Vec<BBox> = cands.iter().map(|c| c.1).collect();
    let scores: Vec<f64> = cands.iter().map(|c| c.0).collect();
    nms(&boxes, &scores, RPN_NMS)
        .into_iter()
        .take(keep)
        .map(|k| boxes[k])
        .collect()
}

/// Ground-truth mask sampled at the centres of a `MASK_POOL` grid laid over
/// `roi` (input coordinates).
fn mask_target(roi: &BBox, mask: &Mask, scale: f64) -> Vec<f32> {
    let mut t = vec![0.0f32; MASK_POOL * MASK_POOL];
    for i in 0..MASK_POOL {
        let y = (roi.r0 + (i as f64 + 0.5) * roi.height() / MASK_POOL as f64) / scale;
        for j in 0..MASK_POOL {
            let x = (roi.c0 + (j as f64 + 0.5) * roi.width() / MASK_POOL as f64) / scale;
            if y >= 0.0 && x >= 0.0 {
                let (r, c) = (y as usize, x as usize);
                if r < mask.height() && c < mask.width() && mask.get(r, c) {
                    t[i * MASK_POOL + j] = 1.0;
                }
            }
        }
    }
    t
}

/// Resamples a soft `MASK_POOL` grid predicted for `roi` (input coordinates)
/// onto the original image inside `bbox`, then binarizes.
fn paste_mask(
    probs: &[f32],
    roi: &BBox,
    bbox: &BBox,
    scale: f64,
    h: usize,
    w: usize,
    threshold: f64,
) -> Mask {
    let mut mask = Mask::new(h, w);
    let p = MASK_POOL as f64;
    let at = |i: usize, j: usize| probs[i * MASK_POOL + j] as f64;
    for r in bbox.r0 as usize..bbox.r1 as usize {
        let y = (((r as f64 + 0.5) * scale - roi.r0) / roi.height() * p - 0.5).clamp(0.0, p - 1.0);
        let (y0, ly) = (y.floor() as usize, y - y.floor());
        let y1 = (y0 + 1).min(MASK_POOL - 1);
        for c in bbox.c0 as usize..bbox.c1 as usize {
            let x =
                (((c as f64 + 0.5) * scale - roi.c0) / roi.width() * p - 0.5).clamp(0.0, p - 1.0);
            let (x0, lx) = (x.floor() as usize, x - x.floor());
            let x1 = (x0 + 1).min(MASK_POOL - 1);
            let v = at(y0, x0) * (1.0 - ly) * (1.0 - lx)
                + at(y0, x1) * (1.0 - ly) * lx
                + at(y1, x0) * ly * (1.0 - lx)
                + at(y1, x1) * ly * lx;
            if v >= threshold {
                mask.set(r, c, true);
            }
        }
    }
    mask
}

impl Segmenter for SegmentationModel {
    fn predict(&self, image: &Image) -> Result<Vec<Detection>, EngineError> {
        if self.mode != Mode::Inference {
            return Err(EngineError::NotInferenceMode);
        }
        if image.height() < MIN_IMAGE_SIDE || image.width() < MIN_IMAGE_SIDE {
            return Err(EngineError::InvalidImage(format!(
                "image is {}x{}, minimum side is {MIN_IMAGE_SIDE}",
                image.height(),
                image.width()
            )));
        }
        Ok(self.detect(image))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paste_of_a_solid_grid_fills_the_box() {
        let probs = vec![0.9f32; MASK_POOL * MASK_POOL];
        let roi = BBox::new(4.0, 4.0, 12.0, 20.0);
        let bbox = BBox::new(4.0, 4.0, 12.0, 20.0);
        let m = paste_mask(&probs, &roi, &bbox, 1.0, 32, 32, 0.5);
        assert_eq!(m.area(), 8 * 16);
        assert!(m.iter_foreground().all(|(r, c)| bbox.contains_pixel(r, c)));
    }

    #[test]
    fn mask_target_reads_the_source_mask() {
        let mask = Mask::from_fn(16, 16, |r, _| r < 8);
        let t = mask_target(&BBox::new(0.0, 0.0, 32.0, 32.0), &mask, 2.0);
        assert_eq!(t[0], 1.0);
        assert_eq!(t[(MASK_POOL - 1) * MASK_POOL], 0.0);
        assert_eq!(
            t.iter().filter(|&&v| v == 1.0).count(),
            MASK_POOL * MASK_POOL / 2
        );
    }
}
