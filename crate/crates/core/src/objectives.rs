//! Training objectives, the optimizer step, and inference.

use std::io::Write;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::autograd::{self, Tape, Var};
use crate::boxes::BoxXyxy;
use crate::checkpoint::ParamSet;
use crate::datasets::{batch_iterator, Dataset, ImageSample};
use crate::dense::{self, argmax, classify_proposals, clip_dense_probs, detector_dense_probs, fuse_score_maps, EdaConfig, ProposalScores};
use crate::encoders::{FrozenImageEncoder, PatchGrid};
use crate::error::{Error, Result};
use crate::model::{self, Bound, Detector};
use crate::proposals::{self, bipartite_match, box_loss_tape, split_branches, BoxLoss, BoxWeights, MatchResult, Proposal};
use crate::raster::Image;
use crate::tensor::Mat;
use crate::vocab::EmbeddingMatrix;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignmentMode {
    /// Proposals are classified from the fused dense score map.
    #[default]
    Eda,
    /// Proposals are classified by the cosine of a query state with the text
    /// embeddings.
    ObjectAlign,
}

/// Which boxes the classification loss pools the dense map over.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoiSource {
    /// The matched proposals' predicted boxes.
    #[default]
    Predicted,
    /// The matched ground-truth boxes.
    GroundTruth,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    #[serde(rename = "box")]
    pub box_: f64,
    pub cls: f64,
    pub g: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { box_: 1.0, cls: 2.0, g: 1.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig { lr: 2e-4, weight_decay: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, grad_clip: 0.0 }
    }
}

/// Confident proposals away from every annotation join the box targets.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExtraSupervision {
    pub enabled: bool,
    pub min_objectness: f64,
    pub max_iou: f64,
}

impl Default for ExtraSupervision {
    fn default() -> Self {
        ExtraSupervision { enabled: false, min_objectness: 0.9, max_iou: 0.3 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceConfig {
    pub score_threshold: f64,
    pub max_detections: usize,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig { score_threshold: 0.05, max_detections: 100 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub mode: AlignmentMode,
    pub eda: EdaConfig,
    pub loss: LossWeights,
    pub box_loss: BoxWeights,
    pub match_cost: BoxWeights,
    pub optimizer: OptimizerConfig,
    pub extra_supervision: ExtraSupervision,
    pub cls_roi: RoiSource,
    /// Add the box loss of every earlier decoder layer (matched separately)
    /// to `l_box`.
    pub aux_box_loss: bool,
    pub inference: InferenceConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: AlignmentMode::default(),
            eda: EdaConfig::default(),
            loss: LossWeights::default(),
            box_loss: BoxWeights::default(),
            match_cost: BoxWeights::default(),
            optimizer: OptimizerConfig::default(),
            extra_supervision: ExtraSupervision::default(),
            cls_roi: RoiSource::default(),
            aux_box_loss: true,
            inference: InferenceConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.eda.validate()?;
        self.box_loss.validate()?;
        self.match_cost.validate()?;
        let l = &self.loss;
        if [l.box_, l.cls, l.g].iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::arg(format!("loss weights must be nonnegative, got {l:?}")));
        }
        let o = &self.optimizer;
        if !(o.lr >= 0.0) || !(o.weight_decay >= 0.0) || !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || !(o.eps > 0.0) || !(o.grad_clip >= 0.0) {
            return Err(Error::arg(format!("invalid optimizer settings {o:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub l_box: f64,
    pub l_cls: f64,
    pub l_g: f64,
    pub total: f64,
    /// `(w_box, w_cls, w_g)`.
    pub weights: (f64, f64, f64),
    pub box_parts: BoxLoss,
}

impl LossBundle {
    pub fn new(l_box: f64, l_cls: f64, l_g: f64, w: &LossWeights, box_parts: BoxLoss) -> Self {
        LossBundle {
            l_box,
            l_cls,
            l_g,
            total: w.box_ * l_box + w.cls * l_cls + w.g * l_g,
            weights: (w.box_, w.cls, w.g),
            box_parts,
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.l_box, self.l_cls, self.l_g, self.total].iter().all(|v| v.is_finite())
    }
}

// ---------------------------------------------------------------------------
// Loss terms
// ---------------------------------------------------------------------------

/// Mean over matched proposals of `−ln(s[label] / Σ s)`. `labels[t]` is the
/// category index of target `t`. No matches gives 0.
pub fn classification_loss(scores: &[ProposalScores], m: &MatchResult, labels: &[usize]) -> f64 {
    if m.pairs.is_empty() {
        return 0.0;
    }
    let total: f64 = m
        .pairs
        .iter()
        .map(|&(q, t)| {
            let s = &scores[q].scores;
            s.iter().sum::<f64>().ln() - s[labels[t]].ln()
        })
        .sum();
    total / m.pairs.len() as f64
}

/// Per-RoI category scores on the tape: cosine softmax of `features` against
/// `emb`, geometric fusion with `log_clip` (the frozen model's log
/// probabilities, constant), RoIAlign and top-k mean. Returns `n × C`.
#[allow(clippy::too_many_arguments)]
pub fn eda_scores_tape(
    tape: &mut Tape,
    features: Var,
    grid: (usize, usize),
    emb: &Mat,
    log_clip: Option<&Mat>,
    rois: &[BoxXyxy],
    cfg: &EdaConfig,
) -> Result<Var> {
    let (h, w) = grid;
    let fv = tape.value(features);
    if fv.cols() != emb.cols() {
        return Err(Error::DimMismatch { expected: emb.cols(), got: fv.cols() });
    }
    if fv.rows() != h * w {
        return Err(Error::shape(format!("{} feature rows for a {h}x{w} grid", fv.rows())));
    }
    let unit = tape.normalize_rows(features);
    let e = tape.constant(emb.clone());
    let logits = tape.matmul_t(unit, e);
    let logits = tape.scale(logits, 1.0 / cfg.tau);
    let log_det = tape.log_softmax_rows(logits);
    let log_fused = match log_clip {
        Some(lc) if cfg.lam > 0.0 => {
            let a = tape.scale(log_det, 1.0 - cfg.lam);
            let b = tape.constant(lc.scale(cfg.lam));
            tape.add(a, b)
        }
        _ => log_det,
    };
    let fused = tape.exp(log_fused);
    let mut rows = Vec::with_capacity(rois.len());
    for roi in rois {
        let weights = dense::roi_align_weights(h, w, roi, cfg.roi_size)?;
        let sampled = tape.sparse(fused, Rc::new(weights));
        rows.push(tape.topk_mean_cols(sampled, cfg.k));
    }
    Ok(tape.concat_rows(&rows))
}

/// Log of the frozen model's dense probabilities, floored to stay finite.
pub fn clip_log_probs(encoder: &dyn FrozenImageEncoder, image: &Image, emb: &EmbeddingMatrix, tau: f64) -> Result<Mat> {
    let map = clip_dense_probs(encoder, image, emb, tau)?;
    Ok(map.probs().map(|p| p.max(1e-300).ln()))
}

/// Mean absolute difference between the spatial mean of `features` and the
/// frozen class-token feature.
pub fn global_alignment_loss(features: &PatchGrid, encoder: &dyn FrozenImageEncoder, image: &Image) -> Result<f64> {
    let cls = encoder.pooled_class_token(image)?;
    global_alignment_to(features.values(), &cls)
}

pub fn global_alignment_to(features: &Mat, cls: &[f64]) -> Result<f64> {
    if features.cols() != cls.len() {
        return Err(Error::DimMismatch { expected: cls.len(), got: features.cols() });
    }
    let n = features.rows() as f64;
    let mut mean = vec![0.0; cls.len()];
    for r in 0..features.rows() {
        for (m, v) in mean.iter_mut().zip(features.row(r)) {
            *m += v / n;
        }
    }
    Ok(mean.iter().zip(cls).map(|(a, b)| (a - b).abs()).sum::<f64>() / cls.len() as f64)
}

pub fn global_alignment_tape(tape: &mut Tape, features: Var, cls: &[f64]) -> Result<Var> {
    if tape.value(features).cols() != cls.len() {
        return Err(Error::DimMismatch { expected: cls.len(), got: tape.value(features).cols() });
    }
    let pooled = tape.mean_rows(features);
    let c = tape.constant(Mat::from_vec(1, cls.len(), cls.to_vec()));
    let d = tape.sub(pooled, c);
    let a = tape.abs(d);
    Ok(tape.mean_all(a))
}

/// Cross-entropy of `softmax(cos(query, E) / tau)` for matched queries.
/// `queries` is `nq × d` (already projected to the embedding space).
pub fn object_level_baseline_loss(queries: &Mat, emb: &EmbeddingMatrix, m: &MatchResult, labels: &[usize], tau: f64) -> Result<f64> {
    if m.pairs.is_empty() {
        return Ok(0.0);
    }
    let logits = dense::cosine_logits(queries, &emb.to_mat(), tau)?;
    let lsm = autograd::log_softmax_rows(&logits);
    Ok(m.pairs.iter().map(|&(q, t)| -lsm.get(q, labels[t])).sum::<f64>() / m.pairs.len() as f64)
}

pub fn object_level_logits_tape(tape: &mut Tape, queries: Var, emb: &Mat, tau: f64) -> Result<Var> {
    if tape.value(queries).cols() != emb.cols() {
        return Err(Error::DimMismatch { expected: emb.cols(), got: tape.value(queries).cols() });
    }
    let unit = tape.normalize_rows(queries);
    let e = tape.constant(emb.clone());
    let logits = tape.matmul_t(unit, e);
    Ok(tape.scale(logits, 1.0 / tau))
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

/// Adam with decoupled weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub cfg: OptimizerConfig,
    m: ParamSet,
    v: ParamSet,
    t: u64,
}

impl AdamW {
    pub fn new(cfg: OptimizerConfig) -> Self {
        AdamW { cfg, m: ParamSet::new(), v: ParamSet::new(), t: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &ParamSet) {
        self.t += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for (name, p) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            if self.m.get(name).is_none() {
                self.m.insert(name, Mat::zeros(p.rows(), p.cols()));
                self.v.insert(name, Mat::zeros(p.rows(), p.cols()));
            }
            let m = self.m.get_mut(name).expect("inserted");
            for (mi, gi) in m.data_mut().iter_mut().zip(g.data()) {
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
            }
            let v = self.v.get_mut(name).expect("inserted");
            for (vi, gi) in v.data_mut().iter_mut().zip(g.data()) {
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
            }
            let (m, v) = (self.m.get(name).expect("inserted"), self.v.get(name).expect("inserted"));
            for ((pi, mi), vi) in p.data_mut().iter_mut().zip(m.data()).zip(v.data()) {
                let update = (mi / bc1) / ((vi / bc2).sqrt() + c.eps);
                *pi -= c.lr * (update + c.weight_decay * *pi);
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

pub struct TrainState {
    pub detector: Detector,
    pub optimizer: AdamW,
    pub step: usize,
}

impl TrainState {
    pub fn new(detector: Detector, optimizer: OptimizerConfig) -> Self {
        TrainState { detector, optimizer: AdamW::new(optimizer), step: 0 }
    }
}

/// Frozen-model inputs that a training step needs.
pub struct TrainContext<'a> {
    pub encoder: &'a dyn FrozenImageEncoder,
    /// Text embeddings of the training categories.
    pub train_emb: &'a EmbeddingMatrix,
    pub cfg: &'a TrainConfig,
}

struct ImageLoss {
    bundle: LossBundle,
    grads: ParamSet,
}

fn labels_for(sample: &ImageSample, emb: &EmbeddingMatrix) -> Result<Vec<usize>> {
    sample
        .annotations
        .iter()
        .map(|a| emb.position(&a.category).ok_or_else(|| Error::UnknownCategory(a.category.clone())))
        .collect()
}

/// Loss and parameter gradients for one image.
fn image_loss(sample: &ImageSample, det: &Detector, ctx: &TrainContext) -> Result<ImageLoss> {
    let cfg = ctx.cfg;
    let mut tape = Tape::new();
    let bound = Bound::trainable(&mut tape, &det.params);
    let f = model::forward(&mut tape, &bound, &det.config, &det.fuse_levels, &sample.image)?;
    let proposals = model::read_proposals(&tape, f.decoded.boxes, f.decoded.obj_logits);

    let labels = labels_for(sample, ctx.train_emb)?;
    let mut box_targets: Vec<BoxXyxy> = sample.annotations.iter().map(|a| a.bbox).collect();
    if cfg.extra_supervision.enabled {
        let es = cfg.extra_supervision;
        box_targets.extend(proposals::confident_unlabeled(&proposals, &box_targets, es.min_objectness, es.max_iou));
    }
    let m = bipartite_match(&proposals, &box_targets, &cfg.match_cost);
    let (mut l_box, box_parts) = box_loss_tape(&mut tape, f.decoded.boxes, f.decoded.obj_logits, &box_targets, &m, &cfg.box_loss);
    if cfg.aux_box_loss {
        let n = f.decoded.layer_boxes.len();
        for (&bx, &ob) in f.decoded.layer_boxes[..n - 1].iter().zip(&f.decoded.layer_obj_logits[..n - 1]) {
            let props = model::read_proposals(&tape, bx, ob);
            let ml = bipartite_match(&props, &box_targets, &cfg.match_cost);
            let (aux, _) = box_loss_tape(&mut tape, bx, ob, &box_targets, &ml, &cfg.box_loss);
            l_box = tape.add(l_box, aux);
        }
    }

    // Only annotated targets carry a label.
    let cls_pairs: Vec<(usize, usize)> = m.pairs.iter().copied().filter(|&(_, t)| t < labels.len()).collect();
    let emb = ctx.train_emb.to_mat();
    let l_cls = if cls_pairs.is_empty() || cfg.loss.cls == 0.0 {
        None
    } else {
        let targets: Vec<usize> = cls_pairs.iter().map(|&(_, t)| labels[t]).collect();
        Some(match cfg.mode {
            AlignmentMode::Eda => {
                let rois: Vec<BoxXyxy> = cls_pairs
                    .iter()
                    .map(|&(q, t)| match cfg.cls_roi {
                        RoiSource::Predicted => proposals[q].bbox.to_xyxy(),
                        RoiSource::GroundTruth => box_targets[t],
                    })
                    .collect();
                let log_clip = if cfg.eda.lam > 0.0 {
                    Some(clip_log_probs(ctx.encoder, &sample.image, ctx.train_emb, cfg.eda.tau)?)
                } else {
                    None
                };
                let scores = eda_scores_tape(&mut tape, f.features, f.grid, &emb, log_clip.as_ref(), &rois, &cfg.eda)?;
                tape.cross_entropy_renorm(scores, &targets)
            }
            AlignmentMode::ObjectAlign => {
                let (_, cls_state) = split_branches(&f.decoded.states, &det.config.decoder)?;
                let w = bound.get("head.cls.w")?;
                let b = bound.get("head.cls.b")?;
                let q = tape.linear(cls_state, w, b);
                let logits = object_level_logits_tape(&mut tape, q, &emb, cfg.eda.tau)?;
                let qs: Vec<usize> = cls_pairs.iter().map(|p| p.0).collect();
                let sel = tape.select_rows(logits, &qs);
                tape.softmax_cross_entropy(sel, &targets)
            }
        })
    };
    let l_g = if cfg.loss.g > 0.0 {
        let cls = ctx.encoder.pooled_class_token(&sample.image)?;
        Some(global_alignment_tape(&mut tape, f.features, &cls)?)
    } else {
        None
    };

    let w = &cfg.loss;
    let mut total = tape.scale(l_box, w.box_);
    if let Some(c) = l_cls {
        let s = tape.scale(c, w.cls);
        total = tape.add(total, s);
    }
    if let Some(g) = l_g {
        let s = tape.scale(g, w.g);
        total = tape.add(total, s);
    }
    let bundle = LossBundle::new(
        tape.scalar(l_box),
        l_cls.map_or(0.0, |v| tape.scalar(v)),
        l_g.map_or(0.0, |v| tape.scalar(v)),
        w,
        box_parts,
    );
    let mut g = tape.backward(total);
    let mut grads = ParamSet::new();
    for (name, var) in bound.iter() {
        if let Some(gm) = g.take(var) {
            grads.insert(name, gm);
        }
    }
    Ok(ImageLoss { bundle, grads })
}

/// One optimizer step on the batch mean of the per-image total loss.
pub fn train_step(batch: &[ImageSample], state: &mut TrainState, ctx: &TrainContext) -> Result<LossBundle> {
    if batch.is_empty() {
        return Err(Error::arg("empty batch"));
    }
    let n = batch.len() as f64;
    let mut acc = ParamSet::new();
    let (mut l_box, mut l_cls, mut l_g) = (0.0, 0.0, 0.0);
    let mut parts = BoxLoss::default();
    for sample in batch {
        let il = image_loss(sample, &state.detector, ctx)?;
        l_box += il.bundle.l_box / n;
        l_cls += il.bundle.l_cls / n;
        l_g += il.bundle.l_g / n;
        parts.obj += il.bundle.box_parts.obj / n;
        parts.l1 += il.bundle.box_parts.l1 / n;
        parts.giou += il.bundle.box_parts.giou / n;
        parts.total += il.bundle.box_parts.total / n;
        for (name, g) in il.grads.iter() {
            match acc.get_mut(name) {
                Some(a) => a.add_scaled(g, 1.0 / n),
                None => acc.insert(name, g.scale(1.0 / n)),
            }
        }
    }
    let bundle = LossBundle::new(l_box, l_cls, l_g, &ctx.cfg.loss, parts);
    let grads_finite = acc.iter().all(|(_, g)| g.is_finite());
    if !bundle.is_finite() || !grads_finite {
        return Err(Error::NonFiniteLoss {
            step: state.step,
            detail: format!("{bundle:?}, finite gradients: {grads_finite}"),
        });
    }
    let clip = ctx.cfg.optimizer.grad_clip;
    if clip > 0.0 {
        let norm = acc.iter().map(|(_, g)| g.data().iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt();
        if norm > clip {
            for (_, g) in acc.iter_mut() {
                g.data_mut().iter_mut().for_each(|v| *v *= clip / norm);
            }
        }
    }
    state.optimizer.step(&mut state.detector.params, &acc);
    state.step += 1;
    Ok(bundle)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRecord {
    pub step: usize,
    pub l_box: f64,
    pub l_cls: f64,
    pub l_g: f64,
    pub total: f64,
    pub lr: f64,
}

pub fn write_log_line(out: &mut impl Write, step: usize, b: &LossBundle, lr: f64) -> Result<()> {
    let rec = TrainLogRecord { step, l_box: b.l_box, l_cls: b.l_cls, l_g: b.l_g, total: b.total, lr };
    serde_json::to_writer(&mut *out, &rec)?;
    out.write_all(b"\n")?;
    Ok(())
}

/// Train for `steps` optimizer steps over seeded, flip-augmented batches,
/// calling `on_step` after each.
pub fn fit(
    state: &mut TrainState,
    data: &Dataset,
    ctx: &TrainContext,
    steps: usize,
    batch_size: usize,
    seed: u64,
    augment: bool,
    mut on_step: impl FnMut(usize, &LossBundle) -> Result<()>,
) -> Result<()> {
    ctx.cfg.validate()?;
    let mut batches = batch_iterator(data, batch_size, seed, augment)?;
    for _ in 0..steps {
        let batch = batches.next().expect("endless");
        let bundle = train_step(&batch, state, ctx)?;
        on_step(state.step, &bundle)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Inference
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    /// Normalized and clamped to the image.
    pub bbox: BoxXyxy,
    pub label: usize,
    pub category: String,
    /// `S_proposal[label] × objectness`.
    pub score: f64,
    pub objectness: f64,
}

pub struct Inference {
    /// Every decoder proposal, in query order.
    pub proposals: Vec<Proposal>,
    /// Per-proposal category scores over the target vocabulary.
    pub scores: Vec<ProposalScores>,
    /// Thresholded, sorted and capped detections.
    pub detections: Vec<Detection>,
}

/// Full pipeline on one image with the target vocabulary `target_emb`.
pub fn infer(image: &Image, det: &Detector, encoder: &dyn FrozenImageEncoder, target_emb: &EmbeddingMatrix, cfg: &TrainConfig) -> Result<Inference> {
    let out = det.run(image)?;
    let scores: Vec<ProposalScores> = match cfg.mode {
        AlignmentMode::Eda => {
            let s_det = detector_dense_probs(&out.features, target_emb, cfg.eda.tau)?;
            let s = if cfg.eda.lam > 0.0 {
                let s_clip = clip_dense_probs(encoder, image, target_emb, cfg.eda.tau)?;
                fuse_score_maps(&s_det, &s_clip, cfg.eda.lam)?
            } else {
                s_det
            };
            classify_proposals(&s, &out.proposals, &cfg.eda)?
        }
        AlignmentMode::ObjectAlign => {
            let (_, cls_state) = split_branches(&out.states, &det.config.decoder)?;
            let w = det.params.require("head.cls.w")?;
            let b = det.params.require("head.cls.b")?;
            let mut q = cls_state.matmul(w);
            for r in 0..q.rows() {
                for (v, bb) in q.row_mut(r).iter_mut().zip(b.data()) {
                    *v += bb;
                }
            }
            let probs = autograd::softmax_rows(&dense::cosine_logits(&q, &target_emb.to_mat(), cfg.eda.tau)?);
            (0..probs.rows())
                .map(|i| {
                    let s = probs.row(i).to_vec();
                    let label = argmax(&s);
                    ProposalScores { confidence: s[label] * out.proposals[i].objectness, label, scores: s }
                })
                .collect()
        }
    };
    let mut detections: Vec<Detection> = out
        .proposals
        .iter()
        .zip(&scores)
        .filter(|(_, s)| s.confidence >= cfg.inference.score_threshold)
        .filter_map(|(p, s)| {
            let bbox = p.bbox.to_xyxy().clamp_unit();
            (bbox.area() > 0.0).then(|| Detection {
                bbox,
                label: s.label,
                category: target_emb.names()[s.label].clone(),
                score: s.confidence,
                objectness: p.objectness,
            })
        })
        .collect();
    detections.sort_by(|a, b| b.score.total_cmp(&a.score));
    detections.truncate(cfg.inference.max_detections);
    Ok(Inference { proposals: out.proposals, scores, detections })
}

pub fn infer_detections(image: &Image, det: &Detector, encoder: &dyn FrozenImageEncoder, target_emb: &EmbeddingMatrix, cfg: &TrainConfig) -> Result<Vec<Detection>> {
    Ok(infer(image, det, encoder, target_emb, cfg)?.detections)
}
