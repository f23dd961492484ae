//! The trainable detector: a small patch backbone with two stages, a dense
//! feature head fused across stages, and a query decoder with box and
//! objectness heads.

use std::collections::HashMap;
use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{self, SparseMap, Tape, Var};
use crate::boxes::BoxCxcywh;
use crate::checkpoint::ParamSet;
use crate::dense::upsample_weights;
use crate::encoders::PatchGrid;
use crate::error::{Error, Result};
use crate::proposals::{DecoderConfig, Proposal};
use crate::raster::Image;
use crate::tensor::Mat;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Input images are `image_size × image_size`.
    pub image_size: usize,
    /// Pixels per cell of the first stage (stage index 2).
    pub patch_stride: usize,
    /// Channel width of both backbone stages.
    pub backbone_dim: usize,
    /// Dense feature dimension; must equal the text embedding dimension.
    pub feature_dim: usize,
    pub decoder: DecoderConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { image_size: 128, patch_stride: 8, backbone_dim: 64, feature_dim: 32, decoder: DecoderConfig::default() }
    }
}

/// Stage index of the stride-`patch_stride` level; the next stage halves it.
pub const FIRST_STAGE: usize = 2;
pub const LAST_STAGE: usize = 3;

impl ModelConfig {
    pub fn validate(&self, fuse_levels: &[usize]) -> Result<()> {
        self.decoder.validate()?;
        let s = self.patch_stride;
        if s == 0 || self.image_size % (2 * s) != 0 || self.image_size < 2 * s {
            return Err(Error::arg(format!(
                "image_size {} must be a positive multiple of 2·patch_stride = {}",
                self.image_size,
                2 * s
            )));
        }
        if self.backbone_dim == 0 || self.feature_dim == 0 {
            return Err(Error::arg("backbone_dim and feature_dim must be positive"));
        }
        if fuse_levels.is_empty() || fuse_levels.iter().any(|l| !(FIRST_STAGE..=LAST_STAGE).contains(l)) {
            return Err(Error::arg(format!("fuse_levels {fuse_levels:?} must be drawn from {FIRST_STAGE}..={LAST_STAGE}")));
        }
        Ok(())
    }

    pub fn grid(&self) -> (usize, usize) {
        let g = self.image_size / self.patch_stride;
        (g, g)
    }
}

/// Flatten `s × s` RGB patches row-major: row `gy·gw + gx`, column
/// `(py·s + px)·3 + channel`. `None` when the image is smaller than a patch.
pub fn patchify(image: &Image, s: usize) -> Option<Mat> {
    if s == 0 || image.width() < s || image.height() < s {
        return None;
    }
    let (gw, gh) = (image.width() / s, image.height() / s);
    let mut out = Mat::zeros(gh * gw, s * s * 3);
    for gy in 0..gh {
        for gx in 0..gw {
            let row = out.row_mut(gy * gw + gx);
            for py in 0..s {
                for px in 0..s {
                    let rgb = image.get(gx * s + px, gy * s + py);
                    for c in 0..3 {
                        row[(py * s + px) * 3 + c] = rgb[c] as f64;
                    }
                }
            }
        }
    }
    Some(out)
}

/// Mean over the 3×3 neighborhood (clipped at the border).
pub fn neighborhood_mean(h: usize, w: usize) -> SparseMap {
    let mut entries = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let mut row = Vec::with_capacity(9);
            for ny in y.saturating_sub(1)..(y + 2).min(h) {
                for nx in x.saturating_sub(1)..(x + 2).min(w) {
                    row.push(ny * w + nx);
                }
            }
            let wt = 1.0 / row.len() as f64;
            entries.push(row.into_iter().map(|i| (i, wt)).collect());
        }
    }
    SparseMap::new(h * w, entries)
}

/// 2×2 average pooling of an even-sized grid.
pub fn pool2(h: usize, w: usize) -> SparseMap {
    let (oh, ow) = (h / 2, w / 2);
    let mut entries = Vec::with_capacity(oh * ow);
    for y in 0..oh {
        for x in 0..ow {
            entries.push(
                [(2 * y, 2 * x), (2 * y, 2 * x + 1), (2 * y + 1, 2 * x), (2 * y + 1, 2 * x + 1)]
                    .iter()
                    .map(|&(yy, xx)| (yy * w + xx, 0.25))
                    .collect(),
            );
        }
    }
    SparseMap::new(h * w, entries)
}

/// Sine embedding of a normalized point `(y, x)`: the first half of the
/// channels encode `y`, the second half `x`, at geometrically spaced
/// frequencies from half a period to eight periods over the unit interval.
pub fn sine_embed(y: f64, x: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let pairs = (half / 2).max(1);
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let j = (i / 2) as f64;
        let freq = std::f64::consts::PI * 16f64.powf(if pairs > 1 { j / (pairs - 1) as f64 } else { 0.0 });
        let f = if i % 2 == 0 { f64::sin } else { f64::cos };
        out[i] = f(y * freq);
        out[half + i] = f(x * freq);
    }
    out
}

/// [`sine_embed`] at every cell center of an `h × w` grid, `h·w × dim`.
pub fn sine_position_encoding(h: usize, w: usize, dim: usize) -> Mat {
    let mut out = Mat::zeros(h * w, dim);
    for y in 0..h {
        for x in 0..w {
            let e = sine_embed((y as f64 + 0.5) / h as f64, (x as f64 + 0.5) / w as f64, dim);
            out.row_mut(y * w + x).copy_from_slice(&e);
        }
    }
    out
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn linear_params(p: &mut ParamSet, name: &str, rows: usize, cols: usize, rng: &mut ChaCha8Rng, gain: f64) {
    p.insert(format!("{name}.w"), Mat::xavier(rows, cols, rng).scale(gain));
    p.insert(format!("{name}.b"), Mat::zeros(1, cols));
}

fn layer_norm_params(p: &mut ParamSet, name: &str, dim: usize) {
    p.insert(format!("{name}.g"), Mat::filled(1, dim, 1.0));
    p.insert(format!("{name}.b"), Mat::zeros(1, dim));
}

/// Freshly initialized parameters for `cfg`.
pub fn init_params(cfg: &ModelConfig, fuse_levels: &[usize], seed: u64) -> Result<ParamSet> {
    cfg.validate(fuse_levels)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParamSet::new();
    let (hb, d) = (cfg.backbone_dim, cfg.feature_dim);
    let dc = &cfg.decoder;
    let hd = dc.hidden_dim;
    let s = cfg.patch_stride;

    linear_params(&mut p, "backbone.patch", s * s * 3, hb, &mut rng, 1.0);
    linear_params(&mut p, "backbone.s2.self", hb, hb, &mut rng, 1.0);
    linear_params(&mut p, "backbone.s2.ctx", hb, hb, &mut rng, 1.0);
    linear_params(&mut p, "backbone.s3.self", hb, hb, &mut rng, 1.0);
    linear_params(&mut p, "backbone.s3.ctx", hb, hb, &mut rng, 1.0);
    for &l in fuse_levels {
        linear_params(&mut p, &format!("fuse.l{l}"), hb, d, &mut rng, 1.0);
    }

    linear_params(&mut p, "decoder.memory", 2 * hb, hd, &mut rng, 1.0);
    p.insert("decoder.query", Mat::randn(dc.num_queries, hd, 1.0, &mut rng));
    for l in 0..dc.num_layers {
        for att in ["self", "cross"] {
            for proj in ["q", "k", "v", "o"] {
                linear_params(&mut p, &format!("decoder.{l}.{att}.{proj}"), hd, hd, &mut rng, 1.0);
            }
        }
        linear_params(&mut p, &format!("decoder.{l}.ffn1"), hd, dc.ffn_dim, &mut rng, 1.0);
        linear_params(&mut p, &format!("decoder.{l}.ffn2"), dc.ffn_dim, hd, &mut rng, 1.0);
        for n in 1..=3 {
            layer_norm_params(&mut p, &format!("decoder.{l}.norm{n}"), hd);
        }
    }

    linear_params(&mut p, "head.box1", hd, hd, &mut rng, 1.0);
    linear_params(&mut p, "head.box2", hd, 4, &mut rng, 0.1);
    linear_params(&mut p, "head.obj", hd, 1, &mut rng, 1.0);
    linear_params(&mut p, "head.cls", hd, d, &mut rng, 1.0);

    // Reference boxes on a regular grid; the box head predicts offsets in logit space.
    let n = dc.num_queries;
    let side = (n as f64).sqrt().ceil() as usize;
    let mut reference = Mat::zeros(n, 4);
    for q in 0..n {
        let (cx, cy) = (((q % side) as f64 + 0.5) / side as f64, ((q / side) as f64 + 0.5) / side as f64);
        reference.row_mut(q).copy_from_slice(&[logit(cx), logit(cy.min(0.95)), logit(0.25), logit(0.25)]);
    }
    p.insert("head.reference", reference);
    Ok(p)
}

/// Parameters placed on a tape, by name.
pub struct Bound {
    vars: HashMap<String, Var>,
}

impl Bound {
    pub fn trainable(tape: &mut Tape, params: &ParamSet) -> Self {
        Bound { vars: params.iter().map(|(n, m)| (n.to_string(), tape.param(m.clone()))).collect() }
    }

    pub fn constants(tape: &mut Tape, params: &ParamSet) -> Self {
        Bound { vars: params.iter().map(|(n, m)| (n.to_string(), tape.constant(m.clone()))).collect() }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars.get(name).copied().ok_or_else(|| Error::arg(format!("missing parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(n, v)| (n.as_str(), *v))
    }

    fn linear(&self, tape: &mut Tape, x: Var, name: &str) -> Result<Var> {
        let w = self.get(&format!("{name}.w"))?;
        let b = self.get(&format!("{name}.b"))?;
        if tape.value(x).cols() != tape.value(w).rows() {
            return Err(Error::DimMismatch { expected: tape.value(w).rows(), got: tape.value(x).cols() });
        }
        Ok(tape.linear(x, w, b))
    }

    fn layer_norm(&self, tape: &mut Tape, x: Var, name: &str) -> Result<Var> {
        let g = self.get(&format!("{name}.g"))?;
        let b = self.get(&format!("{name}.b"))?;
        Ok(tape.layer_norm(x, g, b))
    }
}

fn attention(tape: &mut Tape, b: &Bound, name: &str, q_in: Var, k_in: Var, v_in: Var, heads: usize) -> Result<Var> {
    let q = b.linear(tape, q_in, &format!("{name}.q"))?;
    let k = b.linear(tape, k_in, &format!("{name}.k"))?;
    let v = b.linear(tape, v_in, &format!("{name}.v"))?;
    let dim = tape.value(q).cols();
    let dh = dim / heads;
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (tape.slice_cols(q, h * dh, dh), tape.slice_cols(k, h * dh, dh), tape.slice_cols(v, h * dh, dh))
        };
        let scores = tape.matmul_t(qh, kh);
        let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
        let attn = tape.softmax_rows(scores);
        outs.push(tape.matmul(attn, vh));
    }
    let cat = if heads == 1 { outs[0] } else { tape.concat_cols(&outs) };
    b.linear(tape, cat, &format!("{name}.o"))
}

pub struct DecodeOut {
    /// Query state after every layer.
    pub states: Vec<Var>,
    /// Per-layer `nq × 4` cxcywh boxes in (0, 1) from the shared box head.
    pub layer_boxes: Vec<Var>,
    /// Per-layer `nq × 1` objectness logits.
    pub layer_obj_logits: Vec<Var>,
    /// Last layer's boxes.
    pub boxes: Var,
    /// Last layer's objectness logits.
    pub obj_logits: Var,
}

/// Query decoder over an `h × w` memory grid (`h·w × 2·backbone_dim`).
///
/// Every layer predicts boxes as offsets (in logit space) from the learned
/// reference boxes `head.reference`. Queries attend with a sine encoding of
/// their (detached) reference center added.
pub fn decode(tape: &mut Tape, b: &Bound, cfg: &DecoderConfig, memory: Var, h: usize, w: usize) -> Result<DecodeOut> {
    if tape.value(memory).rows() != h * w {
        return Err(Error::shape(format!("memory has {} rows for a {h}x{w} grid", tape.value(memory).rows())));
    }
    let mem = b.linear(tape, memory, "decoder.memory")?;
    let hd = tape.value(mem).cols();
    if hd != cfg.hidden_dim {
        return Err(Error::DimMismatch { expected: cfg.hidden_dim, got: hd });
    }
    let pos = tape.constant(sine_position_encoding(h, w, hd));
    let mem_k = tape.add(mem, pos);
    let mut q = b.get("decoder.query")?;
    if tape.value(q).rows() != cfg.num_queries {
        return Err(Error::shape(format!("{} query embeddings for {} queries", tape.value(q).rows(), cfg.num_queries)));
    }
    let reference = b.get("head.reference")?;
    let qpos = {
        let r = tape.value(reference);
        let rows: Vec<Vec<f64>> = (0..r.rows())
            .map(|i| sine_embed(autograd::sigmoid(r.get(i, 1)), autograd::sigmoid(r.get(i, 0)), hd))
            .collect();
        tape.constant(Mat::from_rows(&rows))
    };
    let mut states = Vec::with_capacity(cfg.num_layers);
    let mut layer_boxes = Vec::with_capacity(cfg.num_layers);
    let mut layer_obj_logits = Vec::with_capacity(cfg.num_layers);
    for l in 0..cfg.num_layers {
        let qp = tape.add(q, qpos);
        let sa = attention(tape, b, &format!("decoder.{l}.self"), qp, qp, q, cfg.num_heads)?;
        let x = tape.add(q, sa);
        q = b.layer_norm(tape, x, &format!("decoder.{l}.norm1"))?;
        let qp = tape.add(q, qpos);
        let ca = attention(tape, b, &format!("decoder.{l}.cross"), qp, mem_k, mem, cfg.num_heads)?;
        let x = tape.add(q, ca);
        q = b.layer_norm(tape, x, &format!("decoder.{l}.norm2"))?;
        let f = b.linear(tape, q, &format!("decoder.{l}.ffn1"))?;
        let f = tape.relu(f);
        let f = b.linear(tape, f, &format!("decoder.{l}.ffn2"))?;
        let x = tape.add(q, f);
        q = b.layer_norm(tape, x, &format!("decoder.{l}.norm3"))?;
        states.push(q);

        let hb = b.linear(tape, q, "head.box1")?;
        let hb = tape.relu(hb);
        let delta = b.linear(tape, hb, "head.box2")?;
        let z = tape.add(delta, reference);
        let boxes = tape.sigmoid(z);
        layer_boxes.push(boxes);
        layer_obj_logits.push(b.linear(tape, q, "head.obj")?);
    }
    let boxes = *layer_boxes.last().expect("at least one layer");
    let obj_logits = *layer_obj_logits.last().expect("at least one layer");
    Ok(DecodeOut { states, layer_boxes, layer_obj_logits, boxes, obj_logits })
}

/// Detached proposals from decoder outputs.
pub fn read_proposals(tape: &Tape, boxes: Var, obj_logits: Var) -> Vec<Proposal> {
    let bv = tape.value(boxes);
    let ov = tape.value(obj_logits);
    (0..bv.rows())
        .map(|i| {
            let r = bv.row(i);
            let clamp = |v: f64| v.clamp(1e-6, 1.0);
            Proposal {
                bbox: BoxCxcywh { cx: r[0].clamp(0.0, 1.0), cy: r[1].clamp(0.0, 1.0), w: clamp(r[2]), h: clamp(r[3]) },
                objectness: autograd::sigmoid(ov.data()[i]),
            }
        })
        .collect()
}

pub struct Forward {
    /// Dense detector features `h·w × feature_dim`.
    pub features: Var,
    /// Decoder memory `h·w × 2·backbone_dim`.
    pub memory: Var,
    pub grid: (usize, usize),
    pub stride: usize,
    pub decoded: DecodeOut,
}

/// Full forward pass on `tape`.
pub fn forward(tape: &mut Tape, b: &Bound, cfg: &ModelConfig, fuse_levels: &[usize], image: &Image) -> Result<Forward> {
    if image.width() != cfg.image_size || image.height() != cfg.image_size {
        return Err(Error::shape(format!(
            "model expects {0}x{0} images, got {1}x{2}",
            cfg.image_size,
            image.width(),
            image.height()
        )));
    }
    let s = cfg.patch_stride;
    let (h, w) = cfg.grid();
    let patches = patchify(image, s).expect("size checked");
    let x = tape.constant(patches);

    let a = b.linear(tape, x, "backbone.patch")?;
    let a = tape.relu(a);
    let s2 = stage(tape, b, a, "backbone.s2", h, w)?;
    let pooled = tape.sparse(s2, Rc::new(pool2(h, w)));
    let s3 = stage(tape, b, pooled, "backbone.s3", h / 2, w / 2)?;
    let up = Rc::new(upsample_weights(h / 2, w / 2, h, w));
    let s3_up = tape.sparse(s3, up.clone());

    let mut fused = None;
    for &l in fuse_levels {
        let level = if l == FIRST_STAGE { s2 } else { s3 };
        let proj = b.linear(tape, level, &format!("fuse.l{l}"))?;
        let proj = if l == FIRST_STAGE { proj } else { tape.sparse(proj, up.clone()) };
        fused = Some(match fused {
            None => proj,
            Some(acc) => tape.add(acc, proj),
        });
    }
    let features = tape.scale(fused.expect("validated non-empty"), 1.0 / fuse_levels.len() as f64);

    let memory = tape.concat_cols(&[s2, s3_up]);
    let decoded = decode(tape, b, &cfg.decoder, memory, h, w)?;
    Ok(Forward { features, memory, grid: (h, w), stride: s, decoded })
}

/// `relu(x·W_self + mean3x3(x)·W_ctx + b) + x`.
fn stage(tape: &mut Tape, b: &Bound, x: Var, name: &str, h: usize, w: usize) -> Result<Var> {
    let own = b.linear(tape, x, &format!("{name}.self"))?;
    let ctx_in = tape.sparse(x, Rc::new(neighborhood_mean(h, w)));
    let ctx = b.linear(tape, ctx_in, &format!("{name}.ctx"))?;
    let y = tape.add(own, ctx);
    let y = tape.relu(y);
    Ok(tape.add(y, x))
}

/// Detector parameters together with the configuration that shapes them.
#[derive(Clone, Debug, PartialEq)]
pub struct Detector {
    pub config: ModelConfig,
    pub fuse_levels: Vec<usize>,
    pub params: ParamSet,
}

/// Outputs of an inference pass.
pub struct DetectorOutput {
    pub features: PatchGrid,
    pub memory: PatchGrid,
    pub proposals: Vec<Proposal>,
    /// Query states per decoder layer.
    pub states: Vec<Mat>,
}

impl Detector {
    pub fn new(config: ModelConfig, fuse_levels: Vec<usize>, seed: u64) -> Result<Self> {
        let params = init_params(&config, &fuse_levels, seed)?;
        Ok(Detector { config, fuse_levels, params })
    }

    /// Adopt loaded parameters after checking every name and shape against a
    /// fresh initialization of `config`.
    pub fn from_params(config: ModelConfig, fuse_levels: Vec<usize>, params: ParamSet) -> Result<Self> {
        let reference = init_params(&config, &fuse_levels, 0)?;
        for (name, m) in reference.iter() {
            let got = params.get(name).ok_or_else(|| Error::Checkpoint {
                path: Default::default(),
                reason: format!("missing tensor `{name}`"),
            })?;
            if got.shape() != m.shape() {
                return Err(Error::Checkpoint {
                    path: Default::default(),
                    reason: format!("tensor `{name}` has shape {:?}, config expects {:?}", got.shape(), m.shape()),
                });
            }
        }
        if params.len() != reference.len() {
            let extra: Vec<&str> = params.names().filter(|n| reference.get(n).is_none()).collect();
            return Err(Error::Checkpoint { path: Default::default(), reason: format!("unexpected tensors {extra:?}") });
        }
        Ok(Detector { config, fuse_levels, params })
    }

    pub fn run(&self, image: &Image) -> Result<DetectorOutput> {
        let mut tape = Tape::new();
        let b = Bound::constants(&mut tape, &self.params);
        let f = forward(&mut tape, &b, &self.config, &self.fuse_levels, image)?;
        let (h, w) = f.grid;
        Ok(DetectorOutput {
            features: PatchGrid::new(h, w, f.stride, tape.value(f.features).clone())?,
            memory: PatchGrid::new(h, w, f.stride, tape.value(f.memory).clone())?,
            proposals: read_proposals(&tape, f.decoded.boxes, f.decoded.obj_logits),
            states: f.decoded.states.iter().map(|&v| tape.value(v).clone()).collect(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dense::fuse_backbone_levels;
    use crate::encoders::Linear;
    use crate::proposals::generate_proposals;

    fn toy() -> ModelConfig {
        ModelConfig {
            image_size: 32,
            patch_stride: 8,
            backbone_dim: 8,
            feature_dim: 6,
            decoder: DecoderConfig { num_queries: 5, num_layers: 2, split_layer: 1, hidden_dim: 8, num_heads: 2, ffn_dim: 16 },
        }
    }

    fn image(seed: u64) -> Image {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..32 * 32 * 3).map(|_| rng.random::<f32>()).collect();
        Image::from_vec(32, 32, data).unwrap()
    }

    #[test]
    fn patchify_layout() {
        let mut img = Image::new(16, 8, [0.0; 3]);
        img.set(9, 2, [0.1, 0.2, 0.3]);
        let p = patchify(&img, 8).unwrap();
        assert_eq!(p.shape(), (2, 192));
        assert_eq!(p.get(1, (2 * 8 + 1) * 3 + 2), 0.3f32 as f64);
        assert!(patchify(&img, 9).is_none());
    }

    #[test]
    fn forward_shapes_and_bounds() {
        let det = Detector::new(toy(), vec![2, 3], 1).unwrap();
        let out = det.run(&image(0)).unwrap();
        assert_eq!((out.features.height(), out.features.width(), out.features.dim()), (4, 4, 6));
        assert_eq!(out.proposals.len(), 5);
        assert_eq!(out.states.len(), 2);
        for p in &out.proposals {
            p.validate().unwrap();
        }
        let again = det.run(&image(0)).unwrap();
        assert_eq!(out.proposals, again.proposals);
        let via_memory = generate_proposals(&out.memory, &toy().decoder, &det.params).unwrap();
        assert_eq!(via_memory, out.proposals);
    }

    #[test]
    fn tape_fusion_matches_plain_fusion() {
        let cfg = toy();
        let det = Detector::new(cfg.clone(), vec![2, 3], 2).unwrap();
        let img = image(3);
        let mut tape = Tape::new();
        let b = Bound::constants(&mut tape, &det.params);
        let x = tape.constant(patchify(&img, 8).unwrap());
        let a = b.linear(&mut tape, x, "backbone.patch").unwrap();
        let a = tape.relu(a);
        let s2 = stage(&mut tape, &b, a, "backbone.s2", 4, 4).unwrap();
        let pooled = tape.sparse(s2, Rc::new(pool2(4, 4)));
        let s3 = stage(&mut tape, &b, pooled, "backbone.s3", 2, 2).unwrap();
        let lin = |n: &str| Linear { w: det.params.get(&format!("{n}.w")).unwrap().clone(), b: det.params.get(&format!("{n}.b")).unwrap().data().to_vec() };
        let plain = fuse_backbone_levels(
            &[PatchGrid::new(4, 4, 8, tape.value(s2).clone()).unwrap(), PatchGrid::new(2, 2, 16, tape.value(s3).clone()).unwrap()],
            &[lin("fuse.l2"), lin("fuse.l3")],
        )
        .unwrap();
        let out = det.run(&img).unwrap();
        assert!(out.features.values().max_abs_diff(plain.values()) < 1e-12);
    }

    #[test]
    fn rejects_mismatched_checkpoint() {
        let det = Detector::new(toy(), vec![2], 1).unwrap();
        let mut other = toy();
        other.decoder.num_queries = 6;
        assert!(Detector::from_params(other, vec![2], det.params.clone()).is_err());
        assert!(Detector::from_params(toy(), vec![2, 3], det.params.clone()).is_err());
        assert!(Detector::from_params(toy(), vec![2], det.params.clone()).is_ok());
    }

    #[test]
    fn bad_configs() {
        let mut c = toy();
        c.image_size = 24;
        assert!(Detector::new(c, vec![2], 0).is_err());
        assert!(Detector::new(toy(), vec![4], 0).is_err());
        assert!(Detector::new(toy(), vec![], 0).is_err());
    }
}
