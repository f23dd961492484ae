//! Frozen vision-language encoder adapters.
//!
//! The image side is split the way CLIP's ResNet encoder is: a backbone that
//! produces a grid of patch tokens, followed by a single attention-pooling
//! layer whose class-token output is the global image feature. The dense
//! variant runs the same pooling layer with a diagonal attention mask, so each
//! patch attends only to itself and its output reduces to the value path
//! followed by the output projection.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::ParamSet;
use crate::error::{Error, Result};
use crate::raster::Image;
use crate::shapes::{self, Attributes};
use crate::tensor::{cosine, dot, Mat};
use crate::vocab::EmbeddingMatrix;

/// Text side of the frozen model, `g(·)`.
pub trait TextEncoder: Send + Sync {
    fn dim(&self) -> usize;
    fn encode(&self, text: &str) -> Result<Vec<f64>>;
}

/// Image side of the frozen model.
pub trait FrozenImageEncoder: Send + Sync {
    /// Joint embedding dimension.
    fn dim(&self) -> usize;

    /// Patch tokens before pooling.
    fn backbone(&self, image: &Image) -> Result<PatchGrid>;

    /// Pooling layer used by both outputs below.
    fn pool(&self) -> &AttentionPool;

    /// Global image feature: the class-token output of the pooling layer.
    fn pooled_class_token(&self, image: &Image) -> Result<Vec<f64>> {
        let grid = self.backbone(image)?;
        Ok(self.pool().class_token(grid.values()))
    }

    /// Per-patch embeddings from the diagonal-masked pooling pass. Same grid
    /// shape as [`FrozenImageEncoder::backbone`].
    fn masked_patch_embeddings(&self, image: &Image) -> Result<PatchGrid> {
        let grid = self.backbone(image)?;
        let values = self.pool().masked_patches(grid.values());
        PatchGrid::new(grid.height(), grid.width(), grid.stride(), values)
    }
}

/// `h × w` grid of feature vectors, `stride` image pixels per cell.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchGrid {
    h: usize,
    w: usize,
    stride: usize,
    values: Mat,
}

impl PatchGrid {
    pub fn new(h: usize, w: usize, stride: usize, values: Mat) -> Result<Self> {
        if h == 0 || w == 0 || stride == 0 {
            return Err(Error::shape(format!("patch grid {h}x{w} stride {stride}")));
        }
        if values.rows() != h * w {
            return Err(Error::shape(format!("{h}x{w} grid with {} rows", values.rows())));
        }
        if !values.is_finite() {
            return Err(Error::arg("non-finite patch features"));
        }
        Ok(PatchGrid { h, w, stride, values })
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn dim(&self) -> usize {
        self.values.cols()
    }

    pub fn values(&self) -> &Mat {
        &self.values
    }

    pub fn into_values(self) -> Mat {
        self.values
    }

    pub fn at(&self, y: usize, x: usize) -> &[f64] {
        self.values.row(y * self.w + x)
    }
}

/// Affine map on row vectors: `x @ w + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub w: Mat,
    pub b: Vec<f64>,
}

impl Linear {
    pub fn identity(d: usize) -> Self {
        Linear { w: Mat::identity(d), b: vec![0.0; d] }
    }

    pub fn apply_row(&self, x: &[f64]) -> Vec<f64> {
        let mut out = self.b.clone();
        for (i, xi) in x.iter().enumerate() {
            if *xi == 0.0 {
                continue;
            }
            for (o, wv) in out.iter_mut().zip(self.w.row(i)) {
                *o += xi * wv;
            }
        }
        out
    }

    pub fn apply(&self, x: &Mat) -> Mat {
        let mut out = x.matmul(&self.w);
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(&self.b) {
                *o += b;
            }
        }
        out
    }
}

/// Single-head attention pooling with a mean-token class query.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionPool {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    /// Whether the masked pass lets each patch also attend to the class token.
    pub include_cls_in_masked_pass: bool,
}

impl AttentionPool {
    fn scale(&self) -> f64 {
        1.0 / (self.key.w.cols() as f64).sqrt()
    }

    /// Class-token output over `[cls, patches]` with `cls = mean(patches)`.
    pub fn class_token(&self, tokens: &Mat) -> Vec<f64> {
        let n = tokens.rows();
        let d = tokens.cols();
        let mut cls = vec![0.0; d];
        for r in 0..n {
            for (c, v) in cls.iter_mut().zip(tokens.row(r)) {
                *c += v / n as f64;
            }
        }
        let q = self.query.apply_row(&cls);
        let mut keys = vec![self.key.apply_row(&cls)];
        let mut values = vec![self.value.apply_row(&cls)];
        let k_all = self.key.apply(tokens);
        let v_all = self.value.apply(tokens);
        for r in 0..n {
            keys.push(k_all.row(r).to_vec());
            values.push(v_all.row(r).to_vec());
        }
        let logits: Vec<f64> = keys.iter().map(|k| dot(&q, k) * self.scale()).collect();
        let weights = softmax(&logits);
        let mut mixed = vec![0.0; values[0].len()];
        for (wt, v) in weights.iter().zip(&values) {
            for (m, x) in mixed.iter_mut().zip(v) {
                *m += wt * x;
            }
        }
        self.output.apply_row(&mixed)
    }

    /// Diagonal-masked pass: output row `p` depends on token `p` only (plus the
    /// class token when `include_cls_in_masked_pass`).
    pub fn masked_patches(&self, tokens: &Mat) -> Mat {
        if !self.include_cls_in_masked_pass {
            // Softmax over a single admissible key is 1: value path + output projection.
            return self.output.apply(&self.value.apply(tokens));
        }
        let n = tokens.rows();
        let d = tokens.cols();
        let mut cls = vec![0.0; d];
        for r in 0..n {
            for (c, v) in cls.iter_mut().zip(tokens.row(r)) {
                *c += v / n as f64;
            }
        }
        let k_cls = self.key.apply_row(&cls);
        let v_cls = self.value.apply_row(&cls);
        let q = self.query.apply(tokens);
        let k = self.key.apply(tokens);
        let v = self.value.apply(tokens);
        let mut mixed = Mat::zeros(n, v.cols());
        for p in 0..n {
            let w = softmax(&[dot(q.row(p), &k_cls) * self.scale(), dot(q.row(p), k.row(p)) * self.scale()]);
            for ((m, a), b) in mixed.row_mut(p).iter_mut().zip(&v_cls).zip(v.row(p)) {
                *m = w[0] * a + w[1] * b;
            }
        }
        self.output.apply(&mixed)
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Cosine between the global image feature and a unit text embedding.
pub fn clip_similarity(encoder: &dyn FrozenImageEncoder, image: &Image, text_emb: &[f64]) -> Result<f64> {
    if text_emb.len() != encoder.dim() {
        return Err(Error::DimMismatch { expected: encoder.dim(), got: text_emb.len() });
    }
    let cls = encoder.pooled_class_token(image)?;
    Ok(cosine(&cls, text_emb))
}

/// Dense per-patch embeddings (not normalized) from the masked pooling pass.
pub fn masked_dense_embeddings(encoder: &dyn FrozenImageEncoder, image: &Image) -> Result<PatchGrid> {
    encoder.masked_patch_embeddings(image)
}

// ---------------------------------------------------------------------------
// Stub pair
// ---------------------------------------------------------------------------

/// Grid stride of the stub image encoder in pixels.
pub const STUB_STRIDE: usize = 8;

const FILLER_WEIGHT: f64 = 0.25;
const STUB_NOISE: f64 = 0.08;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Fixed unit vector for a word, shared by both stub encoders.
pub fn word_vector(seed: u64, word: &str, dim: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(word.as_bytes()));
    let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    crate::tensor::normalize(&v).expect("gaussian draw is nonzero")
}

/// Deterministic bag-of-words text encoder. Attribute words carry full weight,
/// other words a small weight.
#[derive(Clone, Debug)]
pub struct StubTextEncoder {
    seed: u64,
    dim: usize,
}

impl StubTextEncoder {
    pub fn new(seed: u64, dim: usize) -> Result<Self> {
        if dim < 4 {
            return Err(Error::arg("stub encoder dimension must be at least 4"));
        }
        Ok(StubTextEncoder { seed, dim })
    }
}

impl TextEncoder for StubTextEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, text: &str) -> Result<Vec<f64>> {
        let mut acc = vec![0.0; self.dim];
        let lower = text.to_lowercase();
        for word in lower.split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty()) {
            let weight = if shapes::is_attribute_word(word) { 1.0 } else { FILLER_WEIGHT };
            for (a, v) in acc.iter_mut().zip(word_vector(self.seed, word, self.dim)) {
                *a += weight * v;
            }
        }
        crate::tensor::normalize(&acc).ok_or_else(|| Error::Encoder(format!("no words in {text:?}")))
    }
}

/// Image encoder for rendered attribute shapes. Each 8×8 cell's token is the
/// coverage-weighted mix of the semantic vectors of the colored components it
/// overlaps (background otherwise), plus seeded noise, expressed in a rotated
/// "backbone" basis that the pooling layer's value and output projections undo.
#[derive(Clone, Debug)]
pub struct StubImageEncoder {
    seed: u64,
    dim: usize,
    to_backbone: Mat,
    pool: AttentionPool,
}

fn random_orthogonal(dim: usize, rng: &mut ChaCha8Rng) -> Mat {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(dim);
    while rows.len() < dim {
        let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        for r in &rows {
            let p = dot(&v, r);
            for (a, b) in v.iter_mut().zip(r) {
                *a -= p * b;
            }
        }
        if let Some(n) = crate::tensor::normalize(&v) {
            rows.push(n);
        }
    }
    Mat::from_rows(&rows)
}

impl StubImageEncoder {
    pub fn new(seed: u64, dim: usize) -> Result<Self> {
        if dim < 4 {
            return Err(Error::arg("stub encoder dimension must be at least 4"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x5eed));
        let value_w = random_orthogonal(dim, &mut rng);
        let output_w = random_orthogonal(dim, &mut rng);
        // tokens = s @ (V O)ᵀ so that tokens @ V @ O = s.
        let to_backbone = value_w.matmul(&output_w).transpose();
        let qk_std = 0.5 / (dim as f64).sqrt();
        let pool = AttentionPool {
            query: Linear { w: Mat::randn(dim, dim, qk_std, &mut rng), b: vec![0.0; dim] },
            key: Linear { w: Mat::randn(dim, dim, qk_std, &mut rng), b: vec![0.0; dim] },
            value: Linear { w: value_w, b: vec![0.0; dim] },
            output: Linear { w: output_w, b: vec![0.0; dim] },
            include_cls_in_masked_pass: false,
        };
        Ok(StubImageEncoder { seed, dim, to_backbone, pool })
    }

    /// Stub whose backbone tokens are the semantic vectors themselves and whose
    /// value/output projections are identities.
    pub fn with_identity_projections(seed: u64, dim: usize) -> Result<Self> {
        let mut s = Self::new(seed, dim)?;
        s.to_backbone = Mat::identity(dim);
        s.pool.value = Linear::identity(dim);
        s.pool.output = Linear::identity(dim);
        Ok(s)
    }

    pub fn set_include_cls_in_masked_pass(&mut self, on: bool) {
        self.pool.include_cls_in_masked_pass = on;
    }

    pub fn attribute_vector(&self, attrs: Attributes) -> Vec<f64> {
        let c = word_vector(self.seed, attrs.color.name(), self.dim);
        let s = word_vector(self.seed, attrs.shape.name(), self.dim);
        let sum: Vec<f64> = c.iter().zip(&s).map(|(a, b)| a + b).collect();
        crate::tensor::normalize(&sum).expect("distinct words")
    }

    /// Semantic (joint-space) vector per cell before the backbone rotation.
    pub fn cell_semantics(&self, image: &Image) -> Result<PatchGrid> {
        let (w, h) = (image.width(), image.height());
        if w < STUB_STRIDE || h < STUB_STRIDE {
            return Err(Error::Encoder(format!("image {w}x{h} smaller than one {STUB_STRIDE}px cell")));
        }
        let (gw, gh) = (w / STUB_STRIDE, h / STUB_STRIDE);
        let seg = shapes::segment(image);
        let comp_vecs: Vec<Vec<f64>> = seg.components.iter().map(|c| self.attribute_vector(c.attributes)).collect();
        let bg = word_vector(self.seed, "background", self.dim);
        let mut values = Mat::zeros(gh * gw, self.dim);
        let mut counts = vec![0usize; seg.components.len()];
        for gy in 0..gh {
            for gx in 0..gw {
                counts.iter_mut().for_each(|c| *c = 0);
                let mut bg_count = 0usize;
                let mut hasher_bytes = Vec::with_capacity(STUB_STRIDE * STUB_STRIDE);
                for y in gy * STUB_STRIDE..(gy + 1) * STUB_STRIDE {
                    for x in gx * STUB_STRIDE..(gx + 1) * STUB_STRIDE {
                        match seg.labels[y * seg.width + x] {
                            u32::MAX => bg_count += 1,
                            id => counts[id as usize] += 1,
                        }
                        let px = image.get(x, y);
                        hasher_bytes.extend(px.iter().map(|v| (v * 255.0) as u8));
                    }
                }
                let total = (STUB_STRIDE * STUB_STRIDE) as f64;
                let row = values.row_mut(gy * gw + gx);
                for (i, &n) in counts.iter().enumerate() {
                    if n > 0 {
                        for (r, v) in row.iter_mut().zip(&comp_vecs[i]) {
                            *r += n as f64 / total * v;
                        }
                    }
                }
                for (r, v) in row.iter_mut().zip(&bg) {
                    *r += bg_count as f64 / total * v;
                }
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a(&hasher_bytes) ^ ((gy * gw + gx) as u64));
                for r in row.iter_mut() {
                    let n: f64 = StandardNormal.sample(&mut rng);
                    *r += STUB_NOISE * n;
                }
            }
        }
        PatchGrid::new(gh, gw, STUB_STRIDE, values)
    }
}

impl FrozenImageEncoder for StubImageEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn backbone(&self, image: &Image) -> Result<PatchGrid> {
        let sem = self.cell_semantics(image)?;
        let (h, w) = (sem.height(), sem.width());
        let tokens = sem.into_values().matmul(&self.to_backbone);
        PatchGrid::new(h, w, STUB_STRIDE, tokens)
    }

    fn pool(&self) -> &AttentionPool {
        &self.pool
    }
}

/// Deterministic text/image encoders sharing one semantic space.
pub fn stub_encoder_pair(seed: u64, dim: usize) -> Result<(StubTextEncoder, StubImageEncoder)> {
    Ok((StubTextEncoder::new(seed, dim)?, StubImageEncoder::new(seed, dim)?))
}

// ---------------------------------------------------------------------------
// External adapter
// ---------------------------------------------------------------------------

/// Text encoder backed by a precomputed prompt table in the embedding file
/// format (one row per exact prompt string).
pub struct TableTextEncoder {
    table: EmbeddingMatrix,
}

impl TableTextEncoder {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(TableTextEncoder { table: EmbeddingMatrix::load(path)? })
    }
}

impl TextEncoder for TableTextEncoder {
    fn dim(&self) -> usize {
        self.table.dim()
    }

    fn encode(&self, text: &str) -> Result<Vec<f64>> {
        let i = self
            .table
            .position(text)
            .ok_or_else(|| Error::Encoder(format!("prompt {text:?} missing from the text table")))?;
        Ok(self.table.row_f64(i))
    }
}

/// Image encoder with a linear patch-embedding backbone and an attention
/// pooling layer, all loaded from a parameter file.
///
/// Expected parameters: `patch.w` (`stride²·3 × t`), `patch.b` (`1 × t`),
/// `pool.{query,key,value}.{w,b}` (`t × t`), `pool.output.{w,b}` (`t × d`),
/// `stride` (`1 × 1`).
pub struct LinearPatchEncoder {
    stride: usize,
    patch: Linear,
    pool: AttentionPool,
}

impl LinearPatchEncoder {
    pub fn from_params(params: &ParamSet, include_cls: bool) -> Result<Self> {
        let get = |name: &str| -> Result<&Mat> {
            params.get(name).ok_or_else(|| Error::Encoder(format!("missing parameter `{name}`")))
        };
        let lin = |prefix: &str| -> Result<Linear> {
            let w = get(&format!("{prefix}.w"))?.clone();
            let b = get(&format!("{prefix}.b"))?.data().to_vec();
            if b.len() != w.cols() {
                return Err(Error::Encoder(format!("`{prefix}` bias has {} entries for {} outputs", b.len(), w.cols())));
            }
            Ok(Linear { w, b })
        };
        let stride = get("stride")?.data()[0] as usize;
        let patch = lin("patch")?;
        if stride == 0 || patch.w.rows() != stride * stride * 3 {
            return Err(Error::Encoder("patch projection does not match stride".into()));
        }
        let pool = AttentionPool {
            query: lin("pool.query")?,
            key: lin("pool.key")?,
            value: lin("pool.value")?,
            output: lin("pool.output")?,
            include_cls_in_masked_pass: include_cls,
        };
        Ok(LinearPatchEncoder { stride, patch, pool })
    }

    pub fn load(path: impl AsRef<Path>, include_cls: bool) -> Result<Self> {
        Self::from_params(&ParamSet::load(path)?, include_cls)
    }
}

impl FrozenImageEncoder for LinearPatchEncoder {
    fn dim(&self) -> usize {
        self.pool.output.w.cols()
    }

    fn backbone(&self, image: &Image) -> Result<PatchGrid> {
        let s = self.stride;
        let (gw, gh) = (image.width() / s, image.height() / s);
        let patches = crate::model::patchify(image, s)
            .ok_or_else(|| Error::Encoder(format!("image smaller than stride {s}")))?;
        PatchGrid::new(gh, gw, s, self.patch.apply(&patches))
    }

    fn pool(&self) -> &AttentionPool {
        &self.pool
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    #[default]
    Stub,
    External,
}

/// Encoder registry entry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    #[serde(default)]
    pub kind: EncoderKind,
    #[serde(default = "default_encoder_seed")]
    pub seed: u64,
    #[serde(default = "default_encoder_dim")]
    pub dim: usize,
    /// Image encoder parameter file (external kind).
    #[serde(default)]
    pub weights: Option<PathBuf>,
    /// Prompt embedding table (external kind).
    #[serde(default)]
    pub text_table: Option<PathBuf>,
    #[serde(default)]
    pub include_cls_in_masked_pass: bool,
}

fn default_encoder_seed() -> u64 {
    7
}

fn default_encoder_dim() -> usize {
    32
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            kind: EncoderKind::Stub,
            seed: default_encoder_seed(),
            dim: default_encoder_dim(),
            weights: None,
            text_table: None,
            include_cls_in_masked_pass: false,
        }
    }
}

pub type EncoderPair = (Box<dyn TextEncoder>, Box<dyn FrozenImageEncoder>);

pub fn build_encoders(cfg: &EncoderConfig) -> Result<EncoderPair> {
    match cfg.kind {
        EncoderKind::Stub => {
            let (t, mut i) = stub_encoder_pair(cfg.seed, cfg.dim)?;
            i.set_include_cls_in_masked_pass(cfg.include_cls_in_masked_pass);
            Ok((Box::new(t), Box::new(i)))
        }
        EncoderKind::External => {
            let weights = cfg.weights.as_ref().ok_or_else(|| Error::arg("external encoder needs `weights`"))?;
            let table = cfg.text_table.as_ref().ok_or_else(|| Error::arg("external encoder needs `text_table`"))?;
            let img = LinearPatchEncoder::load(weights, cfg.include_cls_in_masked_pass)?;
            let txt = TableTextEncoder::load(table)?;
            if img.dim() != txt.dim() {
                return Err(Error::DimMismatch { expected: img.dim(), got: txt.dim() });
            }
            Ok((Box::new(txt), Box::new(img)))
        }
    }
}
