//! Dense score maps and proposal classification from them.
//!
//! Per-location category probabilities come from a cosine softmax between
//! features and text embeddings. The detector's map and the frozen model's map
//! are fused as a weighted geometric product, and each proposal is scored by
//! RoI-aligning the fused map and averaging, per category, only the `k`
//! highest sampled scores.

use serde::{Deserialize, Serialize};

use crate::autograd::{self, SparseMap};
use crate::boxes::BoxXyxy;
use crate::encoders::{masked_dense_embeddings, FrozenImageEncoder, Linear, PatchGrid};
use crate::error::{Error, Result};
use crate::proposals::Proposal;
use crate::raster::Image;
use crate::tensor::Mat;
use crate::vocab::EmbeddingMatrix;

/// Per-location, per-category scores on an `h × w` grid (`h·w × C`).
#[derive(Clone, Debug, PartialEq)]
pub struct DenseScoreMap {
    h: usize,
    w: usize,
    stride: usize,
    probs: Mat,
    category_names: Vec<String>,
    fused: bool,
}

impl DenseScoreMap {
    /// A map of per-location distributions. Rows must sum to 1 within 1e-5.
    pub fn new(h: usize, w: usize, stride: usize, probs: Mat, category_names: Vec<String>) -> Result<Self> {
        let m = Self::build(h, w, stride, probs, category_names, false)?;
        for r in 0..m.probs.rows() {
            let s: f64 = m.probs.row(r).iter().sum();
            if (s - 1.0).abs() > 1e-5 {
                return Err(Error::arg(format!("location {r} sums to {s}")));
            }
        }
        Ok(m)
    }

    /// A fused map; rows need not be normalized.
    pub fn new_fused(h: usize, w: usize, stride: usize, probs: Mat, category_names: Vec<String>) -> Result<Self> {
        Self::build(h, w, stride, probs, category_names, true)
    }

    fn build(h: usize, w: usize, stride: usize, probs: Mat, names: Vec<String>, fused: bool) -> Result<Self> {
        if probs.rows() != h * w || probs.cols() != names.len() {
            return Err(Error::shape(format!(
                "{h}x{w} map over {} categories given {:?}",
                names.len(),
                probs.shape()
            )));
        }
        if probs.data().iter().any(|v| !v.is_finite() || !(0.0..=1.0).contains(v)) {
            return Err(Error::arg("score map entries must be finite and in [0, 1]"));
        }
        Ok(DenseScoreMap { h, w, stride, probs, category_names: names, fused })
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

    pub fn num_categories(&self) -> usize {
        self.category_names.len()
    }

    pub fn category_names(&self) -> &[String] {
        &self.category_names
    }

    pub fn probs(&self) -> &Mat {
        &self.probs
    }

    pub fn is_fused(&self) -> bool {
        self.fused
    }

    pub fn at(&self, y: usize, x: usize) -> &[f64] {
        self.probs.row(y * self.w + x)
    }

    /// Scores of one category as an `h·w` vector in row-major order.
    pub fn channel(&self, c: usize) -> Vec<f64> {
        (0..self.probs.rows()).map(|r| self.probs.get(r, c)).collect()
    }

    /// Per-location argmax category index.
    pub fn argmax(&self) -> Vec<usize> {
        (0..self.probs.rows()).map(|r| argmax(self.probs.row(r))).collect()
    }
}

/// Per-category selection of the `k` highest RoI scores.
#[derive(Clone, Debug, PartialEq)]
pub struct TopKMask {
    /// `h'·w' × C`, true where the score is among its channel's top `k`.
    pub mask: Vec<Vec<bool>>,
    pub k: usize,
}

impl TopKMask {
    pub fn count_in_channel(&self, c: usize) -> usize {
        self.mask.iter().filter(|row| row[c]).count()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EdaConfig {
    /// Softmax temperature dividing cosine similarities.
    pub tau: f64,
    /// Weight of the frozen model's map in the geometric fusion.
    pub lam: f64,
    /// RoIAlign output size `(h', w')`.
    pub roi_size: (usize, usize),
    /// Number of top scores averaged per category.
    pub k: usize,
    /// Backbone stages fused into the dense feature map.
    pub fuse_levels: Vec<usize>,
}

impl Default for EdaConfig {
    fn default() -> Self {
        EdaConfig { tau: 0.01, lam: 0.25, roi_size: (14, 14), k: 144, fuse_levels: vec![2, 3] }
    }
}

impl EdaConfig {
    pub fn roi_area(&self) -> usize {
        self.roi_size.0 * self.roi_size.1
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::arg(format!("tau must be positive, got {}", self.tau)));
        }
        if !(0.0..=1.0).contains(&self.lam) {
            return Err(Error::arg(format!("lam must be in [0, 1], got {}", self.lam)));
        }
        if self.roi_size.0 == 0 || self.roi_size.1 == 0 {
            return Err(Error::arg("roi_size must be positive"));
        }
        if self.k == 0 || self.k > self.roi_area() {
            return Err(Error::arg(format!("k = {} outside 1..={}", self.k, self.roi_area())));
        }
        if self.fuse_levels.is_empty() {
            return Err(Error::arg("fuse_levels must not be empty"));
        }
        Ok(())
    }
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// `cos(features_i, emb_c) / tau` for every location and category.
pub fn cosine_logits(features: &Mat, emb: &Mat, tau: f64) -> Result<Mat> {
    if features.cols() != emb.cols() {
        return Err(Error::DimMismatch { expected: emb.cols(), got: features.cols() });
    }
    if !(tau > 0.0) {
        return Err(Error::arg(format!("tau must be positive, got {tau}")));
    }
    let mut unit = features.clone();
    for r in 0..unit.rows() {
        let n = crate::tensor::l2_norm(unit.row(r)).max(1e-12);
        unit.row_mut(r).iter_mut().for_each(|v| *v /= n);
    }
    let mut logits = unit.matmul_t(emb);
    logits.data_mut().iter_mut().for_each(|v| *v /= tau);
    Ok(logits)
}

/// Softmax over categories of `cos(feature, embedding) / tau` at every location.
pub fn detector_dense_probs(features: &PatchGrid, emb: &EmbeddingMatrix, tau: f64) -> Result<DenseScoreMap> {
    let logits = cosine_logits(features.values(), &emb.to_mat(), tau)?;
    let probs = autograd::softmax_rows(&logits);
    DenseScoreMap::new(features.height(), features.width(), features.stride(), probs, emb.names().to_vec())
}

/// The frozen model's dense probabilities: masked pooling, then the same kernel
/// as [`detector_dense_probs`].
pub fn clip_dense_probs(
    encoder: &dyn FrozenImageEncoder,
    image: &Image,
    emb: &EmbeddingMatrix,
    tau: f64,
) -> Result<DenseScoreMap> {
    let grid = masked_dense_embeddings(encoder, image)?;
    detector_dense_probs(&grid, emb, tau)
}

/// Elementwise `s_det^(1-lam) · s_clip^lam`, not renormalized.
pub fn fuse_score_maps(s_det: &DenseScoreMap, s_clip: &DenseScoreMap, lam: f64) -> Result<DenseScoreMap> {
    if !(0.0..=1.0).contains(&lam) {
        return Err(Error::arg(format!("lam must be in [0, 1], got {lam}")));
    }
    if (s_det.h, s_det.w) != (s_clip.h, s_clip.w) {
        return Err(Error::shape(format!(
            "fusing {}x{} with {}x{}",
            s_det.h, s_det.w, s_clip.h, s_clip.w
        )));
    }
    if s_det.category_names != s_clip.category_names {
        return Err(Error::shape("score maps disagree on category order"));
    }
    let data = s_det
        .probs
        .data()
        .iter()
        .zip(s_clip.probs.data())
        .map(|(&d, &c)| d.powf(1.0 - lam) * c.powf(lam))
        .collect();
    let probs = Mat::from_vec(s_det.probs.rows(), s_det.probs.cols(), data);
    DenseScoreMap::new_fused(s_det.h, s_det.w, s_det.stride, probs, s_det.category_names.clone())
}

fn check_box(b: &BoxXyxy) -> Result<()> {
    if ![b.x1, b.y1, b.x2, b.y2].iter().all(|v| v.is_finite()) || b.x2 <= b.x1 || b.y2 <= b.y1 {
        return Err(Error::arg(format!("degenerate RoI {b:?}")));
    }
    Ok(())
}

/// Bilinear sampling weights of RoIAlign on an `h × w` grid: one sample at the
/// center of every output cell, half-pixel aligned, clamped at the border.
pub fn roi_align_weights(h: usize, w: usize, roi: &BoxXyxy, out_size: (usize, usize)) -> Result<SparseMap> {
    check_box(roi)?;
    let (oh, ow) = out_size;
    if oh == 0 || ow == 0 {
        return Err(Error::arg("RoIAlign output size must be positive"));
    }
    let (x0, y0) = (roi.x1 * w as f64, roi.y1 * h as f64);
    let bin_w = roi.width() * w as f64 / ow as f64;
    let bin_h = roi.height() * h as f64 / oh as f64;
    let mut entries = Vec::with_capacity(oh * ow);
    for i in 0..oh {
        let sy = (y0 + (i as f64 + 0.5) * bin_h - 0.5).clamp(0.0, (h - 1) as f64);
        let ry = sy.floor() as usize;
        let ry1 = (ry + 1).min(h - 1);
        let fy = sy - ry as f64;
        for j in 0..ow {
            let sx = (x0 + (j as f64 + 0.5) * bin_w - 0.5).clamp(0.0, (w - 1) as f64);
            let rx = sx.floor() as usize;
            let rx1 = (rx + 1).min(w - 1);
            let fx = sx - rx as f64;
            entries.push(vec![
                (ry * w + rx, (1.0 - fy) * (1.0 - fx)),
                (ry * w + rx1, (1.0 - fy) * fx),
                (ry1 * w + rx, fy * (1.0 - fx)),
                (ry1 * w + rx1, fy * fx),
            ]);
        }
    }
    Ok(SparseMap::new(h * w, entries))
}

/// RoIAlign of a score map: `h'·w' × C`.
pub fn roi_align(map: &DenseScoreMap, roi: &BoxXyxy, out_size: (usize, usize)) -> Result<Mat> {
    Ok(roi_align_weights(map.h, map.w, roi, out_size)?.apply(&map.probs))
}

/// Indices of the `k` largest values; ties resolved toward lower indices.
pub fn topk_indices(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

fn check_k(n: usize, k: usize) -> Result<()> {
    if k == 0 || k > n {
        return Err(Error::arg(format!("k = {k} outside 1..={n}")));
    }
    Ok(())
}

pub fn topk_mask(roi_scores: &Mat, k: usize) -> Result<TopKMask> {
    let (n, c) = roi_scores.shape();
    check_k(n, k)?;
    let mut mask = vec![vec![false; c]; n];
    for j in 0..c {
        let column: Vec<f64> = (0..n).map(|i| roi_scores.get(i, j)).collect();
        for i in topk_indices(&column, k) {
            mask[i][j] = true;
        }
    }
    Ok(TopKMask { mask, k })
}

/// Per category, the mean of the `k` largest RoI scores.
pub fn topk_masked_mean(roi_scores: &Mat, k: usize) -> Result<Vec<f64>> {
    let (n, c) = roi_scores.shape();
    check_k(n, k)?;
    let mut out = Vec::with_capacity(c);
    let mut column = vec![0.0; n];
    for j in 0..c {
        for (i, slot) in column.iter_mut().enumerate() {
            *slot = roi_scores.get(i, j);
        }
        let s: f64 = topk_indices(&column, k).iter().map(|&i| column[i]).sum();
        out.push(s / k as f64);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProposalScores {
    /// Score per category in map order.
    pub scores: Vec<f64>,
    pub label: usize,
    /// `scores[label] × objectness`.
    pub confidence: f64,
}

/// Score every proposal from the fused map: RoIAlign, then top-k mean.
pub fn classify_proposals(map: &DenseScoreMap, proposals: &[Proposal], cfg: &EdaConfig) -> Result<Vec<ProposalScores>> {
    cfg.validate()?;
    proposals
        .iter()
        .map(|p| {
            let roi = roi_align(map, &p.bbox.to_xyxy(), cfg.roi_size)?;
            let scores = topk_masked_mean(&roi, cfg.k)?;
            let label = argmax(&scores);
            let confidence = scores[label] * p.objectness;
            Ok(ProposalScores { scores, label, confidence })
        })
        .collect()
}

/// Bilinear resize weights (half-pixel centers, edge clamped).
pub fn upsample_weights(src_h: usize, src_w: usize, dst_h: usize, dst_w: usize) -> SparseMap {
    let coord = |i: usize, src: usize, dst: usize| -> (usize, usize, f64) {
        let s = ((i as f64 + 0.5) * src as f64 / dst as f64 - 0.5).clamp(0.0, (src - 1) as f64);
        let lo = s.floor() as usize;
        (lo, (lo + 1).min(src - 1), s - lo as f64)
    };
    let mut entries = Vec::with_capacity(dst_h * dst_w);
    for y in 0..dst_h {
        let (y0, y1, fy) = coord(y, src_h, dst_h);
        for x in 0..dst_w {
            let (x0, x1, fx) = coord(x, src_w, dst_w);
            entries.push(vec![
                (y0 * src_w + x0, (1.0 - fy) * (1.0 - fx)),
                (y0 * src_w + x1, (1.0 - fy) * fx),
                (y1 * src_w + x0, fy * (1.0 - fx)),
                (y1 * src_w + x1, fy * fx),
            ]);
        }
    }
    SparseMap::new(src_h * src_w, entries)
}

/// Project every level to a common dimension, bilinearly upsample the deeper
/// ones to the finest level's grid and average.
pub fn fuse_backbone_levels(levels: &[PatchGrid], projections: &[Linear]) -> Result<PatchGrid> {
    if levels.is_empty() {
        return Err(Error::arg("no backbone levels to fuse"));
    }
    if projections.len() != levels.len() {
        return Err(Error::arg(format!("{} levels but {} projections", levels.len(), projections.len())));
    }
    let finest = levels.iter().min_by_key(|l| l.stride()).expect("non-empty");
    let (h, w, stride) = (finest.height(), finest.width(), finest.stride());
    let dim = projections[0].w.cols();
    let mut acc = Mat::zeros(h * w, dim);
    for (level, proj) in levels.iter().zip(projections) {
        if proj.w.rows() != level.dim() {
            return Err(Error::DimMismatch { expected: proj.w.rows(), got: level.dim() });
        }
        if proj.w.cols() != dim {
            return Err(Error::DimMismatch { expected: dim, got: proj.w.cols() });
        }
        let projected = proj.apply(level.values());
        let resized = if (level.height(), level.width()) == (h, w) {
            projected
        } else {
            upsample_weights(level.height(), level.width(), h, w).apply(&projected)
        };
        acc.add_scaled(&resized, 1.0 / levels.len() as f64);
    }
    PatchGrid::new(h, w, stride, acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::boxes::BoxCxcywh;
    use crate::tensor::Mat;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("c{i}")).collect()
    }

    fn emb(rows: Vec<Vec<f64>>) -> EmbeddingMatrix {
        let n = rows.len();
        EmbeddingMatrix::from_unnormalized(names(n), rows).unwrap()
    }

    /// Independent bilinear oracle: tent-kernel sum over every cell.
    fn tent_sample(map: &Mat, h: usize, w: usize, c: usize, px: f64, py: f64) -> f64 {
        let px = px.clamp(0.0, (w - 1) as f64);
        let py = py.clamp(0.0, (h - 1) as f64);
        let mut s = 0.0;
        for r in 0..h {
            for q in 0..w {
                let k = (1.0 - (px - q as f64).abs()).max(0.0) * (1.0 - (py - r as f64).abs()).max(0.0);
                s += k * map.get(r * w + q, c);
            }
        }
        s
    }

    fn oracle_roi(map: &Mat, h: usize, w: usize, b: &BoxXyxy, oh: usize, ow: usize) -> Mat {
        let mut out = Mat::zeros(oh * ow, map.cols());
        for i in 0..oh {
            for j in 0..ow {
                // cell center in image-normalized coordinates, then grid index space
                let cx = b.x1 + (j as f64 + 0.5) / ow as f64 * (b.x2 - b.x1);
                let cy = b.y1 + (i as f64 + 0.5) / oh as f64 * (b.y2 - b.y1);
                for c in 0..map.cols() {
                    out.set(i * ow + j, c, tent_sample(map, h, w, c, cx * w as f64 - 0.5, cy * h as f64 - 0.5));
                }
            }
        }
        out
    }

    fn random_map(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> DenseScoreMap {
        let logits = Mat::randn(h * w, c, 2.0, rng);
        DenseScoreMap::new(h, w, 8, autograd::softmax_rows(&logits), names(c)).unwrap()
    }

    #[test]
    fn equal_cosines_split_evenly() {
        let e = emb(vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        let grid = PatchGrid::new(1, 1, 8, Mat::from_rows(&[vec![1.0, 1.0]])).unwrap();
        let m = detector_dense_probs(&grid, &e, 0.01).unwrap();
        assert!((m.at(0, 0)[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn sharp_temperature_matches_hand_softmax() {
        // Feature with cosines 0.2 and 0.1 against two orthonormal rows.
        let e = emb(vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]]);
        let z = (1.0f64 - 0.04 - 0.01).sqrt();
        let grid = PatchGrid::new(1, 1, 8, Mat::from_rows(&[vec![0.2, 0.1, z]])).unwrap();
        let m = detector_dense_probs(&grid, &e, 0.01).unwrap();
        let p0 = 1.0 / (1.0 + (-10.0f64).exp());
        assert!((m.at(0, 0)[0] - p0).abs() < 1e-6);
        assert!((m.at(0, 0)[1] - (1.0 - p0)).abs() < 1e-6);
    }

    #[test]
    fn huge_temperature_is_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let e = emb((0..5).map(|_| (0..6).map(|_| rng.random_range(-1.0..1.0)).collect()).collect());
        let grid = PatchGrid::new(3, 3, 8, Mat::randn(9, 6, 1.0, &mut rng)).unwrap();
        let m = detector_dense_probs(&grid, &e, 1e6).unwrap();
        assert!(m.probs().data().iter().all(|p| (p - 0.2).abs() < 1e-4));
    }

    #[test]
    fn dimension_and_temperature_errors() {
        let e = emb(vec![vec![1.0, 0.0]]);
        let grid = PatchGrid::new(1, 1, 8, Mat::from_rows(&[vec![1.0, 1.0, 1.0]])).unwrap();
        assert!(detector_dense_probs(&grid, &e, 0.01).is_err());
        let grid = PatchGrid::new(1, 1, 8, Mat::from_rows(&[vec![1.0, 1.0]])).unwrap();
        assert!(detector_dense_probs(&grid, &e, 0.0).is_err());
    }

    #[test]
    fn single_category_is_certain() {
        let e = emb(vec![vec![0.3, 0.4]]);
        let grid = PatchGrid::new(2, 2, 8, Mat::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.0], vec![0.2, 0.2]])).unwrap();
        let m = detector_dense_probs(&grid, &e, 0.01).unwrap();
        assert!(m.probs().data().iter().all(|&p| p == 1.0));
    }

    #[test]
    fn fusion_identities_and_arithmetic() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random_map(&mut rng, 3, 4, 5);
        let b = random_map(&mut rng, 3, 4, 5);
        assert_eq!(fuse_score_maps(&a, &b, 0.0).unwrap().probs(), a.probs());
        assert_eq!(fuse_score_maps(&a, &b, 1.0).unwrap().probs(), b.probs());
        assert!(fuse_score_maps(&a, &b, 0.5).unwrap().is_fused());

        let one = |v: f64| {
            DenseScoreMap::new_fused(1, 1, 8, Mat::from_rows(&[vec![v]]), names(1)).unwrap()
        };
        let f = fuse_score_maps(&one(0.25), &one(0.04), 0.5).unwrap();
        assert!((f.probs().get(0, 0) - 0.1).abs() < 1e-9);

        let c = random_map(&mut rng, 2, 4, 5);
        assert!(fuse_score_maps(&a, &c, 0.5).is_err());
        let d = DenseScoreMap::new(3, 4, 8, a.probs().clone(), (0..5).map(|i| format!("x{i}")).collect()).unwrap();
        assert!(fuse_score_maps(&a, &d, 0.5).is_err());
    }

    #[test]
    fn roi_align_constant_map() {
        let probs = Mat::filled(16, 2, 0.5);
        let m = DenseScoreMap::new(4, 4, 8, probs, names(2)).unwrap();
        let out = roi_align(&m, &BoxXyxy::new(0.13, 0.2, 0.77, 0.61), (3, 5)).unwrap();
        assert!(out.data().iter().all(|v| (v - 0.5).abs() < 1e-12));
    }

    #[test]
    fn roi_align_integer_aligned_region() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = random_map(&mut rng, 4, 4, 3);
        // Cells (1..3, 1..3) of a 4x4 grid.
        let out = roi_align(&m, &BoxXyxy::new(0.25, 0.25, 0.75, 0.75), (2, 2)).unwrap();
        let oracle = oracle_roi(m.probs(), 4, 4, &BoxXyxy::new(0.25, 0.25, 0.75, 0.75), 2, 2);
        for (i, (y, x)) in [(1, 1), (1, 2), (2, 1), (2, 2)].into_iter().enumerate() {
            for c in 0..3 {
                assert!((out.get(i, c) - m.at(y, x)[c]).abs() < 1e-12);
                assert!((oracle.get(i, c) - m.at(y, x)[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn roi_align_matches_oracle_on_random_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let (h, w) = (rng.random_range(1..9), rng.random_range(1..9));
            let m = random_map(&mut rng, h, w, 3);
            let x1 = rng.random_range(0.0..0.9);
            let y1 = rng.random_range(0.0..0.9);
            let b = BoxXyxy::new(x1, y1, rng.random_range(x1 + 0.01..1.0), rng.random_range(y1 + 0.01..1.0));
            let (oh, ow) = (rng.random_range(1..6), rng.random_range(1..6));
            let fast = roi_align(&m, &b, (oh, ow)).unwrap();
            let slow = oracle_roi(m.probs(), h, w, &b, oh, ow);
            assert!(fast.max_abs_diff(&slow) < 1e-5);
        }
    }

    #[test]
    fn roi_align_rejects_degenerate_boxes() {
        let m = DenseScoreMap::new(2, 2, 8, Mat::filled(4, 1, 1.0), names(1)).unwrap();
        assert!(roi_align(&m, &BoxXyxy::new(0.5, 0.1, 0.5, 0.9), (2, 2)).is_err());
        assert!(roi_align(&m, &BoxXyxy::new(0.5, 0.9, 0.6, 0.1), (2, 2)).is_err());
    }

    #[test]
    fn topk_examples() {
        let roi = Mat::from_rows(&[vec![0.9], vec![0.1], vec![0.5], vec![0.3]]);
        assert!((topk_masked_mean(&roi, 2).unwrap()[0] - 0.7).abs() < 1e-12);
        assert!((topk_masked_mean(&roi, 4).unwrap()[0] - 0.45).abs() < 1e-12);
        assert_eq!(topk_masked_mean(&roi, 1).unwrap()[0], 0.9);
        assert!(topk_masked_mean(&roi, 0).is_err());
        assert!(topk_masked_mean(&roi, 5).is_err());
        let mask = topk_mask(&roi, 3).unwrap();
        assert_eq!(mask.count_in_channel(0), 3);
        assert!(!mask.mask[1][0]);
    }

    fn proposal(x1: f64, y1: f64, x2: f64, y2: f64) -> Proposal {
        Proposal { bbox: BoxXyxy::new(x1, y1, x2, y2).to_cxcywh(), objectness: 1.0 }
    }

    #[test]
    fn one_hot_map_labels_everything() {
        let mut probs = Mat::zeros(16, 3);
        (0..16).for_each(|r| probs.set(r, 1, 1.0));
        let m = DenseScoreMap::new(4, 4, 8, probs, names(3)).unwrap();
        let cfg = EdaConfig { roi_size: (3, 3), k: 6, ..EdaConfig::default() };
        let out = classify_proposals(&m, &[proposal(0.1, 0.1, 0.5, 0.6), proposal(0.0, 0.0, 1.0, 1.0)], &cfg).unwrap();
        for p in out {
            assert_eq!(p.label, 1);
            assert!((p.scores[1] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn disjoint_regions_get_their_own_labels() {
        let mut probs = Mat::zeros(16, 2);
        for y in 0..4 {
            for x in 0..4 {
                probs.set(y * 4 + x, if x < 2 { 0 } else { 1 }, 1.0);
            }
        }
        let m = DenseScoreMap::new(4, 4, 8, probs, names(2)).unwrap();
        let cfg = EdaConfig { roi_size: (2, 2), k: 3, ..EdaConfig::default() };
        let out = classify_proposals(&m, &[proposal(0.0, 0.0, 0.5, 1.0), proposal(0.5, 0.0, 1.0, 1.0)], &cfg).unwrap();
        assert_eq!((out[0].label, out[1].label), (0, 1));
    }

    #[test]
    fn classify_equals_oracle_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = EdaConfig { roi_size: (4, 4), k: 12, ..EdaConfig::default() };
        for _ in 0..50 {
            let m = random_map(&mut rng, 6, 7, 4);
            let x1 = rng.random_range(0.0..0.8);
            let y1 = rng.random_range(0.0..0.8);
            let b = BoxXyxy::new(x1, y1, rng.random_range(x1 + 0.05..1.0), rng.random_range(y1 + 0.05..1.0));
            let p = Proposal { bbox: b.to_cxcywh(), objectness: rng.random_range(0.0..1.0) };
            let got = &classify_proposals(&m, &[p], &cfg).unwrap()[0];
            let roi = oracle_roi(m.probs(), 6, 7, &b, 4, 4);
            for c in 0..4 {
                let mut col: Vec<f64> = (0..16).map(|i| roi.get(i, c)).collect();
                col.sort_by(|a, b| b.partial_cmp(a).unwrap());
                let expect = col[..12].iter().sum::<f64>() / 12.0;
                assert!((got.scores[c] - expect).abs() < 1e-5);
            }
            assert!((got.confidence - got.scores[got.label] * p.objectness).abs() < 1e-12);
        }
    }

    #[test]
    fn level_fusion_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let fine = PatchGrid::new(4, 4, 8, Mat::randn(16, 3, 1.0, &mut rng)).unwrap();
        let coarse = PatchGrid::new(2, 2, 16, Mat::randn(4, 5, 1.0, &mut rng)).unwrap();
        let p3 = Linear { w: Mat::randn(3, 6, 1.0, &mut rng), b: vec![0.0; 6] };
        let p5 = Linear { w: Mat::randn(5, 6, 1.0, &mut rng), b: vec![0.0; 6] };
        let out = fuse_backbone_levels(&[fine.clone(), coarse.clone()], &[p3.clone(), p5.clone()]).unwrap();
        assert_eq!((out.height(), out.width(), out.stride(), out.dim()), (4, 4, 8, 6));

        let single = fuse_backbone_levels(&[fine.clone()], &[p3.clone()]).unwrap();
        assert_eq!((single.height(), single.width(), single.dim()), (4, 4, 6));

        let id = Linear::identity(3);
        let twin = fuse_backbone_levels(&[fine.clone(), fine.clone()], &[id.clone(), id]).unwrap();
        assert!(twin.values().max_abs_diff(fine.values()) < 1e-12);

        assert!(fuse_backbone_levels(&[], &[]).is_err());
    }

    #[test]
    fn upsampling_constant_stays_constant() {
        let w = upsample_weights(2, 3, 4, 6);
        let out = w.apply(&Mat::filled(6, 2, 0.7));
        assert!(out.data().iter().all(|v| (v - 0.7).abs() < 1e-12));
    }

    proptest! {
        #[test]
        fn topk_monotone_and_permutation_invariant(
            vals in proptest::collection::vec(0.0..1.0f64, 6),
            k in 1usize..=6,
            bump_at in 0usize..6,
            bump in 0.0..0.5f64,
            rot in 0usize..6,
        ) {
            let base = Mat::from_vec(6, 1, vals.clone());
            let before = topk_masked_mean(&base, k).unwrap()[0];
            let mut raised = vals.clone();
            raised[bump_at] += bump;
            let after = topk_masked_mean(&Mat::from_vec(6, 1, raised), k).unwrap()[0];
            prop_assert!(after >= before - 1e-15);
            let mut rotated = vals.clone();
            rotated.rotate_left(rot);
            let perm = topk_masked_mean(&Mat::from_vec(6, 1, rotated), k).unwrap()[0];
            prop_assert!((perm - before).abs() < 1e-12);
        }

        #[test]
        fn roi_align_is_linear(seed in 0u64..1000, a in -2.0..2.0f64, b in -2.0..2.0f64) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m1 = Mat::randn(20, 2, 1.0, &mut rng);
            let m2 = Mat::randn(20, 2, 1.0, &mut rng);
            let x1 = rng.random_range(0.0..0.8);
            let y1 = rng.random_range(0.0..0.8);
            let bx = BoxXyxy::new(x1, y1, x1 + 0.15, y1 + 0.2);
            let wts = roi_align_weights(4, 5, &bx, (3, 3)).unwrap();
            let mut mix = m1.scale(a);
            mix.add_scaled(&m2, b);
            let lhs = wts.apply(&mix);
            let mut rhs = wts.apply(&m1).scale(a);
            rhs.add_scaled(&wts.apply(&m2), b);
            prop_assert!(lhs.max_abs_diff(&rhs) < 1e-6);
        }

        #[test]
        fn label_invariant_to_positive_rescaling(seed in 0u64..1000, s in 0.05..1.0f64) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = random_map(&mut rng, 5, 5, 4);
            let scaled = DenseScoreMap::new_fused(5, 5, 8, m.probs().scale(s), names(4)).unwrap();
            let cfg = EdaConfig { roi_size: (3, 3), k: 5, ..EdaConfig::default() };
            let p = Proposal { bbox: BoxCxcywh { cx: 0.5, cy: 0.4, w: 0.5, h: 0.6 }, objectness: 0.8 };
            let a = classify_proposals(&m, &[p], &cfg).unwrap();
            let b = classify_proposals(&scaled, &[p], &cfg).unwrap();
            prop_assert_eq!(a[0].label, b[0].label);
        }
    }
}
