//! Generalized AP50, class-agnostic average recall, and the novel-to-base
//! similarity diagnostic.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::boxes::{iou, BoxXyxy};
use crate::datasets::{box_to_pixels, BoxAnnotation, Dataset};
use crate::encoders::FrozenImageEncoder;
use crate::error::{Error, Result};
use crate::objectives::Detection;
use crate::proposals::Proposal;
use crate::tensor::cosine;
use crate::vocab::{CategoryVocabulary, EmbeddingMatrix, Split};

/// IoU thresholds for average recall.
pub const AR_THRESHOLDS: [f64; 10] = [0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryAp {
    pub name: String,
    pub split: Split,
    pub ap50: f64,
    pub support: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ArReport {
    pub n: usize,
    pub ar: f64,
    /// `None` when the bucket has no ground truth.
    pub ar_small: Option<f64>,
    pub ar_medium: Option<f64>,
    pub ar_large: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Mean AP50 over categories with support.
    pub ap50_all: f64,
    /// `None` when no category of that split has support.
    pub ap50_base: Option<f64>,
    pub ap50_novel: Option<f64>,
    pub ar: Option<ArReport>,
    pub per_category: Vec<CategoryAp>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{:.1}", 100.0 * v))
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Aligned plain-text table.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{:>10} {:>10} {:>10}", "AP50_box", "AP50_base", "AP50_novel").unwrap();
        writeln!(s, "{:>10} {:>10} {:>10}", fmt_opt(Some(self.ap50_all)), fmt_opt(self.ap50_base), fmt_opt(self.ap50_novel)).unwrap();
        if let Some(ar) = &self.ar {
            let col = format!("AR@{}", ar.n);
            writeln!(s, "\n{:>10} {:>10} {:>10} {:>10}", col, "AR_S", "AR_M", "AR_L").unwrap();
            writeln!(s, "{:>10} {:>10} {:>10} {:>10}", fmt_opt(Some(ar.ar)), fmt_opt(ar.ar_small), fmt_opt(ar.ar_medium), fmt_opt(ar.ar_large)).unwrap();
        }
        let width = self.per_category.iter().map(|c| c.name.len()).max().unwrap_or(8).max(8);
        writeln!(s, "\n{:<width$} {:>6} {:>8} {:>7}", "category", "split", "AP50", "support").unwrap();
        for c in &self.per_category {
            let split = match c.split {
                Split::Base => "base",
                Split::Novel => "novel",
            };
            let ap = if c.support > 0 { format!("{:.1}", 100.0 * c.ap50) } else { "-".into() };
            writeln!(s, "{:<width$} {:>6} {:>8} {:>7}", c.name, split, ap, c.support).unwrap();
        }
        s
    }
}

/// 101-point interpolated AP of one ranked list. `tp[i]` says whether the
/// i-th ranked detection matched.
pub fn interpolated_ap(tp: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut precision = Vec::with_capacity(tp.len());
    let mut recall = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (i, &t) in tp.iter().enumerate() {
        hits += t as usize;
        precision.push(hits as f64 / (i + 1) as f64);
        recall.push(hits as f64 / num_gt as f64);
    }
    // Monotone envelope from the right.
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut sum = 0.0;
    let mut j = 0;
    for r in 0..=100 {
        let level = r as f64 / 100.0;
        while j < recall.len() && recall[j] < level {
            j += 1;
        }
        if j < recall.len() {
            sum += precision[j];
        }
    }
    sum / 101.0
}

/// AP50 of one category. `dets[i]` and `gts[i]` belong to image `i`.
pub fn category_ap50(dets: &[Vec<(BoxXyxy, f64)>], gts: &[Vec<BoxXyxy>]) -> f64 {
    let num_gt: usize = gts.iter().map(Vec::len).sum();
    let mut ranked: Vec<(usize, usize, f64)> = Vec::new();
    for (img, ds) in dets.iter().enumerate() {
        for (j, d) in ds.iter().enumerate() {
            ranked.push((img, j, d.1));
        }
    }
    // Stable sort keeps insertion order among equal scores.
    ranked.sort_by(|a, b| b.2.total_cmp(&a.2));
    let mut used: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let tp: Vec<bool> = ranked
        .iter()
        .map(|&(img, j, _)| {
            let d = &dets[img][j].0;
            let mut best = None;
            let mut best_iou = 0.5;
            for (g, gt) in gts.get(img).map(Vec::as_slice).unwrap_or(&[]).iter().enumerate() {
                let v = iou(d, gt);
                if !used[img][g] && v >= best_iou {
                    best_iou = v;
                    best = Some(g);
                }
            }
            match best {
                Some(g) => {
                    used[img][g] = true;
                    true
                }
                None => false,
            }
        })
        .collect();
    interpolated_ap(&tp, num_gt)
}

/// Generalized AP50 over every category of `vocab`. Detections and ground
/// truth are grouped per image; categories outside `vocab` are ignored.
pub fn ap50_generalized(detections: &[Vec<Detection>], ground_truth: &[Vec<BoxAnnotation>], vocab: &CategoryVocabulary) -> Result<EvalReport> {
    if detections.len() != ground_truth.len() {
        return Err(Error::arg(format!("{} detection lists for {} images", detections.len(), ground_truth.len())));
    }
    let mut per_category = Vec::with_capacity(vocab.len());
    for cat in vocab.categories() {
        let dets: Vec<Vec<(BoxXyxy, f64)>> = detections
            .iter()
            .map(|ds| ds.iter().filter(|d| d.category == cat.name).map(|d| (d.bbox, d.score)).collect())
            .collect();
        let gts: Vec<Vec<BoxXyxy>> = ground_truth
            .iter()
            .map(|gs| gs.iter().filter(|g| g.category == cat.name).map(|g| g.bbox).collect())
            .collect();
        let support = gts.iter().map(Vec::len).sum();
        let ap50 = if support > 0 { category_ap50(&dets, &gts) } else { 0.0 };
        per_category.push(CategoryAp { name: cat.name.clone(), split: cat.split, ap50, support });
    }
    let mean = |pred: &dyn Fn(&CategoryAp) -> bool| -> Option<f64> {
        let vals: Vec<f64> = per_category.iter().filter(|c| c.support > 0 && pred(c)).map(|c| c.ap50).collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    };
    Ok(EvalReport {
        ap50_all: mean(&|_| true).unwrap_or(0.0),
        ap50_base: mean(&|c| c.split == Split::Base),
        ap50_novel: mean(&|c| c.split == Split::Novel),
        ar: None,
        per_category,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum SizeBucket {
    Small,
    Medium,
    Large,
}

fn bucket(b: &BoxXyxy, side: usize) -> SizeBucket {
    let s = side as f64;
    let area = b.area() * s * s;
    let scale = (s / 800.0).powi(2);
    if area < 32.0 * 32.0 * scale {
        SizeBucket::Small
    } else if area <= 96.0 * 96.0 * scale {
        SizeBucket::Medium
    } else {
        SizeBucket::Large
    }
}

/// Class-agnostic AR@N over [`AR_THRESHOLDS`]. `image_side` is the pixel side
/// the normalized boxes refer to, used for the size buckets.
pub fn average_recall_topn(proposals: &[Vec<Proposal>], ground_truth: &[Vec<BoxXyxy>], n: usize, image_side: usize) -> Result<ArReport> {
    if n < 1 {
        return Err(Error::arg("N must be at least 1"));
    }
    if proposals.len() != ground_truth.len() {
        return Err(Error::arg(format!("{} proposal lists for {} images", proposals.len(), ground_truth.len())));
    }
    let mut sums = [0.0f64; 4];
    let mut counts = [0usize; 4];
    for (props, gts) in proposals.iter().zip(ground_truth) {
        let mut order: Vec<usize> = (0..props.len()).collect();
        order.sort_by(|&a, &b| props[b].objectness.total_cmp(&props[a].objectness));
        order.truncate(n);
        let kept: Vec<BoxXyxy> = order.iter().map(|&i| props[i].bbox.to_xyxy()).collect();
        for g in gts {
            let best = kept.iter().map(|k| iou(k, g)).fold(0.0, f64::max);
            let hits = AR_THRESHOLDS.iter().filter(|&&t| best >= t).count() as f64;
            let slot = match bucket(g, image_side) {
                SizeBucket::Small => 1,
                SizeBucket::Medium => 2,
                SizeBucket::Large => 3,
            };
            for i in [0, slot] {
                sums[i] += hits;
                counts[i] += 1;
            }
        }
    }
    let ar = |i: usize| (counts[i] > 0).then(|| sums[i] / (counts[i] * AR_THRESHOLDS.len()) as f64);
    Ok(ArReport { n, ar: ar(0).unwrap_or(0.0), ar_small: ar(1), ar_medium: ar(2), ar_large: ar(3) })
}

/// Crop an object with at least `min_side` pixels per side, clamped to the
/// image.
fn crop_object(image: &crate::raster::Image, b: &BoxXyxy, min_side: usize) -> crate::raster::Image {
    let (w, h) = (image.width(), image.height());
    let [x1, y1, x2, y2] = box_to_pixels(b, w, h);
    let grow = |lo: f64, hi: f64, limit: usize| -> (usize, usize) {
        let (mut a, mut z) = (lo.floor().max(0.0) as usize, (hi.ceil() as usize).min(limit));
        while z - a < min_side.min(limit) {
            if a > 0 {
                a -= 1;
            }
            if z - a < min_side.min(limit) && z < limit {
                z += 1;
            }
        }
        (a, z)
    };
    let (x0, x1) = grow(x1, x2, w);
    let (y0, y1) = grow(y1, y2, h);
    image.crop(x0, y0, x1, y1)
}

/// For each novel category with instances: mean over up to
/// `samples_per_category` seeded crops of the maximum cosine between the
/// crop's global feature and any base text embedding. Sorted descending.
pub fn novel_base_similarity_ranking(
    dataset: &Dataset,
    encoder: &dyn FrozenImageEncoder,
    base_emb: &EmbeddingMatrix,
    novel: &[String],
    samples_per_category: usize,
    seed: u64,
) -> Result<Vec<(String, f64)>> {
    if base_emb.dim() != encoder.dim() {
        return Err(Error::DimMismatch { expected: encoder.dim(), got: base_emb.dim() });
    }
    let base: Vec<Vec<f64>> = (0..base_emb.len()).map(|i| base_emb.row_f64(i)).collect();
    let mut out = Vec::new();
    for (ci, name) in novel.iter().enumerate() {
        let mut instances: Vec<(usize, usize)> = Vec::new();
        for (si, s) in dataset.samples().iter().enumerate() {
            for (ai, a) in s.annotations.iter().enumerate() {
                if &a.category == name {
                    instances.push((si, ai));
                }
            }
        }
        if instances.is_empty() {
            log::warn!("novel category {name:?} has no instances; skipped");
            continue;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(ci as u64));
        instances.shuffle(&mut rng);
        instances.truncate(samples_per_category.max(1));
        let mut total = 0.0;
        for &(si, ai) in &instances {
            let s = &dataset.samples()[si];
            let crop = crop_object(&s.image, &s.annotations[ai].bbox, crate::encoders::STUB_STRIDE);
            let feat = encoder.pooled_class_token(&crop)?;
            total += base.iter().map(|b| cosine(&feat, b)).fold(f64::NEG_INFINITY, f64::max);
        }
        out.push((name.clone(), total / instances.len() as f64));
    }
    out.sort_by(|a, b| b.1.total_cmp(&a.1));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::Category;

    fn det(b: BoxXyxy, cat: &str, score: f64) -> Detection {
        Detection { bbox: b, label: 0, category: cat.into(), score, objectness: 1.0 }
    }

    fn gt(b: BoxXyxy, cat: &str) -> BoxAnnotation {
        BoxAnnotation { category: cat.into(), bbox: b }
    }

    fn vocab() -> CategoryVocabulary {
        CategoryVocabulary::new(
            vec![
                Category { name: "a".into(), split: Split::Base },
                Category { name: "b".into(), split: Split::Novel },
            ],
            vec!["a photo of a {}.".into()],
        )
        .unwrap()
    }

    #[test]
    fn single_detection_iou_thresholds() {
        let g = BoxXyxy::new(0.0, 0.0, 1.0, 1.0);
        let d = BoxXyxy::new(0.0, 0.0, 0.6, 1.0);
        assert_eq!(iou(&g, &d), 0.6);
        assert_eq!(category_ap50(&[vec![(d, 0.9)]], &[vec![g]]), 1.0);
        let d = BoxXyxy::new(0.0, 0.0, 0.4, 1.0);
        assert_eq!(category_ap50(&[vec![(d, 0.9)]], &[vec![g]]), 0.0);
    }

    #[test]
    fn hand_computed_ap() {
        // Ranked TP, FP, TP over 2 GT: recall 0.5 at precision 1, recall 1 at 2/3.
        let ap = interpolated_ap(&[true, false, true], 2);
        let expect = (51.0 * 1.0 + 50.0 * (2.0 / 3.0)) / 101.0;
        assert!((ap - expect).abs() < 1e-12);
        assert_eq!(interpolated_ap(&[], 3), 0.0);
        assert_eq!(interpolated_ap(&[false, false], 1), 0.0);
    }

    #[test]
    fn report_support_and_absent_split() {
        let b = BoxXyxy::new(0.1, 0.1, 0.5, 0.5);
        let rep = ap50_generalized(&[vec![det(b, "a", 0.8)]], &[vec![gt(b, "a")]], &vocab()).unwrap();
        assert_eq!(rep.ap50_all, 1.0);
        assert_eq!(rep.ap50_base, Some(1.0));
        assert_eq!(rep.ap50_novel, None);
        assert_eq!(rep.per_category[1].support, 0);
        assert!(rep.to_table().contains("AP50_novel"));
        let back: EvalReport = serde_json::from_str(&rep.to_json()).unwrap();
        assert_eq!(back, rep);
    }

    #[test]
    fn ar_examples() {
        let g = BoxXyxy::new(0.0, 0.0, 1.0, 1.0);
        let p = |b: BoxXyxy, o: f64| Proposal { bbox: b.to_cxcywh(), objectness: o };
        let r = average_recall_topn(&[vec![p(BoxXyxy::new(0.0, 0.0, 0.6, 1.0), 0.5)]], &[vec![g]], 10, 64).unwrap();
        assert_eq!(r.ar, 0.3);
        let r = average_recall_topn(&[vec![]], &[vec![g]], 10, 64).unwrap();
        assert_eq!(r.ar, 0.0);
        let r = average_recall_topn(&[vec![p(g, 0.5)]], &[vec![g]], 1, 64).unwrap();
        assert!((r.ar - 1.0).abs() < 1e-12);
        assert_eq!(r.ar_large, Some(r.ar));
        assert_eq!(r.ar_small, None);
        assert!(average_recall_topn(&[vec![]], &[vec![g]], 0, 64).is_err());
    }

    #[test]
    fn size_buckets_scale_with_resolution() {
        // At 64 px the small/large cut-offs are 2.56 and 7.68 pixels per side.
        assert_eq!(bucket(&BoxXyxy::new(0.0, 0.0, 2.0 / 64.0, 2.0 / 64.0), 64), SizeBucket::Small);
        assert_eq!(bucket(&BoxXyxy::new(0.0, 0.0, 5.0 / 64.0, 5.0 / 64.0), 64), SizeBucket::Medium);
        assert_eq!(bucket(&BoxXyxy::new(0.0, 0.0, 0.5, 0.5), 64), SizeBucket::Large);
        assert_eq!(bucket(&BoxXyxy::new(0.0, 0.0, 0.5, 0.5), 800), SizeBucket::Large);
        assert_eq!(bucket(&BoxXyxy::new(0.0, 0.0, 0.03, 0.03), 800), SizeBucket::Small);
    }

    #[test]
    fn crops_respect_minimum_side() {
        let img = crate::raster::Image::new(64, 64, [0.5; 3]);
        let c = crop_object(&img, &BoxXyxy::new(0.0, 0.0, 0.02, 0.02), 8);
        assert_eq!((c.width(), c.height()), (8, 8));
        let c = crop_object(&img, &BoxXyxy::new(0.99, 0.5, 1.0, 0.75), 8);
        assert_eq!((c.width(), c.height()), (8, 16));
    }
}
