//! Datasets: COCO-format annotations with a base/novel split, and a seeded
//! synthetic shapes set whose categories are color × shape pairs.

use std::collections::HashMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::boxes::BoxXyxy;
use crate::error::{Error, Result};
use crate::raster::Image;
use crate::shapes::{Attributes, ShapeKind, BACKGROUND_RGB};
use crate::vocab::{CategoryVocabulary, Split};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxAnnotation {
    pub category: String,
    /// Normalized to the image.
    pub bbox: BoxXyxy,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageSample {
    pub image_id: u64,
    pub image: Image,
    pub annotations: Vec<BoxAnnotation>,
}

impl ImageSample {
    pub fn hflip(&self) -> ImageSample {
        ImageSample {
            image_id: self.image_id,
            image: self.image.hflip(),
            annotations: self
                .annotations
                .iter()
                .map(|a| BoxAnnotation { category: a.category.clone(), bbox: a.bbox.hflip() })
                .collect(),
        }
    }
}

/// Immutable collection of samples.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    samples: Vec<ImageSample>,
}

impl Dataset {
    pub fn new(samples: Vec<ImageSample>) -> Self {
        Dataset { samples }
    }

    pub fn samples(&self) -> &[ImageSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_annotations(&self) -> usize {
        self.samples.iter().map(|s| s.annotations.len()).sum()
    }

    /// Keep only annotations whose category passes `keep`; optionally drop
    /// images left without annotations.
    pub fn filter_annotations(&self, keep: impl Fn(&str) -> bool, drop_empty: bool) -> Dataset {
        let samples = self
            .samples
            .iter()
            .filter_map(|s| {
                let annotations: Vec<_> = s.annotations.iter().filter(|a| keep(&a.category)).cloned().collect();
                if drop_empty && annotations.is_empty() {
                    return None;
                }
                Some(ImageSample { image_id: s.image_id, image: s.image.clone(), annotations })
            })
            .collect();
        Dataset { samples }
    }
}

pub fn box_to_pixels(b: &BoxXyxy, width: usize, height: usize) -> [f64; 4] {
    [b.x1 * width as f64, b.y1 * height as f64, b.x2 * width as f64, b.y2 * height as f64]
}

pub fn box_from_pixels(px: [f64; 4], width: usize, height: usize) -> BoxXyxy {
    BoxXyxy::new(px[0] / width as f64, px[1] / height as f64, px[2] / width as f64, px[3] / height as f64)
}

// ---------------------------------------------------------------------------
// COCO
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    TrainBaseOnly,
    EvalAll,
}

#[derive(Deserialize)]
struct CocoFile {
    images: Vec<CocoImage>,
    annotations: Vec<CocoAnnotation>,
    categories: Vec<CocoCategory>,
}

#[derive(Clone, Deserialize)]
struct CocoImage {
    id: u64,
    file_name: String,
    width: f64,
    height: f64,
}

#[derive(Deserialize)]
struct CocoAnnotation {
    image_id: u64,
    category_id: u64,
    bbox: [f64; 4],
}

#[derive(Deserialize)]
struct CocoCategory {
    id: u64,
    name: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CocoImageEntry {
    pub image_id: u64,
    pub file_name: String,
    pub width: f64,
    pub height: f64,
    pub annotations: Vec<BoxAnnotation>,
}

/// Parsed and filtered COCO annotations; pixels are loaded separately.
#[derive(Clone, Debug, PartialEq)]
pub struct CocoAnnotations {
    pub images: Vec<CocoImageEntry>,
    /// Category names declared by the file, in file order.
    pub file_categories: Vec<String>,
}

impl CocoAnnotations {
    pub fn num_annotations(&self) -> usize {
        self.images.iter().map(|i| i.annotations.len()).sum()
    }

    /// Load every image from `root`, resized to `side × side`.
    pub fn load_images(&self, root: impl AsRef<Path>, side: usize) -> Result<Dataset> {
        let root = root.as_ref();
        let samples = self
            .images
            .iter()
            .map(|e| {
                Ok(ImageSample {
                    image_id: e.image_id,
                    image: Image::load_square(root.join(&e.file_name), side)?,
                    annotations: e.annotations.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset::new(samples))
    }
}

pub fn parse_coco_annotations(
    text: &str,
    vocab: &CategoryVocabulary,
    mode: SplitMode,
    strict: bool,
) -> Result<CocoAnnotations> {
    let file: CocoFile = serde_json::from_str(text).map_err(|e| Error::Dataset(format!("malformed COCO JSON: {e}")))?;
    let mut id_to_name = HashMap::new();
    for c in &file.categories {
        if strict && vocab.split_of(&c.name).is_none() {
            return Err(Error::UnknownCategory(c.name.clone()));
        }
        id_to_name.insert(c.id, c.name.clone());
    }
    let mut per_image: HashMap<u64, Vec<BoxAnnotation>> = HashMap::new();
    let dims: HashMap<u64, (f64, f64)> = file.images.iter().map(|i| (i.id, (i.width, i.height))).collect();
    for a in &file.annotations {
        let name = id_to_name
            .get(&a.category_id)
            .ok_or_else(|| Error::Dataset(format!("annotation refers to unknown category id {}", a.category_id)))?;
        let keep = match (vocab.split_of(name), mode) {
            (Some(Split::Base), _) => true,
            (Some(Split::Novel), SplitMode::EvalAll) => true,
            _ => false,
        };
        if !keep {
            continue;
        }
        let &(w, h) = dims
            .get(&a.image_id)
            .ok_or_else(|| Error::Dataset(format!("annotation refers to unknown image {}", a.image_id)))?;
        let [x, y, bw, bh] = a.bbox;
        if !(bw > 0.0 && bh > 0.0) {
            continue;
        }
        let bbox = BoxXyxy::new(x / w, y / h, (x + bw) / w, (y + bh) / h).clamp_unit();
        per_image.entry(a.image_id).or_default().push(BoxAnnotation { category: name.clone(), bbox });
    }
    let images = file
        .images
        .into_iter()
        .filter_map(|i| {
            let annotations = per_image.remove(&i.id).unwrap_or_default();
            if mode == SplitMode::TrainBaseOnly && annotations.is_empty() {
                return None;
            }
            Some(CocoImageEntry { image_id: i.id, file_name: i.file_name, width: i.width, height: i.height, annotations })
        })
        .collect();
    Ok(CocoAnnotations { images, file_categories: file.categories.into_iter().map(|c| c.name).collect() })
}

pub fn load_coco_annotations(
    json_path: impl AsRef<Path>,
    vocab: &CategoryVocabulary,
    mode: SplitMode,
    strict: bool,
) -> Result<CocoAnnotations> {
    let text = std::fs::read_to_string(json_path)?;
    parse_coco_annotations(&text, vocab, mode, strict)
}

// ---------------------------------------------------------------------------
// Synthetic shapes
// ---------------------------------------------------------------------------

/// Paint a shape filling the pixel box `(x0, y0, x1, y1)`. Pixels are tested
/// at their centers. Triangles are upright with the apex at the top center.
pub fn render_shape(img: &mut Image, attrs: Attributes, bbox: (f64, f64, f64, f64)) {
    let (x0, y0, x1, y1) = bbox;
    let rgb = attrs.color.rgb();
    let (cx, cy) = ((x0 + x1) / 2.0, (y0 + y1) / 2.0);
    let (rx, ry) = ((x1 - x0) / 2.0, (y1 - y0) / 2.0);
    let ys = y0.floor().max(0.0) as usize..(y1.ceil() as usize).min(img.height());
    for y in ys {
        for x in x0.floor().max(0.0) as usize..(x1.ceil() as usize).min(img.width()) {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            if px < x0 || px > x1 || py < y0 || py > y1 {
                continue;
            }
            let inside = match attrs.shape {
                ShapeKind::Square => true,
                ShapeKind::Circle => ((px - cx) / rx).powi(2) + ((py - cy) / ry).powi(2) <= 1.0,
                ShapeKind::Triangle => {
                    let t = (py - y0) / (y1 - y0);
                    (px - cx).abs() <= t * rx + 0.5
                }
            };
            if inside {
                img.set(x, y, rgb);
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthSplit {
    /// Only base categories are drawn.
    Train,
    /// Base and novel categories are drawn uniformly.
    Eval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub image_size: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Shape side range as a fraction of the image side.
    pub min_rel_size: f64,
    pub max_rel_size: f64,
    /// Amplitude of uniform background noise.
    pub noise: f32,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig { image_size: 64, min_objects: 1, max_objects: 4, min_rel_size: 0.2, max_rel_size: 0.42, noise: 0.04 }
    }
}

/// The 3 held-out combinations used as novel categories by default.
pub const DEFAULT_NOVEL: [&str; 3] = ["red triangle", "green circle", "blue square"];

/// The default 9 base and 3 novel synthetic category names.
pub fn default_synth_categories() -> (Vec<String>, Vec<String>) {
    let mut base = Vec::new();
    for c in crate::shapes::COLORS {
        for s in crate::shapes::SHAPES {
            let name = Attributes { color: c, shape: s }.name();
            if !DEFAULT_NOVEL.contains(&name.as_str()) {
                base.push(name);
            }
        }
    }
    (base, DEFAULT_NOVEL.iter().map(|s| s.to_string()).collect())
}

/// Vocabulary over the default synthetic categories with the given templates.
pub fn synth_vocabulary(templates: Vec<String>) -> Result<CategoryVocabulary> {
    let (base, novel) = default_synth_categories();
    let cats = base
        .into_iter()
        .map(|name| crate::vocab::Category { name, split: Split::Base })
        .chain(novel.into_iter().map(|name| crate::vocab::Category { name, split: Split::Novel }))
        .collect();
    CategoryVocabulary::new(cats, templates)
}

fn overlaps(a: &(f64, f64, f64, f64), b: &(f64, f64, f64, f64), margin: f64) -> bool {
    a.0 < b.2 + margin && b.0 < a.2 + margin && a.1 < b.3 + margin && b.1 < a.3 + margin
}

/// Render one image with `n` non-overlapping shapes drawn from `cats`.
pub fn render_scene(rng: &mut ChaCha8Rng, cfg: &SynthConfig, cats: &[Attributes], n: usize) -> (Image, Vec<BoxAnnotation>) {
    let side = cfg.image_size;
    let mut img = Image::new(side, side, BACKGROUND_RGB);
    if cfg.noise > 0.0 {
        for y in 0..side {
            for x in 0..side {
                let mut p = img.get(x, y);
                for v in &mut p {
                    *v += rng.random_range(-cfg.noise..=cfg.noise);
                }
                img.set(x, y, p);
            }
        }
    }
    let mut placed: Vec<(f64, f64, f64, f64)> = Vec::new();
    let mut annotations = Vec::new();
    let lo = (cfg.min_rel_size * side as f64).round().max(4.0) as usize;
    let hi = (cfg.max_rel_size * side as f64).round().max(lo as f64) as usize;
    for _ in 0..n {
        for _attempt in 0..100 {
            let bw = rng.random_range(lo..=hi);
            let bh = rng.random_range(lo..=hi);
            if bw >= side || bh >= side {
                break;
            }
            let x0 = rng.random_range(0..=side - bw) as f64;
            let y0 = rng.random_range(0..=side - bh) as f64;
            let b = (x0, y0, x0 + bw as f64, y0 + bh as f64);
            if placed.iter().any(|p| overlaps(p, &b, 2.0)) {
                continue;
            }
            let attrs = cats[rng.random_range(0..cats.len())];
            render_shape(&mut img, attrs, b);
            placed.push(b);
            annotations.push(BoxAnnotation {
                category: attrs.name(),
                bbox: box_from_pixels([b.0, b.1, b.2, b.3], side, side),
            });
            break;
        }
    }
    (img, annotations)
}

/// Seeded synthetic dataset. Novel categories are drawn only for the eval split.
pub fn synth_shapes(
    seed: u64,
    n_images: usize,
    cfg: &SynthConfig,
    base_cats: &[String],
    novel_cats: &[String],
    split: SynthSplit,
) -> Result<Dataset> {
    if cfg.image_size < 8 {
        return Err(Error::Dataset(format!("image size {} below 8", cfg.image_size)));
    }
    if cfg.min_objects == 0 || cfg.min_objects > cfg.max_objects {
        return Err(Error::Dataset("object count range must satisfy 1 <= min <= max".into()));
    }
    let parse = |names: &[String]| -> Result<Vec<Attributes>> {
        names
            .iter()
            .map(|n| Attributes::parse(n).ok_or_else(|| Error::Dataset(format!("renderer cannot draw {n:?}"))))
            .collect()
    };
    let mut cats = parse(base_cats)?;
    if split == SynthSplit::Eval {
        cats.extend(parse(novel_cats)?);
    }
    if cats.is_empty() {
        return Err(Error::Dataset("no categories to draw".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = (0..n_images)
        .map(|i| {
            let n = rng.random_range(cfg.min_objects..=cfg.max_objects);
            let (image, annotations) = render_scene(&mut rng, cfg, &cats, n);
            ImageSample { image_id: i as u64, image, annotations }
        })
        .collect();
    Ok(Dataset::new(samples))
}

// ---------------------------------------------------------------------------
// Batching
// ---------------------------------------------------------------------------

/// Endless stream of batches: each epoch is a fresh seeded shuffle covering
/// every sample once; optional horizontal flips with probability 1/2.
pub struct BatchIterator<'a> {
    dataset: &'a Dataset,
    batch_size: usize,
    augment: bool,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    pos: usize,
}

pub fn batch_iterator(dataset: &Dataset, batch_size: usize, seed: u64, augment: bool) -> Result<BatchIterator<'_>> {
    if batch_size == 0 {
        return Err(Error::arg("batch size must be at least 1"));
    }
    if dataset.is_empty() {
        return Err(Error::Dataset("cannot batch an empty dataset".into()));
    }
    Ok(BatchIterator {
        dataset,
        batch_size,
        augment,
        rng: ChaCha8Rng::seed_from_u64(seed),
        order: Vec::new(),
        pos: 0,
    })
}

impl BatchIterator<'_> {
    /// The remaining batches of the current epoch (the whole next epoch if
    /// the current one is exhausted).
    pub fn next_epoch(&mut self) -> Vec<Vec<ImageSample>> {
        let mut out = vec![self.next().expect("endless")];
        while self.pos < self.order.len() {
            out.push(self.next().expect("endless"));
        }
        out
    }
}

impl Iterator for BatchIterator<'_> {
    type Item = Vec<ImageSample>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.order.len() {
            self.order = (0..self.dataset.len()).collect();
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let batch = self.order[self.pos..end]
            .iter()
            .map(|&i| {
                let s = &self.dataset.samples[i];
                if self.augment && self.rng.random_bool(0.5) {
                    s.hflip()
                } else {
                    s.clone()
                }
            })
            .collect();
        self.pos = end;
        Some(batch)
    }
}
