//! Category vocabularies, prompt templates and text-embedding classifiers.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoders::TextEncoder;
use crate::error::{Error, Result};
use crate::tensor::{l2_norm, Mat};

pub const PLACEHOLDER: &str = "{}";

/// Tolerance on the L2 norm of every embedding row.
pub const UNIT_NORM_TOL: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Base,
    Novel,
}

/// Which categories of a vocabulary to materialize.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SplitFilter {
    Base,
    Novel,
    #[default]
    All,
}

impl SplitFilter {
    pub fn accepts(self, split: Split) -> bool {
        match self {
            SplitFilter::All => true,
            SplitFilter::Base => split == Split::Base,
            SplitFilter::Novel => split == Split::Novel,
        }
    }
}

impl std::str::FromStr for SplitFilter {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base" => Ok(SplitFilter::Base),
            "novel" => Ok(SplitFilter::Novel),
            "all" | "target" => Ok(SplitFilter::All),
            other => Err(Error::arg(format!("unknown split filter `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Category {
    pub name: String,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "VocabularyFile", into = "VocabularyFile")]
pub struct CategoryVocabulary {
    categories: Vec<Category>,
    templates: Vec<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VocabularyFile {
    categories: Vec<Category>,
    templates: Vec<String>,
}

impl TryFrom<VocabularyFile> for CategoryVocabulary {
    type Error = Error;

    fn try_from(f: VocabularyFile) -> Result<Self> {
        CategoryVocabulary::new(f.categories, f.templates)
    }
}

impl From<CategoryVocabulary> for VocabularyFile {
    fn from(v: CategoryVocabulary) -> Self {
        VocabularyFile { categories: v.categories, templates: v.templates }
    }
}

#[derive(Deserialize)]
struct SplitFile {
    base: Vec<String>,
    #[serde(default)]
    novel: Vec<String>,
}

impl CategoryVocabulary {
    pub fn new(categories: Vec<Category>, templates: Vec<String>) -> Result<Self> {
        let mut seen = HashSet::new();
        for c in &categories {
            if c.name.trim().is_empty() {
                return Err(Error::Vocabulary("empty category name".into()));
            }
            if c.name.contains('\n') {
                return Err(Error::Vocabulary(format!("category name {:?} contains a newline", c.name)));
            }
            if !seen.insert(c.name.as_str()) {
                return Err(Error::Vocabulary(format!("duplicate category `{}`", c.name)));
            }
        }
        if !categories.iter().any(|c| c.split == Split::Base) {
            return Err(Error::Vocabulary("no base categories".into()));
        }
        if templates.is_empty() {
            return Err(Error::Vocabulary("at least one prompt template is required".into()));
        }
        for t in &templates {
            if t.matches(PLACEHOLDER).count() != 1 {
                return Err(Error::Vocabulary(format!("template {t:?} must contain exactly one `{{}}`")));
            }
        }
        Ok(CategoryVocabulary { categories, templates })
    }

    /// Parse the JSON vocabulary format.
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Vocabulary(e.to_string()))
    }

    /// Load a vocabulary file from disk.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Vocabulary(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Assign splits to a full list of names from a `{"base": [...], "novel": [...]}`
    /// split file. Names listed in neither set are left out.
    pub fn from_split_file<S: AsRef<str>>(all_names: &[S], split_json: &str, templates: Vec<String>) -> Result<Self> {
        let split: SplitFile = serde_json::from_str(split_json).map_err(|e| Error::Vocabulary(e.to_string()))?;
        let base: HashSet<&str> = split.base.iter().map(String::as_str).collect();
        let novel: HashSet<&str> = split.novel.iter().map(String::as_str).collect();
        if let Some(both) = base.intersection(&novel).next() {
            return Err(Error::Vocabulary(format!("`{both}` is listed as both base and novel")));
        }
        let known: HashSet<&str> = all_names.iter().map(AsRef::as_ref).collect();
        if let Some(missing) = base.union(&novel).find(|n| !known.contains(*n)) {
            return Err(Error::Vocabulary(format!("split file names unknown category `{missing}`")));
        }
        let categories = all_names
            .iter()
            .filter_map(|n| {
                let n = n.as_ref();
                let split = if base.contains(n) {
                    Split::Base
                } else if novel.contains(n) {
                    Split::Novel
                } else {
                    return None;
                };
                Some(Category { name: n.to_string(), split })
            })
            .collect();
        Self::new(categories, templates)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("vocabulary serializes")
    }

    pub fn categories(&self) -> &[Category] {
        &self.categories
    }

    pub fn templates(&self) -> &[String] {
        &self.templates
    }

    pub fn len(&self) -> usize {
        self.categories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.categories.is_empty()
    }

    pub fn names(&self, filter: SplitFilter) -> Vec<&str> {
        self.categories.iter().filter(|c| filter.accepts(c.split)).map(|c| c.name.as_str()).collect()
    }

    pub fn split_of(&self, name: &str) -> Option<Split> {
        self.categories.iter().find(|c| c.name == name).map(|c| c.split)
    }

    pub fn with_templates(&self, templates: Vec<String>) -> Result<Self> {
        Self::new(self.categories.clone(), templates)
    }
}

/// Fill a template's placeholder with a category name.
pub fn fill_template(template: &str, name: &str) -> String {
    template.replacen(PLACEHOLDER, name, 1)
}

/// Text-embedding classifier: one unit-norm row per category.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingMatrix {
    names: Vec<String>,
    dim: usize,
    data: Vec<f32>,
}

impl EmbeddingMatrix {
    /// Rows must already be unit-norm within [`UNIT_NORM_TOL`].
    pub fn new(names: Vec<String>, rows: Vec<Vec<f64>>) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        let data = rows.iter().flat_map(|r| r.iter().map(|&v| v as f32)).collect();
        Self::from_f32(names, dim, data)
    }

    /// Normalizes each row; a zero row is an error.
    pub fn from_unnormalized(names: Vec<String>, rows: Vec<Vec<f64>>) -> Result<Self> {
        let mut out = Vec::with_capacity(rows.len());
        for (name, r) in names.iter().zip(&rows) {
            let n = crate::tensor::normalize(r).ok_or_else(|| Error::DegenerateEnsemble(name.clone()))?;
            out.push(n);
        }
        Self::new(names, out)
    }

    pub fn from_f32(names: Vec<String>, dim: usize, data: Vec<f32>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::arg("embedding dimension must be positive"));
        }
        if data.len() != names.len() * dim {
            return Err(Error::shape(format!(
                "{} names × {dim} dims needs {} values, got {}",
                names.len(),
                names.len() * dim,
                data.len()
            )));
        }
        let m = EmbeddingMatrix { names, dim, data };
        m.validate()?;
        Ok(m)
    }

    fn validate(&self) -> Result<()> {
        for i in 0..self.len() {
            let row = self.row(i);
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::arg(format!("non-finite embedding for `{}`", self.names[i])));
            }
            let norm = row.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > UNIT_NORM_TOL {
                return Err(Error::arg(format!("embedding `{}` has norm {norm}", self.names[i])));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_f64(&self, i: usize) -> Vec<f64> {
        self.row(i).iter().map(|&v| v as f64).collect()
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// `C × d` matrix in `f64`.
    pub fn to_mat(&self) -> Mat {
        Mat::from_vec(self.len(), self.dim, self.data.iter().map(|&v| v as f64).collect())
    }

    /// Rows for the given names, in the given order.
    pub fn select(&self, names: &[&str]) -> Result<Self> {
        let mut data = Vec::with_capacity(names.len() * self.dim);
        for n in names {
            let i = self.position(n).ok_or_else(|| Error::UnknownCategory(n.to_string()))?;
            data.extend_from_slice(self.row(i));
        }
        Ok(EmbeddingMatrix { names: names.iter().map(|s| s.to_string()).collect(), dim: self.dim, data })
    }

    /// Rows of `vocab` categories accepted by `filter`, in vocabulary order.
    pub fn restrict(&self, vocab: &CategoryVocabulary, filter: SplitFilter) -> Result<Self> {
        self.select(&vocab.names(filter))
    }

    pub fn concat(&self, other: &EmbeddingMatrix) -> Result<Self> {
        if self.dim != other.dim {
            return Err(Error::DimMismatch { expected: self.dim, got: other.dim });
        }
        let mut names = self.names.clone();
        names.extend(other.names.iter().cloned());
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Self::from_f32(names, self.dim, data)
    }

    /// Serialize in the `EDAEMB v1` format.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(32 + self.data.len() * 4);
        writeln!(out, "EDAEMB v1 {} {}", self.len(), self.dim).expect("vec write");
        for n in &self.names {
            writeln!(out, "{n}").expect("vec write");
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut cursor = 0usize;
        let mut next_line = |what: &str| -> std::result::Result<&str, String> {
            let rest = &bytes[cursor..];
            let end = rest.iter().position(|&b| b == b'\n').ok_or_else(|| format!("missing {what}"))?;
            cursor += end + 1;
            std::str::from_utf8(&rest[..end]).map_err(|_| format!("{what} is not UTF-8"))
        };
        let header = next_line("header")?;
        let fields: Vec<&str> = header.split(' ').collect();
        if fields.len() != 4 || fields[0] != "EDAEMB" || fields[1] != "v1" {
            return Err(format!("malformed header {header:?}"));
        }
        let rows: usize = fields[2].parse().map_err(|_| format!("bad row count {:?}", fields[2]))?;
        let cols: usize = fields[3].parse().map_err(|_| format!("bad column count {:?}", fields[3]))?;
        let mut names = Vec::with_capacity(rows);
        for i in 0..rows {
            names.push(next_line(&format!("name {i}"))?.to_string());
        }
        let payload = &bytes[cursor..];
        let expected = rows * cols * 4;
        if payload.len() != expected {
            return Err(format!("payload has {} bytes, header implies {expected}", payload.len()));
        }
        let data: Vec<f32> =
            payload.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        if let Some(bad) = data.iter().position(|v| !v.is_finite()) {
            return Err(format!("non-finite value at index {bad}"));
        }
        Self::from_f32(names, cols, data).map_err(|e| e.to_string())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path)?;
        Self::from_bytes(&bytes).map_err(|reason| Error::EmbeddingFile { path: path.to_path_buf(), reason })
    }
}

/// Classifier weights from prompt ensembling: for each category, every filled
/// template is encoded and L2-normalized, the vectors are averaged and the
/// mean is normalized again.
pub fn ensemble_prompt_embeddings(
    vocab: &CategoryVocabulary,
    encoder: &dyn TextEncoder,
    subset: SplitFilter,
) -> Result<EmbeddingMatrix> {
    let names = vocab.names(subset);
    if names.is_empty() {
        return Err(Error::arg(format!("no categories in subset {subset:?}")));
    }
    let dim = encoder.dim();
    let mut rows = Vec::with_capacity(names.len());
    for name in &names {
        let mut acc = vec![0.0; dim];
        for t in vocab.templates() {
            let v = encoder.encode(&fill_template(t, name))?;
            if v.len() != dim {
                return Err(Error::DimMismatch { expected: dim, got: v.len() });
            }
            let n = l2_norm(&v);
            if n <= f64::EPSILON || !n.is_finite() {
                return Err(Error::Encoder(format!("encoder returned a degenerate vector for {t:?}")));
            }
            for (a, x) in acc.iter_mut().zip(&v) {
                *a += x / n;
            }
        }
        let k = vocab.templates().len() as f64;
        acc.iter_mut().for_each(|a| *a /= k);
        // Opposing prompts can cancel exactly; treat that as undefined.
        if l2_norm(&acc) < 1e-9 {
            return Err(Error::DegenerateEnsemble(name.to_string()));
        }
        rows.push(acc);
    }
    EmbeddingMatrix::from_unnormalized(names.iter().map(|s| s.to_string()).collect(), rows)
}

/// The 80 ImageNet prompt templates commonly used for zero-shot CLIP classifiers.
pub const IMAGENET_TEMPLATES: [&str; 80] = [
    "a bad photo of a {}.",
    "a photo of many {}.",
    "a sculpture of a {}.",
    "a photo of the hard to see {}.",
    "a low resolution photo of the {}.",
    "a rendering of a {}.",
    "graffiti of a {}.",
    "a bad photo of the {}.",
    "a cropped photo of the {}.",
    "a tattoo of a {}.",
    "the embroidered {}.",
    "a photo of a hard to see {}.",
    "a bright photo of a {}.",
    "a photo of a clean {}.",
    "a photo of a dirty {}.",
    "a dark photo of the {}.",
    "a drawing of a {}.",
    "a photo of my {}.",
    "the plastic {}.",
    "a photo of the cool {}.",
    "a close-up photo of a {}.",
    "a black and white photo of the {}.",
    "a painting of the {}.",
    "a painting of a {}.",
    "a pixelated photo of the {}.",
    "a sculpture of the {}.",
    "a bright photo of the {}.",
    "a cropped photo of a {}.",
    "a plastic {}.",
    "a photo of the dirty {}.",
    "a jpeg corrupted photo of a {}.",
    "a blurry photo of the {}.",
    "a photo of the {}.",
    "a good photo of the {}.",
    "a rendering of the {}.",
    "a {} in a video game.",
    "a photo of one {}.",
    "a doodle of a {}.",
    "a close-up photo of the {}.",
    "a photo of a {}.",
    "the origami {}.",
    "the {} in a video game.",
    "a sketch of a {}.",
    "a doodle of the {}.",
    "a origami {}.",
    "a low resolution photo of a {}.",
    "the toy {}.",
    "a rendition of the {}.",
    "a photo of the clean {}.",
    "a photo of a large {}.",
    "a rendition of a {}.",
    "a photo of a nice {}.",
    "a photo of a weird {}.",
    "a blurry photo of a {}.",
    "a cartoon {}.",
    "art of a {}.",
    "a sketch of the {}.",
    "a embroidered {}.",
    "a pixelated photo of a {}.",
    "itap of the {}.",
    "a jpeg corrupted photo of the {}.",
    "a good photo of a {}.",
    "a plushie {}.",
    "a photo of the nice {}.",
    "a photo of the small {}.",
    "a photo of the weird {}.",
    "the cartoon {}.",
    "art of the {}.",
    "a drawing of the {}.",
    "a photo of the large {}.",
    "a black and white photo of a {}.",
    "the plushie {}.",
    "a dark photo of a {}.",
    "itap of a {}.",
    "graffiti of the {}.",
    "a toy {}.",
    "itap of my {}.",
    "a photo of a cool {}.",
    "a photo of a small {}.",
    "a tattoo of the {}.",
];

pub fn default_templates() -> Vec<String> {
    IMAGENET_TEMPLATES.iter().map(|s| s.to_string()).collect()
}

/// The 80 COCO detection category names in annotation-id order.
pub const COCO_CATEGORY_NAMES: [&str; 80] = [
    "person", "bicycle", "car", "motorcycle", "airplane", "bus", "train", "truck", "boat", "traffic light",
    "fire hydrant", "stop sign", "parking meter", "bench", "bird", "cat", "dog", "horse", "sheep", "cow",
    "elephant", "bear", "zebra", "giraffe", "backpack", "umbrella", "handbag", "tie", "suitcase", "frisbee",
    "skis", "snowboard", "sports ball", "kite", "baseball bat", "baseball glove", "skateboard", "surfboard",
    "tennis racket", "bottle", "wine glass", "cup", "fork", "knife", "spoon", "bowl", "banana", "apple",
    "sandwich", "orange", "broccoli", "carrot", "hot dog", "pizza", "donut", "cake", "chair", "couch",
    "potted plant", "bed", "dining table", "toilet", "tv", "laptop", "mouse", "remote", "keyboard",
    "cell phone", "microwave", "oven", "toaster", "sink", "refrigerator", "book", "clock", "vase", "scissors",
    "teddy bear", "hair drier", "toothbrush",
];

/// The standard open-vocabulary COCO split (48 base, 17 novel).
pub const COCO_OV_SPLIT_JSON: &str = include_str!("../data/coco_ov_split.json");
