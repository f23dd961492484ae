//! Run configuration: TOML file, dotted-path overrides, validation.

use std::path::{Path, PathBuf};

use edadet::datasets::SynthConfig;
use edadet::encoders::{EncoderConfig, EncoderKind};
use edadet::model::ModelConfig;
use edadet::objectives::{AlignmentMode, ExtraSupervision, InferenceConfig, LossWeights, OptimizerConfig, RoiSource, TrainConfig};
use edadet::pipeline::ToyRecipe;
use edadet::proposals::{BoxWeights, DecoderConfig};
use edadet::{EdaConfig, SplitFilter};
use serde::{Deserialize, Serialize};

use crate::CliError;

/// `eda.k` as an integer or the literal `"roi_area"` (top-k disabled).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum KSetting {
    Count(usize),
    Named(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EdaSection {
    pub tau: f64,
    pub lam: f64,
    pub roi_size: (usize, usize),
    pub k: KSetting,
    pub fuse_levels: Vec<usize>,
}

impl Default for EdaSection {
    fn default() -> Self {
        let e = ToyRecipe::default().train.eda;
        EdaSection { tau: e.tau, lam: e.lam, roi_size: e.roi_size, k: KSetting::Count(e.k), fuse_levels: e.fuse_levels }
    }
}

impl EdaSection {
    pub fn resolve(&self) -> Result<EdaConfig, CliError> {
        let k = match &self.k {
            KSetting::Count(k) => *k,
            KSetting::Named(s) if s == "roi_area" => self.roi_size.0 * self.roi_size.1,
            KSetting::Named(s) => return Err(CliError::Config(format!("eda.k must be an integer or \"roi_area\", got {s:?}"))),
        };
        let cfg = EdaConfig { tau: self.tau, lam: self.lam, roi_size: self.roi_size, k, fuse_levels: self.fuse_levels.clone() };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VocabSource {
    /// The 12 color/shape categories with 3 held-out combinations.
    #[default]
    Synthetic,
    /// The 48/17 COCO split.
    Coco,
    /// A vocabulary JSON file given by `vocab.path`.
    File,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateSet {
    /// The 80 ImageNet prompts.
    #[default]
    Imagenet,
    /// `a photo of a {}.`
    Single,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VocabSection {
    pub source: VocabSource,
    pub path: Option<PathBuf>,
    /// Defaults to the file's own templates for `file`, ImageNet otherwise.
    pub templates: Option<TemplateSet>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataKind {
    #[default]
    Synthetic,
    Coco,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub kind: DataKind,
    pub train_images: usize,
    pub eval_images: usize,
    pub synth: SynthConfig,
    pub train_annotations: Option<PathBuf>,
    pub eval_annotations: Option<PathBuf>,
    pub image_root: Option<PathBuf>,
}

impl Default for DataSection {
    fn default() -> Self {
        let r = ToyRecipe::default();
        DataSection {
            kind: DataKind::Synthetic,
            train_images: r.train_images,
            eval_images: r.eval_images,
            synth: r.synth,
            train_annotations: None,
            eval_annotations: None,
            image_root: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub image_size: usize,
    pub patch_stride: usize,
    pub backbone_dim: usize,
    pub feature_dim: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ToyRecipe::default().model;
        ModelSection { image_size: m.image_size, patch_stride: m.patch_stride, backbone_dim: m.backbone_dim, feature_dim: m.feature_dim }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub mode: AlignmentMode,
    pub steps: usize,
    pub batch_size: usize,
    pub augment: bool,
    pub cls_roi: RoiSource,
    pub aux_box_loss: bool,
    pub extra_supervision: ExtraSupervision,
}

impl Default for TrainSection {
    fn default() -> Self {
        let r = ToyRecipe::default();
        TrainSection {
            mode: r.train.mode,
            steps: r.steps,
            batch_size: r.batch_size,
            augment: r.augment,
            cls_roi: r.train.cls_roi,
            aux_box_loss: r.train.aux_box_loss,
            extra_supervision: r.train.extra_supervision,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// N of the class-agnostic AR@N.
    pub ar_n: usize,
    /// Target vocabulary at eval/infer time; `base` also restricts the
    /// synthetic eval images to base categories.
    pub split: SplitFilter,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { ar_n: ToyRecipe::default().ar_n, split: SplitFilter::All }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VisualizeSection {
    /// Categories to draw heatmaps for; empty means every target category.
    pub categories: Vec<String>,
    /// Output pixels per map cell.
    pub scale: usize,
}

impl Default for VisualizeSection {
    fn default() -> Self {
        VisualizeSection { categories: Vec::new(), scale: 8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClusterSection {
    pub k: usize,
    pub max_iters: usize,
    pub restarts: usize,
    pub scale: usize,
}

impl Default for ClusterSection {
    fn default() -> Self {
        ClusterSection { k: 4, max_iters: 100, restarts: 10, scale: 8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub encoder: EncoderConfig,
    pub vocab: VocabSection,
    pub data: DataSection,
    pub model: ModelSection,
    pub decoder: DecoderConfig,
    pub eda: EdaSection,
    pub loss: LossWeights,
    pub box_loss: BoxWeights,
    pub match_cost: BoxWeights,
    pub optimizer: OptimizerConfig,
    pub train: TrainSection,
    pub inference: InferenceConfig,
    pub eval: EvalSection,
    pub visualize: VisualizeSection,
    pub cluster: ClusterSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        let r = ToyRecipe::default();
        RunConfig {
            seed: r.seed,
            output_dir: PathBuf::from("runs/default"),
            encoder: EncoderConfig::default(),
            vocab: VocabSection::default(),
            data: DataSection::default(),
            model: ModelSection::default(),
            decoder: r.model.decoder.clone(),
            eda: EdaSection::default(),
            loss: r.train.loss,
            box_loss: r.train.box_loss,
            match_cost: r.train.match_cost,
            optimizer: r.train.optimizer,
            train: TrainSection::default(),
            inference: r.train.inference,
            eval: EvalSection::default(),
            visualize: VisualizeSection::default(),
            cluster: ClusterSection::default(),
        }
    }
}

/// Split `key.path=value` at the first `=`.
pub fn split_assignment(s: &str) -> Result<(&str, &str), CliError> {
    s.split_once('=').ok_or_else(|| CliError::Config(format!("override {s:?} is not of the form key=value")))
}

fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Set `path` (dot separated) in `table` to `raw`, parsed as a TOML value
/// when possible and as a string otherwise.
pub fn apply_override(table: &mut toml::Table, path: &str, raw: &str) -> Result<(), CliError> {
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(CliError::Config(format!("bad override key {path:?}")));
    }
    let mut cur = table;
    for k in &keys[..keys.len() - 1] {
        let entry = cur.entry(k.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = match entry {
            toml::Value::Table(t) => t,
            _ => return Err(CliError::Config(format!("override {path:?}: `{k}` is not a table"))),
        };
    }
    cur.insert(keys[keys.len() - 1].to_string(), parse_value(raw));
    Ok(())
}

impl RunConfig {
    /// Parse TOML text, apply `(dotted key, value)` overrides, then validate.
    pub fn from_toml_with(text: &str, overrides: &[(String, String)]) -> Result<Self, CliError> {
        let mut table: toml::Table = text.parse().map_err(|e| CliError::Config(format!("config: {e}")))?;
        for (k, v) in overrides {
            apply_override(&mut table, k, v)?;
        }
        let cfg: RunConfig = toml::Value::Table(table).try_into().map_err(|e| CliError::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Load `path` (or the defaults when `None`) with overrides.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self, CliError> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))?,
            None => String::new(),
        };
        Self::from_toml_with(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.eda.resolve()?;
        self.model_config().validate(&self.eda.fuse_levels)?;
        self.train_config()?.validate()?;
        if self.train.batch_size == 0 {
            return Err(CliError::Config("train.batch_size must be at least 1".into()));
        }
        if self.eval.ar_n == 0 {
            return Err(CliError::Config("eval.ar_n must be at least 1".into()));
        }
        if self.model.feature_dim != self.encoder.dim && self.encoder.kind == EncoderKind::Stub {
            return Err(CliError::Config(format!(
                "model.feature_dim {} must equal encoder.dim {}",
                self.model.feature_dim, self.encoder.dim
            )));
        }
        let mut paths: Vec<(&str, &Option<PathBuf>)> =
            vec![("encoder.weights", &self.encoder.weights), ("encoder.text_table", &self.encoder.text_table)];
        if self.vocab.source == VocabSource::File {
            if self.vocab.path.is_none() {
                return Err(CliError::Config("vocab.source = \"file\" needs vocab.path".into()));
            }
            paths.push(("vocab.path", &self.vocab.path));
        }
        if self.data.kind == DataKind::Synthetic && self.vocab.source == VocabSource::Coco {
            return Err(CliError::Config("synthetic data needs a synthetic or file vocabulary".into()));
        }
        if self.data.kind == DataKind::Coco {
            for (name, p) in [
                ("data.train_annotations", &self.data.train_annotations),
                ("data.eval_annotations", &self.data.eval_annotations),
                ("data.image_root", &self.data.image_root),
            ] {
                if p.is_none() {
                    return Err(CliError::Config(format!("data.kind = \"coco\" needs {name}")));
                }
                paths.push((name, p));
            }
        }
        for (name, p) in paths {
            if let Some(p) = p {
                if !p.exists() {
                    return Err(CliError::Config(format!("{name}: {} does not exist", p.display())));
                }
            }
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            image_size: self.model.image_size,
            patch_stride: self.model.patch_stride,
            backbone_dim: self.model.backbone_dim,
            feature_dim: self.model.feature_dim,
            decoder: self.decoder.clone(),
        }
    }

    pub fn train_config(&self) -> Result<TrainConfig, CliError> {
        Ok(TrainConfig {
            mode: self.train.mode,
            eda: self.eda.resolve()?,
            loss: self.loss,
            box_loss: self.box_loss,
            match_cost: self.match_cost,
            optimizer: self.optimizer,
            extra_supervision: self.train.extra_supervision,
            cls_roi: self.train.cls_roi,
            aux_box_loss: self.train.aux_box_loss,
            inference: self.inference,
        })
    }

    /// The synthetic recipe this configuration describes.
    pub fn recipe(&self) -> Result<ToyRecipe, CliError> {
        Ok(ToyRecipe {
            synth: self.data.synth.clone(),
            train_images: self.data.train_images,
            eval_images: self.data.eval_images,
            steps: self.train.steps,
            batch_size: self.train.batch_size,
            augment: self.train.augment,
            seed: self.seed,
            ar_n: self.eval.ar_n,
            model: self.model_config(),
            train: self.train_config()?,
        })
    }
}
