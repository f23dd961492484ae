//! Subcommand implementations. Each writes into `output_dir` next to an
//! echo of the effective configuration.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use edadet::datasets::{
    default_synth_categories, load_coco_annotations, synth_shapes, synth_vocabulary, Dataset, ImageSample, SplitMode,
    SynthSplit,
};
use edadet::dense::detector_dense_probs;
use edadet::encoders::{build_encoders, EncoderPair};
use edadet::kmeans::{kmeans, KMeansConfig};
use edadet::model::Detector;
use edadet::objectives::{fit, infer, write_log_line, Detection, TrainContext, TrainState};
use edadet::pipeline::evaluate_with_proposals;
use edadet::proposals::write_proposal_dump;
use edadet::viz::{draw_boxes, save_heatmap, save_label_map, save_rgb};
use edadet::vocab::{default_templates, ensemble_prompt_embeddings, COCO_CATEGORY_NAMES, COCO_OV_SPLIT_JSON};
use edadet::{CategoryVocabulary, EmbeddingMatrix, Image, ParamSet, SplitFilter};
use log::info;
use serde::Serialize;

use crate::args::Command;
use crate::config::{DataKind, RunConfig, TemplateSet, VocabSource};
use crate::{CliError, CliResult};

pub const CONFIG_ECHO: &str = "config.toml";
pub const CHECKPOINT: &str = "model.ckpt";
pub const TRAIN_LOG: &str = "train_log.jsonl";

pub fn dispatch(cfg: &RunConfig, command: Command) -> CliResult<()> {
    prepare_output(cfg)?;
    match command {
        Command::Embed { split, out } => {
            let out = out.unwrap_or_else(|| cfg.output_dir.join("embeddings.edaemb"));
            let emb = cmd_embed(cfg, split, &out)?;
            println!("{} x {} -> {}", emb.len(), emb.dim(), out.display());
        }
        Command::Train => {
            let ckpt = cmd_train(cfg)?;
            println!("checkpoint: {}", ckpt.display());
        }
        Command::Eval(c) => {
            let report = cmd_eval(cfg, &c.checkpoint)?;
            print!("{}", report.to_table());
        }
        Command::Infer { ckpt, images, synthetic, overlay } => {
            let inputs = match synthetic {
                Some(n) => InferInput::Synthetic(n),
                None if images.is_empty() => return Err(CliError::Config("infer needs --image or --synthetic".into())),
                None => InferInput::Files(images),
            };
            let path = cmd_infer(cfg, &ckpt.checkpoint, &inputs, overlay)?;
            println!("detections: {}", path.display());
        }
        Command::Visualize { ckpt, image, categories } => {
            let cats = if categories.is_empty() { cfg.visualize.categories.clone() } else { categories };
            let files = cmd_visualize(cfg, &ckpt.checkpoint, &image, &cats)?;
            for f in files {
                println!("{}", f.display());
            }
        }
        Command::Cluster { ckpt, image, k } => {
            let path = cmd_cluster(cfg, &ckpt.checkpoint, &image, k.unwrap_or(cfg.cluster.k))?;
            println!("{}", path.display());
        }
    }
    Ok(())
}

/// Create `output_dir` and echo the effective configuration into it.
pub fn prepare_output(cfg: &RunConfig) -> CliResult<()> {
    fs::create_dir_all(&cfg.output_dir).map_err(|e| CliError::Io(format!("{}: {e}", cfg.output_dir.display())))?;
    fs::write(cfg.output_dir.join(CONFIG_ECHO), cfg.to_toml())?;
    info!("seed {}", cfg.seed);
    Ok(())
}

pub fn vocabulary(cfg: &RunConfig) -> CliResult<CategoryVocabulary> {
    let templates = match cfg.vocab.templates {
        Some(TemplateSet::Single) => Some(vec!["a photo of a {}.".to_string()]),
        Some(TemplateSet::Imagenet) => Some(default_templates()),
        None => None,
    };
    let vocab = match cfg.vocab.source {
        VocabSource::Synthetic => synth_vocabulary(templates.unwrap_or_else(default_templates))?,
        VocabSource::Coco => CategoryVocabulary::from_split_file(
            &COCO_CATEGORY_NAMES,
            COCO_OV_SPLIT_JSON,
            templates.unwrap_or_else(default_templates),
        )?,
        VocabSource::File => {
            let path = cfg.vocab.path.as_ref().expect("validated");
            let v = CategoryVocabulary::load(path)?;
            match templates {
                Some(t) => v.with_templates(t)?,
                None => v,
            }
        }
    };
    Ok(vocab)
}

pub fn encoders(cfg: &RunConfig) -> CliResult<EncoderPair> {
    Ok(build_encoders(&cfg.encoder)?)
}

fn synth_split(cfg: &RunConfig, seed: u64, n: usize, split: SynthSplit) -> CliResult<Dataset> {
    let (base, novel) = default_synth_categories();
    let mut synth = cfg.data.synth.clone();
    synth.image_size = cfg.model.image_size;
    Ok(synth_shapes(seed, n, &synth, &base, &novel, split)?)
}

/// The base-only training set.
pub fn train_data(cfg: &RunConfig, vocab: &CategoryVocabulary) -> CliResult<Dataset> {
    match cfg.data.kind {
        DataKind::Synthetic => synth_split(cfg, cfg.seed.wrapping_mul(2), cfg.data.train_images, SynthSplit::Train),
        DataKind::Coco => {
            let ann = load_coco_annotations(
                cfg.data.train_annotations.as_ref().expect("validated"),
                vocab,
                SplitMode::TrainBaseOnly,
                false,
            )?;
            Ok(ann.load_images(cfg.data.image_root.as_ref().expect("validated"), cfg.model.image_size)?)
        }
    }
}

/// The eval set, annotated with every category `eval.split` admits.
pub fn eval_data(cfg: &RunConfig, vocab: &CategoryVocabulary) -> CliResult<Dataset> {
    let data = match cfg.data.kind {
        DataKind::Synthetic => {
            let split = if cfg.eval.split == SplitFilter::Base { SynthSplit::Train } else { SynthSplit::Eval };
            synth_split(cfg, cfg.seed.wrapping_mul(2) + 1, cfg.data.eval_images, split)?
        }
        DataKind::Coco => {
            let ann = load_coco_annotations(
                cfg.data.eval_annotations.as_ref().expect("validated"),
                vocab,
                SplitMode::EvalAll,
                false,
            )?;
            ann.load_images(cfg.data.image_root.as_ref().expect("validated"), cfg.model.image_size)?
        }
    };
    let keep = |s: &ImageSample| ImageSample {
        image_id: s.image_id,
        image: s.image.clone(),
        annotations: s
            .annotations
            .iter()
            .filter(|a| vocab.split_of(&a.category).is_some_and(|sp| cfg.eval.split.accepts(sp)))
            .cloned()
            .collect(),
    };
    Ok(Dataset::new(data.samples().iter().map(keep).collect()))
}

pub fn cmd_embed(cfg: &RunConfig, split: SplitFilter, out: &Path) -> CliResult<EmbeddingMatrix> {
    let vocab = vocabulary(cfg)?;
    let (text, _) = encoders(cfg)?;
    let emb = ensemble_prompt_embeddings(&vocab, text.as_ref(), split)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    emb.save(out)?;
    Ok(emb)
}

pub fn cmd_train(cfg: &RunConfig) -> CliResult<PathBuf> {
    let vocab = vocabulary(cfg)?;
    let (text, image) = encoders(cfg)?;
    let train_cfg = cfg.train_config()?;
    let train_emb = ensemble_prompt_embeddings(&vocab, text.as_ref(), SplitFilter::Base)?;
    let data = train_data(cfg, &vocab)?;
    if data.is_empty() {
        return Err(CliError::Config("training set is empty".into()));
    }
    let det = Detector::new(cfg.model_config(), train_cfg.eda.fuse_levels.clone(), cfg.seed)?;
    let mut state = TrainState::new(det, train_cfg.optimizer);
    let ctx = TrainContext { encoder: image.as_ref(), train_emb: &train_emb, cfg: &train_cfg };
    let mut log = BufWriter::new(File::create(cfg.output_dir.join(TRAIN_LOG))?);
    let lr = train_cfg.optimizer.lr;
    fit(&mut state, &data, &ctx, cfg.train.steps, cfg.train.batch_size, cfg.seed, cfg.train.augment, |step, b| {
        if step % 100 == 0 {
            info!("step {step}: total {:.4} (box {:.4}, cls {:.4}, g {:.4})", b.total, b.l_box, b.l_cls, b.l_g);
        }
        write_log_line(&mut log, step, b, lr)
    })?;
    log.flush()?;
    let path = cfg.output_dir.join(CHECKPOINT);
    state.detector.params.save(&path)?;
    Ok(path)
}

/// Load a checkpoint and check it against the configured architecture.
pub fn load_detector(cfg: &RunConfig, checkpoint: &Path) -> CliResult<Detector> {
    let params = ParamSet::load(checkpoint)?;
    Detector::from_params(cfg.model_config(), cfg.eda.resolve()?.fuse_levels, params)
        .map_err(|e| CliError::Config(format!("{} does not match the configuration: {e}", checkpoint.display())))
}

fn target_embeddings(cfg: &RunConfig, vocab: &CategoryVocabulary, text: &dyn edadet::TextEncoder) -> CliResult<EmbeddingMatrix> {
    Ok(ensemble_prompt_embeddings(vocab, text, cfg.eval.split)?)
}

pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path) -> CliResult<edadet::metrics::EvalReport> {
    let det = load_detector(cfg, checkpoint)?;
    let vocab = vocabulary(cfg)?;
    let (text, image) = encoders(cfg)?;
    let target = target_embeddings(cfg, &vocab, text.as_ref())?;
    let data = eval_data(cfg, &vocab)?;
    let (report, proposals) =
        evaluate_with_proposals(&det, image.as_ref(), &data, &vocab, &target, &cfg.train_config()?, cfg.eval.ar_n)?;
    let mut dump = BufWriter::new(File::create(cfg.output_dir.join("proposals.jsonl"))?);
    for (s, props) in data.samples().iter().zip(&proposals) {
        write_proposal_dump(&mut dump, s.image_id, props)?;
    }
    dump.flush()?;
    fs::write(cfg.output_dir.join("eval_report.json"), report.to_json())?;
    fs::write(cfg.output_dir.join("eval_report.txt"), report.to_table())?;
    Ok(report)
}

pub enum InferInput {
    Files(Vec<PathBuf>),
    /// Generated eval images.
    Synthetic(usize),
}

/// One line of `detections.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DetectionRecord {
    pub image_id: u64,
    /// `[x, y, w, h]` in pixels of the input image.
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    pub category: String,
    pub score: f64,
}

impl DetectionRecord {
    pub fn new(image_id: u64, d: &Detection, width: f64, height: f64) -> Self {
        let b = d.bbox;
        DetectionRecord {
            image_id,
            bbox: [b.x1 * width, b.y1 * height, (b.x2 - b.x1) * width, (b.y2 - b.y1) * height],
            category: d.category.clone(),
            score: d.score,
        }
    }
}

pub fn cmd_infer(cfg: &RunConfig, checkpoint: &Path, input: &InferInput, overlay: bool) -> CliResult<PathBuf> {
    let det = load_detector(cfg, checkpoint)?;
    let vocab = vocabulary(cfg)?;
    let (text, image_enc) = encoders(cfg)?;
    let target = target_embeddings(cfg, &vocab, text.as_ref())?;
    let train_cfg = cfg.train_config()?;
    let side = cfg.model.image_size;
    // (image id, image, original width, original height, stem)
    let items: Vec<(u64, Image, f64, f64, String)> = match input {
        InferInput::Files(paths) => paths
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let (w, h) = image::image_dimensions(p).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))?;
                let img = Image::load_square(p, side)?;
                let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| i.to_string());
                Ok((i as u64, img, w as f64, h as f64, stem))
            })
            .collect::<CliResult<_>>()?,
        InferInput::Synthetic(n) => {
            let split = if cfg.eval.split == SplitFilter::Base { SynthSplit::Train } else { SynthSplit::Eval };
            synth_split(cfg, cfg.seed.wrapping_mul(2) + 1, *n, split)?
                .samples()
                .iter()
                .map(|s| (s.image_id, s.image.clone(), side as f64, side as f64, format!("synthetic_{}", s.image_id)))
                .collect()
        }
    };
    let path = cfg.output_dir.join("detections.jsonl");
    let mut out = BufWriter::new(File::create(&path)?);
    for (id, img, w, h, stem) in &items {
        let dets = infer(img, &det, image_enc.as_ref(), &target, &train_cfg)?.detections;
        for d in &dets {
            serde_json::to_writer(&mut out, &DetectionRecord::new(*id, d, *w, *h)).map_err(edadet::Error::from)?;
            out.write_all(b"\n")?;
        }
        if overlay {
            let boxes: Vec<_> = dets.iter().map(|d| (d.bbox, d.label)).collect();
            save_rgb(&draw_boxes(img, &boxes), cfg.output_dir.join(format!("{stem}_detections.png")))?;
        }
    }
    out.flush()?;
    Ok(path)
}

fn file_safe(name: &str) -> String {
    name.chars().map(|c| if c.is_ascii_alphanumeric() { c } else { '_' }).collect()
}

/// Writes one heatmap per requested category, `labels.png` and `overlay.png`
/// under `<output_dir>/visualize`. Returns the written paths.
pub fn cmd_visualize(cfg: &RunConfig, checkpoint: &Path, image: &Path, categories: &[String]) -> CliResult<Vec<PathBuf>> {
    let det = load_detector(cfg, checkpoint)?;
    let vocab = vocabulary(cfg)?;
    let (text, image_enc) = encoders(cfg)?;
    let target = target_embeddings(cfg, &vocab, text.as_ref())?;
    let train_cfg = cfg.train_config()?;
    let channels: Vec<usize> = if categories.is_empty() {
        (0..target.len()).collect()
    } else {
        categories
            .iter()
            .map(|c| target.position(c).ok_or_else(|| CliError::Config(format!("unknown category `{c}`"))))
            .collect::<CliResult<_>>()?
    };
    let img = Image::load_square(image, cfg.model.image_size)?;
    let features = det.run(&img)?.features;
    let map = detector_dense_probs(&features, &target, train_cfg.eda.tau)?;
    let dir = cfg.output_dir.join("visualize");
    fs::create_dir_all(&dir)?;
    let (h, w, scale) = (map.height(), map.width(), cfg.visualize.scale);
    let mut written = Vec::new();
    for c in channels {
        let p = dir.join(format!("heatmap_{}.png", file_safe(&target.names()[c])));
        save_heatmap(&p, &map.channel(c), w, h, scale)?;
        written.push(p);
    }
    let p = dir.join("labels.png");
    save_label_map(&p, &map.argmax(), w, h, scale)?;
    written.push(p);
    let dets = infer(&img, &det, image_enc.as_ref(), &target, &train_cfg)?.detections;
    let boxes: Vec<_> = dets.iter().map(|d| (d.bbox, d.label)).collect();
    let p = dir.join("overlay.png");
    save_rgb(&draw_boxes(&img, &boxes), &p)?;
    written.push(p);
    Ok(written)
}

/// k-means over the per-location features; writes `<output_dir>/clusters.png`.
pub fn cmd_cluster(cfg: &RunConfig, checkpoint: &Path, image: &Path, k: usize) -> CliResult<PathBuf> {
    let det = load_detector(cfg, checkpoint)?;
    let img = Image::load_square(image, cfg.model.image_size)?;
    let features = det.run(&img)?.features;
    let km = KMeansConfig { k, max_iters: cfg.cluster.max_iters, restarts: cfg.cluster.restarts, seed: cfg.seed };
    let result = kmeans(features.values(), &km)?;
    let p = cfg.output_dir.join("clusters.png");
    save_label_map(&p, &result.labels, features.width(), features.height(), cfg.cluster.scale)?;
    Ok(p)
}
