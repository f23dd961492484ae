//! End-to-end helpers shared by the command line and the experiment suites:
//! evaluation over a dataset and the synthetic-shapes recipe.

use serde::{Deserialize, Serialize};

use crate::datasets::{default_synth_categories, synth_shapes, synth_vocabulary, Dataset, SynthConfig, SynthSplit};
use crate::encoders::{FrozenImageEncoder, TextEncoder};
use crate::error::Result;
use crate::metrics::{ap50_generalized, average_recall_topn, EvalReport};
use crate::model::{Detector, ModelConfig};
use crate::objectives::{fit, infer, LossBundle, TrainConfig, TrainContext, TrainState};
use crate::proposals::{DecoderConfig, Proposal};
use crate::vocab::{default_templates, ensemble_prompt_embeddings, CategoryVocabulary, EmbeddingMatrix, SplitFilter};

/// Run inference over `data` and score it: AP50 against `target_emb`'s
/// categories and class-agnostic AR@`ar_n` of the raw proposals.
pub fn evaluate(
    det: &Detector,
    encoder: &dyn FrozenImageEncoder,
    data: &Dataset,
    vocab: &CategoryVocabulary,
    target_emb: &EmbeddingMatrix,
    cfg: &TrainConfig,
    ar_n: usize,
) -> Result<EvalReport> {
    Ok(evaluate_with_proposals(det, encoder, data, vocab, target_emb, cfg, ar_n)?.0)
}

/// [`evaluate`], also returning every image's proposals in query order.
pub fn evaluate_with_proposals(
    det: &Detector,
    encoder: &dyn FrozenImageEncoder,
    data: &Dataset,
    vocab: &CategoryVocabulary,
    target_emb: &EmbeddingMatrix,
    cfg: &TrainConfig,
    ar_n: usize,
) -> Result<(EvalReport, Vec<Vec<Proposal>>)> {
    let mut detections = Vec::with_capacity(data.len());
    let mut proposals = Vec::with_capacity(data.len());
    for s in data.samples() {
        let out = infer(&s.image, det, encoder, target_emb, cfg)?;
        detections.push(out.detections);
        proposals.push(out.proposals);
    }
    let gts: Vec<_> = data.samples().iter().map(|s| s.annotations.clone()).collect();
    let mut report = ap50_generalized(&detections, &gts, vocab)?;
    let boxes: Vec<Vec<_>> = gts.iter().map(|g| g.iter().map(|a| a.bbox).collect()).collect();
    report.ar = Some(average_recall_topn(&proposals, &boxes, ar_n, det.config.image_size)?);
    Ok((report, proposals))
}

/// The synthetic-shapes recipe: sizes, schedule and model settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyRecipe {
    pub synth: SynthConfig,
    pub train_images: usize,
    pub eval_images: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub augment: bool,
    pub seed: u64,
    pub ar_n: usize,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for ToyRecipe {
    fn default() -> Self {
        let mut train = TrainConfig::default();
        train.eda.roi_size = (8, 8);
        train.eda.k = 48;
        train.eda.tau = 0.03;
        train.optimizer.lr = 1e-3;
        ToyRecipe {
            synth: SynthConfig::default(),
            train_images: 1024,
            eval_images: 96,
            steps: 2000,
            batch_size: 8,
            augment: true,
            seed: 0,
            ar_n: 100,
            model: ModelConfig {
                image_size: 64,
                decoder: DecoderConfig { num_queries: 20, num_layers: 3, split_layer: 1, hidden_dim: 64, num_heads: 4, ffn_dim: 128 },
                ..ModelConfig::default()
            },
            train,
        }
    }
}

pub struct ToyData {
    pub vocab: CategoryVocabulary,
    pub train: Dataset,
    pub eval: Dataset,
    /// Base categories only.
    pub train_emb: EmbeddingMatrix,
    /// Base and novel categories.
    pub target_emb: EmbeddingMatrix,
}

/// Datasets and text embeddings for the recipe. Train and eval images come
/// from disjoint seed streams.
pub fn toy_data(recipe: &ToyRecipe, text: &dyn TextEncoder) -> Result<ToyData> {
    let (base, novel) = default_synth_categories();
    let mut synth = recipe.synth.clone();
    synth.image_size = recipe.model.image_size;
    let train = synth_shapes(recipe.seed.wrapping_mul(2), recipe.train_images, &synth, &base, &novel, SynthSplit::Train)?;
    let eval = synth_shapes(recipe.seed.wrapping_mul(2) + 1, recipe.eval_images, &synth, &base, &novel, SynthSplit::Eval)?;
    let vocab = synth_vocabulary(default_templates())?;
    let train_emb = ensemble_prompt_embeddings(&vocab, text, SplitFilter::Base)?;
    let target_emb = ensemble_prompt_embeddings(&vocab, text, SplitFilter::All)?;
    Ok(ToyData { vocab, train, eval, train_emb, target_emb })
}

pub struct ToyOutcome {
    pub detector: Detector,
    pub losses: Vec<LossBundle>,
    pub report: EvalReport,
}

/// Train on the base-only split and evaluate on base plus novel.
pub fn run_toy(recipe: &ToyRecipe, text: &dyn TextEncoder, image: &dyn FrozenImageEncoder) -> Result<ToyOutcome> {
    let data = toy_data(recipe, text)?;
    let fuse = recipe.train.eda.fuse_levels.clone();
    let mut state = TrainState::new(Detector::new(recipe.model.clone(), fuse, recipe.seed)?, recipe.train.optimizer);
    let ctx = TrainContext { encoder: image, train_emb: &data.train_emb, cfg: &recipe.train };
    let mut losses = Vec::with_capacity(recipe.steps);
    fit(&mut state, &data.train, &ctx, recipe.steps, recipe.batch_size, recipe.seed, recipe.augment, |_, b| {
        losses.push(*b);
        Ok(())
    })?;
    let report = evaluate(&state.detector, image, &data.eval, &data.vocab, &data.target_emb, &recipe.train, recipe.ar_n)?;
    Ok(ToyOutcome { detector: state.detector, losses, report })
}
