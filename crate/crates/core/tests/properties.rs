//! Property tests over the public API.

mod common;

use edadet::boxes::BoxXyxy;
use edadet::datasets::{
    batch_iterator, box_from_pixels, box_to_pixels, default_synth_categories, synth_shapes, synth_vocabulary,
    BoxAnnotation, SynthConfig, SynthSplit,
};
use edadet::dense::{clip_dense_probs, detector_dense_probs, fuse_score_maps};
use edadet::encoders::{build_encoders, clip_similarity, EncoderConfig, StubImageEncoder};
use edadet::metrics::{ap50_generalized, average_recall_topn, novel_base_similarity_ranking};
use edadet::model::{Detector, ModelConfig};
use edadet::objectives::{global_alignment_to, Detection, LossBundle, LossWeights};
use edadet::proposals::{bipartite_match, box_loss, BoxWeights};
use edadet::tensor::cosine;
use edadet::vocab::ensemble_prompt_embeddings;
use edadet::{
    BoxCxcywh, DecoderConfig, DenseScoreMap, EmbeddingMatrix, Image, Mat, PatchGrid, Proposal, SplitFilter,
};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_image(seed: u64, side: usize) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Image::from_vec(side, side, (0..side * side * 3).map(|_| rng.random::<f32>()).collect()).unwrap()
}

fn assert_unit_rows(e: &EmbeddingMatrix) {
    for i in 0..e.len() {
        let n: f64 = e.row_f64(i).iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() <= 1e-5, "row {i} norm {n}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn ensemble_ignores_template_order(seed in 0u64..1000) {
        let (text, _) = build_encoders(&EncoderConfig::default()).unwrap();
        let mut templates: Vec<String> = edadet::vocab::default_templates().into_iter().take(12).collect();
        let vocab = synth_vocabulary(templates.clone()).unwrap();
        let a = ensemble_prompt_embeddings(&vocab, text.as_ref(), SplitFilter::All).unwrap();
        templates.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let b = ensemble_prompt_embeddings(&vocab.with_templates(templates).unwrap(), text.as_ref(), SplitFilter::All)
            .unwrap();
        prop_assert_eq!(a.names(), b.names());
        for i in 0..a.len() {
            for (x, y) in a.row(i).iter().zip(b.row(i)) {
                prop_assert!((x - y).abs() <= 1e-6);
            }
        }
        assert_unit_rows(&a);
        assert_unit_rows(&b);
    }

    #[test]
    fn clip_similarity_is_bounded(seed in 0u64..1000) {
        let enc = StubImageEncoder::new(7, 32).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t: Vec<f64> = (0..32).map(|_| rng.random_range(-1.0..1.0)).collect();
        let s = clip_similarity(&enc, &random_image(seed, 32), &t).unwrap();
        prop_assert!((-1.0..=1.0).contains(&s));
        let u: Vec<f64> = (0..32).map(|_| rng.random_range(-1.0..1.0)).collect();
        prop_assert_eq!(cosine(&t, &u), cosine(&u, &t));
    }

    #[test]
    fn frozen_dense_probs_are_distributions(seed in 0u64..1000, tau in 0.01..1.0f64) {
        let (text, image) = build_encoders(&EncoderConfig::default()).unwrap();
        let vocab = synth_vocabulary(vec!["a {}.".into()]).unwrap();
        let emb = ensemble_prompt_embeddings(&vocab, text.as_ref(), SplitFilter::All).unwrap();
        let map = clip_dense_probs(image.as_ref(), &random_image(seed, 48), &emb, tau).unwrap();
        for r in 0..map.probs().rows() {
            let row = map.probs().row(r);
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-5);
            prop_assert!(row.iter().all(|&p| p > 0.0 && p <= 1.0));
        }
    }

    #[test]
    fn proposals_stay_in_bounds(seed in 0u64..1000) {
        let cfg = ModelConfig {
            image_size: 32,
            patch_stride: 8,
            backbone_dim: 8,
            feature_dim: 6,
            decoder: DecoderConfig { num_queries: 7, num_layers: 2, split_layer: 1, hidden_dim: 8, num_heads: 2, ffn_dim: 16 },
        };
        let det = Detector::new(cfg, vec![2], seed).unwrap();
        let out = det.run(&random_image(seed, 32)).unwrap();
        prop_assert_eq!(out.proposals.len(), 7);
        for p in &out.proposals {
            let b = p.bbox;
            prop_assert!(b.w > 0.0 && b.w <= 1.0 && b.h > 0.0 && b.h <= 1.0);
            prop_assert!((0.0..=1.0).contains(&b.cx) && (0.0..=1.0).contains(&b.cy));
            prop_assert!((0.0..=1.0).contains(&p.objectness));
        }
    }

    #[test]
    fn no_novel_annotation_reaches_a_batch(seed in 0u64..1000, bs in 1usize..7, augment in any::<bool>()) {
        let (base, novel) = default_synth_categories();
        let data = synth_shapes(seed, 20, &SynthConfig::default(), &base, &novel, SynthSplit::Train).unwrap();
        let mut it = batch_iterator(&data, bs, seed, augment).unwrap();
        for _ in 0..3 {
            for batch in it.next_epoch() {
                for s in &batch {
                    prop_assert!(s.annotations.iter().all(|a| base.contains(&a.category)));
                }
            }
        }
    }

    #[test]
    fn synthetic_object_counts_are_seed_stable(seed in 0u64..1000) {
        let (base, novel) = default_synth_categories();
        let count = || -> Vec<usize> {
            synth_shapes(seed, 30, &SynthConfig::default(), &base, &novel, SynthSplit::Eval)
                .unwrap()
                .samples()
                .iter()
                .map(|s| s.annotations.len())
                .collect()
        };
        prop_assert_eq!(count(), count());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn restricted_splits_partition_the_targets(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vocab = synth_vocabulary(vec!["{}".into()]).unwrap();
        let names: Vec<String> = vocab.names(SplitFilter::All).iter().map(|s| s.to_string()).collect();
        let rows = names.iter().map(|_| (0..5).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let all = EmbeddingMatrix::from_unnormalized(names.clone(), rows).unwrap();
        let base = all.restrict(&vocab, SplitFilter::Base).unwrap();
        let novel = all.restrict(&vocab, SplitFilter::Novel).unwrap();
        prop_assert!(base.names().iter().all(|n| !novel.names().contains(n)));
        let mut union: Vec<String> = base.names().iter().chain(novel.names()).cloned().collect();
        union.sort();
        let mut expected = names;
        expected.sort();
        prop_assert_eq!(union, expected);
        for e in [&all, &base, &novel] {
            assert_unit_rows(e);
        }
    }

    #[test]
    fn detector_dense_probs_are_distributions(seed in 0u64..10_000, tau in 0.005..2.0f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, w, c) = (rng.random_range(1..=6), rng.random_range(1..=6), rng.random_range(1..=5));
        let feats = PatchGrid::new(h, w, 8, Mat::randn(h * w, 4, 1.0, &mut rng)).unwrap();
        let names = (0..c).map(|i| format!("c{i}")).collect();
        let rows = (0..c).map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let emb = EmbeddingMatrix::from_unnormalized(names, rows).unwrap();
        let map = detector_dense_probs(&feats, &emb, tau).unwrap();
        for r in 0..h * w {
            let row = map.probs().row(r);
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-5);
            // The winner can round to exactly 1.0 once the logit gap passes ~37.
            prop_assert!(row.iter().all(|&p| p > 0.0 && p <= 1.0));
        }
    }

    #[test]
    fn agreeing_argmaxes_survive_fusion(seed in 0u64..10_000, lam in 0.0..=1.0f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, w, c) = (rng.random_range(1..=5), rng.random_range(1..=5), rng.random_range(2..=5));
        let names: Vec<String> = (0..c).map(|i| format!("c{i}")).collect();
        let det = common::random_probs(&mut rng, h * w, c);
        let mut clip = common::random_probs(&mut rng, h * w, c);
        for r in 0..h * w {
            let a = edadet::dense::argmax(det.row(r));
            let b = edadet::dense::argmax(clip.row(r));
            clip.row_mut(r).swap(a, b);
        }
        let s_det = DenseScoreMap::new(h, w, 8, det, names.clone()).unwrap();
        let s_clip = DenseScoreMap::new(h, w, 8, clip, names).unwrap();
        prop_assert_eq!(fuse_score_maps(&s_det, &s_clip, lam).unwrap().argmax(), s_det.argmax());
    }

    #[test]
    fn box_loss_vanishes_only_when_perfect(seed in 0u64..10_000, nq in 1usize..6, nt in 0usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let nt = nt.min(nq);
        let targets: Vec<BoxXyxy> = (0..nt).map(|_| common::random_box(&mut rng)).collect();
        let w = BoxWeights::default();
        // Perfect: the first nt queries sit on the targets with objectness 1.
        let mut props: Vec<Proposal> = (0..nq)
            .map(|q| match targets.get(q) {
                Some(t) => Proposal { bbox: t.to_cxcywh(), objectness: 1.0 },
                None => Proposal { bbox: common::random_box(&mut rng).to_cxcywh(), objectness: 0.0 },
            })
            .collect();
        let m = bipartite_match(&props, &targets, &w);
        prop_assert!(box_loss(&props, &targets, &m, &w).total <= 1e-12);

        let q = rng.random_range(0..nq);
        if q < nt && rng.random::<bool>() {
            let b = props[q].bbox;
            props[q].bbox = BoxCxcywh { cx: (b.cx + 0.05).min(0.99), cy: b.cy * 0.9, ..b };
        } else {
            props[q].objectness = if q < nt { 0.9 } else { 0.1 };
        }
        let m = bipartite_match(&props, &targets, &w);
        prop_assert!(box_loss(&props, &targets, &m, &w).total > 1e-9);
    }

    #[test]
    fn loss_bundle_is_weighted_sum(
        b in 0.0..10.0f64, c in 0.0..10.0f64, g in 0.0..10.0f64,
        wb in 0.0..5.0f64, wc in 0.0..5.0f64, wg in 0.0..5.0f64,
    ) {
        let w = LossWeights { box_: wb, cls: wc, g: wg };
        let bundle = LossBundle::new(b, c, g, &w, Default::default());
        prop_assert!((bundle.total - (wb * b + wc * c + wg * g)).abs() <= 1e-6);
        prop_assert!(bundle.is_finite());
    }

    #[test]
    fn global_alignment_ignores_location_order(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(1..=20);
        let feats = Mat::randn(n, 5, 1.0, &mut rng);
        let cls: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let mut shuffled = Mat::zeros(n, 5);
        for (dst, &src) in order.iter().enumerate() {
            shuffled.row_mut(dst).copy_from_slice(feats.row(src));
        }
        let a = global_alignment_to(&feats, &cls).unwrap();
        let b = global_alignment_to(&shuffled, &cls).unwrap();
        prop_assert!(a >= 0.0);
        prop_assert!((a - b).abs() <= 1e-12);
    }

    #[test]
    fn pixel_boxes_round_trip(seed in 0u64..10_000, w in 8usize..2000, h in 8usize..2000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x1 = rng.random_range(0.0..(w - 2) as f64);
        let y1 = rng.random_range(0.0..(h - 2) as f64);
        let px = [x1, y1, rng.random_range(1.0..(w as f64 - x1)), rng.random_range(1.0..(h as f64 - y1))];
        let back = box_to_pixels(&box_from_pixels(px, w, h), w, h);
        for (a, b) in px.iter().zip(back) {
            prop_assert!((a - b).abs() <= 0.5);
        }
    }
}

// ---------------------------------------------------------------------------
// Metric properties
// ---------------------------------------------------------------------------

fn metric_vocab() -> edadet::CategoryVocabulary {
    synth_vocabulary(vec!["{}".into()]).unwrap()
}

/// Random ground truth plus noisy detections around it.
fn random_eval(seed: u64) -> (Vec<Vec<Detection>>, Vec<Vec<BoxAnnotation>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (base, novel) = default_synth_categories();
    let cats: Vec<String> = base.into_iter().chain(novel).take(4).collect();
    let mut dets = Vec::new();
    let mut gts = Vec::new();
    for _ in 0..rng.random_range(1..5) {
        let gt: Vec<BoxAnnotation> = (0..rng.random_range(0..4))
            .map(|_| BoxAnnotation { category: cats[rng.random_range(0..4)].clone(), bbox: common::random_box(&mut rng) })
            .collect();
        let mut d = Vec::new();
        for g in &gt {
            if rng.random::<f64>() < 0.7 {
                let j = 0.05 * rng.random::<f64>();
                let b = BoxXyxy::new(g.bbox.x1, g.bbox.y1, (g.bbox.x2 + j).min(1.0), g.bbox.y2);
                d.push(Detection { bbox: b, label: 0, category: g.category.clone(), score: rng.random(), objectness: 1.0 });
            }
        }
        for _ in 0..rng.random_range(0..3) {
            d.push(Detection {
                bbox: common::random_box(&mut rng),
                label: 0,
                category: cats[rng.random_range(0..4)].clone(),
                score: rng.random(),
                objectness: 1.0,
            });
        }
        dets.push(d);
        gts.push(gt);
    }
    (dets, gts)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn ap_is_rank_based(seed in 0u64..100_000) {
        let (dets, gts) = random_eval(seed);
        let vocab = metric_vocab();
        let a = ap50_generalized(&dets, &gts, &vocab).unwrap();
        let squashed: Vec<Vec<Detection>> = dets
            .iter()
            .map(|d| d.iter().map(|x| Detection { score: (3.0 * x.score).exp() - 7.0, ..x.clone() }).collect())
            .collect();
        let b = ap50_generalized(&squashed, &gts, &vocab).unwrap();
        prop_assert_eq!(a.ap50_all, b.ap50_all);
        prop_assert_eq!(a.per_category, b.per_category);
    }

    #[test]
    fn trailing_duplicates_leave_ap_unchanged(seed in 0u64..100_000) {
        let (dets, gts) = random_eval(seed);
        let vocab = metric_vocab();
        let a = ap50_generalized(&dets, &gts, &vocab).unwrap();
        // Originals scored in [0.5, 1.5], duplicates strictly below all of them.
        let lifted: Vec<Vec<Detection>> = dets
            .iter()
            .map(|d| d.iter().map(|x| Detection { score: 0.5 + x.score, ..x.clone() }).collect())
            .collect();
        let doubled: Vec<Vec<Detection>> = lifted
            .iter()
            .map(|d| d.iter().cloned().chain(d.iter().map(|x| Detection { score: x.score - 1.0 - 1e-9, ..x.clone() })).collect())
            .collect();
        let b = ap50_generalized(&doubled, &gts, &vocab).unwrap();
        prop_assert_eq!(a.ap50_all, b.ap50_all);
    }

    #[test]
    fn ar_is_monotone_in_n(seed in 0u64..100_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_img = rng.random_range(1..4);
        let gts: Vec<Vec<BoxXyxy>> =
            (0..n_img).map(|_| (0..rng.random_range(1..4)).map(|_| common::random_box(&mut rng)).collect()).collect();
        let props: Vec<Vec<Proposal>> =
            (0..n_img).map(|_| (0..rng.random_range(0..12)).map(|_| common::random_proposal(&mut rng)).collect()).collect();
        let mut prev = 0.0;
        for n in 1..=13 {
            let ar = average_recall_topn(&props, &gts, n, 64).unwrap().ar;
            prop_assert!(ar >= prev);
            prev = ar;
        }
    }
}

#[test]
fn shared_color_ranks_above_unseen_color() {
    let (_, image) = build_encoders(&EncoderConfig::default()).unwrap();
    let (text, _) = build_encoders(&EncoderConfig::default()).unwrap();
    let base_names = ["red circle", "blue square", "green square"];
    let vocab = synth_vocabulary(vec!["a photo of a {}.".into()]).unwrap();
    let base = ensemble_prompt_embeddings(&vocab, text.as_ref(), SplitFilter::All)
        .unwrap()
        .select(&base_names)
        .unwrap();
    let novel = vec!["red triangle".to_string(), "yellow triangle".to_string()];
    let cfg = SynthConfig { min_objects: 1, max_objects: 1, ..SynthConfig::default() };
    let data = synth_shapes(9, 60, &cfg, &[], &novel, SynthSplit::Eval).unwrap();
    let ranking = novel_base_similarity_ranking(&data, image.as_ref(), &base, &novel, 50, 0).unwrap();
    assert_eq!(ranking.len(), 2);
    assert_eq!(ranking[0].0, "red triangle", "{ranking:?}");
    assert!(ranking[0].1 > ranking[1].1);

    let empty = novel_base_similarity_ranking(&data, image.as_ref(), &base, &[], 50, 0).unwrap();
    assert!(empty.is_empty());
}
