use criterion::{criterion_group, criterion_main, Criterion};
use edadet::datasets::batch_iterator;
use edadet::encoders::{build_encoders, EncoderConfig};
use edadet::model::Detector;
use edadet::objectives::{infer, train_step, AlignmentMode, TrainContext, TrainState};
use edadet::pipeline::{toy_data, ToyRecipe};

fn bench_train_step(c: &mut Criterion) {
    let (text, image) = build_encoders(&EncoderConfig::default()).unwrap();
    let recipe = ToyRecipe { train_images: 16, eval_images: 2, ..ToyRecipe::default() };
    let data = toy_data(&recipe, text.as_ref()).unwrap();
    let batch = batch_iterator(&data.train, recipe.batch_size, 0, false).unwrap().next_epoch().remove(0);
    let mut g = c.benchmark_group("train_step");
    g.sample_size(10);
    for mode in [AlignmentMode::Eda, AlignmentMode::ObjectAlign] {
        let mut cfg = recipe.train.clone();
        cfg.mode = mode;
        let det = Detector::new(recipe.model.clone(), cfg.eda.fuse_levels.clone(), 0).unwrap();
        let mut state = TrainState::new(det, cfg.optimizer);
        let ctx = TrainContext { encoder: image.as_ref(), train_emb: &data.train_emb, cfg: &cfg };
        g.bench_function(format!("{mode:?}"), |b| b.iter(|| train_step(&batch, &mut state, &ctx).unwrap()));
    }
    g.finish();

    let det = Detector::new(recipe.model.clone(), recipe.train.eda.fuse_levels.clone(), 0).unwrap();
    let img = &data.eval.samples()[0].image;
    c.bench_function("infer", |b| {
        b.iter(|| infer(img, &det, image.as_ref(), &data.target_emb, &recipe.train).unwrap())
    });
}

criterion_group!(benches, bench_train_step);
criterion_main!(benches);
