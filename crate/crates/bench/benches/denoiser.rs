use criterion::{criterion_group, criterion_main, Criterion};

use lscd::diffusion::{draw_step, score_matching_loss, TrainConfig};
use lscd::autodiff::Graph;
use lscd::rng::seeded;
use lscd_bench::{desk_model, sines_batch};

fn training_step(c: &mut Criterion) {
    let batch = sines_batch(16, 100, 0.5, 2);
    let model = desk_model(&batch, 16);
    let draw = draw_step(&batch, &TrainConfig::default(), &model.schedule, &mut seeded(3)).unwrap();
    let mut group = c.benchmark_group("denoiser");
    group.sample_size(10);
    group.bench_function("loss", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let loss = score_matching_loss(&model, &mut g, &draw).unwrap();
            g.value(loss).item()
        })
    });
    group.bench_function("loss_and_gradient", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let loss = score_matching_loss(&model, &mut g, &draw).unwrap();
            g.backward(loss).unwrap().param_grads(&model.store).len()
        })
    });
    group.finish();
}

criterion_group!(benches, training_step);
criterion_main!(benches);
