use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use upw::model::{grad_check, Coverage, ModelConfig, Objective, UnifiedModel, UnifiedSequence};
use upw::parallel::Execution;
use upw::tokenizer::{fold_image_with, FoldingFactor, RgbImage};
use upw::train::{batch_gradients, image_sequence};

const MODES: [(&str, Execution); 2] = [
    ("sequential", Execution::Sequential),
    ("parallel", Execution::Parallel),
];

fn random_image(rng: &mut ChaCha8Rng, w: usize, h: usize) -> RgbImage {
    RgbImage::new(w, h, (0..w * h * 3).map(|_| rng.gen()).collect()).unwrap()
}

fn fold(c: &mut Criterion) {
    let img = random_image(&mut ChaCha8Rng::seed_from_u64(0), 512, 512);
    let f = FoldingFactor::new(16).unwrap();
    let mut g = c.benchmark_group("fold_image_512");
    for (name, exec) in MODES {
        g.bench_function(name, |b| b.iter(|| fold_image_with(&img, f, exec).unwrap()));
    }
    g.finish();
}

fn batch(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let cfg = ModelConfig::tiny();
    let model = UnifiedModel::new(cfg, &mut rng).unwrap();
    let seqs: Vec<UnifiedSequence> = (0..8)
        .map(|_| image_sequence(&random_image(&mut rng, 8, 8), &cfg, model.vocab()).unwrap())
        .collect();
    let refs: Vec<&UnifiedSequence> = seqs.iter().collect();
    let mut g = c.benchmark_group("batch_gradients");
    g.sample_size(20);
    for (name, exec) in MODES {
        g.bench_with_input(BenchmarkId::new(name, refs.len()), &refs, |b, r| {
            b.iter(|| batch_gradients(&model, r, Objective::Image, exec).unwrap())
        });
    }
    g.finish();
}

fn gradcheck(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let cfg = ModelConfig::tiny();
    let model = UnifiedModel::new(cfg, &mut rng).unwrap();
    let seq = image_sequence(&random_image(&mut rng, 4, 4), &cfg, model.vocab()).unwrap();
    let mut g = c.benchmark_group("grad_check_strided_2");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(name, |b| {
            b.iter(|| {
                grad_check(model.params(), 1e-4, Coverage::Strided(2), exec, |t| {
                    let (l, n) = model.sequence_loss(t, &seq, Objective::Image)?;
                    t.scale(l, 1.0 / n as f64)
                })
                .unwrap()
            })
        });
    }
    g.finish();
}

criterion_group!(benches, fold, batch, gradcheck);
criterion_main!(benches);
