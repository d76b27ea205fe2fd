//! Sequential against rayon execution of the per-clip batch loops.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mmforge_core::data::{AttackSpec, Frame, Label, VideoClip};
use mmforge_core::eval::score_clips;
use mmforge_core::model::{Detector, ModelConfig};
use mmforge_core::train::{end_to_end_gradients, FreezePolicy};
use mmforge_core::ExecMode;

fn clips(n: usize, side: usize) -> Vec<VideoClip> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    (0..n)
        .map(|i| {
            let frames = (0..4)
                .map(|_| {
                    Frame::new(
                        3,
                        side,
                        side,
                        (0..3 * side * side).map(|_| rng.random::<f32>()).collect(),
                    )
                    .unwrap()
                })
                .collect();
            let label = if i % 2 == 0 { Label::Real } else { Label::Fake };
            VideoClip::new(frames, label, "bench", format!("c{i}")).unwrap()
        })
        .collect()
}

fn batch_exec(c: &mut Criterion) {
    let (mut detector, mut store) = Detector::new(&ModelConfig::default(), 0).unwrap();
    detector.apply_lora(&mut store, 0).unwrap();
    let scored = clips(12, 40);
    let windows = clips(6, 32);
    let modes = [("sequential", ExecMode::Sequential), ("parallel", ExecMode::Parallel)];

    let mut group = c.benchmark_group("score_clips");
    group.sample_size(10);
    for (name, mode) in modes {
        group.bench_with_input(BenchmarkId::from_parameter(name), &mode, |b, &mode| {
            b.iter(|| score_clips(&detector, &store, &scored, 0, &AttackSpec::None, mode).unwrap())
        });
    }
    group.finish();

    let mut group = c.benchmark_group("end_to_end_batch");
    group.sample_size(10);
    let trainable = FreezePolicy::EndToEnd.trainable();
    for (name, mode) in modes {
        group.bench_with_input(BenchmarkId::from_parameter(name), &mode, |b, &mode| {
            b.iter(|| end_to_end_gradients(&detector, &store, &windows, trainable, 1.0, 0.5, mode).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, batch_exec);
criterion_main!(benches);
