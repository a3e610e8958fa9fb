use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use ndarray::{Array2, Array4};
use neurodecode::attribution::{contribution_series, roi_attention_map};
use neurodecode::metrics::{ssim, two_way_accuracy};
use neurodecode::sampler::initial_noise;
use neurodecode::synth::random_stimuli;
use neurodecode::trace::AttentionTrace;
use neurodecode_bench::{desk_model, synthetic_samples};

fn tokenizer(c: &mut Criterion) {
    let (atlas, samples) = synthetic_samples(16);
    let model = desk_model(&atlas);
    c.bench_function("tokenize batch of 16", |b| b.iter(|| model.encode(&samples).unwrap()));
}

fn denoiser(c: &mut Criterion) {
    let (atlas, samples) = synthetic_samples(4);
    let model = desk_model(&atlas);
    let tokens = model.encode(&samples).unwrap();
    let x: Array4<f32> = ndarray::stack(
        ndarray::Axis(0),
        &(0..4).map(|i| initial_noise(i, 32)).collect::<Vec<_>>().iter().map(|a| a.view()).collect::<Vec<_>>(),
    )
    .unwrap();
    let t = [999, 700, 400, 100];
    let mut group = c.benchmark_group("denoiser batch of 4");
    group.sample_size(20);
    group.bench_function("plain", |b| b.iter(|| model.predict_noise(&x, &t, &tokens, false).unwrap()));
    group.bench_function("capture", |b| b.iter(|| model.predict_noise(&x, &t, &tokens, true).unwrap()));
    group.finish();
}

fn random_trace(p: usize, steps: usize) -> AttentionTrace {
    let grids = vec![(32, 32), (16, 16), (8, 8), (16, 16), (32, 32)];
    let mut trace = AttentionTrace::new(p, 4, grids.clone()).unwrap();
    let mut state = 0x9e37_79b9_u64;
    let mut next = || {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        (state >> 40) as f32 / (1u64 << 24) as f32 + 1e-3
    };
    for s in 0..steps {
        for (l, &(h, w)) in grids.iter().enumerate() {
            for head in 0..4 {
                let mut a = Array2::from_shape_fn((h * w, p), |_| next());
                for mut row in a.rows_mut() {
                    let sum: f32 = row.sum();
                    row /= sum;
                }
                trace.insert(999 - 20 * s, l, head, a).unwrap();
            }
        }
    }
    trace
}

fn attribution(c: &mut Criterion) {
    let trace = random_trace(40, 5);
    let roi: Vec<usize> = (0..8).collect();
    c.bench_function("contribution series p=40, 5 steps", |b| b.iter(|| contribution_series(&trace).unwrap()));
    c.bench_function("roi attention map 32x32", |b| b.iter(|| roi_attention_map(&trace, &roi, 999, (32, 32)).unwrap()));
}

fn metrics(c: &mut Criterion) {
    let images: Vec<_> = random_stimuli(32, 5, 0).iter().map(|s| s.scene.render()).collect();
    c.bench_function("ssim 32x32", |b| b.iter(|| ssim(&images[0], &images[1]).unwrap()));
    let features: Vec<Vec<f64>> = images.iter().map(|i| i.iter().map(|&v| v as f64).collect()).collect();
    c.bench_function("two-way accuracy n=32", |b| {
        b.iter_batched(|| features.clone(), |f| two_way_accuracy(&f, &features).unwrap(), BatchSize::SmallInput)
    });
}

criterion_group!(benches, tokenizer, denoiser, attribution, metrics);
criterion_main!(benches);
