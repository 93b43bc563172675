//! Criterion benchmarks for the hot kernels and the end-to-end pipelines.

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use pnerv_core::kfc::{kfc_forward, KFcParams};
use pnerv_core::model::{PNeRVConfig, PNeRVModel};
use pnerv_core::ops::{self, ConvParams};
use pnerv_core::rng;
use pnerv_core::tape::Tape;
use pnerv_core::tensor::Tensor3;
use pnerv_core::trainer::{train, TrainConfig};
use pnerv_core::video::VideoClip;
use rand::Rng;

fn random_tensor(seed: u64, c: usize, h: usize, w: usize) -> Tensor3 {
    let mut r = rng::seeded(seed);
    Tensor3::from_vec(c, h, w, (0..c * h * w).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn bench_upscalers(c: &mut Criterion) {
    let mut group = c.benchmark_group("upscalers");

    // Shortcut-sized KFc: (2, 8, 16) -> (2, 64, 128).
    let mut r = rng::seeded(1);
    let params = KFcParams::init(&mut r, 2, 8, 16, 64, 128);
    let x = random_tensor(2, 2, 8, 16);
    group.bench_function("kfc_8x16_to_64x128", |b| {
        b.iter(|| kfc_forward(std::hint::black_box(&x), &params).unwrap())
    });

    let mut conv = ConvParams::conv(32, 32, 3).unwrap();
    let draw = rng::kaiming_normal(&mut r, 32 * 9, conv.weight.len());
    conv.weight.data_mut().copy_from_slice(&draw);
    let feat = random_tensor(3, 32, 16, 32);
    group.bench_function("conv3x3_32ch_16x32", |b| {
        b.iter(|| ops::conv2d(std::hint::black_box(&feat), &conv, 1, 1).unwrap())
    });

    let shuffle_in = random_tensor(4, 64, 16, 32);
    group.bench_function("pixel_shuffle_r2", |b| {
        b.iter(|| ops::pixel_shuffle(std::hint::black_box(&shuffle_in), 2).unwrap())
    });

    group.bench_function("bilinear_r4_2ch", |b| {
        let x = random_tensor(5, 2, 8, 16);
        b.iter(|| ops::bilinear_upsample(std::hint::black_box(&x), 4).unwrap())
    });

    group.finish();
}

fn bench_pipelines(c: &mut Criterion) {
    let mut group = c.benchmark_group("pipelines");
    group.sample_size(20);

    let model = PNeRVModel::build(PNeRVConfig::desk_default()).unwrap();
    let clip = VideoClip::moving_gradient(7, 2, 64, 128);
    let embedding = model.encode(&clip, 1).unwrap();
    group.bench_function("decode_frame_desk_64x128", |b| {
        b.iter(|| model.decode_frame(std::hint::black_box(&embedding)).unwrap())
    });

    group.bench_function("train_step_tiny", |b| {
        let model = PNeRVModel::build(PNeRVConfig::tiny()).unwrap();
        let clip = VideoClip::moving_gradient(9, 1, 4, 8);
        b.iter(|| {
            let mut tape = Tape::new();
            let (loss, _, _) = model.training_loss(&mut tape, &clip, 1).unwrap();
            tape.backward(loss).unwrap();
            tape.scalar(loss).unwrap()
        })
    });

    group.bench_function("train_20_epochs_tiny", |b| {
        let clip = VideoClip::moving_gradient(11, 2, 4, 8);
        let cfg = TrainConfig { epochs: 20, ..TrainConfig::default() };
        b.iter_batched(
            || PNeRVModel::build(PNeRVConfig::tiny()).unwrap(),
            |mut model| train(&mut model, &clip, &cfg).unwrap(),
            BatchSize::SmallInput,
        )
    });

    group.finish();
}

criterion_group!(benches, bench_upscalers, bench_pipelines);
criterion_main!(benches);
