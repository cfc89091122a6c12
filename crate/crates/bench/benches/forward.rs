//! Benchmarks over the hot numeric paths at desk scale: the visual trunk
//! runs on d = 32 features over 7x7 maps upsampled to L = 16.

use criterion::{criterion_group, criterion_main, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;
use stvg_core::fusion::{FusionWeights, SentenceFeature, VisualFeatureMap};
use stvg_core::mixed::MixedConvWeights;
use stvg_core::optim::{fit_heatmap_demo, OptimizerConfig};
use stvg_core::pipeline::{run_forward, PipelineDims, PipelineWeights};
use stvg_core::spatial::{
    encode_gaussian_targets, focal_loss, giou_loss, BoundingBox, FocalConfig, SigmaMode,
};
use stvg_core::temporal::CandidateScheme;
use stvg_core::tensor::{
    conv2d_forward, conv3d_forward, conv_forward_naive, Activation, ConvKernel, Tensor,
};

fn conv_benches(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x2 = Tensor::<f32>::random_uniform(vec![32, 7, 7], -1.0, 1.0, &mut rng).unwrap();
    let k2 = ConvKernel::random_2d(32, 32, 3, 3, &mut rng).unwrap();
    c.bench_function("conv2d_forward 32ch 7x7", |b| {
        b.iter(|| conv2d_forward(black_box(&x2), black_box(&k2)).unwrap())
    });
    c.bench_function("conv_forward_naive 32ch 7x7", |b| {
        b.iter(|| conv_forward_naive(black_box(&x2), black_box(&k2)).unwrap())
    });

    let x3 = Tensor::<f32>::random_uniform(vec![32, 16, 7, 7], -1.0, 1.0, &mut rng).unwrap();
    let k3 = ConvKernel::random_3d(32, 32, 3, 3, 3, &mut rng).unwrap();
    c.bench_function("conv3d_forward 32ch 16x7x7", |b| {
        b.iter(|| conv3d_forward(black_box(&x3), black_box(&k3)).unwrap())
    });
}

fn loss_benches(c: &mut Criterion) {
    let boxes = vec![
        (0usize, BoundingBox::new(8.0, 8.0, 40.0, 40.0).unwrap()),
        (1usize, BoundingBox::new(24.0, 16.0, 56.0, 48.0).unwrap()),
    ];
    let targets = encode_gaussian_targets(2, &boxes, 64, 64, 16, SigmaMode::Adaptive).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let pred = Tensor::<f64>::random_uniform(vec![2, 16, 16], 0.05, 0.95, &mut rng).unwrap();
    let cfg = FocalConfig::default();
    c.bench_function("focal_loss+grad 2x16x16", |b| {
        b.iter(|| focal_loss(black_box(&pred), black_box(&targets), &cfg).unwrap())
    });

    let raw = Tensor::<f64>::random_uniform(vec![2, 4, 16, 16], -0.5, 1.0, &mut rng).unwrap();
    c.bench_function("giou_loss+grad 2x4x16x16", |b| {
        b.iter(|| giou_loss(black_box(&raw), black_box(&targets)).unwrap())
    });

    c.bench_function("encode_gaussian_targets L16", |b| {
        b.iter(|| {
            encode_gaussian_targets(2, black_box(&boxes), 64, 64, 16, SigmaMode::Adaptive).unwrap()
        })
    });
}

fn pipeline_bench(c: &mut Criterion) {
    let dims = PipelineDims::default();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let weights = PipelineWeights::<f32>::random(&dims, Activation::Relu, &mut rng).unwrap();
    let visual = VisualFeatureMap::new(
        Tensor::random_uniform(vec![32, 16, 7, 7], -1.0, 1.0, &mut rng).unwrap(),
        224,
        224,
    )
    .unwrap();
    let sentence =
        SentenceFeature::new(Tensor::random_uniform(vec![8, 32], -1.0, 1.0, &mut rng).unwrap())
            .unwrap();
    let scheme = CandidateScheme::default_for(16);
    c.bench_function("run_forward d32 T16 7x7 -> L16", |b| {
        b.iter(|| {
            run_forward(
                black_box(&visual),
                black_box(&sentence),
                black_box(&weights),
                &scheme,
                1,
            )
            .unwrap()
        })
    });

    let fused_channels = dims.fused_channels();
    let fused = stvg_core::fusion::FusedFeature {
        tensor: Tensor::<f32>::random_uniform(vec![fused_channels, 16, 7, 7], -1.0, 1.0, &mut rng)
            .unwrap(),
    };
    let trunk = MixedConvWeights::random(fused_channels, 3, 3, &mut rng).unwrap();
    c.bench_function("mixed_forward 32ch 16x7x7", |b| {
        b.iter(|| stvg_core::mixed::mixed_forward(black_box(&fused), black_box(&trunk)).unwrap())
    });
    // Keep the fusion weights alive for a fair standalone measurement.
    let fusion = FusionWeights::<f32>::random(32, 32, 16, 16, 16, Activation::Relu, &mut rng).unwrap();
    c.bench_function("cross_modal_fuse d32 T16 7x7", |b| {
        b.iter(|| {
            stvg_core::fusion::cross_modal_fuse(black_box(&visual), black_box(&sentence), &fusion)
                .unwrap()
        })
    });
}

fn demo_bench(c: &mut Criterion) {
    let targets = stvg_core::optim::fixtures::heatmap_targets();
    let cfg = OptimizerConfig {
        learning_rate: 0.5,
        steps: 50,
        seed: 0,
        backtracking: false,
    };
    c.bench_function("fit_heatmap_demo 50 steps", |b| {
        b.iter(|| fit_heatmap_demo(black_box(&targets), &cfg, &FocalConfig::default()).unwrap())
    });
}

criterion_group!(benches, conv_benches, loss_benches, pipeline_bench, demo_bench);
criterion_main!(benches);
