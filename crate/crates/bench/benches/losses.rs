use criterion::{black_box, criterion_group, criterion_main, Criterion};
use geostyle_core::contentloss::{loss_psc, loss_psc_grad};
use geostyle_core::diffusion::{GuidanceConfig, GuidanceObjective, ToyExtractorConfig, ToyObjective};
use geostyle_core::geodesic::{augment, surface_point};
use geostyle_core::preshape::project;
use geostyle_core::styleloss::{loss_pc_grad, StyleInputs};
use geostyle_core::{AugmentConfig, PreShape, Tensor, WeightSet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn geometry(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let feat = tensor(&mut rng, vec![512]);
    c.bench_function("project 512", |b| b.iter(|| project(black_box(&feat)).unwrap()));

    let taus: Vec<PreShape> = (0..49).map(|_| project(&tensor(&mut rng, vec![512])).unwrap()).collect();
    let w = WeightSet::new(vec![1.0; 49]).unwrap();
    c.bench_function("surface_point n=49 k=256", |b| b.iter(|| surface_point(black_box(&taus), &w).unwrap()));
    c.bench_function("augment n=m=49 k=256", |b| {
        b.iter(|| augment(black_box(&taus), &AugmentConfig::default()).unwrap())
    });
}

fn losses(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let inputs = StyleInputs {
        target_patches: (0..49).map(|_| tensor(&mut rng, vec![512])).collect(),
        source_patches: (0..49).map(|_| tensor(&mut rng, vec![512])).collect(),
        target_text: tensor(&mut rng, vec![512]),
        source_text: tensor(&mut rng, vec![512]),
        augment: AugmentConfig::default(),
    };
    c.bench_function("loss_pc grad n=49 dim=512", |b| b.iter(|| loss_pc_grad(black_box(&inputs)).unwrap()));

    let src = vec![tensor(&mut rng, vec![64, 16, 16]), tensor(&mut rng, vec![128, 8, 8])];
    let tgt = vec![tensor(&mut rng, vec![64, 16, 16]), tensor(&mut rng, vec![128, 8, 8])];
    c.bench_function("loss_psc 64x16x16 + 128x8x8", |b| b.iter(|| loss_psc(black_box(&src), &tgt).unwrap()));
    c.bench_function("loss_psc grad 64x16x16 + 128x8x8", |b| {
        b.iter(|| loss_psc_grad(black_box(&src), &tgt).unwrap())
    });
}

fn guidance(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let source = tensor(&mut rng, vec![3, 64, 64]);
    let cfg = GuidanceConfig::default();
    let ext = ToyExtractorConfig::default();
    let texts = (tensor(&mut rng, vec![ext.patch_dim]), tensor(&mut rng, vec![ext.patch_dim]));
    let obj = ToyObjective::new(source.clone(), texts.0, texts.1, &cfg, &ext).unwrap();
    let img = tensor(&mut rng, vec![3, 64, 64]);
    c.bench_function("toy objective loss+grad 3x64x64 n=49", |b| {
        b.iter(|| obj.loss_and_grad(black_box(&img)).unwrap())
    });
}

criterion_group!(benches, geometry, losses, guidance);
criterion_main!(benches);
