use criterion::{criterion_group, criterion_main, Criterion};
use lesionsynth::autodiff::Graph;
use lesionsynth::diffusion::{train_step, DenoiserNet, NetConfig, TrainConfig};
use lesionsynth::metrics::{fid, gaussian_stats, ms_ssim, ms_ssim_weights, SsimPadding};
use lesionsynth::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(dims: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f32> {
    Tensor::from_fn(dims, |_| rng.random_range(-1.0f32..1.0))
}

fn conv(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = random(&[16, 8, 32, 32], &mut rng);
    let w = random(&[8, 8, 3, 3], &mut rng);
    c.bench_function("conv2d 16x8x32x32 k3 fwd+bwd", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let xn = g.input(x.clone());
            let wn = g.input(w.clone());
            let y = g.conv2d(xn, wn, None, 1, 1).unwrap();
            let l = g.mean(y).unwrap();
            g.backward(l).unwrap()
        })
    });
}

fn train(c: &mut Criterion) {
    let cfg = TrainConfig::default();
    let schedule = cfg.schedule().unwrap();
    let mut net = DenoiserNet::new(NetConfig { base_channels: cfg.base_channels, seed: 0 });
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let batch = random(&[cfg.batch_size, 4, 32, 32], &mut rng);
    c.bench_function("denoiser train step (batch 16, 32x32)", |b| {
        b.iter(|| train_step(&mut net, &batch, &schedule, &mut rng, cfg.lr, 0.0).unwrap())
    });
}

fn metrics(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = random(&[3, 32, 32], &mut rng);
    let b2 = random(&[3, 32, 32], &mut rng);
    let w = ms_ssim_weights(2).unwrap();
    c.bench_function("ms_ssim 3x32x32", |b| {
        b.iter(|| ms_ssim(&a, &b2, &w, SsimPadding::Valid).unwrap())
    });
    let fa: Vec<Vec<f64>> = (0..200).map(|_| (0..32).map(|_| rng.random::<f64>()).collect()).collect();
    let fb: Vec<Vec<f64>> = (0..200).map(|_| (0..32).map(|_| rng.random::<f64>()).collect()).collect();
    let (sa, sb) = (gaussian_stats(&fa).unwrap(), gaussian_stats(&fb).unwrap());
    c.bench_function("fid 32-dim", |b| b.iter(|| fid(&sa, &sb).unwrap()));
}

criterion_group!(benches, conv, train, metrics);
criterion_main!(benches);
