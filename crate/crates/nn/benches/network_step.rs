//! Convolution kernels and whole training steps. Compare the sequential
//! fallback with the parallel build through criterion baselines:
//!
//! ```text
//! cargo bench -p lobeseg-nn --no-default-features -- --save-baseline seq
//! cargo bench -p lobeseg-nn -- --baseline seq
//! ```

use criterion::{black_box, criterion_group, criterion_main, Criterion};
use lobeseg_nn::loss::one_hot;
use lobeseg_nn::ops::{conv3_backward, conv3_forward};
use lobeseg_nn::optim::train_step;
use lobeseg_nn::{FeatureMap, Network, NetworkSpec, Optimizer};

fn input(channels: usize, d: usize) -> FeatureMap<f32> {
    let n = channels * d * d * d;
    FeatureMap::new(channels, [d; 3], (0..n).map(|i| ((i * 7919) % 97) as f32 / 97.0 - 0.5).collect()).unwrap()
}

fn kernels(c: &mut Criterion) {
    let x = input(8, 32);
    let w: Vec<f32> = (0..8 * 8 * 27).map(|i| ((i * 31) % 17) as f32 / 17.0 - 0.5).collect();
    let b = vec![0.0f32; 8];
    let y = conv3_forward(&x, &w, &b, 8).unwrap();
    c.bench_function("conv3_forward_8x32", |bn| bn.iter(|| conv3_forward(black_box(&x), &w, &b, 8).unwrap()));
    c.bench_function("conv3_backward_8x32", |bn| bn.iter(|| conv3_backward(black_box(&x), &w, 8, &y, true).unwrap()));

    let x = input(3, 32);
    let classes: Vec<usize> = (0..32 * 32 * 32).map(|i| (i / 64) % 14).collect();
    let t = one_hot::<f32>(&classes, 14, [32; 3]).unwrap();
    for (name, spec) in [
        ("train_step_dpn_32", NetworkSpec { dpn_filters: 8, ..NetworkSpec::dpn(3, 14) }),
        ("train_step_unet_32", NetworkSpec { unet_base_filters: 4, ..NetworkSpec::unet(3, 14) }),
    ] {
        let mut net = Network::<f32>::build(spec, 0).unwrap();
        let mut seed = 0;
        c.bench_function(name, |bn| {
            bn.iter(|| {
                seed += 1;
                train_step(&mut net, &x, &t, Optimizer::Adam, 1e-4, seed).unwrap()
            })
        });
    }
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = kernels
}
criterion_main!(benches);
