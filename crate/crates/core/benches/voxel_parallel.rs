//! Voxel kernels. Build once with and once without the `parallel` feature and
//! compare through criterion baselines:
//!
//! ```text
//! cargo bench -p lobeseg-core --no-default-features -- --save-baseline seq
//! cargo bench -p lobeseg-core -- --baseline seq
//! ```

use criterion::{black_box, criterion_group, criterion_main, Criterion};
use lobeseg_core::augment::{gaussian_blur, smooth_field};
use lobeseg_core::fusion::{fuse_weighted_vote, warp, AtlasTemplate, FusionConfig};
use lobeseg_core::phantom::{generate, PhantomSpec};
use lobeseg_core::stride::stride_decompose;
use lobeseg_core::volgrid::zscore_normalize;

fn kernels(c: &mut Criterion) {
    let mode = if cfg!(feature = "parallel") { "parallel" } else { "sequential" };
    eprintln!("voxel kernels built {mode}, {} thread(s)", lobeseg_core::par::current_threads());
    let cases: Vec<_> = (0..8).map(|s| generate(&PhantomSpec { seed: s, ..PhantomSpec::default() }).unwrap()).collect();
    let target = &cases[0];
    let g = target.t1.geometry;
    let templates: Vec<AtlasTemplate> =
        cases[1..].iter().enumerate().map(|(i, p)| AtlasTemplate::new(i, p.t1.clone(), p.labels.clone()).unwrap()).collect();
    let field = smooth_field(g, 2.0, 3.0, 1).unwrap();
    let cfg = FusionConfig { d: 0.5, n_templates: templates.len() };

    c.bench_function("fuse_weighted_vote_48", |b| b.iter(|| fuse_weighted_vote(black_box(&target.t1), &templates, &cfg).unwrap()));
    c.bench_function("warp_48", |b| b.iter(|| warp(black_box(&templates[0]), &field).unwrap()));
    c.bench_function("stride_decompose_48", |b| b.iter(|| stride_decompose(black_box(&target.t1)).unwrap()));
    c.bench_function("zscore_48", |b| b.iter(|| zscore_normalize(black_box(&target.t1)).unwrap()));
    c.bench_function("gaussian_blur_48", |b| b.iter(|| gaussian_blur(black_box(&target.t1.values), g.dims, 1.5)));
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = kernels
}
criterion_main!(benches);
