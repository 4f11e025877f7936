//! Finite-difference checks of every analytic backward pass.
//!
//! Each check draws a random small shape, projects the layer output onto a
//! random tensor to get a scalar, and compares the analytic gradient with
//! central differences. The error measure is `max|a - n| / max|n|` over all
//! checked coordinates.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::loss;
use crate::network::{Network, NetworkKind, NetworkSpec};
use crate::ops::{self, TAPS};
use crate::tensor::FeatureMap;

pub const STEP: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub name: &'static str,
    pub cases: usize,
    pub max_rel_error: f64,
}

fn rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let diff = analytic.iter().zip(numeric).fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

/// Central differences of `f` at `x` for the listed coordinates.
pub fn numeric_gradient(x: &[f64], coords: &[usize], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    coords
        .iter()
        .map(|&i| {
            let orig = probe[i];
            probe[i] = orig + STEP;
            let up = f(&probe);
            probe[i] = orig - STEP;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * STEP)
        })
        .collect()
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

fn map(channels: usize, dims: [usize; 3], data: Vec<f64>) -> FeatureMap<f64> {
    FeatureMap::new(channels, dims, data).expect("consistent shape")
}

fn project(y: &FeatureMap<f64>, r: &[f64]) -> f64 {
    y.data.iter().zip(r).map(|(a, b)| a * b).sum()
}

fn small_dims(rng: &mut ChaCha8Rng, max: usize) -> [usize; 3] {
    [rng.gen_range(1..=max), rng.gen_range(1..=max), rng.gen_range(1..=max)]
}

fn all(n: usize) -> Vec<usize> {
    (0..n).collect()
}

struct Tracker {
    name: &'static str,
    cases: usize,
    worst: f64,
}

impl Tracker {
    fn new(name: &'static str) -> Self {
        Self { name, cases: 0, worst: 0.0 }
    }

    fn add(&mut self, analytic: &[f64], numeric: &[f64]) {
        self.worst = self.worst.max(rel_error(analytic, numeric));
    }

    fn case_done(&mut self) {
        self.cases += 1;
    }

    fn report(self) -> GradReport {
        GradReport { name: self.name, cases: self.cases, max_rel_error: self.worst }
    }
}

pub fn check_conv3(cases: usize, seed: u64) -> GradReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = Tracker::new("conv3");
    for _ in 0..cases {
        let (cin, cout) = (rng.gen_range(1..=3), rng.gen_range(1..=3));
        let dims = small_dims(&mut rng, 4);
        let n: usize = dims.iter().product();
        let x = uniform(&mut rng, cin * n, -1.0, 1.0);
        let w = uniform(&mut rng, cout * cin * TAPS, -0.5, 0.5);
        let b = uniform(&mut rng, cout, -0.5, 0.5);
        let r = uniform(&mut rng, cout * n, -1.0, 1.0);
        let eval = |x: &[f64], w: &[f64], b: &[f64]| project(&ops::conv3_forward(&map(cin, dims, x.to_vec()), w, b, cout).unwrap(), &r);
        let g = ops::conv3_backward(&map(cin, dims, x.clone()), &w, cout, &map(cout, dims, r.clone()), true).unwrap();
        t.add(&g.dx.unwrap().data, &numeric_gradient(&x, &all(x.len()), |p| eval(p, &w, &b)));
        t.add(&g.dw, &numeric_gradient(&w, &all(w.len()), |p| eval(&x, p, &b)));
        t.add(&g.db, &numeric_gradient(&b, &all(b.len()), |p| eval(&x, &w, p)));
        t.case_done();
    }
    t.report()
}

pub fn check_conv1(cases: usize, seed: u64) -> GradReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = Tracker::new("conv1");
    for _ in 0..cases {
        let (cin, cout) = (rng.gen_range(1..=4), rng.gen_range(1..=4));
        let dims = small_dims(&mut rng, 4);
        let n: usize = dims.iter().product();
        let x = uniform(&mut rng, cin * n, -1.0, 1.0);
        let w = uniform(&mut rng, cout * cin, -1.0, 1.0);
        let b = uniform(&mut rng, cout, -1.0, 1.0);
        let r = uniform(&mut rng, cout * n, -1.0, 1.0);
        let eval = |x: &[f64], w: &[f64], b: &[f64]| project(&ops::conv1_forward(&map(cin, dims, x.to_vec()), w, b, cout).unwrap(), &r);
        let g = ops::conv1_backward(&map(cin, dims, x.clone()), &w, cout, &map(cout, dims, r.clone()), true).unwrap();
        t.add(&g.dx.unwrap().data, &numeric_gradient(&x, &all(x.len()), |p| eval(p, &w, &b)));
        t.add(&g.dw, &numeric_gradient(&w, &all(w.len()), |p| eval(&x, p, &b)));
        t.add(&g.db, &numeric_gradient(&b, &all(b.len()), |p| eval(&x, &w, p)));
        t.case_done();
    }
    t.report()
}

pub fn check_relu(cases: usize, seed: u64) -> GradReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = Tracker::new("relu");
    for _ in 0..cases {
        let c = rng.gen_range(1..=3);
        let dims = small_dims(&mut rng, 4);
        let n = c * dims.iter().product::<usize>();
        // keep inputs away from the kink
        let x: Vec<f64> = (0..n).map(|_| rng.gen_range(0.01..1.0) * if rng.gen::<bool>() { 1.0 } else { -1.0 }).collect();
        let r = uniform(&mut rng, n, -1.0, 1.0);
        let eval = |x: &[f64]| {
            let mut y = map(c, dims, x.to_vec());
            ops::relu_inplace(&mut y);
            project(&y, &r)
        };
        let mut y = map(c, dims, x.clone());
        ops::relu_inplace(&mut y);
        let mut g = map(c, dims, r.clone());
        ops::relu_backward(&y, &mut g);
        t.add(&g.data, &numeric_gradient(&x, &all(n), eval));
        t.case_done();
    }
    t.report()
}

pub fn check_batchnorm(cases: usize, seed: u64) -> GradReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = Tracker::new("batchnorm");
    for _ in 0..cases {
        let c = rng.gen_range(1..=3);
        let mut dims = small_dims(&mut rng, 4);
        dims[0] = dims[0].max(2);
        let n = c * dims.iter().product::<usize>();
        let x = uniform(&mut rng, n, -2.0, 2.0);
        let gamma = uniform(&mut rng, c, 0.5, 1.5);
        let beta = uniform(&mut rng, c, -0.5, 0.5);
        let r = uniform(&mut rng, n, -1.0, 1.0);
        let eval = |x: &[f64], g: &[f64], b: &[f64]| project(&ops::batchnorm_train(&map(c, dims, x.to_vec()), g, b).0, &r);
        let (_, cache) = ops::batchnorm_train(&map(c, dims, x.clone()), &gamma, &beta);
        let (dx, dg, db) = ops::batchnorm_backward(&cache, &gamma, &map(c, dims, r.clone()));
        t.add(&dx.data, &numeric_gradient(&x, &all(n), |p| eval(p, &gamma, &beta)));
        t.add(&dg, &numeric_gradient(&gamma, &all(c), |p| eval(&x, p, &beta)));
        t.add(&db, &numeric_gradient(&beta, &all(c), |p| eval(&x, &gamma, p)));
        t.case_done();
    }
    t.report()
}

pub fn check_dropout(cases: usize, seed: u64) -> GradReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = Tracker::new("dropout");
    for i in 0..cases {
        let c = rng.gen_range(1..=3);
        let dims = small_dims(&mut rng, 4);
        let n = c * dims.iter().product::<usize>();
        let mask: Vec<f64> = ops::dropout_mask(n, 0.25, seed ^ i as u64).unwrap();
        let x = uniform(&mut rng, n, -1.0, 1.0);
        let r = uniform(&mut rng, n, -1.0, 1.0);
        let eval = |x: &[f64]| {
            let mut y = map(c, dims, x.to_vec());
            ops::apply_mask(&mut y, &mask);
            project(&y, &r)
        };
        let mut g = map(c, dims, r.clone());
        ops::apply_mask(&mut g, &mask);
        t.add(&g.data, &numeric_gradient(&x, &all(n), eval));
        t.case_done();
    }
    t.report()
}

pub fn check_softmax(cases: usize, seed: u64) -> GradReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = Tracker::new("softmax");
    for _ in 0..cases {
        let c = rng.gen_range(2..=5);
        let dims = small_dims(&mut rng, 3);
        let n = c * dims.iter().product::<usize>();
        let x = uniform(&mut rng, n, -3.0, 3.0);
        let r = uniform(&mut rng, n, -1.0, 1.0);
        let eval = |x: &[f64]| project(&ops::softmax(&map(c, dims, x.to_vec())), &r);
        let p = ops::softmax(&map(c, dims, x.clone()));
        let g = ops::softmax_backward(&p, &map(c, dims, r.clone()));
        t.add(&g.data, &numeric_gradient(&x, &all(n), eval));
        t.case_done();
    }
    t.report()
}

pub fn check_concat(cases: usize, seed: u64) -> GradReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = Tracker::new("concat");
    for _ in 0..cases {
        let (ca, cb) = (rng.gen_range(1..=3), rng.gen_range(1..=3));
        let dims = small_dims(&mut rng, 3);
        let v: usize = dims.iter().product();
        let a = uniform(&mut rng, ca * v, -1.0, 1.0);
        let b = uniform(&mut rng, cb * v, -1.0, 1.0);
        let r = uniform(&mut rng, (ca + cb) * v, -1.0, 1.0);
        let eval = |a: &[f64], b: &[f64]| project(&ops::concat(&map(ca, dims, a.to_vec()), &map(cb, dims, b.to_vec())).unwrap(), &r);
        let (ga, gb) = ops::split(&map(ca + cb, dims, r.clone()), ca);
        t.add(&ga.data, &numeric_gradient(&a, &all(a.len()), |p| eval(p, &b)));
        t.add(&gb.data, &numeric_gradient(&b, &all(b.len()), |p| eval(&a, p)));
        t.case_done();
    }
    t.report()
}

pub fn check_downsample(cases: usize, seed: u64) -> GradReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = Tracker::new("downsample");
    for _ in 0..cases {
        let f = [2, 4][rng.gen_range(0..2)];
        let c = rng.gen_range(1..=2);
        let coarse = small_dims(&mut rng, 2);
        let dims = coarse.map(|d| d * f);
        let x = uniform(&mut rng, c * dims.iter().product::<usize>(), -1.0, 1.0);
        let r = uniform(&mut rng, c * coarse.iter().product::<usize>(), -1.0, 1.0);
        let eval = |x: &[f64]| project(&ops::downsample(&map(c, dims, x.to_vec()), f).unwrap(), &r);
        let g = ops::downsample_backward(&map(c, coarse, r.clone()), dims, f);
        t.add(&g.data, &numeric_gradient(&x, &all(x.len()), eval));
        t.case_done();
    }
    t.report()
}

pub fn check_upsample(cases: usize, seed: u64) -> GradReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = Tracker::new("upsample");
    for _ in 0..cases {
        let f = [2, 4][rng.gen_range(0..2)];
        let c = rng.gen_range(1..=2);
        let coarse = small_dims(&mut rng, 3);
        let fine = coarse.map(|d| d * f);
        let x = uniform(&mut rng, c * coarse.iter().product::<usize>(), -1.0, 1.0);
        let r = uniform(&mut rng, c * fine.iter().product::<usize>(), -1.0, 1.0);
        let eval = |x: &[f64]| project(&ops::upsample(&map(c, coarse, x.to_vec()), f), &r);
        let g = ops::upsample_backward(&map(c, fine, r.clone()), coarse, f);
        t.add(&g.data, &numeric_gradient(&x, &all(x.len()), eval));
        t.case_done();
    }
    t.report()
}

pub fn check_loss(cases: usize, seed: u64) -> GradReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = Tracker::new("dice_bce_loss");
    for i in 0..cases {
        let c = if i == 0 { 2 } else { rng.gen_range(2..=4) };
        let dims = if i == 0 { [2, 2, 2] } else { small_dims(&mut rng, 3) };
        let v: usize = dims.iter().product();
        let classes: Vec<usize> = (0..v).map(|_| rng.gen_range(0..c)).collect();
        let y = loss::one_hot::<f64>(&classes, c, dims).unwrap();
        let p = uniform(&mut rng, c * v, 0.05, 0.95);
        let eval = |p: &[f64]| loss::dice_bce(&map(c, dims, p.to_vec()), &y).unwrap().0.value;
        let (_, g) = loss::dice_bce(&map(c, dims, p.clone()), &y).unwrap();
        t.add(&g.data, &numeric_gradient(&p, &all(p.len()), eval));
        t.case_done();
    }
    t.report()
}

/// Whole-network check in training mode (batch statistics and a fixed
/// dropout mask) for parameters and the input.
pub fn check_network(kind: NetworkKind, seed: u64) -> GradReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = NetworkSpec { dpn_filters: 3, unet_base_filters: 2, levels: 2, ..NetworkSpec::new(kind, 2, 3) };
    let net = Network::<f64>::build(spec, seed).unwrap();
    let dims = [4, 4, 4];
    let n: usize = dims.iter().product();
    let x = uniform(&mut rng, 2 * n, -1.0, 1.0);
    let r = uniform(&mut rng, 3 * n, -1.0, 1.0);
    let step_seed = rng.gen::<u64>();
    let eval = |params: &[f64], x: &[f64]| {
        let mut probe = net.clone();
        probe.store.params.copy_from_slice(params);
        project(probe.forward_train(&map(2, dims, x.to_vec()), step_seed).unwrap().probs(), &r)
    };
    let mut work = net.clone();
    let tape = work.forward_train(&map(2, dims, x.clone()), step_seed).unwrap();
    work.store.zero_grads();
    let dx = work.backward(&tape, &map(3, dims, r.clone()), true).unwrap().unwrap();
    let params = net.store.params.clone();
    let coords: Vec<usize> = (0..60).map(|_| rng.gen_range(0..params.len())).collect();
    let analytic: Vec<f64> = coords.iter().map(|&i| work.store.grads[i]).collect();
    let mut t = Tracker::new(match kind {
        NetworkKind::Dpn => "dpn_network",
        NetworkKind::Unet => "unet_network",
    });
    t.add(&analytic, &numeric_gradient(&params, &coords, |p| eval(p, &x)));
    t.add(&dx.data, &numeric_gradient(&x, &all(x.len()), |p| eval(&params, p)));
    t.case_done();
    t.report()
}

/// Runs every layer check with `cases` random shapes each.
pub fn run_all(cases: usize, seed: u64) -> Vec<GradReport> {
    vec![
        check_conv3(cases, seed),
        check_conv1(cases, seed + 1),
        check_relu(cases, seed + 2),
        check_batchnorm(cases, seed + 3),
        check_dropout(cases, seed + 4),
        check_softmax(cases, seed + 5),
        check_concat(cases, seed + 6),
        check_downsample(cases, seed + 7),
        check_upsample(cases, seed + 8),
        check_loss(cases, seed + 9),
        check_network(NetworkKind::Dpn, seed + 10),
        check_network(NetworkKind::Unet, seed + 11),
    ]
}
