use lobeseg_core::volgrid::{GridGeometry, Hemisphere, LabelTaxonomy, LobuleClass, VoxelGrid};
use lobeseg_nn::cascade::{average_probs, compose_labels, ensemble_predict, gate_inputs, CascadeModel};
use lobeseg_nn::{FeatureMap, Network, NetworkSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_probs(rng: &mut ChaCha8Rng, classes: usize, dims: [usize; 3]) -> FeatureMap<f32> {
    let n: usize = dims.iter().product();
    let mut data = vec![0f32; classes * n];
    for v in 0..n {
        let raw: Vec<f32> = (0..classes).map(|_| rng.gen_range(0.0..1.0)).collect();
        let s: f32 = raw.iter().sum();
        for k in 0..classes {
            data[k * n + v] = raw[k] / s;
        }
    }
    FeatureMap::new(classes, dims, data).unwrap()
}

fn brute_argmax(p: &FeatureMap<f32>, v: usize) -> usize {
    let vals: Vec<f32> = (0..p.channels).map(|k| p.at(k, v)).collect();
    let max = vals.iter().cloned().fold(f32::MIN, f32::max);
    vals.iter().position(|&x| x == max).unwrap()
}

#[test]
fn composition_matches_brute_force() {
    let tax = LabelTaxonomy::cerebellum();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let dims = [4, 4, 4];
    for _ in 0..20 {
        let s1 = random_probs(&mut rng, 3, dims);
        let s2 = random_probs(&mut rng, 14, dims);
        let out = compose_labels(&s1, &s2, &tax, GridGeometry::with_dims(dims)).unwrap();
        for v in 0..64 {
            let (h, c) = (brute_argmax(&s1, v), brute_argmax(&s2, v));
            let want = if h == 0 || c == 0 {
                0
            } else {
                let hemi = if h == 1 { Hemisphere::Left } else { Hemisphere::Right };
                tax.lookup(hemi, LobuleClass::ALL[c - 1])
            };
            assert_eq!(out.labels[v], want);
            if let Some(e) = tax.entry(out.labels[v]) {
                assert_eq!(e.hemisphere.stage_index(), h);
            }
        }
    }
}

#[test]
fn gating_matches_voxel_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let dims = [5, 3, 4];
    let geo = GridGeometry::with_dims(dims);
    let s1 = random_probs(&mut rng, 3, dims);
    let chans: Vec<VoxelGrid> = (0..3).map(|_| VoxelGrid::new(geo, (0..60).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()).collect();
    let gated = gate_inputs(&chans, &s1).unwrap();
    for (g, c) in gated.iter().zip(&chans) {
        for v in 0..60 {
            let m = if brute_argmax(&s1, v) == 0 { 0.0 } else { 1.0 };
            assert_eq!(g.values[v], m * c.values[v]);
        }
    }
    let other = VoxelGrid::filled(GridGeometry::with_dims([5, 3, 3]), 1.0);
    assert!(gate_inputs(&[other], &s1).is_err());
}

#[test]
fn two_map_average_is_the_midpoint() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = random_probs(&mut rng, 14, [3, 3, 3]);
    let b = random_probs(&mut rng, 14, [3, 3, 3]);
    let m = average_probs(&[a.clone(), b.clone()]).unwrap();
    for i in 0..m.data.len() {
        assert!((m.data[i] - (a.data[i] + b.data[i]) / 2.0).abs() < 1e-7);
    }
}

fn model(seed: u64) -> CascadeModel {
    let s1 = Network::build(NetworkSpec { dpn_filters: 3, levels: 2, ..NetworkSpec::dpn(2, 3) }, seed).unwrap();
    let s2 = Network::build(NetworkSpec { unet_base_filters: 2, levels: 2, ..NetworkSpec::unet(2, 14) }, seed + 1).unwrap();
    CascadeModel::new(format!("m{seed}"), s1, s2).unwrap()
}

fn inputs() -> Vec<VoxelGrid> {
    let geo = GridGeometry::with_dims([8, 8, 8]);
    vec![
        VoxelGrid::from_fn(geo, |x, y, z| ((x * 3 + y * 5 + z * 7) % 11) as f32 / 11.0),
        VoxelGrid::from_fn(geo, |x, y, z| (x as f32 - 3.5).abs() / 4.0 + (y + z) as f32 * 0.01),
    ]
}

#[test]
fn ensemble_of_copies_equals_the_model() {
    let tax = LabelTaxonomy::cerebellum();
    let m = model(4);
    let single = ensemble_predict(std::slice::from_ref(&m), &inputs(), &tax, "h").unwrap();
    let triple = ensemble_predict(&[m.clone(), m.clone(), m.clone()], &inputs(), &tax, "h").unwrap();
    assert_eq!(single.stage1, triple.stage1);
    assert_eq!(single.stage2, triple.stage2);
    assert_eq!(single.labels, triple.labels);
    assert_eq!(triple.provenance.model_ids, vec!["m4"; 3]);
}

#[test]
fn ensemble_maps_stay_distributions() {
    let tax = LabelTaxonomy::cerebellum();
    let run = ensemble_predict(&[model(1), model(7)], &inputs(), &tax, "h").unwrap();
    for p in [&run.stage1, &run.stage2] {
        for v in 0..p.voxels() {
            let s: f32 = (0..p.channels).map(|k| p.at(k, v)).sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }
    for v in 0..run.labels.len() {
        if brute_argmax(&run.stage1, v) == 0 {
            assert_eq!(run.labels.labels[v], 0);
        }
    }
}

#[test]
fn mismatched_models_are_rejected() {
    let s1 = Network::build(NetworkSpec { dpn_filters: 2, levels: 2, ..NetworkSpec::dpn(2, 3) }, 0).unwrap();
    let bad = Network::build(NetworkSpec { dpn_filters: 2, levels: 2, ..NetworkSpec::dpn(2, 5) }, 0).unwrap();
    assert!(CascadeModel::new("x", s1, bad).is_err());
}
