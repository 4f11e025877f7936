use lobeseg_core::volgrid::{GridGeometry, Hemisphere, LabelTaxonomy, BACKGROUND};
use lobeseg_nn::cascade::{average_probs, compose_labels};
use lobeseg_nn::loss::{dice_bce, one_hot};
use lobeseg_nn::{FeatureMap, Network, NetworkKind, NetworkSpec};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_distribution(classes: usize, n: usize, seed: u64) -> FeatureMap<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = FeatureMap::zeros(classes, [n, 1, 1]);
    for v in 0..n {
        let raw: Vec<f32> = (0..classes).map(|_| rng.gen_range(0.01..1.0)).collect();
        let s: f32 = raw.iter().sum();
        for (c, r) in raw.iter().enumerate() {
            m.data[c * n + v] = r / s;
        }
    }
    m
}

fn kind() -> impl Strategy<Value = NetworkKind> {
    prop_oneof![Just(NetworkKind::Dpn), Just(NetworkKind::Unet)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn forward_outputs_are_distributions(k in kind(), cin in 1usize..4, cout in 2usize..6, levels in 1usize..4, seed in any::<u64>()) {
        let spec = NetworkSpec { dpn_filters: 3, unet_base_filters: 2, levels, ..NetworkSpec::new(k, cin, cout) };
        let mut net = Network::<f32>::build(spec, seed).unwrap();
        prop_assert_eq!(net.store.params.len(), net.store.grads.len());
        let d = 1 << (levels - 1);
        let dims = [2 * d, d, 2 * d];
        let n: usize = dims.iter().product();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let x = FeatureMap::new(cin, dims, (0..cin * n).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
        let eval = net.predict(&x).unwrap();
        let train = net.forward_train(&x, seed).unwrap().probs().clone();
        for p in [eval, train] {
            for v in 0..n {
                let s: f32 = (0..cout).map(|c| p.at(c, v)).sum();
                prop_assert!((s - 1.0).abs() <= 1e-6, "voxel {} sums to {}", v, s);
            }
        }
    }

    #[test]
    fn dpn_is_smaller_than_unet(cin in 1usize..5, cout in 2usize..16) {
        let count = |s: NetworkSpec| Network::<f32>::build(s, 0).unwrap().param_count();
        let d = count(NetworkSpec::dpn(cin, cout));
        let u = count(NetworkSpec::unet(cin, cout));
        prop_assert!(d as f64 <= 0.25 * u as f64, "{} vs {}", d, u);
    }

    #[test]
    fn loss_is_finite_inside_the_clip(classes in 2usize..5, n in 1usize..40, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..classes)).collect();
        let y = one_hot::<f64>(&labels, classes, [n, 1, 1]).unwrap();
        let p = FeatureMap::new(classes, [n, 1, 1], (0..classes * n).map(|_| if rng.gen_bool(0.3) { 1e-7 } else { rng.gen_range(1e-7..1.0 - 1e-7) }).collect()).unwrap();
        let (parts, grad) = dice_bce(&p, &y).unwrap();
        prop_assert!(parts.value.is_finite());
        prop_assert!(grad.data.iter().all(|g| g.is_finite()));
    }

    #[test]
    fn composition_respects_stage_one(n in 1usize..64, seed in any::<u64>()) {
        let tax = LabelTaxonomy::cerebellum();
        let s1 = random_distribution(3, n, seed);
        let s2 = random_distribution(14, n, seed ^ 7);
        let out = compose_labels(&s1, &s2, &tax, GridGeometry::with_dims([n, 1, 1])).unwrap();
        let hemi = s1.argmax();
        for (v, &l) in out.labels.iter().enumerate() {
            if l == BACKGROUND {
                continue;
            }
            let e = tax.entry(l).expect("taxonomy id");
            let expected = if e.hemisphere == Hemisphere::Left { 1 } else { 2 };
            prop_assert_eq!(hemi[v], expected);
        }
        for v in 0..n {
            if hemi[v] == 0 {
                prop_assert_eq!(out.labels[v], BACKGROUND);
            }
        }
    }

    #[test]
    fn averaged_maps_stay_distributions(k in 1usize..5, n in 1usize..50, seed in any::<u64>()) {
        let maps: Vec<_> = (0..k).map(|i| random_distribution(14, n, seed.wrapping_add(i as u64))).collect();
        let avg = average_probs(&maps).unwrap();
        for v in 0..n {
            let s: f32 = (0..14).map(|c| avg.at(c, v)).sum();
            prop_assert!((s - 1.0).abs() <= 1e-6);
        }
    }
}
