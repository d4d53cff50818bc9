use proptest::prelude::*;
use regcl_core::dataset::{generate_world, read_bundle, split_regions, write_bundle, ImageDims, Split, SyntheticWorldConfig};
use regcl_core::eval::{adjusted_rand_index, kmeans, r_squared};

fn targets() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-100.0f64..100.0, 3..40)
}

fn labels(n: usize) -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(0usize..4, n)
}

proptest! {
    #[test]
    fn mean_predictor_scores_zero(y in targets()) {
        let mean = y.iter().sum::<f64>() / y.len() as f64;
        if let Some(r2) = r_squared(&y, &vec![mean; y.len()]).unwrap() {
            prop_assert_eq!(r2, 0.0);
        }
    }

    #[test]
    fn r_squared_ignores_a_shared_affine_map(
        (y, p) in (3usize..40).prop_flat_map(|n| (prop::collection::vec(-100.0f64..100.0, n), prop::collection::vec(-100.0f64..100.0, n))),
        scale in 0.01f64..100.0,
        offset in -1e3f64..1e3,
    ) {
        let base = r_squared(&y, &p).unwrap();
        let map = |v: &[f64]| v.iter().map(|x| scale * x + offset).collect::<Vec<_>>();
        let moved = r_squared(&map(&y), &map(&p)).unwrap();
        match (base, moved) {
            (Some(a), Some(b)) => prop_assert!((a - b).abs() < 1e-6 * (1.0 + a.abs())),
            (a, b) => prop_assert_eq!(a.is_none(), b.is_none()),
        }
    }

    #[test]
    fn ari_is_symmetric_and_ignores_renaming((a, b) in (2usize..40).prop_flat_map(|n| (labels(n), labels(n))), shift in 1usize..4) {
        let ab = adjusted_rand_index(&a, &b).unwrap();
        prop_assert!((ab - adjusted_rand_index(&b, &a).unwrap()).abs() < 1e-12);
        let renamed: Vec<usize> = a.iter().map(|&l| (l + shift) % 4 + 10).collect();
        prop_assert!((ab - adjusted_rand_index(&renamed, &b).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn kmeans_inertia_never_increases_and_is_reproducible(
        pts in prop::collection::vec(prop::collection::vec(-10.0f64..10.0, 2), 6..40),
        k in 1usize..5,
        seed in any::<u64>(),
    ) {
        let km = kmeans(&pts, k, seed).unwrap();
        for w in km.inertia_history.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-9 * (1.0 + w[0].abs()));
        }
        prop_assert_eq!(&km, &kmeans(&pts, k, seed).unwrap());
    }

    #[test]
    fn split_is_a_reproducible_partition(n in 3usize..300, seed in any::<u64>(), a in 0.1f64..1.0, b in 0.1f64..1.0, c in 0.1f64..1.0) {
        let t = a + b + c;
        let ratios = [a / t, b / t, 1.0 - a / t - b / t];
        let s = split_regions(n, ratios, seed).unwrap();
        prop_assert_eq!(s.labels.len(), n);
        let total: usize = Split::ALL.iter().map(|&sp| s.count(sp)).sum();
        prop_assert_eq!(total, n);
        let mut seen = vec![false; n];
        for sp in Split::ALL {
            for i in s.indices(sp) {
                prop_assert!(!seen[i]);
                seen[i] = true;
            }
        }
        prop_assert_eq!(s, split_regions(n, ratios, seed).unwrap());
    }
}

fn small_world(seed: u64, clusters: usize) -> SyntheticWorldConfig {
    SyntheticWorldConfig {
        n_regions: 3 * clusters + 4,
        n_clusters: clusters,
        poi_types: 5,
        image: ImageDims {
            channels: 2,
            height: 4,
            width: 5,
        },
        sv_images_max: 3,
        comments_per_region: 1,
        seed,
        ..SyntheticWorldConfig::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn bundle_round_trip_is_exact(seed in any::<u64>(), clusters in 1usize..4) {
        let bundle = generate_world(&small_world(seed, clusters)).unwrap();
        prop_assert_eq!(&bundle, &generate_world(&small_world(seed, clusters)).unwrap());
        let dir = tempfile::tempdir().unwrap();
        write_bundle(&bundle, dir.path()).unwrap();
        let back = read_bundle(dir.path()).unwrap();
        for (a, b) in bundle.regions.iter().zip(&back.regions) {
            for (x, y) in a.sv_images.iter().chain([&a.rv_image]).zip(b.sv_images.iter().chain([&b.rv_image])) {
                prop_assert!(x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
            }
            for (k, v) in &a.indicators {
                prop_assert_eq!(v.to_bits(), b.indicators[k].to_bits());
            }
        }
        prop_assert_eq!(bundle, back);
    }
}
