use ctf_core::clustering::{decode_cluster_map, encode_cluster_map, kmeans, random_clustering, ClusterMap, Provenance};
use ctf_core::tokenizer::{Codebook, TokenGrid};
use ctf_tensor::SeedStream;
use proptest::prelude::*;

fn sq(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| ((x - y) as f64).powi(2)).sum()
}

fn codebook_strategy() -> impl Strategy<Value = (Codebook, usize, u64)> {
    (4usize..40, 1usize..5, any::<u64>()).prop_flat_map(|(k, d, seed)| {
        (1usize..=k).prop_map(move |m| (Codebook::random(k, d, &mut SeedStream::new(seed)).unwrap(), m, seed))
    })
}

fn check_partition(map: &ClusterMap) {
    let k = map.k();
    let mut seen = vec![false; k];
    let mut total = 0;
    for c in 0..map.m() {
        let members = map.members(c).unwrap();
        assert!(!members.is_empty(), "cluster {c} empty");
        assert!(members.windows(2).all(|w| w[0] < w[1]), "members sorted");
        for &i in members {
            assert!(!seen[i], "fine index {i} in two clusters");
            seen[i] = true;
            assert_eq!(map.phi(i).unwrap(), c);
        }
        total += members.len();
    }
    assert_eq!(total, k);
    assert!(seen.into_iter().all(|s| s));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn kmeans_is_a_partition_at_nearest_centroids((cb, m, seed) in codebook_strategy()) {
        let map = kmeans(&cb, m, seed, 50, 1e-6).unwrap();
        prop_assert_eq!(map.provenance, Provenance::Kmeans);
        check_partition(&map);
        prop_assert!(map.sse_history.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-12) + 1e-12));
        for i in 0..cb.k() {
            let own = sq(map.centroid(map.phi(i).unwrap()), cb.entry(i));
            for c in 0..m {
                prop_assert!(own <= sq(map.centroid(c), cb.entry(i)) + 1e-9, "point {} closer to {}", i, c);
            }
        }
    }

    #[test]
    fn random_clustering_is_balanced_and_deterministic((cb, m, seed) in codebook_strategy()) {
        let a = random_clustering(&cb, m, seed).unwrap();
        let b = random_clustering(&cb, m, seed).unwrap();
        prop_assert_eq!(a.assignment(), b.assignment());
        check_partition(&a);
        let sizes = a.cluster_sizes();
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        // centroids are member means
        for c in 0..m {
            let members = a.members(c).unwrap();
            for j in 0..cb.d() {
                let mean = members.iter().map(|&i| cb.entry(i)[j] as f64).sum::<f64>() / members.len() as f64;
                prop_assert!((a.centroid(c)[j] as f64 - mean).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn coarsen_keeps_tokens_inside_their_clusters((cb, m, seed) in codebook_strategy(), picks in prop::collection::vec(any::<usize>(), 16)) {
        let map = kmeans(&cb, m, seed, 20, 1e-6).unwrap();
        let tokens: Vec<usize> = picks.iter().map(|p| p % cb.k()).collect();
        let grid = TokenGrid::new(4, 4, tokens.clone()).unwrap();
        let coarse = map.coarsen(&grid).unwrap();
        prop_assert_eq!((coarse.h, coarse.w), (4, 4));
        for (t, c) in tokens.iter().zip(&coarse.tokens) {
            prop_assert!(map.members(*c).unwrap().contains(t));
        }
    }

    #[test]
    fn cluster_file_round_trip((cb, m, seed) in codebook_strategy()) {
        let map = kmeans(&cb, m, seed, 10, 1e-6).unwrap();
        let back = decode_cluster_map(&encode_cluster_map(&map).unwrap()).unwrap();
        prop_assert_eq!(back.assignment(), map.assignment());
        prop_assert_eq!(back.centroids(), map.centroids());
        prop_assert_eq!(back.m(), map.m());
        prop_assert_eq!(back.sse, map.sse);
    }
}

#[test]
fn kmeans_beats_random_partitions_on_most_seeds() {
    let mut wins = 0;
    for seed in 0..20 {
        let cb = Codebook::random(64, 16, &mut SeedStream::new(1000 + seed)).unwrap();
        let km = kmeans(&cb, 16, seed, 100, 1e-6).unwrap();
        let rnd = random_clustering(&cb, 16, seed).unwrap();
        if km.sse <= rnd.sse {
            wins += 1;
        }
    }
    assert!(wins >= 19, "k-means won {wins}/20");
}

#[test]
fn full_scale_codebook_gives_mean_cluster_size_32() {
    let cb = Codebook::random(16384, 4, &mut SeedStream::new(2)).unwrap();
    let map = kmeans(&cb, 512, 0, 3, 1e-6).unwrap();
    let sizes = map.cluster_sizes();
    assert_eq!(sizes.iter().sum::<usize>() as f64 / sizes.len() as f64, 32.0);
    assert!(*sizes.iter().min().unwrap() > 0);
}

#[test]
fn phi_lookup_on_a_fixed_assignment() {
    let cb = Codebook::new(4, 1, vec![0.0, 1.0, 2.0, 3.0]).unwrap();
    let map = ClusterMap::from_assignment(&cb, vec![0, 0, 1, 1], 2).unwrap();
    assert_eq!(map.phi(2).unwrap(), 1);
    assert_eq!(map.members(0).unwrap(), &[0, 1]);
    assert!(map.phi(4).is_err());
    assert!(map.members(2).is_err());
}
