use hddm::conversion::{eps_to_velocity, recover_x0, ConversionConfig};
use hddm::evaluation::{diversity, frechet_distance};
use hddm::netcore::{ArchConfig, ExpertModel, Network, Objective};
use hddm::partition::{hierarchical_kmeans, shard, Metric};
use hddm::sampler::{select_weights, softmax, Selection, ThresholdOrder};
use hddm::{rng, Schedule, SyntheticDataset};
use proptest::prelude::*;

fn points(dim: usize, min: usize, max: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-20.0f64..20.0, dim), min..max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn clustering_partitions_every_point(pts in points(2, 20, 80), k in 1usize..5, seed in 0u64..1000) {
        let data = SyntheticDataset::from_points(2, pts).unwrap();
        let m = (2 * k).min(data.len());
        let a = hierarchical_kmeans(&data, m, k, Metric::Euclidean, seed).unwrap();
        prop_assert_eq!(a.assignment.len(), data.len());
        prop_assert!(a.assignment.iter().all(|&c| c < k));
        let shards: Vec<SyntheticDataset> = (0..k).map(|j| shard(&data, &a, j).unwrap()).collect();
        prop_assert_eq!(shards.iter().map(|s| s.len()).sum::<usize>(), data.len());
        prop_assert_eq!(shards.iter().map(|s| s.len()).collect::<Vec<_>>(), a.sizes());
    }

    #[test]
    fn clustering_is_seed_deterministic(pts in points(2, 20, 60), seed in 0u64..1000) {
        let data = SyntheticDataset::from_points(2, pts).unwrap();
        let a = hierarchical_kmeans(&data, 6, 3, Metric::Euclidean, seed).unwrap();
        let b = hierarchical_kmeans(&data, 6, 3, Metric::Euclidean, seed).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn frechet_is_symmetric_and_nonnegative(a in points(2, 4, 30), b in points(2, 4, 30)) {
        let ab = frechet_distance(&a, &b).unwrap();
        let ba = frechet_distance(&b, &a).unwrap();
        prop_assert!(ab.value >= 0.0);
        prop_assert!((ab.value - ba.value).abs() <= 1e-6 * (1.0 + ab.value));
    }

    #[test]
    fn frechet_ignores_common_translation(a in points(2, 4, 20), b in points(2, 4, 20), s in prop::array::uniform2(-10.0f64..10.0)) {
        let shift = |p: &[Vec<f64>]| -> Vec<Vec<f64>> { p.iter().map(|v| vec![v[0] + s[0], v[1] + s[1]]).collect() };
        let f = frechet_distance(&a, &b).unwrap().value;
        let g = frechet_distance(&shift(&a), &shift(&b)).unwrap().value;
        prop_assert!((f - g).abs() <= 1e-6 * (1.0 + f));
    }

    #[test]
    fn diversity_translates_and_scales(p in points(3, 2, 25), s in prop::array::uniform3(-5.0f64..5.0), c in 0.1f64..10.0) {
        let base = diversity(&p, None).unwrap().mean_pairwise;
        let moved: Vec<Vec<f64>> = p.iter().map(|v| v.iter().zip(&s).map(|(x, d)| c * x + d).collect()).collect();
        let after = diversity(&moved, None).unwrap().mean_pairwise;
        prop_assert!((after - c * base).abs() <= 1e-9 * (1.0 + c * base));
    }

    #[test]
    fn selected_weights_renormalize(logits in prop::collection::vec(-8.0f64..8.0, 2..10), k in 1usize..10, t in 0.0f64..1.0, tau in 0.0f64..1.0) {
        let n = logits.len();
        let probs = softmax(&logits);
        let objectives: Vec<Objective> = (0..n).map(|i| if i % 3 == 0 { Objective::Epsilon } else { Objective::Velocity }).collect();
        let selections = [
            Selection::Top1,
            Selection::TopK(k.min(n)),
            Selection::Full,
            Selection::Threshold { tau, order: ThresholdOrder::VelocityHighNoise },
        ];
        for sel in selections {
            let w = select_weights(&probs, &objectives, sel, t).unwrap();
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(w.iter().all(|v| *v >= 0.0));
            let kept = w.iter().filter(|v| **v > 0.0).count();
            match sel {
                Selection::Top1 => prop_assert_eq!(kept, 1),
                Selection::TopK(m) => prop_assert!(kept <= m),
                _ => {}
            }
        }
    }

    #[test]
    fn exact_linear_conversion_is_eps_minus_x0(x in prop::collection::vec(-5.0f64..5.0, 3), e in prop::collection::vec(-5.0f64..5.0, 3), t in 0.01f64..0.99) {
        let cfg = ConversionConfig::exact();
        let x0 = recover_x0(&x, &e, t, &Schedule::Linear, &cfg).unwrap();
        let v = eps_to_velocity(&x, &e, t, &Schedule::Linear, &cfg).unwrap();
        for i in 0..3 {
            prop_assert!((v[i] - (e[i] - x0[i])).abs() < 1e-9 * (1.0 + x0[i].abs()));
        }
    }

    #[test]
    fn clamped_recovery_is_bounded(x in prop::collection::vec(-1e3f64..1e3, 2), e in prop::collection::vec(-1e3f64..1e3, 2), t in 0.0f64..1.0) {
        let cfg = ConversionConfig::default();
        let r = cfg.clamp.unwrap();
        for v in recover_x0(&x, &e, t, &Schedule::Cosine, &cfg).unwrap() {
            prop_assert!(v.abs() <= r);
        }
    }

    #[test]
    fn checkpoint_round_trips(seed in 0u64..10_000, hidden in 2usize..9, blocks in 1usize..3) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.hddm");
        let mut model = ExpertModel::new(Objective::Velocity, Schedule::Cosine, ArchConfig::expert(2, hidden, blocks, 3), seed).unwrap();
        let mut r = rng::stream(seed, "test/perturb", 0);
        for v in model.network_mut().params_mut() {
            *v = rand::Rng::random_range(&mut r, -1.0..1.0);
        }
        model.save(&path).unwrap();
        let back = ExpertModel::load(&path).unwrap();
        prop_assert_eq!(back.network().params(), model.network().params());
        prop_assert_eq!(back.network().ema(), model.network().ema());
        prop_assert!(model.to_checkpoint().diff(&back.to_checkpoint()).unwrap().is_empty());
    }

    #[test]
    fn derived_seeds_are_stable_and_label_sensitive(seed in any::<u64>(), i in 0u64..100) {
        prop_assert_eq!(rng::derive_seed(seed, "a", i), rng::derive_seed(seed, "a", i));
        prop_assert_ne!(rng::derive_seed(seed, "a", i), rng::derive_seed(seed, "b", i));
        prop_assert_ne!(rng::derive_seed(seed, "a", i), rng::derive_seed(seed, "a", i + 1));
    }
}

#[test]
fn fresh_networks_ignore_inputs() {
    let net = Network::new(ArchConfig::expert(3, 16, 2, 5), 1).unwrap();
    for c in [None, Some(0), Some(4)] {
        assert!(net.forward(&[3.0, -1.0, 2.0], 0.7, c, false).unwrap().iter().all(|v| *v == 0.0));
    }
}
