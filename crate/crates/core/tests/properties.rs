use std::collections::HashSet;

use proptest::prelude::*;

use finegrain::afem::{adaptive_pool, loss_clip, DynamicWeights, PatchFeatureMap};
use finegrain::corpus::{generate_toy_world, parse_jsonl, split_ids, summarize_to_buckets, to_jsonl, Bucket, ExtractiveSummarizer};
use finegrain::diffusion::{add_noise_at, Latent};
use finegrain::evalhub::{diversity_metric, CellStats};
use finegrain::refiner::PooledFeature;
use finegrain::sampler::{filter_probs, sample_index};
use finegrain::tensor::Matrix;
use finegrain::textcore::token_count;
use finegrain::trainer::{total_loss, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn distribution(max: usize) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(0.001f64..1.0, 1..max).prop_map(|v| {
        let s: f64 = v.iter().sum();
        v.into_iter().map(|x| x / s).collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn nucleus_output_is_a_distribution(probs in distribution(12), k in 1usize..15, p in 0.05f64..=1.0) {
        let out = filter_probs(&probs, k, p);
        let support: Vec<usize> = (0..out.len()).filter(|&i| out[i] > 0.0).collect();
        prop_assert!(!support.is_empty() && support.len() <= k);
        prop_assert!((out.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        let kept_mass: f64 = support.iter().map(|&i| probs[i]).sum();
        prop_assert!(kept_mass >= p - 1e-12 || support.len() == k.min(probs.len()));
        // Everything kept is at least as likely as everything dropped.
        let min_kept = support.iter().map(|&i| probs[i]).fold(f64::INFINITY, f64::min);
        for i in 0..probs.len() {
            if out[i] == 0.0 {
                prop_assert!(probs[i] <= min_kept);
            }
        }
    }

    #[test]
    fn samples_stay_in_support(probs in distribution(10), k in 1usize..10, seed in any::<u64>()) {
        let out = filter_probs(&probs, k, 0.9);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..20 {
            prop_assert!(out[sample_index(&out, &mut rng)] > 0.0);
        }
    }

    #[test]
    fn adaptive_pool_is_a_convex_combination(rows in 1usize..6, cols in 1usize..6, w in distribution(6), seed in any::<u64>()) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w: Vec<f64> = w.into_iter().take(rows).collect();
        prop_assume!(w.len() == rows);
        let s: f64 = w.iter().sum();
        let w: Vec<f64> = w.iter().map(|x| x / s).collect();
        let m = Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-3.0..3.0)).collect());
        let pooled = adaptive_pool(&PatchFeatureMap(m.clone()), &DynamicWeights(w)).unwrap();
        for j in 0..cols {
            let col: Vec<f64> = (0..rows).map(|i| m.get(i, j)).collect();
            let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(pooled.0[j] >= lo - 1e-12 && pooled.0[j] <= hi + 1e-12);
        }
    }

    #[test]
    fn clip_loss_ignores_feature_scale(b in 2usize..5, seed in any::<u64>(), k in 0.1f64..10.0) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut feat = || PooledFeature((0..4).map(|_| rng.random_range(0.1..1.0)).collect());
        let t: Vec<_> = (0..b).map(|_| feat()).collect();
        let v: Vec<_> = (0..b).map(|_| feat()).collect();
        let scaled: Vec<_> = t.iter().map(|f| PooledFeature(f.0.iter().map(|x| x * k).collect())).collect();
        prop_assert!((loss_clip(&t, &v).unwrap() - loss_clip(&scaled, &v).unwrap()).abs() <= 1e-9);
    }

    #[test]
    fn total_loss_is_the_weighted_sum(mse in 0.0f64..10.0, sft in 0.0f64..10.0, clip in -5.0f64..10.0,
                                      a1 in 0.0f64..2.0, a2 in 0.0f64..2.0) {
        let cfg = TrainConfig { alpha1: a1, alpha2: a2, ..Default::default() };
        let b = total_loss(mse, sft, clip, &cfg).unwrap();
        prop_assert!((b.total - (mse + a1 * sft + a2 * clip)).abs() <= 1e-12);
    }

    #[test]
    fn noising_interpolates_between_endpoints(ab in 0.0f64..=1.0, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z0 = Latent::gaussian(2, 2, &mut rng);
        let eps = Latent::gaussian(2, 2, &mut rng);
        let z = add_noise_at(&z0, &eps, ab).unwrap();
        for ((a, e), v) in z0.values.data().iter().zip(eps.values.data()).zip(z.values.data()) {
            prop_assert!((v - (ab.sqrt() * a + (1.0 - ab).sqrt() * e)).abs() <= 1e-12);
        }
    }

    #[test]
    fn split_partitions_ids(n in 2usize..300, seed in any::<u64>(), ratio in 0.05f64..0.95) {
        let ids: Vec<String> = (0..n).map(|i| format!("r{i}")).collect();
        let s = split_ids(&ids, seed, ratio).unwrap();
        prop_assert_eq!(s.train.len(), (ratio * n as f64).round() as usize);
        let train: HashSet<_> = s.train.iter().collect();
        prop_assert!(s.test.iter().all(|t| !train.contains(t)));
        prop_assert_eq!(s.train.len() + s.test.len(), n);
        let mut shuffled = ids.clone();
        shuffled.reverse();
        prop_assert_eq!(split_ids(&shuffled, seed, ratio).unwrap(), s);
    }

    #[test]
    fn toy_records_respect_buckets_and_round_trip(n in 1usize..30, seed in any::<u64>()) {
        let records = generate_toy_world(n, seed).unwrap();
        for r in &records {
            prop_assert!(r.validate().is_ok());
            let again = summarize_to_buckets(&r.fine_prompt, &ExtractiveSummarizer).unwrap();
            prop_assert_eq!(&again, &r.coarse_prompts);
            for b in Bucket::ALL {
                prop_assert!(token_count(r.coarse(b).unwrap()) <= b.cap());
            }
        }
        let text = to_jsonl(&records).unwrap();
        prop_assert_eq!(parse_jsonl(&text).unwrap(), records);
    }

    #[test]
    fn diversity_is_bounded(sets in proptest::collection::vec(
        proptest::collection::vec(proptest::collection::vec(prop_oneof![Just("a"), Just("b"), Just("c"), Just("d")], 1..4), 2..4), 1..4)) {
        let sets: Vec<Vec<String>> = sets.into_iter().map(|s| s.into_iter().map(|w| w.join(" ")).collect()).collect();
        let d = diversity_metric(&sets).unwrap();
        prop_assert!((0.0..=1.0).contains(&d));
        let all_same = sets.iter().all(|s| {
            let first: HashSet<&str> = s[0].split(' ').collect();
            s.iter().all(|c| c.split(' ').collect::<HashSet<_>>() == first)
        });
        prop_assert_eq!(d == 0.0, all_same);
    }

    #[test]
    fn cell_stats_match_definition(v in proptest::collection::vec(-100.0f64..100.0, 1..40)) {
        let s = CellStats::from_values(&v).unwrap();
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        prop_assert_eq!(s.count, v.len());
        prop_assert!((s.mean - mean).abs() <= 1e-9);
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        prop_assert!((s.stddev - var.sqrt()).abs() <= 1e-9);
    }
}
