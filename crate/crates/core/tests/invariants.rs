use instlabel_core::data::{bundled_digits, fold_split, generate_mnist_bags, make_folds, MnistBagsSpec, SplitFractions};
use instlabel_core::distill::{bernoulli_kl, soften, student_loss};
use instlabel_core::eval::auroc;
use instlabel_core::model::{FeatureExtractorSpec, MilModel, ModelSpec};
use instlabel_core::rng::{substream, Stream};
use instlabel_core::types::{Bag, DistillConfig, Instance, InstanceShape, PerturbNorm, VatConfig};
use instlabel_core::vat::{conditional_entropy, drop_instances, jitter_instances, vat_loss, ValueRange};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng as _;

const SHAPE: InstanceShape = InstanceShape { channels: 1, height: 8, width: 8 };

fn model(seed: u64) -> MilModel {
    let spec = ModelSpec::new(FeatureExtractorSpec::lenet5(SHAPE, 16));
    MilModel::new(spec, &mut substream(seed, Stream::Init)).unwrap()
}

fn random_bag(k: usize, seed: u64) -> Bag {
    let mut rng = substream(seed, Stream::Data);
    let instances = (0..k)
        .map(|_| Instance::from_vec(SHAPE, (0..64).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap())
        .collect();
    Bag::new(format!("p{seed}"), instances, rng.random_bool(0.5), None).unwrap()
}

fn brute_auroc(scores: &[f64], labels: &[bool]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &li) in labels.iter().enumerate() {
        for (j, &lj) in labels.iter().enumerate() {
            if li && !lj {
                pairs += 1.0;
                wins += if scores[i] > scores[j] {
                    1.0
                } else if scores[i] == scores[j] {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    wins / pairs
}

fn scored_labels() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
    (2usize..40).prop_flat_map(|n| {
        (prop::collection::vec(0u8..20, n), prop::collection::vec(any::<bool>(), n)).prop_filter_map("both classes", |(s, mut l)| {
            l[0] = true;
            l[1] = false;
            Some((s.into_iter().map(|v| v as f64 / 19.0).collect(), l))
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn bag_output_is_permutation_invariant(k in 1usize..=50, seed in 0u64..1000) {
        let m = model(seed % 7);
        let bag = random_bag(k, seed);
        let base = m.predict_bag(bag.view()).unwrap();
        let mut order: Vec<usize> = (0..k).collect();
        order.shuffle(&mut substream(seed, Stream::Shuffle));
        let out = m.predict_bag(bag.permuted(&order).unwrap().view()).unwrap();
        let rel = (out.positive_prob() - base.positive_prob()).abs() / base.positive_prob().abs().max(1e-300);
        prop_assert!(rel < 1e-6);
        for (i, &src) in order.iter().enumerate() {
            prop_assert_eq!(out.attention_weights[i], base.attention_weights[src]);
        }
        let total: f64 = base.attention_weights.iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
        prop_assert!(base.attention_weights.iter().all(|&w| w >= 0.0));
    }
}

proptest! {
    #[test]
    fn kl_is_nonnegative_and_zero_on_the_diagonal(p in 0.0f64..=1.0, q in 0.0f64..=1.0) {
        prop_assert!(bernoulli_kl(p, q).unwrap() >= 0.0);
        prop_assert!(bernoulli_kl(p, p).unwrap().abs() < 1e-9);
    }

    #[test]
    fn entropy_is_bounded_and_symmetric(p in 0.0f64..=1.0) {
        let h = conditional_entropy(p).unwrap();
        prop_assert!((0.0..=std::f64::consts::LN_2 + 1e-15).contains(&h));
        prop_assert!((h - conditional_entropy(1.0 - p).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn soften_is_a_distribution_that_flattens_with_temperature(
        logits in prop::collection::vec(-20.0f64..20.0, 2..6),
        tau in 0.1f64..10.0,
    ) {
        let p = soften(&logits, tau).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let argmax = |v: &[f64]| v.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        let hot = soften(&logits, tau * 2.0).unwrap();
        prop_assert_eq!(logits[argmax(&p)], logits[argmax(&logits)]);
        let max = |v: &[f64]| v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(max(&hot) <= max(&p) + 1e-12);
    }

    #[test]
    fn soften_ignores_a_common_shift(logits in prop::collection::vec(-20.0f64..20.0, 2..6), shift in -50.0f64..50.0, tau in 0.1f64..10.0) {
        let moved: Vec<f64> = logits.iter().map(|l| l + shift).collect();
        for (a, b) in soften(&logits, tau).unwrap().iter().zip(soften(&moved, tau).unwrap()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn auroc_matches_pairs_and_flips_with_labels((scores, labels) in scored_labels()) {
        let a = auroc(&scores, &labels).unwrap();
        prop_assert!((a - brute_auroc(&scores, &labels)).abs() < 1e-12);
        let flipped: Vec<bool> = labels.iter().map(|l| !l).collect();
        prop_assert!((auroc(&scores, &flipped).unwrap() - (1.0 - a)).abs() < 1e-12);
        let squashed: Vec<f64> = scores.iter().map(|s| (3.0 * s - 1.0).exp()).collect();
        prop_assert!((auroc(&squashed, &labels).unwrap() - a).abs() < 1e-12);
    }

    #[test]
    fn jitter_stays_within_ball_and_range(k in 1usize..8, delta in 0.0f64..0.5, linf in any::<bool>(), seed in 0u64..500) {
        let bag = random_bag(k, seed);
        let norm = if linf { PerturbNorm::Linf } else { PerturbNorm::L2 };
        let out = jitter_instances(bag.view(), delta, norm, ValueRange::unit(), &mut substream(seed, Stream::Perturbation)).unwrap();
        prop_assert_eq!(out.len(), k);
        for (a, b) in bag.instances().iter().zip(out.instances()) {
            let diff: Vec<f64> = a.data().iter().zip(b.data().iter()).map(|(x, y)| y - x).collect();
            let size = match norm {
                PerturbNorm::L2 => diff.iter().map(|d| d * d).sum::<f64>().sqrt(),
                PerturbNorm::Linf => diff.iter().fold(0.0f64, |m, d| m.max(d.abs())),
            };
            prop_assert!(size <= delta + 1e-12);
            prop_assert!(b.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn pruned_bag_is_a_strict_subset(k in 2usize..30, f in 0.05f64..0.95, seed in 0u64..500) {
        let bag = random_bag(k, seed);
        let pruned = drop_instances(bag.view(), f, &mut substream(seed, Stream::Perturbation)).unwrap();
        prop_assert!(!pruned.bag.is_empty() && pruned.bag.len() < k);
        let mut kept = pruned.kept.clone();
        kept.dedup();
        prop_assert_eq!(kept.len(), pruned.kept.len());
        for (i, &src) in pruned.kept.iter().enumerate() {
            prop_assert_eq!(pruned.bag.instances()[i].data(), bag.instances()[src].data());
        }
    }

    #[test]
    fn folds_partition_bags_and_splits_are_disjoint(n in 10usize..80, pos in 0.1f64..0.9, k in 2usize..6, seed in 0u64..100) {
        let labels: Vec<bool> = (0..n).map(|i| (i as f64) < pos * n as f64).collect();
        prop_assume!(labels.iter().filter(|&&l| l).count() >= k && labels.iter().filter(|&&l| !l).count() >= k);
        let folds = make_folds(&labels, k, seed).unwrap();
        let sizes: Vec<usize> = (0..k).map(|f| folds.iter().filter(|&&x| x == f).count()).collect();
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        for f in 0..k {
            let s = fold_split(&folds, &labels, f, &SplitFractions::default(), seed).unwrap();
            let mut all: Vec<usize> = s.train.iter().chain(&s.valid).chain(&s.test).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
            prop_assert!(s.test.iter().all(|&i| folds[i] == f));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn digit_bags_are_labelled_by_their_positive_digit(n in 1usize..40, k in 1.0f64..15.0, seed in 0u64..1000) {
        let pool = bundled_digits().unwrap();
        let bags = generate_mnist_bags(&MnistBagsSpec::new(n, k, seed), &pool).unwrap();
        prop_assert_eq!(bags.len(), n);
        for b in &bags {
            prop_assert!(!b.is_empty());
            let inst = b.instance_labels().unwrap();
            prop_assert_eq!(b.label(), inst.iter().any(|&l| l));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn loss_breakdowns_sum_to_the_total(
        k in 1usize..8,
        seed in 0u64..500,
        lambdas in prop::array::uniform4(0.0f64..2.0),
        gammas in prop::array::uniform4(0.0f64..2.0),
    ) {
        let bag = random_bag(k, seed);
        let m = model(seed % 5);
        let vat = VatConfig { lambda_c: lambdas[0], lambda_n: lambdas[1], lambda_delta: lambdas[2], lambda_e: lambdas[3], ..VatConfig::colon() };
        let loss = vat_loss(&m, bag.view(), &vat, ValueRange::unit(), &mut substream(seed, Stream::Perturbation)).unwrap();
        let sum: f64 = loss.weighted_terms(&vat).iter().sum();
        prop_assert!((sum - loss.total).abs() <= 1e-12 * loss.total.abs().max(1.0));

        let distill = DistillConfig { gamma_c: gammas[0], gamma_b: gammas[1], gamma_i: gammas[2], gamma_e: gammas[3], ..DistillConfig::default() };
        let loss = student_loss(&model(seed % 5 + 5), &m, bag.view(), &distill).unwrap();
        let sum: f64 = loss.weighted_terms(&distill).iter().sum();
        prop_assert!((sum - loss.total).abs() <= 1e-12 * loss.total.abs().max(1.0));
        prop_assert!(loss.bag_kd >= 0.0 && loss.instance_kd >= 0.0 && loss.instance_entropy >= 0.0);
    }
}
