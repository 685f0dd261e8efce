use dcac::backbone::{Network, NetworkConfig};
use dcac::datapipe::toy_dataset;
use dcac::evaluation::{auroc, evaluate, public_private_split, score_manifest, ScoredSet, PUBLIC_FRACTION};
use dcac::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// probability a random positive outscores a random negative, ties count half
fn pairwise(scores: &[f64], labels: &[u8]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if labels[i] == 1 && labels[j] == 0 {
                pairs += 1.0;
                if scores[i] > scores[j] {
                    wins += 1.0;
                } else if scores[i] == scores[j] {
                    wins += 0.5;
                }
            }
        }
    }
    wins / pairs
}

#[test]
fn rank_auroc_matches_pairwise_oracle_with_ties() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let n = rng.random_range(2..=200);
        let levels = rng.random_range(1..=20);
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64 / levels as f64).collect();
        let mut labels: Vec<u8> = (0..n).map(|_| rng.random_bool(0.3) as u8).collect();
        labels[0] = 1;
        labels[1] = 0;
        let got = auroc(&scores, &labels).unwrap();
        worst = worst.max((got - pairwise(&scores, &labels)).abs());
    }
    assert!(worst <= 1e-12, "max deviation {worst}");
}

#[test]
fn auroc_edge_cases() {
    let labels = [0, 0, 1, 1];
    assert_eq!(auroc(&[0.1, 0.2, 0.3, 0.4], &labels).unwrap(), 1.0);
    assert_eq!(auroc(&[0.4, 0.3, 0.2, 0.1], &labels).unwrap(), 0.0);
    assert_eq!(auroc(&[0.5; 4], &labels).unwrap(), 0.5);
    assert!(matches!(auroc(&[0.1, 0.2], &[1, 1]), Err(Error::Data(_))));
    assert!(auroc(&[0.1, f64::NAN], &[0, 1]).is_err());
    assert!(auroc(&[0.1], &[0, 1]).is_err());
}

#[test]
fn auroc_is_rank_invariant_and_flips_with_labels() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..50 {
        let n = 60;
        let scores: Vec<f64> = (0..n).map(|_| (rng.random_range(0..15) as f64) / 15.0).collect();
        let mut labels: Vec<u8> = (0..n).map(|_| rng.random_bool(0.5) as u8).collect();
        labels[0] = 0;
        labels[1] = 1;
        let a = auroc(&scores, &labels).unwrap();
        let warped: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() - 7.0).collect();
        assert_eq!(auroc(&warped, &labels).unwrap(), a);
        let flipped: Vec<u8> = labels.iter().map(|l| 1 - l).collect();
        assert!((auroc(&scores, &flipped).unwrap() - (1.0 - a)).abs() < 1e-12);
    }
}

#[test]
fn public_private_split_sizes_and_properties() {
    let (p, q) = public_private_split(10, 0.3, 1).unwrap();
    assert_eq!((p.len(), q.len()), (3, 7));
    let (p, q) = public_private_split(1001, PUBLIC_FRACTION, 9).unwrap();
    assert_eq!(p.len(), 300);
    let mut all: Vec<usize> = p.iter().chain(&q).copied().collect();
    all.sort_unstable();
    assert_eq!(all, (0..1001).collect::<Vec<_>>());
    assert!(p.windows(2).all(|w| w[0] < w[1]));
    assert_eq!(public_private_split(1001, 0.3, 9).unwrap(), (p.clone(), q));
    assert_ne!(public_private_split(1001, 0.3, 10).unwrap().0, p);
    assert!(public_private_split(5, 1.0, 0).is_err());
}

#[test]
fn random_scorer_is_near_chance_on_both_parts() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let set = ScoredSet {
        image_names: (0..1000).map(|i| format!("img{i}")).collect(),
        scores: (0..1000).map(|_| rng.random::<f64>()).collect(),
        labels: (0..1000).map(|i| (i % 2) as u8).collect(),
    };
    let r = set.report(3).unwrap();
    for a in [r.auroc_public.unwrap(), r.auroc_private.unwrap()] {
        assert!((0.45..=0.55).contains(&a), "{a}");
    }
    assert_eq!((r.n_public, r.n_private, r.n_pos, r.n_neg), (300, 700, 500, 500));
}

#[test]
fn label_constant_scorer_is_perfect() {
    let labels: Vec<u8> = (0..40).map(|i| (i % 3 == 0) as u8).collect();
    let set = ScoredSet {
        image_names: (0..40).map(|i| format!("x{i}")).collect(),
        scores: labels.iter().map(|&l| if l == 1 { 0.9 } else { 0.1 }).collect(),
        labels,
    };
    let r = set.report(0).unwrap();
    assert_eq!(r.auroc_full, Some(1.0));
    assert_eq!(r.auroc_public, Some(1.0));
    assert_eq!(r.auroc_private, Some(1.0));
}

#[test]
fn single_class_part_reports_none() {
    let set = ScoredSet {
        image_names: vec!["a".into(), "b".into(), "c".into()],
        scores: vec![0.1, 0.2, 0.3],
        labels: vec![0, 0, 1],
    };
    let r = set.report(1).unwrap();
    assert_eq!(r.n_public, 1);
    assert_eq!(r.auroc_public, None);
}

#[test]
fn scored_csv_round_trips_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let set = ScoredSet {
        image_names: vec!["a".into(), "b".into()],
        scores: vec![0.1 + 0.2, 1.0 / 3.0],
        labels: vec![1, 0],
    };
    let path = dir.path().join("scores.csv");
    set.write_csv(&path).unwrap();
    assert_eq!(ScoredSet::read_csv(&path).unwrap(), set);
}

#[test]
fn evaluate_scores_in_manifest_order_and_reports_missing_images() {
    let (m, src) = toy_dataset(12, 32, 3).unwrap();
    let net = Network::new(NetworkConfig::tiny(), 0).unwrap();
    let (report, scored) = evaluate(&net, &m, &src, 32, 4).unwrap();
    assert_eq!(scored.len(), 12);
    assert_eq!(scored.image_names[0], m.records()[0].image_name);
    assert!(scored.scores.iter().all(|s| (0.0..=1.0).contains(s)));
    assert_eq!(report.n_pos + report.n_neg, 12);
    // batch size does not change scores
    let again = score_manifest(&net, &m, &src, 32, 5).unwrap();
    assert_eq!(again, scored);

    let mut partial = src.clone();
    partial.images.remove(&m.records()[3].image_name);
    let err = score_manifest(&net, &m, &partial, 32, 4).unwrap_err();
    assert!(err.to_string().contains(&m.records()[3].image_name), "{err}");
}
