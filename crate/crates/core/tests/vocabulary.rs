mod common;

use common::{clustered_corpus, leaf_by_enumeration, random_bits};
use featslam::features::Descriptor;
use featslam::place_recognition::{score, train_vocabulary, validate_training, PlaceError, Vocabulary};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn self_score_is_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let corpus: Vec<Vec<Descriptor>> = (0..20).map(|_| (0..50).map(|_| random_bits(&mut rng, 256)).collect()).collect();
    let v = train_vocabulary(&corpus, 4, 3, 0).unwrap();
    for doc in &corpus {
        let bow = v.to_bow(doc).unwrap();
        assert!((score(&bow, &bow) - 1.0).abs() < 1e-12);
    }
}

#[test]
fn toy_tree_leaf_assignment_matches_enumeration() {
    let (docs, protos) = clustered_corpus(3);
    let v = train_vocabulary(&docs, 2, 2, 9).unwrap();
    assert_eq!(v.word_count(), 4, "one leaf per prototype");
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..500 {
        let d = random_bits(&mut rng, 64);
        assert_eq!(v.descend(&d).0, leaf_by_enumeration(&v, &d));
    }
    // prototypes land in four distinct leaves, each the nearest leaf centroid
    let leaves: Vec<_> = protos.iter().map(|p| v.descend(p).0).collect();
    let mut unique = leaves.clone();
    unique.sort();
    unique.dedup();
    assert_eq!(unique.len(), 4);
    let centroids = v.word_centroids();
    for (p, w) in protos.iter().zip(&leaves) {
        let nearest = (0..centroids.len())
            .min_by(|&a, &b| centroids[a].distance(p).total_cmp(&centroids[b].distance(p)))
            .unwrap();
        assert_eq!(nearest as u32, *w);
    }
}

#[test]
fn vocabulary_file_round_trips_bit_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let corpus: Vec<Vec<Descriptor>> = (0..10).map(|_| (0..40).map(|_| random_bits(&mut rng, 256)).collect()).collect();
    let v = train_vocabulary(&corpus, 3, 3, 5).unwrap();
    let bytes = v.to_bytes();
    let back = Vocabulary::from_bytes(&bytes).unwrap();
    assert_eq!(back, v);
    assert_eq!(back.to_bytes(), bytes);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("voc.fslv");
    v.write(&path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), bytes);
    assert_eq!(Vocabulary::read(&path).unwrap(), v);
}

#[test]
fn real_valued_vocabulary_round_trips() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let corpus: Vec<Vec<Descriptor>> = (0..8)
        .map(|_| (0..30).map(|_| Descriptor::Real((0..16).map(|_| rng.random_range(-1.0..1.0)).collect())).collect())
        .collect();
    let v = train_vocabulary(&corpus, 3, 2, 1).unwrap();
    assert_eq!(Vocabulary::from_bytes(&v.to_bytes()).unwrap().to_bytes(), v.to_bytes());
}

#[test]
fn truncated_or_corrupt_files_are_rejected() {
    let (docs, _) = clustered_corpus(1);
    let bytes = train_vocabulary(&docs, 2, 2, 0).unwrap().to_bytes();
    assert!(Vocabulary::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(Vocabulary::from_bytes(&bad).is_err());
}

#[test]
fn training_is_deterministic_per_seed() {
    let (docs, _) = clustered_corpus(5);
    assert_eq!(train_vocabulary(&docs, 2, 3, 42).unwrap().to_bytes(), train_vocabulary(&docs, 2, 3, 42).unwrap().to_bytes());
}

#[test]
fn corpus_smaller_than_branching_is_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let corpus = vec![(0..5).map(|_| random_bits(&mut rng, 256)).collect::<Vec<_>>()];
    assert!(matches!(train_vocabulary(&corpus, 10, 2, 0), Err(PlaceError::CorpusTooSmall { size: 5, k: 10 })));
    assert!(matches!(validate_training(&corpus, 10, 6), Err(PlaceError::CorpusTooSmall { .. })));
    assert!(matches!(validate_training(&[], 2, 2), Err(PlaceError::CorpusTooSmall { size: 0, .. })));
}

#[test]
fn large_tree_parameters_validate_without_training() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let corpus = vec![(0..20).map(|_| random_bits(&mut rng, 256)).collect::<Vec<_>>()];
    assert!(validate_training(&corpus, 10, 6).is_ok());
    assert!(matches!(validate_training(&corpus, 1, 3), Err(PlaceError::InvalidParameters(_))));
    assert!(matches!(validate_training(&corpus, 10, 40), Err(PlaceError::InvalidParameters(_))));
}

#[test]
fn mixed_variants_are_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let corpus = vec![vec![random_bits(&mut rng, 256), random_bits(&mut rng, 128), random_bits(&mut rng, 256)]];
    assert!(matches!(validate_training(&corpus, 2, 1), Err(PlaceError::VariantMismatch(..))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn scores_are_symmetric_and_bounded(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let corpus: Vec<Vec<Descriptor>> = (0..6).map(|_| (0..30).map(|_| random_bits(&mut rng, 256)).collect()).collect();
        let v = train_vocabulary(&corpus, 3, 2, seed).unwrap();
        let a = v.to_bow(&corpus[0]).unwrap();
        let b = v.to_bow(&corpus[1]).unwrap();
        let s = score(&a, &b);
        prop_assert!((0.0..=1.0 + 1e-12).contains(&s));
        prop_assert!((s - score(&b, &a)).abs() < 1e-15);
    }
}
