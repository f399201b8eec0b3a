use proptest::prelude::*;

use ta2cl::loss::{async_infonce, ContrastiveBatch, LossConfig, SimilarityMode};
use ta2cl::pipeline::{smooth_sequence, ConfusionMatrix, Smoothing};
use ta2cl::preprocess::{detect_and_repair, ArtifactThresholds, Segment};
use ta2cl::similarity::{async_similarity, Aggregation, AsyncSimConfig, FeatureSequence};
use ta2cl::synth::{folds_for_subjects, FoldProtocol};
use ta2cl::Mat;

fn seq(t: usize, d: usize) -> impl Strategy<Value = FeatureSequence> {
    prop::collection::vec(-2.0f64..2.0, t * d)
        .prop_map(move |v| FeatureSequence::new(Mat::from_vec(t, d, v).unwrap()).unwrap())
}

fn batch() -> impl Strategy<Value = (Vec<FeatureSequence>, Vec<FeatureSequence>)> {
    (2usize..5, 2usize..6, 1usize..4).prop_flat_map(|(p, t, d)| {
        (
            prop::collection::vec(seq(t, d), p),
            prop::collection::vec(seq(t, d), p),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn infonce_is_positive_and_finite((a, v) in batch(), k in 1usize..3, tau in 0.05f64..2.0) {
        let cfg = LossConfig { tau, sim: AsyncSimConfig::with_k(k), mode: SimilarityMode::Async };
        let loss = async_infonce(&ContrastiveBatch::new(a, v).unwrap(), &cfg).unwrap();
        prop_assert!(loss > 0.0 && loss.is_finite());
    }

    #[test]
    fn token_mean_ignores_anchor_order(
        (u, v) in (1usize..7, 1usize..7, 1usize..5).prop_flat_map(|(tu, tv, d)| (seq(tu, d), seq(tv, d))),
        rot in 0usize..7,
    ) {
        let cfg = AsyncSimConfig::with_k(1);
        let perm: Vec<usize> = (0..u.len()).map(|i| (i + rot) % u.len()).collect();
        let a = async_similarity(&u, &v, &cfg).unwrap();
        let b = async_similarity(&u.permute_rows(&perm), &v, &cfg).unwrap();
        prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1e-300));
    }

    #[test]
    fn normalized_scores_lie_in_unit_interval(
        (u, v) in (1usize..7, 1usize..7, 1usize..5).prop_flat_map(|(tu, tv, d)| (seq(tu, d), seq(tv, d))),
        k in 1usize..4,
        sum_topk in any::<bool>(),
    ) {
        prop_assume!(k <= v.len());
        prop_assume!((0..u.len()).all(|i| u.tokens().row(i).iter().any(|x| *x != 0.0)));
        prop_assume!((0..v.len()).all(|i| v.tokens().row(i).iter().any(|x| *x != 0.0)));
        let cfg = AsyncSimConfig {
            k,
            topk_agg: if sum_topk { Aggregation::Sum } else { Aggregation::Mean },
            normalize_tokens: true,
            ..AsyncSimConfig::default()
        };
        let s = async_similarity(&u, &v, &cfg).unwrap();
        let bound = if sum_topk { k as f64 } else { 1.0 };
        prop_assert!(s.abs() <= bound + 1e-12);
    }

    #[test]
    fn repair_keeps_unflagged_channels_bit_exact(
        data in prop::collection::vec(-1.0f64..1.0, 4 * 250),
        bad in 0usize..4,
        start in 0usize..150,
        height in 20.0f64..100.0,
    ) {
        let mut m = Mat::from_vec(4, 250, data).unwrap();
        for j in start..start + 60 {
            m[(bad, j)] = height;
        }
        let seg = Segment::new(m, 125.0, 0, 0, 0).unwrap();
        let (out, flagged) = detect_and_repair(&seg, &[ArtifactThresholds::LONG, ArtifactThresholds::SPIKE]).unwrap();
        prop_assert!(flagged.contains(&bad));
        for c in 0..4 {
            if !flagged.contains(&c) {
                prop_assert_eq!(out.data.row(c), seg.data.row(c));
            }
        }
        prop_assert!(out.data.as_slice().iter().all(|x| x.is_finite()));
    }

    #[test]
    fn folds_never_share_subjects(n in 2u32..12, k in 2usize..6, seed in any::<u64>()) {
        prop_assume!(k <= n as usize);
        let subjects: Vec<u32> = (0..n).collect();
        let folds = folds_for_subjects(&subjects, FoldProtocol::KFoldSubjects(k), seed).unwrap();
        let mut tested: Vec<u32> = Vec::new();
        for f in &folds {
            prop_assert!(f.train.iter().all(|s| !f.test.contains(s)));
            prop_assert_eq!(f.train.len() + f.test.len(), n as usize);
            tested.extend(&f.test);
        }
        tested.sort_unstable();
        prop_assert_eq!(tested, subjects);
    }

    #[test]
    fn accuracy_is_trace_over_total(pairs in prop::collection::vec((0usize..4, 0usize..4), 1..200)) {
        let (truth, pred): (Vec<usize>, Vec<usize>) = pairs.iter().copied().unzip();
        let m = ConfusionMatrix::from_predictions(4, &truth, &pred).unwrap();
        let hits = truth.iter().zip(&pred).filter(|(a, b)| a == b).count();
        prop_assert_eq!(m.total(), truth.len());
        prop_assert!((m.accuracy() - hits as f64 / truth.len() as f64).abs() <= 1e-12);
        for c in 0..4 {
            prop_assert_eq!(m.row_sums()[c], truth.iter().filter(|&&t| t == c).count());
        }
    }

    #[test]
    fn lds_output_stays_within_observed_range(
        y in prop::collection::vec(-5.0f64..5.0, 1..40),
        ratio in 0.1f64..50.0,
    ) {
        let s = smooth_sequence(&y, Smoothing::Lds { ratio });
        prop_assert_eq!(s.len(), y.len());
        let lo = y.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = y.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(s.iter().all(|v| *v >= lo - 1e-9 && *v <= hi + 1e-9));
    }

    #[test]
    fn constant_sequences_are_smoothing_fixed_points(c in -10.0f64..10.0, n in 1usize..30, width in 0usize..3) {
        let y = vec![c; n];
        for method in [Smoothing::Lds { ratio: 10.0 }, Smoothing::MovingAverage { width: 2 * width + 1 }] {
            let s = smooth_sequence(&y, method);
            prop_assert!(s.iter().all(|v| (v - c).abs() <= 1e-12 * c.abs().max(1.0)));
        }
    }

    #[test]
    fn segment_file_roundtrip(
        (ch, n) in (1usize..5, 1usize..40),
        seed in any::<u64>(),
        subject in 0u32..1000,
        stimulus in 0u32..1000,
        label in 0usize..10,
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        // f32 on disk: draw values that are exactly representable
        let data = Mat::from_fn(ch, n, |_, _| (rng.gen::<f32>() * 100.0 - 50.0) as f64);
        let seg = Segment::new(data, 125.0, subject, stimulus, label).unwrap();
        let back = Segment::read_from(&mut seg.to_bytes().as_slice()).unwrap();
        prop_assert_eq!(back, seg);
    }
}
