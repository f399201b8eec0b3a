//! Token-level similarity between feature sequences.
//!
//! A feature sequence is a `T x D` matrix whose rows are temporal tokens.
//! The asynchronous score lets every anchor token pick its `K` best matches
//! anywhere in the comparison sequence, so two sequences carrying the same
//! local pattern at different positions still score high:
//!
//! ```text
//! S(U -> V) = agg_i  agg_k  TopK_k { u_i . v_j : j = 1..T_v }
//! ```
//!
//! With both aggregations set to `Mean` this is the mean over anchor tokens
//! of the mean of their top-K dot products. `K = 1` with a token `Sum` is the
//! classical MaxSim late-interaction score.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::tape::{Tape, Var};

/// `T x D` matrix of temporal token embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence(Mat);

impl FeatureSequence {
    pub fn new(tokens: Mat) -> Result<Self> {
        if tokens.rows() == 0 || tokens.cols() == 0 {
            return Err(Error::InvalidConfig(format!(
                "feature sequence needs T >= 1 and D >= 1, got {:?}",
                tokens.shape()
            )));
        }
        Ok(Self(tokens))
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        Self::new(Mat::from_rows(rows))
    }

    /// Number of tokens.
    pub fn len(&self) -> usize {
        self.0.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.0.rows() == 0
    }

    /// Feature dimension.
    pub fn dim(&self) -> usize {
        self.0.cols()
    }

    pub fn tokens(&self) -> &Mat {
        &self.0
    }

    pub fn into_inner(self) -> Mat {
        self.0
    }

    /// Copy with rows reordered as `perm[i]`-th input row at position `i`.
    pub fn permute_rows(&self, perm: &[usize]) -> Self {
        Self(self.0.select_rows(perm))
    }

    /// Copy with every row scaled to unit L2 norm.
    pub fn normalized(&self) -> Result<Self> {
        let mut m = self.0.clone();
        for i in 0..m.rows() {
            let row = m.row_mut(i);
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n == 0.0 {
                return Err(Error::ZeroNorm("FeatureSequence::normalized"));
            }
            row.iter_mut().for_each(|x| *x /= n);
        }
        Ok(Self(m))
    }
}

/// How a group of scores is reduced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Aggregation {
    Mean,
    Sum,
}

impl Aggregation {
    pub fn is_mean(self) -> bool {
        matches!(self, Aggregation::Mean)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AsyncSimConfig {
    pub k: usize,
    pub topk_agg: Aggregation,
    pub token_agg: Aggregation,
    /// L2-normalize tokens before the dot products.
    pub normalize_tokens: bool,
    /// Average `S(U->V)` and `S(V->U)` instead of the one-directional score.
    pub symmetric: bool,
}

impl Default for AsyncSimConfig {
    fn default() -> Self {
        Self {
            k: 1,
            topk_agg: Aggregation::Mean,
            token_agg: Aggregation::Mean,
            normalize_tokens: false,
            symmetric: false,
        }
    }
}

impl AsyncSimConfig {
    pub fn with_k(k: usize) -> Self {
        Self {
            k,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::InvalidConfig("similarity k must be >= 1".into()));
        }
        Ok(())
    }
}

/// `T_u x T_v` token dot products; row `i` is the similarity set of `u_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix(Mat);

impl SimilarityMatrix {
    pub fn scores(&self) -> &Mat {
        &self.0
    }

    /// Similarities of anchor token `i` against every comparison token.
    pub fn row(&self, i: usize) -> &[f64] {
        self.0.row(i)
    }
}

fn check_dims(u: &FeatureSequence, v: &FeatureSequence) -> Result<()> {
    if u.dim() != v.dim() {
        return Err(Error::ShapeMismatch {
            lhs: u.tokens().shape(),
            rhs: v.tokens().shape(),
            context: "feature dimension",
        });
    }
    Ok(())
}

pub fn pairwise_similarity(u: &FeatureSequence, v: &FeatureSequence) -> Result<SimilarityMatrix> {
    check_dims(u, v)?;
    Ok(SimilarityMatrix(u.tokens().matmul_nt(v.tokens())?))
}

/// Sum over anchor tokens of their best dot product against `v`.
pub fn maxsim(u: &FeatureSequence, v: &FeatureSequence) -> Result<f64> {
    let cfg = AsyncSimConfig {
        k: 1,
        topk_agg: Aggregation::Sum,
        token_agg: Aggregation::Sum,
        normalize_tokens: false,
        symmetric: false,
    };
    async_similarity(u, v, &cfg)
}

/// Asynchronous TopK similarity `S(U -> V)` (or its symmetrized mean when configured).
pub fn async_similarity(u: &FeatureSequence, v: &FeatureSequence, cfg: &AsyncSimConfig) -> Result<f64> {
    let mut tape = Tape::new();
    let uv = tape.constant(u.tokens().clone());
    let vv = tape.constant(v.tokens().clone());
    let s = async_similarity_var(&mut tape, uv, vv, cfg)?;
    Ok(tape.value(s).item())
}

/// Differentiable form of [`async_similarity`] over token matrices on a tape.
pub fn async_similarity_var(tape: &mut Tape, u: Var, v: Var, cfg: &AsyncSimConfig) -> Result<Var> {
    cfg.validate()?;
    let (su, sv) = (tape.shape(u), tape.shape(v));
    if su.1 != sv.1 {
        return Err(Error::ShapeMismatch {
            lhs: su,
            rhs: sv,
            context: "feature dimension",
        });
    }
    let (u, v) = if cfg.normalize_tokens {
        (tape.row_l2_normalize(u)?, tape.row_l2_normalize(v)?)
    } else {
        (u, v)
    };
    let forward = directed(tape, u, v, cfg)?;
    if !cfg.symmetric {
        return Ok(forward);
    }
    let backward = directed(tape, v, u, cfg)?;
    let both = tape.add(forward, backward)?;
    Ok(tape.scale(both, 0.5))
}

fn directed(tape: &mut Tape, u: Var, v: Var, cfg: &AsyncSimConfig) -> Result<Var> {
    let sims = tape.matmul_nt(u, v)?;
    tape.topk_reduce(sims, cfg.k, cfg.topk_agg.is_mean(), cfg.token_agg.is_mean())
}

/// Cosine between the flattened `T x D` sequences (hard, position-by-position alignment).
pub fn global_cosine(u: &FeatureSequence, v: &FeatureSequence) -> Result<f64> {
    let mut tape = Tape::new();
    let uv = tape.constant(u.tokens().clone());
    let vv = tape.constant(v.tokens().clone());
    let c = tape.cosine(uv, vv)?;
    Ok(tape.value(c).item())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::check_grad;
    use proptest::prelude::*;
    use rand::{seq::SliceRandom, Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn seq(rows: &[&[f64]]) -> FeatureSequence {
        FeatureSequence::from_rows(rows).unwrap()
    }

    fn random_seq(rng: &mut impl Rng, t: usize, d: usize) -> FeatureSequence {
        FeatureSequence::new(Mat::from_fn(t, d, |_, _| rng.gen_range(-1.0..1.0))).unwrap()
    }

    fn cfg(k: usize, topk: Aggregation, token: Aggregation) -> AsyncSimConfig {
        AsyncSimConfig {
            k,
            topk_agg: topk,
            token_agg: token,
            ..AsyncSimConfig::default()
        }
    }

    /// Full-sort reference: sort each similarity row, average the head, average over rows.
    fn oracle(u: &FeatureSequence, v: &FeatureSequence, k: usize) -> f64 {
        let mut total = 0.0;
        for i in 0..u.len() {
            let mut row: Vec<f64> = (0..v.len())
                .map(|j| {
                    let mut s = 0.0;
                    for d in 0..u.dim() {
                        s += u.tokens()[(i, d)] * v.tokens()[(j, d)];
                    }
                    s
                })
                .collect();
            row.sort_by(|a, b| b.partial_cmp(a).unwrap());
            total += row[..k].iter().sum::<f64>() / k as f64;
        }
        total / u.len() as f64
    }

    #[test]
    fn pairwise_examples() {
        let s = pairwise_similarity(&seq(&[&[1.0, 0.0], &[0.0, 1.0]]), &seq(&[&[1.0, 0.0]])).unwrap();
        assert_eq!(s.scores(), &Mat::from_rows(&[[1.0], [0.0]]));
        let s = pairwise_similarity(&seq(&[&[2.0, 0.0]]), &seq(&[&[2.0, 0.0]])).unwrap();
        assert_eq!(s.scores(), &Mat::from_rows(&[[4.0]]));
    }

    #[test]
    fn pairwise_matches_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let u = random_seq(&mut rng, 3, 4);
        let v = random_seq(&mut rng, 5, 4);
        let s = pairwise_similarity(&u, &v).unwrap();
        for i in 0..3 {
            for j in 0..5 {
                let mut want = 0.0;
                for d in 0..4 {
                    want += u.tokens()[(i, d)] * v.tokens()[(j, d)];
                }
                assert!((s.scores()[(i, j)] - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn dimension_mismatch_errors() {
        let u = seq(&[&[1.0, 0.0]]);
        let v = seq(&[&[1.0, 0.0, 0.0]]);
        assert!(pairwise_similarity(&u, &v).is_err());
        assert!(maxsim(&u, &v).is_err());
        assert!(async_similarity(&u, &v, &AsyncSimConfig::default()).is_err());
        assert!(global_cosine(&u, &v).is_err());
    }

    #[test]
    fn maxsim_examples() {
        let u = seq(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let v = seq(&[&[0.0, 1.0], &[1.0, 0.0]]);
        assert_eq!(maxsim(&u, &v).unwrap(), 2.0);
        assert_eq!(maxsim(&seq(&[&[1.0, 0.0]]), &seq(&[&[0.0, 1.0]])).unwrap(), 0.0);

        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let u = random_seq(&mut rng, 4, 3);
        let v = random_seq(&mut rng, 6, 3);
        let s = pairwise_similarity(&u, &v).unwrap();
        let want: f64 = (0..4)
            .map(|i| s.row(i).iter().cloned().fold(f64::NEG_INFINITY, f64::max))
            .sum();
        assert!((maxsim(&u, &v).unwrap() - want).abs() < 1e-14);
    }

    #[test]
    fn async_examples() {
        let u = seq(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let v = seq(&[&[0.0, 1.0], &[1.0, 0.0]]);
        let mm = |k| cfg(k, Aggregation::Mean, Aggregation::Mean);
        assert_eq!(async_similarity(&u, &v, &mm(1)).unwrap(), 1.0);
        assert_eq!(async_similarity(&u, &v, &mm(2)).unwrap(), 0.5);

        let a = seq(&[&[1.0, 0.0]]);
        let b = seq(&[&[1.0, 0.0], &[0.0, 1.0]]);
        assert_eq!(async_similarity(&a, &b, &mm(1)).unwrap(), 1.0);
        assert_eq!(async_similarity(&b, &a, &mm(1)).unwrap(), 0.5);
    }

    #[test]
    fn async_matches_full_sort_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let u = random_seq(&mut rng, 5, 3);
        let v = random_seq(&mut rng, 7, 3);
        let got = async_similarity(&u, &v, &AsyncSimConfig::with_k(2)).unwrap();
        let want = oracle(&u, &v, 2);
        assert!((got - want).abs() <= 1e-12 * want.abs().max(1e-300));
    }

    #[test]
    fn k_too_large_errors() {
        let u = seq(&[&[1.0, 0.0]]);
        let v = seq(&[&[1.0, 0.0], &[0.0, 1.0]]);
        assert!(matches!(
            async_similarity(&u, &v, &AsyncSimConfig::with_k(3)),
            Err(Error::KOutOfRange { k: 3, len: 2 })
        ));
        assert!(async_similarity(&u, &v, &AsyncSimConfig::with_k(0)).is_err());
    }

    #[test]
    fn symmetric_flag_averages_both_directions() {
        let a = seq(&[&[1.0, 0.0]]);
        let b = seq(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let c = AsyncSimConfig {
            symmetric: true,
            ..AsyncSimConfig::default()
        };
        assert_eq!(async_similarity(&a, &b, &c).unwrap(), 0.75);
        assert_eq!(async_similarity(&b, &a, &c).unwrap(), 0.75);
    }

    #[test]
    fn global_cosine_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let u = random_seq(&mut rng, 3, 4);
        assert!((global_cosine(&u, &u).unwrap() - 1.0).abs() < 1e-15);
        let neg = FeatureSequence::new(u.tokens().scale(-1.0)).unwrap();
        assert!((global_cosine(&u, &neg).unwrap() + 1.0).abs() < 1e-15);

        let v = random_seq(&mut rng, 3, 4);
        let (a, b) = (u.tokens().as_slice(), v.tokens().as_slice());
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((global_cosine(&u, &v).unwrap() - dot / (na * nb)).abs() < 1e-14);

        let zero = FeatureSequence::new(Mat::zeros(3, 4)).unwrap();
        assert!(matches!(global_cosine(&u, &zero), Err(Error::ZeroNorm(_))));
        let short = random_seq(&mut rng, 2, 4);
        assert!(global_cosine(&u, &short).is_err());
    }

    #[test]
    fn normalized_scores_are_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..50 {
            let u = random_seq(&mut rng, 4, 3);
            let v = random_seq(&mut rng, 5, 3);
            let c = AsyncSimConfig {
                k: 2,
                normalize_tokens: true,
                ..AsyncSimConfig::default()
            };
            let s = async_similarity(&u, &v, &c).unwrap();
            assert!((-1.0..=1.0).contains(&s));
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut checked = 0;
        while checked < 10 {
            let u = random_seq(&mut rng, 4, 3);
            let v = random_seq(&mut rng, 5, 3);
            let s = pairwise_similarity(&u, &v).unwrap();
            if !tie_free(&s, 1e-4) {
                continue;
            }
            let packed = Mat::vstack(&[u.tokens(), v.tokens()]).unwrap();
            for k in 1..=3 {
                let c = AsyncSimConfig::with_k(k);
                let err = check_grad(
                    |t, x| {
                        let a = t.row_slice(x, 0, 4)?;
                        let b = t.row_slice(x, 4, 5)?;
                        async_similarity_var(t, a, b, &c)
                    },
                    &packed,
                    1e-5,
                )
                .unwrap();
                assert!(err < 1e-6, "k={k}: {err}");
            }
            checked += 1;
        }
    }

    fn tie_free(s: &SimilarityMatrix, gap: f64) -> bool {
        (0..s.scores().rows()).all(|i| {
            let mut r = s.row(i).to_vec();
            r.sort_by(|a, b| a.partial_cmp(b).unwrap());
            r.windows(2).all(|w| w[1] - w[0] > gap)
        })
    }

    proptest! {
        #[test]
        fn permuting_v_is_bitwise_invariant(seed in any::<u64>(), k in 1usize..=3) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let u = random_seq(&mut rng, 4, 3);
            let v = random_seq(&mut rng, 6, 3);
            let mut perm: Vec<usize> = (0..6).collect();
            perm.shuffle(&mut rng);
            for agg in [Aggregation::Mean, Aggregation::Sum] {
                let c = cfg(k, agg, agg);
                let a = async_similarity(&u, &v, &c).unwrap();
                let b = async_similarity(&u, &v.permute_rows(&perm), &c).unwrap();
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }

        #[test]
        fn permuting_u_is_invariant_under_token_mean(seed in any::<u64>(), k in 1usize..=3) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let u = random_seq(&mut rng, 5, 3);
            let v = random_seq(&mut rng, 4, 3);
            let mut perm: Vec<usize> = (0..5).collect();
            perm.shuffle(&mut rng);
            let c = AsyncSimConfig::with_k(k);
            let a = async_similarity(&u, &v, &c).unwrap();
            let b = async_similarity(&u.permute_rows(&perm), &v, &c).unwrap();
            prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        }

        #[test]
        fn aggregation_identities(seed in any::<u64>(), k in 1usize..=3) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let u = random_seq(&mut rng, 5, 3);
            let v = random_seq(&mut rng, 4, 3);
            let mean = async_similarity(&u, &v, &cfg(k, Aggregation::Mean, Aggregation::Mean)).unwrap();
            let tok_sum = async_similarity(&u, &v, &cfg(k, Aggregation::Mean, Aggregation::Sum)).unwrap();
            let topk_sum = async_similarity(&u, &v, &cfg(k, Aggregation::Sum, Aggregation::Mean)).unwrap();
            prop_assert!((tok_sum - 5.0 * mean).abs() <= 1e-12 * tok_sum.abs().max(1e-12));
            prop_assert!((topk_sum - k as f64 * mean).abs() <= 1e-12 * topk_sum.abs().max(1e-12));
        }

        #[test]
        fn mean_topk_non_increasing_in_k(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let u = random_seq(&mut rng, 4, 3);
            let v = random_seq(&mut rng, 6, 3);
            let scores: Vec<f64> = (1..=6)
                .map(|k| async_similarity(&u, &v, &AsyncSimConfig::with_k(k)).unwrap())
                .collect();
            for w in scores.windows(2) {
                prop_assert!(w[1] <= w[0] + 1e-15);
            }
        }

        #[test]
        fn k1_reproduces_maxsim(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let u = random_seq(&mut rng, 5, 3);
            let v = random_seq(&mut rng, 4, 3);
            let ms = maxsim(&u, &v).unwrap();
            let sum = async_similarity(&u, &v, &cfg(1, Aggregation::Mean, Aggregation::Sum)).unwrap();
            let mean = async_similarity(&u, &v, &cfg(1, Aggregation::Mean, Aggregation::Mean)).unwrap();
            prop_assert_eq!(ms, sum);
            prop_assert!((mean - ms / 5.0).abs() <= 1e-15 * ms.abs().max(1.0));
        }
    }
}
