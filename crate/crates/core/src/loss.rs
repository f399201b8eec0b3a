//! InfoNCE over stimulus-aligned pairs with in-batch negatives.
//!
//! For anchor `U_p` the positive is `V_p` and the negatives are the other
//! `P - 1` positives in the batch, so the loss is a row-wise softmax cross
//! entropy over the `P x P` logit matrix `S(U_p, V_q) / tau` with targets on
//! the diagonal, averaged over anchors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::similarity::{async_similarity_var, AsyncSimConfig, FeatureSequence};
use crate::tape::{Tape, Var};

/// Anchors and their index-aligned positives.
#[derive(Debug, Clone)]
pub struct ContrastiveBatch {
    anchors: Vec<FeatureSequence>,
    positives: Vec<FeatureSequence>,
}

impl ContrastiveBatch {
    pub fn new(anchors: Vec<FeatureSequence>, positives: Vec<FeatureSequence>) -> Result<Self> {
        if anchors.len() != positives.len() {
            return Err(Error::InvalidConfig(format!(
                "{} anchors but {} positives",
                anchors.len(),
                positives.len()
            )));
        }
        if anchors.len() < 2 {
            return Err(Error::BatchTooSmall(anchors.len()));
        }
        let d = anchors[0].dim();
        if let Some(bad) = anchors.iter().chain(&positives).find(|s| s.dim() != d) {
            return Err(Error::ShapeMismatch {
                lhs: anchors[0].tokens().shape(),
                rhs: bad.tokens().shape(),
                context: "batch feature dimension",
            });
        }
        Ok(Self { anchors, positives })
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    /// Negatives per anchor.
    pub fn negatives_per_anchor(&self) -> usize {
        self.anchors.len() - 1
    }

    pub fn anchors(&self) -> &[FeatureSequence] {
        &self.anchors
    }

    pub fn positives(&self) -> &[FeatureSequence] {
        &self.positives
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SimilarityMode {
    /// Token-level TopK soft matching.
    Async,
    /// Cosine of the flattened sequences.
    GlobalCosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub tau: f64,
    pub sim: AsyncSimConfig,
    pub mode: SimilarityMode,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau: 0.1,
            sim: AsyncSimConfig::default(),
            mode: SimilarityMode::Async,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::InvalidConfig(format!("tau must be > 0, got {}", self.tau)));
        }
        self.sim.validate()
    }
}

/// Loss node plus the logit matrix it was computed from.
#[derive(Debug)]
pub struct LossOutput {
    pub loss: Var,
    /// `P x P`, entry `(p, q)` = `S(U_p, V_q) / tau`.
    pub logits: Mat,
}

impl LossOutput {
    pub fn mean_positive_logit(&self) -> f64 {
        let p = self.logits.rows();
        (0..p).map(|i| self.logits[(i, i)]).sum::<f64>() / p as f64
    }
}

/// Builds the InfoNCE graph over token matrices already on `tape`.
pub fn contrastive_loss_var(
    tape: &mut Tape,
    anchors: &[Var],
    positives: &[Var],
    cfg: &LossConfig,
) -> Result<LossOutput> {
    cfg.validate()?;
    let p = anchors.len();
    if p != positives.len() {
        return Err(Error::InvalidConfig("anchors and positives differ in length".into()));
    }
    if p < 2 {
        return Err(Error::BatchTooSmall(p));
    }
    let mut sims = Vec::with_capacity(p * p);
    for &a in anchors {
        for &v in positives {
            let s = match cfg.mode {
                SimilarityMode::Async => async_similarity_var(tape, a, v, &cfg.sim)?,
                SimilarityMode::GlobalCosine => tape.cosine(a, v)?,
            };
            let sv = tape.value(s).item();
            if !sv.is_finite() {
                return Err(Error::NonFinite(format!("similarity {sv}")));
            }
            sims.push(s);
        }
    }
    let grid = tape.assemble(&sims, p, p)?;
    let logits = tape.scale(grid, 1.0 / cfg.tau);
    let targets: Vec<usize> = (0..p).collect();
    let loss = tape.softmax_cross_entropy(logits, &targets)?;
    Ok(LossOutput {
        loss,
        logits: tape.value(logits).clone(),
    })
}

fn batch_loss(batch: &ContrastiveBatch, cfg: &LossConfig) -> Result<f64> {
    let mut tape = Tape::new();
    let a: Vec<Var> = batch
        .anchors
        .iter()
        .map(|s| tape.constant(s.tokens().clone()))
        .collect();
    let v: Vec<Var> = batch
        .positives
        .iter()
        .map(|s| tape.constant(s.tokens().clone()))
        .collect();
    let out = contrastive_loss_var(&mut tape, &a, &v, cfg)?;
    let loss = tape.value(out.loss).item();
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("loss {loss}")));
    }
    Ok(loss)
}

/// Async-InfoNCE: InfoNCE with the asynchronous TopK similarity.
pub fn async_infonce(batch: &ContrastiveBatch, cfg: &LossConfig) -> Result<f64> {
    batch_loss(
        batch,
        &LossConfig {
            mode: SimilarityMode::Async,
            ..*cfg
        },
    )
}

/// InfoNCE with the global cosine baseline similarity.
pub fn infonce_global(batch: &ContrastiveBatch, cfg: &LossConfig) -> Result<f64> {
    let t = batch.anchors[0].len();
    if let Some(bad) = batch.anchors.iter().chain(&batch.positives).find(|s| s.len() != t) {
        return Err(Error::ShapeMismatch {
            lhs: batch.anchors[0].tokens().shape(),
            rhs: bad.tokens().shape(),
            context: "global cosine needs equal token counts",
        });
    }
    batch_loss(
        batch,
        &LossConfig {
            mode: SimilarityMode::GlobalCosine,
            ..*cfg
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::similarity::Aggregation;
    use crate::tape::check_grad;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_seq(rng: &mut impl Rng, t: usize, d: usize) -> FeatureSequence {
        FeatureSequence::new(Mat::from_fn(t, d, |_, _| rng.gen_range(-1.0..1.0))).unwrap()
    }

    fn uniform_batch(p: usize) -> ContrastiveBatch {
        let s = FeatureSequence::from_rows(&[[0.3, -0.2], [0.1, 0.5]]).unwrap();
        ContrastiveBatch::new(vec![s.clone(); p], vec![s; p]).unwrap()
    }

    #[test]
    fn uniform_similarities_give_log_p() {
        let cfg = LossConfig::default();
        for (p, want) in [(2usize, 2f64.ln()), (3, 3f64.ln())] {
            let b = uniform_batch(p);
            assert!((async_infonce(&b, &cfg).unwrap() - want).abs() < 1e-12);
            assert!((infonce_global(&b, &cfg).unwrap() - want).abs() < 1e-12);
        }
    }

    #[test]
    fn batch_of_one_rejected() {
        let s = FeatureSequence::from_rows(&[[1.0]]).unwrap();
        assert!(matches!(
            ContrastiveBatch::new(vec![s.clone()], vec![s]),
            Err(Error::BatchTooSmall(1))
        ));
    }

    #[test]
    fn saturated_margin_drives_loss_to_zero() {
        // positive logit exceeds negatives by 20/tau = 200
        let a = FeatureSequence::from_rows(&[[1.0, 0.0]]).unwrap();
        let b = FeatureSequence::from_rows(&[[0.0, 1.0]]).unwrap();
        let scale = |s: &FeatureSequence, f: f64| FeatureSequence::new(s.tokens().scale(f)).unwrap();
        let batch = ContrastiveBatch::new(
            vec![scale(&a, 1.0), scale(&b, 1.0)],
            vec![scale(&a, 20.0), scale(&b, 20.0)],
        )
        .unwrap();
        let loss = async_infonce(&batch, &LossConfig::default()).unwrap();
        assert!((0.0..1e-8).contains(&loss), "{loss}");
    }

    #[test]
    fn global_closed_form() {
        let a = FeatureSequence::from_rows(&[[1.0, 0.0]]).unwrap();
        let b = FeatureSequence::from_rows(&[[0.0, 1.0]]).unwrap();
        let batch = ContrastiveBatch::new(vec![a.clone(), b.clone()], vec![a, b]).unwrap();
        let cfg = LossConfig {
            tau: 1.0,
            ..LossConfig::default()
        };
        let e = std::f64::consts::E;
        let want = -(e / (e + 1.0)).ln();
        assert!((infonce_global(&batch, &cfg).unwrap() - want).abs() < 1e-12);
        assert!((want - 0.31326).abs() < 1e-5);
    }

    #[test]
    fn global_rejects_token_count_mismatch() {
        let a = FeatureSequence::from_rows(&[[1.0, 0.0]]).unwrap();
        let b = FeatureSequence::from_rows(&[[0.0, 1.0], [1.0, 1.0]]).unwrap();
        let batch = ContrastiveBatch::new(vec![a.clone(), b.clone()], vec![a, b]).unwrap();
        assert!(infonce_global(&batch, &LossConfig::default()).is_err());
    }

    /// Straight-line InfoNCE: each similarity by full sort, denominator by direct summation.
    pub(crate) fn oracle_loss(batch: &ContrastiveBatch, k: usize, tau: f64) -> f64 {
        let score = |u: &FeatureSequence, v: &FeatureSequence| {
            let mut total = 0.0;
            for i in 0..u.len() {
                let mut row: Vec<f64> = (0..v.len())
                    .map(|j| (0..u.dim()).map(|d| u.tokens()[(i, d)] * v.tokens()[(j, d)]).sum())
                    .collect();
                row.sort_by(|a, b| b.partial_cmp(a).unwrap());
                total += row[..k].iter().sum::<f64>() / k as f64;
            }
            total / u.len() as f64
        };
        let p = batch.len();
        let mut loss = 0.0;
        for a in 0..p {
            let num = (score(&batch.anchors()[a], &batch.positives()[a]) / tau).exp();
            let mut den = 0.0;
            for q in 0..p {
                den += (score(&batch.anchors()[a], &batch.positives()[q]) / tau).exp();
            }
            loss += -(num / den).ln();
        }
        loss / p as f64
    }

    #[test]
    fn matches_independent_reimplementation() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let anchors: Vec<_> = (0..4).map(|_| random_seq(&mut rng, 5, 3)).collect();
        let positives: Vec<_> = (0..4).map(|_| random_seq(&mut rng, 6, 3)).collect();
        let batch = ContrastiveBatch::new(anchors, positives).unwrap();
        let cfg = LossConfig {
            sim: AsyncSimConfig::with_k(2),
            ..LossConfig::default()
        };
        let got = async_infonce(&batch, &cfg).unwrap();
        let want = oracle_loss(&batch, 2, 0.1);
        assert!((got - want).abs() < 1e-10 * want, "{got} vs {want}");
    }

    #[test]
    fn global_matches_independent_reimplementation() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let anchors: Vec<_> = (0..3).map(|_| random_seq(&mut rng, 4, 3)).collect();
        let positives: Vec<_> = (0..3).map(|_| random_seq(&mut rng, 4, 3)).collect();
        let batch = ContrastiveBatch::new(anchors, positives).unwrap();
        let cos = |u: &FeatureSequence, v: &FeatureSequence| {
            let (a, b) = (u.tokens().as_slice(), v.tokens().as_slice());
            let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            d / (a.iter().map(|x| x * x).sum::<f64>().sqrt() * b.iter().map(|x| x * x).sum::<f64>().sqrt())
        };
        let mut want = 0.0;
        for a in 0..3 {
            let den: f64 = (0..3).map(|q| (cos(&batch.anchors()[a], &batch.positives()[q]) / 0.1).exp()).sum();
            want -= ((cos(&batch.anchors()[a], &batch.positives()[a]) / 0.1).exp() / den).ln();
        }
        want /= 3.0;
        let got = infonce_global(&batch, &LossConfig::default()).unwrap();
        assert!((got - want).abs() < 1e-10 * want);
    }

    #[test]
    fn extreme_logits_stay_finite() {
        let a = FeatureSequence::from_rows(&[[1.0]]).unwrap();
        let b = FeatureSequence::from_rows(&[[-1.0]]).unwrap();
        let big = |s: &FeatureSequence| FeatureSequence::new(s.tokens().scale(500.0)).unwrap();
        let cfg = LossConfig {
            tau: 1.0,
            ..LossConfig::default()
        };
        // positive logit -500, negative +500
        let batch = ContrastiveBatch::new(vec![a.clone(), b.clone()], vec![big(&b), big(&a)]).unwrap();
        let loss = async_infonce(&batch, &cfg).unwrap();
        assert!(loss.is_finite() && (loss - 1000.0).abs() < 1e-9, "{loss}");
    }

    #[test]
    fn loss_decreases_as_positive_score_rises() {
        // Anchor 0 sees positive score s and a fixed negative 0.5; anchor 1's logits do not depend on s.
        let cfg = LossConfig::default();
        let u0 = FeatureSequence::from_rows(&[[1.0, 0.0]]).unwrap();
        let u1 = FeatureSequence::from_rows(&[[0.0, 1.0]]).unwrap();
        let v1 = FeatureSequence::from_rows(&[[0.5, 1.0]]).unwrap();
        let mut prev = f64::INFINITY;
        for step in 0..10 {
            let s = -1.0 + 0.3 * step as f64;
            let v0 = FeatureSequence::from_rows(&[[s, 0.0]]).unwrap();
            let b = ContrastiveBatch::new(vec![u0.clone(), u1.clone()], vec![v0, v1.clone()]).unwrap();
            let loss = async_infonce(&b, &cfg).unwrap();
            assert!(loss < prev, "step {step}: {loss} >= {prev}");
            prev = loss;
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let (p, t, d) = (3usize, 4usize, 3usize);
        let cfg = LossConfig {
            sim: AsyncSimConfig::with_k(2),
            ..LossConfig::default()
        };
        let packed = Mat::from_fn(2 * p * t, d, |_, _| rng.gen_range(-1.0..1.0));
        let err = check_grad(
            |tape, x| {
                let seqs: Vec<Var> = (0..2 * p)
                    .map(|i| tape.row_slice(x, i * t, t))
                    .collect::<Result<_>>()?;
                Ok(contrastive_loss_var(tape, &seqs[..p], &seqs[p..], &cfg)?.loss)
            },
            &packed,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn sum_aggregation_scales_positive_logits() {
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let a: Vec<_> = (0..2).map(|_| random_seq(&mut rng, 5, 3)).collect();
        let v: Vec<_> = (0..2).map(|_| random_seq(&mut rng, 5, 3)).collect();
        let run = |token_agg| {
            let mut tape = Tape::new();
            let av: Vec<Var> = a.iter().map(|s| tape.constant(s.tokens().clone())).collect();
            let vv: Vec<Var> = v.iter().map(|s| tape.constant(s.tokens().clone())).collect();
            let cfg = LossConfig {
                sim: AsyncSimConfig {
                    token_agg,
                    ..AsyncSimConfig::default()
                },
                ..LossConfig::default()
            };
            contrastive_loss_var(&mut tape, &av, &vv, &cfg).unwrap().mean_positive_logit()
        };
        let (mean, sum) = (run(Aggregation::Mean), run(Aggregation::Sum));
        assert!((sum - 5.0 * mean).abs() < 1e-12 * sum.abs());
    }
}
