use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::classifier::train_classifier;
use super::features::{extract_features, smooth_features, FeatureSet, Standardizer};
use super::pretrain::pretrain;
use super::reference;
use super::report::{AblationRow, AblationTable, EvalReport, FoldResult};
use super::{derive_seed, PipelineConfig};
use crate::encoder::{encode, project, EncoderConfig, EncoderParams, Mode};
use crate::error::{Error, Result};
use crate::loss::SimilarityMode;
use crate::mat::{topk_row, Mat};
use crate::preprocess::Segment;
use crate::similarity::{pairwise_similarity, Aggregation, FeatureSequence};
use crate::synth::{make_folds, Fold};

/// Report plus the frozen encoder of every fold.
#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub report: EvalReport,
    pub encoders: Vec<EncoderParams>,
}

fn n_classes(segments: &[Segment]) -> usize {
    segments.iter().map(|s| s.label + 1).max().unwrap_or(0)
}

/// Stratified trial split: about `frac` of each class's trials go to validation.
fn split_trials(labels_by_trial: &[usize], n_classes: usize, frac: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for c in 0..n_classes {
        let mut trials: Vec<usize> = (0..labels_by_trial.len()).filter(|&t| labels_by_trial[t] == c).collect();
        trials.shuffle(&mut rng);
        let n_val = if trials.len() >= 2 {
            ((trials.len() as f64 * frac).round() as usize).clamp(1, trials.len() - 1)
        } else {
            0
        };
        val.extend_from_slice(&trials[..n_val]);
        train.extend_from_slice(&trials[n_val..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

fn rows_of_trials(set: &FeatureSet, trials: &[usize]) -> Vec<usize> {
    (0..set.len()).filter(|&i| trials.binary_search(&set.trial[i]).is_ok()).collect()
}

fn run_fold(
    segments: &[Segment],
    fold: &Fold,
    index: usize,
    cfg: &PipelineConfig,
    seed: u64,
    shuffle_labels: bool,
    fixed: Option<&EncoderParams>,
) -> Result<(FoldResult, EncoderParams)> {
    let fold_seed = derive_seed(seed, 10, index as u64);
    let train_segs: Vec<&Segment> = segments.iter().filter(|s| fold.train.contains(&s.subject_id)).collect();
    let test_segs: Vec<&Segment> = segments.iter().filter(|s| fold.test.contains(&s.subject_id)).collect();
    if train_segs.is_empty() || test_segs.is_empty() {
        return Err(Error::Insufficient(format!("fold {index} has an empty split")));
    }
    let (params, pre) = if let Some(p) = fixed {
        (p.clone(), None)
    } else if cfg.skip_pretrain {
        (EncoderParams::init(&cfg.encoder, derive_seed(fold_seed, 0, 0))?, None)
    } else {
        let mut out = pretrain(
            &train_segs,
            cfg.window_samples,
            &cfg.schedule,
            &cfg.encoder,
            &cfg.loss,
            fold_seed,
        )?;
        let params = out.params.take().expect("pretrain returns parameters");
        (params, Some(out))
    };
    let digest = params.digest();

    let classes = n_classes(segments);
    let train_raw = extract_features(&params, &cfg.encoder, &train_segs, cfg.window_samples)?;
    let test_raw = extract_features(&params, &cfg.encoder, &test_segs, cfg.window_samples)?;
    let norm = Standardizer::fit(&train_raw.features)?;
    let normalize = |set: FeatureSet| FeatureSet {
        features: norm.apply(&set.features),
        ..set
    };
    let mut train_set = smooth_features(&normalize(train_raw), cfg.smoothing)?;
    let test_set = smooth_features(&normalize(test_raw), cfg.smoothing)?;

    let mut trial_labels: Vec<usize> = train_segs.iter().map(|s| s.label).collect();
    if shuffle_labels {
        trial_labels.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(fold_seed, 4, 0)));
        train_set.labels = train_set.trial.iter().map(|&t| trial_labels[t]).collect();
    }
    let (fit_trials, val_trials) = split_trials(
        &trial_labels,
        classes,
        cfg.schedule.classify.val_fraction,
        derive_seed(fold_seed, 3, 0),
    );
    let fit = train_set.select(&rows_of_trials(&train_set, &fit_trials));
    let val = train_set.select(&rows_of_trials(&train_set, &val_trials));
    let trained = train_classifier(
        &fit.features,
        &fit.labels,
        &val.features,
        &val.labels,
        classes,
        &cfg.classifier_hidden,
        &cfg.schedule.classify,
        derive_seed(fold_seed, 5, 0),
    )?;
    let confusion = trained.params.evaluate(&test_set.features, &test_set.labels)?;
    if params.digest() != digest {
        return Err(Error::InvalidConfig("encoder changed during classification".into()));
    }
    log::info!("fold {index}: accuracy {:.2}%", 100.0 * confusion.accuracy());
    Ok((
        FoldResult {
            fold: index,
            train_subjects: fold.train.clone(),
            test_subjects: fold.test.clone(),
            accuracy: 100.0 * confusion.accuracy(),
            confusion,
            pretrain: pre,
            classifier_epochs: trained.epochs_run,
            best_epoch: trained.best_epoch,
            encoder_digest: digest,
        },
        params,
    ))
}

/// Pretrain, freeze, smooth and classify on every cross-subject fold.
///
/// The seed is `cfg.schedule.seed`; folds run in parallel with per-fold seeds,
/// so results do not depend on the thread count.
pub fn run_experiment(
    segments: &[Segment],
    cfg: &PipelineConfig,
    name: &str,
    shuffle_labels: bool,
) -> Result<ExperimentOutput> {
    run_folds(segments, cfg, name, shuffle_labels, None)
}

/// Classification stage only: every fold reuses one frozen encoder.
pub fn classify_with_encoder(
    segments: &[Segment],
    cfg: &PipelineConfig,
    params: &EncoderParams,
    name: &str,
) -> Result<ExperimentOutput> {
    params.check_shapes(&cfg.encoder)?;
    run_folds(segments, cfg, name, false, Some(params))
}

fn run_folds(
    segments: &[Segment],
    cfg: &PipelineConfig,
    name: &str,
    shuffle_labels: bool,
    fixed: Option<&EncoderParams>,
) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let start = Instant::now();
    let seed = cfg.schedule.seed;
    let folds = make_folds(segments, cfg.folds, derive_seed(seed, 9, 0))?;
    let results: Vec<(FoldResult, EncoderParams)> = folds
        .par_iter()
        .enumerate()
        .map(|(i, f)| run_fold(segments, f, i, cfg, seed, shuffle_labels, fixed))
        .collect::<Result<_>>()?;
    let (fold_results, encoders): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    let config = serde_json::to_value(cfg).map_err(|e| Error::Format(e.to_string()))?;
    let report = EvalReport::new(
        name.to_string(),
        seed,
        fold_results,
        config,
        start.elapsed().as_secs_f64(),
    );
    Ok(ExperimentOutput { report, encoders })
}

fn run_variants(
    segments: &[Segment],
    base: &PipelineConfig,
    kind: &str,
    variants: Vec<(String, PipelineConfig)>,
    paper_reference: Vec<reference::PaperReference>,
) -> Result<(AblationTable, Vec<ExperimentOutput>)> {
    let start = Instant::now();
    let outputs: Vec<ExperimentOutput> = variants
        .par_iter()
        .map(|(name, cfg)| run_experiment(segments, cfg, name, false))
        .collect::<Result<_>>()?;
    let rows = variants
        .iter()
        .zip(&outputs)
        .map(|((name, _), out)| AblationRow::from_report(name.clone(), out.report.clone()))
        .collect();
    let table = AblationTable {
        kind: kind.to_string(),
        rows,
        paper_reference,
        config: serde_json::to_value(base).map_err(|e| Error::Format(e.to_string()))?,
        wall_time_secs: start.elapsed().as_secs_f64(),
    };
    Ok((table, outputs))
}

/// One row per K; every K shares seeds, folds and budgets.
pub fn run_ablation_k(segments: &[Segment], base: &PipelineConfig, ks: &[usize]) -> Result<AblationTable> {
    run_ablation_k_with_encoders(segments, base, ks).map(|(t, _)| t)
}

pub fn run_ablation_k_with_encoders(
    segments: &[Segment],
    base: &PipelineConfig,
    ks: &[usize],
) -> Result<(AblationTable, Vec<ExperimentOutput>)> {
    let variants = ks
        .iter()
        .map(|&k| {
            let mut cfg = base.clone();
            cfg.loss.mode = SimilarityMode::Async;
            cfg.loss.sim.k = k;
            (format!("K={k}"), cfg)
        })
        .collect();
    run_variants(segments, base, "k", variants, reference::k_sweep())
}

/// The four token/TopK aggregation combinations under one temperature.
///
/// Because every variant starts from the same initialization and first batch,
/// the recorded first-batch positive logits expose the exact `T_u` scale factor
/// between token-Sum and token-Mean.
pub fn run_ablation_aggregation(segments: &[Segment], base: &PipelineConfig) -> Result<AblationTable> {
    let mut variants = Vec::new();
    for token in [Aggregation::Mean, Aggregation::Sum] {
        for topk in [Aggregation::Mean, Aggregation::Sum] {
            let mut cfg = base.clone();
            cfg.loss.mode = SimilarityMode::Async;
            cfg.loss.sim.token_agg = token;
            cfg.loss.sim.topk_agg = topk;
            variants.push((format!("token={token:?},topk={topk:?}"), cfg));
        }
    }
    run_variants(segments, base, "aggregation", variants, reference::aggregation()).map(|(t, _)| t)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionAblation {
    pub table: AblationTable,
    /// Per window of the first fold's test subjects: strongest channel weight per pooled step.
    pub curves: Vec<Vec<f64>>,
}

impl AttentionAblation {
    /// `window,step,attention`, one row per pooled time step.
    pub fn curves_csv(&self) -> String {
        let mut out = String::from("window,step,attention\n");
        for (w, curve) in self.curves.iter().enumerate() {
            for (t, v) in curve.iter().enumerate() {
                out.push_str(&format!("{w},{t},{v}\n"));
            }
        }
        out
    }
}

/// Attention on versus off, plus response curves from the attention-on encoder.
pub fn run_attention_ablation(
    segments: &[Segment],
    base: &PipelineConfig,
    max_curves: usize,
) -> Result<AttentionAblation> {
    let variants = [true, false]
        .into_iter()
        .map(|on| {
            let mut cfg = base.clone();
            cfg.encoder.attention_enabled = on;
            (if on { "attention on" } else { "attention off" }.to_string(), cfg)
        })
        .collect();
    let (table, outputs) = run_variants(segments, base, "attention", variants, reference::attention())?;
    let on = &outputs[0];
    let test = &on.report.folds[0].test_subjects;
    let windows: Vec<Mat> = segments
        .iter()
        .filter(|s| test.contains(&s.subject_id))
        .flat_map(|s| crate::synth::split_windows(s, base.window_samples))
        .take(max_curves)
        .collect();
    let mut cfg_on = base.encoder.clone();
    cfg_on.attention_enabled = true;
    let curves = attention_curves(&on.encoders[0], &cfg_on, &windows)?;
    Ok(AttentionAblation { table, curves })
}

/// Strongest channel attention weight at each pooled step, per window.
pub fn attention_curves(params: &EncoderParams, cfg: &EncoderConfig, windows: &[Mat]) -> Result<Vec<Vec<f64>>> {
    windows
        .iter()
        .map(|w| encode(w, params, cfg, Mode::Eval).map(|o| o.attention_curve()))
        .collect()
}

/// Top-3 similarity spread of one anchor token against a comparison sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Top3Row {
    pub pair: usize,
    pub token: usize,
    pub top3: [f64; 3],
    /// Population variance of `top3`.
    pub variance: f64,
}

/// Variance of each anchor token's three largest similarities against `v`.
pub fn top3_token_variances(u: &FeatureSequence, v: &FeatureSequence) -> Result<Vec<([f64; 3], f64)>> {
    let sims = pairwise_similarity(u, v)?;
    (0..u.len())
        .map(|i| {
            let top = topk_row(sims.row(i), 3)?;
            let t = [top[0], top[1], top[2]];
            let mean = (t[0] + t[1] + t[2]) / 3.0;
            let var = t.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 3.0;
            Ok((t, var))
        })
        .collect()
}

/// Per-token Top-3 variance over projected encoder tokens of positive pairs.
///
/// Produces `sum over pairs of T_u` rows.
pub fn top3_variance_diagnostic(
    params: &EncoderParams,
    cfg: &EncoderConfig,
    pairs: &[(Mat, Mat)],
) -> Result<Vec<Top3Row>> {
    let mut rows = Vec::new();
    for (p, (a, b)) in pairs.iter().enumerate() {
        let ua = project(&encode(a, params, cfg, Mode::Eval)?.tokens, params, cfg)?;
        let vb = project(&encode(b, params, cfg, Mode::Eval)?.tokens, params, cfg)?;
        for (token, (top3, variance)) in top3_token_variances(&ua, &vb)?.into_iter().enumerate() {
            rows.push(Top3Row {
                pair: p,
                token,
                top3,
                variance,
            });
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

/// Equal-width histogram over `[0, max]`; the top edge is inclusive.
pub fn top3_histogram(values: &[f64], bins: usize, max: f64) -> Vec<HistogramBin> {
    let bins = bins.max(1);
    let width = if max > 0.0 { max / bins as f64 } else { 1.0 };
    let mut counts = vec![0usize; bins];
    for &v in values {
        let b = ((v / width).floor().max(0.0) as usize).min(bins - 1);
        counts[b] += 1;
    }
    counts
        .into_iter()
        .enumerate()
        .map(|(i, count)| HistogramBin {
            lo: i as f64 * width,
            hi: (i + 1) as f64 * width,
            count,
        })
        .collect()
}

/// Which K won a fold in the K=1 versus K=3 comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum KPreference {
    K1,
    K3,
    Tie,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Top3Fold {
    pub fold: usize,
    pub accuracy_k1: f64,
    pub accuracy_k3: f64,
    pub preference: KPreference,
}

/// Top-3 variances of one encoder (`k`) on the folds sharing one preference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Top3Group {
    pub preference: KPreference,
    pub k: usize,
    pub n_tokens: usize,
    pub mean_variance: f64,
    pub histogram: Vec<HistogramBin>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Top3Analysis {
    pub folds: Vec<Top3Fold>,
    pub groups: Vec<Top3Group>,
    pub table: AblationTable,
}

impl Top3Analysis {
    /// `preference,k,lo,hi,count`, one row per histogram bin.
    pub fn histogram_csv(&self) -> String {
        let mut out = String::from("preference,k,lo,hi,count\n");
        for g in &self.groups {
            for b in &g.histogram {
                out.push_str(&format!("{:?},{},{},{},{}\n", g.preference, g.k, b.lo, b.hi, b.count));
            }
        }
        out
    }
}

/// Positive pairs anchored on the test subjects of a fold: each test window is
/// paired with the same stimulus and window index of the next other subject.
fn fold_pairs(segments: &[Segment], test: &[u32], window_samples: usize, max_pairs: usize) -> Vec<(Mat, Mat)> {
    let mut subjects: Vec<u32> = segments.iter().map(|s| s.subject_id).collect();
    subjects.sort_unstable();
    subjects.dedup();
    let mut pairs = Vec::new();
    for a in segments.iter().filter(|s| test.contains(&s.subject_id)) {
        let pos = subjects.iter().position(|&x| x == a.subject_id).expect("subject listed");
        let partner = (1..subjects.len())
            .map(|o| subjects[(pos + o) % subjects.len()])
            .find_map(|b| segments.iter().find(|s| s.subject_id == b && s.stimulus_id == a.stimulus_id));
        let Some(b) = partner else { continue };
        let wa = crate::synth::split_windows(a, window_samples);
        let wb = crate::synth::split_windows(b, window_samples);
        for (x, y) in wa.into_iter().zip(wb) {
            if pairs.len() == max_pairs {
                return pairs;
            }
            pairs.push((x, y));
        }
    }
    pairs
}

/// K=1 versus K=3 with per-fold Top-3 variance histograms.
///
/// Folds are grouped by which K scored higher on them; within each group the
/// Top-3 variances of both encoders are histogrammed over a shared range.
pub fn run_top3_analysis(
    segments: &[Segment],
    base: &PipelineConfig,
    pairs_per_fold: usize,
    bins: usize,
) -> Result<Top3Analysis> {
    let (table, outputs) = run_ablation_k_with_encoders(segments, base, &[1, 3])?;
    let (k1, k3) = (&outputs[0], &outputs[1]);
    let mut folds = Vec::new();
    let mut values: Vec<(KPreference, usize, Vec<f64>)> = Vec::new();
    for (f1, f3) in k1.report.folds.iter().zip(&k3.report.folds) {
        let preference = match f1.accuracy.partial_cmp(&f3.accuracy) {
            Some(std::cmp::Ordering::Greater) => KPreference::K1,
            Some(std::cmp::Ordering::Less) => KPreference::K3,
            _ => KPreference::Tie,
        };
        folds.push(Top3Fold {
            fold: f1.fold,
            accuracy_k1: f1.accuracy,
            accuracy_k3: f3.accuracy,
            preference,
        });
        let pairs = fold_pairs(segments, &f1.test_subjects, base.window_samples, pairs_per_fold);
        for (k, out) in [(1, k1), (3, k3)] {
            let rows = top3_variance_diagnostic(&out.encoders[f1.fold], &base.encoder, &pairs)?;
            let v = rows.iter().map(|r| r.variance);
            match values.iter_mut().find(|(p, kk, _)| *p == preference && *kk == k) {
                Some((_, _, acc)) => acc.extend(v),
                None => values.push((preference, k, v.collect())),
            }
        }
    }
    let max = values.iter().flat_map(|(_, _, v)| v.iter().copied()).fold(0.0, f64::max);
    let groups = values
        .into_iter()
        .map(|(preference, k, v)| Top3Group {
            preference,
            k,
            n_tokens: v.len(),
            mean_variance: if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 },
            histogram: top3_histogram(&v, bins, max),
        })
        .collect();
    Ok(Top3Analysis { folds, groups, table })
}
