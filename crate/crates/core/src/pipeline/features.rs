use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::{encode, EncoderConfig, EncoderParams, Mode, ZClsPooling};
use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::preprocess::Segment;
use crate::synth::split_windows;

/// Per-window encoder features with their provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    /// One row per window, grouped by trial and time-ordered within a trial.
    pub features: Mat,
    /// Trial (segment) index of each row.
    pub trial: Vec<usize>,
    pub labels: Vec<usize>,
    pub subjects: Vec<u32>,
    pub stimuli: Vec<u32>,
}

impl FeatureSet {
    pub fn len(&self) -> usize {
        self.trial.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trial.is_empty()
    }

    pub fn select(&self, rows: &[usize]) -> FeatureSet {
        FeatureSet {
            features: self.features.select_rows(rows),
            trial: rows.iter().map(|&r| self.trial[r]).collect(),
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
            subjects: rows.iter().map(|&r| self.subjects[r]).collect(),
            stimuli: rows.iter().map(|&r| self.stimuli[r]).collect(),
        }
    }

    /// Row ranges of each trial, in order of first appearance.
    pub fn trial_ranges(&self) -> Vec<std::ops::Range<usize>> {
        let mut out = Vec::new();
        let mut start = 0;
        for i in 1..=self.trial.len() {
            if i == self.trial.len() || self.trial[i] != self.trial[start] {
                out.push(start..i);
                start = i;
            }
        }
        out
    }
}

/// Frozen-encoder `z_cls` for every window of every segment (dropout off).
pub fn extract_features(
    params: &EncoderParams,
    cfg: &EncoderConfig,
    segments: &[&Segment],
    window_samples: usize,
) -> Result<FeatureSet> {
    params.check_shapes(cfg)?;
    if cfg.z_cls != ZClsPooling::MeanOverTokens {
        return Err(Error::InvalidConfig(
            "classification features need z_cls pooled over tokens".into(),
        ));
    }
    let jobs: Vec<(usize, Mat)> = segments
        .iter()
        .enumerate()
        .flat_map(|(t, seg)| split_windows(seg, window_samples).into_iter().map(move |w| (t, w)))
        .collect();
    let rows: Vec<Vec<f64>> = jobs
        .par_iter()
        .map(|(_, w)| encode(w, params, cfg, Mode::Eval).map(|o| o.z_cls.into_vec()))
        .collect::<Result<_>>()?;
    let d = cfg.token_dim();
    let mut features = Mat::zeros(rows.len(), d);
    for (i, r) in rows.iter().enumerate() {
        features.row_mut(i).copy_from_slice(r);
    }
    let trial: Vec<usize> = jobs.iter().map(|(t, _)| *t).collect();
    Ok(FeatureSet {
        features,
        labels: trial.iter().map(|&t| segments[t].label).collect(),
        subjects: trial.iter().map(|&t| segments[t].subject_id).collect(),
        stimuli: trial.iter().map(|&t| segments[t].stimulus_id).collect(),
        trial,
    })
}

/// Per-dimension standardization fitted on one set and applied to others.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    /// Zero marks a constant dimension, which maps to zero.
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(x: &Mat) -> Result<Self> {
        if x.rows() == 0 {
            return Err(Error::Insufficient("cannot fit normalization on zero rows".into()));
        }
        let n = x.rows() as f64;
        let mut mean = vec![0.0; x.cols()];
        for i in 0..x.rows() {
            for (m, v) in mean.iter_mut().zip(x.row(i)) {
                *m += v / n;
            }
        }
        let mut var = vec![0.0; x.cols()];
        for i in 0..x.rows() {
            for ((s, v), m) in var.iter_mut().zip(x.row(i)).zip(&mean) {
                *s += (v - m).powi(2) / n;
            }
        }
        let scale = mean.iter().map(|m| m.abs().max(1.0)).collect::<Vec<_>>();
        let std: Vec<f64> = var
            .iter()
            .zip(&scale)
            .enumerate()
            .map(|(j, (v, s))| {
                let sd = v.sqrt();
                if sd <= 1e-12 * s {
                    log::warn!("feature dimension {j} has zero variance; it is zeroed");
                    0.0
                } else {
                    sd
                }
            })
            .collect();
        Ok(Self { mean, std })
    }

    pub fn apply(&self, x: &Mat) -> Mat {
        Mat::from_fn(x.rows(), x.cols(), |i, j| {
            if self.std[j] == 0.0 {
                0.0
            } else {
                (x[(i, j)] - self.mean[j]) / self.std[j]
            }
        })
    }
}

/// Temporal smoothing of the per-window features within each trial.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub enum Smoothing {
    /// Random-walk state with Gaussian observations: Kalman filter plus
    /// Rauch-Tung-Striebel smoother. `ratio` = observation / process variance.
    Lds { ratio: f64 },
    /// Centered moving average of odd `width`, truncated at trial edges.
    MovingAverage { width: usize },
    None,
}

impl Default for Smoothing {
    fn default() -> Self {
        Smoothing::Lds { ratio: 10.0 }
    }
}

impl Smoothing {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Smoothing::Lds { ratio } if !(ratio > 0.0 && ratio.is_finite()) => {
                Err(Error::InvalidConfig(format!("LDS ratio must be > 0, got {ratio}")))
            }
            Smoothing::MovingAverage { width } if width % 2 == 0 => Err(Error::InvalidConfig(format!(
                "moving-average width must be odd, got {width}"
            ))),
            _ => Ok(()),
        }
    }
}

/// Smooths one scalar time series.
pub fn smooth_sequence(y: &[f64], method: Smoothing) -> Vec<f64> {
    let n = y.len();
    if n <= 1 {
        return y.to_vec();
    }
    match method {
        Smoothing::None => y.to_vec(),
        Smoothing::MovingAverage { width } => {
            let half = width / 2;
            (0..n)
                .map(|i| {
                    let lo = i.saturating_sub(half);
                    let hi = (i + half + 1).min(n);
                    y[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
                })
                .collect()
        }
        Smoothing::Lds { ratio } => {
            let (q, r) = (1.0, ratio);
            let mut xf = vec![0.0; n];
            let mut pf = vec![0.0; n];
            let mut pp = vec![0.0; n];
            // prior centered on the first observation
            let (mut x, mut p) = (y[0], r);
            for t in 0..n {
                if t > 0 {
                    p += q;
                }
                pp[t] = p;
                let k = p / (p + r);
                x += k * (y[t] - x);
                p *= 1.0 - k;
                xf[t] = x;
                pf[t] = p;
            }
            let mut xs = xf.clone();
            for t in (0..n - 1).rev() {
                let g = pf[t] / pp[t + 1];
                xs[t] = xf[t] + g * (xs[t + 1] - xf[t]);
            }
            xs
        }
    }
}

/// Smooths every feature dimension along time within each trial.
pub fn smooth_features(set: &FeatureSet, method: Smoothing) -> Result<FeatureSet> {
    method.validate()?;
    let mut out = set.clone();
    for range in set.trial_ranges() {
        for j in 0..set.features.cols() {
            let y: Vec<f64> = range.clone().map(|i| set.features[(i, j)]).collect();
            for (i, v) in range.clone().zip(smooth_sequence(&y, method)) {
                out.features.row_mut(i)[j] = v;
            }
        }
    }
    Ok(out)
}
