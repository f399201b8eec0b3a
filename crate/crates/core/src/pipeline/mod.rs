//! Two-stage training: contrastive pretraining of the encoder, then a frozen
//! encoder feeding normalization, temporal smoothing and an MLP classifier.
//! Also hosts the ablation and diagnostic runners.

mod classifier;
mod features;
mod pretrain;
pub mod reference;
mod report;
mod run;

use serde::{Deserialize, Serialize};

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::loss::LossConfig;
use crate::synth::FoldProtocol;

pub use classifier::{train_classifier, ClassifierParams, TrainedClassifier};
pub use features::{extract_features, smooth_features, smooth_sequence, FeatureSet, Smoothing, Standardizer};
pub use pretrain::{pretrain, PretrainOutput};
pub use report::{mean_std, AblationRow, AblationTable, ConfusionMatrix, EvalReport, FoldResult};
pub use run::{
    attention_curves, classify_with_encoder, run_ablation_aggregation, run_ablation_k, run_ablation_k_with_encoders, run_attention_ablation,
    run_experiment, run_top3_analysis, top3_histogram, top3_token_variances, top3_variance_diagnostic, AttentionAblation,
    ExperimentOutput, HistogramBin, KPreference, Top3Analysis, Top3Fold, Top3Group, Top3Row,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainSchedule {
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    /// Defaults to one pass over the training windows per epoch.
    #[serde(default)]
    pub steps_per_epoch: Option<usize>,
}

impl Default for PretrainSchedule {
    fn default() -> Self {
        Self {
            lr: 0.0007,
            weight_decay: 0.00015,
            epochs: 10,
            steps_per_epoch: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifySchedule {
    pub lr: f64,
    pub weight_decay: f64,
    pub max_epochs: usize,
    pub min_epochs: usize,
    pub patience: usize,
    #[serde(default = "default_minibatch")]
    pub batch_size: usize,
    /// Share of training-subject trials held out for early stopping.
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
}

fn default_minibatch() -> usize {
    32
}
fn default_val_fraction() -> f64 {
    0.2
}

impl Default for ClassifySchedule {
    fn default() -> Self {
        Self {
            lr: 0.005,
            weight_decay: 0.0022,
            max_epochs: 100,
            min_epochs: 30,
            patience: 30,
            batch_size: default_minibatch(),
            val_fraction: default_val_fraction(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSchedule {
    #[serde(default)]
    pub pretrain: PretrainSchedule,
    #[serde(default)]
    pub classify: ClassifySchedule,
    /// Pairs per contrastive batch (capped by the number of stimuli).
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            pretrain: PretrainSchedule::default(),
            classify: ClassifySchedule::default(),
            batch_size: 8,
            seed: 0,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        let p = &self.pretrain;
        let c = &self.classify;
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if !(p.lr > 0.0 && c.lr > 0.0) || p.weight_decay < 0.0 || c.weight_decay < 0.0 {
            return bad("learning rates must be > 0 and weight decays >= 0");
        }
        if p.epochs == 0 || p.steps_per_epoch == Some(0) {
            return bad("pretrain epochs and steps_per_epoch must be >= 1");
        }
        if c.min_epochs > c.max_epochs || c.max_epochs == 0 {
            return bad("classify requires 1 <= max_epochs and min_epochs <= max_epochs");
        }
        if c.patience == 0 {
            return bad("patience must be >= 1");
        }
        if c.batch_size == 0 || self.batch_size < 2 {
            return bad("classifier batch_size must be >= 1 and contrastive batch_size >= 2");
        }
        if !(0.0 < c.val_fraction && c.val_fraction < 1.0) {
            return bad("val_fraction must be in (0, 1)");
        }
        Ok(())
    }
}

/// Everything one cross-subject experiment needs besides the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub encoder: EncoderConfig,
    pub loss: LossConfig,
    pub schedule: TrainSchedule,
    #[serde(default)]
    pub smoothing: Smoothing,
    #[serde(default = "default_hidden")]
    pub classifier_hidden: Vec<usize>,
    /// Samples per encoder window.
    pub window_samples: usize,
    pub folds: FoldProtocol,
    /// Skip pretraining and classify with the randomly initialized encoder.
    #[serde(default)]
    pub skip_pretrain: bool,
}

fn default_hidden() -> Vec<usize> {
    vec![64]
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.loss.validate()?;
        self.schedule.validate()?;
        self.smoothing.validate()?;
        if self.classifier_hidden.iter().any(|&h| h == 0) {
            return Err(Error::InvalidConfig("classifier hidden widths must be >= 1".into()));
        }
        if self.window_samples < self.encoder.min_input_len() {
            return Err(Error::InputTooShort {
                got: self.window_samples,
                need: self.encoder.min_input_len(),
            });
        }
        let tokens = self.encoder.token_count(self.window_samples);
        if self.loss.sim.k > tokens {
            return Err(Error::KOutOfRange {
                k: self.loss.sim.k,
                len: tokens,
            });
        }
        Ok(())
    }
}

/// Independent child seed for a named purpose.
pub fn derive_seed(seed: u64, tag: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(tag.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_published_hyperparameters() {
        let s = TrainSchedule::default();
        assert_eq!(s.pretrain.lr, 0.0007);
        assert_eq!(s.pretrain.weight_decay, 0.00015);
        assert_eq!(s.pretrain.epochs, 10);
        assert_eq!(s.classify.lr, 0.005);
        assert_eq!(s.classify.weight_decay, 0.0022);
        assert_eq!((s.classify.min_epochs, s.classify.max_epochs, s.classify.patience), (30, 100, 30));
        assert!(s.validate().is_ok());
    }

    #[test]
    fn schedule_validation() {
        let mut s = TrainSchedule::default();
        s.classify.min_epochs = 200;
        assert!(s.validate().is_err());
        let mut s = TrainSchedule::default();
        s.classify.patience = 0;
        assert!(s.validate().is_err());
        let json = r#"{"batch_size": 4, "seed": 1, "bogus": 3}"#;
        assert!(serde_json::from_str::<TrainSchedule>(json).is_err());
    }

    #[test]
    fn derived_seeds_differ() {
        let a = derive_seed(1, 2, 3);
        assert_eq!(a, derive_seed(1, 2, 3));
        assert_ne!(a, derive_seed(1, 2, 4));
        assert_ne!(a, derive_seed(1, 3, 3));
        assert_ne!(a, derive_seed(2, 2, 3));
    }
}
