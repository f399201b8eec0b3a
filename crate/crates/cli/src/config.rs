use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use ta2cl::encoder::EncoderConfig;
use ta2cl::loss::LossConfig;
use ta2cl::pipeline::{PipelineConfig, Smoothing, TrainSchedule};
use ta2cl::preprocess::ArtifactThresholds;
use ta2cl::synth::{FoldProtocol, SynthSpec};

use crate::failure::Failure;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub data: PathBuf,
    pub out: PathBuf,
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
}

/// Optional cleanup applied to every loaded segment, in field order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreprocessConfig {
    #[serde(default)]
    pub target_rate: Option<f64>,
    /// `[lo, hi]` in Hz.
    #[serde(default)]
    pub band: Option<[f64; 2]>,
    /// `(m, n)` pairs; empty disables artifact repair.
    #[serde(default)]
    pub artifact_thresholds: Vec<ArtifactThresholds>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationConfig {
    #[serde(default = "default_ks")]
    pub ks: Vec<usize>,
    /// Attention curves dumped by the attention ablation.
    #[serde(default = "default_curves")]
    pub max_curves: usize,
    /// Positive pairs per fold for the Top-3 diagnostic.
    #[serde(default = "default_pairs")]
    pub top3_pairs: usize,
    #[serde(default = "default_bins")]
    pub top3_bins: usize,
}

fn default_ks() -> Vec<usize> {
    vec![1, 2, 3]
}
fn default_curves() -> usize {
    16
}
fn default_pairs() -> usize {
    32
}
fn default_bins() -> usize {
    20
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            ks: default_ks(),
            max_curves: default_curves(),
            top3_pairs: default_pairs(),
            top3_bins: default_bins(),
        }
    }
}

fn default_hidden() -> Vec<usize> {
    vec![64]
}

/// One JSON document describing a whole experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub name: String,
    pub seed: u64,
    pub paths: Paths,
    #[serde(default)]
    pub synth: Option<SynthSpec>,
    #[serde(default)]
    pub preprocess: Option<PreprocessConfig>,
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub loss: LossConfig,
    pub schedule: TrainSchedule,
    #[serde(default)]
    pub smoothing: Smoothing,
    #[serde(default = "default_hidden")]
    pub classifier_hidden: Vec<usize>,
    pub window_samples: usize,
    pub folds: FoldProtocol,
    #[serde(default)]
    pub ablation: AblationConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, Failure> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::Validation(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Failure::Validation(format!("config {}: {e}", path.display())))
    }

    /// Applies command-line overrides; the run seed always wins over `schedule.seed`.
    pub fn resolve(mut self, seed: Option<u64>, out: Option<PathBuf>, checkpoint: Option<PathBuf>) -> Self {
        if let Some(s) = seed {
            self.seed = s;
        }
        if let Some(o) = out {
            self.paths.out = o;
        }
        if checkpoint.is_some() {
            self.paths.checkpoint = checkpoint;
        }
        self.schedule.seed = self.seed;
        self
    }

    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            encoder: self.encoder.clone(),
            loss: self.loss,
            schedule: self.schedule,
            smoothing: self.smoothing,
            classifier_hidden: self.classifier_hidden.clone(),
            window_samples: self.window_samples,
            folds: self.folds,
            skip_pretrain: false,
        }
    }

    /// Checks every section before any work starts.
    pub fn validate(&self) -> Result<(), Failure> {
        self.pipeline().validate()?;
        if let Some(s) = &self.synth {
            s.validate()?;
            if s.channels != self.encoder.channels {
                return Err(Failure::Validation(format!(
                    "synth produces {} channels but the encoder expects {}",
                    s.channels, self.encoder.channels
                )));
            }
        }
        if let Some(p) = &self.preprocess {
            if p.target_rate.is_some_and(|r| !(r > 0.0)) {
                return Err(Failure::Validation("preprocess.target_rate must be > 0".into()));
            }
            if let Some([lo, hi]) = p.band {
                if !(0.0 < lo && lo < hi) {
                    return Err(Failure::Validation("preprocess.band needs 0 < lo < hi".into()));
                }
            }
            for t in &p.artifact_thresholds {
                t.validate()?;
            }
        }
        let a = &self.ablation;
        if a.ks.is_empty() || a.ks.contains(&0) {
            return Err(Failure::Validation("ablation.ks must be non-empty and >= 1".into()));
        }
        let tokens = self.encoder.token_count(self.window_samples);
        if let Some(&k) = a.ks.iter().find(|&&k| k > tokens) {
            return Err(Failure::Validation(format!("ablation K={k} exceeds {tokens} tokens per window")));
        }
        if a.top3_bins == 0 || a.top3_pairs == 0 {
            return Err(Failure::Validation("ablation.top3_bins and top3_pairs must be >= 1".into()));
        }
        Ok(())
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.paths
            .checkpoint
            .clone()
            .unwrap_or_else(|| self.paths.out.join("encoder.ckpt"))
    }

    pub fn to_value(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}
