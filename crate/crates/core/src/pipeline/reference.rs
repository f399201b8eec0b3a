//! Published accuracies kept for orientation next to synthetic results.
//!
//! They come from full-scale EEG datasets and GPU training and are not
//! expected to be reproduced by anything in this crate.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PaperReference {
    pub source: String,
    pub dataset: String,
    pub variant: String,
    /// Percent.
    pub mean: f64,
    pub std: Option<f64>,
    pub reproducible: bool,
}

fn entry(source: &str, variant: &str, mean: f64, std: Option<f64>) -> PaperReference {
    PaperReference {
        source: source.into(),
        dataset: "FACED-9".into(),
        variant: variant.into(),
        mean,
        std,
        reproducible: false,
    }
}

/// K sweep reference.
pub fn k_sweep() -> Vec<PaperReference> {
    vec![entry("published K sweep", "K=1", 64.5, Some(6.6))]
}

/// Aggregation reference (token aggregation).
pub fn aggregation() -> Vec<PaperReference> {
    vec![
        entry("published aggregation ablation", "Mean", 64.5, Some(6.6)),
        entry("published aggregation ablation", "Sum", 45.3, Some(6.5)),
    ]
}

/// Attention ablation reference.
pub fn attention() -> Vec<PaperReference> {
    vec![
        entry("published attention ablation", "attention off", 48.4, None),
        entry("published attention ablation", "attention on", 64.5, None),
    ]
}
