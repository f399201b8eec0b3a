use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::pretrain::PretrainOutput;
use super::reference::PaperReference;
use crate::error::{Error, Result};

/// Rows are true classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<usize>>,
}

impl ConfusionMatrix {
    pub fn zeros(n: usize) -> Self {
        Self {
            counts: vec![vec![0; n]; n],
        }
    }

    pub fn from_predictions(n: usize, truth: &[usize], pred: &[usize]) -> Result<Self> {
        if truth.len() != pred.len() {
            return Err(Error::InvalidConfig("truth and prediction lengths differ".into()));
        }
        let mut m = Self::zeros(n);
        for (&t, &p) in truth.iter().zip(pred) {
            if t >= n || p >= n {
                return Err(Error::InvalidConfig(format!("class index out of range for {n} classes")));
            }
            m.counts[t][p] += 1;
        }
        Ok(m)
    }

    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> usize {
        (0..self.counts.len()).map(|i| self.counts[i][i]).sum()
    }

    /// Fraction correct; zero for an empty matrix.
    pub fn accuracy(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            0.0
        } else {
            self.trace() as f64 / total as f64
        }
    }

    pub fn row_sums(&self) -> Vec<usize> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    pub fn add(&mut self, other: &ConfusionMatrix) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub train_subjects: Vec<u32>,
    pub test_subjects: Vec<u32>,
    /// Percent, equal to `100 * trace / total` of `confusion`.
    pub accuracy: f64,
    pub confusion: ConfusionMatrix,
    pub pretrain: Option<PretrainOutput>,
    pub classifier_epochs: usize,
    pub best_epoch: usize,
    /// SHA-256 of the frozen encoder checkpoint.
    pub encoder_digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub experiment: String,
    pub seed: u64,
    pub folds: Vec<FoldResult>,
    /// Percent over folds.
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    /// Summed over folds.
    pub confusion: ConfusionMatrix,
    pub config: serde_json::Value,
    pub wall_time_secs: f64,
}

impl EvalReport {
    pub fn new(
        experiment: String,
        seed: u64,
        folds: Vec<FoldResult>,
        config: serde_json::Value,
        wall_time_secs: f64,
    ) -> Self {
        let accs: Vec<f64> = folds.iter().map(|f| f.accuracy).collect();
        let (mean_accuracy, std_accuracy) = mean_std(&accs);
        let n = folds.first().map_or(0, |f| f.confusion.counts.len());
        let mut confusion = ConfusionMatrix::zeros(n);
        for f in &folds {
            confusion.add(&f.confusion);
        }
        Self {
            experiment,
            seed,
            folds,
            mean_accuracy,
            std_accuracy,
            confusion,
            config,
            wall_time_secs,
        }
    }

    /// `"mean±std"` with one decimal.
    pub fn summary(&self) -> String {
        format!("{:.1}±{:.1}", self.mean_accuracy, self.std_accuracy)
    }

    pub fn fold_accuracies(&self) -> Vec<f64> {
        self.folds.iter().map(|f| f.accuracy).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Hash of the report with wall time removed; equal across reruns of one (seed, config).
    pub fn determinism_digest(&self) -> String {
        let mut clone = self.clone();
        clone.wall_time_secs = 0.0;
        hex::encode(Sha256::digest(clone.to_json().as_bytes()))
    }

    /// One row per fold plus a summary row.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let err = |e: csv::Error| Error::Format(e.to_string());
        w.write_record(["fold", "test_subjects", "accuracy", "n_test", "final_pretrain_loss"])
            .map_err(err)?;
        for f in &self.folds {
            let subjects: Vec<String> = f.test_subjects.iter().map(u32::to_string).collect();
            let final_loss = f
                .pretrain
                .as_ref()
                .and_then(|p| p.loss_curve.last())
                .map_or(String::new(), |l| l.to_string());
            w.write_record([
                f.fold.to_string(),
                subjects.join(" "),
                f.accuracy.to_string(),
                f.confusion.total().to_string(),
                final_loss,
            ])
            .map_err(err)?;
        }
        w.write_record([
            "mean".to_string(),
            String::new(),
            self.mean_accuracy.to_string(),
            self.confusion.total().to_string(),
            String::new(),
        ])
        .map_err(err)?;
        w.write_record([
            "std".to_string(),
            String::new(),
            self.std_accuracy.to_string(),
            String::new(),
            String::new(),
        ])
        .map_err(err)?;
        String::from_utf8(w.into_inner().map_err(|e| Error::Format(e.to_string()))?)
            .map_err(|e| Error::Format(e.to_string()))
    }

    /// Per-epoch pretraining loss, one row per (fold, epoch).
    pub fn loss_curves_csv(&self) -> String {
        let mut out = String::from("fold,epoch,loss\n");
        for f in &self.folds {
            if let Some(p) = &f.pretrain {
                for (e, l) in p.loss_curve.iter().enumerate() {
                    out.push_str(&format!("{},{},{}\n", f.fold, e, l));
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    /// Percent per fold.
    pub accuracies: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    /// Mean positive logit of the first pretraining batch, averaged over folds.
    pub initial_positive_logit: Option<f64>,
    /// Mean positive logit over the last pretraining epoch, averaged over folds.
    pub final_positive_logit: Option<f64>,
    pub report: EvalReport,
}

impl AblationRow {
    pub fn from_report(variant: impl Into<String>, report: EvalReport) -> Self {
        let avg = |f: fn(&PretrainOutput) -> f64| {
            let v: Vec<f64> = report.folds.iter().filter_map(|x| x.pretrain.as_ref().map(f)).collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        };
        Self {
            variant: variant.into(),
            accuracies: report.fold_accuracies(),
            mean: report.mean_accuracy,
            std: report.std_accuracy,
            initial_positive_logit: avg(|p| p.initial_positive_logit),
            final_positive_logit: avg(|p| p.final_positive_logit),
            report,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub kind: String,
    pub rows: Vec<AblationRow>,
    /// Published numbers for orientation only; not reproducible at this scale.
    pub paper_reference: Vec<PaperReference>,
    pub config: serde_json::Value,
    pub wall_time_secs: f64,
}

impl AblationTable {
    pub fn row(&self, variant: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("table serializes")
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("variant,mean,std,accuracies,initial_positive_logit,final_positive_logit\n");
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        for r in &self.rows {
            let accs: Vec<String> = r.accuracies.iter().map(f64::to_string).collect();
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.variant,
                r.mean,
                r.std,
                accs.join(" "),
                opt(r.initial_positive_logit),
                opt(r.final_positive_logit)
            ));
        }
        out
    }
}
