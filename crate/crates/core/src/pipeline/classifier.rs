use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::report::ConfusionMatrix;
use super::ClassifySchedule;
use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::optim::{AdamW, AdamWConfig};
use crate::tape::{Tape, Var};

/// MLP weights: `(W: in x out, b: 1 x out)` per layer, ReLU between layers.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierParams {
    pub layers: Vec<(Mat, Mat)>,
}

impl ClassifierParams {
    pub fn init(input: usize, hidden: &[usize], classes: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut widths = vec![input];
        widths.extend_from_slice(hidden);
        widths.push(classes);
        let layers = widths
            .windows(2)
            .map(|w| {
                let bound = (1.0 / w[0] as f64).sqrt();
                (
                    Mat::from_fn(w[0], w[1], |_, _| rng.gen_range(-bound..bound)),
                    Mat::zeros(1, w[1]),
                )
            })
            .collect();
        Self { layers }
    }

    pub fn n_classes(&self) -> usize {
        self.layers.last().map_or(0, |(w, _)| w.cols())
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, |(w, _)| w.rows())
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|(w, b)| w.is_finite() && b.is_finite())
    }

    fn forward_var(&self, tape: &mut Tape, x: Var, bound: &[(Var, Var)]) -> Result<Var> {
        let mut h = x;
        for (i, (w, b)) in bound.iter().enumerate() {
            h = tape.matmul(h, *w)?;
            h = tape.add_row_bias(h, *b)?;
            if i + 1 < bound.len() {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }

    pub fn logits(&self, x: &Mat) -> Result<Mat> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let bound: Vec<(Var, Var)> = self
            .layers
            .iter()
            .map(|(w, b)| (tape.constant(w.clone()), tape.constant(b.clone())))
            .collect();
        let out = self.forward_var(&mut tape, xv, &bound)?;
        Ok(tape.value(out).clone())
    }

    /// Row-wise softmax class probabilities.
    pub fn predict_proba(&self, x: &Mat) -> Result<Mat> {
        let mut z = self.logits(x)?;
        for i in 0..z.rows() {
            let row = z.row_mut(i);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        Ok(z)
    }

    /// Most probable class per row; ties go to the lower index.
    pub fn predict(&self, x: &Mat) -> Result<Vec<usize>> {
        let z = self.logits(x)?;
        Ok((0..z.rows())
            .map(|i| {
                let row = z.row(i);
                let mut best = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect())
    }

    pub fn evaluate(&self, x: &Mat, labels: &[usize]) -> Result<ConfusionMatrix> {
        let pred = self.predict(x)?;
        ConfusionMatrix::from_predictions(self.n_classes(), labels, &pred)
    }
}

#[derive(Debug, Clone)]
pub struct TrainedClassifier {
    pub params: ClassifierParams,
    /// Validation accuracy (fraction) per epoch.
    pub val_curve: Vec<f64>,
    pub best_epoch: usize,
    pub epochs_run: usize,
}

/// Cross-entropy training with AdamW on mini-batches and early stopping on
/// validation accuracy; the best-epoch weights are restored.
///
/// Early stopping only triggers once `min_epochs` have run and `patience`
/// epochs have passed without a strict improvement.
pub fn train_classifier(
    train_x: &Mat,
    train_y: &[usize],
    val_x: &Mat,
    val_y: &[usize],
    n_classes: usize,
    hidden: &[usize],
    sched: &ClassifySchedule,
    seed: u64,
) -> Result<TrainedClassifier> {
    if train_x.rows() != train_y.len() || val_x.rows() != val_y.len() {
        return Err(Error::InvalidConfig("feature and label counts differ".into()));
    }
    if val_x.rows() == 0 {
        return Err(Error::Insufficient("validation split is empty".into()));
    }
    if let Some(&bad) = train_y.iter().chain(val_y).find(|&&y| y >= n_classes) {
        return Err(Error::InvalidConfig(format!("label {bad} out of range for {n_classes} classes")));
    }
    for c in 0..n_classes {
        if !train_y.contains(&c) {
            return Err(Error::Insufficient(format!("class {c} absent from training labels")));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ClassifierParams::init(train_x.cols(), hidden, n_classes, rng.gen());
    let mut opt = {
        let refs: Vec<&Mat> = params.layers.iter().flat_map(|(w, b)| [w, b]).collect();
        AdamW::new(AdamWConfig::new(sched.lr, sched.weight_decay), &refs)
    };
    let mut order: Vec<usize> = (0..train_x.rows()).collect();
    let mut best = (f64::NEG_INFINITY, params.clone(), 0usize);
    let mut val_curve = Vec::new();
    let mut since_best = 0;
    let mut epochs_run = 0;
    for epoch in 0..sched.max_epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(sched.batch_size) {
            let mut tape = Tape::new();
            let x = tape.constant(train_x.select_rows(chunk));
            let bound: Vec<(Var, Var)> = params
                .layers
                .iter()
                .map(|(w, b)| (tape.param(w.clone()), tape.param(b.clone())))
                .collect();
            let logits = params.forward_var(&mut tape, x, &bound)?;
            let targets: Vec<usize> = chunk.iter().map(|&i| train_y[i]).collect();
            let loss = tape.softmax_cross_entropy(logits, &targets)?;
            let lv = tape.value(loss).item();
            if !lv.is_finite() {
                return Err(Error::Diverged { step: epoch, loss: lv });
            }
            let grads = tape.backward(loss)?;
            let g: Vec<Mat> = bound.iter().flat_map(|(w, b)| [grads.get(*w), grads.get(*b)]).collect();
            let mut refs: Vec<&mut Mat> = params.layers.iter_mut().flat_map(|(w, b)| [w, b]).collect();
            opt.step(&mut refs, &g);
        }
        epochs_run = epoch + 1;
        let acc = params.evaluate(val_x, val_y)?.accuracy();
        val_curve.push(acc);
        if acc > best.0 {
            best = (acc, params.clone(), epoch);
            since_best = 0;
        } else {
            since_best += 1;
        }
        if epochs_run >= sched.min_epochs && since_best >= sched.patience {
            break;
        }
    }
    if !best.1.is_finite() {
        return Err(Error::NonFinite("classifier weights".into()));
    }
    Ok(TrainedClassifier {
        params: best.1,
        val_curve,
        best_epoch: best.2,
        epochs_run,
    })
}
