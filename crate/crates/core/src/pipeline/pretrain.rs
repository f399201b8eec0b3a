use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{derive_seed, TrainSchedule};
use crate::encoder::{encode_var, project_var, EncoderConfig, EncoderParams, Mode};
use crate::error::{Error, Result};
use crate::loss::{contrastive_loss_var, LossConfig};
use crate::mat::Mat;
use crate::optim::{AdamW, AdamWConfig};
use crate::preprocess::Segment;
use crate::synth::PairSampler;
use crate::tape::Tape;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainOutput {
    #[serde(skip)]
    pub params: Option<EncoderParams>,
    /// Mean loss per epoch.
    pub loss_curve: Vec<f64>,
    /// Loss of the first batch, before any update.
    pub initial_loss: f64,
    /// Mean positive logit of the first batch, before any update.
    pub initial_positive_logit: f64,
    /// Mean positive logit over the last epoch.
    pub final_positive_logit: f64,
    pub batch_size: usize,
    pub steps_per_epoch: usize,
}

/// Contrastive pretraining on stimulus-aligned cross-subject window pairs.
///
/// `seed` drives initialization, pair sampling and dropout.
pub fn pretrain(
    segments: &[&Segment],
    window_samples: usize,
    sched: &TrainSchedule,
    enc_cfg: &EncoderConfig,
    loss_cfg: &LossConfig,
    seed: u64,
) -> Result<PretrainOutput> {
    sched.validate()?;
    enc_cfg.validate()?;
    loss_cfg.validate()?;
    let subjects: BTreeSet<u32> = segments.iter().map(|s| s.subject_id).collect();
    let stimuli: BTreeSet<u32> = segments.iter().map(|s| s.stimulus_id).collect();
    if subjects.len() < 2 || stimuli.len() < 2 {
        return Err(Error::Insufficient(format!(
            "pretraining needs >= 2 subjects and >= 2 stimuli, got {} and {}",
            subjects.len(),
            stimuli.len()
        )));
    }
    let mut sampler = PairSampler::new(segments, window_samples, derive_seed(seed, 1, 0))?;
    let batch_size = sched.batch_size.min(sampler.n_stimuli());
    if batch_size < 2 {
        return Err(Error::BatchTooSmall(batch_size));
    }
    let total_windows = segments.len() * sampler.intervals();
    let steps_per_epoch = sched
        .pretrain
        .steps_per_epoch
        .unwrap_or_else(|| (total_windows / batch_size).max(1));

    let mut params = EncoderParams::init(enc_cfg, derive_seed(seed, 0, 0))?;
    let mut opt = {
        let named = params.named();
        let refs: Vec<&Mat> = named.iter().map(|(_, m)| *m).collect();
        AdamW::new(
            AdamWConfig::new(sched.pretrain.lr, sched.pretrain.weight_decay),
            &refs,
        )
    };
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 2, 0));

    let mut loss_curve = Vec::with_capacity(sched.pretrain.epochs);
    let mut initial_loss = f64::NAN;
    let mut initial_positive_logit = f64::NAN;
    let mut final_positive_logit = f64::NAN;
    let mut step = 0usize;
    for epoch in 0..sched.pretrain.epochs {
        let mut epoch_loss = 0.0;
        let mut epoch_logit = 0.0;
        for _ in 0..steps_per_epoch {
            let batch = sampler.sample_pairs(batch_size)?;
            let mut tape = Tape::new();
            let w = params.bind(&mut tape, true);
            let mut encode_all = |tape: &mut Tape, windows: &[Mat]| -> Result<Vec<_>> {
                windows
                    .iter()
                    .map(|x| {
                        let xv = tape.constant(x.clone());
                        let enc = encode_var(tape, xv, &w, enc_cfg, Mode::Train(&mut dropout_rng))?;
                        project_var(tape, enc.tokens, &w)
                    })
                    .collect()
            };
            let anchors = encode_all(&mut tape, &batch.anchors)?;
            let positives = encode_all(&mut tape, &batch.positives)?;
            let out = match contrastive_loss_var(&mut tape, &anchors, &positives, loss_cfg) {
                Ok(out) => out,
                Err(Error::NonFinite(_)) => {
                    return Err(Error::Diverged {
                        step,
                        loss: f64::NAN,
                    })
                }
                Err(e) => return Err(e),
            };
            let loss = tape.value(out.loss).item();
            if !loss.is_finite() {
                return Err(Error::Diverged { step, loss });
            }
            if step == 0 {
                initial_loss = loss;
                initial_positive_logit = out.mean_positive_logit();
            }
            epoch_loss += loss;
            epoch_logit += out.mean_positive_logit();
            let grads = tape.backward(out.loss)?;
            let g: Vec<Mat> = w.named().iter().map(|(_, v)| grads.get(**v)).collect();
            if g.iter().any(|m| !m.is_finite()) {
                return Err(Error::Diverged { step, loss });
            }
            opt.step(&mut params.tensors_mut(), &g);
            step += 1;
        }
        let mean = epoch_loss / steps_per_epoch as f64;
        log::info!("pretrain epoch {epoch}: loss {mean:.5}");
        loss_curve.push(mean);
        final_positive_logit = epoch_logit / steps_per_epoch as f64;
    }
    if !params.is_finite() {
        return Err(Error::Diverged {
            step,
            loss: f64::NAN,
        });
    }
    Ok(PretrainOutput {
        params: Some(params),
        loss_curve,
        initial_loss,
        initial_positive_logit,
        final_positive_logit,
        batch_size,
        steps_per_epoch,
    })
}
