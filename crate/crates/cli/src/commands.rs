use std::path::Path;

use log::info;
use serde::Serialize;
use ta2cl::encoder::EncoderParams;
use ta2cl::pipeline::{
    classify_with_encoder, pretrain, run_ablation_aggregation, run_ablation_k, run_attention_ablation,
    run_experiment, run_top3_analysis, AblationTable, EvalReport, PretrainOutput,
};
use ta2cl::preprocess::{bandpass, detect_and_repair, downsample, Segment};
use ta2cl::synth::{generate, read_dataset, write_dataset};

use crate::config::RunConfig;
use crate::failure::Failure;

type Result<T> = std::result::Result<T, Failure>;

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Failure::Runtime(format!("writing {}: {e}", path.display())))
}

fn prepare_out(cfg: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(&cfg.paths.out)
        .map_err(|e| Failure::Runtime(format!("creating {}: {e}", cfg.paths.out.display())))?;
    let echo = serde_json::to_string_pretty(cfg).expect("config serializes");
    write(&cfg.paths.out.join("config.json"), echo)
}

/// Loads the dataset, applies the configured cleanup and checks it fits the encoder.
fn load_segments(cfg: &RunConfig) -> Result<Vec<Segment>> {
    let dir = &cfg.paths.data;
    if !dir.join(ta2cl::synth::MANIFEST_NAME).is_file() {
        return Err(Failure::Runtime(format!("no dataset manifest in {}", dir.display())));
    }
    let mut segments = read_dataset(dir)?;
    if let Some(p) = &cfg.preprocess {
        segments = segments
            .into_iter()
            .map(|mut s| {
                if let Some(rate) = p.target_rate {
                    s = downsample(&s, rate)?;
                }
                if let Some([lo, hi]) = p.band {
                    s = bandpass(&s, lo, hi)?;
                }
                if !p.artifact_thresholds.is_empty() {
                    let (repaired, flagged) = detect_and_repair(&s, &p.artifact_thresholds)?;
                    if !flagged.is_empty() {
                        info!(
                            "subject {} stimulus {}: repaired channels {:?}",
                            s.subject_id, s.stimulus_id, flagged
                        );
                    }
                    s = repaired;
                }
                Ok(s)
            })
            .collect::<ta2cl::Result<_>>()?;
    }
    if let Some(s) = segments.iter().find(|s| s.channels() != cfg.encoder.channels) {
        return Err(Failure::Validation(format!(
            "segment of subject {} has {} channels but the encoder expects {}",
            s.subject_id,
            s.channels(),
            cfg.encoder.channels
        )));
    }
    if let Some(s) = segments.iter().find(|s| s.samples() < cfg.window_samples) {
        return Err(Failure::Validation(format!(
            "segment of subject {} has {} samples, shorter than one {}-sample window",
            s.subject_id,
            s.samples(),
            cfg.window_samples
        )));
    }
    info!("loaded {} segments from {}", segments.len(), dir.display());
    Ok(segments)
}

fn load_checkpoint(cfg: &RunConfig) -> Result<EncoderParams> {
    let path = cfg.checkpoint_path();
    if !path.is_file() {
        return Err(Failure::Runtime(format!("checkpoint {} not found", path.display())));
    }
    EncoderParams::load(&path, &cfg.encoder).map_err(|e| match Failure::from(e) {
        Failure::Validation(m) => Failure::Validation(format!(
            "checkpoint {} does not match the encoder config: {m}",
            path.display()
        )),
        other => other,
    })
}

fn write_report(cfg: &RunConfig, stem: &str, mut report: EvalReport) -> Result<()> {
    report.config = cfg.to_value();
    let out = &cfg.paths.out;
    write(&out.join(format!("{stem}.json")), report.to_json())?;
    write(&out.join(format!("{stem}.csv")), report.to_csv()?)?;
    if report.folds.iter().any(|f| f.pretrain.is_some()) {
        write(&out.join(format!("{stem}_loss_curves.csv")), report.loss_curves_csv())?;
    }
    println!("{}: {} accuracy {}%", cfg.name, stem, report.summary());
    Ok(())
}

fn write_table(cfg: &RunConfig, mut table: AblationTable) -> Result<()> {
    table.config = cfg.to_value();
    let out = &cfg.paths.out;
    let stem = format!("ablation_{}", table.kind);
    write(&out.join(format!("{stem}.json")), table.to_json())?;
    write(&out.join(format!("{stem}.csv")), table.to_csv())?;
    for r in &table.rows {
        println!("{}: {} {:.1}±{:.1}", stem, r.variant, r.mean, r.std);
    }
    Ok(())
}

pub fn synth(cfg: &RunConfig, out_override: bool) -> Result<()> {
    let spec = cfg
        .synth
        .as_ref()
        .ok_or_else(|| Failure::Validation("the synth command needs a `synth` section".into()))?;
    let dir = if out_override { &cfg.paths.out } else { &cfg.paths.data };
    let segments = generate(spec)?;
    let rows = write_dataset(dir, &segments)?;
    println!("wrote {} segments to {}", rows.len(), dir.display());
    Ok(())
}

#[derive(Serialize)]
struct PretrainRecord<'a> {
    experiment: &'a str,
    seed: u64,
    checkpoint: String,
    encoder_digest: String,
    #[serde(flatten)]
    output: &'a PretrainOutput,
    config: serde_json::Value,
}

pub fn pretrain_cmd(cfg: &RunConfig) -> Result<()> {
    let segments = load_segments(cfg)?;
    prepare_out(cfg)?;
    let refs: Vec<&Segment> = segments.iter().collect();
    let mut out = pretrain(&refs, cfg.window_samples, &cfg.schedule, &cfg.encoder, &cfg.loss, cfg.seed)?;
    let params = out.params.take().expect("pretrain returns parameters");
    let ckpt = cfg.checkpoint_path();
    if let Some(parent) = ckpt.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    params.save(&ckpt)?;
    let record = PretrainRecord {
        experiment: &cfg.name,
        seed: cfg.seed,
        checkpoint: ckpt.display().to_string(),
        encoder_digest: params.digest(),
        output: &out,
        config: cfg.to_value(),
    };
    let json = serde_json::to_string_pretty(&record).expect("record serializes");
    write(&cfg.paths.out.join("pretrain.json"), json)?;
    let mut curve = String::from("epoch,loss\n");
    for (e, l) in out.loss_curve.iter().enumerate() {
        curve.push_str(&format!("{e},{l}\n"));
    }
    write(&cfg.paths.out.join("pretrain_loss_curve.csv"), curve)?;
    println!(
        "{}: pretrained {} epochs, loss {:.4} -> {:.4}, checkpoint {}",
        cfg.name,
        out.loss_curve.len(),
        out.loss_curve.first().copied().unwrap_or(f64::NAN),
        out.loss_curve.last().copied().unwrap_or(f64::NAN),
        ckpt.display()
    );
    Ok(())
}

pub fn classify(cfg: &RunConfig) -> Result<()> {
    let params = load_checkpoint(cfg)?;
    let segments = load_segments(cfg)?;
    prepare_out(cfg)?;
    let out = classify_with_encoder(&segments, &cfg.pipeline(), &params, &cfg.name)?;
    write_report(cfg, "classify", out.report)
}

/// Full per-fold pipeline, or classification only when a checkpoint is configured.
pub fn eval(cfg: &RunConfig) -> Result<()> {
    if cfg.paths.checkpoint.is_some() {
        let params = load_checkpoint(cfg)?;
        let segments = load_segments(cfg)?;
        prepare_out(cfg)?;
        let out = classify_with_encoder(&segments, &cfg.pipeline(), &params, &cfg.name)?;
        return write_report(cfg, "eval", out.report);
    }
    let segments = load_segments(cfg)?;
    prepare_out(cfg)?;
    let out = run_experiment(&segments, &cfg.pipeline(), &cfg.name, false)?;
    write_report(cfg, "eval", out.report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum AblationKind {
    K,
    Aggregation,
    Attention,
}

pub fn ablate(cfg: &RunConfig, kind: AblationKind) -> Result<()> {
    let segments = load_segments(cfg)?;
    prepare_out(cfg)?;
    let base = cfg.pipeline();
    match kind {
        AblationKind::K => write_table(cfg, run_ablation_k(&segments, &base, &cfg.ablation.ks)?),
        AblationKind::Aggregation => write_table(cfg, run_ablation_aggregation(&segments, &base)?),
        AblationKind::Attention => {
            let a = run_attention_ablation(&segments, &base, cfg.ablation.max_curves)?;
            write(&cfg.paths.out.join("attention_curves.csv"), a.curves_csv())?;
            write_table(cfg, a.table)
        }
    }
}

pub fn top3(cfg: &RunConfig) -> Result<()> {
    let segments = load_segments(cfg)?;
    prepare_out(cfg)?;
    let mut a = run_top3_analysis(&segments, &cfg.pipeline(), cfg.ablation.top3_pairs, cfg.ablation.top3_bins)?;
    a.table.config = cfg.to_value();
    let out = &cfg.paths.out;
    write(&out.join("top3.json"), serde_json::to_string_pretty(&a).expect("analysis serializes"))?;
    write(&out.join("top3_histogram.csv"), a.histogram_csv())?;
    for g in &a.groups {
        println!(
            "top3: folds preferring {:?}, K={} encoder: {} tokens, mean variance {:.6}",
            g.preference, g.k, g.n_tokens, g.mean_variance
        );
    }
    Ok(())
}
