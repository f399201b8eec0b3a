//! Synthetic latency-shifted recordings, stimulus-aligned pair sampling and
//! cross-subject folds.
//!
//! Every stimulus carries a fixed multichannel oscillatory pattern: a
//! class-keyed frequency and channel mixture plus a weaker stimulus-specific
//! component. Each (subject, stimulus, window) places that pattern at its own
//! uniformly drawn latency, scales it by the subject gain and adds pink-ish
//! noise. Global position-by-position alignment therefore cannot match two
//! recordings of the same stimulus, while local soft matching can.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::preprocess::Segment;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub n_subjects: usize,
    pub n_stimuli: usize,
    pub n_classes: usize,
    pub channels: usize,
    pub sample_rate: f64,
    /// Seconds.
    pub window_len: f64,
    /// Seconds.
    pub pattern_len: f64,
    /// Seconds.
    pub max_latency_shift: f64,
    pub noise_sigma: f64,
    pub subject_gain_range: [f64; 2],
    pub seed: u64,
    /// Consecutive windows per (subject, stimulus) recording.
    #[serde(default = "one")]
    pub windows_per_trial: usize,
}

fn one() -> usize {
    1
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_subjects: 6,
            n_stimuli: 9,
            n_classes: 3,
            channels: 2,
            sample_rate: 64.0,
            window_len: 4.0,
            pattern_len: 1.5,
            max_latency_shift: 1.6,
            noise_sigma: 0.5,
            subject_gain_range: [0.8, 1.2],
            seed: 0,
            windows_per_trial: 4,
        }
    }
}

impl SynthSpec {
    pub fn window_samples(&self) -> usize {
        (self.window_len * self.sample_rate).round() as usize
    }

    pub fn pattern_samples(&self) -> usize {
        (self.pattern_len * self.sample_rate).round() as usize
    }

    pub fn max_shift_samples(&self) -> usize {
        (self.max_latency_shift * self.sample_rate).round() as usize
    }

    pub fn class_of(&self, stimulus: usize) -> usize {
        stimulus % self.n_classes
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.n_subjects < 2 {
            return bad(format!("need at least 2 subjects, got {}", self.n_subjects));
        }
        if self.n_classes < 2 || self.n_stimuli < self.n_classes {
            return bad(format!(
                "need n_stimuli >= n_classes >= 2, got {} stimuli / {} classes",
                self.n_stimuli, self.n_classes
            ));
        }
        if self.n_stimuli % self.n_classes != 0 {
            return bad(format!(
                "n_stimuli ({}) must be divisible by n_classes ({})",
                self.n_stimuli, self.n_classes
            ));
        }
        if self.channels == 0 || self.windows_per_trial == 0 {
            return bad("channels and windows_per_trial must be >= 1".into());
        }
        if !(self.sample_rate > 0.0) || !(self.window_len > 0.0) || !(self.pattern_len > 0.0) {
            return bad("sample_rate, window_len and pattern_len must be positive".into());
        }
        if !(self.max_latency_shift >= 0.0) || !(self.noise_sigma >= 0.0) {
            return bad("max_latency_shift and noise_sigma must be non-negative".into());
        }
        if self.pattern_samples() + self.max_shift_samples() > self.window_samples() {
            return bad(format!(
                "pattern_len + max_latency_shift ({} s) exceeds window_len ({} s)",
                self.pattern_len + self.max_latency_shift,
                self.window_len
            ));
        }
        let [lo, hi] = self.subject_gain_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return bad(format!("subject_gain_range must satisfy 0 < lo <= hi, got [{lo}, {hi}]"));
        }
        Ok(())
    }
}

/// Fixed pattern of one stimulus, `channels x pattern_samples`.
fn stimulus_patterns(spec: &SynthSpec) -> Vec<Mat> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let rate = spec.sample_rate;
    let (f_lo, f_hi) = (0.06 * rate, 0.25 * rate);
    // ratio between neighbouring class frequencies; stimulus-specific components
    // sit strictly between a class and the next so classes never share a band
    let step = (f_hi / f_lo).powf(1.0 / (spec.n_classes - 1) as f64);
    let unit_vec = |rng: &mut ChaCha8Rng| {
        let v: Vec<f64> = (0..spec.channels).map(|_| StandardNormal.sample(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        v.into_iter().map(|x| x / n * (spec.channels as f64).sqrt()).collect::<Vec<f64>>()
    };
    let class_sig: Vec<(f64, f64, Vec<f64>)> = (0..spec.n_classes)
        .map(|c| {
            let frac = c as f64 / (spec.n_classes - 1) as f64;
            let phase = rng.gen_range(0.0..2.0 * PI);
            (f_lo * (f_hi / f_lo).powf(frac), phase, unit_vec(&mut rng))
        })
        .collect();
    let len = spec.pattern_samples();
    (0..spec.n_stimuli)
        .map(|s| {
            let (f_c, phase_c, mix_c) = &class_sig[spec.class_of(s)];
            let f = f_c * (1.0 + rng.gen_range(-0.06..0.06));
            let phase = phase_c + rng.gen_range(-0.3..0.3);
            let g = f_c * rng.gen_range(step.powf(0.3)..step.powf(0.7));
            let psi = rng.gen_range(0.0..2.0 * PI);
            let mix_s = unit_vec(&mut rng);
            Mat::from_fn(spec.channels, len, |ch, j| {
                let t = j as f64 / rate;
                let env = if len > 1 {
                    0.5 - 0.5 * (2.0 * PI * j as f64 / (len - 1) as f64).cos()
                } else {
                    1.0
                };
                let main = mix_c[ch] * (2.0 * PI * f * t + phase).sin();
                let own = 0.5 * mix_s[ch] * (2.0 * PI * g * t + psi).sin();
                env * (main + own)
            })
        })
        .collect()
}

/// Pink-ish noise (sum of leaky integrators) scaled to standard deviation `sigma`.
fn pink_noise(rng: &mut ChaCha8Rng, channels: usize, samples: usize, sigma: f64) -> Mat {
    let mut out = Mat::zeros(channels, samples);
    if sigma == 0.0 {
        return out;
    }
    let burn = 256;
    for c in 0..channels {
        let (mut b0, mut b1, mut b2) = (0.0, 0.0, 0.0);
        let row = out.row_mut(c);
        for j in 0..samples + burn {
            let w: f64 = StandardNormal.sample(rng);
            b0 = 0.99765 * b0 + w * 0.0990460;
            b1 = 0.96300 * b1 + w * 0.2965164;
            b2 = 0.57000 * b2 + w * 1.0526913;
            if j >= burn {
                row[j - burn] = b0 + b1 + b2 + w * 0.1848;
            }
        }
        let mean = row.iter().sum::<f64>() / samples as f64;
        let sd = (row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / samples as f64).sqrt();
        if sd > 0.0 {
            for v in row.iter_mut() {
                *v = (*v - mean) / sd * sigma;
            }
        }
    }
    out
}

/// One generated recording with the latencies (in samples) used for each window.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthTrial {
    pub segment: Segment,
    pub latencies: Vec<usize>,
    pub gain: f64,
}

/// Segments in subject-major order, labels = stimulus class.
pub fn generate(spec: &SynthSpec) -> Result<Vec<Segment>> {
    Ok(generate_trials(spec)?.into_iter().map(|t| t.segment).collect())
}

pub fn generate_trials(spec: &SynthSpec) -> Result<Vec<SynthTrial>> {
    spec.validate()?;
    let patterns = stimulus_patterns(spec);
    let win = spec.window_samples();
    let max_shift = spec.max_shift_samples();
    let plen = spec.pattern_samples();
    let [glo, ghi] = spec.subject_gain_range;
    let gains: Vec<f64> = {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(1);
        (0..spec.n_subjects)
            .map(|_| if glo == ghi { glo } else { rng.gen_range(glo..ghi) })
            .collect()
    };
    let n_stim = spec.n_stimuli;
    (0..spec.n_subjects * n_stim)
        .into_par_iter()
        .map(|idx| {
            let (subject, stimulus) = (idx / n_stim, idx % n_stim);
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(2 + idx as u64);
            let total = win * spec.windows_per_trial;
            let mut data = pink_noise(&mut rng, spec.channels, total, spec.noise_sigma);
            let latencies: Vec<usize> = (0..spec.windows_per_trial)
                .map(|_| rng.gen_range(0..=max_shift))
                .collect();
            let pattern = &patterns[stimulus];
            for (w, &lat) in latencies.iter().enumerate() {
                let start = w * win + lat;
                for ch in 0..spec.channels {
                    let row = data.row_mut(ch);
                    for j in 0..plen {
                        row[start + j] += gains[subject] * pattern[(ch, j)];
                    }
                }
            }
            let segment = Segment::new(
                data,
                spec.sample_rate,
                subject as u32,
                stimulus as u32,
                spec.class_of(stimulus),
            )?;
            Ok(SynthTrial {
                segment,
                latencies,
                gain: gains[subject],
            })
        })
        .collect()
}

/// Splits a recording into consecutive non-overlapping windows; a trailing remainder is dropped.
pub fn split_windows(seg: &Segment, window_samples: usize) -> Vec<Mat> {
    if window_samples == 0 {
        return Vec::new();
    }
    (0..seg.samples() / window_samples)
        .map(|w| Mat::from_fn(seg.channels(), window_samples, |c, j| seg.data[(c, w * window_samples + j)]))
        .collect()
}

/// One stimulus-aligned cross-subject pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PairDraw {
    pub stimulus: u32,
    pub interval: usize,
    pub subject_a: u32,
    pub subject_b: u32,
}

/// Raw windows for one contrastive batch; row `i` of anchors pairs with row `i` of positives.
#[derive(Debug, Clone)]
pub struct WindowBatch {
    pub draws: Vec<PairDraw>,
    pub anchors: Vec<Mat>,
    pub positives: Vec<Mat>,
}

/// Draws stimulus-aligned positive pairs from different subjects.
#[derive(Debug, Clone)]
pub struct PairSampler {
    /// stimulus -> subject -> windows
    by_stimulus: Vec<(u32, Vec<(u32, Vec<Mat>)>)>,
    intervals: usize,
    rng: ChaCha8Rng,
}

impl PairSampler {
    /// Groups `segments` by stimulus and window index; stimuli seen in fewer than two subjects are dropped.
    pub fn new(segments: &[&Segment], window_samples: usize, seed: u64) -> Result<Self> {
        let stimuli: BTreeSet<u32> = segments.iter().map(|s| s.stimulus_id).collect();
        let mut by_stimulus = Vec::new();
        let mut intervals = usize::MAX;
        for stim in stimuli {
            let mut subjects: Vec<(u32, Vec<Mat>)> = segments
                .iter()
                .filter(|s| s.stimulus_id == stim)
                .map(|s| (s.subject_id, split_windows(s, window_samples)))
                .collect();
            subjects.sort_by_key(|(subj, _)| *subj);
            subjects.dedup_by_key(|(subj, _)| *subj);
            if subjects.len() < 2 {
                continue;
            }
            for (_, w) in &subjects {
                intervals = intervals.min(w.len());
            }
            by_stimulus.push((stim, subjects));
        }
        if by_stimulus.is_empty() || intervals == 0 || intervals == usize::MAX {
            return Err(Error::Insufficient(
                "no stimulus has windows from two or more subjects".into(),
            ));
        }
        Ok(Self {
            by_stimulus,
            intervals,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn n_stimuli(&self) -> usize {
        self.by_stimulus.len()
    }

    pub fn intervals(&self) -> usize {
        self.intervals
    }

    /// Picks `batch_size` distinct stimuli; each gets one interval and an ordered pair of distinct subjects.
    pub fn draw(&mut self, batch_size: usize) -> Result<Vec<PairDraw>> {
        if batch_size > self.by_stimulus.len() {
            return Err(Error::Insufficient(format!(
                "batch of {batch_size} needs that many distinct stimuli, only {} available",
                self.by_stimulus.len()
            )));
        }
        let picked = rand::seq::index::sample(&mut self.rng, self.by_stimulus.len(), batch_size);
        let mut draws = Vec::with_capacity(batch_size);
        for si in picked.iter() {
            let (stim, subjects) = &self.by_stimulus[si];
            let interval = self.rng.gen_range(0..self.intervals);
            let a = self.rng.gen_range(0..subjects.len());
            let mut b = self.rng.gen_range(0..subjects.len() - 1);
            if b >= a {
                b += 1;
            }
            draws.push(PairDraw {
                stimulus: *stim,
                interval,
                subject_a: subjects[a].0,
                subject_b: subjects[b].0,
            });
        }
        Ok(draws)
    }

    fn window(&self, stimulus: u32, subject: u32, interval: usize) -> &Mat {
        let (_, subjects) = self
            .by_stimulus
            .iter()
            .find(|(s, _)| *s == stimulus)
            .expect("drawn stimulus exists");
        let (_, windows) = subjects
            .iter()
            .find(|(s, _)| *s == subject)
            .expect("drawn subject exists");
        &windows[interval]
    }

    pub fn sample_pairs(&mut self, batch_size: usize) -> Result<WindowBatch> {
        let draws = self.draw(batch_size)?;
        let anchors = draws
            .iter()
            .map(|d| self.window(d.stimulus, d.subject_a, d.interval).clone())
            .collect();
        let positives = draws
            .iter()
            .map(|d| self.window(d.stimulus, d.subject_b, d.interval).clone())
            .collect();
        Ok(WindowBatch {
            draws,
            anchors,
            positives,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FoldProtocol {
    KFoldSubjects(usize),
    LeaveOneSubjectOut,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<u32>,
    pub test: Vec<u32>,
}

/// Subject-disjoint splits; every subject is a test subject in exactly one fold.
pub fn make_folds(segments: &[Segment], protocol: FoldProtocol, seed: u64) -> Result<Vec<Fold>> {
    let subjects: Vec<u32> = segments
        .iter()
        .map(|s| s.subject_id)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    folds_for_subjects(&subjects, protocol, seed)
}

pub fn folds_for_subjects(subjects: &[u32], protocol: FoldProtocol, seed: u64) -> Result<Vec<Fold>> {
    let n = subjects.len();
    if n < 2 {
        return Err(Error::Insufficient(format!("need at least 2 subjects, got {n}")));
    }
    let groups: Vec<Vec<u32>> = match protocol {
        FoldProtocol::LeaveOneSubjectOut => subjects.iter().map(|&s| vec![s]).collect(),
        FoldProtocol::KFoldSubjects(k) => {
            if k < 2 || k > n {
                return Err(Error::InvalidConfig(format!("k = {k} folds with {n} subjects")));
            }
            let mut order = subjects.to_vec();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let (base, extra) = (n / k, n % k);
            let mut groups = Vec::with_capacity(k);
            let mut at = 0;
            for f in 0..k {
                let size = base + usize::from(f < extra);
                let mut g = order[at..at + size].to_vec();
                g.sort_unstable();
                groups.push(g);
                at += size;
            }
            groups
        }
    };
    Ok(groups
        .into_iter()
        .map(|test| Fold {
            train: subjects.iter().copied().filter(|s| !test.contains(s)).collect(),
            test,
        })
        .collect())
}

/// One manifest line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub path: String,
    pub subject: u32,
    pub stimulus: u32,
    pub class: usize,
}

pub const MANIFEST_NAME: &str = "manifest.csv";
const SEGMENT_DIR: &str = "segments";

fn segment_file_name(seg: &Segment) -> String {
    format!("s{:03}_t{:03}.eseg", seg.subject_id, seg.stimulus_id)
}

/// Writes `segments/*.eseg` and `manifest.csv` under an existing directory.
///
/// Files are staged in a sibling directory and moved into place only once all
/// writes succeed, so a failure leaves no partial dataset behind.
pub fn write_dataset(dir: &Path, segments: &[Segment]) -> Result<Vec<ManifestRow>> {
    if !dir.is_dir() {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("output directory {} does not exist", dir.display()),
        )));
    }
    let staging = dir.join(format!(".staging-{}", std::process::id()));
    let result = (|| {
        std::fs::create_dir_all(staging.join(SEGMENT_DIR))?;
        let mut rows = Vec::with_capacity(segments.len());
        for seg in segments {
            let name = segment_file_name(seg);
            seg.save(&staging.join(SEGMENT_DIR).join(&name))?;
            rows.push(ManifestRow {
                path: format!("{SEGMENT_DIR}/{name}"),
                subject: seg.subject_id,
                stimulus: seg.stimulus_id,
                class: seg.label,
            });
        }
        let mut w = csv::Writer::from_path(staging.join(MANIFEST_NAME)).map_err(csv_err)?;
        for r in &rows {
            w.serialize(r).map_err(csv_err)?;
        }
        w.flush()?;
        Ok::<_, Error>(rows)
    })();
    let rows = match result {
        Ok(rows) => rows,
        Err(e) => {
            let _ = std::fs::remove_dir_all(&staging);
            return Err(e);
        }
    };
    let final_segments = dir.join(SEGMENT_DIR);
    if final_segments.exists() {
        std::fs::remove_dir_all(&final_segments)?;
    }
    std::fs::rename(staging.join(SEGMENT_DIR), &final_segments)?;
    std::fs::rename(staging.join(MANIFEST_NAME), dir.join(MANIFEST_NAME))?;
    std::fs::remove_dir_all(&staging)?;
    Ok(rows)
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(e.to_string())
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestRow>> {
    let mut r = csv::Reader::from_path(dir.join(MANIFEST_NAME)).map_err(csv_err)?;
    r.deserialize().map(|row| row.map_err(csv_err)).collect()
}

/// Loads every segment listed in the manifest, checking ids against the file headers.
pub fn read_dataset(dir: &Path) -> Result<Vec<Segment>> {
    read_manifest(dir)?
        .into_iter()
        .map(|row| {
            let path: PathBuf = dir.join(&row.path);
            let seg = Segment::load(&path)?;
            if seg.subject_id != row.subject || seg.stimulus_id != row.stimulus || seg.label != row.class {
                return Err(Error::Format(format!(
                    "{} header disagrees with its manifest row",
                    path.display()
                )));
            }
            Ok(seg)
        })
        .collect()
}
