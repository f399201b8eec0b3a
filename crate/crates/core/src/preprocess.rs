//! Segment container, resampling, band filtering and bad-channel repair.
//!
//! Filters are Butterworth designs built from second-order sections via the
//! bilinear transform with prewarping, applied forward and backward so the
//! net response is zero-phase with squared magnitude.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mat::{read_u32, Mat};

pub const SEGMENT_MAGIC: &[u8; 5] = b"ESEG1";

/// One multichannel recording (`channels x samples`).
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub data: Mat,
    pub sample_rate: f64,
    pub subject_id: u32,
    pub stimulus_id: u32,
    pub label: usize,
}

impl Segment {
    pub fn new(data: Mat, sample_rate: f64, subject_id: u32, stimulus_id: u32, label: usize) -> Result<Self> {
        if !(sample_rate > 0.0 && sample_rate.is_finite()) {
            return Err(Error::InvalidConfig(format!("sample_rate must be positive, got {sample_rate}")));
        }
        Ok(Self {
            data,
            sample_rate,
            subject_id,
            stimulus_id,
            label,
        })
    }

    pub fn channels(&self) -> usize {
        self.data.rows()
    }

    pub fn samples(&self) -> usize {
        self.data.cols()
    }

    fn with_data(&self, data: Mat, sample_rate: f64) -> Self {
        Self {
            data,
            sample_rate,
            ..self.clone()
        }
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(SEGMENT_MAGIC)?;
        w.write_all(&(self.channels() as u32).to_le_bytes())?;
        w.write_all(&(self.samples() as u32).to_le_bytes())?;
        w.write_all(&(self.sample_rate as f32).to_le_bytes())?;
        w.write_all(&self.subject_id.to_le_bytes())?;
        w.write_all(&self.stimulus_id.to_le_bytes())?;
        w.write_all(&(self.label as i32).to_le_bytes())?;
        let mut buf = Vec::with_capacity(self.data.len() * 4);
        for &v in self.data.as_slice() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 5];
        r.read_exact(&mut magic)?;
        if &magic != SEGMENT_MAGIC {
            return Err(Error::Format("not an ESEG1 segment".into()));
        }
        let channels = read_u32(r)? as usize;
        let samples = read_u32(r)? as usize;
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        let sample_rate = f32::from_le_bytes(b4) as f64;
        let subject_id = read_u32(r)?;
        let stimulus_id = read_u32(r)?;
        r.read_exact(&mut b4)?;
        let label = i32::from_le_bytes(b4);
        if label < 0 {
            return Err(Error::Format(format!("negative label {label}")));
        }
        let mut payload = vec![0u8; channels * samples * 4];
        r.read_exact(&mut payload)?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        Self::new(Mat::from_vec(channels, samples, data)?, sample_rate, subject_id, stimulus_id, label as usize)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to Vec cannot fail");
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::read_from(&mut bytes.as_slice())
    }
}

/// Second-order section, normalized so `a0 = 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Biquad {
    pub b: [f64; 3],
    pub a: [f64; 3],
}

impl Biquad {
    fn dc_gain(&self) -> f64 {
        self.b.iter().sum::<f64>() / self.a.iter().sum::<f64>()
    }

    /// Largest pole magnitude.
    fn pole_radius(&self) -> f64 {
        let disc = self.a[1] * self.a[1] - 4.0 * self.a[2];
        if disc < 0.0 {
            self.a[2].sqrt()
        } else {
            let s = disc.sqrt();
            ((-self.a[1] + s) / 2.0).abs().max(((-self.a[1] - s) / 2.0).abs())
        }
    }

    /// Transposed direct-form II state for a constant unit input.
    fn steady_state(&self) -> [f64; 2] {
        let g = self.dc_gain();
        let z2 = self.b[2] - self.a[2] * g;
        let z1 = self.b[1] - self.a[1] * g + z2;
        [z1, z2]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Low,
    High,
}

/// Butterworth filter of even `order` as a cascade of biquads.
fn butterworth(order: usize, cutoff: f64, rate: f64, kind: Kind) -> Vec<Biquad> {
    debug_assert!(order % 2 == 0 && order > 0);
    let w0 = 2.0 * std::f64::consts::PI * cutoff / rate;
    let (sin, cos) = w0.sin_cos();
    (1..=order / 2)
        .map(|k| {
            let theta = (2 * k - 1) as f64 * std::f64::consts::PI / (2 * order) as f64;
            let q = 1.0 / (2.0 * theta.cos());
            let alpha = sin / (2.0 * q);
            let a0 = 1.0 + alpha;
            let b = match kind {
                Kind::Low => [(1.0 - cos) / 2.0, 1.0 - cos, (1.0 - cos) / 2.0],
                Kind::High => [(1.0 + cos) / 2.0, -(1.0 + cos), (1.0 + cos) / 2.0],
            };
            Biquad {
                b: [b[0] / a0, b[1] / a0, b[2] / a0],
                a: [1.0, -2.0 * cos / a0, (1.0 - alpha) / a0],
            }
        })
        .collect()
}

/// Runs the cascade in place, starting from the steady state for `x[0]`.
fn sosfilt(sos: &[Biquad], x: &mut [f64]) {
    let Some(&x0) = x.first() else { return };
    let mut level = x0;
    for s in sos {
        let [zi1, zi2] = s.steady_state();
        let (mut z1, mut z2) = (zi1 * level, zi2 * level);
        level *= s.dc_gain();
        for v in x.iter_mut() {
            let input = *v;
            let y = s.b[0] * input + z1;
            z1 = s.b[1] * input - s.a[1] * y + z2;
            z2 = s.b[2] * input - s.a[2] * y;
            *v = y;
        }
    }
}

/// Forward-backward filtering with mirror padding at both ends.
///
/// The padding spans several time constants of the slowest pole so start-up
/// transients decay before reaching the signal. Mirroring (rather than odd
/// extension) keeps the local mean continuous, which matters for highpass
/// sections whose step response rings for seconds.
pub fn filtfilt(sos: &[Biquad], x: &[f64]) -> Vec<f64> {
    let n = x.len();
    if n == 0 {
        return Vec::new();
    }
    let slowest = sos.iter().map(Biquad::pole_radius).fold(0.0, f64::max);
    let settle = if slowest > 0.0 && slowest < 1.0 {
        (-6.0 / slowest.ln()).ceil() as usize
    } else {
        0
    };
    let pad = settle.max(3 * (2 * sos.len() + 1)).min(n - 1);
    let mut ext = Vec::with_capacity(n + 2 * pad);
    ext.extend(x[1..=pad].iter().rev());
    ext.extend_from_slice(x);
    ext.extend(x[n - 1 - pad..n - 1].iter().rev());
    sosfilt(sos, &mut ext);
    ext.reverse();
    sosfilt(sos, &mut ext);
    ext.reverse();
    ext[pad..pad + n].to_vec()
}

fn filter_rows(data: &Mat, sos: &[Biquad]) -> Mat {
    let mut out = Mat::zeros(data.rows(), data.cols());
    for r in 0..data.rows() {
        out.row_mut(r).copy_from_slice(&filtfilt(sos, data.row(r)));
    }
    out
}

/// Anti-alias lowpass at `0.45 * target_rate`, then keeps every `ratio`-th sample.
pub fn downsample(seg: &Segment, target_rate: f64) -> Result<Segment> {
    if !(target_rate > 0.0) || target_rate > seg.sample_rate {
        return Err(Error::InvalidConfig(format!(
            "cannot downsample {} Hz to {target_rate} Hz",
            seg.sample_rate
        )));
    }
    let ratio_f = seg.sample_rate / target_rate;
    let ratio = ratio_f.round() as usize;
    if (ratio_f - ratio as f64).abs() > 1e-9 * ratio_f {
        return Err(Error::InvalidConfig(format!(
            "downsampling ratio {} / {target_rate} is not an integer",
            seg.sample_rate
        )));
    }
    if ratio == 1 {
        return Ok(seg.clone());
    }
    let sos = butterworth(8, 0.45 * target_rate, seg.sample_rate, Kind::Low);
    let filtered = filter_rows(&seg.data, &sos);
    let out_len = seg.samples() / ratio;
    let data = Mat::from_fn(seg.channels(), out_len, |c, j| filtered[(c, j * ratio)]);
    Ok(seg.with_data(data, target_rate))
}

/// Zero-phase band filter: order-4 highpass at `lo` cascaded with order-4 lowpass at `hi`.
pub fn bandpass(seg: &Segment, lo: f64, hi: f64) -> Result<Segment> {
    let nyquist = seg.sample_rate / 2.0;
    if !(0.0 < lo && lo < hi && hi < nyquist) {
        return Err(Error::InvalidConfig(format!(
            "band edges must satisfy 0 < lo < hi < {nyquist}, got {lo}..{hi}"
        )));
    }
    let mut sos = butterworth(4, lo, seg.sample_rate, Kind::High);
    sos.extend(butterworth(4, hi, seg.sample_rate, Kind::Low));
    Ok(seg.with_data(filter_rows(&seg.data, &sos), seg.sample_rate))
}

/// Amplitude threshold `m` (robust standard deviations) and duration threshold `n` (seconds).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArtifactThresholds {
    pub m: f64,
    pub n: f64,
}

impl ArtifactThresholds {
    pub const LONG: Self = Self { m: 3.0, n: 0.4 };
    pub const SPIKE: Self = Self { m: 30.0, n: 0.01 };

    pub fn new(m: f64, n: f64) -> Result<Self> {
        let t = Self { m, n };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.m > 0.0 && self.n > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "artifact thresholds must be positive, got m={} n={}",
                self.m, self.n
            )));
        }
        Ok(())
    }

    /// Minimum run length in samples; durations are rounded to the sample grid.
    pub fn min_run(&self, rate: f64) -> usize {
        ((self.n * rate).round() as usize).max(1)
    }
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Median and `1.4826 * MAD`.
pub fn robust_location_scale(x: &[f64]) -> (f64, f64) {
    let mut v: Vec<f64> = x.iter().copied().filter(|v| v.is_finite()).collect();
    if v.is_empty() {
        return (0.0, 0.0);
    }
    v.sort_by(f64::total_cmp);
    let med = median(&v);
    let mut dev: Vec<f64> = v.iter().map(|x| (x - med).abs()).collect();
    dev.sort_by(f64::total_cmp);
    (med, 1.4826 * median(&dev))
}

fn longest_exceedance(x: &[f64], center: f64, scale: f64, m: f64) -> usize {
    let mut best = 0;
    let mut run = 0;
    for &v in x {
        let hit = !v.is_finite() || (scale > 0.0 && ((v - center) / scale).abs() > m);
        run = if hit { run + 1 } else { 0 };
        best = best.max(run);
    }
    best
}

/// Channels whose robust z-score stays above `m` for at least `n` seconds under any pair.
pub fn detect(seg: &Segment, thresholds: &[ArtifactThresholds]) -> Result<Vec<usize>> {
    for t in thresholds {
        t.validate()?;
    }
    let mut flagged = Vec::new();
    for c in 0..seg.channels() {
        let row = seg.data.row(c);
        let (center, scale) = robust_location_scale(row);
        let bad = thresholds
            .iter()
            .any(|t| longest_exceedance(row, center, scale, t.m) >= t.min_run(seg.sample_rate));
        if bad {
            flagged.push(c);
        }
    }
    Ok(flagged)
}

/// Flags bad channels and replaces each with the mean of the clean ones.
pub fn detect_and_repair(seg: &Segment, thresholds: &[ArtifactThresholds]) -> Result<(Segment, Vec<usize>)> {
    let flagged = detect(seg, thresholds)?;
    if flagged.is_empty() {
        return Ok((seg.clone(), flagged));
    }
    let clean: Vec<usize> = (0..seg.channels()).filter(|c| !flagged.contains(c)).collect();
    if clean.is_empty() {
        return Err(Error::AllChannelsFlagged);
    }
    let mut data = seg.data.clone();
    let inv = 1.0 / clean.len() as f64;
    let fill: Vec<f64> = (0..seg.samples())
        .map(|j| clean.iter().map(|&c| seg.data[(c, j)]).sum::<f64>() * inv)
        .collect();
    for &c in &flagged {
        data.row_mut(c).copy_from_slice(&fill);
    }
    Ok((seg.with_data(data, seg.sample_rate), flagged))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};
    use std::f64::consts::PI;

    fn sine_segment(freq: f64, rate: f64, seconds: f64, amp: f64) -> Segment {
        let n = (rate * seconds) as usize;
        let data = Mat::from_fn(1, n, |_, j| amp * (2.0 * PI * freq * j as f64 / rate).sin());
        Segment::new(data, rate, 0, 0, 0).unwrap()
    }

    /// Least-squares amplitude of a sinusoid of known frequency.
    fn fit_amplitude(x: &[f64], freq: f64, rate: f64) -> f64 {
        let (mut ss, mut sc, mut cc, mut ys, mut yc) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for (j, &y) in x.iter().enumerate() {
            let w = 2.0 * PI * freq * j as f64 / rate;
            let (s, c) = w.sin_cos();
            ss += s * s;
            sc += s * c;
            cc += c * c;
            ys += y * s;
            yc += y * c;
        }
        let det = ss * cc - sc * sc;
        let a = (ys * cc - yc * sc) / det;
        let b = (yc * ss - ys * sc) / det;
        a.hypot(b)
    }

    fn rms(x: &[f64]) -> f64 {
        (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
    }

    fn gain_db(seg_in: &Segment, seg_out: &Segment) -> f64 {
        // skip one second at each edge
        let skip = seg_in.sample_rate as usize;
        let n = seg_in.samples();
        20.0 * (rms(&seg_out.data.row(0)[skip..n - skip]) / rms(&seg_in.data.row(0)[skip..n - skip])).log10()
    }

    #[test]
    fn butterworth_sections_have_expected_dc_gain() {
        let lp = butterworth(4, 20.0, 125.0, Kind::Low);
        let hp = butterworth(4, 20.0, 125.0, Kind::High);
        assert_eq!(lp.len(), 2);
        for s in &lp {
            assert!((s.dc_gain() - 1.0).abs() < 1e-12);
        }
        for s in &hp {
            assert!(s.dc_gain().abs() < 1e-12);
        }
    }

    #[test]
    fn downsample_counts_and_dc() {
        let seg = Segment::new(Mat::filled(2, 500, 5.0), 250.0, 1, 2, 0).unwrap();
        let out = downsample(&seg, 125.0).unwrap();
        assert_eq!(out.samples(), 250);
        assert_eq!(out.sample_rate, 125.0);
        assert!(out.data.as_slice().iter().all(|v| (v - 5.0).abs() < 1e-6));
        let odd = Segment::new(Mat::zeros(1, 501), 250.0, 0, 0, 0).unwrap();
        assert_eq!(downsample(&odd, 125.0).unwrap().samples(), 250);
        assert!(downsample(&seg, 100.0).is_err());
    }

    #[test]
    fn downsample_keeps_in_band_sine_amplitude() {
        let seg = sine_segment(10.0, 1000.0, 4.0, 1.0);
        let out = downsample(&seg, 125.0).unwrap();
        assert_eq!(out.samples(), 500);
        let amp = fit_amplitude(out.data.row(0), 10.0, 125.0);
        assert!((amp - 1.0).abs() < 0.01, "amplitude {amp}");
    }

    #[test]
    fn bandpass_response() {
        let pass = sine_segment(10.0, 125.0, 10.0, 1.0);
        let g = gain_db(&pass, &bandpass(&pass, 0.5, 47.0).unwrap());
        assert!(g.abs() < 1.0, "10 Hz gain {g} dB");
        let stop = sine_segment(60.0, 125.0, 10.0, 1.0);
        let g = gain_db(&stop, &bandpass(&stop, 0.5, 47.0).unwrap());
        assert!(g < -20.0, "60 Hz gain {g} dB");
        let zero = Segment::new(Mat::zeros(3, 300), 125.0, 0, 0, 0).unwrap();
        assert_eq!(bandpass(&zero, 0.5, 47.0).unwrap().data, zero.data);
        assert_eq!(bandpass(&zero, 0.5, 47.0).unwrap().samples(), 300);
    }

    #[test]
    fn bandpass_rejects_bad_edges() {
        let seg = sine_segment(10.0, 125.0, 1.0, 1.0);
        for (lo, hi) in [(0.0, 40.0), (10.0, 5.0), (0.5, 62.5), (-1.0, 20.0)] {
            assert!(bandpass(&seg, lo, hi).is_err(), "{lo}..{hi}");
        }
    }

    fn band_limited(rate: f64, seconds: f64) -> Segment {
        let n = (rate * seconds) as usize;
        let data = Mat::from_fn(1, n, |_, j| {
            let t = j as f64 / rate;
            (2.0 * PI * 5.0 * t).sin() + 0.5 * (2.0 * PI * 12.0 * t + 0.3).sin() + 0.25 * (2.0 * PI * 20.0 * t + 1.1).sin()
        });
        Segment::new(data, rate, 0, 0, 0).unwrap()
    }

    #[test]
    fn downsample_and_bandpass_commute() {
        let seg = band_limited(250.0, 20.0);
        let a = downsample(&bandpass(&seg, 0.5, 47.0).unwrap(), 125.0).unwrap();
        let b = bandpass(&downsample(&seg, 125.0).unwrap(), 0.5, 47.0).unwrap();
        let diff: Vec<f64> = a.data.as_slice().iter().zip(b.data.as_slice()).map(|(x, y)| x - y).collect();
        let rel = rms(&diff) / rms(a.data.as_slice());
        assert!(rel < 0.02, "relative rms {rel}");
    }

    #[test]
    fn bandpass_is_nearly_idempotent() {
        let seg = band_limited(125.0, 20.0);
        let once = bandpass(&seg, 0.5, 47.0).unwrap();
        let twice = bandpass(&once, 0.5, 47.0).unwrap();
        let diff: Vec<f64> = once.data.as_slice().iter().zip(twice.data.as_slice()).map(|(x, y)| x - y).collect();
        assert!(rms(&diff) / rms(once.data.as_slice()) < 0.05);
    }

    fn noise(channels: usize, samples: usize, seed: u64) -> Mat {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Mat::from_fn(channels, samples, |_, _| StandardNormal.sample(&mut rng))
    }

    const BOTH: [ArtifactThresholds; 2] = [ArtifactThresholds::LONG, ArtifactThresholds::SPIKE];

    #[test]
    fn clean_noise_is_not_flagged() {
        let seg = Segment::new(noise(8, 125 * 60, 42), 125.0, 0, 0, 0).unwrap();
        let (out, flagged) = detect_and_repair(&seg, &BOTH).unwrap();
        assert!(flagged.is_empty());
        assert_eq!(out, seg);
    }

    #[test]
    fn plateau_is_flagged_by_long_threshold() {
        let mut data = noise(4, 125 * 10, 1);
        let (_, sigma) = robust_location_scale(data.row(2));
        for j in 300..300 + 63 {
            data.row_mut(2)[j] = 10.0 * sigma;
        }
        let seg = Segment::new(data, 125.0, 0, 0, 0).unwrap();
        assert_eq!(detect(&seg, &[ArtifactThresholds::LONG]).unwrap(), vec![2]);
        assert!(detect(&seg, &[ArtifactThresholds::SPIKE]).unwrap().is_empty());
    }

    #[test]
    fn spike_is_flagged_only_by_spike_threshold() {
        let mut data = noise(4, 125 * 10, 2);
        let (_, sigma) = robust_location_scale(data.row(1));
        // 5 ms at 125 Hz is a single sample
        data.row_mut(1)[500] = 50.0 * sigma;
        let seg = Segment::new(data, 125.0, 0, 0, 0).unwrap();
        assert_eq!(detect(&seg, &[ArtifactThresholds::SPIKE]).unwrap(), vec![1]);
        assert!(detect(&seg, &[ArtifactThresholds::LONG]).unwrap().is_empty());
        assert_eq!(detect(&seg, &BOTH).unwrap(), vec![1]);
    }

    #[test]
    fn repair_replaces_flagged_and_keeps_clean_bit_exact() {
        let mut data = noise(4, 1250, 3);
        data.row_mut(0)[100] = f64::NAN;
        data.row_mut(3)[700] = 1e6;
        let seg = Segment::new(data, 125.0, 0, 0, 0).unwrap();
        let (out, flagged) = detect_and_repair(&seg, &BOTH).unwrap();
        assert_eq!(flagged, vec![0, 3]);
        assert!(out.data.is_finite());
        for c in [1, 2] {
            assert_eq!(out.data.row(c), seg.data.row(c));
        }
        for j in 0..seg.samples() {
            let mean = (seg.data[(1, j)] + seg.data[(2, j)]) / 2.0;
            assert!((out.data[(0, j)] - mean).abs() < 1e-15);
        }
    }

    #[test]
    fn all_flagged_is_an_error() {
        let mut data = noise(2, 500, 4);
        data.row_mut(0)[10] = 1e9;
        data.row_mut(1)[20] = 1e9;
        let seg = Segment::new(data, 125.0, 0, 0, 0).unwrap();
        assert!(matches!(detect_and_repair(&seg, &BOTH), Err(Error::AllChannelsFlagged)));
        assert!(ArtifactThresholds::new(0.0, 1.0).is_err());
    }

    #[test]
    fn segment_file_roundtrip() {
        let data = Mat::from_fn(3, 7, |i, j| (i * 7 + j) as f64 * 0.25 - 2.0);
        let seg = Segment::new(data, 125.0, 4, 9, 2).unwrap();
        let bytes = seg.to_bytes();
        assert_eq!(&bytes[..5], SEGMENT_MAGIC);
        assert_eq!(bytes.len(), 5 + 6 * 4 + 21 * 4);
        let back = Segment::read_from(&mut bytes.as_slice()).unwrap();
        assert_eq!(back, seg);
        assert!(Segment::read_from(&mut &b"ESEG2xxxx"[..]).is_err());
        assert!(Segment::new(Mat::zeros(1, 1), 0.0, 0, 0, 0).is_err());
    }
}
