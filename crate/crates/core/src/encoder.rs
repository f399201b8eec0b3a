//! Spatio-temporal window encoder.
//!
//! Layer graph for a `C x T` window:
//!
//! 1. shared temporal conv, `F` filters of length `L`, "same" padding -> `(F*C) x T`
//! 2. four branches, each mixing channels within every filter map (`M x C`)
//!    and then applying a dilated length-`ms_len` temporal filter, plus bias
//!    and ELU -> `(F*M) x T` per branch
//! 3. branch outputs stacked on the feature axis -> `D x T`, `D = 4*F*M`
//! 4. average pooling, kernel = stride = `avg_pool_len` -> `D x T'`
//! 5. channel attention: a squeeze-excitation gate computed per pooled step,
//!    softmax over the `D` feature channels and scaled by `D`
//! 6. dropout (training only), then a depthwise temporal smoother
//! 7. transpose -> `T' x D` temporal tokens
//!
//! Attention is computed at pooled resolution. Because pooling is linear,
//! this equals gating the unpooled features with weights held constant over
//! each pooling window.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::mat::{read_u32, Mat};
use crate::similarity::FeatureSequence;
use crate::tape::{Tape, Var};

pub const CHECKPOINT_MAGIC: &[u8; 11] = b"TA2CL-CKPT1";

/// What the window-level feature `z_cls` keeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ZClsPooling {
    /// Attention-weighted features averaged over the token axis (`1 x D`).
    MeanOverTokens,
    /// Attention-weighted features per token (`T' x D`).
    PerToken,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub channels: usize,
    pub n_time_filters: usize,
    pub time_filter_len: usize,
    pub n_ms_filters: usize,
    pub ms_filter_time_len: usize,
    pub dilation_array: [usize; 4],
    pub avg_pool_len: usize,
    pub time_smoother_len: usize,
    pub dropout: f64,
    #[serde(default = "yes")]
    pub attention_enabled: bool,
    /// Defaults to the token dimension `D`.
    #[serde(default)]
    pub projector_dim: Option<usize>,
    /// Defaults to `projector_dim`.
    #[serde(default)]
    pub projector_hidden: Option<usize>,
    #[serde(default = "default_reduction")]
    pub attention_reduction: usize,
    #[serde(default = "default_zcls")]
    pub z_cls: ZClsPooling,
}

fn yes() -> bool {
    true
}
fn default_reduction() -> usize {
    4
}
fn default_zcls() -> ZClsPooling {
    ZClsPooling::MeanOverTokens
}

/// The four published hyperparameter presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Preset {
    SeedCls3,
    SeedVCls5,
    FacedCls2,
    FacedCls9,
}

impl Preset {
    pub const ALL: [Preset; 4] = [
        Preset::SeedCls3,
        Preset::SeedVCls5,
        Preset::FacedCls2,
        Preset::FacedCls9,
    ];
}

impl EncoderConfig {
    pub fn preset(p: Preset) -> Self {
        let (channels, dilation_array) = match p {
            Preset::SeedCls3 | Preset::SeedVCls5 => (62, [1, 3, 6, 12]),
            Preset::FacedCls2 => (32, [1, 3, 6, 12]),
            Preset::FacedCls9 => (32, [1, 6, 12, 24]),
        };
        Self {
            channels,
            n_time_filters: 16,
            time_filter_len: 30,
            n_ms_filters: 4,
            ms_filter_time_len: 3,
            dilation_array,
            avg_pool_len: 15,
            time_smoother_len: 3,
            dropout: 0.1,
            attention_enabled: true,
            projector_dim: None,
            projector_hidden: None,
            attention_reduction: default_reduction(),
            z_cls: default_zcls(),
        }
    }

    /// Token feature dimension `D`.
    pub fn token_dim(&self) -> usize {
        self.dilation_array.len() * self.n_ms_filters * self.n_time_filters
    }

    pub fn projector_dim(&self) -> usize {
        self.projector_dim.unwrap_or_else(|| self.token_dim())
    }

    pub fn projector_hidden(&self) -> usize {
        self.projector_hidden.unwrap_or_else(|| self.projector_dim())
    }

    pub fn attention_hidden(&self) -> usize {
        (self.token_dim() / self.attention_reduction.max(1)).max(1)
    }

    /// Samples spanned by the temporal filter plus the widest dilated branch filter.
    pub fn receptive_field(&self) -> usize {
        let widest = self.dilation_array.iter().max().copied().unwrap_or(1);
        self.time_filter_len + (self.ms_filter_time_len - 1) * widest
    }

    pub fn min_input_len(&self) -> usize {
        self.receptive_field().max(self.avg_pool_len)
    }

    /// Number of tokens for an input of `samples` length.
    pub fn token_count(&self, samples: usize) -> usize {
        samples / self.avg_pool_len
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("channels", self.channels),
            ("n_time_filters", self.n_time_filters),
            ("time_filter_len", self.time_filter_len),
            ("n_ms_filters", self.n_ms_filters),
            ("ms_filter_time_len", self.ms_filter_time_len),
            ("avg_pool_len", self.avg_pool_len),
            ("time_smoother_len", self.time_smoother_len),
            ("attention_reduction", self.attention_reduction),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("encoder {name} must be >= 1")));
            }
        }
        if self.dilation_array[0] == 0 || self.dilation_array.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidConfig(format!(
                "dilation_array must be positive and strictly increasing, got {:?}",
                self.dilation_array
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidConfig(format!("dropout must be in [0, 1), got {}", self.dropout)));
        }
        if self.projector_dim == Some(0) || self.projector_hidden == Some(0) {
            return Err(Error::InvalidConfig("projector sizes must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Branch<T> {
    /// `M x C` channel mixing.
    pub spatial: T,
    /// `M x ms_len` dilated temporal filter.
    pub temporal: T,
    /// `(F*M) x 1`.
    pub bias: T,
}

/// Every learnable tensor of the encoder and projector.
///
/// Instantiated with `Mat` for stored weights and with `Var` once bound to a tape.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights<T> {
    /// `F x L`
    pub temporal: T,
    pub branches: Vec<Branch<T>>,
    /// `H x D`, `H x 1`, `D x H`, `D x 1`
    pub att_w1: T,
    pub att_b1: T,
    pub att_w2: T,
    pub att_b2: T,
    /// `D x smoother_len`
    pub smoother: T,
    /// `D x Hp`, `1 x Hp`, `Hp x P`, `1 x P`
    pub proj_w1: T,
    pub proj_b1: T,
    pub proj_w2: T,
    pub proj_b2: T,
}

pub type EncoderParams = Weights<Mat>;

impl<T> Weights<T> {
    /// Parameters in canonical order with their checkpoint names.
    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out = vec![("temporal.weight".to_string(), &self.temporal)];
        for (i, b) in self.branches.iter().enumerate() {
            out.push((format!("branch{i}.spatial"), &b.spatial));
            out.push((format!("branch{i}.temporal"), &b.temporal));
            out.push((format!("branch{i}.bias"), &b.bias));
        }
        out.extend([
            ("attention.w1".to_string(), &self.att_w1),
            ("attention.b1".to_string(), &self.att_b1),
            ("attention.w2".to_string(), &self.att_w2),
            ("attention.b2".to_string(), &self.att_b2),
            ("smoother.weight".to_string(), &self.smoother),
            ("projector.w1".to_string(), &self.proj_w1),
            ("projector.b1".to_string(), &self.proj_b1),
            ("projector.w2".to_string(), &self.proj_w2),
            ("projector.b2".to_string(), &self.proj_b2),
        ]);
        out
    }

    /// Mutable references in the same order as [`Weights::named`].
    pub fn tensors_mut(&mut self) -> Vec<&mut T> {
        let mut out = vec![&mut self.temporal];
        for b in &mut self.branches {
            out.push(&mut b.spatial);
            out.push(&mut b.temporal);
            out.push(&mut b.bias);
        }
        out.extend([
            &mut self.att_w1,
            &mut self.att_b1,
            &mut self.att_w2,
            &mut self.att_b2,
            &mut self.smoother,
            &mut self.proj_w1,
            &mut self.proj_b1,
            &mut self.proj_w2,
            &mut self.proj_b2,
        ]);
        out
    }

    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> Weights<U> {
        Weights {
            temporal: f(&self.temporal),
            branches: self
                .branches
                .iter()
                .map(|b| Branch {
                    spatial: f(&b.spatial),
                    temporal: f(&b.temporal),
                    bias: f(&b.bias),
                })
                .collect(),
            att_w1: f(&self.att_w1),
            att_b1: f(&self.att_b1),
            att_w2: f(&self.att_w2),
            att_b2: f(&self.att_b2),
            smoother: f(&self.smoother),
            proj_w1: f(&self.proj_w1),
            proj_b1: f(&self.proj_b1),
            proj_w2: f(&self.proj_w2),
            proj_b2: f(&self.proj_b2),
        }
    }
}

/// Expected parameter shapes, derived from the config alone.
pub fn param_shapes(cfg: &EncoderConfig) -> Weights<(usize, usize)> {
    let (f, m, c) = (cfg.n_time_filters, cfg.n_ms_filters, cfg.channels);
    let d = cfg.token_dim();
    let h = cfg.attention_hidden();
    let (hp, p) = (cfg.projector_hidden(), cfg.projector_dim());
    Weights {
        temporal: (f, cfg.time_filter_len),
        branches: cfg
            .dilation_array
            .iter()
            .map(|_| Branch {
                spatial: (m, c),
                temporal: (m, cfg.ms_filter_time_len),
                bias: (f * m, 1),
            })
            .collect(),
        att_w1: (h, d),
        att_b1: (h, 1),
        att_w2: (d, h),
        att_b2: (d, 1),
        smoother: (d, cfg.time_smoother_len),
        proj_w1: (d, hp),
        proj_b1: (1, hp),
        proj_w2: (hp, p),
        proj_b2: (1, p),
    }
}

impl EncoderParams {
    /// Uniform `+-sqrt(1/fan_in)` weights, zero biases.
    pub fn init(cfg: &EncoderConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shapes = param_shapes(cfg);
        let mut uniform = |(r, c): (usize, usize), fan_in: usize| {
            let bound = (1.0 / fan_in as f64).sqrt();
            Mat::from_fn(r, c, |_, _| rng.gen_range(-bound..bound))
        };
        let zeros = |(r, c): (usize, usize)| Mat::zeros(r, c);
        let temporal = uniform(shapes.temporal, cfg.time_filter_len);
        let branches = shapes
            .branches
            .iter()
            .map(|b| Branch {
                spatial: uniform(b.spatial, cfg.channels),
                temporal: uniform(b.temporal, cfg.ms_filter_time_len),
                bias: zeros(b.bias),
            })
            .collect();
        let att_w1 = uniform(shapes.att_w1, cfg.token_dim());
        let att_w2 = uniform(shapes.att_w2, cfg.attention_hidden());
        let smoother = uniform(shapes.smoother, cfg.time_smoother_len);
        let proj_w1 = uniform(shapes.proj_w1, cfg.token_dim());
        let proj_w2 = uniform(shapes.proj_w2, cfg.projector_hidden());
        Ok(Self {
            temporal,
            branches,
            att_w1,
            att_b1: zeros(shapes.att_b1),
            att_w2,
            att_b2: zeros(shapes.att_b2),
            smoother,
            proj_w1,
            proj_b1: zeros(shapes.proj_b1),
            proj_w2,
            proj_b2: zeros(shapes.proj_b2),
        })
    }

    /// Replaces the projector with `relu(x) - relu(-x)`, an exact identity.
    ///
    /// Needs `projector_dim == D` and `projector_hidden == 2 * D`.
    pub fn set_identity_projector(&mut self, cfg: &EncoderConfig) -> Result<()> {
        let d = cfg.token_dim();
        if cfg.projector_dim() != d || cfg.projector_hidden() != 2 * d {
            return Err(Error::InvalidConfig(format!(
                "identity projector needs projector_dim = {d} and projector_hidden = {}",
                2 * d
            )));
        }
        self.proj_w1 = Mat::from_fn(d, 2 * d, |i, j| {
            if j == i {
                1.0
            } else if j == i + d {
                -1.0
            } else {
                0.0
            }
        });
        self.proj_w2 = self.proj_w1.transpose();
        self.proj_b1 = Mat::zeros(1, 2 * d);
        self.proj_b2 = Mat::zeros(1, d);
        Ok(())
    }

    pub fn check_shapes(&self, cfg: &EncoderConfig) -> Result<()> {
        let want = param_shapes(cfg);
        if want.branches.len() != self.branches.len() {
            return Err(Error::InvalidConfig(format!(
                "expected {} branches, found {}",
                want.branches.len(),
                self.branches.len()
            )));
        }
        for ((name, got), (_, &expected)) in self.named().into_iter().zip(want.named()) {
            if got.shape() != expected {
                return Err(Error::ShapeMismatch {
                    lhs: got.shape(),
                    rhs: expected,
                    context: leak_name(name),
                });
            }
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.named().iter().all(|(_, m)| m.is_finite())
    }

    /// Registers every tensor on `tape`, as parameters when `trainable`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Weights<Var> {
        self.map(|m| {
            if trainable {
                tape.param(m.clone())
            } else {
                tape.constant(m.clone())
            }
        })
    }

    pub fn write_checkpoint<W: Write>(&self, w: &mut W) -> Result<()> {
        let named = self.named();
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&(named.len() as u32).to_le_bytes())?;
        for (name, m) in &named {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(m.rows() as u32).to_le_bytes())?;
            w.write_all(&(m.cols() as u32).to_le_bytes())?;
        }
        for (_, m) in &named {
            m.write_to(w)?;
        }
        Ok(())
    }

    pub fn checkpoint_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_checkpoint(&mut out).expect("writing to Vec cannot fail");
        out
    }

    /// Reads a checkpoint and checks every tensor against the shapes `cfg` implies.
    pub fn read_checkpoint<R: Read>(r: &mut R, cfg: &EncoderConfig) -> Result<Self> {
        let mut magic = [0u8; 11];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a TA2CL-CKPT1 checkpoint".into()));
        }
        let count = read_u32(r)? as usize;
        let mut manifest = Vec::with_capacity(count);
        for _ in 0..count {
            let len = read_u32(r)? as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|e| Error::Format(e.to_string()))?;
            let rows = read_u32(r)? as usize;
            let cols = read_u32(r)? as usize;
            manifest.push((name, (rows, cols)));
        }
        let want = param_shapes(cfg);
        let want_named = want.named();
        if want_named.len() != count {
            return Err(Error::Format(format!(
                "checkpoint holds {count} tensors, config expects {}",
                want_named.len()
            )));
        }
        for ((name, shape), (want_name, want_shape)) in manifest.iter().zip(&want_named) {
            if name != want_name {
                return Err(Error::Format(format!("expected tensor {want_name}, found {name}")));
            }
            if shape != *want_shape {
                return Err(Error::ShapeMismatch {
                    lhs: *shape,
                    rhs: **want_shape,
                    context: leak_name(name.clone()),
                });
            }
        }
        let mut mats = Vec::with_capacity(count);
        for (name, shape) in &manifest {
            let m = Mat::read_from(r)?;
            if m.shape() != *shape {
                return Err(Error::Format(format!("blob for {name} has shape {:?}", m.shape())));
            }
            mats.push(m);
        }
        let mut params = want.map(|_| Mat::zeros(0, 0));
        for (slot, m) in params.tensors_mut().into_iter().zip(mats) {
            *slot = m;
        }
        Ok(params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.checkpoint_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path, cfg: &EncoderConfig) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::read_checkpoint(&mut bytes.as_slice(), cfg)
    }

    /// SHA-256 of the checkpoint encoding.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.checkpoint_bytes()))
    }
}

// Error contexts are `&'static str`; parameter names are few and fixed, so leaking them is bounded.
fn leak_name(name: String) -> &'static str {
    Box::leak(name.into_boxed_str())
}

/// Whether dropout is active.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut ChaCha8Rng),
}

/// Tape handles produced by [`encode_var`].
#[derive(Debug, Clone, Copy)]
pub struct EncodedVars {
    /// `T' x D`
    pub tokens: Var,
    /// `D x T'`
    pub attention: Var,
    /// `1 x D` or `T' x D`, depending on [`ZClsPooling`].
    pub z_cls: Var,
}

/// Encoder forward pass on a tape.
pub fn encode_var(
    tape: &mut Tape,
    x: Var,
    w: &Weights<Var>,
    cfg: &EncoderConfig,
    mode: Mode<'_>,
) -> Result<EncodedVars> {
    let (c, t) = tape.shape(x);
    if c != cfg.channels {
        return Err(Error::ShapeMismatch {
            lhs: (c, t),
            rhs: (cfg.channels, t),
            context: "encoder input channels",
        });
    }
    if t < cfg.min_input_len() {
        return Err(Error::InputTooShort {
            got: t,
            need: cfg.min_input_len(),
        });
    }
    let d = cfg.token_dim();
    let maps = tape.temporal_conv(x, w.temporal)?;
    let mut branch_out = Vec::with_capacity(w.branches.len());
    for (b, &dil) in w.branches.iter().zip(&cfg.dilation_array) {
        let mixed = tape.group_mix(maps, b.spatial)?;
        let filtered = tape.depthwise_conv(mixed, b.temporal, dil)?;
        let biased = tape.add_col_bias(filtered, b.bias)?;
        branch_out.push(tape.elu(biased));
    }
    let features = tape.vstack(&branch_out)?;
    let pooled = tape.avg_pool_cols(features, cfg.avg_pool_len)?;
    let tp = tape.shape(pooled).1;

    let attention = if cfg.attention_enabled {
        let h = tape.matmul(w.att_w1, pooled)?;
        let h = tape.add_col_bias(h, w.att_b1)?;
        let h = tape.elu(h);
        let logits = tape.matmul(w.att_w2, h)?;
        let logits = tape.add_col_bias(logits, w.att_b2)?;
        let soft = tape.col_softmax(logits);
        tape.scale(soft, d as f64)
    } else {
        tape.constant(Mat::filled(d, tp, 1.0))
    };
    let weighted = tape.mul(attention, pooled)?;

    let z_cls = match cfg.z_cls {
        ZClsPooling::MeanOverTokens => {
            let m = tape.mean_cols(weighted);
            tape.transpose(m)
        }
        ZClsPooling::PerToken => tape.transpose(weighted),
    };

    let kept = match mode {
        Mode::Train(rng) if cfg.dropout > 0.0 => {
            let keep = 1.0 - cfg.dropout;
            let mask = Mat::from_fn(d, tp, |_, _| {
                if rng.gen::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            });
            let mask = tape.constant(mask);
            tape.mul(weighted, mask)?
        }
        _ => weighted,
    };
    let smoothed = tape.depthwise_conv(kept, w.smoother, 1)?;
    let tokens = tape.transpose(smoothed);
    Ok(EncodedVars {
        tokens,
        attention,
        z_cls,
    })
}

/// Per-token two-layer projector: `relu(X W1 + b1) W2 + b2`.
pub fn project_var(tape: &mut Tape, tokens: Var, w: &Weights<Var>) -> Result<Var> {
    let h = tape.matmul(tokens, w.proj_w1)?;
    let h = tape.add_row_bias(h, w.proj_b1)?;
    let h = tape.relu(h);
    let o = tape.matmul(h, w.proj_w2)?;
    tape.add_row_bias(o, w.proj_b2)
}

/// Encoder output for one window.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenOutput {
    pub tokens: FeatureSequence,
    /// `D x T'` channel attention weights.
    pub attention_weights: Mat,
    pub z_cls: Mat,
}

impl TokenOutput {
    /// Strongest channel weight at each pooled step.
    pub fn attention_curve(&self) -> Vec<f64> {
        let a = &self.attention_weights;
        (0..a.cols())
            .map(|j| (0..a.rows()).map(|i| a[(i, j)]).fold(f64::NEG_INFINITY, f64::max))
            .collect()
    }
}

/// Encodes one `channels x samples` window.
pub fn encode(x: &Mat, params: &EncoderParams, cfg: &EncoderConfig, mode: Mode<'_>) -> Result<TokenOutput> {
    cfg.validate()?;
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let w = params.bind(&mut tape, false);
    let out = encode_var(&mut tape, xv, &w, cfg, mode)?;
    Ok(TokenOutput {
        tokens: FeatureSequence::new(tape.value(out.tokens).clone())?,
        attention_weights: tape.value(out.attention).clone(),
        z_cls: tape.value(out.z_cls).clone(),
    })
}

/// Applies the projector to a token sequence.
pub fn project(tokens: &FeatureSequence, params: &EncoderParams, cfg: &EncoderConfig) -> Result<FeatureSequence> {
    if tokens.dim() != cfg.token_dim() {
        return Err(Error::ShapeMismatch {
            lhs: tokens.tokens().shape(),
            rhs: (tokens.len(), cfg.token_dim()),
            context: "projector input dimension",
        });
    }
    let mut tape = Tape::new();
    let tv = tape.constant(tokens.tokens().clone());
    let w = params.bind(&mut tape, false);
    let out = project_var(&mut tape, tv, &w)?;
    FeatureSequence::new(tape.value(out).clone())
}
