//! The acoustic model: a phoneme encoder and frame decoder built from
//! multi-head attention and convolutional feed-forward blocks, with three
//! alignment-related choices under study:
//!
//! * the **encoder input scheme** — plain `x + p`, `x + alpha*p` with a
//!   trainable scalar, or `LN(x) + p` so position information survives
//!   training;
//! * the **decoder pre-net bottleneck** — narrow first layers with heavy
//!   dropout so the decoder cannot just copy the previous frame;
//! * per-head **encoder-decoder attention matrices** surfaced from every
//!   forward pass so the trainer can penalize off-diagonal mass and
//!   inference can window it.
//!
//! Teacher-forced execution processes a whole target sequence in one pass
//! under a causal mask; autoregressive inference feeds predictions back one
//! frame at a time, optionally restricting attention with the sliding
//! window from [`crate::alignment`].

use crate::alignment::{self, AttentionMatrix};
use crate::config::{fmt_f64, KvReader};
use crate::error::{Error, Result};
use crate::tensor::init;
use crate::tensor::params::{ParamId, ParamSet};
use crate::tensor::rng;
use crate::tensor::{Pad, Tape, Tensor, TensorId};


/// Epsilon inside every layer norm. Small enough that a normalized row's
/// variance stays within 1e-6 of exactly 1.
pub const LN_EPS: f64 = 1e-8;

/// Dropout rate inside the decoder pre-net (fixed by design, not by config).
pub const PRENET_DROPOUT: f64 = 0.5;

/// Initial bias for the pre-net's hidden (ReLU) layers. The narrow
/// bottleneck layers sit behind ReLUs fed by non-negative inputs, so a dead
/// unit gets no gradient and never recovers; starting with a positive margin
/// keeps the bottleneck trainable.
pub const PRENET_BIAS_INIT: f64 = 0.5;

/// Hard ceiling on sequence lengths; positional encodings and masks are
/// materialized per call, so this only guards against runaway inputs.
pub const MAX_SEQ_LEN: usize = 10_000;

/// How the encoder combines phoneme embeddings `x` with positional
/// embeddings `p`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncoderInputMode {
    /// `x + p`.
    Baseline,
    /// `x + alpha * p` with a trainable scalar `alpha` (initialized to 1).
    LearnableWeight,
    /// `LN(x) + p` with trainable gain and shift.
    LayerNorm,
}

impl EncoderInputMode {
    pub const ALL: [EncoderInputMode; 3] =
        [EncoderInputMode::Baseline, EncoderInputMode::LearnableWeight, EncoderInputMode::LayerNorm];

    pub fn name(self) -> &'static str {
        match self {
            EncoderInputMode::Baseline => "baseline",
            EncoderInputMode::LearnableWeight => "learnable_weight",
            EncoderInputMode::LayerNorm => "layer_norm",
        }
    }

    pub fn code(self) -> u32 {
        match self {
            EncoderInputMode::Baseline => 0,
            EncoderInputMode::LearnableWeight => 1,
            EncoderInputMode::LayerNorm => 2,
        }
    }

    pub fn from_code(code: u32) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.code() == code)
            .ok_or_else(|| Error::Format(format!("unknown encoder input mode code {code}")))
    }
}

impl std::str::FromStr for EncoderInputMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| {
            Error::Parameter(format!(
                "unknown encoder input mode {s:?} (expected baseline, learnable_weight, or layer_norm)"
            ))
        })
    }
}

/// Model architecture. Desk-scale defaults train on a CPU in minutes; the
/// published-scale values (4 layers, hidden 256, filter 1024, kernel 9,
/// frame_dim 80, bottleneck 32, speaker_dim 64) remain expressible.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub hidden_size: usize,
    pub num_heads: usize,
    pub ffn_filter_size: usize,
    pub ffn_kernel_size: usize,
    pub prenet_bottleneck_size: usize,
    pub frame_dim: usize,
    pub vocab_size: usize,
    pub num_speakers: usize,
    pub speaker_dim: usize,
    pub encoder_input_mode: EncoderInputMode,
    pub prenet_bottleneck_enabled: bool,
    /// Keep pre-net dropout live during inference (the regularization the
    /// bottleneck design relies on); switchable off for experiments.
    pub prenet_inference_dropout: bool,
    pub dropout_rate: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_layers: 2,
            hidden_size: 32,
            num_heads: 2,
            ffn_filter_size: 128,
            ffn_kernel_size: 3,
            prenet_bottleneck_size: 4,
            frame_dim: 16,
            vocab_size: 20,
            num_speakers: 8,
            speaker_dim: 16,
            encoder_input_mode: EncoderInputMode::LayerNorm,
            prenet_bottleneck_enabled: true,
            prenet_inference_dropout: true,
            dropout_rate: 0.1,
        }
    }
}

impl ModelConfig {
    /// Published-scale architecture, for configs that want it.
    pub fn paper_scale() -> Self {
        ModelConfig {
            num_layers: 4,
            hidden_size: 256,
            num_heads: 2,
            ffn_filter_size: 1024,
            ffn_kernel_size: 9,
            prenet_bottleneck_size: 32,
            frame_dim: 80,
            speaker_dim: 64,
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0
            || self.hidden_size == 0
            || self.num_heads == 0
            || self.ffn_filter_size == 0
            || self.ffn_kernel_size == 0
            || self.frame_dim == 0
            || self.vocab_size == 0
            || self.num_speakers == 0
            || self.speaker_dim == 0
        {
            return Err(Error::Parameter("model: all sizes must be positive".into()));
        }
        if self.hidden_size % self.num_heads != 0 {
            return Err(Error::Parameter(format!(
                "model: hidden_size {} not divisible by num_heads {}",
                self.hidden_size, self.num_heads
            )));
        }
        if self.prenet_bottleneck_enabled && self.prenet_bottleneck_size == 0 {
            return Err(Error::Parameter("model: bottleneck size must be positive".into()));
        }
        if self.prenet_bottleneck_enabled && self.prenet_bottleneck_size >= self.frame_dim {
            return Err(Error::Parameter(format!(
                "model: bottleneck {} must be narrower than frame_dim {}",
                self.prenet_bottleneck_size, self.frame_dim
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Parameter(format!("model: dropout_rate {} outside [0,1)", self.dropout_rate)));
        }
        Ok(())
    }

    /// Pre-net layer widths, input to output: with the bottleneck the two
    /// hidden layers are narrow (80-32-32-256 at published scale); the
    /// ablation widens them to the hidden size (80-256-256-256).
    pub fn prenet_widths(&self) -> [usize; 4] {
        if self.prenet_bottleneck_enabled {
            [self.frame_dim, self.prenet_bottleneck_size, self.prenet_bottleneck_size, self.hidden_size]
        } else {
            [self.frame_dim, self.hidden_size, self.hidden_size, self.hidden_size]
        }
    }

    pub fn to_pairs(&self) -> Vec<(String, String)> {
        vec![
            ("num_layers".into(), self.num_layers.to_string()),
            ("hidden_size".into(), self.hidden_size.to_string()),
            ("num_heads".into(), self.num_heads.to_string()),
            ("ffn_filter_size".into(), self.ffn_filter_size.to_string()),
            ("ffn_kernel_size".into(), self.ffn_kernel_size.to_string()),
            ("prenet_bottleneck_size".into(), self.prenet_bottleneck_size.to_string()),
            ("frame_dim".into(), self.frame_dim.to_string()),
            ("vocab_size".into(), self.vocab_size.to_string()),
            ("num_speakers".into(), self.num_speakers.to_string()),
            ("speaker_dim".into(), self.speaker_dim.to_string()),
            ("encoder_input_mode".into(), self.encoder_input_mode.name().into()),
            ("prenet_bottleneck_enabled".into(), self.prenet_bottleneck_enabled.to_string()),
            ("prenet_inference_dropout".into(), self.prenet_inference_dropout.to_string()),
            ("dropout_rate".into(), fmt_f64(self.dropout_rate)),
        ]
    }

    pub fn from_reader(r: &mut KvReader) -> Result<Self> {
        Self::from_reader_with(r, ModelConfig::default())
    }

    /// Like [`ModelConfig::from_reader`], but absent keys fall back to
    /// `d` instead of the crate defaults (used to sync the model with the
    /// task's vocabulary, speaker count, and frame size).
    pub fn from_reader_with(r: &mut KvReader, d: ModelConfig) -> Result<Self> {
        let mode_name: String = r.parse_or("encoder_input_mode", d.encoder_input_mode.name().to_string())?;
        let cfg = ModelConfig {
            num_layers: r.parse_or("num_layers", d.num_layers)?,
            hidden_size: r.parse_or("hidden_size", d.hidden_size)?,
            num_heads: r.parse_or("num_heads", d.num_heads)?,
            ffn_filter_size: r.parse_or("ffn_filter_size", d.ffn_filter_size)?,
            ffn_kernel_size: r.parse_or("ffn_kernel_size", d.ffn_kernel_size)?,
            prenet_bottleneck_size: r.parse_or("prenet_bottleneck_size", d.prenet_bottleneck_size)?,
            frame_dim: r.parse_or("frame_dim", d.frame_dim)?,
            vocab_size: r.parse_or("vocab_size", d.vocab_size)?,
            num_speakers: r.parse_or("num_speakers", d.num_speakers)?,
            speaker_dim: r.parse_or("speaker_dim", d.speaker_dim)?,
            encoder_input_mode: mode_name.parse()?,
            prenet_bottleneck_enabled: r.parse_or("prenet_bottleneck_enabled", d.prenet_bottleneck_enabled)?,
            prenet_inference_dropout: r.parse_or("prenet_inference_dropout", d.prenet_inference_dropout)?,
            dropout_rate: r.parse_or("dropout_rate", d.dropout_rate)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Sin/cos positional embeddings: `PE[pos, 2i] = sin(pos / 10000^(2i/dim))`
/// and `PE[pos, 2i+1] = cos(pos / 10000^(2i/dim))`. All entries in [-1, 1].
pub fn positional_encoding(length: usize, dim: usize) -> Result<Tensor> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::Parameter(format!("positional encoding needs an even dim, got {dim}")));
    }
    let mut data = vec![0.0; length * dim];
    for pos in 0..length {
        for i in 0..dim / 2 {
            let angle = pos as f64 / 10_000f64.powf(2.0 * i as f64 / dim as f64);
            data[pos * dim + 2 * i] = angle.sin();
            data[pos * dim + 2 * i + 1] = angle.cos();
        }
    }
    Tensor::new(vec![length, dim], data)
}

/// Mean over positions of the cosine similarity between paired rows of
/// `combined` and `p`. Quantifies how much positional signal survives in
/// the encoder input; always in [-1, 1].
pub fn position_similarity(combined: &[f64], p: &[f64], rows: usize, dim: usize) -> Result<f64> {
    if rows == 0 || dim == 0 || combined.len() != rows * dim || p.len() != rows * dim {
        return Err(Error::Shape(format!(
            "position_similarity: {} and {} values do not form two {rows}x{dim} matrices",
            combined.len(),
            p.len()
        )));
    }
    let mut total = 0.0;
    for r in 0..rows {
        let a = &combined[r * dim..(r + 1) * dim];
        let b = &p[r * dim..(r + 1) * dim];
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        if na == 0.0 || nb == 0.0 {
            return Err(Error::Numeric(format!("position_similarity: zero-norm row {r}")));
        }
        total += dot / (na * nb);
    }
    Ok(total / rows as f64)
}

/// Numerically safe logistic function.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Output of a teacher-forced pass, as live tape nodes so the trainer can
/// keep building loss terms on the same tape.
pub struct TfOutput {
    /// S x frame_dim predicted frames.
    pub mel: TensorId,
    /// S stop logits (an S x 1 node).
    pub stop_logits: TensorId,
    /// One S x T encoder-decoder attention per (layer, head), layer-major.
    pub attns: Vec<TensorId>,
    /// Tape leaf of each parameter, indexed like the `ParamSet`.
    pub bound: Vec<TensorId>,
}

/// Output of autoregressive inference.
#[derive(Debug, Clone)]
pub struct InferOutput {
    /// Generated frames, S' x frame_dim row-major.
    pub mel: Vec<f64>,
    pub s_len: usize,
    pub frame_dim: usize,
    /// One S' x T matrix per (layer, head); row s reflects the window state
    /// that was active when frame s was generated.
    pub attns: Vec<AttentionMatrix>,
    /// Window center after each frame (empty when the window is off).
    pub centers: Vec<usize>,
    /// Frames generated when the stop gate fired; `None` if decoding ran to
    /// `max_frames` without stopping.
    pub stopped_at: Option<usize>,
}

/// Per-forward options: `train` switches the general dropout sites, `seed`
/// fixes every dropout mask in the pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardOptions {
    pub train: bool,
    pub seed: u64,
}

// Dropout-site labels, mixed with the forward seed so every site draws an
// independent, reproducible mask. Layer sites extend the label list with
// (layer, sublayer) indices.
const SITE_ENC_INPUT: u64 = 1;
const SITE_ENC_LAYER: u64 = 2;
const SITE_DEC_INPUT: u64 = 3;
const SITE_DEC_LAYER: u64 = 4;
const SITE_PRENET: u64 = 5;

/// The acoustic model: a config plus its named parameters.
#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    params: ParamSet,
}

impl Model {
    /// Fresh model with seeded initialization: Xavier-uniform matrices and
    /// convolutions, unit-normal embeddings, zero biases and shifts, unit
    /// gains, alpha = 1.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = config.hidden_size;
        let k = config.ffn_kernel_size;
        let mut params = ParamSet::new();
        let mut counter = 0u64;
        let mut next_seed = move || {
            counter += 1;
            rng::derive(seed, &[counter])
        };

        params.add("embed.token", init::normal_embedding(config.vocab_size, d, next_seed())?)?;
        match config.encoder_input_mode {
            EncoderInputMode::Baseline => {}
            EncoderInputMode::LearnableWeight => {
                params.add("enc.input.alpha", Tensor::new(vec![1], vec![1.0])?)?;
            }
            EncoderInputMode::LayerNorm => {
                params.add("enc.input.ln.gamma", init::ones_vector(d))?;
                params.add("enc.input.ln.beta", init::zeros_vector(d))?;
            }
        }

        for layer in 0..config.num_layers {
            for w in ["wq", "wk", "wv", "wo"] {
                params.add(format!("enc.{layer}.attn.{w}"), init::xavier_matrix(d, d, next_seed())?)?;
            }
            add_layer_norm(&mut params, &format!("enc.{layer}.ln1"), d)?;
            add_conv_ffn(&mut params, &format!("enc.{layer}.ffn"), d, config.ffn_filter_size, k, &mut next_seed)?;
            add_layer_norm(&mut params, &format!("enc.{layer}.ln2"), d)?;
        }

        // The two hidden layers are ReLU over non-negative inputs (the second
        // sees post-ReLU activations), so zero biases leave each narrow layer
        // one optimizer push away from dying with no recovery gradient. A
        // positive margin keeps the units alive through early training.
        let widths = config.prenet_widths();
        for (i, pair) in widths.windows(2).enumerate() {
            params.add(format!("prenet.l{}.w", i + 1), init::xavier_matrix(pair[0], pair[1], next_seed())?)?;
            let bias =
                if i < 2 { init::filled_vector(pair[1], PRENET_BIAS_INIT) } else { init::zeros_vector(pair[1]) };
            params.add(format!("prenet.l{}.b", i + 1), bias)?;
        }

        for layer in 0..config.num_layers {
            for attn in ["self", "cross"] {
                for w in ["wq", "wk", "wv", "wo"] {
                    params.add(format!("dec.{layer}.{attn}.{w}"), init::xavier_matrix(d, d, next_seed())?)?;
                }
            }
            add_layer_norm(&mut params, &format!("dec.{layer}.ln1"), d)?;
            add_layer_norm(&mut params, &format!("dec.{layer}.ln2"), d)?;
            add_conv_ffn(&mut params, &format!("dec.{layer}.ffn"), d, config.ffn_filter_size, k, &mut next_seed)?;
            add_layer_norm(&mut params, &format!("dec.{layer}.ln3"), d)?;
        }

        params.add("spk.embed", init::normal_embedding(config.num_speakers, config.speaker_dim, next_seed())?)?;
        params.add("spk.proj.w", init::xavier_matrix(config.speaker_dim, d, next_seed())?)?;
        params.add("spk.proj.b", init::zeros_vector(d))?;

        params.add("mel.w", init::xavier_matrix(d, config.frame_dim, next_seed())?)?;
        params.add("mel.b", init::zeros_vector(config.frame_dim))?;
        params.add("stop.w", init::xavier_matrix(d, 1, next_seed())?)?;
        params.add("stop.b", init::zeros_vector(1))?;

        Ok(Model { config, params })
    }

    /// Rebuild from existing parameters (checkpoint load): the set must
    /// match what `new` would create, name for name and shape for shape.
    pub fn from_params(config: ModelConfig, params: ParamSet) -> Result<Self> {
        let reference = Model::new(config.clone(), 0)?;
        if reference.params.len() != params.len() {
            return Err(Error::Format(format!(
                "parameter set has {} entries, model needs {}",
                params.len(),
                reference.params.len()
            )));
        }
        for (_, expected) in reference.params.iter() {
            let id = params
                .id(&expected.name)
                .ok_or_else(|| Error::Format(format!("missing parameter {:?}", expected.name)))?;
            let got = &params.value(id).shape;
            if *got != expected.value.shape {
                return Err(Error::Format(format!(
                    "parameter {:?} has shape {got:?}, expected {:?}",
                    expected.name, expected.value.shape
                )));
            }
        }
        Ok(Model { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn pid(&self, name: &str) -> ParamId {
        self.params.id(name).expect("parameter name fixed at construction")
    }

    /// Copy every parameter onto the tape; index the result by `ParamId`.
    fn bind(&self, tape: &mut Tape, requires_grad: bool) -> Vec<TensorId> {
        self.params.iter().map(|(_, p)| tape.leaf(p.value.clone(), requires_grad)).collect()
    }

    fn b(&self, bound: &[TensorId], name: &str) -> TensorId {
        bound[self.pid(name).0]
    }

    // ── building blocks ──────────────────────────────────────────────────

    /// Multi-head attention. `keep` is an optional q_rows x kv_rows keep
    /// mask applied to every head's scores. Returns the projected output
    /// and each head's attention matrix.
    fn mha(
        &self,
        tape: &mut Tape,
        prefix: &str,
        bound: &[TensorId],
        q_in: TensorId,
        kv_in: TensorId,
        keep: Option<&[bool]>,
    ) -> Result<(TensorId, Vec<TensorId>)> {
        let d = self.config.hidden_size;
        let heads = self.config.num_heads;
        let dk = d / heads;
        let q = tape.matmul(q_in, self.b(bound, &format!("{prefix}.wq")))?;
        let k = tape.matmul(kv_in, self.b(bound, &format!("{prefix}.wk")))?;
        let v = tape.matmul(kv_in, self.b(bound, &format!("{prefix}.wv")))?;
        let mut outs = Vec::with_capacity(heads);
        let mut attns = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = tape.slice_cols(q, h * dk, dk)?;
            let kh = tape.slice_cols(k, h * dk, dk)?;
            let vh = tape.slice_cols(v, h * dk, dk)?;
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let scaled = tape.scale(scores, 1.0 / (dk as f64).sqrt())?;
            let attn = match keep {
                Some(mask) => tape.masked_softmax_lastdim(scaled, mask)?,
                None => tape.softmax_lastdim(scaled)?,
            };
            outs.push(tape.matmul(attn, vh)?);
            attns.push(attn);
        }
        let merged = tape.concat_cols(&outs)?;
        let out = tape.matmul(merged, self.b(bound, &format!("{prefix}.wo")))?;
        Ok((out, attns))
    }

    /// Two 1-D convolutions over the sequence with a ReLU between them.
    fn conv_ffn(
        &self,
        tape: &mut Tape,
        prefix: &str,
        bound: &[TensorId],
        x: TensorId,
        pad: Pad,
    ) -> Result<TensorId> {
        let k = self.config.ffn_kernel_size;
        let u1 = tape.unfold1d(x, k, pad)?;
        let c1 = tape.matmul(u1, self.b(bound, &format!("{prefix}.conv1.w")))?;
        let c1 = tape.add_row(c1, self.b(bound, &format!("{prefix}.conv1.b")))?;
        let a = tape.relu(c1)?;
        let u2 = tape.unfold1d(a, k, pad)?;
        let c2 = tape.matmul(u2, self.b(bound, &format!("{prefix}.conv2.w")))?;
        tape.add_row(c2, self.b(bound, &format!("{prefix}.conv2.b")))
    }

    /// Post-norm residual step: `LN(x + dropout(sub))`.
    #[allow(clippy::too_many_arguments)]
    fn residual_norm(
        &self,
        tape: &mut Tape,
        bound: &[TensorId],
        ln: &str,
        x: TensorId,
        sub: TensorId,
        opts: ForwardOptions,
        site: &[u64],
    ) -> Result<TensorId> {
        let seed = rng::derive(opts.seed, site);
        let sub = tape.dropout(sub, self.config.dropout_rate, opts.train, seed)?;
        let sum = tape.add(x, sub)?;
        tape.layer_norm(sum, self.b(bound, &format!("{ln}.gamma")), self.b(bound, &format!("{ln}.beta")), LN_EPS)
    }

    /// Speaker vector `softsign(embed(speaker)) W + b` as a 1 x hidden node.
    fn speaker_vector(&self, tape: &mut Tape, bound: &[TensorId], speaker: usize) -> Result<TensorId> {
        if speaker >= self.config.num_speakers {
            return Err(Error::Parameter(format!(
                "speaker id {speaker} out of range 0..{}",
                self.config.num_speakers
            )));
        }
        let e = tape.embed(self.b(bound, "spk.embed"), &[speaker])?;
        let s = tape.softsign(e)?;
        let proj = tape.matmul(s, self.b(bound, "spk.proj.w"))?;
        tape.add_row(proj, self.b(bound, "spk.proj.b"))
    }

    /// Add the speaker vector to every row of `hidden`.
    fn speaker_condition(
        &self,
        tape: &mut Tape,
        bound: &[TensorId],
        hidden: TensorId,
        speaker: usize,
    ) -> Result<TensorId> {
        let spk = self.speaker_vector(tape, bound, speaker)?;
        // Broadcast the single row over the sequence by gathering row 0.
        let rows = vec![0usize; tape.shape(hidden)[0]];
        let stacked = tape.embed(spk, &rows)?;
        tape.add(hidden, stacked)
    }

    /// Combine phoneme embeddings `x` with positional embeddings `p`
    /// according to the configured mode.
    fn encoder_input(
        &self,
        tape: &mut Tape,
        bound: &[TensorId],
        x: TensorId,
        p: TensorId,
    ) -> Result<TensorId> {
        match self.config.encoder_input_mode {
            EncoderInputMode::Baseline => tape.add(x, p),
            EncoderInputMode::LearnableWeight => {
                let scaled = tape.scale_by_scalar(p, self.b(bound, "enc.input.alpha"))?;
                tape.add(x, scaled)
            }
            EncoderInputMode::LayerNorm => {
                let normed = tape.layer_norm(
                    x,
                    self.b(bound, "enc.input.ln.gamma"),
                    self.b(bound, "enc.input.ln.beta"),
                    LN_EPS,
                )?;
                tape.add(normed, p)
            }
        }
    }

    /// Encoder stack: embedding and positional combination, `num_layers`
    /// attention + FFN blocks, speaker conditioning on the output.
    fn encode(
        &self,
        tape: &mut Tape,
        bound: &[TensorId],
        phonemes: &[usize],
        speaker: usize,
        opts: ForwardOptions,
    ) -> Result<TensorId> {
        let t_len = phonemes.len();
        if t_len == 0 || t_len > MAX_SEQ_LEN {
            return Err(Error::Parameter(format!("phoneme length {t_len} outside 1..={MAX_SEQ_LEN}")));
        }
        let x = tape.embed(self.b(bound, "embed.token"), phonemes)?;
        let p = tape.leaf(positional_encoding(t_len, self.config.hidden_size)?, false);
        let combined = self.encoder_input(tape, bound, x, p)?;
        let mut h = tape.dropout(
            combined,
            self.config.dropout_rate,
            opts.train,
            rng::derive(opts.seed, &[SITE_ENC_INPUT]),
        )?;
        for layer in 0..self.config.num_layers {
            let (attn_out, _) = self.mha(tape, &format!("enc.{layer}.attn"), bound, h, h, None)?;
            h = self.residual_norm(
                tape,
                bound,
                &format!("enc.{layer}.ln1"),
                h,
                attn_out,
                opts,
                &[SITE_ENC_LAYER, layer as u64, 0],
            )?;
            let ffn_out = self.conv_ffn(tape, &format!("enc.{layer}.ffn"), bound, h, Pad::Same)?;
            h = self.residual_norm(
                tape,
                bound,
                &format!("enc.{layer}.ln2"),
                h,
                ffn_out,
                opts,
                &[SITE_ENC_LAYER, layer as u64, 1],
            )?;
        }
        self.speaker_condition(tape, bound, h, speaker)
    }

    /// Decoder pre-net: three linear layers with ReLU and heavy dropout on
    /// both hidden layers. Dropout stays active at inference when configured.
    fn prenet(&self, tape: &mut Tape, bound: &[TensorId], frames: TensorId, opts: ForwardOptions) -> Result<TensorId> {
        let active = opts.train || self.config.prenet_inference_dropout;
        let mut h = frames;
        for layer in 1..=3 {
            h = tape.matmul(h, self.b(bound, &format!("prenet.l{layer}.w")))?;
            h = tape.add_row(h, self.b(bound, &format!("prenet.l{layer}.b")))?;
            if layer < 3 {
                h = tape.relu(h)?;
                let seed = rng::derive(opts.seed, &[SITE_PRENET, layer as u64]);
                h = tape.dropout(h, PRENET_DROPOUT, active, seed)?;
            }
        }
        Ok(h)
    }

    /// Decoder stack over already-shifted frames. `cross_keep` optionally
    /// restricts encoder-decoder attention (an S x T keep mask shared by
    /// every layer and head). Returns hidden states and the per-(layer,
    /// head) cross-attention matrices, layer-major.
    #[allow(clippy::too_many_arguments)]
    fn decode(
        &self,
        tape: &mut Tape,
        bound: &[TensorId],
        enc_out: TensorId,
        frames_in: TensorId,
        speaker: usize,
        opts: ForwardOptions,
        cross_keep: Option<&[bool]>,
    ) -> Result<(TensorId, Vec<TensorId>)> {
        let s_len = tape.shape(frames_in)[0];
        if s_len == 0 || s_len > MAX_SEQ_LEN {
            return Err(Error::Parameter(format!("frame count {s_len} outside 1..={MAX_SEQ_LEN}")));
        }
        let pre = self.prenet(tape, bound, frames_in, opts)?;
        let pre = self.speaker_condition(tape, bound, pre, speaker)?;
        let p = tape.leaf(positional_encoding(s_len, self.config.hidden_size)?, false);
        let sum = tape.add(pre, p)?;
        let mut h = tape.dropout(
            sum,
            self.config.dropout_rate,
            opts.train,
            rng::derive(opts.seed, &[SITE_DEC_INPUT]),
        )?;

        let mut causal = vec![false; s_len * s_len];
        for q in 0..s_len {
            for kv in 0..=q {
                causal[q * s_len + kv] = true;
            }
        }

        let mut cross_attns = Vec::with_capacity(self.config.num_layers * self.config.num_heads);
        for layer in 0..self.config.num_layers {
            let (self_out, _) = self.mha(tape, &format!("dec.{layer}.self"), bound, h, h, Some(&causal))?;
            h = self.residual_norm(
                tape,
                bound,
                &format!("dec.{layer}.ln1"),
                h,
                self_out,
                opts,
                &[SITE_DEC_LAYER, layer as u64, 0],
            )?;
            let (cross_out, attns) =
                self.mha(tape, &format!("dec.{layer}.cross"), bound, h, enc_out, cross_keep)?;
            cross_attns.extend(attns);
            h = self.residual_norm(
                tape,
                bound,
                &format!("dec.{layer}.ln2"),
                h,
                cross_out,
                opts,
                &[SITE_DEC_LAYER, layer as u64, 1],
            )?;
            let ffn_out = self.conv_ffn(tape, &format!("dec.{layer}.ffn"), bound, h, Pad::Causal)?;
            h = self.residual_norm(
                tape,
                bound,
                &format!("dec.{layer}.ln3"),
                h,
                ffn_out,
                opts,
                &[SITE_DEC_LAYER, layer as u64, 2],
            )?;
        }
        Ok((h, cross_attns))
    }

    /// Teacher-forced pass: the decoder consumes the target frames shifted
    /// right by one (zero go-frame) under a causal mask, predicting every
    /// frame in parallel.
    pub fn forward_teacher_forced(
        &self,
        tape: &mut Tape,
        phonemes: &[usize],
        frames: &[f64],
        speaker: usize,
        opts: ForwardOptions,
    ) -> Result<TfOutput> {
        let fd = self.config.frame_dim;
        if frames.is_empty() || frames.len() % fd != 0 {
            return Err(Error::Shape(format!(
                "frame data of {} values is not a positive multiple of frame_dim {fd}",
                frames.len()
            )));
        }
        let s_len = frames.len() / fd;
        let bound = self.bind(tape, opts.train);

        // Shift right: decoder input row s is target frame s-1, row 0 zeros.
        let mut shifted = vec![0.0; frames.len()];
        shifted[fd..].copy_from_slice(&frames[..frames.len() - fd]);
        let frames_in = tape.leaf(Tensor::new(vec![s_len, fd], shifted)?, false);

        let enc_out = self.encode(tape, &bound, phonemes, speaker, opts)?;
        let (dec_out, attns) = self.decode(tape, &bound, enc_out, frames_in, speaker, opts, None)?;

        let mel = tape.matmul(dec_out, self.b(&bound, "mel.w"))?;
        let mel = tape.add_row(mel, self.b(&bound, "mel.b"))?;
        let stop = tape.matmul(dec_out, self.b(&bound, "stop.w"))?;
        let stop_logits = tape.add_row(stop, self.b(&bound, "stop.b"))?;

        Ok(TfOutput { mel, stop_logits, attns, bound })
    }

    /// Pull cross-attention tape nodes out as validated matrices.
    pub fn attention_matrices(&self, tape: &Tape, attns: &[TensorId]) -> Result<Vec<AttentionMatrix>> {
        attns
            .iter()
            .map(|&id| {
                let shape = tape.shape(id);
                AttentionMatrix::new(shape[0], shape[1], tape.data(id).to_vec())
            })
            .collect()
    }

    /// Autoregressive inference: generate frames one at a time, feeding each
    /// prediction back. With the window enabled, one shared sliding-window
    /// state masks every cross-attention row and is advanced once per frame
    /// by the centroid of the head-and-layer-averaged attention row.
    ///
    /// Each step recomputes the whole prefix. Causal self-attention, causal
    /// FFN padding, the row-wise pre-net (with positionally stable dropout
    /// masks) and per-row historical window masks make that recomputation
    /// identical to incremental decoding, so already-emitted frames never
    /// change.
    pub fn infer_autoregressive(
        &self,
        phonemes: &[usize],
        speaker: usize,
        window_enabled: bool,
        max_frames: usize,
        stop_threshold: f64,
        seed: u64,
    ) -> Result<InferOutput> {
        if max_frames == 0 || max_frames > MAX_SEQ_LEN {
            return Err(Error::Parameter(format!("max_frames {max_frames} outside 1..={MAX_SEQ_LEN}")));
        }
        if !(0.0..=1.0).contains(&stop_threshold) {
            return Err(Error::Parameter(format!("stop_threshold {stop_threshold} outside [0,1]")));
        }
        let fd = self.config.frame_dim;
        let t_len = phonemes.len();
        let heads = self.config.num_layers * self.config.num_heads;
        let opts = ForwardOptions { train: false, seed };

        let mut window = alignment::window_init();
        let mut row_keeps: Vec<bool> = Vec::new();
        let mut mel: Vec<f64> = Vec::new();
        let mut centers: Vec<usize> = Vec::new();
        let mut stopped_at = None;
        let mut trace: Option<(Tape, Vec<TensorId>)> = None;

        for s in 0..max_frames {
            if window_enabled {
                row_keeps.extend(alignment::window_keep(&window, t_len)?);
            }
            // Decoder input rows 0..=s: zero go-frame, then fed-back frames.
            let mut input = vec![0.0; (s + 1) * fd];
            input[fd..].copy_from_slice(&mel[..s * fd]);

            let mut tape = Tape::new();
            let bound = self.bind(&mut tape, false);
            let frames_in = tape.leaf(Tensor::new(vec![s + 1, fd], input)?, false);
            let enc_out = self.encode(&mut tape, &bound, phonemes, speaker, opts)?;
            let keep = if window_enabled { Some(row_keeps.as_slice()) } else { None };
            let (dec_out, attns) = self.decode(&mut tape, &bound, enc_out, frames_in, speaker, opts, keep)?;

            let mel_all = tape.matmul(dec_out, self.b(&bound, "mel.w"))?;
            let mel_all = tape.add_row(mel_all, self.b(&bound, "mel.b"))?;
            let stop_all = tape.matmul(dec_out, self.b(&bound, "stop.w"))?;
            let stop_all = tape.add_row(stop_all, self.b(&bound, "stop.b"))?;

            mel.extend_from_slice(&tape.data(mel_all)[s * fd..]);
            let stop_prob = sigmoid(tape.data(stop_all)[s]);

            // The centroid of this frame's head-and-layer-averaged attention
            // row advances the shared window state.
            let mut avg_row = vec![0.0; t_len];
            for &attn in &attns {
                let row = &tape.data(attn)[s * t_len..(s + 1) * t_len];
                for (acc, w) in avg_row.iter_mut().zip(row) {
                    *acc += w;
                }
            }
            for w in &mut avg_row {
                *w /= heads as f64;
            }
            if window_enabled {
                alignment::window_update(&mut window, &avg_row)?;
                centers.push(window.center);
            }

            trace = Some((tape, attns));
            if stop_prob > stop_threshold {
                stopped_at = Some(s + 1);
                break;
            }
        }

        let (tape, attn_ids) = trace.expect("max_frames >= 1 so at least one step ran");
        let attns = self.attention_matrices(&tape, &attn_ids)?;
        Ok(InferOutput { s_len: mel.len() / fd, mel, frame_dim: fd, attns, centers, stopped_at })
    }

    /// Encoder input diagnostics: the combined embedding matrix and the
    /// positional matrix for a token sequence, for position-similarity
    /// reporting. Dropout-free and deterministic.
    pub fn encoder_input_matrices(&self, phonemes: &[usize]) -> Result<(Vec<f64>, Vec<f64>)> {
        if phonemes.is_empty() {
            return Err(Error::Parameter("encoder input needs at least one token".into()));
        }
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let x = tape.embed(self.b(&bound, "embed.token"), phonemes)?;
        let p = tape.leaf(positional_encoding(phonemes.len(), self.config.hidden_size)?, false);
        let combined = self.encoder_input(&mut tape, &bound, x, p)?;
        Ok((tape.data(combined).to_vec(), tape.data(p).to_vec()))
    }
}

fn add_layer_norm(params: &mut ParamSet, prefix: &str, d: usize) -> Result<()> {
    params.add(format!("{prefix}.gamma"), init::ones_vector(d))?;
    params.add(format!("{prefix}.beta"), init::zeros_vector(d))?;
    Ok(())
}

fn add_conv_ffn(
    params: &mut ParamSet,
    prefix: &str,
    d: usize,
    filter: usize,
    k: usize,
    next_seed: &mut impl FnMut() -> u64,
) -> Result<()> {
    params.add(format!("{prefix}.conv1.w"), init::xavier_conv(k, d, filter, next_seed())?)?;
    params.add(format!("{prefix}.conv1.b"), init::zeros_vector(filter))?;
    params.add(format!("{prefix}.conv2.w"), init::xavier_conv(k, filter, d, next_seed())?)?;
    params.add(format!("{prefix}.conv2.b"), init::zeros_vector(d))?;
    Ok(())
}
