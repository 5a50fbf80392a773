//! Deterministic synthetic multi-speaker text-to-frames task.
//!
//! Each vocabulary token owns a fixed random prototype vector in frame
//! space. A sample picks a token sequence, stretches each token over
//! `round(base_duration * speaker_speed)` frames, blends 30% of the previous
//! frame into every frame, and adds per-speaker Gaussian noise. The blend
//! makes "copy the previous frame" a tempting shortcut for a decoder — the
//! failure mode the pre-net bottleneck exists to block — while the known
//! generating token of every frame provides ground-truth alignment for
//! calibrating the diagonal-rate metric.
//!
//! Everything is a pure function of the configuration: sample `i` of a split
//! depends only on `(master_seed, split, i)`, so generation can be resumed,
//! parallelized, or repeated bit-identically.

use std::io::{Read, Write};
use std::path::Path;

use crate::alignment::AttentionMatrix;
use crate::config::{fmt_f64, KvReader, Sections};
use crate::error::{Error, Result};
use crate::tensor::rng;

/// Seed-stream labels, mixed with the master seed so that prototypes,
/// speaker traits, and individual samples never share a stream.
const STREAM_PROTO: u64 = 1;
const STREAM_SPEAKER: u64 = 2;
const STREAM_SAMPLE: u64 = 3;

/// Fraction of the previous frame blended into each frame.
pub const FRAME_BLEND: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }

    fn code(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Valid => 1,
            Split::Test => 2,
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(Error::Parameter(format!("unknown split {other:?} (train|valid|test)"))),
        }
    }
}

/// Task description: vocabulary, speakers, sequence-length and duration
/// ranges, per-speaker speed multipliers, noise level range, split sizes,
/// and the master seed everything derives from.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskConfig {
    pub vocab_size: usize,
    pub num_speakers: usize,
    pub frame_dim: usize,
    /// Tokens per sample, inclusive range.
    pub tokens_min: usize,
    pub tokens_max: usize,
    /// Per-token base duration in frames, inclusive range.
    pub duration_min: u64,
    pub duration_max: u64,
    /// One speed multiplier per speaker.
    pub speed_factors: Vec<f64>,
    /// Per-speaker noise sigma is drawn once from this inclusive range.
    pub noise_sigma_min: f64,
    pub noise_sigma_max: f64,
    pub train_size: usize,
    pub valid_size: usize,
    pub test_size: usize,
    pub master_seed: u64,
}

/// Evenly spaced speed multipliers spanning [0.7, 1.3].
fn default_speed_factors(num_speakers: usize) -> Vec<f64> {
    if num_speakers == 1 {
        return vec![1.0];
    }
    (0..num_speakers)
        .map(|i| 0.7 + 0.6 * i as f64 / (num_speakers - 1) as f64)
        .collect()
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig {
            vocab_size: 20,
            num_speakers: 8,
            frame_dim: 16,
            tokens_min: 5,
            tokens_max: 20,
            duration_min: 2,
            duration_max: 6,
            speed_factors: default_speed_factors(8),
            noise_sigma_min: 0.01,
            noise_sigma_max: 0.05,
            train_size: 2000,
            valid_size: 100,
            test_size: 100,
            master_seed: 0,
        }
    }
}

impl TaskConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.num_speakers == 0 || self.frame_dim == 0 {
            return Err(Error::Parameter("task: vocab_size, num_speakers, frame_dim must be positive".into()));
        }
        if self.tokens_min == 0 || self.tokens_min > self.tokens_max {
            return Err(Error::Parameter(format!(
                "task: empty tokens_per_sample range [{}, {}]",
                self.tokens_min, self.tokens_max
            )));
        }
        if self.duration_min == 0 || self.duration_min > self.duration_max {
            return Err(Error::Parameter(format!(
                "task: empty base_duration range [{}, {}]",
                self.duration_min, self.duration_max
            )));
        }
        if self.speed_factors.len() != self.num_speakers {
            return Err(Error::Parameter(format!(
                "task: {} speed factors for {} speakers",
                self.speed_factors.len(),
                self.num_speakers
            )));
        }
        if self.speed_factors.iter().any(|&f| !(f > 0.0) || !f.is_finite()) {
            return Err(Error::Parameter("task: speed factors must be positive and finite".into()));
        }
        if !(self.noise_sigma_min >= 0.0 && self.noise_sigma_min <= self.noise_sigma_max) {
            return Err(Error::Parameter(format!(
                "task: empty noise sigma range [{}, {}]",
                self.noise_sigma_min, self.noise_sigma_max
            )));
        }
        if self.valid_size == 0 || self.test_size == 0 {
            return Err(Error::Parameter("task: valid and test splits must be non-empty".into()));
        }
        if self.train_size < self.num_speakers {
            // The train split deterministically covers every speaker by
            // pinning the first num_speakers samples; smaller splits cannot.
            return Err(Error::Parameter(format!(
                "task: train_size {} must cover all {} speakers",
                self.train_size, self.num_speakers
            )));
        }
        Ok(())
    }

    pub fn split_size(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train_size,
            Split::Valid => self.valid_size,
            Split::Test => self.test_size,
        }
    }

    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let speed = self.speed_factors.iter().map(|f| fmt_f64(*f)).collect::<Vec<_>>().join(",");
        vec![
            ("vocab_size".into(), self.vocab_size.to_string()),
            ("num_speakers".into(), self.num_speakers.to_string()),
            ("frame_dim".into(), self.frame_dim.to_string()),
            ("tokens_min".into(), self.tokens_min.to_string()),
            ("tokens_max".into(), self.tokens_max.to_string()),
            ("duration_min".into(), self.duration_min.to_string()),
            ("duration_max".into(), self.duration_max.to_string()),
            ("speed_factors".into(), speed),
            ("noise_sigma_min".into(), fmt_f64(self.noise_sigma_min)),
            ("noise_sigma_max".into(), fmt_f64(self.noise_sigma_max)),
            ("train_size".into(), self.train_size.to_string()),
            ("valid_size".into(), self.valid_size.to_string()),
            ("test_size".into(), self.test_size.to_string()),
            ("master_seed".into(), self.master_seed.to_string()),
        ]
    }

    /// Read from a key=value section, defaulting absent keys, then validate.
    pub fn from_reader(r: &mut KvReader) -> Result<Self> {
        let d = TaskConfig::default();
        let num_speakers = r.parse_or("num_speakers", d.num_speakers)?;
        let cfg = TaskConfig {
            vocab_size: r.parse_or("vocab_size", d.vocab_size)?,
            num_speakers,
            frame_dim: r.parse_or("frame_dim", d.frame_dim)?,
            tokens_min: r.parse_or("tokens_min", d.tokens_min)?,
            tokens_max: r.parse_or("tokens_max", d.tokens_max)?,
            duration_min: r.parse_or("duration_min", d.duration_min)?,
            duration_max: r.parse_or("duration_max", d.duration_max)?,
            speed_factors: r.parse_list_or("speed_factors", default_speed_factors(num_speakers))?,
            noise_sigma_min: r.parse_or("noise_sigma_min", d.noise_sigma_min)?,
            noise_sigma_max: r.parse_or("noise_sigma_max", d.noise_sigma_max)?,
            train_size: r.parse_or("train_size", d.train_size)?,
            valid_size: r.parse_or("valid_size", d.valid_size)?,
            test_size: r.parse_or("test_size", d.test_size)?,
            master_seed: r.parse_or("master_seed", d.master_seed)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// The `[task]` section as config text (used as the dataset file header
    /// and inside checkpoints, so artifacts carry their generating task).
    pub fn section_text(&self) -> String {
        let mut s = Sections::new();
        s.push("task", self.to_pairs()).expect("single section cannot collide");
        s.serialize()
    }

    pub fn from_section_text(text: &str) -> Result<Self> {
        let sections = Sections::parse(text)?;
        for name in sections.names() {
            if name != "task" {
                return Err(Error::Config(format!("unexpected section [{name}] in task header")));
            }
        }
        let mut r = KvReader::over(&sections, "task");
        let cfg = Self::from_reader(&mut r)?;
        r.finish()?;
        Ok(cfg)
    }

    /// Per-speaker noise level, drawn once from the configured range.
    pub fn speaker_sigma(&self, speaker: usize) -> f64 {
        let mut r = rng::stream(rng::derive(self.master_seed, &[STREAM_SPEAKER, speaker as u64]));
        rng::uniform_in(&mut r, self.noise_sigma_min, self.noise_sigma_max)
    }

    /// Fixed prototype vector of a vocabulary token.
    pub fn prototype(&self, token: usize) -> Vec<f64> {
        let mut r = rng::stream(rng::derive(self.master_seed, &[STREAM_PROTO, token as u64]));
        (0..self.frame_dim).map(|_| rng::normal(&mut r)).collect()
    }
}

/// One text-to-frames example with its ground-truth alignment.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSample {
    /// Token ids, length T.
    pub phonemes: Vec<usize>,
    pub speaker: usize,
    /// S x frame_dim, row-major.
    pub frames: Vec<f64>,
    pub frame_dim: usize,
    /// Generating encoder index of each frame; length S, monotone
    /// non-decreasing, onto 0..T-1, increments in {0, 1}.
    pub alignment: Vec<usize>,
}

impl SyntheticSample {
    pub fn t_len(&self) -> usize {
        self.phonemes.len()
    }

    pub fn s_len(&self) -> usize {
        self.alignment.len()
    }

    pub fn frame(&self, s: usize) -> &[f64] {
        &self.frames[s * self.frame_dim..(s + 1) * self.frame_dim]
    }
}

/// Frames each token occupies at a given speed: `round(d * speed)`, floored
/// at one frame so every token stays reachable by the alignment.
pub fn durations_for(base: &[u64], speed: f64) -> Vec<usize> {
    base.iter().map(|&d| ((d as f64 * speed).round() as usize).max(1)).collect()
}

/// Generate one sample; depends only on `(config.master_seed, split, index)`.
pub fn generate_sample(config: &TaskConfig, split: Split, index: usize) -> Result<SyntheticSample> {
    config.validate()?;
    if index >= config.split_size(split) {
        return Err(Error::Parameter(format!(
            "sample index {index} out of range for {} split of {}",
            split.name(),
            config.split_size(split)
        )));
    }
    let mut r = rng::stream(rng::derive(config.master_seed, &[STREAM_SAMPLE, split.code(), index as u64]));

    let t_len = rng::uniform_int(&mut r, config.tokens_min as u64, config.tokens_max as u64) as usize;
    let phonemes: Vec<usize> =
        (0..t_len).map(|_| rng::uniform_int(&mut r, 0, config.vocab_size as u64 - 1) as usize).collect();
    let base: Vec<u64> =
        (0..t_len).map(|_| rng::uniform_int(&mut r, config.duration_min, config.duration_max)).collect();
    let drawn_speaker = rng::uniform_int(&mut r, 0, config.num_speakers as u64 - 1) as usize;
    // Pin the first train samples to speakers 0..n so every speaker is
    // guaranteed to appear in training data.
    let speaker = if split == Split::Train && index < config.num_speakers { index } else { drawn_speaker };

    let durations = durations_for(&base, config.speed_factors[speaker]);
    let s_len: usize = durations.iter().sum();
    let mut alignment = Vec::with_capacity(s_len);
    for (t, &d) in durations.iter().enumerate() {
        alignment.extend(std::iter::repeat(t).take(d));
    }

    let sigma = config.speaker_sigma(speaker);
    let protos: Vec<Vec<f64>> = phonemes.iter().map(|&p| config.prototype(p)).collect();
    let d = config.frame_dim;
    let mut frames = vec![0.0; s_len * d];
    let mut prev = vec![0.0; d];
    for (s, &t) in alignment.iter().enumerate() {
        for j in 0..d {
            let value = (1.0 - FRAME_BLEND) * protos[t][j] + FRAME_BLEND * prev[j] + sigma * rng::normal(&mut r);
            frames[s * d + j] = value;
        }
        prev.copy_from_slice(&frames[s * d..(s + 1) * d]);
    }

    Ok(SyntheticSample { phonemes, speaker, frames, frame_dim: d, alignment })
}

/// Generate a whole split in index order.
pub fn generate_split(config: &TaskConfig, split: Split) -> Result<Vec<SyntheticSample>> {
    (0..config.split_size(split)).map(|i| generate_sample(config, split, i)).collect()
}

/// All three splits.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: TaskConfig,
    pub train: Vec<SyntheticSample>,
    pub valid: Vec<SyntheticSample>,
    pub test: Vec<SyntheticSample>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[SyntheticSample] {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }
}

pub fn make_dataset(config: &TaskConfig) -> Result<Dataset> {
    Ok(Dataset {
        config: config.clone(),
        train: generate_split(config, Split::Train)?,
        valid: generate_split(config, Split::Valid)?,
        test: generate_split(config, Split::Test)?,
    })
}

/// Ground-truth alignment as a one-hot S x T attention matrix: row `s` is
/// hot at `alignment[s]`.
pub fn oracle_alignment_matrix(sample: &SyntheticSample) -> Result<AttentionMatrix> {
    let (s_len, t_len) = (sample.s_len(), sample.t_len());
    let mut data = vec![0.0; s_len * t_len];
    for (s, &t) in sample.alignment.iter().enumerate() {
        if t >= t_len {
            return Err(Error::Shape(format!("alignment[{s}] = {t} outside 0..{t_len}")));
        }
        data[s * t_len + t] = 1.0;
    }
    AttentionMatrix::new(s_len, t_len, data)
}

// ── persistence ─────────────────────────────────────────────────────
//
// One file per split: a length-prefixed [task] config echo, a sample count,
// then each sample length-prefixed so readers can skip without parsing.
// All integers little-endian u32, floats little-endian f64.

pub fn write_split(path: &Path, config: &TaskConfig, samples: &[SyntheticSample]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    let header = config.section_text();
    w.write_all(&(header.len() as u32).to_le_bytes())?;
    w.write_all(header.as_bytes())?;
    w.write_all(&(samples.len() as u32).to_le_bytes())?;
    for sample in samples {
        let mut body = Vec::new();
        body.extend_from_slice(&(sample.t_len() as u32).to_le_bytes());
        for &p in &sample.phonemes {
            body.extend_from_slice(&(p as u32).to_le_bytes());
        }
        body.extend_from_slice(&(sample.speaker as u32).to_le_bytes());
        body.extend_from_slice(&(sample.s_len() as u32).to_le_bytes());
        body.extend_from_slice(&(sample.frame_dim as u32).to_le_bytes());
        for &f in &sample.frames {
            body.extend_from_slice(&f.to_le_bytes());
        }
        for &a in &sample.alignment {
            body.extend_from_slice(&(a as u32).to_le_bytes());
        }
        w.write_all(&(body.len() as u32).to_le_bytes())?;
        w.write_all(&body)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_split(path: &Path) -> Result<(TaskConfig, Vec<SyntheticSample>)> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let header_len = read_u32(&mut r, "dataset header length")? as usize;
    if header_len > 1 << 20 {
        return Err(Error::Format(format!("dataset header of {header_len} bytes is implausible")));
    }
    let mut header = vec![0u8; header_len];
    r.read_exact(&mut header).map_err(|_| truncated("dataset header"))?;
    let header = String::from_utf8(header).map_err(|_| Error::Format("dataset header is not UTF-8".into()))?;
    let config = TaskConfig::from_section_text(&header)?;

    let count = read_u32(&mut r, "sample count")? as usize;
    let mut samples = Vec::with_capacity(count);
    for i in 0..count {
        let body_len = read_u32(&mut r, "sample length")? as usize;
        let mut body = vec![0u8; body_len];
        r.read_exact(&mut body).map_err(|_| truncated("sample body"))?;
        samples.push(decode_sample(&body).map_err(|e| Error::Format(format!("sample {i}: {e}")))?);
    }
    Ok((config, samples))
}

fn decode_sample(body: &[u8]) -> Result<SyntheticSample> {
    let mut at = 0usize;
    let take_u32 = |at: &mut usize| -> Result<u32> {
        let end = *at + 4;
        let bytes = body.get(*at..end).ok_or_else(|| truncated("sample field"))?;
        *at = end;
        Ok(u32::from_le_bytes(bytes.try_into().expect("4-byte slice")))
    };
    let t_len = take_u32(&mut at)? as usize;
    let mut phonemes = Vec::with_capacity(t_len);
    for _ in 0..t_len {
        phonemes.push(take_u32(&mut at)? as usize);
    }
    let speaker = take_u32(&mut at)? as usize;
    let s_len = take_u32(&mut at)? as usize;
    let frame_dim = take_u32(&mut at)? as usize;
    let mut frames = Vec::with_capacity(s_len * frame_dim);
    for _ in 0..s_len * frame_dim {
        let end = at + 8;
        let bytes = body.get(at..end).ok_or_else(|| truncated("sample frames"))?;
        at = end;
        frames.push(f64::from_le_bytes(bytes.try_into().expect("8-byte slice")));
    }
    let mut alignment = Vec::with_capacity(s_len);
    for _ in 0..s_len {
        alignment.push(take_u32(&mut at)? as usize);
    }
    if at != body.len() {
        return Err(Error::Format(format!("{} trailing bytes after sample", body.len() - at)));
    }
    Ok(SyntheticSample { phonemes, speaker, frames, frame_dim, alignment })
}

fn read_u32(r: &mut impl Read, what: &str) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf).map_err(|_| truncated(what))?;
    Ok(u32::from_le_bytes(buf))
}

fn truncated(what: &str) -> Error {
    Error::Format(format!("dataset file truncated while reading {what}"))
}
