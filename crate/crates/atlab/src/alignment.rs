//! Attention-alignment diagnostics and controls.
//!
//! Text-to-frame attention should march down the diagonal of the
//! decoder-step x encoder-position matrix. This module owns the three pieces
//! built on that observation:
//!
//! * a **diagonal band** test and the **diagonal attention rate** `r`, the
//!   fraction of attention mass inside the band (the training penalty is
//!   `-r`, wired into the loss by the trainer);
//! * the **attention centroid** of a single decoder step's row;
//! * the **sliding window** used at inference, which restricts attention to
//!   a few encoder positions around a monotonically advancing center.

use crate::error::{Error, Result};

/// How far behind the window center attention may reach.
pub const WINDOW_BACK: usize = 1;
/// How far ahead of the window center attention may reach.
pub const WINDOW_AHEAD: usize = 4;
/// Consecutive ahead-of-center centroids needed to advance the window.
pub const DEVIATIONS_TO_ADVANCE: u32 = 3;

/// Row-stochastic attention matrix: `s_len` decoder steps over `t_len`
/// encoder positions, row-major. Every row must be nonnegative and sum to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMatrix {
    s_len: usize,
    t_len: usize,
    data: Vec<f64>,
}

impl AttentionMatrix {
    pub fn new(s_len: usize, t_len: usize, data: Vec<f64>) -> Result<Self> {
        if s_len == 0 || t_len == 0 {
            return Err(Error::Shape(format!("attention matrix with empty side {s_len}x{t_len}")));
        }
        if data.len() != s_len * t_len {
            return Err(Error::Shape(format!(
                "attention matrix {s_len}x{t_len} needs {} values, got {}",
                s_len * t_len,
                data.len()
            )));
        }
        for (s, row) in data.chunks(t_len).enumerate() {
            let mut sum = 0.0;
            for &w in row {
                if !w.is_finite() || w < 0.0 {
                    return Err(Error::Numeric(format!("attention row {s} has invalid weight {w}")));
                }
                sum += w;
            }
            if (sum - 1.0).abs() > 1e-6 {
                return Err(Error::Numeric(format!("attention row {s} sums to {sum}, expected 1")));
            }
        }
        Ok(AttentionMatrix { s_len, t_len, data })
    }

    pub fn s_len(&self) -> usize {
        self.s_len
    }

    pub fn t_len(&self) -> usize {
        self.t_len
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.data[s * self.t_len..(s + 1) * self.t_len]
    }

    pub fn at(&self, s: usize, t: usize) -> f64 {
        self.data[s * self.t_len + t]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

/// Is cell `(s, t)` within `bandwidth` of the matrix diagonal?
///
/// The diagonal of an `s_len x t_len` matrix has slope `k = s_len / t_len`,
/// so the test is `|s - k*t| <= bandwidth`. Evaluated as
/// `|s*t_len - t*s_len| <= bandwidth * t_len` in exact integer arithmetic on
/// the left, with a hair of slack on the right so boundary cells stay in the
/// band when `bandwidth` itself carries float error.
pub fn in_band(s: usize, t: usize, s_len: usize, t_len: usize, bandwidth: f64) -> bool {
    let lhs = (s as i64 * t_len as i64 - t as i64 * s_len as i64).unsigned_abs();
    lhs as f64 <= (bandwidth + 1e-12) * t_len as f64
}

/// 0/1 mask over an `s_len x t_len` matrix selecting the diagonal band.
pub fn band_mask(s_len: usize, t_len: usize, bandwidth: f64) -> Vec<f64> {
    let mut mask = vec![0.0; s_len * t_len];
    for s in 0..s_len {
        for t in 0..t_len {
            if in_band(s, t, s_len, t_len, bandwidth) {
                mask[s * t_len + t] = 1.0;
            }
        }
    }
    mask
}

/// Diagonal attention rate: the fraction of total attention mass lying
/// inside the diagonal band. Rows each carry mass 1, so this is the in-band
/// sum divided by the number of decoder steps, and lands in [0, 1].
pub fn diagonal_rate(attn: &AttentionMatrix, bandwidth: f64) -> f64 {
    if bandwidth < 0.0 {
        return 0.0;
    }
    let mut in_sum = 0.0;
    for s in 0..attn.s_len() {
        let row = attn.row(s);
        for (t, &w) in row.iter().enumerate() {
            if in_band(s, t, attn.s_len(), attn.t_len(), bandwidth) {
                in_sum += w;
            }
        }
    }
    in_sum / attn.s_len() as f64
}

/// Diagonal constraint penalty for one attention matrix: `-r`. The trainer
/// averages this across heads and layers and scales by its loss weight.
pub fn diagonal_constraint_loss(attn: &AttentionMatrix, bandwidth: f64) -> f64 {
    -diagonal_rate(attn, bandwidth)
}

/// Index the attention row points at: `floor(sum_t row[t] * t)`, with sums a
/// whisker below an integer rounded up so that float error in the dot
/// product cannot knock an exact centroid down a step.
pub fn attention_centroid(row: &[f64]) -> Result<usize> {
    if row.is_empty() {
        return Err(Error::Shape("attention centroid of an empty row".into()));
    }
    let mut sum = 0.0;
    for (t, &w) in row.iter().enumerate() {
        if !w.is_finite() || w < 0.0 {
            return Err(Error::Numeric(format!("attention weight {w} at position {t}")));
        }
        sum += w * t as f64;
    }
    let nearest = sum.round();
    let centroid = if (sum - nearest).abs() < 1e-9 { nearest } else { sum.floor() };
    Ok(centroid as usize)
}

/// Sliding-window cursor: the current center and how many consecutive steps
/// the attention centroid has run ahead of it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SlidingWindowState {
    pub center: usize,
    pub deviation_count: u32,
}

/// Fresh window at the start of decoding: centered on the first encoder
/// position with no deviations seen.
pub fn window_init() -> SlidingWindowState {
    SlidingWindowState { center: 0, deviation_count: 0 }
}

/// Inclusive encoder-position range the window admits, clamped to the
/// sequence: `[center - WINDOW_BACK, center + WINDOW_AHEAD]`.
pub fn window_bounds(state: &SlidingWindowState, t_len: usize) -> Result<(usize, usize)> {
    if t_len == 0 {
        return Err(Error::Shape("window over an empty encoder sequence".into()));
    }
    let lo = state.center.saturating_sub(WINDOW_BACK);
    let hi = (state.center + WINDOW_AHEAD).min(t_len - 1);
    Ok((lo.min(t_len - 1), hi))
}

/// Mask attention scores in place: positions outside the window become
/// negative infinity, so a subsequent softmax gives them weight zero.
pub fn window_mask(state: &SlidingWindowState, scores: &mut [f64]) -> Result<()> {
    let (lo, hi) = window_bounds(state, scores.len())?;
    for (t, v) in scores.iter_mut().enumerate() {
        if t < lo || t > hi {
            *v = f64::NEG_INFINITY;
        }
    }
    Ok(())
}

/// Keep-mask form of [`window_mask`] for softmax implementations that take a
/// boolean mask instead of -inf scores.
pub fn window_keep(state: &SlidingWindowState, t_len: usize) -> Result<Vec<bool>> {
    let (lo, hi) = window_bounds(state, t_len)?;
    Ok((0..t_len).map(|t| t >= lo && t <= hi).collect())
}

/// Advance the window from one decoded frame's (head- and layer-averaged)
/// attention row. A centroid ahead of the center counts as a deviation;
/// [`DEVIATIONS_TO_ADVANCE`] of them in a row move the center one position
/// forward (never past the last encoder position, never backward). A
/// centroid at or behind the center resets the run. Returns the centroid.
pub fn window_update(state: &mut SlidingWindowState, attn_row: &[f64]) -> Result<usize> {
    let centroid = attention_centroid(attn_row)?;
    if centroid > state.center {
        state.deviation_count += 1;
        if state.deviation_count >= DEVIATIONS_TO_ADVANCE {
            state.center = (state.center + 1).min(attn_row.len() - 1);
            state.deviation_count = 0;
        }
    } else {
        state.deviation_count = 0;
    }
    Ok(centroid)
}
