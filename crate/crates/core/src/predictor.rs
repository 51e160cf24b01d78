//! Boundary scoring with stacked recurrent cells, constrained span decoding
//! and the clip/second conversions used by both labelling and inference.

use rand_chacha::ChaCha8Rng;

use crate::diffcore::{Graph, Var};
use crate::encoders::mask_bias_row;
use crate::error::{MrtError, Result};
use crate::nn::{Ctx, Linear, Lstm, ParamStore};

/// Start/end logits and their masked softmax distributions.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundaryScores {
    pub s_start: Vec<f64>,
    pub s_end: Vec<f64>,
    pub p_start: Vec<f64>,
    pub p_end: Vec<f64>,
}

/// Graph handles for the boundary outputs, all length-n vectors.
#[derive(Clone, Copy, Debug)]
pub struct BoundaryVars {
    pub s_start: Var,
    pub s_end: Var,
    pub p_start: Var,
    pub p_end: Var,
}

impl BoundaryVars {
    pub fn scores(&self, g: &Graph) -> BoundaryScores {
        let v = |x: Var| g.value(x).data().to_vec();
        BoundaryScores {
            s_start: v(self.s_start),
            s_end: v(self.s_end),
            p_start: v(self.p_start),
            p_end: v(self.p_end),
        }
    }
}

/// A grounded moment, in clips and in seconds.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TemporalSpan {
    pub start_idx: usize,
    pub end_idx: usize,
    pub start_sec: f64,
    pub end_sec: f64,
    pub duration_sec: f64,
}

impl TemporalSpan {
    /// Span from clip indices on an `n`-clip grid over `duration` seconds.
    pub fn from_indices(start_idx: usize, end_idx: usize, n: usize, duration: f64) -> Result<Self> {
        if start_idx > end_idx || end_idx >= n {
            return Err(MrtError::Contract(format!(
                "indices ({start_idx}, {end_idx}) invalid for {n} clips"
            )));
        }
        Ok(Self {
            start_idx,
            end_idx,
            start_sec: index_to_time(start_idx, n, duration),
            end_sec: index_to_time(end_idx, n, duration),
            duration_sec: duration,
        })
    }
}

/// Two stacked unidirectional LSTMs; the end branch runs over the start
/// branch's hidden states.
#[derive(Clone, Debug)]
pub struct BoundaryPredictor {
    start_rnn: Lstm,
    end_rnn: Lstm,
    start_out: Linear,
    end_out: Linear,
}

impl BoundaryPredictor {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, d: usize) -> Self {
        Self {
            start_rnn: Lstm::new(store, rng, "predictor.start_rnn", d, d),
            end_rnn: Lstm::new(store, rng, "predictor.end_rnn", d, d),
            start_out: Linear::new(store, rng, "predictor.start_out", 2 * d, 1),
            end_out: Linear::new(store, rng, "predictor.end_out", 2 * d, 1),
        }
    }

    /// `features` is `n×d`; `mask` marks valid clips.
    pub fn forward(&self, cx: &mut Ctx, features: Var, mask: &[bool]) -> Result<BoundaryVars> {
        let n = cx.g.value(features).rows();
        if n == 0 || n != mask.len() {
            return Err(MrtError::dim("predict_scores", cx.g.value(features).shape(), &[mask.len()]));
        }
        let h_start = self.start_rnn.forward(cx, features)?;
        let cat = cx.g.concat_cols(&[h_start, features])?;
        let s_start = self.start_out.forward(cx, cat)?;
        let s_start = cx.g.reshape(s_start, &[1, n])?;

        let h_end = self.end_rnn.forward(cx, h_start)?;
        let cat = cx.g.concat_cols(&[h_end, features])?;
        let s_end = self.end_out.forward(cx, cat)?;
        let s_end = cx.g.reshape(s_end, &[1, n])?;

        let bias = cx.g.constant(mask_bias_row(mask));
        let masked = cx.g.add(s_start, bias)?;
        let p_start = cx.g.softmax(masked, 1)?;
        let masked = cx.g.add(s_end, bias)?;
        let p_end = cx.g.softmax(masked, 1)?;

        Ok(BoundaryVars {
            s_start: cx.g.reshape(s_start, &[n])?,
            s_end: cx.g.reshape(s_end, &[n])?,
            p_start: cx.g.reshape(p_start, &[n])?,
            p_end: cx.g.reshape(p_end, &[n])?,
        })
    }
}

/// Most probable `(start, end)` with `start <= end`.
///
/// Exhaustive O(n²) scan; ties go to the smallest start, then the smallest
/// end. (A running prefix maximum would make this O(n).)
pub fn joint_argmax(p_start: &[f64], p_end: &[f64]) -> Result<(usize, usize, f64)> {
    if p_start.is_empty() || p_start.len() != p_end.len() {
        return Err(MrtError::dim("joint_argmax", &[p_start.len()], &[p_end.len()]));
    }
    let mut best = (0, 0, f64::NEG_INFINITY);
    for (s, &ps) in p_start.iter().enumerate() {
        for (e, &pe) in p_end.iter().enumerate().skip(s) {
            let joint = ps * pe;
            if joint > best.2 {
                best = (s, e, joint);
            }
        }
    }
    Ok(best)
}

/// `round(τ/T·n)` (half up), clamped to `[0, n-1]`.
pub fn time_to_index(tau: f64, duration: f64, n: usize) -> Result<usize> {
    if !(duration > 0.0) || n == 0 {
        return Err(MrtError::Contract(format!(
            "need positive duration and clip count, got {duration} and {n}"
        )));
    }
    if !(0.0..=duration).contains(&tau) {
        return Err(MrtError::Contract(format!(
            "time {tau} outside [0, {duration}]"
        )));
    }
    let idx = (tau / duration * n as f64 + 0.5).floor() as usize;
    Ok(idx.min(n - 1))
}

/// `â/n·T`.
pub fn index_to_time(index: usize, n: usize, duration: f64) -> f64 {
    index as f64 / n as f64 * duration
}
