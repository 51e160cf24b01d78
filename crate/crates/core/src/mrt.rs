//! Multi-resolution temporal encoder-decoder.
//!
//! Two conv-conv-pool stages take the fused sequence from length `n` to
//! `n/4`. At the lowest resolution the visual features are re-fused with an
//! attention-pooled query vector. Two upsample-concat-conv stages then return
//! to length `n`, so the module's output has exactly the shape of its input.
//! A kernel-3 sigmoid head on the bridge and on each decoder stage produces
//! 1-D temporal maps at `n/4`, `n/2` and `n`.

use rand_chacha::ChaCha8Rng;

use crate::diffcore::Var;
use crate::encoders::mask_bias_row;
use crate::error::{MrtError, Result};
use crate::nn::{uniform_init, Ctx, LayerNorm, Linear, ParamId, ParamStore, SepConv};

/// Kernel of the temporal map heads.
pub const MAP_HEAD_KERNEL: usize = 3;

/// Number of supervised resolutions.
pub const RESOLUTIONS: usize = 3;

/// Inclusive clip-index interval.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ClipSpan {
    pub start: usize,
    pub end: usize,
}

impl ClipSpan {
    pub fn new(start: usize, end: usize) -> Result<Self> {
        if start > end {
            return Err(MrtError::Contract(format!("inverted span ({start}, {end})")));
        }
        Ok(Self { start, end })
    }
}

/// Per-clip scores. Predictions live in `[0, 1]`, ground truth in `{0, 1}`.
#[derive(Clone, Debug, PartialEq)]
pub struct TemporalMap {
    pub scores: Vec<f64>,
}

impl TemporalMap {
    pub fn new(scores: Vec<f64>) -> Self {
        Self { scores }
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

/// Binary map with ones on `span.start..=span.end`.
pub fn groundtruth_map(span: ClipSpan, n: usize) -> Result<TemporalMap> {
    if span.start > span.end || span.end >= n {
        return Err(MrtError::Contract(format!(
            "span ({}, {}) invalid for {n} clips",
            span.start, span.end
        )));
    }
    let scores = (0..n)
        .map(|c| if (span.start..=span.end).contains(&c) { 1.0 } else { 0.0 })
        .collect();
    Ok(TemporalMap { scores })
}

/// Halves a map's resolution by pairwise max.
pub fn downsample_map(map: &TemporalMap) -> Result<TemporalMap> {
    if !map.len().is_multiple_of(2) {
        return Err(MrtError::Contract(format!(
            "cannot halve a map of odd length {}",
            map.len()
        )));
    }
    let scores = map
        .scores
        .chunks_exact(2)
        .map(|p| p[0].max(p[1]))
        .collect();
    Ok(TemporalMap { scores })
}

/// Ground-truth maps ordered coarse to fine: `[n/4, n/2, n]`.
pub fn groundtruth_pyramid(span: ClipSpan, n: usize) -> Result<[TemporalMap; RESOLUTIONS]> {
    let full = groundtruth_map(span, n)?;
    let half = downsample_map(&full)?;
    let quarter = downsample_map(&half)?;
    Ok([quarter, half, full])
}

/// Pairwise "any" of a mask, matching [`downsample_map`].
pub fn downsample_mask(mask: &[bool]) -> Vec<bool> {
    mask.chunks(2).map(|p| p.iter().any(|&m| m)).collect()
}

#[derive(Clone, Debug)]
struct ConvBlock {
    conv: SepConv,
    norm: LayerNorm,
}

impl ConvBlock {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, kernel: usize, d_in: usize, d: usize) -> Result<Self> {
        Ok(Self {
            conv: SepConv::new(store, rng, name, kernel, d_in, d)?,
            norm: LayerNorm::new(store, &format!("{name}.norm"), d),
        })
    }

    fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let y = self.conv.forward(cx, x)?;
        let y = self.norm.forward(cx, y)?;
        Ok(cx.g.relu(y))
    }
}

#[derive(Clone, Debug)]
struct MapHead {
    w: ParamId,
    b: ParamId,
}

impl MapHead {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, d: usize) -> Self {
        let fan_in = MAP_HEAD_KERNEL * d;
        Self {
            w: store.add(format!("{name}.w"), uniform_init(rng, &[MAP_HEAD_KERNEL, d, 1], fan_in)),
            b: store.add(format!("{name}.b"), uniform_init(rng, &[1, 1], fan_in)),
        }
    }

    /// `W×d` features to a length-`W` map in `(0, 1)`.
    fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let w = cx.g.value(x).rows();
        let y = cx.g.conv1d(x, cx.p(self.w))?;
        let y = cx.g.add_broadcast(y, cx.p(self.b))?;
        let y = cx.g.sigmoid(y);
        cx.g.reshape(y, &[w])
    }
}

/// Intermediate features of one pass, plus the three maps (coarse to fine).
#[derive(Clone, Debug)]
pub struct MrtOutput {
    pub enc1: Var,
    pub enc2: Var,
    pub bridge: Var,
    pub dec2: Var,
    pub dec1: Var,
    pub maps: [Var; RESOLUTIONS],
}

/// Optional tap for perturbation probes: replaces `enc2` before decoding.
pub type Enc2Override<'a> = Option<&'a dyn Fn(&mut Ctx, Var) -> Result<Var>>;

#[derive(Clone, Debug)]
pub struct MultiResolutionTemporal {
    enc1: [ConvBlock; 2],
    enc2: [ConvBlock; 2],
    bridge_visual: Linear,
    bridge_query: Linear,
    bridge_word_score: ParamId,
    bridge_ffn: Linear,
    dec2: [ConvBlock; 2],
    dec1: [ConvBlock; 2],
    heads: [MapHead; RESOLUTIONS],
}

impl MultiResolutionTemporal {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, d: usize, kernel: usize) -> Result<Self> {
        let mut block = |name: &str, d_in: usize| ConvBlock::new(store, rng, name, kernel, d_in, d);
        let enc1 = [block("mrt.enc1.a", d)?, block("mrt.enc1.b", d)?];
        let enc2 = [block("mrt.enc2.a", d)?, block("mrt.enc2.b", d)?];
        let dec2 = [block("mrt.dec2.a", 2 * d)?, block("mrt.dec2.b", d)?];
        let dec1 = [block("mrt.dec1.a", 2 * d)?, block("mrt.dec1.b", d)?];
        Ok(Self {
            enc1,
            enc2,
            bridge_visual: Linear::new(store, rng, "mrt.bridge.visual", d, d),
            bridge_query: Linear::new(store, rng, "mrt.bridge.query", d, d),
            bridge_word_score: store.add("mrt.bridge.word_score", uniform_init(rng, &[d, 1], d)),
            bridge_ffn: Linear::new(store, rng, "mrt.bridge.ffn", 2 * d, d),
            dec2,
            dec1,
            heads: [
                MapHead::new(store, rng, "mrt.head.quarter", d),
                MapHead::new(store, rng, "mrt.head.half", d),
                MapHead::new(store, rng, "mrt.head.full", d),
            ],
        })
    }

    fn stage(blocks: &[ConvBlock; 2], cx: &mut Ctx, x: Var) -> Result<Var> {
        let y = blocks[0].forward(cx, x)?;
        blocks[1].forward(cx, y)
    }

    /// Attention-weighted average of projected query words, `1×d`.
    fn pooled_query(&self, cx: &mut Ctx, query: Var, query_mask: &[bool]) -> Result<Var> {
        let scores = cx.g.matmul(query, cx.p(self.bridge_word_score))?;
        let scores = cx.g.transpose(scores)?;
        let bias = cx.g.constant(mask_bias_row(query_mask));
        let scores = cx.g.add(scores, bias)?;
        let weights = cx.g.softmax(scores, 1)?;
        let projected = self.bridge_query.forward(cx, query)?;
        cx.g.matmul(weights, projected)
    }

    pub fn forward(&self, cx: &mut Ctx, fused: Var, query: Var, query_mask: &[bool]) -> Result<MrtOutput> {
        self.forward_with(cx, fused, query, query_mask, None)
    }

    pub fn forward_with(
        &self,
        cx: &mut Ctx,
        fused: Var,
        query: Var,
        query_mask: &[bool],
        enc2_override: Enc2Override<'_>,
    ) -> Result<MrtOutput> {
        let n = cx.g.value(fused).rows();
        if n == 0 || !n.is_multiple_of(4) {
            return Err(MrtError::Contract(format!(
                "sequence length {n} must be a positive multiple of 4"
            )));
        }
        let enc1 = fused;
        let e1 = Self::stage(&self.enc1, cx, enc1)?;
        let mut enc2 = cx.g.max_pool2(e1)?;
        if let Some(f) = enc2_override {
            enc2 = f(cx, enc2)?;
        }
        let e2 = Self::stage(&self.enc2, cx, enc2)?;
        let low = cx.g.max_pool2(e2)?;

        let visual = self.bridge_visual.forward(cx, low)?;
        let pooled = self.pooled_query(cx, query, query_mask)?;
        let (rows, d) = (n / 4, cx.g.value(pooled).cols());
        let tiled = cx.g.broadcast(pooled, rows, d)?;
        let cat = cx.g.concat_cols(&[visual, tiled])?;
        let bridge = self.bridge_ffn.forward(cx, cat)?;
        let bridge = cx.g.relu(bridge);

        let up = cx.g.upsample2(bridge)?;
        let cat = cx.g.concat_cols(&[up, enc2])?;
        let dec2 = Self::stage(&self.dec2, cx, cat)?;

        let up = cx.g.upsample2(dec2)?;
        let cat = cx.g.concat_cols(&[up, enc1])?;
        let dec1 = Self::stage(&self.dec1, cx, cat)?;

        let maps = [
            self.heads[0].forward(cx, bridge)?,
            self.heads[1].forward(cx, dec2)?,
            self.heads[2].forward(cx, dec1)?,
        ];
        Ok(MrtOutput {
            enc1,
            enc2,
            bridge,
            dec2,
            dec1,
            maps,
        })
    }
}
