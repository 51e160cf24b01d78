//! The assembled grounding network.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Tensor, Var};
use crate::encoders::{EncoderConfig, SharedEncoder, VideoQueryAttention};
use crate::error::{MrtError, Result};
use crate::losses::{total_loss, LossConfig, LossVars};
use crate::mrt::{ClipSpan, MrtOutput, MultiResolutionTemporal, TemporalMap, RESOLUTIONS};
use crate::nn::{Ctx, ParamStore};
use crate::predictor::{joint_argmax, BoundaryPredictor, BoundaryScores, BoundaryVars};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_video: usize,
    pub d_query: usize,
    pub hidden: usize,
    pub kernel: usize,
    pub heads: usize,
    pub n_model: usize,
    pub max_query_len: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kernel.is_multiple_of(2) {
            return Err(MrtError::Config(format!("kernel_size must be odd, got {}", self.kernel)));
        }
        if self.n_model < 4 || !self.n_model.is_multiple_of(4) {
            return Err(MrtError::Config(format!(
                "n_model must be a positive multiple of 4, got {}",
                self.n_model
            )));
        }
        if self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
            return Err(MrtError::Config(format!(
                "d={} must be divisible by num_heads={}",
                self.hidden, self.heads
            )));
        }
        if self.d_video == 0 || self.d_query == 0 || self.max_query_len == 0 {
            return Err(MrtError::Config("feature sizes and max_query_len must be positive".into()));
        }
        Ok(())
    }
}

/// Everything a forward pass exposes.
#[derive(Clone, Debug)]
pub struct ModelOutput {
    pub video: Var,
    pub query: Var,
    pub fused: Var,
    pub mrt: MrtOutput,
    pub boundary: BoundaryVars,
}

/// Inference result for one video/query pair.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub span: ClipSpan,
    pub prob: f64,
    pub scores: BoundaryScores,
    pub maps: [TemporalMap; RESOLUTIONS],
}

#[derive(Clone, Debug)]
pub struct MrtNet {
    pub config: ModelConfig,
    encoder: SharedEncoder,
    attention: VideoQueryAttention,
    mrt: MultiResolutionTemporal,
    predictor: BoundaryPredictor,
}

impl MrtNet {
    /// Builds the network and its freshly initialised parameters.
    pub fn new(config: ModelConfig, seed: u64) -> Result<(Self, ParamStore)> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = config.hidden;
        let encoder = SharedEncoder::new(
            &mut store,
            &mut rng,
            EncoderConfig {
                d_video: config.d_video,
                d_query: config.d_query,
                hidden: d,
                kernel: config.kernel,
                heads: config.heads,
                max_len: config.n_model.max(config.max_query_len),
            },
        )?;
        let attention = VideoQueryAttention::new(&mut store, &mut rng, d);
        let mrt = MultiResolutionTemporal::new(&mut store, &mut rng, d, config.kernel)?;
        let predictor = BoundaryPredictor::new(&mut store, &mut rng, d);
        Ok((
            Self {
                config,
                encoder,
                attention,
                mrt,
                predictor,
            },
            store,
        ))
    }

    pub fn forward(
        &self,
        cx: &mut Ctx,
        video: &Tensor,
        video_mask: &[bool],
        query: &Tensor,
    ) -> Result<ModelOutput> {
        if video.ndim() != 2 || video.rows() != self.config.n_model {
            return Err(MrtError::Config(format!(
                "video features {:?} do not match n_model={}",
                video.shape(),
                self.config.n_model
            )));
        }
        let query_mask = vec![true; query.shape().first().copied().unwrap_or(0)];
        if query_mask.is_empty() {
            return Err(MrtError::Contract("empty query".into()));
        }
        let v = cx.g.constant(video.clone());
        let q = cx.g.constant(query.clone());
        let (ve, qe) = self.encoder.encode(cx, v, video_mask, q, &query_mask)?;
        let s = self.attention.similarity(cx, ve, qe)?;
        let fused = self.attention.fuse(cx, ve, qe, s, video_mask, &query_mask)?;
        let mrt = self.mrt.forward(cx, fused, qe, &query_mask)?;
        let boundary = self.predictor.forward(cx, mrt.dec1, video_mask)?;
        Ok(ModelOutput {
            video: ve,
            query: qe,
            fused,
            mrt,
            boundary,
        })
    }

    pub fn loss(
        &self,
        cx: &mut Ctx,
        out: &ModelOutput,
        gts: &[TemporalMap; RESOLUTIONS],
        label: ClipSpan,
        cfg: &LossConfig,
    ) -> Result<LossVars> {
        total_loss(&mut cx.g, &out.mrt.maps, gts, &out.boundary, label, cfg)
    }

    /// Joint-argmax span over the valid clips.
    pub fn predict(
        &self,
        store: &ParamStore,
        video: &Tensor,
        video_mask: &[bool],
        query: &Tensor,
    ) -> Result<Prediction> {
        let mut cx = Ctx::new(store, false);
        let out = self.forward(&mut cx, video, video_mask, query)?;
        let scores = out.boundary.scores(&cx.g);
        let valid = video_mask.iter().take_while(|&&m| m).count().max(1);
        let (start, end, prob) = joint_argmax(&scores.p_start[..valid], &scores.p_end[..valid])?;
        let map = |k: usize| TemporalMap::new(cx.g.value(out.mrt.maps[k]).data().to_vec());
        Ok(Prediction {
            span: ClipSpan { start, end },
            prob,
            maps: [map(0), map(1), map(2)],
            scores,
        })
    }
}
