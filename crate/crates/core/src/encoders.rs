//! Modality projection, the shared convolution/attention encoder block, and
//! video-query attention fusion.

use rand_chacha::ChaCha8Rng;

use crate::diffcore::{Tensor, Var};
use crate::error::{MrtError, Result};
use crate::nn::{uniform_init, Ctx, LayerNorm, Linear, MultiHeadAttention, ParamId, ParamStore, SepConv};

/// Additive attention bias for padded positions.
pub const MASK_BIAS: f64 = -1e30;

/// Number of convolution sublayers in the shared block.
pub const ENCODER_CONV_LAYERS: usize = 4;

/// A length-n sequence of feature rows with a validity mask.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    pub features: Tensor,
    pub mask: Vec<bool>,
}

impl FeatureSequence {
    pub fn new(features: Tensor, mask: Vec<bool>) -> Result<Self> {
        if features.ndim() != 2 || features.rows() != mask.len() {
            return Err(MrtError::dim("FeatureSequence", features.shape(), &[mask.len()]));
        }
        if mask.len() < 4 {
            return Err(MrtError::Contract(format!(
                "video needs at least 4 clips, got {}",
                mask.len()
            )));
        }
        Ok(Self { features, mask })
    }

    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }
}

/// Word vectors for one query.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryEmbedding {
    pub words: Tensor,
    pub mask: Vec<bool>,
}

impl QueryEmbedding {
    pub fn new(words: Tensor) -> Result<Self> {
        if words.ndim() != 2 || words.rows() == 0 {
            return Err(MrtError::Contract(format!(
                "query needs at least one word, got shape {:?}",
                words.shape()
            )));
        }
        let mask = vec![true; words.rows()];
        Ok(Self { words, mask })
    }

    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }
}

/// `1×L` row with 0 at valid positions and [`MASK_BIAS`] at padding.
pub fn mask_bias_row(mask: &[bool]) -> Tensor {
    let data = mask.iter().map(|&m| if m { 0.0 } else { MASK_BIAS }).collect();
    Tensor::new(vec![1, mask.len()], data).expect("1×L")
}

/// `L×d` matrix of ones at valid rows and zeros at padding.
pub fn mask_rows(mask: &[bool], d: usize) -> Tensor {
    let data = mask
        .iter()
        .flat_map(|&m| std::iter::repeat_n(if m { 1.0 } else { 0.0 }, d))
        .collect();
    Tensor::new(vec![mask.len(), d], data).expect("L×d")
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub d_video: usize,
    pub d_query: usize,
    pub hidden: usize,
    pub kernel: usize,
    pub heads: usize,
    /// Longest sequence the positional table covers.
    pub max_len: usize,
}

/// Residual conv ×4 → self-attention → feed-forward, pre-norm.
#[derive(Clone, Debug)]
struct EncoderBlock {
    positions: ParamId,
    convs: Vec<(LayerNorm, SepConv)>,
    attn_norm: LayerNorm,
    attn: MultiHeadAttention,
    ffn_norm: LayerNorm,
    ffn_in: Linear,
    ffn_out: Linear,
}

impl EncoderBlock {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: &EncoderConfig) -> Result<Self> {
        let d = cfg.hidden;
        let positions = store.add(
            "encoder.positions",
            uniform_init(rng, &[cfg.max_len, d], d),
        );
        let convs = (0..ENCODER_CONV_LAYERS)
            .map(|i| {
                Ok((
                    LayerNorm::new(store, &format!("encoder.conv{i}.norm"), d),
                    SepConv::new(store, rng, &format!("encoder.conv{i}"), cfg.kernel, d, d)?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            positions,
            convs,
            attn_norm: LayerNorm::new(store, "encoder.attn.norm", d),
            attn: MultiHeadAttention::new(store, rng, "encoder.attn", d, cfg.heads)?,
            ffn_norm: LayerNorm::new(store, "encoder.ffn.norm", d),
            ffn_in: Linear::new(store, rng, "encoder.ffn.in", d, d),
            ffn_out: Linear::new(store, rng, "encoder.ffn.out", d, d),
        })
    }

    fn forward(&self, cx: &mut Ctx, x: Var, mask: &[bool]) -> Result<Var> {
        let len = mask.len();
        let max_len = cx.g.value(cx.p(self.positions)).rows();
        if len > max_len {
            return Err(MrtError::Config(format!(
                "sequence of {len} exceeds positional table of {max_len}"
            )));
        }
        let d = cx.g.value(x).cols();
        let keep = cx.g.constant(mask_rows(mask, d));
        let key_bias = cx.g.constant(mask_bias_row(mask));

        let pos = cx.g.slice_rows(cx.p(self.positions), 0, len)?;
        let mut x = cx.g.add(x, pos)?;
        x = cx.g.mul(x, keep)?;
        for (norm, conv) in &self.convs {
            let y = norm.forward(cx, x)?;
            let y = conv.forward(cx, y)?;
            let y = cx.g.relu(y);
            x = cx.g.add(x, y)?;
            x = cx.g.mul(x, keep)?;
        }
        let y = self.attn_norm.forward(cx, x)?;
        let y = self.attn.forward(cx, y, key_bias)?;
        x = cx.g.add(x, y)?;
        x = cx.g.mul(x, keep)?;

        let y = self.ffn_norm.forward(cx, x)?;
        let y = self.ffn_in.forward(cx, y)?;
        let y = cx.g.relu(y);
        let y = self.ffn_out.forward(cx, y)?;
        x = cx.g.add(x, y)?;
        cx.g.mul(x, keep)
    }
}

/// Per-modality projections into the hidden size followed by one block whose
/// weights both modalities share.
#[derive(Clone, Debug)]
pub struct SharedEncoder {
    pub config: EncoderConfig,
    pub proj_video: Linear,
    pub proj_query: Linear,
    block: EncoderBlock,
}

impl SharedEncoder {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, config: EncoderConfig) -> Result<Self> {
        let proj_video = Linear::new(store, rng, "encoder.proj_video", config.d_video, config.hidden);
        let proj_query = Linear::new(store, rng, "encoder.proj_query", config.d_query, config.hidden);
        let block = EncoderBlock::new(store, rng, &config)?;
        Ok(Self {
            config,
            proj_video,
            proj_query,
            block,
        })
    }

    /// Encodes one modality: projection, masking, then the shared block.
    pub fn encode_one(&self, cx: &mut Ctx, raw: Var, mask: &[bool], proj: &Linear) -> Result<Var> {
        let x = proj.forward(cx, raw)?;
        let x = self.block.forward(cx, x, mask)?;
        cx.dropout(x)
    }

    /// Returns `(Ṽ, Q̃)`, shapes `n×d` and `m×d`.
    pub fn encode(
        &self,
        cx: &mut Ctx,
        video: Var,
        video_mask: &[bool],
        query: Var,
        query_mask: &[bool],
    ) -> Result<(Var, Var)> {
        let (vs, qs) = (cx.g.value(video).shape().to_vec(), cx.g.value(query).shape().to_vec());
        if vs.len() != 2 || vs[1] != self.config.d_video || vs[0] != video_mask.len() {
            return Err(MrtError::Config(format!(
                "video features {vs:?} do not match d_video={} with {} mask entries",
                self.config.d_video,
                video_mask.len()
            )));
        }
        if qs.len() != 2 || qs[1] != self.config.d_query || qs[0] != query_mask.len() {
            return Err(MrtError::Config(format!(
                "query embedding {qs:?} does not match d_query={} with {} mask entries",
                self.config.d_query,
                query_mask.len()
            )));
        }
        let v = self.encode_one(cx, video, video_mask, &self.proj_video)?;
        let q = self.encode_one(cx, query, query_mask, &self.proj_query)?;
        Ok((v, q))
    }
}

/// Trilinear similarity plus the context-query fusion layer.
#[derive(Clone, Debug)]
pub struct VideoQueryAttention {
    pub w_video: ParamId,
    pub w_query: ParamId,
    pub w_joint: ParamId,
    pub ffn: Linear,
}

impl VideoQueryAttention {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, d: usize) -> Self {
        Self {
            w_video: store.add("attention.w_video", uniform_init(rng, &[d, 1], 3 * d)),
            w_query: store.add("attention.w_query", uniform_init(rng, &[d, 1], 3 * d)),
            w_joint: store.add("attention.w_joint", uniform_init(rng, &[1, d], 3 * d)),
            ffn: Linear::new(store, rng, "attention.ffn", 4 * d, d),
        }
    }

    /// `S[i][j] = w·[v_i; q_j; v_i⊙q_j]`, shape `n×m`.
    pub fn similarity(&self, cx: &mut Ctx, video: Var, query: Var) -> Result<Var> {
        let n = cx.g.value(video).rows();
        let m = cx.g.value(query).rows();
        let (dv, dq) = (cx.g.value(video).cols(), cx.g.value(query).cols());
        if dv != dq {
            return Err(MrtError::dim("similarity", &[n, dv], &[m, dq]));
        }
        let from_video = cx.g.matmul(video, cx.p(self.w_video))?;
        let from_query = cx.g.matmul(query, cx.p(self.w_query))?;
        let from_query = cx.g.transpose(from_query)?;
        let weighted = cx.g.mul_broadcast(video, cx.p(self.w_joint))?;
        let qt = cx.g.transpose(query)?;
        let joint = cx.g.matmul(weighted, qt)?;
        let s = cx.g.add_broadcast(joint, from_video)?;
        cx.g.add_broadcast(s, from_query)
    }

    /// Row- and column-normalised attention maps `(S_r, S_c)` with padding masked.
    pub fn normalize(
        &self,
        cx: &mut Ctx,
        s: Var,
        video_mask: &[bool],
        query_mask: &[bool],
    ) -> Result<(Var, Var)> {
        let qb = cx.g.constant(mask_bias_row(query_mask));
        let vb = mask_bias_row(video_mask).reshape(&[video_mask.len(), 1])?;
        let vb = cx.g.constant(vb);
        let rows = cx.g.add_broadcast(s, qb)?;
        let s_r = cx.g.softmax(rows, 1)?;
        let cols = cx.g.add_broadcast(s, vb)?;
        let s_c = cx.g.softmax(cols, 0)?;
        Ok((s_r, s_c))
    }

    /// Returns `(A, B)`: `A = S_r·Q̃` and `B = S_r·S_cᵀ·Ṽ`.
    pub fn attend(&self, cx: &mut Ctx, video: Var, query: Var, s_r: Var, s_c: Var) -> Result<(Var, Var)> {
        let a = cx.g.matmul(s_r, query)?;
        let s_ct = cx.g.transpose(s_c)?;
        let q_ctx = cx.g.matmul(s_ct, video)?;
        let b = cx.g.matmul(s_r, q_ctx)?;
        Ok((a, b))
    }

    /// `V^q = FFN([Ṽ; A; Ṽ⊙A; Ṽ⊙B])`, zeroed at padded clips.
    pub fn fuse(
        &self,
        cx: &mut Ctx,
        video: Var,
        query: Var,
        s: Var,
        video_mask: &[bool],
        query_mask: &[bool],
    ) -> Result<Var> {
        let (s_r, s_c) = self.normalize(cx, s, video_mask, query_mask)?;
        let (a, b) = self.attend(cx, video, query, s_r, s_c)?;
        let va = cx.g.mul(video, a)?;
        let vb = cx.g.mul(video, b)?;
        let cat = cx.g.concat_cols(&[video, a, va, vb])?;
        let fused = self.ffn.forward(cx, cat)?;
        let d = cx.g.value(fused).cols();
        let keep = cx.g.constant(mask_rows(video_mask, d));
        cx.g.mul(fused, keep)
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;

    use super::*;

    fn setup(d: usize) -> (ParamStore, SharedEncoder, VideoQueryAttention) {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let enc = SharedEncoder::new(
            &mut store,
            &mut rng,
            EncoderConfig {
                d_video: 6,
                d_query: 5,
                hidden: d,
                kernel: 7,
                heads: 2,
                max_len: 16,
            },
        )
        .unwrap();
        let att = VideoQueryAttention::new(&mut store, &mut rng, d);
        (store, enc, att)
    }

    #[test]
    fn encode_preserves_lengths() {
        let (store, enc, _) = setup(8);
        let mut cx = Ctx::new(&store, false);
        let v = cx.g.constant(Tensor::full(&[12, 6], 0.1));
        let q = cx.g.constant(Tensor::full(&[3, 5], 0.2));
        let (ve, qe) = enc.encode(&mut cx, v, &[true; 12], q, &[true; 3]).unwrap();
        assert_eq!(cx.g.value(ve).shape(), &[12, 8]);
        assert_eq!(cx.g.value(qe).shape(), &[3, 8]);
    }

    #[test]
    fn encode_rejects_wrong_feature_dim() {
        let (store, enc, _) = setup(8);
        let mut cx = Ctx::new(&store, false);
        let v = cx.g.constant(Tensor::zeros(&[12, 7]));
        let q = cx.g.constant(Tensor::zeros(&[3, 5]));
        assert!(matches!(
            enc.encode(&mut cx, v, &[true; 12], q, &[true; 3]),
            Err(MrtError::Config(_))
        ));
    }

    #[test]
    fn padded_rows_are_zero() {
        let (store, enc, att) = setup(8);
        let mut cx = Ctx::new(&store, false);
        let mask: Vec<bool> = (0..12).map(|i| i < 9).collect();
        let v = cx.g.constant(Tensor::full(&[12, 6], 0.5));
        let q = cx.g.constant(Tensor::full(&[2, 5], -0.3));
        let (ve, qe) = enc.encode(&mut cx, v, &mask, q, &[true; 2]).unwrap();
        let s = att.similarity(&mut cx, ve, qe).unwrap();
        let fused = att.fuse(&mut cx, ve, qe, s, &mask, &[true; 2]).unwrap();
        for t in [cx.g.value(ve), cx.g.value(fused)] {
            for i in 9..12 {
                assert!(t.row(i).iter().all(|&x| x == 0.0));
            }
            assert!(t.row(0).iter().any(|&x| x != 0.0));
        }
    }

    #[test]
    fn trilinear_hand_case() {
        let mut store = ParamStore::new();
        let att = VideoQueryAttention {
            w_video: store.add("wv", Tensor::full(&[2, 1], 1.0)),
            w_query: store.add("wq", Tensor::full(&[2, 1], 1.0)),
            w_joint: store.add("wj", Tensor::full(&[1, 2], 1.0)),
            ffn: Linear {
                w: store.add("f.w", Tensor::zeros(&[8, 2])),
                b: store.add("f.b", Tensor::zeros(&[1, 2])),
            },
        };
        let vr = vec![vec![1.0, 2.0], vec![-1.0, 0.5]];
        let qr = vec![vec![3.0, -2.0], vec![0.0, 4.0]];
        let mut cx = Ctx::new(&store, false);
        let v = cx.g.constant(Tensor::from_rows(&vr).unwrap());
        let q = cx.g.constant(Tensor::from_rows(&qr).unwrap());
        let s = att.similarity(&mut cx, v, q).unwrap();
        let st = cx.g.value(s);
        assert_eq!(st.shape(), &[2, 2]);
        for i in 0..2 {
            for j in 0..2 {
                let expected: f64 = vr[i].iter().sum::<f64>()
                    + qr[j].iter().sum::<f64>()
                    + vr[i].iter().zip(&qr[j]).map(|(a, b)| a * b).sum::<f64>();
                assert!((st.at(i, j) - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_word_query_broadcasts() {
        let (store, _, att) = setup(4);
        let mut cx = Ctx::new(&store, false);
        let v = cx.g.constant(Tensor::full(&[5, 4], 0.7));
        let q = cx.g.constant(Tensor::new(vec![1, 4], vec![1.0, -1.0, 2.0, 0.5]).unwrap());
        let s = att.similarity(&mut cx, v, q).unwrap();
        let (s_r, s_c) = att.normalize(&mut cx, s, &[true; 5], &[true]).unwrap();
        let (a, _) = att.attend(&mut cx, v, q, s_r, s_c).unwrap();
        for i in 0..5 {
            assert_eq!(cx.g.value(a).row(i), &[1.0, -1.0, 2.0, 0.5]);
        }
    }

    #[test]
    fn uniform_scores_average_query_rows() {
        let (store, _, att) = setup(4);
        let mut cx = Ctx::new(&store, false);
        let v = cx.g.constant(Tensor::full(&[4, 4], 1.0));
        let qt = Tensor::from_rows(&[vec![1.0, 2.0, 3.0, 0.0], vec![3.0, 0.0, -3.0, 2.0]]).unwrap();
        let q = cx.g.constant(qt);
        let s = cx.g.constant(Tensor::full(&[4, 2], 0.25));
        let (s_r, s_c) = att.normalize(&mut cx, s, &[true; 4], &[true; 2]).unwrap();
        for r in 0..4 {
            for &p in cx.g.value(s_r).row(r) {
                assert!((p - 0.5).abs() < 1e-12);
            }
        }
        let (a, _) = att.attend(&mut cx, v, q, s_r, s_c).unwrap();
        for i in 0..4 {
            for (got, want) in cx.g.value(a).row(i).iter().zip([2.0, 1.0, 0.0, 1.0]) {
                assert!((got - want).abs() < 1e-12);
            }
        }
    }
}
