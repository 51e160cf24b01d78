//! Finite-difference checks of every composite forward pass on a small
//! instance: `n = 8` clips, hidden size 8, two heads, kernel 7.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diffcore::{check_gradients, check_param_gradients, GradCheck, Graph, Tensor, Var};
use crate::encoders::{EncoderConfig, SharedEncoder, VideoQueryAttention};
use crate::error::Result;
use crate::losses::{ce_boundary_var, ce_map_var, iou_loss_var, ssim_loss_var, LossConfig};
use crate::model::{ModelConfig, MrtNet};
use crate::mrt::{groundtruth_pyramid, ClipSpan, MultiResolutionTemporal, TemporalMap};
use crate::nn::{Ctx, ParamStore};
use crate::predictor::BoundaryPredictor;

const N: usize = 8;
const M: usize = 3;
const D: usize = 8;
const D_V: usize = 6;
const D_Q: usize = 5;
const HEADS: usize = 2;
const KERNEL: usize = 7;

#[derive(Clone, Debug)]
pub struct SuiteEntry {
    pub name: &'static str,
    pub check: GradCheck,
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let len = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..len).map(|_| rng.random_range(lo..hi)).collect()).expect("shape matches")
}

/// `sum(x ⊙ w)` for a fixed weight, so every output entry matters.
fn weighted_sum(g: &mut Graph, x: Var, w: &Tensor) -> Result<Var> {
    let w = g.constant(w.clone());
    let p = g.mul(x, w)?;
    Ok(g.sum(p))
}

fn small_loss_config() -> LossConfig {
    LossConfig {
        ssim_window: 2,
        ..LossConfig::default()
    }
}

/// Runs the whole suite. `step` is the central-difference step, `tol` the
/// bound on the relative error.
pub fn gradient_suite(step: f64, tol: f64) -> Result<Vec<SuiteEntry>> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut out = Vec::new();
    let vmask = [true; N];
    let qmask = [true; M];
    let span = ClipSpan::new(2, 5)?;
    let gts = groundtruth_pyramid(span, N)?;

    // encoder + fusion
    {
        let mut store = ParamStore::new();
        let enc = SharedEncoder::new(
            &mut store,
            &mut rng,
            EncoderConfig {
                d_video: D_V,
                d_query: D_Q,
                hidden: D,
                kernel: KERNEL,
                heads: HEADS,
                max_len: N,
            },
        )?;
        let att = VideoQueryAttention::new(&mut store, &mut rng, D);
        let v = random(&mut rng, &[N, D_V], -1.0, 1.0);
        let q = random(&mut rng, &[M, D_Q], -1.0, 1.0);
        let w = random(&mut rng, &[N, D], -1.0, 1.0);
        let check = check_param_gradients(
            &store,
            |cx: &mut Ctx| {
                let v = cx.g.constant(v.clone());
                let q = cx.g.constant(q.clone());
                let (ve, qe) = enc.encode(cx, v, &vmask, q, &qmask)?;
                let s = att.similarity(cx, ve, qe)?;
                let fused = att.fuse(cx, ve, qe, s, &vmask, &qmask)?;
                weighted_sum(&mut cx.g, fused, &w)
            },
            step,
            tol,
        )?;
        out.push(SuiteEntry {
            name: "encoder_fusion",
            check,
        });
    }

    // multi-resolution temporal module
    {
        let mut store = ParamStore::new();
        let mrt = MultiResolutionTemporal::new(&mut store, &mut rng, D, KERNEL)?;
        let fused = random(&mut rng, &[N, D], -1.0, 1.0);
        let query = random(&mut rng, &[M, D], -1.0, 1.0);
        let w = random(&mut rng, &[N, D], -1.0, 1.0);
        let cfg = small_loss_config();
        let check = check_param_gradients(
            &store,
            |cx: &mut Ctx| {
                let f = cx.g.constant(fused.clone());
                let q = cx.g.constant(query.clone());
                let o = mrt.forward(cx, f, q, &qmask)?;
                let mut total = weighted_sum(&mut cx.g, o.dec1, &w)?;
                for (k, gt) in gts.iter().enumerate() {
                    let l = ce_map_var(&mut cx.g, o.maps[k], gt)?;
                    total = cx.g.add(total, l)?;
                    let l = ssim_loss_var(&mut cx.g, o.maps[k], gt, &cfg)?;
                    total = cx.g.add(total, l)?;
                }
                Ok(total)
            },
            step,
            tol,
        )?;
        out.push(SuiteEntry { name: "mrt", check });
    }

    // predictor
    {
        let mut store = ParamStore::new();
        let pred = BoundaryPredictor::new(&mut store, &mut rng, D);
        let feats = random(&mut rng, &[N, D], -1.0, 1.0);
        let check = check_param_gradients(
            &store,
            |cx: &mut Ctx| {
                let f = cx.g.constant(feats.clone());
                let b = pred.forward(cx, f, &vmask)?;
                Ok(ce_boundary_var(&mut cx.g, b.p_start, b.p_end, span)?.0)
            },
            step,
            tol,
        )?;
        out.push(SuiteEntry {
            name: "predictor",
            check,
        });
    }

    // individual losses with respect to their inputs
    let gt = &gts[2];
    let map_point = random(&mut rng, &[N], 0.05, 0.95);
    let cfg = small_loss_config();
    let logits = random(&mut rng, &[2, N], -2.0, 2.0);
    out.push(SuiteEntry {
        name: "loss_ce_boundary",
        check: check_gradients(
            |g, x| {
                let p = g.softmax(x, 1)?;
                let ps = g.slice_rows(p, 0, 1)?;
                let pe = g.slice_rows(p, 1, 1)?;
                let ps = g.reshape(ps, &[N])?;
                let pe = g.reshape(pe, &[N])?;
                Ok(ce_boundary_var(g, ps, pe, span)?.0)
            },
            &logits,
            step,
            tol,
        )?,
    });
    let map_losses: [(&'static str, fn(&mut Graph, Var, &TemporalMap, &LossConfig) -> Result<Var>); 3] = [
        ("loss_ce_map", |g, x, gt, _| ce_map_var(g, x, gt)),
        ("loss_ssim", ssim_loss_var),
        ("loss_iou", |g, x, gt, _| iou_loss_var(g, x, gt)),
    ];
    for (name, f) in map_losses {
        out.push(SuiteEntry {
            name,
            check: check_gradients(|g, x| f(g, x, gt, &cfg), &map_point, step, tol)?,
        });
    }

    // full model, one sample
    {
        let config = ModelConfig {
            d_video: D_V,
            d_query: D_Q,
            hidden: D,
            kernel: KERNEL,
            heads: HEADS,
            n_model: N,
            max_query_len: M,
        };
        let (net, store) = MrtNet::new(config, 11)?;
        let v = random(&mut rng, &[N, D_V], -1.0, 1.0);
        let q = random(&mut rng, &[M, D_Q], -1.0, 1.0);
        let check = check_param_gradients(
            &store,
            |cx: &mut Ctx| {
                let o = net.forward(cx, &v, &vmask, &q)?;
                Ok(net.loss(cx, &o, &gts, span, &cfg)?.total)
            },
            step,
            tol,
        )?;
        out.push(SuiteEntry {
            name: "full_model",
            check,
        });
    }
    Ok(out)
}
