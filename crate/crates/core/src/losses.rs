//! Composite training loss: boundary cross-entropy once at full resolution,
//! plus per-resolution map terms (binary cross-entropy, windowed SSIM, soft
//! IoU) weighted by `alphas`.
//!
//! Every loss is built on the autodiff graph; the plain `f64` helpers below
//! evaluate the same graph code without keeping gradients.

use serde::{Deserialize, Serialize};

use crate::diffcore::{Graph, Tensor, Var};
use crate::error::{MrtError, Result};
use crate::mrt::{ClipSpan, TemporalMap, RESOLUTIONS};
use crate::predictor::BoundaryVars;

/// Floor applied to probabilities before taking logs.
pub const PROB_CLAMP: f64 = 1e-12;

/// Which map terms contribute. Boundary CE and map CE are always on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossTerms {
    pub ssim: bool,
    pub iou: bool,
}

impl Default for LossTerms {
    fn default() -> Self {
        Self {
            ssim: true,
            iou: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Weights for the coarse-to-fine resolutions `[n/4, n/2, n]`.
    pub alphas: [f64; RESOLUTIONS],
    pub ssim_window: usize,
    pub c1: f64,
    pub c2: f64,
    pub terms: LossTerms,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alphas: [1.0; RESOLUTIONS],
            ssim_window: 8,
            c1: 0.01 * 0.01,
            c2: 0.03 * 0.03,
            terms: LossTerms::default(),
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alphas.iter().any(|&a| !(a >= 0.0)) {
            return Err(MrtError::Config(format!("alphas must be >= 0, got {:?}", self.alphas)));
        }
        if self.ssim_window < 2 {
            return Err(MrtError::Config(format!(
                "ssim_window must be >= 2, got {}",
                self.ssim_window
            )));
        }
        if !(self.c1 > 0.0 && self.c2 > 0.0) {
            return Err(MrtError::Config(format!(
                "SSIM constants must be positive, got C1={} C2={}",
                self.c1, self.c2
            )));
        }
        Ok(())
    }
}

/// Map terms at one resolution.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MapLosses {
    pub ce: f64,
    pub ssim: f64,
    pub iou: f64,
}

impl MapLosses {
    pub fn sum(&self) -> f64 {
        self.ce + self.ssim + self.iou
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    /// `l(k)` per resolution, coarse to fine, before weighting.
    pub per_resolution: [f64; RESOLUTIONS],
    pub components: [MapLosses; RESOLUTIONS],
    pub boundary_ce: f64,
    /// A label probability fell below [`PROB_CLAMP`].
    pub clamped: bool,
}

impl LossReport {
    /// Name of the first non-finite component, if any.
    pub fn first_non_finite(&self) -> Option<String> {
        if !self.boundary_ce.is_finite() {
            return Some("boundary_ce".into());
        }
        for (k, c) in self.components.iter().enumerate() {
            for (name, v) in [("ce", c.ce), ("ssim", c.ssim), ("iou", c.iou)] {
                if !v.is_finite() {
                    return Some(format!("resolution {k} {name}"));
                }
            }
        }
        (!self.total.is_finite()).then(|| "total".into())
    }

    /// Componentwise sum, for epoch averages.
    pub fn accumulate(&mut self, other: &LossReport) {
        self.total += other.total;
        self.boundary_ce += other.boundary_ce;
        for k in 0..RESOLUTIONS {
            self.per_resolution[k] += other.per_resolution[k];
            self.components[k].ce += other.components[k].ce;
            self.components[k].ssim += other.components[k].ssim;
            self.components[k].iou += other.components[k].iou;
        }
        self.clamped |= other.clamped;
    }

    pub fn scaled(&self, factor: f64) -> LossReport {
        let mut out = self.clone();
        out.total *= factor;
        out.boundary_ce *= factor;
        for k in 0..RESOLUTIONS {
            out.per_resolution[k] *= factor;
            out.components[k].ce *= factor;
            out.components[k].ssim *= factor;
            out.components[k].iou *= factor;
        }
        out
    }
}

fn check_same_len(op: &'static str, g: &Graph, s: Var, gt: &TemporalMap) -> Result<()> {
    let t = g.value(s);
    if t.ndim() != 1 || t.len() != gt.len() {
        return Err(MrtError::Contract(format!(
            "{op}: prediction {:?} vs ground truth of length {}",
            t.shape(),
            gt.len()
        )));
    }
    Ok(())
}

/// `½[-log P_s[Y_s] - log P_e[Y_e]]`. Returns the loss and whether a clamp fired.
pub fn ce_boundary_var(g: &mut Graph, p_start: Var, p_end: Var, label: ClipSpan) -> Result<(Var, bool)> {
    let picked_s = g.select(p_start, &[label.start])?;
    let picked_e = g.select(p_end, &[label.end])?;
    let clamped = g.value(picked_s).item() < PROB_CLAMP || g.value(picked_e).item() < PROB_CLAMP;
    let safe_s = g.clamp(picked_s, PROB_CLAMP, 1.0);
    let safe_e = g.clamp(picked_e, PROB_CLAMP, 1.0);
    let log_s = g.log(safe_s);
    let log_e = g.log(safe_e);
    let both = g.add(log_s, log_e)?;
    let both = g.sum(both);
    Ok((g.scale(both, -0.5), clamped))
}

/// Mean binary cross-entropy of a predicted map against a binary one.
pub fn ce_map_var(g: &mut Graph, s: Var, gt: &TemporalMap) -> Result<Var> {
    check_same_len("ce_map", g, s, gt)?;
    let y = g.constant(Tensor::vector(gt.scores.clone()));
    let not_y = g.constant(Tensor::vector(gt.scores.iter().map(|v| 1.0 - v).collect()));
    let p = g.clamp(s, PROB_CLAMP, 1.0 - PROB_CLAMP);
    let log_p = g.log(p);
    let q = g.scale(p, -1.0);
    let q = g.offset(q, 1.0);
    let log_q = g.log(q);
    let pos = g.mul(y, log_p)?;
    let neg = g.mul(not_y, log_q)?;
    let both = g.add(pos, neg)?;
    let mean = g.mean(both);
    Ok(g.neg(mean))
}

/// `1 - mean SSIM` over stride-1 windows of `cfg.ssim_window` clips, using
/// population statistics per window.
pub fn ssim_loss_var(g: &mut Graph, s: Var, gt: &TemporalMap, cfg: &LossConfig) -> Result<Var> {
    check_same_len("ssim_loss", g, s, gt)?;
    let n = cfg.ssim_window;
    if n > gt.len() {
        return Err(MrtError::Contract(format!(
            "SSIM window {n} longer than map of {}",
            gt.len()
        )));
    }
    let y = g.constant(Tensor::vector(gt.scores.clone()));
    let mu_x = g.window_mean(s, n)?;
    let mu_y = g.window_mean(y, n)?;
    let xx = g.mul(s, s)?;
    let yy = g.mul(y, y)?;
    let xy = g.mul(s, y)?;
    let e_xx = g.window_mean(xx, n)?;
    let e_yy = g.window_mean(yy, n)?;
    let e_xy = g.window_mean(xy, n)?;
    let mu_xx = g.mul(mu_x, mu_x)?;
    let mu_yy = g.mul(mu_y, mu_y)?;
    let mu_xy = g.mul(mu_x, mu_y)?;
    let var_x = g.sub(e_xx, mu_xx)?;
    let var_y = g.sub(e_yy, mu_yy)?;
    let cov = g.sub(e_xy, mu_xy)?;

    let lum_num = g.scale(mu_xy, 2.0);
    let lum_num = g.offset(lum_num, cfg.c1);
    let cs_num = g.scale(cov, 2.0);
    let cs_num = g.offset(cs_num, cfg.c2);
    let lum_den = g.add(mu_xx, mu_yy)?;
    let lum_den = g.offset(lum_den, cfg.c1);
    let cs_den = g.add(var_x, var_y)?;
    let cs_den = g.offset(cs_den, cfg.c2);

    let num = g.mul(lum_num, cs_num)?;
    let den = g.mul(lum_den, cs_den)?;
    let ssim = g.div(num, den)?;
    let mean = g.mean(ssim);
    let neg = g.neg(mean);
    Ok(g.offset(neg, 1.0))
}

/// `1 - Σ S·G / Σ (S + G - S·G)`; zero when both maps are empty.
pub fn iou_loss_var(g: &mut Graph, s: Var, gt: &TemporalMap) -> Result<Var> {
    check_same_len("iou_loss", g, s, gt)?;
    let y = g.constant(Tensor::vector(gt.scores.clone()));
    let inter = g.mul(s, y)?;
    let union = g.add(s, y)?;
    let union = g.sub(union, inter)?;
    let inter = g.sum(inter);
    let union = g.sum(union);
    if g.value(union).item() == 0.0 {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let ratio = g.div(inter, union)?;
    let neg = g.neg(ratio);
    Ok(g.offset(neg, 1.0))
}

/// Graph nodes of every loss term, for reporting after the pass.
#[derive(Clone, Debug)]
pub struct LossVars {
    pub total: Var,
    pub boundary_ce: Var,
    pub maps: [[Option<Var>; 3]; RESOLUTIONS],
    pub clamped: bool,
}

impl LossVars {
    pub fn report(&self, g: &Graph) -> LossReport {
        let val = |v: Option<Var>| v.map_or(0.0, |v| g.value(v).item());
        let mut components = [MapLosses::default(); RESOLUTIONS];
        let mut per_resolution = [0.0; RESOLUTIONS];
        for k in 0..RESOLUTIONS {
            let [ce, ssim, iou] = self.maps[k];
            components[k] = MapLosses {
                ce: val(ce),
                ssim: val(ssim),
                iou: val(iou),
            };
            per_resolution[k] = components[k].sum();
        }
        LossReport {
            total: g.value(self.total).item(),
            per_resolution,
            components,
            boundary_ce: g.value(self.boundary_ce).item(),
            clamped: self.clamped,
        }
    }
}

/// `CE_boundary + Σ_k α_k (CE_k + SSIM_k + IoU_k)`.
pub fn total_loss(
    g: &mut Graph,
    maps: &[Var; RESOLUTIONS],
    gts: &[TemporalMap; RESOLUTIONS],
    boundary: &BoundaryVars,
    label: ClipSpan,
    cfg: &LossConfig,
) -> Result<LossVars> {
    let (boundary_ce, clamped) = ce_boundary_var(g, boundary.p_start, boundary.p_end, label)?;
    let mut total = boundary_ce;
    let mut terms = [[None; 3]; RESOLUTIONS];
    for k in 0..RESOLUTIONS {
        let ce = ce_map_var(g, maps[k], &gts[k])?;
        let mut level = ce;
        terms[k][0] = Some(ce);
        if cfg.terms.ssim {
            let ssim = ssim_loss_var(g, maps[k], &gts[k], cfg)?;
            level = g.add(level, ssim)?;
            terms[k][1] = Some(ssim);
        }
        if cfg.terms.iou {
            let iou = iou_loss_var(g, maps[k], &gts[k])?;
            level = g.add(level, iou)?;
            terms[k][2] = Some(iou);
        }
        let weighted = g.scale(level, cfg.alphas[k]);
        total = g.add(total, weighted)?;
    }
    Ok(LossVars {
        total,
        boundary_ce,
        maps: terms,
        clamped,
    })
}

fn eval_map_loss(
    s: &TemporalMap,
    f: impl FnOnce(&mut Graph, Var) -> Result<Var>,
) -> Result<f64> {
    let mut g = Graph::new();
    let x = g.constant(Tensor::vector(s.scores.clone()));
    let y = f(&mut g, x)?;
    Ok(g.value(y).item())
}

pub fn ce_boundary(p_start: &[f64], p_end: &[f64], label: ClipSpan) -> Result<(f64, bool)> {
    let mut g = Graph::new();
    let ps = g.constant(Tensor::vector(p_start.to_vec()));
    let pe = g.constant(Tensor::vector(p_end.to_vec()));
    let (v, clamped) = ce_boundary_var(&mut g, ps, pe, label)?;
    Ok((g.value(v).item(), clamped))
}

pub fn ce_map(s: &TemporalMap, gt: &TemporalMap) -> Result<f64> {
    eval_map_loss(s, |g, x| ce_map_var(g, x, gt))
}

pub fn ssim_loss(s: &TemporalMap, gt: &TemporalMap, cfg: &LossConfig) -> Result<f64> {
    eval_map_loss(s, |g, x| ssim_loss_var(g, x, gt, cfg))
}

pub fn iou_loss(s: &TemporalMap, gt: &TemporalMap) -> Result<f64> {
    eval_map_loss(s, |g, x| iou_loss_var(g, x, gt))
}
