//! Temporal IoU, top-1 recall at IoU thresholds, and mean IoU.

use serde::{Deserialize, Serialize};

use crate::error::{MrtError, Result};
use crate::predictor::TemporalSpan;

/// Thresholds reported by default.
pub const DEFAULT_THRESHOLDS: [f64; 3] = [0.3, 0.5, 0.7];

/// IoU of two closed intervals on the real line.
///
/// A zero-length interval only matches the identical point.
pub fn interval_iou(a_start: f64, a_end: f64, b_start: f64, b_end: f64) -> f64 {
    let union = a_end.max(b_end) - a_start.min(b_start);
    if union <= 0.0 {
        return 1.0;
    }
    let inter = (a_end.min(b_end) - a_start.max(b_start)).max(0.0);
    inter / union
}

pub fn temporal_iou(a: &TemporalSpan, b: &TemporalSpan) -> f64 {
    interval_iou(a.start_sec, a.end_sec, b.start_sec, b.end_sec)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleEval {
    pub pred: (f64, f64),
    pub gt: (f64, f64),
    pub iou: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    /// `(threshold, percentage of samples with IoU > threshold)`.
    pub r1_iou: Vec<(f64, f64)>,
    pub miou: f64,
    pub per_sample: Vec<SampleEval>,
}

impl EvalResult {
    pub fn recall_at(&self, threshold: f64) -> Option<f64> {
        self.r1_iou
            .iter()
            .find(|(t, _)| (t - threshold).abs() < 1e-12)
            .map(|&(_, r)| r)
    }

    /// Report with the standard thresholds.
    pub fn report(&self) -> Result<EvalReport> {
        let at = |t: f64| {
            self.recall_at(t)
                .ok_or_else(|| MrtError::Contract(format!("no recall computed at IoU {t}")))
        };
        Ok(EvalReport {
            r1_iou_03: at(0.3)?,
            r1_iou_05: at(0.5)?,
            r1_iou_07: at(0.7)?,
            miou: self.miou,
            num_samples: self.per_sample.len(),
        })
    }
}

/// The machine-readable evaluation report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    #[serde(rename = "r1_iou_0.3")]
    pub r1_iou_03: f64,
    #[serde(rename = "r1_iou_0.5")]
    pub r1_iou_05: f64,
    #[serde(rename = "r1_iou_0.7")]
    pub r1_iou_07: f64,
    pub miou: f64,
    pub num_samples: usize,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn to_text(&self) -> String {
        format!(
            "samples        {}\nR@1, IoU=0.3   {:.2}\nR@1, IoU=0.5   {:.2}\nR@1, IoU=0.7   {:.2}\nmIoU           {:.2}\n",
            self.num_samples, self.r1_iou_03, self.r1_iou_05, self.r1_iou_07, self.miou
        )
    }
}

/// `R@1, IoU>μ` for each threshold and `mIoU`, all as percentages.
pub fn evaluate(preds: &[TemporalSpan], gts: &[TemporalSpan], thresholds: &[f64]) -> Result<EvalResult> {
    if preds.is_empty() || preds.len() != gts.len() {
        return Err(MrtError::Contract(format!(
            "evaluate needs equally long non-empty lists, got {} predictions and {} ground truths",
            preds.len(),
            gts.len()
        )));
    }
    let per_sample: Vec<SampleEval> = preds
        .iter()
        .zip(gts)
        .map(|(p, g)| SampleEval {
            pred: (p.start_sec, p.end_sec),
            gt: (g.start_sec, g.end_sec),
            iou: temporal_iou(p, g),
        })
        .collect();
    let total = per_sample.len() as f64;
    let r1_iou = thresholds
        .iter()
        .map(|&mu| {
            let hits = per_sample.iter().filter(|s| s.iou > mu).count();
            (mu, 100.0 * hits as f64 / total)
        })
        .collect();
    let miou = 100.0 * per_sample.iter().map(|s| s.iou).sum::<f64>() / total;
    Ok(EvalResult {
        r1_iou,
        miou,
        per_sample,
    })
}
