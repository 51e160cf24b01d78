//! Turns an annotation plus raw clip features into a fixed-length training
//! sample.

use crate::diffcore::Tensor;
use crate::error::{MrtError, Result};
use crate::mrt::{groundtruth_pyramid, ClipSpan, TemporalMap, RESOLUTIONS};
use crate::predictor::{index_to_time, time_to_index, TemporalSpan};

use super::annotation::Annotation;
use super::embeddings::WordEmbeddings;

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub video_id: String,
    /// `n_model×d_v`, zero rows past `n_valid`.
    pub video: Tensor,
    pub mask: Vec<bool>,
    pub n_valid: usize,
    pub query: Tensor,
    pub tokens: Vec<String>,
    /// Ground-truth clip indices on the `n_valid` grid.
    pub label: ClipSpan,
    pub gt_maps: [TemporalMap; RESOLUTIONS],
    pub duration_sec: f64,
    pub gt_start_sec: f64,
    pub gt_end_sec: f64,
}

impl Sample {
    pub fn gt_span(&self) -> TemporalSpan {
        TemporalSpan {
            start_idx: self.label.start,
            end_idx: self.label.end,
            start_sec: self.gt_start_sec,
            end_sec: self.gt_end_sec,
            duration_sec: self.duration_sec,
        }
    }

    /// Span in seconds for predicted clip indices.
    pub fn span_from_indices(&self, start: usize, end: usize) -> Result<TemporalSpan> {
        TemporalSpan::from_indices(start, end, self.n_valid, self.duration_sec)
    }
}

/// Nearest-index resampling when `n_raw >= n_model`, zero padding otherwise.
/// Returns the resized features and the number of valid rows.
pub fn resample(features: &Tensor, n_model: usize) -> Result<(Tensor, usize)> {
    if features.ndim() != 2 || features.rows() == 0 {
        return Err(MrtError::dim("resample", features.shape(), &[n_model, 0]));
    }
    let (n_raw, d) = (features.rows(), features.cols());
    let mut data = vec![0.0; n_model * d];
    let n_valid = n_raw.min(n_model);
    for i in 0..n_valid {
        let src = if n_raw > n_model {
            ((i * n_raw) as f64 / n_model as f64).round() as usize
        } else {
            i
        }
        .min(n_raw - 1);
        data[i * d..(i + 1) * d].copy_from_slice(features.row(src));
    }
    Ok((Tensor::new(vec![n_model, d], data)?, n_valid))
}

pub fn prepare(
    annotation: &Annotation,
    features: &Tensor,
    n_model: usize,
    embeddings: &WordEmbeddings,
    max_query_len: usize,
) -> Result<Sample> {
    annotation.validate().map_err(MrtError::Contract)?;
    let (video, n_valid) = resample(features, n_model)?;
    let t = annotation.duration_sec;
    let start = time_to_index(annotation.start_sec, t, n_valid)?;
    let mut end = time_to_index(annotation.end_sec, t, n_valid)?;
    if end < start {
        log::warn!(
            "{}: span ({}, {}) collapsed to clips ({start}, {end}); clamping end",
            annotation.video_id,
            annotation.start_sec,
            annotation.end_sec
        );
        end = start;
    }
    let label = ClipSpan::new(start, end)?;
    let gt_maps = groundtruth_pyramid(label, n_model)?;
    let query = embeddings.embed(&annotation.query, max_query_len)?;
    Ok(Sample {
        video_id: annotation.video_id.clone(),
        video,
        mask: (0..n_model).map(|i| i < n_valid).collect(),
        n_valid,
        query,
        tokens: annotation.query.clone(),
        label,
        gt_maps,
        duration_sec: t,
        gt_start_sec: annotation.start_sec,
        gt_end_sec: annotation.end_sec,
    })
}

/// Seconds for clip `index` on the sample's grid.
pub fn clip_time(sample: &Sample, index: usize) -> f64 {
    index_to_time(index, sample.n_valid, sample.duration_sec)
}
