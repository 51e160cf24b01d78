//! Run configuration: flat `key = value` files layered over defaults, with
//! later overrides (command-line flags) winning.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{MrtError, Result};
use crate::losses::{LossConfig, LossTerms};
use crate::model::ModelConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Config {
    pub d: usize,
    pub n_model: usize,
    pub kernel_size: usize,
    pub num_heads: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub alphas: [f64; 3],
    pub ssim_window: usize,
    pub c1: f64,
    pub c2: f64,
    pub seed: u64,
    pub early_stop_patience: usize,
    pub dropout: f64,
    pub max_query_len: usize,
    pub d_q: usize,
    pub no_ssim: bool,
    pub no_iou: bool,
    /// Boundary cross-entropy only: every map weight is zeroed.
    pub ce_only: bool,
    pub annotations: Option<PathBuf>,
    pub val_annotations: Option<PathBuf>,
    pub features_dir: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            d: 128,
            n_model: 64,
            kernel_size: 7,
            num_heads: 8,
            lr: 1e-4,
            batch_size: 16,
            epochs: 100,
            alphas: [1.0; 3],
            ssim_window: 8,
            c1: 0.01 * 0.01,
            c2: 0.03 * 0.03,
            seed: 0,
            early_stop_patience: 10,
            dropout: 0.2,
            max_query_len: 32,
            d_q: 300,
            no_ssim: false,
            no_iou: false,
            ce_only: false,
            annotations: None,
            val_annotations: None,
            features_dir: None,
            embeddings: None,
            out_dir: None,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| MrtError::Config(format!("{key}: cannot parse {value:?}: {e}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(MrtError::Config(format!("{key}: expected a boolean, got {value:?}"))),
    }
}

impl Config {
    /// Sets one key. Dashes and underscores are interchangeable.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim().replace('-', "_");
        let value = value.trim();
        let k = key.as_str();
        match k {
            "d" => self.d = parse(k, value)?,
            "n_model" => self.n_model = parse(k, value)?,
            "kernel_size" => self.kernel_size = parse(k, value)?,
            "num_heads" => self.num_heads = parse(k, value)?,
            "lr" => self.lr = parse(k, value)?,
            "batch_size" => self.batch_size = parse(k, value)?,
            "epochs" => self.epochs = parse(k, value)?,
            "alphas" => {
                let parts: Vec<f64> = value
                    .split(',')
                    .map(|p| parse(k, p.trim()))
                    .collect::<Result<_>>()?;
                self.alphas = parts.try_into().map_err(|p: Vec<f64>| {
                    MrtError::Config(format!("alphas: expected 3 values, got {}", p.len()))
                })?;
            }
            "ssim_window" => self.ssim_window = parse(k, value)?,
            "c1" | "C1" => self.c1 = parse(k, value)?,
            "c2" | "C2" => self.c2 = parse(k, value)?,
            "seed" => self.seed = parse(k, value)?,
            "early_stop_patience" => self.early_stop_patience = parse(k, value)?,
            "dropout" => self.dropout = parse(k, value)?,
            "max_query_len" => self.max_query_len = parse(k, value)?,
            "d_q" => self.d_q = parse(k, value)?,
            "no_ssim" => self.no_ssim = parse_bool(k, value)?,
            "no_iou" => self.no_iou = parse_bool(k, value)?,
            "ce_only" => self.ce_only = parse_bool(k, value)?,
            "annotations" => self.annotations = Some(value.into()),
            "val_annotations" => self.val_annotations = Some(value.into()),
            "features_dir" => self.features_dir = Some(value.into()),
            "embeddings" => self.embeddings = Some(value.into()),
            "out_dir" => self.out_dir = Some(value.into()),
            _ => return Err(MrtError::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Applies every `key = value` line of `text`; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, path: &Path) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| MrtError::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: format!("expected key = value, got {line:?}"),
            })?;
            self.set(key, value).map_err(|e| MrtError::Validation {
                path: path.to_path_buf(),
                line: i + 1,
                msg: e.to_string(),
            })?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path).map_err(|e| MrtError::io(path, e))?;
        self.apply_text(&text, path)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(MrtError::Config(m));
        if self.kernel_size.is_multiple_of(2) {
            return fail(format!("kernel_size must be odd, got {}", self.kernel_size));
        }
        if self.n_model == 0 || !self.n_model.is_multiple_of(4) {
            return fail(format!("n_model must be a positive multiple of 4, got {}", self.n_model));
        }
        if self.num_heads == 0 || !self.d.is_multiple_of(self.num_heads) {
            return fail(format!(
                "d={} must be divisible by num_heads={}",
                self.d, self.num_heads
            ));
        }
        if self.ssim_window > self.n_model / 4 {
            return fail(format!(
                "ssim_window {} exceeds the coarsest map length n_model/4 = {}",
                self.ssim_window,
                self.n_model / 4
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail(format!("lr must be positive, got {}", self.lr));
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        if self.max_query_len == 0 || self.d_q == 0 {
            return fail("max_query_len and d_q must be positive".into());
        }
        self.loss_config().validate()
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            alphas: if self.ce_only { [0.0; 3] } else { self.alphas },
            ssim_window: self.ssim_window,
            c1: self.c1,
            c2: self.c2,
            terms: LossTerms {
                ssim: !self.no_ssim,
                iou: !self.no_iou,
            },
        }
    }

    pub fn model_config(&self, d_video: usize, d_query: usize) -> ModelConfig {
        ModelConfig {
            d_video,
            d_query,
            hidden: self.d,
            kernel: self.kernel_size,
            heads: self.num_heads,
            n_model: self.n_model,
            max_query_len: self.max_query_len,
        }
    }

    /// `key = value` rendering that [`Config::apply_text`] reads back.
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "d = {}\nn_model = {}\nkernel_size = {}\nnum_heads = {}\nlr = {}\nbatch_size = {}\nepochs = {}\n\
             alphas = {},{},{}\nssim_window = {}\nc1 = {}\nc2 = {}\nseed = {}\nearly_stop_patience = {}\n\
             dropout = {}\nmax_query_len = {}\nd_q = {}\nno_ssim = {}\nno_iou = {}\nce_only = {}\n",
            self.d,
            self.n_model,
            self.kernel_size,
            self.num_heads,
            self.lr,
            self.batch_size,
            self.epochs,
            self.alphas[0],
            self.alphas[1],
            self.alphas[2],
            self.ssim_window,
            self.c1,
            self.c2,
            self.seed,
            self.early_stop_patience,
            self.dropout,
            self.max_query_len,
            self.d_q,
            self.no_ssim,
            self.no_iou,
            self.ce_only,
        );
        for (key, path) in [
            ("annotations", &self.annotations),
            ("val_annotations", &self.val_annotations),
            ("features_dir", &self.features_dir),
            ("embeddings", &self.embeddings),
            ("out_dir", &self.out_dir),
        ] {
            if let Some(p) = path {
                out.push_str(&format!("{key} = {}\n", p.display()));
            }
        }
        out
    }
}
