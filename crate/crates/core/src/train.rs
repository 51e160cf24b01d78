//! Training loop and the train / eval / predict / synth commands.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::Config;
use crate::data::{
    generate_synthetic, load_annotations, load_features, prepare, write_annotations, write_features,
    Annotation, Sample, SynthSpec, WordEmbeddings,
};
use crate::diffcore::Tensor;
use crate::error::{MrtError, Result};
use crate::losses::LossReport;
use crate::metrics::{evaluate, EvalReport, EvalResult, DEFAULT_THRESHOLDS};
use crate::model::MrtNet;
use crate::nn::{Ctx, ParamStore};
use crate::optim::Adam;
use crate::predictor::{joint_argmax, TemporalSpan};

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const TRAIN_LOG_FILE: &str = "train_log.jsonl";
pub const REPORT_JSON_FILE: &str = "report.json";
pub const REPORT_TEXT_FILE: &str = "report.txt";

/// Mean losses over one epoch plus the early-stopping metric.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: LossReport,
    /// mIoU on the validation split, or the training split without one.
    pub miou: f64,
    pub validation: bool,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub net: MrtNet,
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochLog>,
}

#[derive(Clone, Debug)]
pub struct EvalOutcome {
    pub result: EvalResult,
    pub report: EvalReport,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictOutcome {
    pub start: f64,
    pub end: f64,
    pub prob: f64,
}

pub fn load_embeddings(cfg: &Config) -> Result<WordEmbeddings> {
    match &cfg.embeddings {
        Some(p) => WordEmbeddings::load(p),
        None => Ok(WordEmbeddings::hashed(cfg.d_q)),
    }
}

/// Reads annotations and the `<video_id>.mrtf` feature files they refer to.
pub fn load_dataset(
    annotations: &Path,
    features_dir: &Path,
    cfg: &Config,
    embeddings: &WordEmbeddings,
) -> Result<Vec<Sample>> {
    let anns = load_annotations(annotations)?;
    let mut cache: HashMap<String, Tensor> = HashMap::new();
    let mut samples = Vec::with_capacity(anns.len());
    for a in &anns {
        if !cache.contains_key(&a.video_id) {
            let feats = load_features(&feature_path(features_dir, &a.video_id))?;
            cache.insert(a.video_id.clone(), feats);
        }
        samples.push(prepare(a, &cache[&a.video_id], cfg.n_model, embeddings, cfg.max_query_len)?);
    }
    check_dims(&samples)?;
    Ok(samples)
}

pub fn feature_path(dir: &Path, video_id: &str) -> PathBuf {
    dir.join(format!("{video_id}.mrtf"))
}

/// `(d_v, d_q)` shared by every sample.
fn check_dims(samples: &[Sample]) -> Result<(usize, usize)> {
    let first = samples
        .first()
        .ok_or_else(|| MrtError::Contract("dataset is empty".into()))?;
    let dims = (first.video.cols(), first.query.cols());
    if let Some(s) = samples.iter().find(|s| (s.video.cols(), s.query.cols()) != dims) {
        return Err(MrtError::Config(format!(
            "{}: feature sizes ({}, {}) differ from ({}, {})",
            s.video_id,
            s.video.cols(),
            s.query.cols(),
            dims.0,
            dims.1
        )));
    }
    Ok(dims)
}

fn required<'a>(p: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    p.as_deref()
        .ok_or_else(|| MrtError::Config(format!("{key} is not set")))
}

/// Single-sample prediction, restricted to the valid clips.
pub fn predict_sample(net: &MrtNet, store: &ParamStore, sample: &Sample) -> Result<(TemporalSpan, f64)> {
    let mut cx = Ctx::new(store, false);
    let out = net.forward(&mut cx, &sample.video, &sample.mask, &sample.query)?;
    let scores = out.boundary.scores(&cx.g);
    let n = sample.n_valid;
    let (s, e, prob) = joint_argmax(&scores.p_start[..n], &scores.p_end[..n])?;
    Ok((sample.span_from_indices(s, e)?, prob))
}

pub fn evaluate_model(net: &MrtNet, store: &ParamStore, samples: &[Sample]) -> Result<EvalResult> {
    let mut preds = Vec::with_capacity(samples.len());
    for s in samples {
        preds.push(predict_sample(net, store, s)?.0);
    }
    let gts: Vec<TemporalSpan> = samples.iter().map(Sample::gt_span).collect();
    evaluate(&preds, &gts, &DEFAULT_THRESHOLDS)
}

/// Minibatch Adam over `train`, keeping the parameters with the best
/// validation (or training) mIoU.
pub fn train(cfg: &Config, train: &[Sample], val: Option<&[Sample]>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let (d_v, d_q) = check_dims(train)?;
    if let Some(v) = val {
        if check_dims(v)? != (d_v, d_q) {
            return Err(MrtError::Config("validation feature sizes differ from training".into()));
        }
    }
    let model_cfg = cfg.model_config(d_v, d_q);
    let (net, mut store) = MrtNet::new(model_cfg.clone(), cfg.seed)?;
    let loss_cfg = cfg.loss_config();
    let mut adam = Adam::new(&store, cfg.lr);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle_rng.set_stream(1);

    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = Vec::new();
    let mut best = (f64::NEG_INFINITY, 0, store.clone());
    let mut since_best = 0;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = LossReport::default();
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let mut acc: Vec<Tensor> = store.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
            for (j, &i) in batch.iter().enumerate() {
                let sample = &train[i];
                let mut drop_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                drop_rng.set_stream(2 + ((epoch as u64) << 32) + (b * cfg.batch_size + j) as u64);
                let mut cx = Ctx::new(&store, true).with_dropout(cfg.dropout, drop_rng);
                let out = net.forward(&mut cx, &sample.video, &sample.mask, &sample.query)?;
                let vars = net.loss(&mut cx, &out, &sample.gt_maps, sample.label, &loss_cfg)?;
                let report = vars.report(&cx.g);
                if let Some(component) = report.first_non_finite() {
                    return Err(MrtError::Numerical(format!(
                        "non-finite {component} loss at epoch {epoch} on {}",
                        sample.video_id
                    )));
                }
                epoch_loss.accumulate(&report);
                let grads = cx.g.backward(vars.total)?;
                for (a, g) in acc.iter_mut().zip(cx.param_grads(&grads, &store)) {
                    a.add_assign(&g);
                }
            }
            let scale = 1.0 / batch.len() as f64;
            for a in &mut acc {
                a.data_mut().iter_mut().for_each(|v| *v *= scale);
            }
            if let Some(bad) = acc.iter().position(|a| !a.is_finite()) {
                return Err(MrtError::Numerical(format!(
                    "non-finite gradient for {} at epoch {epoch}",
                    store.name(store.ids().nth(bad).expect("index in range"))
                )));
            }
            adam.step(&mut store, &acc)?;
        }

        let epoch_loss = epoch_loss.scaled(1.0 / train.len() as f64);
        let metric = evaluate_model(&net, &store, val.unwrap_or(train))?.miou;
        log::info!(
            "epoch {epoch:>3}  loss {:.4}  boundary_ce {:.4}  maps [{:.4} {:.4} {:.4}]  {} mIoU {:.2}",
            epoch_loss.total,
            epoch_loss.boundary_ce,
            epoch_loss.per_resolution[0],
            epoch_loss.per_resolution[1],
            epoch_loss.per_resolution[2],
            if val.is_some() { "val" } else { "train" },
            metric
        );
        log.push(EpochLog {
            epoch,
            loss: epoch_loss,
            miou: metric,
            validation: val.is_some(),
        });
        if metric > best.0 {
            best = (metric, epoch, store.clone());
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.early_stop_patience {
                log::info!("early stop at epoch {epoch}; best epoch {}", best.1);
                break;
            }
        }
    }

    let (best_metric, epoch, params) = best;
    Ok(TrainOutcome {
        net,
        checkpoint: Checkpoint {
            config: cfg.clone(),
            model: model_cfg,
            params,
            epoch,
            best_metric,
        },
        log,
    })
}

/// Loads data named by the config, trains, and writes the checkpoint and
/// log into `out_dir` when set.
pub fn cmd_train(cfg: &Config) -> Result<TrainOutcome> {
    cfg.validate()?;
    let annotations = required(&cfg.annotations, "annotations")?;
    let features = required(&cfg.features_dir, "features_dir")?;
    let emb = load_embeddings(cfg)?;
    let train_set = load_dataset(annotations, features, cfg, &emb)?;
    let val_set = match &cfg.val_annotations {
        Some(p) => Some(load_dataset(p, features, cfg, &emb)?),
        None => None,
    };
    let outcome = train(cfg, &train_set, val_set.as_deref())?;
    if let Some(dir) = &cfg.out_dir {
        fs::create_dir_all(dir).map_err(|e| MrtError::io(dir, e))?;
        outcome.checkpoint.save(&dir.join(CHECKPOINT_FILE))?;
        let mut text = String::new();
        for entry in &outcome.log {
            text.push_str(&serde_json::to_string(entry)?);
            text.push('\n');
        }
        let p = dir.join(TRAIN_LOG_FILE);
        fs::write(&p, text).map_err(|e| MrtError::io(&p, e))?;
    }
    Ok(outcome)
}

/// Evaluates a checkpoint on `cfg.annotations`; writes text and JSON
/// reports into `out_dir` when set.
pub fn cmd_eval(cfg: &Config, checkpoint: &Path) -> Result<EvalOutcome> {
    cfg.validate()?;
    let ck = Checkpoint::load(checkpoint)?;
    let annotations = required(&cfg.annotations, "annotations")?;
    let features = required(&cfg.features_dir, "features_dir")?;
    let emb = load_embeddings(cfg)?;
    let samples = load_dataset(annotations, features, cfg, &emb)?;
    let (d_v, d_q) = check_dims(&samples)?;
    let (net, store) = ck.restore(&cfg.model_config(d_v, d_q))?;
    let result = evaluate_model(&net, &store, &samples)?;
    let report = result.report()?;
    if let Some(dir) = &cfg.out_dir {
        fs::create_dir_all(dir).map_err(|e| MrtError::io(dir, e))?;
        let p = dir.join(REPORT_JSON_FILE);
        fs::write(&p, report.to_json()?).map_err(|e| MrtError::io(&p, e))?;
        let p = dir.join(REPORT_TEXT_FILE);
        fs::write(&p, report.to_text()).map_err(|e| MrtError::io(&p, e))?;
    }
    Ok(EvalOutcome { result, report })
}

/// Grounds one query in one feature file of `duration` seconds.
pub fn cmd_predict(
    cfg: &Config,
    checkpoint: &Path,
    features: &Path,
    tokens: &[String],
    duration: f64,
) -> Result<PredictOutcome> {
    cfg.validate()?;
    let ck = Checkpoint::load(checkpoint)?;
    let feats = load_features(features)?;
    let emb = load_embeddings(cfg)?;
    let ann = Annotation {
        video_id: features.display().to_string(),
        duration_sec: duration,
        start_sec: 0.0,
        end_sec: 0.0,
        query: tokens.to_vec(),
    };
    let sample = prepare(&ann, &feats, cfg.n_model, &emb, cfg.max_query_len)?;
    let (net, store) = ck.restore(&cfg.model_config(sample.video.cols(), sample.query.cols()))?;
    let (span, prob) = predict_sample(&net, &store, &sample)?;
    Ok(PredictOutcome {
        start: span.start_sec,
        end: span.end_sec,
        prob,
    })
}

/// Writes `train.jsonl`, `test.jsonl` and `features/*.mrtf` under `out`.
/// The first `spec.num_samples` items form the training split and the next
/// `test_samples` the test split.
pub fn cmd_synth(spec: &SynthSpec, test_samples: usize, out: &Path) -> Result<()> {
    let full = SynthSpec {
        num_samples: spec.num_samples + test_samples,
        ..spec.clone()
    };
    let corpus = generate_synthetic(&full)?;
    let feat_dir = out.join("features");
    fs::create_dir_all(&feat_dir).map_err(|e| MrtError::io(&feat_dir, e))?;
    for item in &corpus.items {
        write_features(&feature_path(&feat_dir, &item.annotation.video_id), &item.features)?;
    }
    let anns: Vec<Annotation> = corpus.items.iter().map(|i| i.annotation.clone()).collect();
    let (train_anns, test_anns) = anns.split_at(spec.num_samples);
    write_annotations(&out.join("train.jsonl"), train_anns)?;
    write_annotations(&out.join("test.jsonl"), test_anns)?;
    let vocab = corpus.vocabulary.join("\n") + "\n";
    let p = out.join("vocabulary.txt");
    fs::write(&p, vocab).map_err(|e| MrtError::io(&p, e))
}
