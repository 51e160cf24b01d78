//! End-to-end train / eval / predict on small synthetic corpora.

use std::path::Path;

use mrtnet_core::checkpoint::Checkpoint;
use mrtnet_core::config::Config;
use mrtnet_core::data::{load_annotations, SynthSpec};
use mrtnet_core::metrics::interval_iou;
use mrtnet_core::train::{
    cmd_eval, cmd_predict, cmd_synth, cmd_train, feature_path, CHECKPOINT_FILE, REPORT_JSON_FILE, REPORT_TEXT_FILE,
    TRAIN_LOG_FILE,
};

fn corpus(dir: &Path, noise_std: f64) {
    let spec = SynthSpec {
        num_samples: 32,
        n: 64,
        d_v: 64,
        noise_std,
        seed: 7,
        ..SynthSpec::default()
    };
    cmd_synth(&spec, 0, dir).unwrap();
}

fn config(data: &Path, out: &Path, extra: &[(&str, &str)]) -> Config {
    let mut c = Config::default();
    for (k, v) in [("d", "32"), ("lr", "0.001"), ("batch_size", "8"), ("d_q", "64"), ("seed", "7")] {
        c.set(k, v).unwrap();
    }
    for (k, v) in extra {
        c.set(k, v).unwrap();
    }
    c.annotations = Some(data.join("train.jsonl"));
    c.features_dir = Some(data.join("features"));
    c.out_dir = Some(out.to_path_buf());
    c
}

#[test]
fn noiseless_checkpoint_round_trip_and_predict() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    corpus(&data, 0.0);
    let cfg = config(&data, &dir.path().join("run"), &[("epochs", "40")]);
    let outcome = cmd_train(&cfg).unwrap();
    assert!(outcome.checkpoint.best_metric >= 80.0, "{}", outcome.checkpoint.best_metric);
    let ck_path = dir.path().join("run").join(CHECKPOINT_FILE);
    assert!(dir.path().join("run").join(TRAIN_LOG_FILE).exists());
    assert_eq!(Checkpoint::load(&ck_path).unwrap(), outcome.checkpoint);

    // eval of the saved checkpoint reproduces the in-memory best metric
    let first = cmd_eval(&cfg, &ck_path).unwrap();
    assert_eq!(first.report.miou, outcome.checkpoint.best_metric);
    let json = std::fs::read(dir.path().join("run").join(REPORT_JSON_FILE)).unwrap();
    let text = std::fs::read(dir.path().join("run").join(REPORT_TEXT_FILE)).unwrap();
    let second = cmd_eval(&cfg, &ck_path).unwrap();
    assert_eq!(first.report, second.report);
    assert_eq!(json, std::fs::read(dir.path().join("run").join(REPORT_JSON_FILE)).unwrap());
    assert_eq!(text, std::fs::read(dir.path().join("run").join(REPORT_TEXT_FILE)).unwrap());

    // report equals an independent recomputation from the per-sample spans
    let ious: Vec<f64> = first
        .result
        .per_sample
        .iter()
        .map(|s| {
            let inter = (s.pred.1.min(s.gt.1) - s.pred.0.max(s.gt.0)).max(0.0);
            let union = s.pred.1.max(s.gt.1) - s.pred.0.min(s.gt.0);
            if union > 0.0 { inter / union } else { 1.0 }
        })
        .collect();
    let pct = |mu: f64| 100.0 * ious.iter().filter(|&&x| x > mu).count() as f64 / ious.len() as f64;
    assert_eq!(first.report.r1_iou_03, pct(0.3));
    assert_eq!(first.report.r1_iou_05, pct(0.5));
    assert_eq!(first.report.r1_iou_07, pct(0.7));
    assert_eq!(first.report.miou, 100.0 * ious.iter().sum::<f64>() / ious.len() as f64);

    // noiseless sample through the converged checkpoint
    let anns = load_annotations(&data.join("train.jsonl")).unwrap();
    let mut hits = 0;
    for a in &anns {
        let p = cmd_predict(
            &cfg,
            &ck_path,
            &feature_path(&data.join("features"), &a.video_id),
            &a.query,
            a.duration_sec,
        )
        .unwrap();
        assert!(p.start <= p.end);
        assert!(p.prob > 0.0 && p.prob <= 1.0);
        if interval_iou(p.start, p.end, a.start_sec, a.end_sec) > 0.9 {
            hits += 1;
        }
    }
    assert!(hits * 10 >= anns.len() * 9, "{hits}/{} predictions with IoU > 0.9", anns.len());
}

#[test]
fn boundary_ce_only_still_converges() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    corpus(&data, 0.0);
    let cfg = config(&data, &dir.path().join("run"), &[("epochs", "40"), ("alphas", "0,0,0")]);
    let outcome = cmd_train(&cfg).unwrap();
    assert!(outcome.log.iter().all(|l| l.loss.total == l.loss.boundary_ce));
    assert!(outcome.checkpoint.best_metric >= 80.0, "{}", outcome.checkpoint.best_metric);
}

#[test]
fn moving_average_loss_decreases_after_warmup() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    corpus(&data, 0.05);
    let cfg = config(&data, &dir.path().join("run"), &[("epochs", "60"), ("early_stop_patience", "1000")]);
    let outcome = cmd_train(&cfg).unwrap();
    let losses: Vec<f64> = outcome.log.iter().map(|l| l.loss.total).collect();
    let ma: Vec<f64> = losses.windows(5).map(|w| w.iter().sum::<f64>() / 5.0).collect();
    // ma[i] averages epochs i+1..=i+5
    for i in 10..ma.len() {
        assert!(ma[i] <= ma[i - 1], "moving average rose at epoch {}: {} -> {}", i + 5, ma[i - 1], ma[i]);
    }
}

#[test]
fn mismatched_config_lists_offending_tensors() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    corpus(&data, 0.05);
    let cfg = config(&data, &dir.path().join("run"), &[("epochs", "1")]);
    cmd_train(&cfg).unwrap();
    let ck = dir.path().join("run").join(CHECKPOINT_FILE);
    let mut other = cfg.clone();
    other.set("d", "16").unwrap();
    let err = cmd_eval(&other, &ck).unwrap_err().to_string();
    assert!(err.contains("encoder.proj_video.w"), "{err}");
    assert!(err.contains("predictor.start_out.w"), "{err}");
}
