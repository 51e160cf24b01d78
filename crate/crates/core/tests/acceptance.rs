//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::path::Path;
use std::time::{Duration, Instant};

use mrtnet_core::checkpoint::Checkpoint;
use mrtnet_core::config::Config;
use mrtnet_core::data::SynthSpec;
use mrtnet_core::diffcore::Tensor;
use mrtnet_core::gradsuite::gradient_suite;
use mrtnet_core::losses::{ce_map, iou_loss, ssim_loss, LossConfig};
use mrtnet_core::metrics::{evaluate, DEFAULT_THRESHOLDS};
use mrtnet_core::mrt::{groundtruth_map, ClipSpan, MultiResolutionTemporal, TemporalMap};
use mrtnet_core::nn::{Ctx, ParamStore};
use mrtnet_core::predictor::{index_to_time, joint_argmax, time_to_index, TemporalSpan};
use mrtnet_core::train::{cmd_eval, cmd_synth, cmd_train, CHECKPOINT_FILE, REPORT_JSON_FILE};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

// ---- 1 -------------------------------------------------------------------

fn gradient_checks() -> Outcome {
    let t = Instant::now();
    let entries = match gradient_suite(1e-4, 1e-3) {
        Ok(e) => e,
        Err(e) => return outcome(false, format!("suite error: {e}")),
    };
    let elapsed = t.elapsed();
    let worst = entries
        .iter()
        .max_by(|a, b| a.check.max_rel_error.total_cmp(&b.check.max_rel_error))
        .expect("non-empty suite");
    let all = entries.iter().all(|e| e.check.passed());
    let failed: Vec<_> = entries.iter().filter(|e| !e.check.passed()).map(|e| e.name).collect();
    outcome(
        all && elapsed < Duration::from_secs(120),
        format!(
            "{} forwards, worst {} rel err {:.2e} (< 1e-3), {:.1}s (< 120s){}",
            entries.len(),
            worst.name,
            worst.check.max_rel_error,
            elapsed.as_secs_f64(),
            if failed.is_empty() { String::new() } else { format!(", failed: {failed:?}") }
        ),
    )
}

// ---- 2 -------------------------------------------------------------------

fn hot_pluggability() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut bad = Vec::new();
    let mut cases = 0;
    for d in [16usize, 128] {
        let mut store = ParamStore::new();
        let mrt = MultiResolutionTemporal::new(&mut store, &mut rng, d, 7).expect("valid mrt");
        for n in [4usize, 8, 16, 32, 64, 128, 256] {
            cases += 1;
            let x: Vec<f64> = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let q: Vec<f64> = (0..3 * d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut cx = Ctx::new(&store, false);
            let x = cx.g.constant(Tensor::new(vec![n, d], x).unwrap());
            let q = cx.g.constant(Tensor::new(vec![3, d], q).unwrap());
            match mrt.forward(&mut cx, x, q, &[true; 3]) {
                Ok(out) if cx.g.value(out.dec1).shape() == [n, d] => {}
                Ok(out) => bad.push(format!("n={n} d={d} -> {:?}", cx.g.value(out.dec1).shape())),
                Err(e) => bad.push(format!("n={n} d={d}: {e}")),
            }
        }
    }
    outcome(bad.is_empty(), format!("{} of {cases} (n, d) shapes preserved {bad:?}", cases - bad.len()))
}

// ---- 3 -------------------------------------------------------------------

fn loss_bounds() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cfg = LossConfig::default();
    let (mut ssim_range, mut iou_range) = ((f64::MAX, f64::MIN), (f64::MAX, f64::MIN));
    let mut violations = 0;
    let mut fixed_worst: f64 = 0.0;
    for i in 0..10_000 {
        let n = rng.random_range(8..=64);
        let mut draw = |binary: bool| -> TemporalMap {
            TemporalMap::new(
                (0..n)
                    .map(|_| if binary { f64::from(rng.random_bool(0.5) as u8) } else { rng.random::<f64>() })
                    .collect(),
            )
        };
        let (s, g) = match i % 3 {
            0 => (draw(false), draw(false)),
            1 => (draw(false), draw(true)),
            _ => (draw(true), draw(true)),
        };
        let ssim = ssim_loss(&s, &g, &cfg).expect("lengths match");
        let iou = iou_loss(&s, &g).expect("lengths match");
        ssim_range = (ssim_range.0.min(ssim), ssim_range.1.max(ssim));
        iou_range = (iou_range.0.min(iou), iou_range.1.max(iou));
        if !(0.0..=2.0).contains(&ssim) || !(0.0..=1.0).contains(&iou) {
            violations += 1;
        }
        fixed_worst = fixed_worst.max(ssim_loss(&s, &s, &cfg).unwrap().abs());
        // IoU reaches zero on binary (ground-truth) maps
        let a = rng.random_range(0..n);
        let b = rng.random_range(a..n);
        let gt = groundtruth_map(ClipSpan::new(a, b).unwrap(), n).unwrap();
        fixed_worst = fixed_worst.max(iou_loss(&gt, &gt).unwrap().abs());
        fixed_worst = fixed_worst.max(ssim_loss(&gt, &gt, &cfg).unwrap().abs());
    }
    let gt = groundtruth_map(ClipSpan::new(3, 9).unwrap(), 16).unwrap();
    let ce = ce_map(&TemporalMap::new(vec![0.5; 16]), &gt).unwrap();
    let ce_err = (ce - std::f64::consts::LN_2).abs();
    outcome(
        violations == 0 && fixed_worst <= 1e-9 && ce_err <= 1e-9,
        format!(
            "10000 pairs: ssim in [{:.4}, {:.4}], iou in [{:.4}, {:.4}], {violations} out of bounds; \
             S==G worst {fixed_worst:.1e} (<= 1e-9); |ce_map(0.5) - ln2| = {ce_err:.1e} (<= 1e-9)",
            ssim_range.0, ssim_range.1, iou_range.0, iou_range.1
        ),
    )
}

// ---- 4 -------------------------------------------------------------------

fn brute_force_argmax(ps: &[f64], pe: &[f64]) -> (usize, usize) {
    let mut best = (0, 0);
    let mut best_p = f64::NEG_INFINITY;
    for s in 0..ps.len() {
        for e in s..pe.len() {
            if ps[s] * pe[e] > best_p {
                best_p = ps[s] * pe[e];
                best = (s, e);
            }
        }
    }
    best
}

fn inference_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut mismatches = 0;
    let mut ties = 0;
    for i in 0..1000 {
        let n = rng.random_range(1..=64);
        // every other case uses coarse values so ties are common
        let mut draw = |coarse: bool| -> Vec<f64> {
            let v: Vec<f64> = (0..n)
                .map(|_| if coarse { f64::from(rng.random_range(0..4u8)) } else { rng.random::<f64>() })
                .collect();
            let total: f64 = v.iter().sum();
            if total == 0.0 {
                vec![1.0 / n as f64; n]
            } else {
                v.into_iter().map(|x| x / total).collect()
            }
        };
        let (ps, pe) = (draw(i % 2 == 0), draw(i % 2 == 0));
        let want = brute_force_argmax(&ps, &pe);
        let got = joint_argmax(&ps, &pe).map(|(s, e, _)| (s, e));
        let best = ps[want.0] * pe[want.1];
        let n_best = (0..n).flat_map(|s| (s..n).map(move |e| (s, e))).filter(|&(s, e)| ps[s] * pe[e] == best).count();
        if n_best > 1 {
            ties += 1;
        }
        if got.ok() != Some(want) {
            mismatches += 1;
        }
    }
    outcome(mismatches == 0, format!("1000 cases ({ties} with tied maxima), {mismatches} mismatches"))
}

// ---- 5 -------------------------------------------------------------------

fn oracle_iou(p: (f64, f64), g: (f64, f64)) -> f64 {
    let (lo, hi) = (p.0.max(g.0), p.1.min(g.1));
    if p.0 == p.1 && g.0 == g.1 {
        return if p.0 == g.0 { 1.0 } else { 0.0 };
    }
    if hi <= lo {
        return 0.0;
    }
    (hi - lo) / (p.1.max(g.1) - p.0.min(g.0))
}

fn metric_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut draw = || -> (f64, f64) {
        // endpoints on a coarse grid half of the time, to hit thresholds and touching spans
        let (a, b) = if rng.random_bool(0.5) {
            (f64::from(rng.random_range(0..20u8)), f64::from(rng.random_range(0..20u8)))
        } else {
            (rng.random_range(0.0..20.0), rng.random_range(0.0..20.0))
        };
        (a.min(b), a.max(b))
    };
    let pairs: Vec<_> = (0..1000).map(|_| (draw(), draw())).collect();
    let span = |(s, e): (f64, f64)| TemporalSpan {
        start_idx: 0,
        end_idx: 0,
        start_sec: s,
        end_sec: e,
        duration_sec: 20.0,
    };
    let preds: Vec<_> = pairs.iter().map(|p| span(p.0)).collect();
    let gts: Vec<_> = pairs.iter().map(|p| span(p.1)).collect();
    let r = evaluate(&preds, &gts, &DEFAULT_THRESHOLDS).expect("aligned lists");

    let ious: Vec<f64> = pairs.iter().map(|&(p, g)| oracle_iou(p, g)).collect();
    let mut mismatches = ious.iter().zip(&r.per_sample).filter(|(a, b)| **a != b.iou).count();
    for &(mu, got) in &r.r1_iou {
        let want = 100.0 * ious.iter().filter(|&&x| x > mu).count() as f64 / 1000.0;
        if got != want {
            mismatches += 1;
        }
    }
    let miou = 100.0 * ious.iter().sum::<f64>() / 1000.0;
    if miou != r.miou {
        mismatches += 1;
    }
    outcome(mismatches == 0, format!("1000 span pairs, {mismatches} mismatching values (exact)"))
}

// ---- 6, 7, 8 ---------------------------------------------------------------

fn synth(dir: &Path, train: usize, test: usize) -> mrtnet_core::Result<()> {
    let spec = SynthSpec {
        num_samples: train,
        n: 64,
        d_v: 64,
        noise_std: 0.05,
        seed: 7,
        ..SynthSpec::default()
    };
    cmd_synth(&spec, test, dir)
}

/// Desk-scale training settings shared by the learning criteria.
fn desk_config(data: &Path, out: &Path, extra: &[(&str, &str)]) -> mrtnet_core::Result<Config> {
    let mut c = Config::default();
    for (k, v) in [
        ("d", "32"),
        ("num_heads", "8"),
        ("lr", "0.001"),
        ("batch_size", "8"),
        ("d_q", "64"),
        ("seed", "7"),
    ]
    .iter()
    .chain(extra)
    {
        c.set(k, v)?;
    }
    c.annotations = Some(data.join("train.jsonl"));
    c.features_dir = Some(data.join("features"));
    c.out_dir = Some(out.to_path_buf());
    Ok(c)
}

fn overfit(root: &Path) -> mrtnet_core::Result<Outcome> {
    let data = root.join("overfit");
    synth(&data, 32, 0)?;
    let cfg = desk_config(&data, &root.join("overfit_run"), &[("epochs", "200"), ("early_stop_patience", "200")])?;
    let t = Instant::now();
    let trained = cmd_train(&cfg)?;
    let elapsed = t.elapsed();
    let eval = cmd_eval(&cfg, &root.join("overfit_run").join(CHECKPOINT_FILE))?;
    let r = eval.report;
    Ok(outcome(
        r.miou >= 80.0 && r.r1_iou_05 >= 90.0 && elapsed < Duration::from_secs(600),
        format!(
            "{} epochs: train mIoU {:.2} (>= 80), R@1@0.5 {:.2} (>= 90), {:.0}s (< 600s)",
            trained.log.len(),
            r.miou,
            r.r1_iou_05,
            elapsed.as_secs_f64()
        ),
    ))
}

fn generalization(root: &Path) -> mrtnet_core::Result<Outcome> {
    let data = root.join("general");
    synth(&data, 256, 128)?;
    let run = |name: &str, extra: &[(&str, &str)]| -> mrtnet_core::Result<mrtnet_core::metrics::EvalReport> {
        let out = root.join(name);
        let mut cfg = desk_config(&data, &out, extra)?;
        cmd_train(&cfg)?;
        cfg.annotations = Some(data.join("test.jsonl"));
        Ok(cmd_eval(&cfg, &out.join(CHECKPOINT_FILE))?.report)
    };
    let full = run("general_full", &[])?;
    let ce = run("general_ce_only", &[("ce_only", "true")])?;
    Ok(outcome(
        full.miou >= 50.0 && full.r1_iou_03 >= 70.0 && ce.miou < full.miou,
        format!(
            "test mIoU {:.2} (>= 50), R@1@0.3 {:.2} (>= 70); ce-only mIoU {:.2} (must be < {:.2})",
            full.miou, full.r1_iou_03, ce.miou, full.miou
        ),
    ))
}

fn determinism(root: &Path) -> mrtnet_core::Result<Outcome> {
    let data = root.join("determinism");
    synth(&data, 32, 0)?;
    let mut reports = Vec::new();
    let mut checkpoints = Vec::new();
    for run in ["det_a", "det_b"] {
        let out = root.join(run);
        let cfg = desk_config(&data, &out, &[("epochs", "15")])?;
        cmd_train(&cfg)?;
        cmd_eval(&cfg, &out.join(CHECKPOINT_FILE))?;
        reports.push(std::fs::read(out.join(REPORT_JSON_FILE)).map_err(|e| mrtnet_core::MrtError::Numerical(e.to_string()))?);
        let ck = Checkpoint::load(&out.join(CHECKPOINT_FILE))?;
        checkpoints.push((ck.params, ck.epoch, ck.best_metric));
    }
    let same = reports[0] == reports[1];
    Ok(outcome(
        same,
        format!(
            "report.json {} ({} bytes), checkpoint weights {}",
            if same { "byte-identical" } else { "differs" },
            reports[0].len(),
            if checkpoints[0] == checkpoints[1] { "identical" } else { "differ" }
        ),
    ))
}

// ---- 9 -------------------------------------------------------------------

fn quantization() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst_ratio: f64 = 0.0;
    let mut violations = 0;
    for _ in 0..10_000 {
        let duration = rng.random_range(0.1..3600.0);
        let n = rng.random_range(1..=1024usize);
        let tau = rng.random_range(0.0..=duration);
        let back = index_to_time(time_to_index(tau, duration, n).expect("valid"), n, duration);
        let bound = duration / n as f64;
        let err = (back - tau).abs();
        worst_ratio = worst_ratio.max(err / bound);
        if err > bound {
            violations += 1;
        }
    }
    outcome(violations == 0, format!("10000 triples, worst error {worst_ratio:.4} x T/n, {violations} over bound"))
}

fn main() {
    let root = tempfile::tempdir().expect("temp dir");
    let learned = |f: fn(&Path) -> mrtnet_core::Result<Outcome>| -> Outcome {
        f(root.path()).unwrap_or_else(|e| outcome(false, format!("error: {e}")))
    };
    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome + '_>)> = vec![
        ("gradient suite", Box::new(gradient_checks)),
        ("hot-pluggability", Box::new(hot_pluggability)),
        ("loss bounds and fixed points", Box::new(loss_bounds)),
        ("inference oracle", Box::new(inference_oracle)),
        ("metric oracle", Box::new(metric_oracle)),
        ("overfit learnability", Box::new(move || learned(overfit))),
        ("generalization signal", Box::new(move || learned(generalization))),
        ("determinism", Box::new(move || learned(determinism))),
        ("quantization bound", Box::new(quantization)),
    ];
    let mut failures = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let o = run();
        if !o.pass {
            failures += 1;
        }
        println!(
            "{} criterion {} {name}: {} [{:.1}s]",
            if o.pass { "PASS" } else { "FAIL" },
            i + 1,
            o.detail,
            t.elapsed().as_secs_f64()
        );
    }
    println!("acceptance: {} passed, {failures} failed", criteria.len() - failures);
    if failures > 0 {
        std::process::exit(1);
    }
}
