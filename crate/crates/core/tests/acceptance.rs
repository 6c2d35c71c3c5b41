//! Acceptance run: one PASS/FAIL line per criterion, executed serially so
//! wall-time comparisons are not disturbed by concurrent work.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use common::{fixture, scene};
use interseg::acquisition::{acquire, entropy_of, AcquisitionMethod, AcquisitionSettings};
use interseg::agent::{error_mask, AgentStrategy};
use interseg::annotation::{AnnotationTensor, ClickAnnotation, Origin};
use interseg::checkpoint::Checkpoint;
use interseg::disca::{build_sparse_target, interactive_loss, softmax_backward_f64, softmax_f64, WeightPolicy};
use interseg::experiment::{
    guidance_study, run_ablation, run_campaign, sequential_study, AblationArm, CampaignConfig, CampaignResult,
    CropStudyConfig, RefineMode,
};
use interseg::metrics::misclassification_count;
use interseg::prediction::PredictionMap;
use interseg::query::StrategyConfig;
use interseg::raster::{LabelMask, RasterImage};
use interseg::stats::wilcoxon_greater;
use interseg::toy::{generate_toy, Layout, ToyConfig};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn settings() -> AcquisitionSettings {
    AcquisitionSettings {
        confidnet: fixture().confidnet.clone(),
        ..Default::default()
    }
}

fn empty(img: &RasterImage) -> AnnotationTensor {
    AnnotationTensor::zeros(2, img.height(), img.width())
}

/// Random 4x4x3 losses: analytic gradients against central differences,
/// both in probability space and through the softmax.
fn loss_gradient() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (n, h, w) = (3, 4, 4);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let logits = Array3::from_shape_simple_fn((n, h, w), || rng.gen_range(-3.0..3.0));
        let p0 = softmax_f64(Array3::from_shape_simple_fn((n, h, w), || rng.gen_range(-3.0..3.0)).view());
        let clicks: Vec<_> = (0..rng.gen_range(0..=6))
            .map(|_| ClickAnnotation::new(rng.gen_range(0..h), rng.gen_range(0..w), rng.gen_range(0..n), Origin::Simulated))
            .collect();
        let target = build_sparse_target(&clicks, (h, w), n).map_err(|e| e.to_string())?;
        let lambda = rng.gen_range(0.0..5.0);
        let loss_at = |f: &Array3<f64>| interactive_loss(f.view(), &target, p0.view(), lambda).unwrap().loss;

        let probs = softmax_f64(logits.view());
        let value = interactive_loss(probs.view(), &target, p0.view(), lambda).map_err(|e| e.to_string())?;
        let through_softmax = softmax_backward_f64(probs.view(), value.grad.view());
        let eps = 1e-6;
        for (point, analytic, via_softmax) in [(&probs, &value.grad, false), (&logits, &through_softmax, true)] {
            let mut numeric = Array3::<f64>::zeros((n, h, w));
            for idx in ndarray::indices((n, h, w)) {
                let mut up = point.clone();
                up[idx] += eps;
                let mut down = point.clone();
                down[idx] -= eps;
                let (lu, ld) = if via_softmax {
                    (loss_at(&softmax_f64(up.view())), loss_at(&softmax_f64(down.view())))
                } else {
                    (loss_at(&up), loss_at(&down))
                };
                numeric[idx] = (lu - ld) / (2.0 * eps);
            }
            let diff = (analytic - &numeric).iter().fold(0.0f64, |m, d| m.max(d.abs()));
            let scale = analytic.iter().chain(numeric.iter()).fold(1e-8f64, |m, d| m.max(d.abs()));
            worst = worst.max(diff / scale);
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    ensure(worst < 1e-4, || format!("relative error {worst:.2e}"))?;
    ensure(elapsed < 10.0, || format!("took {elapsed:.1}s"))?;
    Ok(format!("max relative error {worst:.2e} over 20 instances"))
}

/// `ln S - sum(w ln w) / S` for unnormalized weights, an algebraically
/// separate route to the entropy of `w / S`.
fn entropy_from_weights(w: &[f64]) -> f64 {
    let s: f64 = w.iter().sum();
    s.ln() - w.iter().filter(|&&x| x > 0.0).map(|x| x * x.ln()).sum::<f64>() / s
}

fn entropy_exactness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let k = rng.gen_range(2..=8);
        let w: Vec<f64> = (0..k).map(|_| rng.gen_range(0.01..1.0)).collect();
        let s: f64 = w.iter().sum();
        let p: Vec<f64> = w.iter().map(|x| x / s).collect();
        let e = entropy_of(&p);
        worst = worst.max((e - entropy_from_weights(&w)).abs());
        ensure(e >= 0.0 && e <= (k as f64).ln() + 1e-12, || format!("{e} outside [0, ln {k}]"))?;
    }
    ensure(worst < 1e-12, || format!("max deviation {worst:.2e}"))?;
    for k in 2..=8 {
        let mut one_hot = vec![0.0; k];
        one_hot[k / 2] = 1.0;
        ensure(entropy_of(&one_hot) == 0.0, || format!("one-hot of {k} classes"))?;
        let uniform = vec![1.0 / k as f64; k];
        let gap = (entropy_of(&uniform) - (k as f64).ln()).abs();
        ensure(gap < 1e-12, || format!("uniform over {k} is off by {gap:.2e}"))?;
    }
    Ok(format!("max deviation {worst:.2e} over 1000 vectors"))
}

fn misclassification_counter() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for trial in 0..100 {
        let k = rng.gen_range(2..=5);
        let probs = Array3::from_shape_simple_fn((k, 8, 8), || rng.gen::<f32>() + 1e-3);
        let sums = probs.sum_axis(ndarray::Axis(0));
        let probs = Array3::from_shape_fn((k, 8, 8), |(c, y, x)| probs[[c, y, x]] / sums[[y, x]]);
        // class index k marks ignored pixels
        let labels = Array2::from_shape_simple_fn((8, 8), || rng.gen_range(0..=k) as u8);
        let mut expected = 0;
        for y in 0..8 {
            for x in 0..8 {
                let t = labels[[y, x]] as usize;
                if t == k {
                    continue;
                }
                let mut best = 0;
                for c in 1..k {
                    if probs[[c, y, x]] > probs[[best, y, x]] {
                        best = c;
                    }
                }
                expected += usize::from(best != t);
            }
        }
        let got = misclassification_count(
            &PredictionMap::new(probs).map_err(|e| e.to_string())?,
            &LabelMask::new(labels, k).map_err(|e| e.to_string())?,
        )
        .map_err(|e| e.to_string())?;
        ensure(got == expected, || format!("instance {trial}: {got} vs {expected}"))?;
    }
    Ok("100 of 100 instances exact".into())
}

/// Fastest of three runs; scheduler noise only ever adds time.
fn fastest_wall_time(method: AcquisitionMethod, img: &RasterImage, settings: &AcquisitionSettings) -> f64 {
    (0..3)
        .map(|_| acquire(method, &fixture().model, img, &empty(img), settings).unwrap().wall_time)
        .fold(f64::INFINITY, f64::min)
}

fn acquisition_separation() -> Outcome {
    let model = &fixture().model;
    let settings = settings();
    let order = [
        AcquisitionMethod::Entropy,
        AcquisitionMethod::Confidnet,
        AcquisitionMethod::Odin,
        AcquisitionMethod::McDropout,
    ];
    let scenes: Vec<_> = (0..10).map(|s| scene(800 + s, 192, false)).collect();
    let mut summary = Vec::new();
    for method in order {
        let (mut wrong, mut right) = (Vec::new(), Vec::new());
        for (img, lab) in &scenes {
            let errors = error_mask(&model.predict_image_only(img).unwrap(), lab).unwrap();
            let map = acquire(method, model, img, &empty(img), &settings).unwrap();
            let (mut sw, mut nw, mut sr, mut nr) = (0.0, 0usize, 0.0, 0usize);
            for ((y, x), &v) in map.scores.indexed_iter() {
                if lab.get(y, x).is_none() {
                    continue;
                }
                if errors[[y, x]] {
                    sw += v;
                    nw += 1;
                } else {
                    sr += v;
                    nr += 1;
                }
            }
            ensure(nw > 0, || "scene without errors".into())?;
            wrong.push(sw / nw as f64);
            right.push(sr / nr as f64);
        }
        let p = wilcoxon_greater(&wrong, &right).p_value;
        ensure(p < 0.05, || format!("{method}: p = {p:.4}"))?;
        summary.push(format!("{method} p={p:.4}"));
    }
    for (s, (img, _)) in scenes.iter().enumerate() {
        let times: Vec<f64> = order.iter().map(|&m| fastest_wall_time(m, img, &settings)).collect();
        ensure(times.windows(2).all(|t| t[0] < t[1]), || {
            format!("seed {s}: times {:?} ms", times.iter().map(|t| (t * 1e4).round() / 10.0).collect::<Vec<_>>())
        })?;
    }
    Ok(format!("{}; cost order held on 10 scenes", summary.join(", ")))
}

fn campaign(data: &[(RasterImage, LabelMask)], strategy: StrategyConfig, mode: RefineMode, budget: usize, seed: u64) -> CampaignResult {
    let mut cfg = CampaignConfig::new(strategy, mode, budget);
    cfg.seed = seed;
    run_campaign(&fixture().model, data, &cfg, &settings()).unwrap()
}

fn active_learning_speedup() -> Outcome {
    let start = Instant::now();
    let mut summary = Vec::new();
    for mode in [RefineMode::AcOnly, RefineMode::Disca] {
        let (mut active, mut random) = (Vec::new(), Vec::new());
        for s in 0..10 {
            let data = vec![scene(100 + s, 192, false)];
            active.push(campaign(&data, StrategyConfig::active(AcquisitionMethod::Entropy, s), mode, 6, s).area_under_curve());
            random.push(campaign(&data, StrategyConfig::random(s), mode, 6, s).area_under_curve());
        }
        let p = wilcoxon_greater(&active, &random).p_value;
        ensure(p < 0.05, || format!("{}: p = {p:.4}", mode.name()))?;
        summary.push(format!("{} p={p:.4} auc {:.4} vs {:.4}", mode.name(), mean(&active), mean(&random)));
    }
    let elapsed = start.elapsed().as_secs_f64();
    ensure(elapsed < 1800.0, || format!("took {elapsed:.0}s"))?;
    Ok(summary.join("; "))
}

fn final_of(results: &[(AblationArm, CampaignResult)], name: &str) -> f64 {
    results.iter().find(|(a, _)| a.name == name).unwrap().1.final_iou()
}

fn ablation() -> Outcome {
    let model = &fixture().model;
    let (mut disca1, mut disca10, mut ac) = (Vec::new(), Vec::new(), Vec::new());
    let arms = [AblationArm::ac(), AblationArm::disca(1.0), AblationArm::disca(10.0)];
    for s in 0..10 {
        let data = vec![scene(200 + s, 192, true)];
        let mut base = CampaignConfig::new(StrategyConfig::active(AcquisitionMethod::Entropy, s), RefineMode::Disca, 6);
        base.seed = s;
        let r = run_ablation(model, &data, &base, &arms, &settings()).unwrap();
        ac.push(final_of(&r, "ac"));
        disca1.push(final_of(&r, "disca_lambda_1"));
        disca10.push(final_of(&r, "disca_lambda_10"));
    }
    ensure(mean(&disca1) > mean(&ac), || format!("disca {:.4} vs ac {:.4}", mean(&disca1), mean(&ac)))?;
    ensure(mean(&disca10) <= mean(&disca1), || {
        format!("lambda 10 {:.4} above lambda 1 {:.4}", mean(&disca10), mean(&disca1))
    })?;

    // denser scenes, where retraining on clicks alone has more to break
    let dense = ToyConfig {
        count: 1,
        height: 192,
        width: 192,
        layout: Layout::Clustered,
        density: 0.25,
        clusters: 3,
        ..Default::default()
    };
    let mut dropped = 0;
    for s in 0..10 {
        let data = generate_toy(200 + s, &dense).unwrap();
        let mut base = CampaignConfig::new(StrategyConfig::active(AcquisitionMethod::Entropy, s), RefineMode::Disca, 10);
        base.seed = s;
        let r = run_ablation(model, &data, &base, &[AblationArm::ac_wtp()], &settings()).unwrap();
        dropped += usize::from(r[0].1.final_iou() < r[0].1.initial_iou());
    }
    ensure(dropped >= 1, || "no-recall retraining never fell below its start".into())?;
    Ok(format!(
        "final disca {:.4} > ac {:.4}, lambda 10 {:.4}; lambda 0 dropped in {dropped}/10",
        mean(&disca1),
        mean(&ac),
        mean(&disca10)
    ))
}

fn oracle_versus_active() -> Outcome {
    let (mut oracle, mut active) = (Vec::new(), Vec::new());
    let size = 192;
    let patch = 64;
    for s in 0..10 {
        let data = vec![scene(300 + s, size, false)];
        let al = campaign(&data, StrategyConfig::active(AcquisitionMethod::Entropy, s), RefineMode::AcOnly, 6, s);
        let or = campaign(&data, StrategyConfig::whole_image_oracle(s), RefineMode::AcOnly, 6, s);
        let ratio = or.images[0].ledger.per_query() / al.images[0].ledger.per_query();
        let expected = (size * size) as f64 / (patch * patch) as f64;
        ensure(ratio == expected, || format!("seed {s}: search ratio {ratio} vs {expected}"))?;
        oracle.push(or.final_iou() - or.initial_iou());
        active.push(al.final_iou() - al.initial_iou());
    }
    ensure(mean(&oracle) >= mean(&active), || format!("oracle gain {:.4} < active {:.4}", mean(&oracle), mean(&active)))?;
    Ok(format!("gain oracle {:.4} >= active {:.4}; search ratio 9 exactly", mean(&oracle), mean(&active)))
}

fn sequential_adaptation() -> Outcome {
    let mut cfg = ToyConfig {
        count: 5,
        height: 128,
        width: 128,
        layout: Layout::Clustered,
        clusters: 3,
        ..Default::default()
    }
    .shifted();
    cfg.shift = 0.1;
    let images = generate_toy(400, &cfg).unwrap();
    let campaign = CampaignConfig::new(StrategyConfig::active(AcquisitionMethod::Entropy, 0), RefineMode::Disca, 6);
    let r = sequential_study(&fixture().model, &images, &campaign, WeightPolicy::Sequential, &settings()).unwrap();
    let (first, last) = (&r[0], &r[4]);
    ensure(last.initial_iou > first.initial_iou, || {
        format!("image 5 starts at {:.4}, image 1 at {:.4}", last.initial_iou, first.initial_iou)
    })?;
    ensure(last.final_iou >= last.checkpoint_iou - 0.02, || {
        format!("image 5 ends at {:.4}, checkpoint gives {:.4}", last.final_iou, last.checkpoint_iou)
    })?;
    Ok(format!(
        "initial {:.4} -> {:.4}; final {:.4} vs checkpoint {:.4}",
        first.initial_iou, last.initial_iou, last.final_iou, last.checkpoint_iou
    ))
}

fn uncertainty_guided_clicks() -> Outcome {
    let data: Vec<_> = (0..10).map(|s| scene(500 + s, 192, false)).collect();
    let cfg = CropStudyConfig {
        crops: 30,
        ..Default::default()
    };
    let strategies = [AgentStrategy::UncertaintyOnly, AgentStrategy::Random];
    let records = guidance_study(&fixture().model, &data, &cfg, &strategies, RefineMode::AcOnly).unwrap();
    let gains = |s: AgentStrategy| records.iter().filter(|r| r.strategy == s).map(|r| r.gain).collect::<Vec<_>>();
    let (u, r) = (gains(AgentStrategy::UncertaintyOnly), gains(AgentStrategy::Random));
    ensure(u.len() == 30 && r.len() == 30, || "expected 30 crops per strategy".into())?;
    ensure(mean(&u) > mean(&r), || format!("uncertainty {:.4} vs random {:.4}", mean(&u), mean(&r)))?;
    Ok(format!("mean gain {:.4} vs random {:.4}", mean(&u), mean(&r)))
}

fn determinism() -> Outcome {
    let data: Vec<_> = (0..2).map(|s| scene(950 + s, 128, true)).collect();
    let original = fixture();
    let reloaded = Checkpoint::from_bytes(&original.to_bytes()).map_err(|e| e.to_string())?;
    let reloaded_settings = AcquisitionSettings {
        confidnet: reloaded.confidnet.clone(),
        ..Default::default()
    };
    let mut strategies: Vec<_> = AcquisitionMethod::ALL.iter().map(|&m| StrategyConfig::active(m, 4)).collect();
    strategies.push(StrategyConfig::random(4));
    strategies.push(StrategyConfig::whole_image_oracle(4));
    for strategy in strategies {
        let name = strategy.name();
        let mut cfg = CampaignConfig::new(strategy, RefineMode::Disca, 3);
        cfg.seed = 21;
        let a = run_campaign(&original.model, &data, &cfg, &settings()).map_err(|e| e.to_string())?;
        let restored: CampaignConfig = serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
        let b = run_campaign(&reloaded.model, &data, &restored, &reloaded_settings).map_err(|e| e.to_string())?;
        ensure(a.fingerprint() == b.fingerprint(), || format!("{name}: fingerprints differ"))?;
        ensure(a.without_timings() == b.without_timings(), || format!("{name}: records differ"))?;
    }
    Ok("6 strategies rerun bit-identically from a reloaded checkpoint".into())
}

fn main() {
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("loss gradient matches finite differences", loss_gradient),
        ("entropy is exact and bounded", entropy_exactness),
        ("misclassification count matches brute force", misclassification_counter),
        ("uncertainty separates errors, cost ordered", acquisition_separation),
        ("entropy querying beats random querying", active_learning_speedup),
        ("ablation: recall term and lambda", ablation),
        ("whole-image oracle vs patch querying", oracle_versus_active),
        ("sequential weights adapt to the domain", sequential_adaptation),
        ("uncertainty-guided clicks beat random clicks", uncertainty_guided_clicks),
        ("campaigns are deterministic", determinism),
    ];
    fixture();
    let mut failed = 0;
    for (name, run) in criteria {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            Err(e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS  {name}: {detail} ({secs:.1}s)"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {name}: {detail} ({secs:.1}s)");
            }
        }
    }
    println!("{} of {} criteria passed", 10 - failed, 10);
    if failed > 0 {
        std::process::exit(1);
    }
}
