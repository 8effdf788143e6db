//! Acceptance suite. Runs every criterion, prints one line each, and exits
//! non-zero if any failed.

mod common;

use std::collections::BTreeSet;
use std::panic::{self, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::*;
use framereward::bench;
use framereward::grpo::{self, GrpoConfig, RolloutGroup, Side, ToyPolicy};
use framereward::parser::{self, check_format, parse_answer, render_parsed};
use framereward::reward::{self, preference_probabilities, RewardWeights};
use framereward::sampler::{self, CaseTag, SamplerConfig};
use framereward::taxonomy::{DistortionLabel, LabelSet};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

type Outcome = Result<String, String>;
/// Arguments, `--out` target, golden for the written file, golden for stdout.
type GoldenRun = (
    Vec<String>,
    Option<String>,
    &'static str,
    Option<&'static str>,
);
type Criterion = (&'static str, fn() -> Outcome);

macro_rules! check {
    ($cond:expr, $($msg:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($msg)+));
        }
    };
}

fn within(elapsed: Duration, limit_secs: f64, what: &str) -> Result<(), String> {
    if elapsed.as_secs_f64() < limit_secs {
        Ok(())
    } else {
        Err(format!(
            "{what} took {:.2}s, limit {limit_secs}s",
            elapsed.as_secs_f64()
        ))
    }
}

// ---------------------------------------------------------------- 1

fn c01_tie_model() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst_sum = 0.0_f64;
    for &theta in &[1.5, 2.0, 5.0, 10.0] {
        for _ in 0..100_000 {
            let a: f64 = rng.gen_range(-20.0..20.0);
            let b: f64 = rng.gen_range(-20.0..20.0);
            let p = preference_probabilities(a, b, theta).map_err(|e| e.to_string())?;
            let q = preference_probabilities(b, a, theta).map_err(|e| e.to_string())?;
            worst_sum = worst_sum.max((p.p_win + p.p_lose + p.p_tie - 1.0).abs());
            check!(
                p.p_win.to_bits() == q.p_lose.to_bits()
                    && p.p_lose.to_bits() == q.p_win.to_bits()
                    && p.p_tie.to_bits() == q.p_tie.to_bits(),
                "swap not exact at ({a}, {b}, θ={theta})"
            );
            check!(
                p.p_win >= 0.0 && p.p_lose >= 0.0 && p.p_tie >= 0.0,
                "negative probability"
            );
        }
    }
    check!(worst_sum <= 1e-9, "probability sum off by {worst_sum:e}");
    for s in [1.0, 3.0, 5.0] {
        let p = preference_probabilities(s, s, 5.0).map_err(|e| e.to_string())?;
        check!(
            (p.p_win - 1.0 / 6.0).abs() <= 1e-12
                && (p.p_lose - 1.0 / 6.0).abs() <= 1e-12
                && (p.p_tie - 2.0 / 3.0).abs() <= 1e-12,
            "equal scores gave {p:?}"
        );
    }
    let elapsed = start.elapsed();
    within(elapsed, 5.0, "tie-model suite")?;
    Ok(format!("4x1e5 pairs, max |sum-1| = {worst_sum:.1e}"))
}

// ---------------------------------------------------------------- 2

/// Independent attribution reward over label strings.
fn brute_attribution(pred: &[&str], gt: &[&str]) -> (usize, usize, usize, f64) {
    let p: BTreeSet<&str> = pred.iter().copied().filter(|l| *l != "no issue").collect();
    let g: BTreeSet<&str> = gt.iter().copied().collect();
    let (r, w, m) = if p.is_empty() && g.is_empty() {
        (1, 0, 0)
    } else {
        (
            p.intersection(&g).count(),
            p.difference(&g).count(),
            g.difference(&p).count(),
        )
    };
    (r, w, m, 0.6 * r as f64 - 0.2 * (w + m) as f64)
}

fn c02_attribution_oracle() -> Outcome {
    let start = Instant::now();
    let universe: Vec<&str> = DistortionLabel::ALL.iter().map(|l| l.as_str()).collect();
    let distortions = &universe[..8];
    let mut gts: Vec<Vec<&str>> = Vec::new();
    for mask in 0u32..256 {
        if mask.count_ones() <= 3 {
            gts.push(
                (0..8)
                    .filter(|i| mask >> i & 1 == 1)
                    .map(|i| distortions[i])
                    .collect(),
            );
        }
    }
    check!(
        gts.len() == 93,
        "expected 93 ground-truth sets, got {}",
        gts.len()
    );

    let mut checked = 0usize;
    for mask in 0u32..512 {
        let pred: Vec<&str> = (0..9)
            .filter(|i| mask >> i & 1 == 1)
            .map(|i| universe[i])
            .collect();
        let text = format!(
            "<think>t</think><answer>{}</answer>",
            json!({ "Attribution labels": pred })
        );
        let parsed = parse_answer(&text);
        for gt in &gts {
            let gt_set = LabelSet::parse_strs(gt, framereward::taxonomy::LabelRole::GroundTruth)
                .map_err(|e| e.to_string())?;
            let b = reward::attribution_breakdown(&parsed.labels, &gt_set);
            let got = reward::attribution_reward(&b);
            let (r, w, m, want) = brute_attribution(&pred, gt);
            check!(
                (b.a_right, b.a_wrong, b.a_missing) == (r, w, m) && got.to_bits() == want.to_bits(),
                "pred {pred:?} gt {gt:?}: got ({}, {}, {}) {got}, want ({r}, {w}, {m}) {want}",
                b.a_right,
                b.a_wrong,
                b.a_missing
            );
            checked += 1;
        }
    }
    within(start.elapsed(), 10.0, "attribution sweep")?;
    Ok(format!(
        "{checked} (prediction, ground truth) combinations exact"
    ))
}

// ---------------------------------------------------------------- 3

fn c03_advantages() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst_mean = 0.0_f64;
    let mut worst_std = 0.0_f64;
    let mut worst_affine = 0.0_f64;
    for _ in 0..10_000 {
        let n = rng.gen_range(2..=64);
        let rewards: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let adv = grpo::group_advantages(&rewards, 1e-6).map_err(|e| e.to_string())?;
        let mean = adv.iter().sum::<f64>() / n as f64;
        let std = (adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
        worst_mean = worst_mean.max(mean.abs());
        worst_std = worst_std.max((std - 1.0).abs());

        // power-of-two scaling is exact in binary floating point
        let k = rng.gen_range(-6..=6);
        let scale = 2f64.powi(k);
        let scaled: Vec<f64> = rewards.iter().map(|r| r * scale).collect();
        let adv_s = grpo::group_advantages(&scaled, 1e-6).map_err(|e| e.to_string())?;
        check!(
            adv.iter()
                .zip(&adv_s)
                .all(|(x, y)| x.to_bits() == y.to_bits()),
            "scaling by 2^{k} changed advantages"
        );

        let a: f64 = rng.gen_range(0.1..10.0);
        let b: f64 = rng.gen_range(-50.0..50.0);
        let moved: Vec<f64> = rewards.iter().map(|r| a * r + b).collect();
        let adv_m = grpo::group_advantages(&moved, 1e-6).map_err(|e| e.to_string())?;
        for (x, y) in adv.iter().zip(&adv_m) {
            worst_affine = worst_affine.max((x - y).abs());
        }
    }
    check!(worst_mean <= 1e-9, "mean {worst_mean:e}");
    check!(worst_std <= 1e-6, "std deviation {worst_std:e}");
    check!(worst_affine <= 1e-9, "affine drift {worst_affine:e}");
    Ok(format!(
        "|mean| {worst_mean:.1e}, |std-1| {worst_std:.1e}, 2^k scaling bit-exact, general affine {worst_affine:.1e}"
    ))
}

// ---------------------------------------------------------------- 4

fn c04_gradient_check() -> Outcome {
    const N_ACTIONS: usize = 6;
    const N_INPUTS: usize = 2;
    const G: usize = 8;
    const H: f64 = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0_f64;
    let mut accepted = 0usize;
    let mut rejected = 0usize;

    for &beta in &[0.0, 0.01, 1.0] {
        let cfg = GrpoConfig {
            group_size: G,
            clip_eps: 0.2,
            kl_beta: beta,
            ..GrpoConfig::default()
        };
        let mut done = 0;
        while done < 110 {
            let logits: Vec<f64> = (0..N_INPUTS * N_ACTIONS)
                .map(|_| rng.gen_range(-1.5..1.5))
                .collect();
            let old: Vec<f64> = logits
                .iter()
                .map(|z| z + rng.gen_range(-0.3..0.3))
                .collect();
            let refl: Vec<f64> = (0..N_INPUTS * N_ACTIONS)
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect();
            let policy = ToyPolicy::from_logits(N_ACTIONS, logits);
            let old = ToyPolicy::from_logits(N_ACTIONS, old);
            let reference = ToyPolicy::from_logits(N_ACTIONS, refl);
            let mut groups = Vec::new();
            for (input, side) in [(0, Side::A), (1, Side::B)] {
                let actions: Vec<usize> = (0..G).map(|_| rng.gen_range(0..N_ACTIONS)).collect();
                let rewards: Vec<f64> = (0..G).map(|_| rng.gen_range(-2.0..2.0)).collect();
                groups.push(
                    RolloutGroup::new("g", side, input, actions, rewards, cfg.std_floor)
                        .map_err(|e| e.to_string())?,
                );
            }
            // keep away from the clip boundaries, where the objective has a kink
            let near_kink = groups.iter().any(|g| {
                let lp = policy.log_probs(g.input);
                let lo = old.log_probs(g.input);
                g.actions.iter().any(|&a| {
                    let r = (lp[a] - lo[a]).exp();
                    (r - 1.2).abs() < 1e-3 || (r - 0.8).abs() < 1e-3
                })
            });
            if near_kink {
                rejected += 1;
                continue;
            }

            let (_, grad) = grpo::grpo_objective_and_grad(&policy, &old, &reference, &groups, &cfg)
                .map_err(|e| e.to_string())?;
            let mut fd = vec![0.0; grad.len()];
            for (k, slot) in fd.iter_mut().enumerate() {
                let mut plus = policy.clone();
                plus.logits_mut()[k] += H;
                let mut minus = policy.clone();
                minus.logits_mut()[k] -= H;
                let fp = grpo::grpo_objective(&plus, &old, &reference, &groups, &cfg)
                    .map_err(|e| e.to_string())?;
                let fm = grpo::grpo_objective(&minus, &old, &reference, &groups, &cfg)
                    .map_err(|e| e.to_string())?;
                *slot = (fp - fm) / (2.0 * H);
            }
            let diff = grad
                .iter()
                .zip(&fd)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt();
            let norm_g = grad.iter().map(|a| a * a).sum::<f64>().sqrt();
            let norm_f = fd.iter().map(|a| a * a).sum::<f64>().sqrt();
            let denom = norm_g.max(norm_f);
            let rel = if denom < 1e-9 { diff } else { diff / denom };
            check!(
                rel <= 1e-4,
                "β={beta}: relative error {rel:e} (|g| {norm_g:e})"
            );
            worst = worst.max(rel);
            done += 1;
            accepted += 1;
        }
    }
    check!(accepted >= 100, "only {accepted} configurations");
    Ok(format!(
        "{accepted} configs ({rejected} near a clip kink skipped), worst rel err {worst:.1e}"
    ))
}

// ---------------------------------------------------------------- 5

fn c05_toy_learning() -> Outcome {
    let start = Instant::now();
    let contexts = grpo::always_a_wins_fixture(50);
    let w = RewardWeights::default();
    let cfg = GrpoConfig {
        steps: 300,
        seed: 42,
        ..GrpoConfig::default()
    };
    let out = grpo::grpo_train(&contexts, &cfg, &w).map_err(|e| e.to_string())?;
    let gaps: Vec<f64> = out.stats.iter().map(|s| s.score_gap).collect();
    let windows: Vec<f64> = gaps
        .chunks(20)
        .map(|c| c.iter().sum::<f64>() / c.len() as f64)
        .collect();
    check!(
        windows.windows(2).all(|p| p[1] > p[0]),
        "window means not increasing: {windows:?}"
    );
    let gain = gaps.last().copied().unwrap_or(0.0) - out.initial_score_gap;
    check!(gain >= 0.5, "gap rose only {gain:.3}");

    let anchored = GrpoConfig {
        kl_beta: 1e3,
        ..cfg
    };
    let out_kl = grpo::grpo_train(&contexts, &anchored, &w).map_err(|e| e.to_string())?;
    let tv = grpo::max_total_variation(&out_kl.policy, &out_kl.reference);
    check!(tv <= 0.01, "β=1e3 drifted to TV {tv:.4}");
    within(start.elapsed(), 60.0, "toy training")?;
    Ok(format!(
        "gap {:.3} -> {:.3} over {} windows, β=1e3 TV {tv:.4}",
        out.initial_score_gap,
        gaps.last().copied().unwrap_or(0.0),
        windows.len()
    ))
}

// ---------------------------------------------------------------- 6

fn c06_metrics() -> Outcome {
    let distorted = bench::f1_score(0.825, 0.866);
    check!(
        (distorted - 0.845).abs() <= 5e-4,
        "distorted F1 {distorted}"
    );
    let normal = bench::f1_score(0.771, 0.594);
    check!((normal - 0.671).abs() <= 5e-4, "normal F1 {normal}");

    // hand fixture: one hit, one miss, one false alarm, one clean
    let p = |ls: &[&str]| {
        LabelSet::parse_strs(ls, framereward::taxonomy::LabelRole::Prediction).unwrap()
    };
    let preds = [
        p(&["motion blur"]),
        p(&[]),
        p(&["extra limbs"]),
        p(&["null"]),
    ];
    let gts = [
        p(&["motion blur"]),
        p(&["torso deformation"]),
        p(&[]),
        p(&[]),
    ];
    let (d, n) = bench::recognition_confusion(&preds, &gts).map_err(|e| e.to_string())?;
    let (dm, nm) = (
        bench::precision_recall_f1(&d),
        bench::precision_recall_f1(&n),
    );
    check!(
        [
            dm.precision,
            dm.recall,
            dm.f1,
            nm.precision,
            nm.recall,
            nm.f1
        ] == [0.5; 6],
        "hand fixture gave {dm:?} {nm:?}"
    );

    let labels = [
        framereward::Preference::AWins,
        framereward::Preference::Tie,
        framereward::Preference::BWins,
    ];
    let gts = [labels[0], labels[2], labels[2]];
    let acc = bench::accuracy_with_tie(&labels, &gts).map_err(|e| e.to_string())?;
    check!(acc == 2.0 / 3.0, "accuracy with tie {acc}");
    let acc = bench::accuracy_without_tie(&[(4.0, 2.0), (3.0, 3.0)], &[labels[0], labels[2]])
        .map_err(|e| e.to_string())?;
    check!(acc == 0.5, "accuracy without tie {acc}");

    // shipped fixture through the CLI: 4/5 distorted, 2/3 normal
    let r = run_ok(&[
        "bench",
        "frames",
        "--frames",
        &rel("frames8.jsonl"),
        "--predictions",
        &rel("frame_predictions8.jsonl"),
    ]);
    let v: Value = serde_json::from_slice(&r.stdout).map_err(|e| e.to_string())?;
    check!(
        (v["distorted"]["f1"].as_f64().unwrap_or(0.0) - 0.8).abs() < 1e-15,
        "fixture distorted F1 {}",
        v["distorted"]["f1"]
    );
    check!(
        (v["normal"]["f1"].as_f64().unwrap_or(0.0) - 2.0 / 3.0).abs() < 1e-15,
        "fixture normal F1 {}",
        v["normal"]["f1"]
    );
    Ok(format!(
        "F1 {distorted:.4} / {normal:.4}, hand fixtures exact"
    ))
}

// ---------------------------------------------------------------- 7

fn c07_end_to_end() -> Outcome {
    let start = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let raw = dir.path().join("raw.jsonl");
    run_ok(&[
        "score",
        "--frames",
        &rel("frames200.jsonl"),
        "--mock",
        &rel("frames200.jsonl"),
        "--out",
        raw.to_str().unwrap(),
    ]);
    let r = run_ok(&[
        "bench",
        "frames",
        "--frames",
        &rel("frames200.jsonl"),
        "--predictions",
        raw.to_str().unwrap(),
    ]);
    let v: Value = serde_json::from_slice(&r.stdout).map_err(|e| e.to_string())?;
    for class in ["distorted", "normal"] {
        for m in ["precision", "recall", "f1"] {
            check!(v[class][m] == json!(1.0), "{class} {m} = {}", v[class][m]);
        }
    }

    let pairs = read_jsonl(&fixture("pairs10.jsonl"));
    let preds: String = pairs
        .iter()
        .map(|p| {
            let (a, b) = match p["preference"].as_str().unwrap() {
                "A" => (5.0, 1.0),
                "B" => (1.0, 5.0),
                _ => (3.0, 3.0),
            };
            format!(
                "{}\n",
                json!({"pair_id": p["pair_id"], "score_a": a, "score_b": b})
            )
        })
        .collect();
    let pred_path = dir.path().join("oracle_pref.jsonl");
    std::fs::write(&pred_path, preds).map_err(|e| e.to_string())?;
    let r = run_ok(&[
        "bench",
        "pref",
        "--pairs",
        &rel("pairs10.jsonl"),
        "--predictions",
        pred_path.to_str().unwrap(),
    ]);
    let v: Value = serde_json::from_slice(&r.stdout).map_err(|e| e.to_string())?;
    check!(
        v["acc_with_tie"] == json!(1.0) && v["acc_without_tie"] == json!(1.0),
        "preference accuracies {} / {}",
        v["acc_with_tie"],
        v["acc_without_tie"]
    );
    within(start.elapsed(), 30.0, "end-to-end run")?;
    Ok("200 mock frames all 1.0, oracle preference 1.0/1.0".into())
}

// ---------------------------------------------------------------- 8

fn random_scores(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    match rng.gen_range(0..4) {
        0 => (0..n).map(|_| rng.gen_range(4.01..=5.0)).collect(),
        1 => (0..n).map(|_| rng.gen_range(2.0..=4.0)).collect(),
        2 => {
            let mut v: Vec<f64> = (0..n).map(|_| rng.gen_range(1.0..=5.0)).collect();
            let i = rng.gen_range(0..n);
            v[i] = rng.gen_range(1.0..1.99);
            v
        }
        _ => (0..n).map(|_| rng.gen_range(1.0..=5.0)).collect(),
    }
}

fn c08_sampler() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let fps_choices = [4.0, 8.0, 12.0, 24.0, 30.0, 60.0];
    let mut trials = 0usize;
    let mut fallbacks = 0usize;
    let mut cases = [0usize; 3];
    for n in 4..=64usize {
        for budget in [2usize, 4, 8] {
            if budget > n {
                continue;
            }
            for _ in 0..60 {
                let fps = *fps_choices.choose(&mut rng).unwrap();
                let mut cfg = SamplerConfig::new(fps, n, budget);
                cfg.seed = rng.gen();
                let half = budget / 2;
                let scores = random_scores(&mut rng, half);
                let plan =
                    sampler::plan(&cfg, &scores).map_err(|e| format!("n={n} b={budget}: {e}"))?;

                check!(
                    plan.stage1.len() == half && plan.stage2.len() == half,
                    "n={n} b={budget}: sizes {} + {}",
                    plan.stage1.len(),
                    plan.stage2.len()
                );
                let s1: BTreeSet<usize> = plan.stage1.iter().copied().collect();
                let s2: BTreeSet<usize> = plan.stage2.iter().copied().collect();
                check!(
                    s2.len() == half && s1.len() == half,
                    "duplicates in plan {plan:?}"
                );
                check!(s1.is_disjoint(&s2), "stages overlap {plan:?}");
                check!(
                    plan.stage1.iter().chain(&plan.stage2).all(|&i| i < n),
                    "index out of range {plan:?}"
                );

                let want = if scores.iter().any(|&s| s < cfg.low_threshold) {
                    CaseTag::LowPresent
                } else if scores.iter().all(|&s| s > cfg.high_threshold) {
                    CaseTag::AllHigh
                } else {
                    CaseTag::Mixed
                };
                check!(
                    plan.case_tag == want,
                    "scores {scores:?} routed to {:?}",
                    plan.case_tag
                );
                cases[match want {
                    CaseTag::AllHigh => 0,
                    CaseTag::LowPresent => 1,
                    CaseTag::Mixed => 2,
                }] += 1;

                let again = sampler::plan(&cfg, &scores).map_err(|e| e.to_string())?;
                check!(again == plan, "plan not reproducible for a fixed seed");
                match want {
                    CaseTag::AllHigh => {
                        let mut other = cfg;
                        other.seed = cfg.seed.wrapping_add(0x9e37);
                        let p2 = sampler::plan(&other, &scores).map_err(|e| e.to_string())?;
                        check!(p2 == plan, "ALL_HIGH plan depends on the seed");
                    }
                    CaseTag::LowPresent => {
                        let w = cfg.window();
                        let anchors: Vec<usize> = plan
                            .stage1
                            .iter()
                            .zip(&scores)
                            .filter(|(_, &s)| s < cfg.low_threshold)
                            .map(|(&i, _)| i)
                            .collect();
                        let local = plan
                            .stage2
                            .iter()
                            .all(|&i| anchors.iter().any(|&a| i.abs_diff(a) <= w));
                        if plan.diagnostics.is_empty() {
                            check!(
                                local,
                                "LOW_PRESENT index outside ±{w} of {anchors:?}: {plan:?}"
                            );
                        } else {
                            fallbacks += 1;
                        }
                    }
                    CaseTag::Mixed => {}
                }

                let s2_scores: Vec<f64> = (0..half).map(|_| rng.gen_range(1.0..=5.0)).collect();
                let agg = sampler::aggregate_video_score(&scores, &s2_scores)
                    .map_err(|e| e.to_string())?;
                let mut all: Vec<f64> = scores.iter().chain(&s2_scores).copied().collect();
                all.shuffle(&mut rng);
                let (x, y) = all.split_at(half);
                let agg2 = sampler::aggregate_video_score(x, y).map_err(|e| e.to_string())?;
                check!(
                    agg.to_bits() == agg2.to_bits(),
                    "aggregate depends on order: {agg} vs {agg2}"
                );
                trials += 1;
            }
        }
    }
    check!(trials >= 10_000, "only {trials} trials");
    Ok(format!(
        "{trials} trials (ALL_HIGH {}, LOW_PRESENT {}, MIXED {}; {fallbacks} fallbacks)",
        cases[0], cases[1], cases[2]
    ))
}

// ---------------------------------------------------------------- 9

const FRAGMENTS: &[&str] = &[
    "<think>",
    "</think>",
    "<answer>",
    "</answer>",
    "{",
    "}",
    "[",
    "]",
    "\"",
    ":",
    ",",
    " ",
    "\n",
    "\"Attribution labels\"",
    "\"rating\"",
    "\"motion blur\"",
    "\"null\"",
    "null",
    "4.5",
    "1e999",
    "-3",
    "\"no issue\"",
    "\"extra limbs\"",
    "true",
    "\u{0}",
    "é",
    "<think",
    "answer>",
];

fn fuzz_text(rng: &mut ChaCha8Rng) -> String {
    if rng.gen_bool(0.5) {
        let len = rng.gen_range(0..96);
        let bytes: Vec<u8> = (0..len).map(|_| rng.gen()).collect();
        String::from_utf8_lossy(&bytes).into_owned()
    } else {
        let k = rng.gen_range(0..24);
        (0..k).map(|_| *FRAGMENTS.choose(rng).unwrap()).collect()
    }
}

fn check_parsed_invariants(text: &str) -> Result<(), String> {
    let p = parse_answer(text);
    check!(
        p.format_ok == check_format(text),
        "format flag disagrees for {text:?}"
    );
    check!(
        !p.labels.contains(DistortionLabel::NoIssue),
        "sentinel kept for {text:?}"
    );
    if let Some(r) = p.rating {
        check!(r.is_finite(), "non-finite rating for {text:?}");
    }
    let s = parser::effective_score(&p, parser::DEFAULT_FALLBACK_SCORE);
    check!((1.0..=5.0).contains(&s), "effective score {s} for {text:?}");
    let f = reward::format_reward(&p);
    check!(f == 0.0 || f == 1.0, "format reward {f}");
    Ok(())
}

fn check_round_trip(text: &str) -> Result<(), String> {
    let p = parse_answer(text);
    let canon = render_parsed(&p);
    let q = parse_answer(&canon);
    check!(q.format_ok, "canonical form malformed: {canon:?}");
    check!(
        q.labels == p.labels && q.rating == p.rating,
        "round trip changed {text:?}"
    );
    check!(
        render_parsed(&q) == canon,
        "canonical form not a fixed point: {canon:?}"
    );
    Ok(())
}

fn c09_parser_fuzz() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..1_000_000 {
        let text = fuzz_text(&mut rng);
        check_parsed_invariants(&text)?;
        let p = parse_answer(&text);
        if p.format_ok {
            check_round_trip(&text)?;
        }
    }
    let mut fixtures: Vec<String> = read_jsonl(&fixture("rollouts10.jsonl"))
        .iter()
        .map(|r| r["text"].as_str().unwrap().to_string())
        .collect();
    let space = grpo::ActionSpace::standard();
    fixtures.extend((0..space.len()).map(|a| space.render(a)));
    for t in &fixtures {
        check_parsed_invariants(t)?;
        check_round_trip(t)?;
    }
    Ok(format!(
        "1e6 fuzz inputs clean, {} fixture responses round-trip",
        fixtures.len()
    ))
}

// ---------------------------------------------------------------- 10

fn close(a: &Value, b: &Value, path: &str) -> Result<(), String> {
    match (a, b) {
        (Value::Number(x), Value::Number(y)) => {
            let (x, y) = (x.as_f64().unwrap(), y.as_f64().unwrap());
            check!((x - y).abs() <= 1e-9, "{path}: {x} vs expected {y}");
            Ok(())
        }
        (Value::Object(x), Value::Object(y)) => {
            check!(x.len() == y.len(), "{path}: field sets differ");
            for (k, v) in y {
                let got = x.get(k).ok_or_else(|| format!("{path}.{k} missing"))?;
                close(got, v, &format!("{path}.{k}"))?;
            }
            Ok(())
        }
        _ => {
            check!(a == b, "{path}: {a} vs expected {b}");
            Ok(())
        }
    }
}

fn c10_reproducibility() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let tmp = |name: &str| dir.path().join(name).to_string_lossy().into_owned();
    let runs: Vec<GoldenRun> = vec![
        (
            vec![
                "reward".into(),
                "--pairs".into(),
                rel("pairs10.jsonl"),
                "--rollouts".into(),
                rel("rollouts10.jsonl"),
            ],
            Some(tmp("reward.jsonl")),
            "reward10.jsonl",
            Some("reward10.report.json"),
        ),
        (
            vec![
                "bench".into(),
                "pref".into(),
                "--pairs".into(),
                rel("pairs10.jsonl"),
                "--predictions".into(),
                rel("pair_predictions10.jsonl"),
            ],
            None,
            "bench_pref10.json",
            None,
        ),
        (
            vec![
                "bench".into(),
                "frames".into(),
                "--frames".into(),
                rel("frames8.jsonl"),
                "--predictions".into(),
                rel("frame_predictions8.jsonl"),
            ],
            None,
            "bench_frames8.json",
            None,
        ),
        (
            vec![
                "sample".into(),
                "plan".into(),
                "--scores".into(),
                rel("scores_mixed.json"),
            ],
            None,
            "plan_mixed.json",
            None,
        ),
        (
            vec![
                "sample".into(),
                "plan".into(),
                "--scores".into(),
                rel("scores_low_present.json"),
            ],
            None,
            "plan_low_present.json",
            None,
        ),
        (
            vec![
                "sample".into(),
                "plan".into(),
                "--scores".into(),
                rel("scores_all_high.json"),
            ],
            None,
            "plan_all_high.json",
            None,
        ),
        (
            vec![
                "grpo".into(),
                "demo".into(),
                "--steps".into(),
                "40".into(),
                "--contexts".into(),
                "10".into(),
            ],
            Some(tmp("grpo.jsonl")),
            "grpo_demo.jsonl",
            Some("grpo_demo.report.json"),
        ),
        (
            vec![
                "data".into(),
                "pseudo-score".into(),
                "--frames".into(),
                rel("frames200.jsonl"),
            ],
            Some(tmp("ps.jsonl")),
            "pseudo_scores200.jsonl",
            None,
        ),
        (
            vec![
                "data".into(),
                "filter-cot".into(),
                "--frames".into(),
                rel("frames8.jsonl"),
                "--candidates".into(),
                rel("cot_candidates8.jsonl"),
            ],
            Some(tmp("kept.jsonl")),
            "cot_kept8.jsonl",
            Some("cot_report8.json"),
        ),
        (
            vec![
                "data".into(),
                "validate".into(),
                "--pairs".into(),
                rel("pairs10.jsonl"),
                "--rollouts".into(),
                rel("rollouts10.jsonl"),
            ],
            None,
            "validate.json",
            None,
        ),
        (
            vec![
                "score".into(),
                "--frames".into(),
                rel("frames8.jsonl"),
                "--mock".into(),
                rel("frames8.jsonl"),
                "--n-samples".into(),
                "2".into(),
            ],
            Some(tmp("score.jsonl")),
            "score_mock8.jsonl",
            None,
        ),
    ];

    for (args, out, golden, stdout_golden) in &runs {
        let mut full: Vec<&str> = args.iter().map(String::as_str).collect();
        if let Some(o) = out {
            full.extend(["--out", o.as_str()]);
        }
        let mut outputs = Vec::new();
        for _ in 0..2 {
            let r = run_ok(&full);
            let file = match out {
                Some(o) => std::fs::read(o).map_err(|e| e.to_string())?,
                None => r.stdout.clone(),
            };
            outputs.push((file, r.stdout));
        }
        check!(
            outputs[0] == outputs[1],
            "{} not byte-deterministic",
            args[..2].join(" ")
        );
        assert_golden(golden, &outputs[0].0);
        if let Some(g) = stdout_golden {
            assert_golden(g, &outputs[0].1);
        }
    }

    let produced = read_jsonl(std::path::Path::new(&tmp("reward.jsonl")));
    let expected = read_jsonl(&fixture("expected_rewards10.jsonl"));
    check!(
        produced.len() == expected.len(),
        "{} records vs {}",
        produced.len(),
        expected.len()
    );
    for (i, (p, e)) in produced.iter().zip(&expected).enumerate() {
        close(p, e, &format!("record {i}"))?;
    }
    Ok(format!(
        "{} subcommand runs match goldens, {} reward records within 1e-9",
        runs.len(),
        expected.len()
    ))
}

// ----------------------------------------------------------------

fn main() -> ExitCode {
    let criteria: [Criterion; 10] = [
        ("tie-model probabilities", c01_tie_model),
        ("attribution reward oracle", c02_attribution_oracle),
        ("advantage identities", c03_advantages),
        ("objective gradient check", c04_gradient_check),
        ("toy policy learning", c05_toy_learning),
        ("metric consistency", c06_metrics),
        ("end-to-end oracle run", c07_end_to_end),
        ("frame sampler", c08_sampler),
        ("parser fuzz", c09_parser_fuzz),
        ("reproducibility", c10_reproducibility),
    ];
    let filter: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        if !filter.is_empty() && !filter.iter().any(|p| name.contains(p.as_str())) {
            continue;
        }
        let start = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("[PASS] {:02} {name} ({detail}; {secs:.2}s)", i + 1),
            Err(why) => {
                failed += 1;
                println!("[FAIL] {:02} {name} ({why}; {secs:.2}s)", i + 1);
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criterion(s) failed");
        ExitCode::FAILURE
    }
}
