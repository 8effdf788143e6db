use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::time::Duration;

use anyhow::{anyhow, bail, Context, Result};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use framereward::bench::{self, ConfusionCounts, PrecisionRecall};
use framereward::dataset::{self, FramePairRecord, FrameRollout};
use framereward::gateway::{
    self, EndpointConfig, GenerationParams, HttpScorer, MockScorer, RetryPolicy, ScoreRequest,
    Scorer,
};
use framereward::grpo::{self, PairContext, Side};
use framereward::reward::score_rollout_pair;
use framereward::sampler;
use framereward::taxonomy::{pseudo_score_band, sample_pseudo_score};

use crate::config::RunConfig;
use crate::output::{emit_report, jsonl, write_atomic};
use crate::{
    BenchFramesCmd, BenchPrefCmd, FilterCotCmd, GrpoDemoCmd, PseudoScoreCmd, RewardCmd,
    SamplePlanCmd, ScoreCmd, ValidateCmd,
};

fn problem_list(problems: &[String]) -> String {
    problems
        .iter()
        .map(|p| format!("  {p}"))
        .collect::<Vec<_>>()
        .join("\n")
}

#[derive(Debug, Serialize)]
pub struct RewardRecord {
    pub pair_id: String,
    pub rollout_index: usize,
    pub r_fmt_a: f64,
    pub r_attr_a: f64,
    pub r_pref: f64,
    pub reward_a: f64,
    pub r_fmt_b: f64,
    pub r_attr_b: f64,
    pub reward_b: f64,
    /// Group-normalized advantages; null when a side has a single rollout.
    pub advantage_a: Option<f64>,
    pub advantage_b: Option<f64>,
}

type SideTexts = BTreeMap<usize, String>;

pub fn reward(c: &RewardCmd, cfg: &RunConfig) -> Result<()> {
    let pairs = dataset::ingest_pairs(&c.pairs)?;
    let rollouts = dataset::ingest_pair_rollouts(&c.rollouts)?;
    let index: HashMap<&str, usize> = pairs
        .iter()
        .enumerate()
        .map(|(i, p)| (p.pair_id.as_str(), i))
        .collect();

    let mut problems = Vec::new();
    let mut by_pair: BTreeMap<usize, (SideTexts, SideTexts)> = BTreeMap::new();
    for r in rollouts {
        let Some(&i) = index.get(r.pair_id.as_str()) else {
            problems.push(format!("unknown pair_id {:?}", r.pair_id));
            continue;
        };
        let entry = by_pair.entry(i).or_default();
        let side = match r.side {
            Side::A => &mut entry.0,
            Side::B => &mut entry.1,
        };
        if side.insert(r.rollout_index, r.text).is_some() {
            problems.push(format!(
                "pair {:?} side {:?} has rollout_index {} twice",
                r.pair_id, r.side, r.rollout_index
            ));
        }
    }
    for (&i, (a, b)) in &by_pair {
        let ids_a: Vec<_> = a.keys().copied().collect();
        let ids_b: Vec<_> = b.keys().copied().collect();
        if ids_a != ids_b {
            problems.push(format!(
                "pair {:?}: rollout indices differ between sides ({ids_a:?} vs {ids_b:?})",
                pairs[i].pair_id
            ));
        }
    }
    if !problems.is_empty() {
        bail!(
            "{} rollout problem(s):\n{}",
            problems.len(),
            problem_list(&problems)
        );
    }

    let w = cfg.reward;
    let floor = cfg.grpo.std_floor;
    let jobs: Vec<(&FramePairRecord, &(SideTexts, SideTexts))> =
        by_pair.iter().map(|(&i, v)| (&pairs[i], v)).collect();
    let per_pair: Vec<Vec<RewardRecord>> = jobs
        .par_iter()
        .map(|(pair, (a, b))| -> Result<Vec<RewardRecord>> {
            let mut recs = Vec::with_capacity(a.len());
            for ((&idx, ta), tb) in a.iter().zip(b.values()) {
                let s =
                    score_rollout_pair(ta, tb, pair.a.labels(), pair.b.labels(), pair.gt_pref, &w)?;
                recs.push(RewardRecord {
                    pair_id: pair.pair_id.clone(),
                    rollout_index: idx,
                    r_fmt_a: s.a.r_fmt,
                    r_attr_a: s.a.r_attr,
                    r_pref: s.r_pref,
                    reward_a: s.a.reward,
                    r_fmt_b: s.b.r_fmt,
                    r_attr_b: s.b.r_attr,
                    reward_b: s.b.reward,
                    advantage_a: None,
                    advantage_b: None,
                });
            }
            if recs.len() >= 2 {
                let ra: Vec<f64> = recs.iter().map(|r| r.reward_a).collect();
                let rb: Vec<f64> = recs.iter().map(|r| r.reward_b).collect();
                let aa = grpo::group_advantages(&ra, floor)?;
                let ab = grpo::group_advantages(&rb, floor)?;
                for (r, (x, y)) in recs.iter_mut().zip(aa.into_iter().zip(ab)) {
                    r.advantage_a = Some(x);
                    r.advantage_b = Some(y);
                }
            }
            Ok(recs)
        })
        .collect::<Result<_>>()?;
    let records: Vec<RewardRecord> = per_pair.into_iter().flatten().collect();
    write_atomic(&c.out, &jsonl(&records)?)?;

    emit_report(
        c.report.as_deref(),
        &json!({
            "config": cfg,
            "pairs": by_pair.len(),
            "records": records.len(),
        }),
    )
}

pub fn bench_pref(c: &BenchPrefCmd, cfg: &RunConfig) -> Result<()> {
    let pairs = dataset::ingest_pairs(&c.pairs)?;
    let preds = dataset::ingest_pair_predictions(&c.predictions)?;
    let by_id: HashMap<&str, &dataset::PairPrediction> =
        preds.iter().map(|p| (p.pair_id.as_str(), p)).collect();

    let missing: Vec<String> = pairs
        .iter()
        .filter(|p| !by_id.contains_key(p.pair_id.as_str()))
        .map(|p| p.pair_id.clone())
        .collect();
    if !missing.is_empty() {
        bail!(
            "no prediction for {} pair(s): {}",
            missing.len(),
            missing.join(", ")
        );
    }
    let known: HashMap<&str, ()> = pairs.iter().map(|p| (p.pair_id.as_str(), ())).collect();
    let stray: Vec<&str> = preds
        .iter()
        .map(|p| p.pair_id.as_str())
        .filter(|id| !known.contains_key(id))
        .collect();
    if !stray.is_empty() {
        bail!("predictions for unknown pair(s): {}", stray.join(", "));
    }

    let gts: Vec<_> = pairs.iter().map(|p| p.gt_pref).collect();
    let scores: Vec<(f64, f64)> = pairs
        .iter()
        .map(|p| {
            let s = by_id[p.pair_id.as_str()];
            (s.score_a, s.score_b)
        })
        .collect();
    let labels: Vec<_> = scores
        .iter()
        .map(|&(a, b)| bench::preference_from_scores(a, b, cfg.tie_threshold))
        .collect();
    let acc_with_tie = bench::accuracy_with_tie(&labels, &gts)?;
    let acc_without_tie = bench::accuracy_without_tie(&scores, &gts)?;

    let correct_with_tie = labels.iter().zip(&gts).filter(|(p, g)| p == g).count();
    let decisive = bench::decisive_count(&gts);
    emit_report(
        c.out.as_deref(),
        &json!({
            "config": cfg,
            "tie_threshold": cfg.tie_threshold,
            "acc_with_tie": acc_with_tie,
            "acc_without_tie": acc_without_tie,
            "counts": {
                "pairs": pairs.len(),
                "decisive": decisive,
                "gt_ties": pairs.len() - decisive,
                "correct_with_tie": correct_with_tie,
            },
        }),
    )
}

#[derive(Serialize)]
struct ClassReport {
    precision: f64,
    recall: f64,
    f1: f64,
    counts: ConfusionCounts,
}

impl ClassReport {
    fn new(counts: ConfusionCounts) -> Self {
        let PrecisionRecall {
            precision,
            recall,
            f1,
        } = bench::precision_recall_f1(&counts);
        Self {
            precision,
            recall,
            f1,
            counts,
        }
    }
}

pub fn bench_frames(c: &BenchFramesCmd, cfg: &RunConfig) -> Result<()> {
    let frames = dataset::ingest_frames(&c.frames)?;
    let preds = dataset::ingest_frame_predictions(&c.predictions)?;
    let by_id: HashMap<&str, &dataset::FramePrediction> =
        preds.iter().map(|p| (p.frame_id.as_str(), p)).collect();

    let missing: Vec<&str> = frames
        .iter()
        .map(|f| f.frame_id.as_str())
        .filter(|id| !by_id.contains_key(id))
        .collect();
    let known: HashMap<&str, ()> = frames.iter().map(|f| (f.frame_id.as_str(), ())).collect();
    let stray: Vec<&str> = preds
        .iter()
        .map(|p| p.frame_id.as_str())
        .filter(|id| !known.contains_key(id))
        .collect();
    if !missing.is_empty() || !stray.is_empty() {
        let mut msg = Vec::new();
        if !missing.is_empty() {
            msg.push(format!(
                "no prediction for frame(s): {}",
                missing.join(", ")
            ));
        }
        if !stray.is_empty() {
            msg.push(format!(
                "predictions for unknown frame(s): {}",
                stray.join(", ")
            ));
        }
        bail!("{}", msg.join("; "));
    }

    let gts: Vec<_> = frames.iter().map(|f| f.labels().clone()).collect();
    let predicted: Vec<_> = frames
        .iter()
        .map(|f| by_id[f.frame_id.as_str()].labels.clone())
        .collect();
    let (distorted, normal) = bench::recognition_confusion(&predicted, &gts)?;
    emit_report(
        c.out.as_deref(),
        &json!({
            "config": cfg,
            "frames": frames.len(),
            "distorted": ClassReport::new(distorted),
            "normal": ClassReport::new(normal),
        }),
    )
}

pub fn sample_plan(c: &SamplePlanCmd, cfg: &RunConfig) -> Result<()> {
    let text = std::fs::read_to_string(&c.scores)
        .with_context(|| format!("cannot read {}", c.scores.display()))?;
    let doc: Value = serde_json::from_str(&text)
        .with_context(|| format!("{} is not valid JSON", c.scores.display()))?;
    let raw = doc
        .get("scores")
        .and_then(Value::as_object)
        .ok_or_else(|| anyhow!("{}: missing object field `scores`", c.scores.display()))?;
    let mut scores = BTreeMap::new();
    for (k, v) in raw {
        let idx: usize = k
            .parse()
            .map_err(|_| anyhow!("scores key {k:?} is not a frame index"))?;
        let s = v
            .as_f64()
            .filter(|s| (1.0..=5.0).contains(s))
            .ok_or_else(|| anyhow!("score for frame {k} must be a number in [1, 5]"))?;
        scores.insert(idx, s);
    }
    let n_frames = doc
        .get("n_frames")
        .and_then(Value::as_u64)
        .map(|n| n as usize);
    let scfg = cfg.sampler_config(n_frames)?;
    let stage1 = sampler::stage1_indices(&scfg)?;
    let given: Vec<usize> = scores.keys().copied().collect();
    if given != stage1 {
        bail!("scores must cover exactly the stage-1 frames {stage1:?}, got {given:?}");
    }
    let stage1_scores: Vec<f64> = stage1.iter().map(|i| scores[i]).collect();
    let plan = sampler::plan(&scfg, &stage1_scores)?;

    let video_id = c
        .video_id
        .clone()
        .or_else(|| {
            doc.get("video_id")
                .and_then(Value::as_str)
                .map(str::to_string)
        })
        .or_else(|| {
            c.scores
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
        })
        .unwrap_or_default();
    emit_report(
        c.out.as_deref(),
        &json!({
            "video_id": video_id,
            "case": plan.case_tag.as_str(),
            "stage1": plan.stage1,
            "stage2": plan.stage2,
            "diagnostics": plan.diagnostics,
            "n_frames": scfg.n_frames,
            "window": scfg.window(),
            "config": cfg,
        }),
    )
}

fn contexts_from_pairs(pairs: &[FramePairRecord]) -> Vec<PairContext> {
    pairs
        .iter()
        .enumerate()
        .map(|(i, p)| PairContext {
            context_id: i,
            prompt: p.prompt.clone(),
            frame_ref_a: p.a.frame_ref.clone(),
            frame_ref_b: p.b.frame_ref.clone(),
            gt_labels_a: p.a.labels().clone(),
            gt_labels_b: p.b.labels().clone(),
            gt_pref: p.gt_pref,
        })
        .collect()
}

pub fn grpo_demo(c: &GrpoDemoCmd, cfg: &RunConfig) -> Result<()> {
    let contexts = match &c.pairs {
        Some(path) => contexts_from_pairs(&dataset::ingest_pairs(path)?),
        None => grpo::always_a_wins_fixture(cfg.contexts),
    };
    let outcome = grpo::grpo_train(&contexts, &cfg.grpo, &cfg.reward)?;
    write_atomic(&c.out, &jsonl(&outcome.stats)?)?;
    let last = outcome.stats.last();
    emit_report(
        c.report.as_deref(),
        &json!({
            "config": cfg,
            "contexts": contexts.len(),
            "steps": outcome.stats.len(),
            "initial_score_gap": outcome.initial_score_gap,
            "final_score_gap": last.map_or(outcome.initial_score_gap, |s| s.score_gap),
            "final_mean_kl": last.map_or(0.0, |s| s.mean_kl),
            "max_total_variation": grpo::max_total_variation(&outcome.policy, &outcome.reference),
        }),
    )
}

pub fn pseudo_score(c: &PseudoScoreCmd, cfg: &RunConfig) -> Result<()> {
    let frames = dataset::ingest_frames(&c.frames)?;
    let records: Vec<Value> = frames
        .iter()
        .map(|f| {
            let n = f.labels().len();
            let band = pseudo_score_band(n);
            json!({
                "frame_id": f.frame_id,
                "n_labels": n,
                "band": [band.lo, band.hi],
                "score": sample_pseudo_score(n, cfg.seed ^ gateway::frame_hash(&f.frame_ref)),
            })
        })
        .collect();
    write_atomic(&c.out, &jsonl(&records)?)
}

fn candidate_json(c: &bench::CotCandidate) -> Value {
    let boxes: serde_json::Map<String, Value> = c
        .regions
        .iter()
        .map(|(l, bs)| {
            let list = bs
                .iter()
                .map(|b| Value::from(b.coords().to_vec()))
                .collect();
            (l.as_str().to_string(), Value::Array(list))
        })
        .collect();
    json!({
        "frame_id": c.frame_id,
        "labels": c.labels.to_strings(),
        "bboxes": boxes,
        "reasoning": c.reasoning,
    })
}

pub fn filter_cot(c: &FilterCotCmd, cfg: &RunConfig) -> Result<()> {
    let frames = dataset::ingest_frames(&c.frames)?;
    let candidates = dataset::ingest_cot_candidates(&c.candidates)?;
    let gt: HashMap<&str, _> = frames.iter().map(|f| (f.frame_id.as_str(), f)).collect();
    let unknown: Vec<&str> = candidates
        .iter()
        .map(|c| c.frame_id.as_str())
        .filter(|id| !gt.contains_key(id))
        .collect();
    if !unknown.is_empty() {
        bail!(
            "candidates reference unknown frame(s): {}",
            unknown.join(", ")
        );
    }

    let mut kept = Vec::new();
    let mut discarded = Vec::new();
    for cand in &candidates {
        let verdict = bench::filter_cot(cand, gt[cand.frame_id.as_str()], cfg.iou_threshold);
        if verdict.keep {
            kept.push(candidate_json(cand));
        } else {
            discarded.push(json!({"frame_id": cand.frame_id, "reasons": verdict.reasons}));
        }
    }
    write_atomic(&c.out, &jsonl(&kept)?)?;
    emit_report(
        c.report.as_deref(),
        &json!({
            "config": cfg,
            "iou_threshold": cfg.iou_threshold,
            "candidates": candidates.len(),
            "kept": kept.len(),
            "discarded": discarded,
        }),
    )
}

pub fn validate(c: &ValidateCmd) -> Result<()> {
    fn check<T>(
        kind: &str,
        path: &Path,
        load: impl Fn(&Path) -> Result<Vec<T>, dataset::DatasetError>,
    ) -> Value {
        match load(path) {
            Ok(recs) => json!({
                "path": path.display().to_string(),
                "kind": kind,
                "records": recs.len(),
                "errors": [],
            }),
            Err(e) => {
                let errors: Vec<Value> = match &e {
                    dataset::DatasetError::Io { .. } => {
                        vec![json!({"line": null, "field": null, "reason": e.to_string()})]
                    }
                    dataset::DatasetError::Invalid { errors, .. } => errors
                        .iter()
                        .map(|le| match le {
                            dataset::LineError::Schema {
                                line,
                                field,
                                reason,
                            } => {
                                json!({"line": line, "field": field, "reason": reason})
                            }
                            dataset::LineError::DuplicateId { line, id } => json!({
                                "line": line,
                                "field": null,
                                "reason": format!("duplicate id {id:?}"),
                            }),
                        })
                        .collect(),
                };
                json!({
                    "path": path.display().to_string(),
                    "kind": kind,
                    "records": null,
                    "errors": errors,
                })
            }
        }
    }

    let mut files = Vec::new();
    files.extend(
        c.pairs
            .iter()
            .map(|p| check("pairs", p, dataset::ingest_pairs)),
    );
    files.extend(
        c.frames
            .iter()
            .map(|p| check("frames", p, dataset::ingest_frames)),
    );
    files.extend(
        c.pair_predictions
            .iter()
            .map(|p| check("pair-predictions", p, dataset::ingest_pair_predictions)),
    );
    files.extend(
        c.frame_predictions
            .iter()
            .map(|p| check("frame-predictions", p, dataset::ingest_frame_predictions)),
    );
    files.extend(
        c.rollouts
            .iter()
            .map(|p| check("rollouts", p, dataset::ingest_pair_rollouts)),
    );
    files.extend(
        c.candidates
            .iter()
            .map(|p| check("candidates", p, dataset::ingest_cot_candidates)),
    );
    if files.is_empty() {
        bail!("nothing to validate; pass at least one file flag");
    }
    let error_count: usize = files
        .iter()
        .map(|f| f["errors"].as_array().map_or(0, Vec::len))
        .sum();
    emit_report(
        c.out.as_deref(),
        &json!({"files": files, "error_count": error_count}),
    )?;
    if error_count > 0 {
        bail!("{error_count} validation error(s)");
    }
    Ok(())
}

/// Optional `prompt` captions keyed by frame id.
fn frame_captions(path: &Path) -> Result<HashMap<String, String>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = HashMap::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let v: Value = serde_json::from_str(line)?;
        if let (Some(id), Some(p)) = (
            v.get("frame_id").and_then(Value::as_str),
            v.get("prompt").and_then(Value::as_str),
        ) {
            out.insert(id.to_string(), p.to_string());
        }
    }
    Ok(out)
}

pub fn score(c: &ScoreCmd, cfg: &RunConfig, jobs: Option<usize>) -> Result<()> {
    let frames = dataset::ingest_frames(&c.frames)?;
    let captions = frame_captions(&c.frames)?;
    let e = &cfg.endpoint;
    let params = GenerationParams {
        max_tokens: e.max_tokens,
        temperature: e.temperature,
        n_samples: e.n_samples,
    };
    let reqs: Vec<ScoreRequest> = frames
        .iter()
        .map(|f| {
            let caption = captions.get(&f.frame_id).map(String::as_str).unwrap_or("");
            ScoreRequest::new(
                f.frame_id.clone(),
                e.prompt_kind,
                caption,
                f.frame_ref.clone(),
                params,
            )
        })
        .collect();

    let scorer: Box<dyn Scorer + Send> = match &c.mock {
        Some(path) => Box::new(MockScorer::new(&dataset::ingest_frames(path)?, cfg.seed)),
        None => {
            let mut ep = EndpointConfig::from_env(e.base_url.as_deref())?;
            ep.request_timeout = Duration::from_secs(e.timeout_secs);
            ep.retry = RetryPolicy {
                base_delay: Duration::from_millis(e.retry_base_ms),
                max_attempts: e.max_attempts,
                ..RetryPolicy::default()
            };
            ep.max_payload_bytes = e.max_payload_bytes;
            Box::new(HttpScorer::new(ep)?)
        }
    };
    let parallelism = jobs.unwrap_or(gateway::DEFAULT_PARALLELISM);
    let results = gateway::score_many(scorer.as_ref(), &reqs, parallelism);

    let mut records = Vec::new();
    let mut failures = Vec::new();
    for (f, r) in frames.iter().zip(results) {
        match r {
            Ok(resp) => records.extend(resp.raw_texts.into_iter().enumerate().map(|(i, text)| {
                FrameRollout {
                    frame_id: f.frame_id.clone(),
                    rollout_index: i,
                    text,
                    model_id: resp.model_id.clone(),
                }
            })),
            Err(err) => failures.push((f.frame_id.clone(), err)),
        }
    }
    if !failures.is_empty() {
        for (id, e) in failures.iter().skip(1) {
            eprintln!("frame {id}: {e}");
        }
        let n = failures.len();
        let (id, first) = failures.swap_remove(0);
        let more = if n > 1 {
            format!(" (and {} more)", n - 1)
        } else {
            String::new()
        };
        return Err(anyhow::Error::new(first).context(format!(
            "{n} of {} request(s) failed; frame {id}{more}",
            frames.len()
        )));
    }
    write_atomic(&c.out, &jsonl(&records)?)?;
    emit_report(
        c.report.as_deref(),
        &json!({
            "config": cfg,
            "mode": if c.mock.is_some() { "mock" } else { "endpoint" },
            "frames": frames.len(),
            "records": records.len(),
        }),
    )
}
