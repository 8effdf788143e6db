//! Group-relative policy optimization at desk scale.
//!
//! Rewards are outcome-level, so every "token" of a rollout shares the
//! rollout's advantage, and the toy policy emits a single categorical action
//! per rollout. The action is a (score bin, label subset) pair; it is rendered
//! to canonical response text so that training runs through the real parser
//! and reward path.
//!
//! The objective maximized is
//!
//! ```text
//! J = mean_groups [ (1/G) Σ_i min(r_i A_i, clip(r_i, 1-ε, 1+ε) A_i) - β KL(π ‖ π_ref) ]
//! ```
//!
//! with `r_i = π(a_i|q) / π_old(a_i|q)` and the KL computed exactly over the
//! categorical action distribution.

use rand::distributions::{Distribution, WeightedIndex};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::parser::render_response;
use crate::reward::{score_rollout_pair, Preference, RewardError, RewardWeights};
use crate::taxonomy::{DistortionLabel, LabelSet};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GrpoError {
    #[error("a group needs at least 2 rollouts, got {0}")]
    GroupTooSmall(usize),
    #[error("distributions have different support ({0} vs {1} entries)")]
    SupportMismatch(usize, usize),
    #[error("reference distribution is zero where the policy is not (index {0})")]
    ZeroReference(usize),
    #[error("mask selects no position")]
    EmptyMask,
    #[error("length mismatch: {0} log-probs vs {1} mask entries")]
    LengthMismatch(usize, usize),
    #[error("invalid config: {0}")]
    InvalidConfig(&'static str),
    #[error("no training contexts")]
    NoContexts,
    #[error(transparent)]
    Reward(#[from] RewardError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GrpoConfig {
    pub group_size: usize,
    pub clip_eps: f64,
    pub kl_beta: f64,
    pub std_floor: f64,
    pub learning_rate: f64,
    pub steps: usize,
    pub seed: u64,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self {
            group_size: 8,
            clip_eps: 0.2,
            kl_beta: 0.01,
            std_floor: 1e-6,
            learning_rate: DEFAULT_LEARNING_RATE,
            steps: 300,
            seed: 42,
        }
    }
}

/// Step size for the tabular toy policy. The objective averages over every
/// group, so per-logit gradients shrink with the number of contexts.
pub const DEFAULT_LEARNING_RATE: f64 = 100.0;

impl GrpoConfig {
    pub fn validate(&self) -> Result<(), GrpoError> {
        if self.group_size < 2 {
            return Err(GrpoError::InvalidConfig("group_size must be >= 2"));
        }
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return Err(GrpoError::InvalidConfig("clip_eps must lie in (0, 1)"));
        }
        if !(self.kl_beta >= 0.0) || !self.kl_beta.is_finite() {
            return Err(GrpoError::InvalidConfig("kl_beta must be >= 0"));
        }
        if !(self.std_floor > 0.0) {
            return Err(GrpoError::InvalidConfig("std_floor must be > 0"));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(GrpoError::InvalidConfig("learning_rate must be >= 0"));
        }
        Ok(())
    }
}

/// `(R_i - mean) / max(std, floor)` with the population standard deviation.
pub fn group_advantages(rewards: &[f64], std_floor: f64) -> Result<Vec<f64>, GrpoError> {
    let g = rewards.len();
    if g < 2 {
        return Err(GrpoError::GroupTooSmall(g));
    }
    let n = g as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let denom = var.sqrt().max(std_floor);
    Ok(rewards.iter().map(|r| (r - mean) / denom).collect())
}

/// `min(ratio·A, clip(ratio, 1-ε, 1+ε)·A)`.
pub fn clipped_term(ratio: f64, advantage: f64, clip_eps: f64) -> f64 {
    let clipped = ratio.clamp(1.0 - clip_eps, 1.0 + clip_eps);
    (ratio * advantage).min(clipped * advantage)
}

/// d clipped_term / d ratio.
fn clipped_term_slope(ratio: f64, advantage: f64, clip_eps: f64) -> f64 {
    let clipped = ratio.clamp(1.0 - clip_eps, 1.0 + clip_eps);
    if ratio * advantage <= clipped * advantage {
        advantage
    } else {
        0.0
    }
}

/// Exact `Σ p ln(p/q)`.
pub fn categorical_kl(p: &[f64], q: &[f64]) -> Result<f64, GrpoError> {
    if p.len() != q.len() {
        return Err(GrpoError::SupportMismatch(p.len(), q.len()));
    }
    let mut kl = 0.0;
    for (i, (&pi, &qi)) in p.iter().zip(q).enumerate() {
        if pi > 0.0 {
            if !(qi > 0.0) {
                return Err(GrpoError::ZeroReference(i));
            }
            kl += pi * (pi / qi).ln();
        }
    }
    Ok(kl.max(0.0))
}

/// Negative mean log-probability over the selected positions.
pub fn masked_nll(token_logprobs: &[f64], loss_mask: &[bool]) -> Result<f64, GrpoError> {
    if token_logprobs.len() != loss_mask.len() {
        return Err(GrpoError::LengthMismatch(
            token_logprobs.len(),
            loss_mask.len(),
        ));
    }
    let (sum, count) = token_logprobs
        .iter()
        .zip(loss_mask)
        .filter(|(_, &m)| m)
        .fold((0.0, 0usize), |(s, c), (lp, _)| (s + lp, c + 1));
    if count == 0 {
        return Err(GrpoError::EmptyMask);
    }
    Ok(-sum / count as f64)
}

/// Joint (score bin, label subset) vocabulary of the toy policy.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionSpace {
    scores: Vec<f64>,
    label_sets: Vec<LabelSet>,
}

impl ActionSpace {
    /// Scores 1.00, 1.25, …, 5.00 and every label set of size ≤ 2.
    pub fn standard() -> Self {
        let scores = (0..=16).map(|k| 1.0 + 0.25 * k as f64).collect();
        let d = DistortionLabel::DISTORTIONS;
        let mut label_sets = vec![LabelSet::prediction([]).unwrap()];
        for &l in &d {
            label_sets.push(LabelSet::prediction([l]).unwrap());
        }
        for i in 0..d.len() {
            for j in i + 1..d.len() {
                label_sets.push(LabelSet::prediction([d[i], d[j]]).unwrap());
            }
        }
        Self { scores, label_sets }
    }

    pub fn len(&self) -> usize {
        self.scores.len() * self.label_sets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn score(&self, action: usize) -> f64 {
        self.scores[action / self.label_sets.len()]
    }

    pub fn labels(&self, action: usize) -> &LabelSet {
        &self.label_sets[action % self.label_sets.len()]
    }

    /// Canonical rollout text for an action.
    pub fn render(&self, action: usize) -> String {
        let labels = self.labels(action);
        let think = format!("Inspected the frame; found {} issue(s).", labels.len());
        render_response(&think, labels, Some(self.score(action)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Side {
    A,
    B,
}

/// Tabular softmax policy: one logit row per (context, side) input.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyPolicy {
    n_actions: usize,
    logits: Vec<f64>,
}

impl ToyPolicy {
    pub fn uniform(n_inputs: usize, n_actions: usize) -> Self {
        Self {
            n_actions,
            logits: vec![0.0; n_inputs * n_actions],
        }
    }

    pub fn from_logits(n_actions: usize, logits: Vec<f64>) -> Self {
        assert!(n_actions > 0 && logits.len().is_multiple_of(n_actions));
        Self { n_actions, logits }
    }

    pub fn n_inputs(&self) -> usize {
        self.logits.len() / self.n_actions
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn logits_mut(&mut self) -> &mut [f64] {
        &mut self.logits
    }

    pub fn row(&self, input: usize) -> &[f64] {
        &self.logits[input * self.n_actions..(input + 1) * self.n_actions]
    }

    pub fn log_probs(&self, input: usize) -> Vec<f64> {
        log_softmax(self.row(input))
    }

    pub fn probs(&self, input: usize) -> Vec<f64> {
        self.log_probs(input).into_iter().map(f64::exp).collect()
    }

    pub fn input_of(context_id: usize, side: Side) -> usize {
        2 * context_id + matches!(side, Side::B) as usize
    }

    fn sample(&self, input: usize, n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let dist = WeightedIndex::new(self.probs(input)).expect("softmax weights are positive");
        (0..n).map(|_| dist.sample(rng)).collect()
    }
}

fn log_softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    z.iter().map(|v| v - lse).collect()
}

/// KL between two rows computed from log-probabilities.
fn kl_from_logs(lp: &[f64], lq: &[f64]) -> f64 {
    lp.iter()
        .zip(lq)
        .map(|(a, b)| a.exp() * (a - b))
        .sum::<f64>()
        .max(0.0)
}

/// One frame pair used as a training prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct PairContext {
    pub context_id: usize,
    pub prompt: String,
    pub frame_ref_a: String,
    pub frame_ref_b: String,
    pub gt_labels_a: LabelSet,
    pub gt_labels_b: LabelSet,
    pub gt_pref: Preference,
}

/// G rollouts of one side of one pair, with their rewards and advantages.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutGroup {
    pub pair_id: String,
    pub side: Side,
    pub input: usize,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
}

impl RolloutGroup {
    pub fn new(
        pair_id: impl Into<String>,
        side: Side,
        input: usize,
        actions: Vec<usize>,
        rewards: Vec<f64>,
        std_floor: f64,
    ) -> Result<Self, GrpoError> {
        let advantages = group_advantages(&rewards, std_floor)?;
        Ok(Self {
            pair_id: pair_id.into(),
            side,
            input,
            actions,
            rewards,
            advantages,
        })
    }
}

/// Index-matched rollouts for both frames of a pair.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyRollouts {
    pub actions_a: Vec<usize>,
    pub actions_b: Vec<usize>,
    pub texts_a: Vec<String>,
    pub texts_b: Vec<String>,
}

pub fn rollout_toy(
    policy: &ToyPolicy,
    space: &ActionSpace,
    ctx: &PairContext,
    group_size: usize,
    seed: u64,
) -> Result<ToyRollouts, GrpoError> {
    if group_size < 2 {
        return Err(GrpoError::GroupTooSmall(group_size));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let actions_a = policy.sample(
        ToyPolicy::input_of(ctx.context_id, Side::A),
        group_size,
        &mut rng,
    );
    let actions_b = policy.sample(
        ToyPolicy::input_of(ctx.context_id, Side::B),
        group_size,
        &mut rng,
    );
    let texts_a = actions_a.iter().map(|&a| space.render(a)).collect();
    let texts_b = actions_b.iter().map(|&a| space.render(a)).collect();
    Ok(ToyRollouts {
        actions_a,
        actions_b,
        texts_a,
        texts_b,
    })
}

/// Objective value and its gradient with respect to `policy`'s logits.
pub fn grpo_objective_and_grad(
    policy: &ToyPolicy,
    old_policy: &ToyPolicy,
    ref_policy: &ToyPolicy,
    groups: &[RolloutGroup],
    cfg: &GrpoConfig,
) -> Result<(f64, Vec<f64>), GrpoError> {
    let n_actions = policy.n_actions();
    if old_policy.n_actions() != n_actions || ref_policy.n_actions() != n_actions {
        return Err(GrpoError::SupportMismatch(
            n_actions,
            old_policy.n_actions(),
        ));
    }
    let mut grad = vec![0.0; policy.logits().len()];
    if groups.is_empty() {
        return Ok((0.0, grad));
    }
    let norm = 1.0 / groups.len() as f64;
    let mut total = 0.0;

    for group in groups {
        let lp = policy.log_probs(group.input);
        let lold = old_policy.log_probs(group.input);
        let lref = ref_policy.log_probs(group.input);
        let probs: Vec<f64> = lp.iter().map(|v| v.exp()).collect();
        let g = group.actions.len() as f64;
        let row = &mut grad[group.input * n_actions..(group.input + 1) * n_actions];

        let mut surrogate = 0.0;
        for (&a, &adv) in group.actions.iter().zip(&group.advantages) {
            let ratio = (lp[a] - lold[a]).exp();
            surrogate += clipped_term(ratio, adv, cfg.clip_eps);
            let slope = clipped_term_slope(ratio, adv, cfg.clip_eps);
            if slope != 0.0 {
                // d ratio / d z_k = ratio (1[k = a] - π_k)
                let c = norm * slope * ratio / g;
                for (gk, pk) in row.iter_mut().zip(&probs) {
                    *gk -= c * pk;
                }
                row[a] += c;
            }
        }
        let kl = kl_from_logs(&lp, &lref);
        total += surrogate / g - cfg.kl_beta * kl;

        if cfg.kl_beta != 0.0 {
            // d KL / d z_k = π_k (ln π_k - ln ρ_k - KL)
            for k in 0..n_actions {
                row[k] -= norm * cfg.kl_beta * probs[k] * (lp[k] - lref[k] - kl);
            }
        }
    }
    Ok((total * norm, grad))
}

pub fn grpo_objective(
    policy: &ToyPolicy,
    old_policy: &ToyPolicy,
    ref_policy: &ToyPolicy,
    groups: &[RolloutGroup],
    cfg: &GrpoConfig,
) -> Result<f64, GrpoError> {
    grpo_objective_and_grad(policy, old_policy, ref_policy, groups, cfg).map(|(v, _)| v)
}

/// Expected predicted score for one input.
pub fn expected_score(policy: &ToyPolicy, space: &ActionSpace, input: usize) -> f64 {
    policy
        .probs(input)
        .iter()
        .enumerate()
        .map(|(a, p)| p * space.score(a))
        .sum()
}

/// Mean over contexts of `E[s_A] - E[s_B]`.
pub fn score_gap(policy: &ToyPolicy, space: &ActionSpace, contexts: &[PairContext]) -> f64 {
    let sum: f64 = contexts
        .iter()
        .map(|c| {
            expected_score(policy, space, ToyPolicy::input_of(c.context_id, Side::A))
                - expected_score(policy, space, ToyPolicy::input_of(c.context_id, Side::B))
        })
        .sum();
    sum / contexts.len() as f64
}

/// Largest per-input total-variation distance between two policies.
pub fn max_total_variation(p: &ToyPolicy, q: &ToyPolicy) -> f64 {
    (0..p.n_inputs())
        .map(|i| {
            0.5 * p
                .probs(i)
                .iter()
                .zip(q.probs(i))
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>()
        })
        .fold(0.0, f64::max)
}

fn mean_kl(policy: &ToyPolicy, reference: &ToyPolicy) -> f64 {
    let n = policy.n_inputs();
    (0..n)
        .map(|i| kl_from_logs(&policy.log_probs(i), &reference.log_probs(i)))
        .sum::<f64>()
        / n as f64
}

/// Per-step training statistics, one JSONL line each.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub step: usize,
    /// Mean composite reward of the rollouts sampled this step.
    pub mean_reward: f64,
    /// Mean KL to the reference after the update.
    pub mean_kl: f64,
    /// Objective after the update, on this step's rollouts.
    pub objective: f64,
    /// Expected score gap after the update.
    pub score_gap: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub policy: ToyPolicy,
    pub reference: ToyPolicy,
    pub initial_score_gap: f64,
    pub stats: Vec<StepStats>,
}

/// Stable 64-bit mixing of a seed with a stream index (splitmix64 finalizer).
pub fn mix_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Score every index-matched rollout pair and build the two groups.
fn score_context(
    old: &ToyPolicy,
    space: &ActionSpace,
    ctx: &PairContext,
    cfg: &GrpoConfig,
    w: &RewardWeights,
    seed: u64,
) -> Result<[RolloutGroup; 2], GrpoError> {
    let ro = rollout_toy(old, space, ctx, cfg.group_size, seed)?;
    let mut rewards_a = Vec::with_capacity(cfg.group_size);
    let mut rewards_b = Vec::with_capacity(cfg.group_size);
    for (ta, tb) in ro.texts_a.iter().zip(&ro.texts_b) {
        let s = score_rollout_pair(ta, tb, &ctx.gt_labels_a, &ctx.gt_labels_b, ctx.gt_pref, w)?;
        rewards_a.push(s.a.reward);
        rewards_b.push(s.b.reward);
    }
    let pair_id = ctx.context_id.to_string();
    Ok([
        RolloutGroup::new(
            pair_id.clone(),
            Side::A,
            ToyPolicy::input_of(ctx.context_id, Side::A),
            ro.actions_a,
            rewards_a,
            cfg.std_floor,
        )?,
        RolloutGroup::new(
            pair_id,
            Side::B,
            ToyPolicy::input_of(ctx.context_id, Side::B),
            ro.actions_b,
            rewards_b,
            cfg.std_floor,
        )?,
    ])
}

/// Train a uniform toy policy on `contexts`, with the initial policy as the
/// KL reference. Deterministic for a fixed `cfg.seed`.
pub fn grpo_train(
    contexts: &[PairContext],
    cfg: &GrpoConfig,
    w: &RewardWeights,
) -> Result<TrainOutcome, GrpoError> {
    if contexts.is_empty() {
        return Err(GrpoError::NoContexts);
    }
    cfg.validate()?;
    w.validate()?;
    let space = ActionSpace::standard();
    let n_inputs = 2 * (contexts.iter().map(|c| c.context_id).max().unwrap_or(0) + 1);
    let reference = ToyPolicy::uniform(n_inputs, space.len());
    let mut policy = reference.clone();
    let initial_score_gap = score_gap(&policy, &space, contexts);
    let mut stats = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let old = policy.clone();
        let step_seed = mix_seed(cfg.seed, step as u64);
        let groups: Vec<RolloutGroup> = contexts
            .par_iter()
            .map(|ctx| {
                score_context(
                    &old,
                    &space,
                    ctx,
                    cfg,
                    w,
                    mix_seed(step_seed, ctx.context_id as u64),
                )
            })
            .collect::<Result<Vec<_>, _>>()?
            .into_iter()
            .flatten()
            .collect();

        let (_, grad) = grpo_objective_and_grad(&policy, &old, &reference, &groups, cfg)?;
        if cfg.learning_rate != 0.0 {
            for (z, g) in policy.logits_mut().iter_mut().zip(&grad) {
                *z += cfg.learning_rate * g;
            }
        }

        let n_rollouts: usize = groups.iter().map(|g| g.rewards.len()).sum();
        let mean_reward = groups.iter().flat_map(|g| &g.rewards).sum::<f64>() / n_rollouts as f64;
        stats.push(StepStats {
            step,
            mean_reward,
            mean_kl: mean_kl(&policy, &reference),
            objective: grpo_objective(&policy, &old, &reference, &groups, cfg)?,
            score_gap: score_gap(&policy, &space, contexts),
        });
    }

    Ok(TrainOutcome {
        policy,
        reference,
        initial_score_gap,
        stats,
    })
}

/// Contexts whose frame A is always preferred: A carries `k` distortion
/// labels and B carries `k + 1`, with `k` cycling through 0..=2.
pub fn always_a_wins_fixture(n: usize) -> Vec<PairContext> {
    let d = DistortionLabel::DISTORTIONS;
    (0..n)
        .map(|i| {
            let k = i % 3;
            let a: Vec<_> = (0..k).map(|j| d[(i + j) % 8]).collect();
            let b: Vec<_> = (0..=k).map(|j| d[(i + 3 + j) % 8]).collect();
            PairContext {
                context_id: i,
                prompt: format!("prompt {i}"),
                frame_ref_a: format!("pair{i:03}_a.png"),
                frame_ref_b: format!("pair{i:03}_b.png"),
                gt_labels_a: LabelSet::ground_truth(a).unwrap(),
                gt_labels_b: LabelSet::ground_truth(b).unwrap(),
                gt_pref: Preference::AWins,
            }
        })
        .collect()
}
