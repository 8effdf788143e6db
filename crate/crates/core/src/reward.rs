//! Rollout rewards: format, attribution accuracy, tie-aware preference and
//! their weighted composite.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::parser::{self, Diagnostic};
use crate::taxonomy::LabelSet;

pub const DEFAULT_THETA: f64 = 5.0;

const RIGHT_WEIGHT: f64 = 0.6;
const ERROR_WEIGHT: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RewardError {
    #[error("tie parameter theta must be > 1, got {0}")]
    InvalidTheta(f64),
    #[error("reward weights must be finite and non-negative")]
    InvalidWeights,
    #[error("scores must be finite")]
    NonFiniteScore,
}

/// Ground-truth or predicted preference over a frame pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Preference {
    #[serde(rename = "A")]
    AWins,
    #[serde(rename = "B")]
    BWins,
    #[serde(rename = "TIE")]
    Tie,
}

impl Preference {
    /// Same judgment seen with the two frames swapped.
    pub fn mirrored(self) -> Self {
        match self {
            Preference::AWins => Preference::BWins,
            Preference::BWins => Preference::AWins,
            Preference::Tie => Preference::Tie,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Preference::AWins => "A",
            Preference::BWins => "B",
            Preference::Tie => "TIE",
        }
    }
}

/// Win / lose / tie probabilities for frame A against frame B.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PreferenceProbabilities {
    pub p_win: f64,
    pub p_lose: f64,
    pub p_tie: f64,
}

impl PreferenceProbabilities {
    pub fn of(&self, outcome: Preference) -> f64 {
        match outcome {
            Preference::AWins => self.p_win,
            Preference::BWins => self.p_lose,
            Preference::Tie => self.p_tie,
        }
    }
}

/// Rao-Kupper tie model over point-wise scores.
///
/// ```text
/// p_win  = e^a / (e^a + θ e^b)
/// p_lose = e^b / (θ e^a + e^b)
/// p_tie  = (θ² − 1) e^a e^b / ((e^a + θ e^b)(θ e^a + e^b))
/// ```
///
/// Exponentials are taken after subtracting `max(a, b)`. Every operation is
/// written so that swapping the arguments swaps `p_win`/`p_lose` bit for bit.
pub fn preference_probabilities(
    s_a: f64,
    s_b: f64,
    theta: f64,
) -> Result<PreferenceProbabilities, RewardError> {
    if !(theta > 1.0) || !theta.is_finite() {
        return Err(RewardError::InvalidTheta(theta));
    }
    if !s_a.is_finite() || !s_b.is_finite() {
        return Err(RewardError::NonFiniteScore);
    }
    let m = s_a.max(s_b);
    let ea = (s_a - m).exp();
    let eb = (s_b - m).exp();
    let den_win = ea + theta * eb;
    let den_lose = theta * ea + eb;
    Ok(PreferenceProbabilities {
        p_win: ea / den_win,
        p_lose: eb / den_lose,
        p_tie: (theta * theta - 1.0) * (ea * eb) / (den_win * den_lose),
    })
}

/// Log-probability of the ground-truth outcome. Always ≤ 0.
pub fn preference_reward(probs: &PreferenceProbabilities, gt: Preference) -> f64 {
    probs.of(gt).ln()
}

/// Right / wrong / missing label counts for one rollout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct AttributionBreakdown {
    pub a_right: usize,
    pub a_wrong: usize,
    pub a_missing: usize,
}

/// Set comparison of predicted and ground-truth distortion labels.
///
/// A clean prediction on a clean frame counts as one right label.
pub fn attribution_breakdown(pred: &LabelSet, gt: &LabelSet) -> AttributionBreakdown {
    if pred.is_clean() && gt.is_clean() {
        return AttributionBreakdown {
            a_right: 1,
            a_wrong: 0,
            a_missing: 0,
        };
    }
    let p = pred.as_set();
    let g = gt.as_set();
    AttributionBreakdown {
        a_right: p.intersection(g).count(),
        a_wrong: p.difference(g).count(),
        a_missing: g.difference(p).count(),
    }
}

pub fn attribution_reward(b: &AttributionBreakdown) -> f64 {
    RIGHT_WEIGHT * b.a_right as f64 - ERROR_WEIGHT * (b.a_wrong + b.a_missing) as f64
}

/// 1.0 iff the rollout is well formed.
pub fn format_reward(parsed: &parser::ParsedResponse) -> f64 {
    if parsed.format_ok {
        1.0
    } else {
        0.0
    }
}

/// Component weights and the tie parameter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardWeights {
    pub lambda_fmt: f64,
    pub lambda_attr: f64,
    pub lambda_pref: f64,
    pub theta: f64,
    /// Score used for a rollout without a usable rating.
    pub fallback_score: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self {
            lambda_fmt: 1.0,
            lambda_attr: 1.0,
            lambda_pref: 1.0,
            theta: DEFAULT_THETA,
            fallback_score: parser::DEFAULT_FALLBACK_SCORE,
        }
    }
}

impl RewardWeights {
    pub fn validate(&self) -> Result<(), RewardError> {
        let lambdas = [self.lambda_fmt, self.lambda_attr, self.lambda_pref];
        if lambdas.iter().any(|l| !l.is_finite() || *l < 0.0) {
            return Err(RewardError::InvalidWeights);
        }
        if !(self.theta > 1.0) || !self.theta.is_finite() {
            return Err(RewardError::InvalidTheta(self.theta));
        }
        if !(1.0..=5.0).contains(&self.fallback_score) {
            return Err(RewardError::InvalidWeights);
        }
        Ok(())
    }
}

pub fn composite_reward(fmt: f64, attr: f64, pref: f64, w: &RewardWeights) -> f64 {
    w.lambda_fmt * fmt + w.lambda_attr * attr + w.lambda_pref * pref
}

/// Per-side breakdown of a scored pair.
#[derive(Debug, Clone, PartialEq)]
pub struct SideScore {
    pub r_fmt: f64,
    pub attribution: AttributionBreakdown,
    pub r_attr: f64,
    pub score: f64,
    pub reward: f64,
    pub diagnostics: Vec<Diagnostic>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairScore {
    pub a: SideScore,
    pub b: SideScore,
    pub probabilities: PreferenceProbabilities,
    /// Shared preference reward; both sides receive the same value.
    pub r_pref: f64,
}

impl PairScore {
    pub fn rewards(&self) -> (f64, f64) {
        (self.a.reward, self.b.reward)
    }
}

/// Score the i-th rollout of frame A against the i-th rollout of frame B.
///
/// Malformed text never fails: it earns zero format reward and falls back to
/// `w.fallback_score` for the preference model.
pub fn score_rollout_pair(
    text_a: &str,
    text_b: &str,
    gt_a: &LabelSet,
    gt_b: &LabelSet,
    gt_pref: Preference,
    w: &RewardWeights,
) -> Result<PairScore, RewardError> {
    let pa = parser::parse_answer(text_a);
    let pb = parser::parse_answer(text_b);
    let s_a = parser::effective_score(&pa, w.fallback_score);
    let s_b = parser::effective_score(&pb, w.fallback_score);
    let probabilities = preference_probabilities(s_a, s_b, w.theta)?;
    // rollout B's mirrored view (B vs A under the mirrored label) yields the
    // same probability, so one value serves both sides
    let r_pref = preference_reward(&probabilities, gt_pref);

    let side = |parsed: parser::ParsedResponse, gt: &LabelSet, score: f64| {
        let r_fmt = format_reward(&parsed);
        let attribution = attribution_breakdown(&parsed.labels, gt);
        let r_attr = attribution_reward(&attribution);
        SideScore {
            r_fmt,
            attribution,
            r_attr,
            score,
            reward: composite_reward(r_fmt, r_attr, r_pref, w),
            diagnostics: parsed.diagnostics,
        }
    };

    Ok(PairScore {
        a: side(pa, gt_a, s_a),
        b: side(pb, gt_b, s_b),
        probabilities,
        r_pref,
    })
}
