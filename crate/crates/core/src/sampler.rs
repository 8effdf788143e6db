//! Two-stage dynamic frame sampling.
//!
//! Stage 1 scores `budget / 2` evenly spaced frames. Depending on those
//! scores, stage 2 either spreads the remaining half between the stage-1
//! frames (all high), densifies around the low-scoring frames (low present),
//! or draws random neighbors of below-mean frames (mixed).

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SamplerError {
    #[error("budget {budget} exceeds the {n_frames} available frames")]
    BudgetExceedsFrames { budget: usize, n_frames: usize },
    #[error("invalid sampler config: {0}")]
    InvalidConfig(String),
    #[error("expected {expected} stage-1 scores, got {got}")]
    ScoreCountMismatch { expected: usize, got: usize },
    #[error("stage-1 scores must be finite")]
    NonFiniteScore,
    #[error("no scores to aggregate")]
    EmptyScores,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub video_fps: f64,
    pub n_frames: usize,
    pub budget: usize,
    pub high_threshold: f64,
    pub low_threshold: f64,
    pub seed: u64,
}

pub const DEFAULT_HIGH_THRESHOLD: f64 = 4.0;
pub const DEFAULT_LOW_THRESHOLD: f64 = 2.0;

impl SamplerConfig {
    pub fn new(video_fps: f64, n_frames: usize, budget: usize) -> Self {
        Self {
            video_fps,
            n_frames,
            budget,
            high_threshold: DEFAULT_HIGH_THRESHOLD,
            low_threshold: DEFAULT_LOW_THRESHOLD,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), SamplerError> {
        if !(self.video_fps > 0.0) || !self.video_fps.is_finite() {
            return Err(SamplerError::InvalidConfig("video_fps must be > 0".into()));
        }
        if self.n_frames == 0 {
            return Err(SamplerError::InvalidConfig("n_frames must be > 0".into()));
        }
        if self.budget < 2 || !self.budget.is_multiple_of(2) {
            return Err(SamplerError::InvalidConfig(format!(
                "budget must be even and >= 2, got {}",
                self.budget
            )));
        }
        if !(1.0 <= self.low_threshold
            && self.low_threshold < self.high_threshold
            && self.high_threshold <= 5.0)
        {
            return Err(SamplerError::InvalidConfig(
                "thresholds must satisfy 1 <= low < high <= 5".into(),
            ));
        }
        if self.budget > self.n_frames {
            return Err(SamplerError::BudgetExceedsFrames {
                budget: self.budget,
                n_frames: self.n_frames,
            });
        }
        Ok(())
    }

    /// Neighborhood half-width in frames: a quarter second, at least one.
    pub fn window(&self) -> usize {
        ((self.video_fps / 4.0).round() as usize).max(1)
    }

    fn half(&self) -> usize {
        self.budget / 2
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum CaseTag {
    AllHigh,
    LowPresent,
    Mixed,
}

impl CaseTag {
    pub fn as_str(self) -> &'static str {
        match self {
            CaseTag::AllHigh => "ALL_HIGH",
            CaseTag::LowPresent => "LOW_PRESENT",
            CaseTag::Mixed => "MIXED",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SamplingPlan {
    pub stage1: Vec<usize>,
    pub stage2: Vec<usize>,
    pub case_tag: CaseTag,
    pub diagnostics: Vec<String>,
}

/// `floor(k · n_frames / (budget/2))` for each stage-1 slot.
pub fn stage1_indices(cfg: &SamplerConfig) -> Result<Vec<usize>, SamplerError> {
    cfg.validate()?;
    let half = cfg.half();
    Ok((0..half).map(|k| k * cfg.n_frames / half).collect())
}

/// Strict comparisons: a score equal to a threshold neither exceeds the high
/// threshold nor falls below the low one.
pub fn classify_scores(scores: &[f64], cfg: &SamplerConfig) -> CaseTag {
    if scores.iter().any(|&s| s < cfg.low_threshold) {
        CaseTag::LowPresent
    } else if !scores.is_empty() && scores.iter().all(|&s| s > cfg.high_threshold) {
        CaseTag::AllHigh
    } else {
        CaseTag::Mixed
    }
}

struct Picker {
    n_frames: usize,
    used: BTreeSet<usize>,
    picked: Vec<usize>,
    target: usize,
}

impl Picker {
    fn new(stage1: &[usize], n_frames: usize, target: usize) -> Self {
        Self {
            n_frames,
            used: stage1.iter().copied().collect(),
            picked: Vec::with_capacity(target),
            target,
        }
    }

    fn full(&self) -> bool {
        self.picked.len() >= self.target
    }

    fn take(&mut self, idx: usize) -> bool {
        if self.full() || idx >= self.n_frames || !self.used.insert(idx) {
            return false;
        }
        self.picked.push(idx);
        true
    }

    fn is_free(&self, idx: usize) -> bool {
        idx < self.n_frames && !self.used.contains(&idx)
    }

    /// Closest free index to `anchor` at distance ≤ `max_dist`, later frame
    /// first on equal distance.
    fn nearest_free(&self, anchor: usize, max_dist: usize) -> Option<usize> {
        (1..=max_dist).find_map(|d| {
            let after = anchor + d;
            if self.is_free(after) {
                return Some(after);
            }
            anchor.checked_sub(d).filter(|&i| self.is_free(i))
        })
    }

    /// Free indices in `[anchor - w, anchor + w]`.
    fn free_in_window(&self, anchor: usize, w: usize) -> Vec<usize> {
        let lo = anchor.saturating_sub(w);
        let hi = (anchor + w).min(self.n_frames - 1);
        (lo..=hi).filter(|&i| self.is_free(i)).collect()
    }

    fn midpoints(&mut self, stage1: &[usize]) {
        for (k, &s) in stage1.iter().enumerate() {
            let next = stage1.get(k + 1).copied().unwrap_or(self.n_frames);
            self.take((s + next) / 2);
        }
    }

    /// Last resort: nearest free index anywhere, cycling over `anchors`.
    fn fill_nearest(&mut self, anchors: &[usize], diagnostics: &mut Vec<String>) {
        let anchors: Vec<usize> = if anchors.is_empty() {
            vec![0]
        } else {
            anchors.to_vec()
        };
        while !self.full() {
            let mut progressed = false;
            for &a in &anchors {
                if self.full() {
                    break;
                }
                if let Some(i) = self.nearest_free(a, self.n_frames) {
                    diagnostics.push(format!(
                        "window exhausted; fell back to nearest unused frame {i} (anchor {a})"
                    ));
                    self.take(i);
                    progressed = true;
                }
            }
            if !progressed {
                break;
            }
        }
    }

    fn finish(mut self) -> Vec<usize> {
        self.picked.sort_unstable();
        self.picked
    }
}

/// Choose the second-stage frames for an already classified first stage.
pub fn stage2_indices(
    case_tag: CaseTag,
    stage1: &[usize],
    scores: &[f64],
    cfg: &SamplerConfig,
) -> Result<(Vec<usize>, Vec<String>), SamplerError> {
    cfg.validate()?;
    if stage1.len() != scores.len() {
        return Err(SamplerError::ScoreCountMismatch {
            expected: stage1.len(),
            got: scores.len(),
        });
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(SamplerError::NonFiniteScore);
    }
    let w = cfg.window();
    let mut picker = Picker::new(stage1, cfg.n_frames, cfg.half());
    let mut diagnostics = Vec::new();

    match case_tag {
        CaseTag::AllHigh => {
            picker.midpoints(stage1);
            picker.fill_nearest(stage1, &mut diagnostics);
        }
        CaseTag::LowPresent => {
            let anchors: Vec<usize> = stage1
                .iter()
                .zip(scores)
                .filter(|(_, &s)| s < cfg.low_threshold)
                .map(|(&i, _)| i)
                .collect();
            // round-robin over the low anchors, nearest neighbor first
            while !picker.full() {
                let mut progressed = false;
                for &a in &anchors {
                    if picker.full() {
                        break;
                    }
                    if let Some(i) = picker.nearest_free(a, w) {
                        picker.take(i);
                        progressed = true;
                    }
                }
                if !progressed {
                    break;
                }
            }
            picker.fill_nearest(&anchors, &mut diagnostics);
        }
        CaseTag::Mixed => {
            let mean = scores.iter().sum::<f64>() / scores.len() as f64;
            let mut low: Vec<(usize, f64)> = stage1
                .iter()
                .zip(scores)
                .filter(|(_, &s)| s < mean)
                .map(|(&i, &s)| (i, s))
                .collect();
            // lowest score first
            low.sort_by(|x, y| x.1.total_cmp(&y.1).then(x.0.cmp(&y.0)));
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            for &(anchor, _) in &low {
                if picker.full() {
                    break;
                }
                let candidates = picker.free_in_window(anchor, w);
                for &i in candidates.choose_multiple(&mut rng, 2) {
                    picker.take(i);
                }
            }
            picker.midpoints(stage1);
            let anchors: Vec<usize> = low.iter().map(|(i, _)| *i).collect();
            picker.fill_nearest(
                if anchors.is_empty() { stage1 } else { &anchors },
                &mut diagnostics,
            );
        }
    }
    Ok((picker.finish(), diagnostics))
}

/// Classify and plan from stage-1 scores.
pub fn plan(cfg: &SamplerConfig, stage1_scores: &[f64]) -> Result<SamplingPlan, SamplerError> {
    let stage1 = stage1_indices(cfg)?;
    if stage1.len() != stage1_scores.len() {
        return Err(SamplerError::ScoreCountMismatch {
            expected: stage1.len(),
            got: stage1_scores.len(),
        });
    }
    let case_tag = classify_scores(stage1_scores, cfg);
    let (stage2, diagnostics) = stage2_indices(case_tag, &stage1, stage1_scores, cfg)?;
    Ok(SamplingPlan {
        stage1,
        stage2,
        case_tag,
        diagnostics,
    })
}

/// Mean over both stages. Values are summed in sorted order, so the result
/// does not depend on input order.
pub fn aggregate_video_score(
    stage1_scores: &[f64],
    stage2_scores: &[f64],
) -> Result<f64, SamplerError> {
    if stage1_scores.is_empty() || stage2_scores.is_empty() {
        return Err(SamplerError::EmptyScores);
    }
    let mut all: Vec<f64> = stage1_scores.iter().chain(stage2_scores).copied().collect();
    all.sort_by(f64::total_cmp);
    Ok(all.iter().sum::<f64>() / all.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(n: usize, budget: usize, fps: f64) -> SamplerConfig {
        SamplerConfig::new(fps, n, budget)
    }

    #[test]
    fn stage1_examples() {
        assert_eq!(stage1_indices(&cfg(48, 4, 24.0)).unwrap(), vec![0, 24]);
        assert_eq!(
            stage1_indices(&cfg(48, 8, 24.0)).unwrap(),
            vec![0, 12, 24, 36]
        );
        assert_eq!(stage1_indices(&cfg(48, 2, 24.0)).unwrap(), vec![0]);
        assert_eq!(
            stage1_indices(&cfg(4, 8, 24.0)),
            Err(SamplerError::BudgetExceedsFrames {
                budget: 8,
                n_frames: 4
            })
        );
        assert!(stage1_indices(&cfg(48, 3, 24.0)).is_err());
    }

    #[test]
    fn classify_examples() {
        let c = cfg(48, 4, 24.0);
        assert_eq!(classify_scores(&[4.5, 4.8], &c), CaseTag::AllHigh);
        assert_eq!(classify_scores(&[1.5, 4.5], &c), CaseTag::LowPresent);
        assert_eq!(classify_scores(&[3.0, 3.5], &c), CaseTag::Mixed);
        // threshold equality is neither high nor low
        assert_eq!(classify_scores(&[4.0, 4.8], &c), CaseTag::Mixed);
        assert_eq!(classify_scores(&[2.0, 4.8], &c), CaseTag::Mixed);
    }

    #[test]
    fn stage2_all_high() {
        let c = cfg(48, 4, 24.0);
        let (s2, d) = stage2_indices(CaseTag::AllHigh, &[0, 24], &[4.5, 4.8], &c).unwrap();
        assert_eq!(s2, vec![12, 36]);
        assert!(d.is_empty());
    }

    #[test]
    fn stage2_low_present_nearest_first() {
        let c = cfg(48, 4, 24.0);
        assert_eq!(c.window(), 6);
        let (s2, d) = stage2_indices(CaseTag::LowPresent, &[0, 24], &[1.5, 4.5], &c).unwrap();
        assert_eq!(s2, vec![1, 2]);
        assert!(d.is_empty());
    }

    #[test]
    fn stage2_mixed_draws_near_low_frame() {
        let mut c = cfg(48, 4, 24.0);
        c.seed = 11;
        let (s2, _) = stage2_indices(CaseTag::Mixed, &[0, 24], &[3.0, 3.5], &c).unwrap();
        assert_eq!(s2.len(), 2);
        assert!(s2.iter().all(|&i| (1..=6).contains(&i)), "{s2:?}");
        let again = stage2_indices(CaseTag::Mixed, &[0, 24], &[3.0, 3.5], &c)
            .unwrap()
            .0;
        assert_eq!(s2, again);
    }

    #[test]
    fn window_exhaustion_falls_back() {
        // fps 2 -> window 1; anchor 0 only has frame 1 nearby
        let c = cfg(8, 8, 2.0);
        let p = plan(&c, &[1.0, 4.5, 4.5, 4.5]).unwrap();
        assert_eq!(p.case_tag, CaseTag::LowPresent);
        assert_eq!(p.stage2.len(), 4);
        assert!(!p.diagnostics.is_empty());
    }

    #[test]
    fn aggregate_examples() {
        assert_eq!(
            aggregate_video_score(&[4.0, 4.0], &[4.0, 4.0]).unwrap(),
            4.0
        );
        assert_eq!(
            aggregate_video_score(&[1.0, 2.0], &[3.0, 4.0]).unwrap(),
            2.5
        );
        assert!((aggregate_video_score(&[4.5, 4.8], &[4.6, 4.7]).unwrap() - 4.65).abs() < 1e-12);
        assert!(aggregate_video_score(&[], &[1.0]).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn aggregate_permutation_invariant(
                mut xs in proptest::collection::vec(1.0..5.0f64, 2..20),
                split in 1usize..19,
                seed in any::<u64>(),
            ) {
                let split = split.min(xs.len() - 1);
                let v = aggregate_video_score(&xs[..split], &xs[split..]).unwrap();
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                xs.shuffle(&mut rng);
                let w = aggregate_video_score(&xs[..split], &xs[split..]).unwrap();
                prop_assert_eq!(v.to_bits(), w.to_bits());
            }
        }
    }
}
