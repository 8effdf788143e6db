//! Run configuration: defaults, an optional TOML file, and flag overrides.
//!
//! Precedence is flag, then file, then built-in default. The file never
//! carries credentials; unknown keys (including any attempt at an API key)
//! are rejected.
//!
//! ```toml
//! seed = 42
//! jobs = 4
//! tie_threshold = 0.25
//! iou_threshold = 0.5
//!
//! [reward]
//! lambda_fmt = 1.0
//! lambda_attr = 1.0
//! lambda_pref = 1.0
//! theta = 5.0
//! fallback_score = 1.0
//!
//! [sampler]
//! video_fps = 24.0
//! n_frames = 48
//! budget = 4
//! high_threshold = 4.0
//! low_threshold = 2.0
//!
//! [grpo]
//! group_size = 8
//! clip_eps = 0.2
//! kl_beta = 0.01
//! std_floor = 1e-6
//! learning_rate = 100.0
//! steps = 300
//! contexts = 50
//!
//! [endpoint]
//! base_url = "http://localhost:8000"
//! prompt_kind = "RECOGNITION"
//! max_tokens = 1024
//! temperature = 0.0
//! n_samples = 1
//! timeout_secs = 120
//! retry_base_ms = 500
//! max_attempts = 4
//! max_payload_bytes = 8388608
//! ```

use std::path::Path;

use anyhow::{bail, Context, Result};
use clap::Args;
use serde::{Deserialize, Serialize};

use framereward::bench::{DEFAULT_IOU_THRESHOLD, DEFAULT_TIE_THRESHOLD};
use framereward::gateway::{self, PromptKind};
use framereward::grpo::GrpoConfig;
use framereward::reward::RewardWeights;
use framereward::sampler::{SamplerConfig, DEFAULT_HIGH_THRESHOLD, DEFAULT_LOW_THRESHOLD};

pub const DEFAULT_SEED: u64 = 42;
pub const DEFAULT_CONTEXTS: usize = 50;

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub jobs: Option<usize>,
    pub tie_threshold: Option<f64>,
    pub iou_threshold: Option<f64>,
    #[serde(default)]
    pub reward: RewardArgs,
    #[serde(default)]
    pub sampler: SamplerArgs,
    #[serde(default)]
    pub grpo: GrpoArgs,
    #[serde(default)]
    pub endpoint: EndpointArgs,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("invalid config {}", path.display()))
    }
}

#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardArgs {
    /// Weight of the format reward.
    #[arg(long)]
    pub lambda_fmt: Option<f64>,
    /// Weight of the attribution reward.
    #[arg(long)]
    pub lambda_attr: Option<f64>,
    /// Weight of the preference reward.
    #[arg(long)]
    pub lambda_pref: Option<f64>,
    /// Tie parameter of the preference model (> 1).
    #[arg(long)]
    pub theta: Option<f64>,
    /// Score assumed for a response without a usable rating.
    #[arg(long)]
    pub fallback_score: Option<f64>,
}

#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerArgs {
    #[arg(long)]
    pub video_fps: Option<f64>,
    #[arg(long)]
    pub n_frames: Option<usize>,
    /// Total frames to score across both stages (even).
    #[arg(long)]
    pub budget: Option<usize>,
    #[arg(long)]
    pub high_threshold: Option<f64>,
    #[arg(long)]
    pub low_threshold: Option<f64>,
}

#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GrpoArgs {
    #[arg(long)]
    pub group_size: Option<usize>,
    #[arg(long)]
    pub clip_eps: Option<f64>,
    #[arg(long)]
    pub kl_beta: Option<f64>,
    #[arg(long)]
    pub std_floor: Option<f64>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Number of synthetic always-A-wins pairs when no pairs file is given.
    #[arg(long)]
    pub contexts: Option<usize>,
}

#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EndpointArgs {
    /// Scorer base URL; falls back to SCORER_BASE_URL.
    #[arg(long)]
    pub base_url: Option<String>,
    #[arg(long, value_parser = parse_prompt_kind)]
    pub prompt_kind: Option<PromptKind>,
    #[arg(long)]
    pub max_tokens: Option<u32>,
    #[arg(long)]
    pub temperature: Option<f64>,
    /// Samples requested per frame.
    #[arg(long)]
    pub n_samples: Option<usize>,
    #[arg(long)]
    pub timeout_secs: Option<u64>,
    #[arg(long)]
    pub retry_base_ms: Option<u64>,
    #[arg(long)]
    pub max_attempts: Option<u32>,
    #[arg(long)]
    pub max_payload_bytes: Option<usize>,
}

fn parse_prompt_kind(s: &str) -> Result<PromptKind, String> {
    match s.to_ascii_uppercase().replace('-', "_").as_str() {
        "PREFERENCE_SCORING" => Ok(PromptKind::PreferenceScoring),
        "RECOGNITION" => Ok(PromptKind::Recognition),
        _ => Err(format!(
            "expected preference-scoring or recognition, got {s:?}"
        )),
    }
}

/// Flag-level overrides collected from whichever subcommand ran.
#[derive(Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub tie_threshold: Option<f64>,
    pub iou_threshold: Option<f64>,
    pub reward: RewardArgs,
    pub sampler: SamplerArgs,
    pub grpo: GrpoArgs,
    pub endpoint: EndpointArgs,
}

#[derive(Debug, Clone, Serialize)]
pub struct EndpointSettings {
    pub base_url: Option<String>,
    pub prompt_kind: PromptKind,
    pub max_tokens: u32,
    pub temperature: f64,
    pub n_samples: usize,
    pub timeout_secs: u64,
    pub retry_base_ms: u64,
    pub max_attempts: u32,
    pub max_payload_bytes: usize,
}

/// The effective configuration, echoed in every report.
#[derive(Debug, Clone, Serialize)]
pub struct RunConfig {
    pub subcommand: String,
    pub seed: u64,
    pub tie_threshold: f64,
    pub iou_threshold: f64,
    pub reward: RewardWeights,
    pub sampler: SamplerSettings,
    pub grpo: GrpoConfig,
    pub contexts: usize,
    pub endpoint: EndpointSettings,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct SamplerSettings {
    pub video_fps: f64,
    pub n_frames: Option<usize>,
    pub budget: usize,
    pub high_threshold: f64,
    pub low_threshold: f64,
}

impl RunConfig {
    pub fn resolve(subcommand: &str, file: &FileConfig, o: &Overrides) -> Result<Self> {
        let seed = o.seed.or(file.seed).unwrap_or(DEFAULT_SEED);

        let (fr, r) = (&file.reward, &o.reward);
        let d = RewardWeights::default();
        let reward = RewardWeights {
            lambda_fmt: r.lambda_fmt.or(fr.lambda_fmt).unwrap_or(d.lambda_fmt),
            lambda_attr: r.lambda_attr.or(fr.lambda_attr).unwrap_or(d.lambda_attr),
            lambda_pref: r.lambda_pref.or(fr.lambda_pref).unwrap_or(d.lambda_pref),
            theta: r.theta.or(fr.theta).unwrap_or(d.theta),
            fallback_score: r
                .fallback_score
                .or(fr.fallback_score)
                .unwrap_or(d.fallback_score),
        };
        reward.validate()?;

        let (fs, s) = (&file.sampler, &o.sampler);
        let sampler = SamplerSettings {
            video_fps: s.video_fps.or(fs.video_fps).unwrap_or(24.0),
            n_frames: s.n_frames.or(fs.n_frames),
            budget: s.budget.or(fs.budget).unwrap_or(4),
            high_threshold: s
                .high_threshold
                .or(fs.high_threshold)
                .unwrap_or(DEFAULT_HIGH_THRESHOLD),
            low_threshold: s
                .low_threshold
                .or(fs.low_threshold)
                .unwrap_or(DEFAULT_LOW_THRESHOLD),
        };

        let (fg, g) = (&file.grpo, &o.grpo);
        let dg = GrpoConfig::default();
        let grpo = GrpoConfig {
            group_size: g.group_size.or(fg.group_size).unwrap_or(dg.group_size),
            clip_eps: g.clip_eps.or(fg.clip_eps).unwrap_or(dg.clip_eps),
            kl_beta: g.kl_beta.or(fg.kl_beta).unwrap_or(dg.kl_beta),
            std_floor: g.std_floor.or(fg.std_floor).unwrap_or(dg.std_floor),
            learning_rate: g
                .learning_rate
                .or(fg.learning_rate)
                .unwrap_or(dg.learning_rate),
            steps: g.steps.or(fg.steps).unwrap_or(dg.steps),
            seed,
        };
        grpo.validate()?;
        let contexts = g.contexts.or(fg.contexts).unwrap_or(DEFAULT_CONTEXTS);
        if contexts == 0 {
            bail!("contexts must be at least 1");
        }

        let (fe, e) = (&file.endpoint, &o.endpoint);
        let endpoint = EndpointSettings {
            base_url: e.base_url.clone().or_else(|| fe.base_url.clone()),
            prompt_kind: e
                .prompt_kind
                .or(fe.prompt_kind)
                .unwrap_or(PromptKind::Recognition),
            max_tokens: e
                .max_tokens
                .or(fe.max_tokens)
                .unwrap_or(gateway::DEFAULT_MAX_TOKENS),
            temperature: e
                .temperature
                .or(fe.temperature)
                .unwrap_or(gateway::DEFAULT_TEMPERATURE),
            n_samples: e.n_samples.or(fe.n_samples).unwrap_or(1),
            timeout_secs: e.timeout_secs.or(fe.timeout_secs).unwrap_or(120),
            retry_base_ms: e.retry_base_ms.or(fe.retry_base_ms).unwrap_or(500),
            max_attempts: e.max_attempts.or(fe.max_attempts).unwrap_or(4),
            max_payload_bytes: e
                .max_payload_bytes
                .or(fe.max_payload_bytes)
                .unwrap_or(gateway::DEFAULT_MAX_PAYLOAD_BYTES),
        };
        if endpoint.n_samples == 0 {
            bail!("n_samples must be at least 1");
        }
        if endpoint.max_attempts == 0 {
            bail!("max_attempts must be at least 1");
        }

        let tie_threshold = o
            .tie_threshold
            .or(file.tie_threshold)
            .unwrap_or(DEFAULT_TIE_THRESHOLD);
        if !(tie_threshold >= 0.0) || !tie_threshold.is_finite() {
            bail!("tie_threshold must be finite and >= 0");
        }
        let iou_threshold = o
            .iou_threshold
            .or(file.iou_threshold)
            .unwrap_or(DEFAULT_IOU_THRESHOLD);
        if !(iou_threshold > 0.0 && iou_threshold <= 1.0) {
            bail!("iou_threshold must lie in (0, 1]");
        }

        Ok(Self {
            subcommand: subcommand.to_string(),
            seed,
            tie_threshold,
            iou_threshold,
            reward,
            sampler,
            grpo,
            contexts,
            endpoint,
        })
    }

    /// Sampler config for a video with `n_frames` frames (flag/file value wins).
    pub fn sampler_config(&self, n_frames: Option<usize>) -> Result<SamplerConfig> {
        let n = match self.sampler.n_frames.or(n_frames) {
            Some(n) => n,
            None => bail!("n_frames is required (flag, config file or scores file)"),
        };
        Ok(SamplerConfig {
            video_fps: self.sampler.video_fps,
            n_frames: n,
            budget: self.sampler.budget,
            high_threshold: self.sampler.high_threshold,
            low_threshold: self.sampler.low_threshold,
            seed: self.seed,
        })
    }
}
