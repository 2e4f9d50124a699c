//! Learning signals for decoupled two-phase GRPO: phase rewards, group
//! advantages, the selective-rollout filter, token masks, and the clipped
//! surrogate objective with its separated update schedule.
//!
//! Nothing here owns policy parameters. Objective values and per-token
//! gradients are handed to whatever trains the model.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::{Catalog, ToolRecord};
use crate::runtime::{passes_gate, Episode, GateMode, RolloutGroup, Source, Transcript};
use crate::scalar::Real;

pub const DEFAULT_ADVANTAGE_EPS: f64 = 1e-4;
pub const DEFAULT_CLIP_EPS: f64 = 0.2;
pub const DEFAULT_FORMAT_WEIGHT: f64 = 0.2;
pub const DEFAULT_OUTCOME_WEIGHT: f64 = 0.8;

#[derive(Debug, Error, PartialEq)]
pub enum RlError {
    #[error("{name} = {value} is outside [0, 1]")]
    OutOfRange { name: &'static str, value: f64 },
    #[error("{0} must be finite")]
    NonFinite(&'static str),
    #[error("advantages need a group of at least 2, got {0}")]
    GroupTooSmall(usize),
    #[error("episode {episode}: {left} log-ratios but {right} mask entries")]
    LengthMismatch {
        episode: usize,
        left: usize,
        right: usize,
    },
    #[error("no masked-in tokens")]
    EmptyMask,
    #[error("objective needs at least one episode")]
    EmptyBatch,
    #[error("token offset {offset} invalid for a transcript of {len} bytes")]
    BadOffset { offset: usize, len: usize },
    #[error("weights must be non-negative and finite")]
    BadWeights,
    #[error("cannot parse weights {0:?}: expected four comma-separated numbers")]
    WeightSyntax(String),
}

// ----- rewards --------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardWeights<T> {
    pub alpha1: T,
    pub alpha2: T,
    pub beta1: T,
    pub beta2: T,
}

impl<T: Real> Default for RewardWeights<T> {
    fn default() -> Self {
        let f = T::lit(DEFAULT_FORMAT_WEIGHT);
        let o = T::lit(DEFAULT_OUTCOME_WEIGHT);
        Self {
            alpha1: f,
            alpha2: o,
            beta1: f,
            beta2: o,
        }
    }
}

impl<T: Real> RewardWeights<T> {
    pub fn new(alpha1: T, alpha2: T, beta1: T, beta2: T) -> Result<Self, RlError> {
        let w = Self {
            alpha1,
            alpha2,
            beta1,
            beta2,
        };
        w.validate()?;
        Ok(w)
    }

    /// Parses `"a1,a2,b1,b2"`.
    pub fn parse(text: &str) -> Result<Self, RlError> {
        let parts: Vec<f64> = text
            .split(',')
            .map(|p| p.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|_| RlError::WeightSyntax(text.to_string()))?;
        match parts.as_slice() {
            [a1, a2, b1, b2] => Self::new(T::lit(*a1), T::lit(*a2), T::lit(*b1), T::lit(*b2)),
            _ => Err(RlError::WeightSyntax(text.to_string())),
        }
    }

    pub fn validate(&self) -> Result<(), RlError> {
        let ok = [self.alpha1, self.alpha2, self.beta1, self.beta2]
            .iter()
            .all(|w| w.is_finite() && *w >= T::zero());
        if ok {
            Ok(())
        } else {
            Err(RlError::BadWeights)
        }
    }
}

/// How `r_conv` is normalized.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvMode {
    /// Selected gold over retrieved gold.
    #[default]
    Gold,
    /// Selected gold over everything selected.
    Precision,
}

impl std::str::FromStr for ConvMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "gold" => Ok(ConvMode::Gold),
            "precision" => Ok(ConvMode::Precision),
            other => Err(format!(
                "unknown conv mode {other:?} (expected gold|precision)"
            )),
        }
    }
}

fn set(ids: impl IntoIterator<Item = u64>) -> BTreeSet<u64> {
    ids.into_iter().collect()
}

fn ratio<T: Real>(num: usize, den: usize) -> T {
    if den == 0 {
        T::zero()
    } else {
        T::count(num) / T::count(den)
    }
}

/// Fraction of gold tools present in `retrieved`; 1 for an empty gold set.
pub fn recall_reward<T: Real>(gold: &[u64], retrieved: &[u64]) -> T {
    let gold = set(gold.iter().copied());
    if gold.is_empty() {
        return T::one();
    }
    let retrieved = set(retrieved.iter().copied());
    ratio(gold.intersection(&retrieved).count(), gold.len())
}

/// Fraction of retrieved gold tools that made it into the selection.
pub fn conversion_reward<T: Real>(
    gold: &[u64],
    retrieved: &[u64],
    selected: &[u64],
    mode: ConvMode,
) -> T {
    let gold = set(gold.iter().copied());
    let selected = set(selected.iter().copied());
    let hit = gold.intersection(&selected).count();
    match mode {
        ConvMode::Gold => {
            let retrieved = set(retrieved.iter().copied());
            ratio(hit, gold.intersection(&retrieved).count())
        }
        ConvMode::Precision => ratio(hit, selected.len()),
    }
}

fn unit<T: Real>(name: &'static str, value: T) -> Result<T, RlError> {
    if !value.is_finite() {
        return Err(RlError::NonFinite(name));
    }
    if value < T::zero() || value > T::one() {
        return Err(RlError::OutOfRange {
            name,
            value: value.as_f64(),
        });
    }
    Ok(value)
}

/// `α₁·r_fmt + α₂·r_rec·r_conv`.
pub fn retrieval_reward<T: Real>(
    r_fmt: T,
    r_rec: T,
    r_conv: T,
    weights: &RewardWeights<T>,
) -> Result<T, RlError> {
    let r_fmt = unit("r_fmt", r_fmt)?;
    let r_rec = unit("r_rec", r_rec)?;
    let r_conv = unit("r_conv", r_conv)?;
    Ok(weights.alpha1 * r_fmt + weights.alpha2 * r_rec * r_conv)
}

/// `β₁·r_fmt + β₂·r_ans`.
pub fn execution_reward<T: Real>(
    r_fmt: T,
    r_ans: T,
    weights: &RewardWeights<T>,
) -> Result<T, RlError> {
    let r_fmt = unit("r_fmt", r_fmt)?;
    let r_ans = unit("r_ans", r_ans)?;
    Ok(weights.beta1 * r_fmt + weights.beta2 * r_ans)
}

/// Per-episode reward components. Execution fields are absent when the
/// episode was gated out.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown<T> {
    pub r_fmt_ret: T,
    pub r_rec: T,
    pub r_conv: T,
    #[serde(rename = "R_ret")]
    pub total_ret: T,
    pub r_fmt_exec: Option<T>,
    pub r_ans: Option<T>,
    #[serde(rename = "R_exec")]
    pub total_exec: Option<T>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreConfig<T> {
    pub weights: RewardWeights<T>,
    pub conv: ConvMode,
}

impl<T: Real> Default for ScoreConfig<T> {
    fn default() -> Self {
        Self {
            weights: RewardWeights::default(),
            conv: ConvMode::Gold,
        }
    }
}

/// Scores one episode. `solved` is the judge's verdict on the final answer;
/// a missing answer scores 0 regardless. `catalog` enables the unknown-tool
/// check on execution calls.
pub fn score_episode<T: Real>(
    episode: &Episode,
    solved: Option<bool>,
    config: &ScoreConfig<T>,
    catalog: Option<&Catalog>,
) -> Result<RewardBreakdown<T>, RlError> {
    let retrieved: Vec<u64> = episode.cumulative_retrieved.iter().copied().collect();
    let r_fmt_ret = T::count(episode.retrieval.check_format().value as usize);
    let r_rec = recall_reward::<T>(&episode.gold, &retrieved);
    let r_conv = conversion_reward::<T>(&episode.gold, &retrieved, &episode.selected, config.conv);
    let total_ret = retrieval_reward(r_fmt_ret, r_rec, r_conv, &config.weights)?;
    let (r_fmt_exec, r_ans, total_exec) = match &episode.execution {
        Some(exec) => {
            let subset: Option<Vec<ToolRecord>> = catalog.map(|c| episode.execution_tools(c));
            let fmt = T::count(exec.check_format(subset.as_deref()).value as usize);
            let ans = if episode.final_answer.is_some() && solved == Some(true) {
                T::one()
            } else {
                T::zero()
            };
            (
                Some(fmt),
                Some(ans),
                Some(execution_reward(fmt, ans, &config.weights)?),
            )
        }
        None => (None, None, None),
    };
    Ok(RewardBreakdown {
        r_fmt_ret,
        r_rec,
        r_conv,
        total_ret,
        r_fmt_exec,
        r_ans,
        total_exec,
    })
}

// ----- advantages -----------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Ret,
    Exec,
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Task::Ret => "ret",
            Task::Exec => "exec",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdvantageSet<T> {
    pub task: Task,
    pub advantages: Vec<T>,
    pub mean: T,
    pub std: T,
    pub epsilon: T,
}

impl<T: Real> AdvantageSet<T> {
    pub fn len(&self) -> usize {
        self.advantages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.advantages.is_empty()
    }
}

/// Population mean and standard deviation.
pub fn mean_std<T: Real>(values: &[T]) -> (T, T) {
    let n = T::count(values.len());
    let mean = values.iter().copied().sum::<T>() / n;
    let var = values.iter().map(|v| (*v - mean) * (*v - mean)).sum::<T>() / n;
    (mean, var.sqrt())
}

/// `(R_i − mean) / (σ + ε)` with population σ. A group whose rewards are all
/// identical gets exactly zero advantages.
pub fn group_advantages<T: Real>(
    rewards: &[T],
    epsilon: T,
    task: Task,
) -> Result<AdvantageSet<T>, RlError> {
    if rewards.len() < 2 {
        return Err(RlError::GroupTooSmall(rewards.len()));
    }
    if rewards.iter().any(|r| !r.is_finite()) {
        return Err(RlError::NonFinite("reward"));
    }
    if !epsilon.is_finite() || epsilon < T::zero() {
        return Err(RlError::NonFinite("epsilon"));
    }
    let first = rewards[0];
    if rewards.iter().all(|r| *r == first) {
        return Ok(AdvantageSet {
            task,
            advantages: vec![T::zero(); rewards.len()],
            mean: first,
            std: T::zero(),
            epsilon,
        });
    }
    let (mean, std) = mean_std(rewards);
    let advantages = rewards
        .iter()
        .map(|r| (*r - mean) / (std + epsilon))
        .collect();
    Ok(AdvantageSet {
        task,
        advantages,
        mean,
        std,
        epsilon,
    })
}

/// Episodes that pass the selective-rollout gate, in group order.
pub fn filter_group(group: &RolloutGroup, gate: GateMode) -> Vec<&Episode> {
    group
        .episodes
        .iter()
        .filter(|e| passes_gate(&group.gold, &e.selected, &e.cumulative_retrieved, gate))
        .collect()
}

/// Rewards of one query group, split by task. `exec` holds only episodes
/// kept by [`filter_group`].
#[derive(Clone, Debug, PartialEq)]
pub struct GroupRewards<T> {
    pub ret: Vec<T>,
    pub exec: Vec<T>,
}

/// Both advantage sets of one query. `exec` is `None` when the gate kept
/// nothing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryAdvantages<T> {
    pub ret: AdvantageSet<T>,
    pub exec: Option<AdvantageSet<T>>,
}

/// Per-task advantages. Retrieval and execution groups are normalized
/// independently; a lone kept execution episode has zero advantage.
pub fn decoupled_advantages<T: Real>(
    group: &GroupRewards<T>,
    epsilon: T,
) -> Result<QueryAdvantages<T>, RlError> {
    let ret = group_advantages(&group.ret, epsilon, Task::Ret)?;
    let exec = match group.exec.len() {
        0 => None,
        1 => Some(AdvantageSet {
            task: Task::Exec,
            advantages: vec![T::zero()],
            mean: group.exec[0],
            std: T::zero(),
            epsilon,
        }),
        _ => Some(group_advantages(&group.exec, epsilon, Task::Exec)?),
    };
    Ok(QueryAdvantages { ret, exec })
}

// ----- token masks ----------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSpan {
    pub start: usize,
    pub end: usize,
}

/// One bit per token: true for agent-generated text.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenMask {
    pub tokens: Vec<TokenSpan>,
    pub bits: Vec<bool>,
}

impl TokenMask {
    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn active(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }
}

/// Maximal non-whitespace runs, never crossing a provenance boundary.
pub fn whitespace_tokens(transcript: &Transcript) -> Vec<TokenSpan> {
    let mut out = Vec::new();
    for seg in &transcript.segments {
        let text = &transcript.text[seg.start..seg.end];
        let mut start = None;
        for (i, c) in text.char_indices() {
            match (c.is_whitespace(), start) {
                (true, Some(s)) => {
                    out.push(TokenSpan {
                        start: seg.start + s,
                        end: seg.start + i,
                    });
                    start = None;
                }
                (false, None) => start = Some(i),
                _ => {}
            }
        }
        if let Some(s) = start {
            out.push(TokenSpan {
                start: seg.start + s,
                end: seg.end,
            });
        }
    }
    out
}

/// Builds the mask over `transcript`. `offsets` are token start offsets
/// covering the whole text (the first must be 0); without them the
/// whitespace tokenizer is used. A token is active only if every byte of it
/// was generated by the agent.
pub fn build_token_mask(
    transcript: &Transcript,
    offsets: Option<&[usize]>,
) -> Result<TokenMask, RlError> {
    let len = transcript.text.len();
    let tokens = match offsets {
        None => whitespace_tokens(transcript),
        Some(starts) => {
            if let Some(&first) = starts.first() {
                if first != 0 {
                    return Err(RlError::BadOffset { offset: first, len });
                }
            } else if len > 0 {
                return Err(RlError::BadOffset { offset: 0, len });
            }
            let mut spans = Vec::with_capacity(starts.len());
            for (i, &s) in starts.iter().enumerate() {
                let end = starts.get(i + 1).copied().unwrap_or(len);
                if s >= len || end <= s || !transcript.text.is_char_boundary(s) {
                    return Err(RlError::BadOffset { offset: s, len });
                }
                spans.push(TokenSpan { start: s, end });
            }
            spans
        }
    };
    let bits = tokens
        .iter()
        .map(|t| {
            transcript
                .segments
                .iter()
                .any(|s| s.source == Source::Agent && s.start <= t.start && t.end <= s.end)
        })
        .collect();
    Ok(TokenMask { tokens, bits })
}

// ----- objective ------------------------------------------------------------

/// One episode's share of the surrogate: per-token log importance ratios,
/// the mask, and the sequence-level advantage.
#[derive(Clone, Copy, Debug)]
pub struct EpisodeTerms<'a, T> {
    pub log_ratios: &'a [T],
    pub mask: &'a [bool],
    pub advantage: T,
}

/// `min(ρ·Â, clip(ρ, 1−ε, 1+ε)·Â)`.
pub fn clipped_term<T: Real>(rho: T, advantage: T, clip_eps: T) -> T {
    let clipped = rho.max(T::one() - clip_eps).min(T::one() + clip_eps);
    (rho * advantage).min(clipped * advantage)
}

fn check_terms<T: Real>(episodes: &[EpisodeTerms<'_, T>], clip_eps: T) -> Result<(), RlError> {
    if episodes.is_empty() {
        return Err(RlError::EmptyBatch);
    }
    if !clip_eps.is_finite() || clip_eps < T::zero() {
        return Err(RlError::NonFinite("clip epsilon"));
    }
    for (i, e) in episodes.iter().enumerate() {
        if e.log_ratios.len() != e.mask.len() {
            return Err(RlError::LengthMismatch {
                episode: i,
                left: e.log_ratios.len(),
                right: e.mask.len(),
            });
        }
        if !e.advantage.is_finite() {
            return Err(RlError::NonFinite("advantage"));
        }
        if e.log_ratios.iter().any(|r| !r.is_finite()) {
            return Err(RlError::NonFinite("log-ratio"));
        }
    }
    Ok(())
}

/// `J = (1/G) Σ_i (1/|y_i|) Σ_t m_t · min(ρ_t Â_i, clip(ρ_t) Â_i)` where
/// `|y_i|` counts active tokens. Inactive positions are never read past the
/// finiteness check, and an episode with no active tokens contributes 0.
pub fn surrogate_objective<T: Real>(
    episodes: &[EpisodeTerms<'_, T>],
    clip_eps: T,
) -> Result<T, RlError> {
    check_terms(episodes, clip_eps)?;
    let mut total = T::zero();
    for e in episodes {
        let mut sum = T::zero();
        let mut active = 0usize;
        for (lr, m) in e.log_ratios.iter().zip(e.mask) {
            if *m {
                sum = sum + clipped_term(lr.exp(), e.advantage, clip_eps);
                active += 1;
            }
        }
        if active > 0 {
            total = total + sum / T::count(active);
        }
    }
    Ok(total / T::count(episodes.len()))
}

/// `∂J/∂log_ratio_t` for every token of every episode. The unclipped branch
/// contributes `ρ·Â`, the clipped branch nothing; at an exact tie the
/// unclipped branch is taken.
pub fn surrogate_gradient<T: Real>(
    episodes: &[EpisodeTerms<'_, T>],
    clip_eps: T,
) -> Result<Vec<Vec<T>>, RlError> {
    check_terms(episodes, clip_eps)?;
    let g = T::count(episodes.len());
    Ok(episodes
        .iter()
        .map(|e| {
            let active = e.mask.iter().filter(|m| **m).count();
            e.log_ratios
                .iter()
                .zip(e.mask)
                .map(|(lr, m)| {
                    if !*m {
                        return T::zero();
                    }
                    let rho = lr.exp();
                    let unclipped = rho * e.advantage;
                    if unclipped <= clipped_term(rho, e.advantage, clip_eps) {
                        unclipped / (T::count(active) * g)
                    } else {
                        T::zero()
                    }
                })
                .collect()
        })
        .collect())
}

/// Negative mean log-probability over active tokens.
pub fn sft_loss_value<T: Real>(logprobs: &[T], mask: &[bool]) -> Result<T, RlError> {
    if logprobs.len() != mask.len() {
        return Err(RlError::LengthMismatch {
            episode: 0,
            left: logprobs.len(),
            right: mask.len(),
        });
    }
    let mut sum = T::zero();
    let mut n = 0usize;
    for (lp, m) in logprobs.iter().zip(mask) {
        if *m {
            if !lp.is_finite() {
                return Err(RlError::NonFinite("logprob"));
            }
            sum = sum + *lp;
            n += 1;
        }
    }
    if n == 0 {
        return Err(RlError::EmptyMask);
    }
    Ok(-sum / T::count(n))
}

/// Token-weighted SFT loss over several samples, each scaled by its weight
/// (for example a per-polarity weight from curation).
pub fn weighted_sft_loss<T: Real>(samples: &[(&[T], &[bool], T)]) -> Result<T, RlError> {
    let mut num = T::zero();
    let mut den = T::zero();
    for (i, (lps, mask, w)) in samples.iter().enumerate() {
        if lps.len() != mask.len() {
            return Err(RlError::LengthMismatch {
                episode: i,
                left: lps.len(),
                right: mask.len(),
            });
        }
        if !w.is_finite() || *w < T::zero() {
            return Err(RlError::BadWeights);
        }
        for (lp, m) in lps.iter().zip(mask.iter()) {
            if *m {
                num = num - *w * *lp;
                den = den + *w;
            }
        }
    }
    if den == T::zero() {
        return Err(RlError::EmptyMask);
    }
    Ok(num / den)
}

// ----- schedule -------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UpdateStep {
    pub task: Task,
    /// Indices of the query groups contributing to this objective.
    pub groups: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UpdatePlan {
    pub steps: Vec<UpdateStep>,
}

impl UpdatePlan {
    pub fn tasks(&self) -> Vec<Task> {
        self.steps.iter().map(|s| s.task).collect()
    }
}

/// Retrieval first, then execution over the groups that kept any episode.
pub fn step_schedule<T>(batch: &[QueryAdvantages<T>]) -> UpdatePlan {
    let mut steps = vec![UpdateStep {
        task: Task::Ret,
        groups: (0..batch.len()).collect(),
    }];
    let exec: Vec<usize> = batch
        .iter()
        .enumerate()
        .filter(|(_, q)| q.exec.as_ref().is_some_and(|a| !a.advantages.is_empty()))
        .map(|(i, _)| i)
        .collect();
    if !exec.is_empty() {
        steps.push(UpdateStep {
            task: Task::Exec,
            groups: exec,
        });
    }
    UpdatePlan { steps }
}
