//! Benchmark metrics and controlled experiments: NDCG@k and recall over
//! finalized tool lists, judged pass and win rates, the adversarial-noise
//! protocol, and per-episode efficiency counters.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize};
use thiserror::Error;

use crate::catalog::Catalog;
use crate::curation::AnnotatedQuery;
use crate::environment::ToolEnvironment;
use crate::retrieval::ToolSearch;
use crate::rl::recall_reward;
use crate::runtime::{run_episode_with, Episode, PolicyOracle, RolloutConfig, RuntimeError};
use crate::scalar::Real;

pub const DEFAULT_NDCG_KS: [usize; 3] = [1, 3, 5];
pub const NOISE_LEVELS: [usize; 4] = [0, 5, 10, 15];
pub const UNLABELED_SPLIT: &str = "unlabeled";

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("k must be at least 1")]
    ZeroK,
    #[error("{0} needs at least one input")]
    Empty(&'static str),
    #[error("noise pool has {available} ids, {requested} requested")]
    PoolTooSmall { requested: usize, available: usize },
    #[error("noise pool contains gold tool {0}")]
    PoolHasGold(u64),
    #[error("no verdict for query {query_id} rollout {rollout}")]
    MissingVerdict { query_id: String, rollout: usize },
    #[error("judge failed: {0}")]
    Judge(String),
    #[error("remote judge failed")]
    Remote(#[source] Box<dyn std::error::Error + Send + Sync>),
    #[error("verdict fixture line {line}")]
    Parse {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Runtime(#[from] RuntimeError),
    #[error("{}", path.display())]
    File {
        path: std::path::PathBuf,
        #[source]
        source: Box<EvalError>,
    },
}

// ----- ranking metrics ------------------------------------------------------

/// Binary-relevance NDCG. Repeated ids in `ranked` count once, at their
/// first position; an empty gold set scores 0.
pub fn ndcg_at_k<T: Real>(ranked: &[u64], gold: &[u64], k: usize) -> Result<T, EvalError> {
    if k == 0 {
        return Err(EvalError::ZeroK);
    }
    let gold: HashSet<u64> = gold.iter().copied().collect();
    if gold.is_empty() {
        return Ok(T::zero());
    }
    let discount = |rank: usize| T::one() / (T::count(rank) + T::one()).log2();
    let mut seen = HashSet::new();
    let dcg: T = ranked
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, id)| seen.insert(**id) && gold.contains(id))
        .map(|(i, _)| discount(i + 1))
        .sum();
    let idcg: T = (1..=gold.len().min(k)).map(discount).sum();
    Ok(dcg / idcg)
}

/// Fraction of gold covered by the first `k` ranked ids.
pub fn recall_at_k<T: Real>(ranked: &[u64], gold: &[u64], k: usize) -> Result<T, EvalError> {
    if k == 0 {
        return Err(EvalError::ZeroK);
    }
    Ok(recall_reward(gold, &ranked[..k.min(ranked.len())]))
}

pub fn pass_rate<T: Real>(verdicts: &[bool]) -> Result<T, EvalError> {
    if verdicts.is_empty() {
        return Err(EvalError::Empty("pass rate"));
    }
    Ok(T::count(verdicts.iter().filter(|v| **v).count()) / T::count(verdicts.len()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preference {
    Win,
    Lose,
    Tie,
}

/// Wins over total; ties are not wins.
pub fn win_rate<T: Real>(outcomes: &[Preference]) -> Result<T, EvalError> {
    if outcomes.is_empty() {
        return Err(EvalError::Empty("win rate"));
    }
    let wins = outcomes.iter().filter(|p| **p == Preference::Win).count();
    Ok(T::count(wins) / T::count(outcomes.len()))
}

/// Appends the first `n` pool ids not already selected.
pub fn inject_noise(
    selected: &[u64],
    pool: &[u64],
    gold: &[u64],
    n: usize,
) -> Result<Vec<u64>, EvalError> {
    if let Some(g) = pool.iter().find(|id| gold.contains(id)) {
        return Err(EvalError::PoolHasGold(*g));
    }
    let mut out = selected.to_vec();
    let mut seen: HashSet<u64> = selected.iter().copied().collect();
    let before = out.len();
    for id in pool {
        if out.len() - before == n {
            break;
        }
        if seen.insert(*id) {
            out.push(*id);
        }
    }
    if out.len() - before < n {
        return Err(EvalError::PoolTooSmall {
            requested: n,
            available: out.len() - before,
        });
    }
    Ok(out)
}

// ----- judging --------------------------------------------------------------

#[derive(Clone, Copy, Debug)]
pub struct JudgeRequest<'a> {
    pub query_id: &'a str,
    pub rollout_index: usize,
    pub question: &'a str,
    pub answer: &'a str,
    pub trajectory: &'a str,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    #[serde(deserialize_with = "bit_or_bool")]
    pub solved: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vs_reference: Option<Preference>,
}

fn bit_or_bool<'de, D: Deserializer<'de>>(d: D) -> Result<bool, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Bit {
        B(bool),
        N(u8),
    }
    match Bit::deserialize(d)? {
        Bit::B(b) => Ok(b),
        Bit::N(0) => Ok(false),
        Bit::N(1) => Ok(true),
        Bit::N(n) => Err(serde::de::Error::custom(format!(
            "solved must be 0 or 1, got {n}"
        ))),
    }
}

/// Answer-quality oracle. Implementations may be remote.
pub trait Judge: Send + Sync {
    fn judge(&self, request: &JudgeRequest<'_>) -> Result<Verdict, EvalError>;
}

#[derive(Deserialize)]
struct VerdictLine {
    query_id: String,
    #[serde(default)]
    rollout: Option<usize>,
    #[serde(flatten)]
    verdict: Verdict,
}

/// Offline judge backed by a JSONL fixture of
/// `{query_id, rollout?, solved, vs_reference?}`. A line without `rollout`
/// applies to every rollout of that query that has no specific line.
#[derive(Clone, Debug, Default)]
pub struct FixtureJudge {
    verdicts: HashMap<(String, Option<usize>), Verdict>,
}

impl FixtureJudge {
    pub fn from_reader(reader: impl BufRead) -> Result<Self, EvalError> {
        let mut verdicts = HashMap::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let v: VerdictLine =
                serde_json::from_str(&line).map_err(|source| EvalError::Parse {
                    line: i + 1,
                    source,
                })?;
            verdicts.insert((v.query_id, v.rollout), v.verdict);
        }
        Ok(Self { verdicts })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, EvalError> {
        let path = path.as_ref();
        File::open(path)
            .map_err(EvalError::from)
            .and_then(|file| Self::from_reader(BufReader::new(file)))
            .map_err(|source| EvalError::File {
                path: path.to_path_buf(),
                source: Box::new(source),
            })
    }

    pub fn insert(
        &mut self,
        query_id: impl Into<String>,
        rollout: Option<usize>,
        verdict: Verdict,
    ) {
        self.verdicts.insert((query_id.into(), rollout), verdict);
    }
}

impl Judge for FixtureJudge {
    fn judge(&self, request: &JudgeRequest<'_>) -> Result<Verdict, EvalError> {
        let qid = request.query_id.to_string();
        self.verdicts
            .get(&(qid.clone(), Some(request.rollout_index)))
            .or_else(|| self.verdicts.get(&(qid, None)))
            .copied()
            .ok_or_else(|| EvalError::MissingVerdict {
                query_id: request.query_id.to_string(),
                rollout: request.rollout_index,
            })
    }
}

/// Verdict for an episode. Episodes that never produced an answer are
/// unsolved losses without consulting the judge.
pub fn judge_episode(judge: &dyn Judge, episode: &Episode) -> Result<Verdict, EvalError> {
    match (&episode.final_answer, &episode.execution) {
        (Some(answer), Some(exec)) => judge.judge(&JudgeRequest {
            query_id: &episode.query_id,
            rollout_index: episode.rollout_index,
            question: &episode.question,
            answer,
            trajectory: &exec.raw_text,
        }),
        _ => Ok(Verdict {
            solved: false,
            vs_reference: Some(Preference::Lose),
        }),
    }
}

/// Judges every episode concurrently, keeping input order.
pub fn judge_all(judge: &dyn Judge, episodes: &[Episode]) -> Result<Vec<Verdict>, EvalError> {
    episodes
        .par_iter()
        .map(|e| judge_episode(judge, e))
        .collect()
}

// ----- reports --------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub split: String,
    pub size: usize,
    /// Keyed `ndcg@k`.
    pub ndcg: BTreeMap<String, f64>,
    pub recall_k: usize,
    pub recall: f64,
    pub sopr: Option<f64>,
    pub sowr: Option<f64>,
    pub avg_search_count: f64,
    pub avg_tool_calls: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub splits: Vec<SplitMetrics>,
    /// Unweighted mean of the split rows.
    #[serde(rename = "macro")]
    pub macro_avg: SplitMetrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub ndcg_ks: Vec<usize>,
    pub recall_k: usize,
    /// Splits that should appear; any with no episodes is reported as missing.
    pub expected_splits: Vec<String>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            ndcg_ks: DEFAULT_NDCG_KS.to_vec(),
            recall_k: 5,
            expected_splits: Vec::new(),
        }
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

fn split_row(
    split: &str,
    episodes: &[&Episode],
    verdicts: Option<&[Verdict]>,
    config: &BenchConfig,
) -> Result<SplitMetrics, EvalError> {
    let mut ndcg = BTreeMap::new();
    for &k in &config.ndcg_ks {
        let values = episodes
            .iter()
            .map(|e| ndcg_at_k::<f64>(&e.selected, &e.gold, k))
            .collect::<Result<Vec<_>, _>>()?;
        ndcg.insert(format!("ndcg@{k}"), mean(values.into_iter()));
    }
    let recalls = episodes
        .iter()
        .map(|e| recall_at_k::<f64>(&e.selected, &e.gold, config.recall_k))
        .collect::<Result<Vec<_>, _>>()?;
    let (sopr, sowr) = match verdicts {
        Some(v) => {
            let solved: Vec<bool> = v.iter().map(|x| x.solved).collect();
            let prefs: Vec<Preference> = v.iter().filter_map(|x| x.vs_reference).collect();
            (
                Some(pass_rate::<f64>(&solved)?),
                if prefs.is_empty() {
                    None
                } else {
                    Some(win_rate::<f64>(&prefs)?)
                },
            )
        }
        None => (None, None),
    };
    Ok(SplitMetrics {
        split: split.to_string(),
        size: episodes.len(),
        ndcg,
        recall_k: config.recall_k,
        recall: mean(recalls.into_iter()),
        sopr,
        sowr,
        avg_search_count: mean(episodes.iter().map(|e| e.counters.search_count as f64)),
        avg_tool_calls: mean(episodes.iter().map(|e| e.counters.tool_call_count as f64)),
    })
}

fn macro_row(rows: &[SplitMetrics], config: &BenchConfig) -> SplitMetrics {
    let opt_mean = |f: fn(&SplitMetrics) -> Option<f64>| -> Option<f64> {
        let vals: Vec<f64> = rows.iter().filter_map(f).collect();
        if vals.is_empty() {
            None
        } else {
            Some(mean(vals.into_iter()))
        }
    };
    let ndcg = config
        .ndcg_ks
        .iter()
        .map(|k| {
            let key = format!("ndcg@{k}");
            let v = mean(rows.iter().map(|r| r.ndcg[&key]));
            (key, v)
        })
        .collect();
    SplitMetrics {
        split: "macro".to_string(),
        size: rows.iter().map(|r| r.size).sum(),
        ndcg,
        recall_k: config.recall_k,
        recall: mean(rows.iter().map(|r| r.recall)),
        sopr: opt_mean(|r| r.sopr),
        sowr: opt_mean(|r| r.sowr),
        avg_search_count: mean(rows.iter().map(|r| r.avg_search_count)),
        avg_tool_calls: mean(rows.iter().map(|r| r.avg_tool_calls)),
    }
}

/// Aggregates per-split and macro metrics. Without a judge only retrieval
/// metrics and counters are filled in.
pub fn run_benchmark(
    episodes: &[Episode],
    judge: Option<&dyn Judge>,
    config: &BenchConfig,
) -> Result<MetricReport, EvalError> {
    if episodes.is_empty() {
        return Err(EvalError::Empty("benchmark"));
    }
    let verdicts = judge.map(|j| judge_all(j, episodes)).transpose()?;
    let mut by_split: BTreeMap<&str, (Vec<&Episode>, Vec<Verdict>)> = BTreeMap::new();
    for (i, e) in episodes.iter().enumerate() {
        let entry = by_split
            .entry(e.split.as_deref().unwrap_or(UNLABELED_SPLIT))
            .or_default();
        entry.0.push(e);
        if let Some(v) = &verdicts {
            entry.1.push(v[i]);
        }
    }
    for expected in &config.expected_splits {
        if !by_split.contains_key(expected.as_str()) {
            log::warn!("split {expected} has no episodes; row omitted");
        }
    }
    let rows = by_split
        .iter()
        .map(|(split, (eps, vs))| {
            split_row(split, eps, verdicts.as_ref().map(|_| vs.as_slice()), config)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let macro_avg = macro_row(&rows, config);
    Ok(MetricReport {
        splits: rows,
        macro_avg,
    })
}

impl MetricReport {
    /// Fixed-width text table, one row per split plus the macro row.
    pub fn render_table(&self) -> String {
        let keys: Vec<&String> = self.macro_avg.ndcg.keys().collect();
        let mut out = format!("{:<16} {:>6}", "split", "n");
        for k in &keys {
            out.push_str(&format!(" {:>8}", k));
        }
        out.push_str(&format!(
            " {:>9} {:>7} {:>7} {:>9} {:>9}\n",
            format!("recall@{}", self.macro_avg.recall_k),
            "sopr",
            "sowr",
            "searches",
            "calls"
        ));
        let fmt_opt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
        for row in self.splits.iter().chain(std::iter::once(&self.macro_avg)) {
            out.push_str(&format!("{:<16} {:>6}", row.split, row.size));
            for k in &keys {
                out.push_str(&format!(
                    " {:>8.4}",
                    row.ndcg.get(*k).copied().unwrap_or(0.0)
                ));
            }
            out.push_str(&format!(
                " {:>9.4} {:>7} {:>7} {:>9.3} {:>9.3}\n",
                row.recall,
                fmt_opt(row.sopr),
                fmt_opt(row.sowr),
                row.avg_search_count,
                row.avg_tool_calls
            ));
        }
        out
    }
}

// ----- noise protocol -------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseRow {
    pub level: usize,
    pub queries: usize,
    pub pass_rate: f64,
}

/// Adversarial pool for a query: dense-retrieval hits on the question with
/// gold tools removed, deep enough to supply `n` fresh ids.
pub fn adversarial_pool(
    search: &dyn ToolSearch,
    query: &AnnotatedQuery,
    selected: &[u64],
    n: usize,
) -> Result<Vec<u64>, EvalError> {
    if n == 0 {
        return Ok(Vec::new());
    }
    let depth = n + selected.len() + query.gold.len();
    let hits = search
        .search(&query.question, depth)
        .map_err(RuntimeError::from)?;
    Ok(hits
        .ids
        .into_iter()
        .filter(|id| !query.gold.contains(id))
        .collect())
}

/// One rollout per query at each noise level; `n` distractor tools are added
/// to the execution context after the agent's own selection.
#[allow(clippy::too_many_arguments)]
pub fn noise_sweep(
    policy_for: &(dyn Fn(&AnnotatedQuery) -> Option<Box<dyn PolicyOracle>> + Sync),
    queries: &[AnnotatedQuery],
    catalog: &Catalog,
    search: &dyn ToolSearch,
    env: &dyn ToolEnvironment,
    judge: &dyn Judge,
    config: &RolloutConfig,
    levels: &[usize],
) -> Result<(Vec<NoiseRow>, Vec<Vec<Episode>>), EvalError> {
    let mut rows = Vec::new();
    let mut all = Vec::new();
    for &level in levels {
        let inject =
            move |q: &AnnotatedQuery, selected: &[u64]| -> Result<Vec<u64>, RuntimeError> {
                let pool = adversarial_pool(search, q, selected, level)
                    .map_err(|e| RuntimeError::Hook(e.to_string()))?;
                let with = inject_noise(selected, &pool, &q.gold, level)
                    .map_err(|e| RuntimeError::Hook(e.to_string()))?;
                Ok(with[selected.len()..].to_vec())
            };
        let episodes = queries
            .par_iter()
            .map(|q| {
                let policy = policy_for(q).ok_or_else(|| {
                    EvalError::Judge(format!("no policy for query {}", q.query_id))
                })?;
                Ok(run_episode_with(
                    policy.as_ref(),
                    q,
                    catalog,
                    search,
                    env,
                    config,
                    0,
                    &inject,
                )?)
            })
            .collect::<Result<Vec<Episode>, EvalError>>()?;
        let verdicts = judge_all(judge, &episodes)?;
        let solved: Vec<bool> = verdicts.iter().map(|v| v.solved).collect();
        rows.push(NoiseRow {
            level,
            queries: episodes.len(),
            pass_rate: pass_rate(&solved)?,
        });
        all.push(episodes);
    }
    Ok((rows, all))
}
