//! Stage functions over in-memory records, plus the end-to-end run that
//! wires them to files.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use toolforge_core::catalog::CatalogError;
use toolforge_core::environment::{EnvError, Observation, Simulator};
use toolforge_core::eval::{judge_episode, run_benchmark, BenchConfig, EvalError};
use toolforge_core::grammar::ToolCall;
use toolforge_core::retrieval::{Embedder, RetrievalError, SearchOutcome, VectorIndex};
use toolforge_core::rl::{
    build_token_mask, score_episode, step_schedule, surrogate_objective, weighted_sft_loss,
    AdvantageSet, RlError, Task,
};
use toolforge_core::runtime::{run_group, RuntimeError, Source, TokenLogprob, Transcript};
use toolforge_core::{
    load_catalog, AnnotatedQuery, Catalog, Episode, FixtureJudge, HybridEnvironment, Judge,
    LocalSearch, MetricReport, PolicyOracle, ReplayStore, RewardBreakdown, RolloutConfig,
    RolloutGroup, ScoreConfig, ScriptBook, TemplatedSimulator, ToolRecord, ToolSearch,
    TrigramEmbedder, Verdict,
};

use crate::clients::{HttpEmbedder, HttpJudge, HttpPolicy, HttpSimulator, RemoteSearch};
use crate::config::{ConfigError, RunConfig};
use crate::io::{read_jsonl, write_json, write_jsonl, write_text, IoError};

pub const EPISODES_FILE: &str = "episodes.jsonl";
pub const REWARDS_FILE: &str = "rewards.jsonl";
pub const ADVANTAGES_FILE: &str = "advantages.jsonl";
pub const OBJECTIVES_FILE: &str = "objectives.jsonl";
pub const REPORT_FILE: &str = "report.json";
pub const RESOLVED_CONFIG_FILE: &str = "config.resolved.toml";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Catalog(#[from] CatalogError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Runtime(#[from] RuntimeError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Rl(#[from] RlError),
    #[error(transparent)]
    Curation(#[from] toolforge_core::curation::CurationError),
    #[error("loading scripts {path}")]
    Scripts {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("fixture mismatch: {0}")]
    Fixture(String),
}

// ----- backends -------------------------------------------------------------

pub enum AnyEmbedder {
    Trigram(TrigramEmbedder),
    Http(HttpEmbedder),
}

impl Embedder<f64> for AnyEmbedder {
    fn dims(&self) -> usize {
        match self {
            AnyEmbedder::Trigram(e) => Embedder::<f64>::dims(e),
            AnyEmbedder::Http(e) => e.dims(),
        }
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, RetrievalError> {
        match self {
            AnyEmbedder::Trigram(e) => e.embed(text),
            AnyEmbedder::Http(e) => e.embed(text),
        }
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, RetrievalError> {
        match self {
            AnyEmbedder::Trigram(e) => e.embed_batch(texts),
            AnyEmbedder::Http(e) => e.embed_batch(texts),
        }
    }
}

pub enum SearchBackend {
    Local(LocalSearch<f64, AnyEmbedder>),
    Remote(RemoteSearch),
}

impl ToolSearch for SearchBackend {
    fn search(&self, query: &str, k: usize) -> Result<SearchOutcome, RetrievalError> {
        match self {
            SearchBackend::Local(s) => s.search(query, k),
            SearchBackend::Remote(s) => s.search(query, k),
        }
    }
}

pub enum AnySimulator {
    Templated(TemplatedSimulator),
    Http(HttpSimulator),
}

impl Simulator for AnySimulator {
    fn simulate(&self, record: &ToolRecord, call: &ToolCall, canonical_input: &str) -> Observation {
        match self {
            AnySimulator::Templated(s) => s.simulate(record, call, canonical_input),
            AnySimulator::Http(s) => s.simulate(record, call, canonical_input),
        }
    }
}

pub enum PolicySource {
    Scripts(ScriptBook),
    Http(HttpPolicy),
}

impl PolicySource {
    pub fn for_query(&self, query_id: &str) -> Option<Box<dyn PolicyOracle>> {
        match self {
            PolicySource::Scripts(book) => book
                .policy(query_id)
                .map(|p| Box::new(p) as Box<dyn PolicyOracle>),
            PolicySource::Http(p) => Some(Box::new(p.clone())),
        }
    }

    pub fn require(&self, query_id: &str) -> Result<Box<dyn PolicyOracle>, PipelineError> {
        self.for_query(query_id)
            .ok_or_else(|| PipelineError::Fixture(format!("no script for query {query_id}")))
    }
}

pub fn load_catalog_arc(config: &RunConfig) -> Result<Arc<Catalog>, PipelineError> {
    Ok(Arc::new(load_catalog(&config.catalog)?))
}

pub fn build_embedder(config: &RunConfig) -> AnyEmbedder {
    match &config.endpoints.embedder {
        Some(url) => AnyEmbedder::Http(HttpEmbedder::new(
            url,
            config.index.dims,
            config.endpoints.timeout_secs,
        )),
        None => AnyEmbedder::Trigram(TrigramEmbedder::new(config.index.dims)),
    }
}

pub fn build_index(
    catalog: Arc<Catalog>,
    embedder: &AnyEmbedder,
) -> Result<VectorIndex<f64>, PipelineError> {
    Ok(VectorIndex::build(catalog, embedder)?)
}

pub fn build_search(
    config: &RunConfig,
    catalog: Arc<Catalog>,
) -> Result<SearchBackend, PipelineError> {
    if let Some(url) = &config.endpoints.retrieval {
        return Ok(SearchBackend::Remote(RemoteSearch::new(
            url,
            catalog,
            config.endpoints.timeout_secs,
        )));
    }
    let embedder = build_embedder(config);
    let index = build_index(catalog, &embedder)?;
    Ok(SearchBackend::Local(LocalSearch::new(index, embedder)))
}

pub fn build_env(
    config: &RunConfig,
    catalog: Arc<Catalog>,
) -> Result<HybridEnvironment<AnySimulator>, PipelineError> {
    let store = match &config.fixtures.replay {
        Some(path) => ReplayStore::load(path)?,
        None => ReplayStore::new(),
    };
    let simulator = match &config.endpoints.simulator {
        Some(url) => AnySimulator::Http(HttpSimulator::new(url, config.endpoints.timeout_secs)),
        None => AnySimulator::Templated(TemplatedSimulator::new(config.simulator.clone())?),
    };
    Ok(HybridEnvironment::new(store, catalog, simulator))
}

pub fn build_policy(config: &RunConfig) -> Result<PolicySource, PipelineError> {
    if let Some(url) = &config.endpoints.policy {
        return Ok(PolicySource::Http(HttpPolicy::new(
            url,
            config.endpoints.timeout_secs,
        )));
    }
    let path = config.fixtures.scripts.as_ref().ok_or_else(|| {
        PipelineError::Fixture("no policy endpoint and no scripts fixture configured".into())
    })?;
    let book = ScriptBook::load(path).map_err(|source| PipelineError::Scripts {
        path: path.clone(),
        source,
    })?;
    Ok(PolicySource::Scripts(book))
}

/// `spec` is a URL or a verdict fixture path; without it the configured
/// endpoint or fixture is used.
pub fn build_judge(
    config: &RunConfig,
    spec: Option<&str>,
) -> Result<Option<Box<dyn Judge>>, PipelineError> {
    let timeout = config.endpoints.timeout_secs;
    let from_spec = |s: &str| -> Result<Box<dyn Judge>, PipelineError> {
        if s.starts_with("http://") || s.starts_with("https://") {
            Ok(Box::new(HttpJudge::new(s, timeout)))
        } else {
            Ok(Box::new(FixtureJudge::load(s)?))
        }
    };
    if let Some(s) = spec {
        return from_spec(s).map(Some);
    }
    if let Some(url) = &config.endpoints.judge {
        return Ok(Some(Box::new(HttpJudge::new(url, timeout))));
    }
    match &config.fixtures.verdicts {
        Some(path) => Ok(Some(Box::new(FixtureJudge::load(path)?))),
        None => Ok(None),
    }
}

/// Everything a rollout needs.
pub struct World {
    pub catalog: Arc<Catalog>,
    pub search: SearchBackend,
    pub env: HybridEnvironment<AnySimulator>,
    pub policy: PolicySource,
    pub judge: Option<Box<dyn Judge>>,
}

impl World {
    pub fn build(config: &RunConfig) -> Result<Self, PipelineError> {
        let catalog = load_catalog_arc(config)?;
        Ok(Self {
            search: build_search(config, catalog.clone())?,
            env: build_env(config, catalog.clone())?,
            policy: build_policy(config)?,
            judge: build_judge(config, None)?,
            catalog,
        })
    }
}

pub fn load_queries(path: &Path) -> Result<Vec<AnnotatedQuery>, PipelineError> {
    Ok(read_jsonl(path)?)
}

// ----- stages ---------------------------------------------------------------

/// One group per query, in query order.
pub fn rollout(
    world: &World,
    queries: &[AnnotatedQuery],
    config: &RolloutConfig,
) -> Result<Vec<RolloutGroup>, PipelineError> {
    queries
        .iter()
        .map(|q| {
            let policy = world.policy.require(&q.query_id)?;
            Ok(run_group(
                policy.as_ref(),
                q,
                &world.catalog,
                &world.search,
                &world.env,
                config,
            )?)
        })
        .collect()
}

pub fn flatten(groups: &[RolloutGroup]) -> Vec<Episode> {
    groups
        .iter()
        .flat_map(|g| g.episodes.iter().cloned())
        .collect()
}

/// Judge verdicts for episodes that answered; `None` elsewhere. Fails if an
/// answer needs judging and no judge is configured.
pub fn verdicts(
    judge: Option<&dyn Judge>,
    episodes: &[Episode],
) -> Result<Vec<Option<Verdict>>, PipelineError> {
    episodes
        .iter()
        .map(|e| match (&e.final_answer, judge) {
            (None, _) => Ok(None),
            (Some(_), Some(j)) => Ok(Some(judge_episode(j, e)?)),
            (Some(_), None) => Err(PipelineError::Fixture(format!(
                "episode {}/{} has an answer but no judge is configured",
                e.query_id, e.rollout_index
            ))),
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardRow {
    pub query_id: String,
    pub rollout_index: usize,
    pub solved: Option<bool>,
    #[serde(flatten)]
    pub rewards: RewardBreakdown,
}

pub fn score(
    episodes: &[Episode],
    verdicts: &[Option<Verdict>],
    config: &ScoreConfig,
    catalog: &Catalog,
) -> Result<Vec<RewardRow>, PipelineError> {
    if episodes.len() != verdicts.len() {
        return Err(PipelineError::Fixture(format!(
            "{} episodes but {} verdicts",
            episodes.len(),
            verdicts.len()
        )));
    }
    episodes
        .iter()
        .zip(verdicts)
        .map(|(e, v)| {
            let solved = v.map(|v| v.solved);
            Ok(RewardRow {
                query_id: e.query_id.clone(),
                rollout_index: e.rollout_index,
                solved,
                rewards: score_episode(e, solved, config, Some(catalog))?,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdvantageRow {
    pub query_id: String,
    pub rollout_index: usize,
    pub ret: f64,
    /// Present only for episodes kept by the gate.
    pub exec: Option<f64>,
    pub ret_group: usize,
    pub exec_group: usize,
}

/// Rows of one query, keyed by rollout index, each with its task reward.
#[derive(Clone, Debug, Default)]
struct QueryRows {
    ret: Vec<(usize, f64)>,
    exec: Vec<(usize, f64)>,
}

fn group_by_query<'a, T>(
    items: impl IntoIterator<Item = &'a T>,
    key: impl Fn(&T) -> &str,
) -> Vec<(String, Vec<&'a T>)>
where
    T: 'a,
{
    let mut order: Vec<(String, Vec<&T>)> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    for item in items {
        let k = key(item);
        match index.get(k) {
            Some(&i) => order[i].1.push(item),
            None => {
                index.insert(k.to_string(), order.len());
                order.push((k.to_string(), vec![item]));
            }
        }
    }
    order
}

/// Group-relative advantages per task. Execution groups hold only the
/// episodes that carry an execution reward.
pub fn advantages(rewards: &[RewardRow], epsilon: f64) -> Result<Vec<AdvantageRow>, PipelineError> {
    let mut out = Vec::with_capacity(rewards.len());
    for (query_id, rows) in group_by_query(rewards, |r| &r.query_id) {
        let mut q = QueryRows::default();
        for r in &rows {
            q.ret.push((r.rollout_index, r.rewards.total_ret));
            if let Some(x) = r.rewards.total_exec {
                q.exec.push((r.rollout_index, x));
            }
        }
        let group = toolforge_core::GroupRewards {
            ret: q.ret.iter().map(|x| x.1).collect(),
            exec: q.exec.iter().map(|x| x.1).collect(),
        };
        let adv = toolforge_core::rl::decoupled_advantages(&group, epsilon)?;
        let exec_by_rollout: BTreeMap<usize, f64> = match &adv.exec {
            Some(set) => q
                .exec
                .iter()
                .map(|x| x.0)
                .zip(set.advantages.iter().copied())
                .collect(),
            None => BTreeMap::new(),
        };
        for ((rollout_index, _), a) in q.ret.iter().zip(&adv.ret.advantages) {
            out.push(AdvantageRow {
                query_id: query_id.clone(),
                rollout_index: *rollout_index,
                ret: *a,
                exec: exec_by_rollout.get(rollout_index).copied(),
                ret_group: q.ret.len(),
                exec_group: q.exec.len(),
            });
        }
    }
    Ok(out)
}

/// Per-token log importance ratios for one episode and task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatioRow {
    pub query_id: String,
    pub rollout_index: usize,
    pub task: Task,
    pub log_ratios: Vec<f64>,
}

pub type RatioBook = HashMap<(String, usize, Task), Vec<f64>>;

pub fn ratio_book(rows: Vec<RatioRow>) -> RatioBook {
    rows.into_iter()
        .map(|r| ((r.query_id, r.rollout_index, r.task), r.log_ratios))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveRow {
    pub step: usize,
    pub task: Task,
    pub groups: usize,
    pub episodes: usize,
    pub active_tokens: usize,
    pub objective: f64,
    /// Present when the policy reported token log-probabilities.
    pub sft_loss: Option<f64>,
}

fn sequence_for(
    episode: &Episode,
    task: Task,
    catalog: &Catalog,
) -> Result<Option<Transcript>, PipelineError> {
    Ok(match task {
        Task::Ret => Some(episode.retrieval_sequence()?),
        Task::Exec => episode.execution_sequence(catalog)?,
    })
}

/// Log-probabilities of agent tokens for one phase, with their mask bits.
fn sft_sample(episode: &Episode, task: Task) -> Option<(Vec<f64>, Vec<bool>)> {
    let (logprobs, transcript): (&[TokenLogprob], Transcript) = match task {
        Task::Ret => (
            episode.retrieval_logprobs.as_deref()?,
            episode.retrieval_transcript(),
        ),
        Task::Exec => (
            episode.execution_logprobs.as_deref()?,
            episode.execution_transcript()?,
        ),
    };
    let lps = logprobs.iter().map(|t| t.logprob).collect();
    let bits = logprobs
        .iter()
        .map(|t| transcript.source_at(t.text_offset) == Some(Source::Agent))
        .collect();
    Some((lps, bits))
}

/// Evaluates the ordered objectives: retrieval over every group, then
/// execution over the groups whose gate kept any episode. Without a ratio
/// book every log-ratio is 0 (the first on-policy step).
pub fn objectives(
    episodes: &[Episode],
    advantages: &[AdvantageRow],
    catalog: &Catalog,
    clip_eps: f64,
    ratios: Option<&RatioBook>,
) -> Result<Vec<ObjectiveRow>, PipelineError> {
    let by_key: HashMap<(&str, usize), &Episode> = episodes
        .iter()
        .map(|e| ((e.query_id.as_str(), e.rollout_index), e))
        .collect();
    let grouped = group_by_query(advantages, |a| &a.query_id);
    let batch: Vec<toolforge_core::QueryAdvantages> = grouped
        .iter()
        .map(|(_, rows)| {
            let set = |task, advantages: Vec<f64>| AdvantageSet {
                task,
                advantages,
                mean: 0.0,
                std: 0.0,
                epsilon: 0.0,
            };
            let exec: Vec<f64> = rows.iter().filter_map(|r| r.exec).collect();
            toolforge_core::QueryAdvantages {
                ret: set(Task::Ret, rows.iter().map(|r| r.ret).collect()),
                exec: if exec.is_empty() {
                    None
                } else {
                    Some(set(Task::Exec, exec))
                },
            }
        })
        .collect();
    let plan = step_schedule(&batch);
    let mut out = Vec::new();
    for (step, s) in plan.steps.iter().enumerate() {
        let mut owned: Vec<(Vec<f64>, Vec<bool>, f64)> = Vec::new();
        let mut sft: Vec<(Vec<f64>, Vec<bool>, f64)> = Vec::new();
        for &g in &s.groups {
            for row in &grouped[g].1 {
                let advantage = match s.task {
                    Task::Ret => row.ret,
                    Task::Exec => match row.exec {
                        Some(a) => a,
                        None => continue,
                    },
                };
                let episode = by_key
                    .get(&(row.query_id.as_str(), row.rollout_index))
                    .ok_or_else(|| {
                        PipelineError::Fixture(format!(
                            "no episode for {}/{}",
                            row.query_id, row.rollout_index
                        ))
                    })?;
                let Some(seq) = sequence_for(episode, s.task, catalog)? else {
                    return Err(PipelineError::Fixture(format!(
                        "{}/{} has an execution advantage but no execution",
                        row.query_id, row.rollout_index
                    )));
                };
                let mask = build_token_mask(&seq, None)?;
                let lr = match ratios
                    .and_then(|b| b.get(&(row.query_id.clone(), row.rollout_index, s.task)))
                {
                    Some(lr) => lr.clone(),
                    None => vec![0.0; mask.len()],
                };
                if let Some((lps, bits)) = sft_sample(episode, s.task) {
                    sft.push((lps, bits, 1.0));
                }
                owned.push((lr, mask.bits, advantage));
            }
        }
        let terms: Vec<toolforge_core::EpisodeTerms<'_>> = owned
            .iter()
            .map(|(lr, m, a)| toolforge_core::EpisodeTerms {
                log_ratios: lr,
                mask: m,
                advantage: *a,
            })
            .collect();
        let objective = surrogate_objective(&terms, clip_eps)?;
        let sft_loss = if sft.is_empty() {
            None
        } else {
            let samples: Vec<(&[f64], &[bool], f64)> = sft
                .iter()
                .map(|(l, b, w)| (l.as_slice(), b.as_slice(), *w))
                .collect();
            Some(weighted_sft_loss(&samples)?)
        };
        out.push(ObjectiveRow {
            step,
            task: s.task,
            groups: s.groups.len(),
            episodes: owned.len(),
            active_tokens: owned
                .iter()
                .map(|o| o.1.iter().filter(|b| **b).count())
                .sum(),
            objective,
            sft_loss,
        });
    }
    Ok(out)
}

/// Benchmark report that reuses already-computed verdicts instead of
/// asking the judge again.
pub fn report(
    episodes: &[Episode],
    verdicts: Option<&[Option<Verdict>]>,
    config: &BenchConfig,
) -> Result<MetricReport, PipelineError> {
    let cached = verdicts.map(|vs| {
        let mut j = FixtureJudge::default();
        for (e, v) in episodes.iter().zip(vs) {
            if let Some(v) = v {
                j.insert(e.query_id.clone(), Some(e.rollout_index), *v);
            }
        }
        j
    });
    Ok(run_benchmark(
        episodes,
        cached.as_ref().map(|j| j as &dyn Judge),
        config,
    )?)
}

// ----- end to end -----------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Artifacts {
    pub episodes: PathBuf,
    pub rewards: PathBuf,
    pub advantages: PathBuf,
    pub objectives: PathBuf,
    pub report: PathBuf,
    pub config: PathBuf,
}

impl Artifacts {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            episodes: dir.join(EPISODES_FILE),
            rewards: dir.join(REWARDS_FILE),
            advantages: dir.join(ADVANTAGES_FILE),
            objectives: dir.join(OBJECTIVES_FILE),
            report: dir.join(REPORT_FILE),
            config: dir.join(RESOLVED_CONFIG_FILE),
        }
    }
}

/// In-memory results of a full run.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub episodes: Vec<Episode>,
    pub rewards: Vec<RewardRow>,
    pub advantages: Vec<AdvantageRow>,
    pub objectives: Vec<ObjectiveRow>,
    pub report: MetricReport,
}

pub fn run(config: &RunConfig) -> Result<RunOutput, PipelineError> {
    config.validate()?;
    let world = World::build(config)?;
    let queries = load_queries(&config.queries)?;
    let groups = rollout(&world, &queries, &config.rollout_config())?;
    let episodes = flatten(&groups);
    let verdicts = verdicts(world.judge.as_deref(), &episodes)?;
    let score_cfg = ScoreConfig {
        weights: config.train.weights,
        conv: config.train.conv,
    };
    let rewards = score(&episodes, &verdicts, &score_cfg, &world.catalog)?;
    let advantages = advantages(&rewards, config.train.advantage_eps)?;
    let objectives = objectives(
        &episodes,
        &advantages,
        &world.catalog,
        config.train.clip_eps,
        None,
    )?;
    let bench = BenchConfig {
        recall_k: config.index.k,
        ..BenchConfig::default()
    };
    let report = report(
        &episodes,
        world.judge.as_ref().map(|_| verdicts.as_slice()),
        &bench,
    )?;
    Ok(RunOutput {
        episodes,
        rewards,
        advantages,
        objectives,
        report,
    })
}

/// Runs the pipeline and writes every artifact plus the resolved config
/// into `config.out_dir`.
pub fn run_to_disk(config: &RunConfig) -> Result<(RunOutput, Artifacts), PipelineError> {
    let output = run(config)?;
    let paths = Artifacts::in_dir(&config.out_dir);
    write_jsonl(&paths.episodes, &output.episodes)?;
    write_jsonl(&paths.rewards, &output.rewards)?;
    write_jsonl(&paths.advantages, &output.advantages)?;
    write_jsonl(&paths.objectives, &output.objectives)?;
    write_json(&paths.report, &output.report)?;
    write_text(&paths.config, &config.absolutized().to_toml())?;
    Ok((output, paths))
}
