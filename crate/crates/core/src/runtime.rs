//! Cascaded retrieval → execution loop driven by an external policy.
//!
//! The runtime owns everything around the policy: prompt assembly, stop-tag
//! truncation, routing `<search>` to the retrieval server and `<tool_call>` to
//! the environment, turn budgets, and the selective-rollout gate. Every
//! transcript it emits is re-parsed by [`crate::grammar`], so counters and
//! format verdicts always agree with the stored text.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::{Catalog, ParamSpec, ToolRecord};
use crate::curation::AnnotatedQuery;
use crate::environment::{Observation, ToolEnvironment, INVALID_CALL, NOT_AVAILABLE};
use crate::grammar::{
    parse_execution, parse_retrieval, ExecutionEvent, ExecutionTrajectory, Phase, RetrievalEvent,
    RetrievalTrajectory, Tag, ToolCall, ToolCallBody,
};
use crate::retrieval::{RetrievalError, ToolSearch, DEFAULT_K};

/// Maximum dispatched searches per retrieval phase.
pub const RETRIEVAL_BUDGET: usize = 4;
/// Maximum dispatched tool calls per execution phase.
pub const EXECUTION_BUDGET: usize = 6;
/// Rollouts per query.
pub const DEFAULT_GROUP_SIZE: usize = 5;
/// Per-turn generation cap in characters.
pub const DEFAULT_TURN_CHAR_CAP: usize = 8_192;

const RETRIEVAL_TEMPLATE: &str = include_str!("../templates/retrieval.txt");
const EXECUTION_TEMPLATE: &str = include_str!("../templates/execution.txt");

pub const RETRIEVAL_STOPS: [&str; 2] = ["</search>", "</final_tools>"];
pub const EXECUTION_STOPS: [&str; 2] = ["</tool_call>", "</answer>"];

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("policy transport failed")]
    Transport(#[source] Box<dyn std::error::Error + Send + Sync>),
    #[error("policy returned an invalid response: {0}")]
    Invalid(String),
}

#[derive(Debug, Error)]
pub enum RuntimeError {
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error("template variable {{{0}}} has no value")]
    MissingVariable(String),
    #[error("budget must be at least 1")]
    ZeroBudget,
    #[error("execution requires a non-empty tool subset")]
    EmptySubset,
    #[error("group size must be at least 2, got {0}")]
    GroupTooSmall(usize),
    #[error("{0}")]
    Hook(String),
    #[error("only {succeeded} of {requested} rollouts succeeded for query {query_id}")]
    GroupFailed {
        query_id: String,
        succeeded: usize,
        requested: usize,
        #[source]
        cause: Option<Box<RuntimeError>>,
    },
}

// ----- prompts --------------------------------------------------------------

#[derive(Serialize)]
struct ToolDoc<'a> {
    api_id: u64,
    category: &'a str,
    tool_name: &'a str,
    api_name: &'a str,
    api_description: &'a str,
    input_schema: &'a [ParamSpec],
}

/// JSON list of tool records as shown to the execution policy.
pub fn render_available_tools(tools: &[ToolRecord]) -> String {
    let docs: Vec<ToolDoc<'_>> = tools
        .iter()
        .map(|t| ToolDoc {
            api_id: t.api_id,
            category: &t.category,
            tool_name: &t.tool_name,
            api_name: &t.api_name,
            api_description: &t.description,
            input_schema: &t.input_schema,
        })
        .collect();
    serde_json::to_string(&docs).expect("tool docs serialize")
}

/// Substitutes `{name}` placeholders; every placeholder must have a value.
fn fill(template: &str, vars: &[(&str, &str)]) -> Result<String, RuntimeError> {
    let mut out = String::with_capacity(template.len() + 256);
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        let Some(close) = rest[open..].find('}') else {
            break;
        };
        let name = &rest[open + 1..open + close];
        if name.is_empty() || !name.chars().all(|c| c.is_ascii_lowercase() || c == '_') {
            out.push_str(&rest[..=open]);
            rest = &rest[open + 1..];
            continue;
        }
        let value = vars
            .iter()
            .find(|(k, _)| *k == name)
            .map(|(_, v)| *v)
            .ok_or_else(|| RuntimeError::MissingVariable(name.to_string()))?;
        out.push_str(&rest[..open]);
        out.push_str(value);
        rest = &rest[open + close + 1..];
    }
    out.push_str(rest);
    Ok(out)
}

/// Instantiates the bundled system prompt for `phase`.
pub fn assemble_prompt(
    phase: Phase,
    question: &str,
    tools: Option<&[ToolRecord]>,
) -> Result<String, RuntimeError> {
    match phase {
        Phase::Retrieval => fill(RETRIEVAL_TEMPLATE, &[("question", question)]),
        Phase::Execution => {
            let rendered = tools.map(render_available_tools);
            let mut vars = vec![("question", question)];
            if let Some(r) = rendered.as_deref() {
                vars.push(("available_tools", r));
            }
            fill(EXECUTION_TEMPLATE, &vars)
        }
    }
}

// ----- policy contract ------------------------------------------------------

#[derive(Clone, Copy, Debug)]
pub struct GenerateRequest<'a> {
    pub prompt: &'a str,
    pub history: &'a str,
    pub stop: &'a [&'a str],
    pub seed: u64,
}

/// Log-probability of one generated token; `text_offset` is a byte offset
/// into the generated text (or, once stored on an episode, into the
/// transcript).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenLogprob {
    pub text_offset: usize,
    pub logprob: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Generation {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_logprobs: Option<Vec<TokenLogprob>>,
}

impl Generation {
    pub fn text(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            token_logprobs: None,
        }
    }
}

/// The policy being rolled out. Parameters live outside this crate.
pub trait PolicyOracle: Send + Sync {
    fn generate(&self, request: &GenerateRequest<'_>) -> Result<Generation, PolicyError>;
}

impl<F> PolicyOracle for F
where
    F: Fn(&GenerateRequest<'_>) -> Result<Generation, PolicyError> + Send + Sync,
{
    fn generate(&self, request: &GenerateRequest<'_>) -> Result<Generation, PolicyError> {
        self(request)
    }
}

/// Cuts `text` after the earliest stop tag and at `cap` characters.
/// Returns the kept chunk and the stop tag that ended it, if any.
pub fn truncate_turn<'s>(text: &str, stops: &[&'s str], cap: usize) -> (String, Option<&'s str>) {
    let capped = match text.char_indices().nth(cap) {
        Some((byte, _)) => &text[..byte],
        None => text,
    };
    let earliest = stops
        .iter()
        .filter_map(|s| capped.find(s).map(|pos| (pos + s.len(), *s)))
        .min_by_key(|(end, _)| *end);
    match earliest {
        Some((end, stop)) => (capped[..end].to_string(), Some(stop)),
        None => (capped.to_string(), None),
    }
}

// ----- scripted policy ------------------------------------------------------

/// Verbatim turns for one rollout.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Script {
    #[serde(default)]
    pub retrieval: Vec<String>,
    #[serde(default)]
    pub execution: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
enum ScriptEntry {
    Variants { rollouts: Vec<Script> },
    Single(Script),
}

/// Fixture of scripts keyed by query id.
///
/// ```json
/// {"q1": {"retrieval": ["<search>weather</search>", "<final_tools>[3]</final_tools>"],
///         "execution": ["<reasoning>..</reasoning><tool_call>{..}</tool_call>", "<reasoning>..</reasoning><answer>..</answer>"]},
///  "q2": {"rollouts": [{"retrieval": [..]}, {"retrieval": [..]}]}}
/// ```
///
/// With `rollouts`, the variant used is `seed % rollouts.len()`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ScriptBook {
    entries: BTreeMap<String, ScriptEntry>,
}

impl ScriptBook {
    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn load(path: impl AsRef<Path>) -> std::io::Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_json(&text).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
    }

    pub fn insert(&mut self, query_id: impl Into<String>, script: Script) {
        self.entries
            .insert(query_id.into(), ScriptEntry::Single(script));
    }

    pub fn insert_variants(&mut self, query_id: impl Into<String>, rollouts: Vec<Script>) {
        self.entries
            .insert(query_id.into(), ScriptEntry::Variants { rollouts });
    }

    pub fn contains(&self, query_id: &str) -> bool {
        self.entries.contains_key(query_id)
    }

    pub fn policy(&self, query_id: &str) -> Option<ScriptedPolicy> {
        let rollouts = match self.entries.get(query_id)? {
            ScriptEntry::Single(s) => vec![s.clone()],
            ScriptEntry::Variants { rollouts } => rollouts.clone(),
        };
        Some(ScriptedPolicy::new(rollouts))
    }
}

/// Replays scripted turns. Which turn to emit is recovered from the history
/// alone (how many of the script's turns already appear in it, in order), so
/// generation is a pure function of `(prompt, history, seed)`.
#[derive(Clone, Debug)]
pub struct ScriptedPolicy {
    rollouts: Vec<Script>,
}

impl ScriptedPolicy {
    pub fn new(rollouts: Vec<Script>) -> Self {
        Self { rollouts }
    }

    pub fn single(script: Script) -> Self {
        Self::new(vec![script])
    }
}

impl PolicyOracle for ScriptedPolicy {
    fn generate(&self, request: &GenerateRequest<'_>) -> Result<Generation, PolicyError> {
        if self.rollouts.is_empty() {
            return Err(PolicyError::Invalid("script has no rollouts".into()));
        }
        let script = &self.rollouts[(request.seed % self.rollouts.len() as u64) as usize];
        let turns = if request.stop.contains(&Tag::FinalTools.close()) {
            &script.retrieval
        } else {
            &script.execution
        };
        let mut cursor = 0usize;
        for turn in turns {
            let (chunk, _) = truncate_turn(turn, request.stop, usize::MAX);
            if chunk.is_empty() {
                return Ok(Generation::default());
            }
            match request.history[cursor..].find(&chunk) {
                Some(pos) => cursor += pos + chunk.len(),
                None => return Ok(Generation::text(turn.clone())),
            }
        }
        Ok(Generation::default())
    }
}

// ----- transcripts ----------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Prompt,
    Agent,
    Environment,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub source: Source,
    pub start: usize,
    pub end: usize,
}

/// Text with per-byte provenance.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transcript {
    pub text: String,
    pub segments: Vec<Segment>,
}

impl Transcript {
    pub fn push(&mut self, source: Source, text: &str) {
        if text.is_empty() {
            return;
        }
        let start = self.text.len();
        self.text.push_str(text);
        match self.segments.last_mut() {
            Some(last) if last.source == source && last.end == start => last.end = self.text.len(),
            _ => self.segments.push(Segment {
                source,
                start,
                end: self.text.len(),
            }),
        }
    }

    pub fn from_segments(text: String, segments: Vec<Segment>) -> Self {
        Self { text, segments }
    }

    /// The same transcript preceded by a prompt segment.
    pub fn with_prompt(&self, prompt: &str) -> Transcript {
        let mut out = Transcript::default();
        out.push(Source::Prompt, prompt);
        let shift = out.text.len();
        out.text.push_str(&self.text);
        out.segments.extend(self.segments.iter().map(|s| Segment {
            source: s.source,
            start: s.start + shift,
            end: s.end + shift,
        }));
        out
    }

    pub fn source_at(&self, byte: usize) -> Option<Source> {
        self.segments
            .iter()
            .find(|s| s.start <= byte && byte < s.end)
            .map(|s| s.source)
    }
}

// ----- configuration --------------------------------------------------------

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateMode {
    /// Gold ⊆ finalized subset.
    #[default]
    Subset,
    /// Gold ⊆ cumulative retrieved pool.
    Retrieved,
}

impl std::str::FromStr for GateMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "subset" => Ok(GateMode::Subset),
            "retrieved" => Ok(GateMode::Retrieved),
            other => Err(format!(
                "unknown gate mode {other:?} (expected subset|retrieved)"
            )),
        }
    }
}

/// Selective-rollout predicate. An empty gold set passes vacuously.
pub fn passes_gate(
    gold: &[u64],
    selected: &[u64],
    retrieved: &BTreeSet<u64>,
    mode: GateMode,
) -> bool {
    match mode {
        GateMode::Subset => gold.iter().all(|g| selected.contains(g)),
        GateMode::Retrieved => gold.iter().all(|g| retrieved.contains(g)),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RolloutConfig {
    pub k: usize,
    pub retrieval_budget: usize,
    pub execution_budget: usize,
    pub group_size: usize,
    pub base_seed: u64,
    pub gate: GateMode,
    pub turn_char_cap: usize,
    /// Show the retrieval transcript to the execution policy as history.
    pub prepend_retrieval: bool,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        Self {
            k: DEFAULT_K,
            retrieval_budget: RETRIEVAL_BUDGET,
            execution_budget: EXECUTION_BUDGET,
            group_size: DEFAULT_GROUP_SIZE,
            base_seed: 0,
            gate: GateMode::Subset,
            turn_char_cap: DEFAULT_TURN_CHAR_CAP,
            prepend_retrieval: false,
        }
    }
}

impl RolloutConfig {
    /// Policy turns allowed in one execution phase. Undispatched calls do not
    /// consume the call budget, so turns need their own bound.
    pub fn execution_turn_cap(&self) -> usize {
        2 * self.execution_budget + 2
    }
}

// ----- phases ---------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalOutcome {
    pub trajectory: RetrievalTrajectory,
    pub transcript: Transcript,
    pub selected: Vec<u64>,
    pub cumulative: BTreeSet<u64>,
    pub search_count: usize,
    pub logprobs: Option<Vec<TokenLogprob>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExecutionOutcome {
    pub trajectory: ExecutionTrajectory,
    pub transcript: Transcript,
    pub answer: Option<String>,
    pub tool_call_count: usize,
    pub logprobs: Option<Vec<TokenLogprob>>,
}

fn absorb_logprobs(
    acc: &mut Option<Vec<TokenLogprob>>,
    generated: Option<Vec<TokenLogprob>>,
    kept: usize,
    shift: usize,
) {
    if let Some(tokens) = generated {
        acc.get_or_insert_with(Vec::new).extend(
            tokens
                .into_iter()
                .filter(|t| t.text_offset < kept)
                .map(|t| TokenLogprob {
                    text_offset: t.text_offset + shift,
                    logprob: t.logprob,
                }),
        );
    }
}

/// Proactive retrieval: alternate policy turns with server information
/// blocks until the policy finalizes a subset or the search budget runs out.
pub fn run_retrieval_phase(
    policy: &dyn PolicyOracle,
    question: &str,
    search: &dyn ToolSearch,
    config: &RolloutConfig,
    seed: u64,
) -> Result<RetrievalOutcome, RuntimeError> {
    if config.retrieval_budget == 0 {
        return Err(RuntimeError::ZeroBudget);
    }
    let prompt = assemble_prompt(Phase::Retrieval, question, None)?;
    let mut transcript = Transcript::default();
    let mut cumulative = BTreeSet::new();
    let mut searches = 0usize;
    let mut logprobs = None;
    loop {
        let generation = policy.generate(&GenerateRequest {
            prompt: &prompt,
            history: &transcript.text,
            stop: &RETRIEVAL_STOPS,
            seed,
        })?;
        let (chunk, stop) = truncate_turn(&generation.text, &RETRIEVAL_STOPS, config.turn_char_cap);
        let shift = transcript.text.len();
        match stop {
            Some("</search>") => {
                if searches == config.retrieval_budget {
                    log::debug!(
                        "retrieval budget of {} searches exhausted",
                        config.retrieval_budget
                    );
                    break;
                }
                let query =
                    parse_retrieval(&chunk)
                        .events
                        .into_iter()
                        .rev()
                        .find_map(|e| match e {
                            RetrievalEvent::Search { query } => Some(query),
                            _ => None,
                        });
                absorb_logprobs(&mut logprobs, generation.token_logprobs, chunk.len(), shift);
                transcript.push(Source::Agent, &chunk);
                let Some(query) = query else { break };
                let outcome = search.search(query.trim(), config.k)?;
                cumulative.extend(outcome.ids.iter().copied());
                transcript.push(Source::Environment, &format!("\n{}\n", outcome.information));
                searches += 1;
            }
            _ => {
                absorb_logprobs(&mut logprobs, generation.token_logprobs, chunk.len(), shift);
                transcript.push(Source::Agent, &chunk);
                break;
            }
        }
    }
    let trajectory = parse_retrieval(&transcript.text);
    let selected = match trajectory.final_tools() {
        Some(ids) if trajectory.complete => ids
            .iter()
            .copied()
            .filter(|id| cumulative.contains(id))
            .collect(),
        _ => Vec::new(),
    };
    Ok(RetrievalOutcome {
        search_count: trajectory.search_count(),
        trajectory,
        transcript,
        selected,
        cumulative,
        logprobs,
    })
}

/// Grounded execution over the selected tools.
pub fn run_execution_phase(
    policy: &dyn PolicyOracle,
    question: &str,
    selected: &[ToolRecord],
    env: &dyn ToolEnvironment,
    config: &RolloutConfig,
    seed: u64,
    history_prefix: &str,
) -> Result<ExecutionOutcome, RuntimeError> {
    if config.execution_budget == 0 {
        return Err(RuntimeError::ZeroBudget);
    }
    if selected.is_empty() {
        return Err(RuntimeError::EmptySubset);
    }
    let prompt = assemble_prompt(Phase::Execution, question, Some(selected))?;
    let mut transcript = Transcript::default();
    let mut calls = 0usize;
    let mut logprobs = None;
    let mut history = String::from(history_prefix);
    for _ in 0..config.execution_turn_cap() {
        history.truncate(history_prefix.len());
        history.push_str(&transcript.text);
        let generation = policy.generate(&GenerateRequest {
            prompt: &prompt,
            history: &history,
            stop: &EXECUTION_STOPS,
            seed,
        })?;
        let (chunk, stop) = truncate_turn(&generation.text, &EXECUTION_STOPS, config.turn_char_cap);
        let shift = transcript.text.len();
        if stop != Some("</tool_call>") {
            absorb_logprobs(&mut logprobs, generation.token_logprobs, chunk.len(), shift);
            transcript.push(Source::Agent, &chunk);
            break;
        }
        if calls == config.execution_budget {
            log::debug!(
                "execution budget of {} calls exhausted",
                config.execution_budget
            );
            break;
        }
        let body = parse_execution(&chunk)
            .events
            .into_iter()
            .rev()
            .find_map(|e| match e {
                ExecutionEvent::ToolCall { body } => Some(body),
                _ => None,
            });
        let observation = match body {
            Some(ToolCallBody::Parsed(call)) => match call.resolve(selected) {
                Some(record) => {
                    calls += 1;
                    env.invoke(&ToolCall {
                        category: Some(record.category.clone()),
                        tool_name: record.tool_name.clone(),
                        api_name: Some(record.api_name.clone()),
                        tool_input: call.tool_input,
                    })
                }
                None => Observation::failure(NOT_AVAILABLE),
            },
            _ => Observation::failure(INVALID_CALL),
        };
        absorb_logprobs(&mut logprobs, generation.token_logprobs, chunk.len(), shift);
        transcript.push(Source::Agent, &chunk);
        transcript.push(
            Source::Environment,
            &format!(
                "\n{}{}{}\n",
                Tag::Information.open(),
                observation.to_json(),
                Tag::Information.close()
            ),
        );
    }
    let trajectory = parse_execution(&transcript.text);
    let answer = if trajectory.complete {
        trajectory.answer().map(str::to_string)
    } else {
        None
    };
    Ok(ExecutionOutcome {
        trajectory,
        transcript,
        answer,
        tool_call_count: calls,
        logprobs,
    })
}

// ----- episodes & groups ----------------------------------------------------

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    pub search_count: usize,
    pub tool_call_count: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Budgets {
    pub retrieval_max: usize,
    pub execution_max: usize,
}

/// One query's full rollout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub query_id: String,
    pub question: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<String>,
    pub gold: Vec<u64>,
    pub rollout_index: usize,
    pub seed: u64,
    pub retrieval: RetrievalTrajectory,
    pub retrieval_segments: Vec<Segment>,
    pub selected: Vec<u64>,
    /// Tools added to the execution context beyond the selection.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub injected: Vec<u64>,
    pub cumulative_retrieved: BTreeSet<u64>,
    pub gate_passed: bool,
    pub execution: Option<ExecutionTrajectory>,
    #[serde(default)]
    pub execution_segments: Vec<Segment>,
    pub final_answer: Option<String>,
    pub counters: Counters,
    pub budgets: Budgets,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub retrieval_logprobs: Option<Vec<TokenLogprob>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub execution_logprobs: Option<Vec<TokenLogprob>>,
}

impl Episode {
    pub fn retrieval_transcript(&self) -> Transcript {
        Transcript::from_segments(
            self.retrieval.raw_text.clone(),
            self.retrieval_segments.clone(),
        )
    }

    pub fn execution_transcript(&self) -> Option<Transcript> {
        self.execution
            .as_ref()
            .map(|e| Transcript::from_segments(e.raw_text.clone(), self.execution_segments.clone()))
    }

    pub fn has_execution(&self) -> bool {
        self.execution.is_some()
    }

    /// Records shown to the execution policy, in prompt order.
    pub fn execution_tools(&self, catalog: &Catalog) -> Vec<ToolRecord> {
        self.selected
            .iter()
            .chain(&self.injected)
            .filter_map(|id| catalog.get(*id).cloned())
            .collect()
    }

    /// Prompt followed by the retrieval transcript, with provenance.
    pub fn retrieval_sequence(&self) -> Result<Transcript, RuntimeError> {
        let prompt = assemble_prompt(Phase::Retrieval, &self.question, None)?;
        Ok(self.retrieval_transcript().with_prompt(&prompt))
    }

    /// Prompt followed by the execution transcript, if execution ran.
    pub fn execution_sequence(
        &self,
        catalog: &Catalog,
    ) -> Result<Option<Transcript>, RuntimeError> {
        let Some(transcript) = self.execution_transcript() else {
            return Ok(None);
        };
        let tools = self.execution_tools(catalog);
        let prompt = assemble_prompt(Phase::Execution, &self.question, Some(&tools))?;
        Ok(Some(transcript.with_prompt(&prompt)))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutFailure {
    pub rollout_index: usize,
    pub message: String,
}

/// Sibling rollouts of one query: the unit of advantage normalization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutGroup {
    pub query_id: String,
    pub question: String,
    pub gold: Vec<u64>,
    pub episodes: Vec<Episode>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub failures: Vec<RolloutFailure>,
}

/// Extra tool ids to place in the execution context after the selection,
/// computed from the query and the selected ids.
pub type ContextHook<'a> =
    &'a (dyn Fn(&AnnotatedQuery, &[u64]) -> Result<Vec<u64>, RuntimeError> + Sync);

/// Runs one retrieval rollout and, if it passes the gate, its execution.
pub fn run_episode(
    policy: &dyn PolicyOracle,
    query: &AnnotatedQuery,
    catalog: &Catalog,
    search: &dyn ToolSearch,
    env: &dyn ToolEnvironment,
    config: &RolloutConfig,
    rollout_index: usize,
) -> Result<Episode, RuntimeError> {
    run_episode_with(
        policy,
        query,
        catalog,
        search,
        env,
        config,
        rollout_index,
        &|_, _| Ok(Vec::new()),
    )
}

/// [`run_episode`] with additional tools injected into the execution
/// context. The gate still looks at the agent's own selection.
#[allow(clippy::too_many_arguments)]
pub fn run_episode_with(
    policy: &dyn PolicyOracle,
    query: &AnnotatedQuery,
    catalog: &Catalog,
    search: &dyn ToolSearch,
    env: &dyn ToolEnvironment,
    config: &RolloutConfig,
    rollout_index: usize,
    inject: ContextHook<'_>,
) -> Result<Episode, RuntimeError> {
    let seed = config.base_seed.wrapping_add(rollout_index as u64);
    let retrieval = run_retrieval_phase(policy, &query.question, search, config, seed)?;
    let gate_passed = passes_gate(
        &query.gold,
        &retrieval.selected,
        &retrieval.cumulative,
        config.gate,
    );
    let injected = if gate_passed {
        inject(query, &retrieval.selected)?
    } else {
        Vec::new()
    };
    let subset: Vec<ToolRecord> = retrieval
        .selected
        .iter()
        .chain(&injected)
        .filter_map(|id| catalog.get(*id).cloned())
        .collect();
    let execution = if gate_passed && !subset.is_empty() {
        let prefix = if config.prepend_retrieval {
            format!("{}\n", retrieval.transcript.text)
        } else {
            String::new()
        };
        Some(run_execution_phase(
            policy,
            &query.question,
            &subset,
            env,
            config,
            seed,
            &prefix,
        )?)
    } else {
        None
    };
    let counters = Counters {
        search_count: retrieval.search_count,
        tool_call_count: execution.as_ref().map_or(0, |e| e.tool_call_count),
    };
    let (execution, execution_segments, final_answer, execution_logprobs) = match execution {
        Some(e) => (
            Some(e.trajectory),
            e.transcript.segments,
            e.answer,
            e.logprobs,
        ),
        None => (None, Vec::new(), None, None),
    };
    Ok(Episode {
        query_id: query.query_id.clone(),
        question: query.question.clone(),
        split: query.split.clone(),
        gold: query.gold.clone(),
        rollout_index,
        seed,
        retrieval: retrieval.trajectory,
        retrieval_segments: retrieval.transcript.segments,
        selected: retrieval.selected,
        injected,
        cumulative_retrieved: retrieval.cumulative,
        gate_passed,
        execution,
        execution_segments,
        final_answer,
        counters,
        budgets: Budgets {
            retrieval_max: config.retrieval_budget,
            execution_max: config.execution_budget,
        },
        retrieval_logprobs: retrieval.logprobs,
        execution_logprobs,
    })
}

fn error_chain(e: &dyn std::error::Error) -> String {
    let mut out = e.to_string();
    let mut next = e.source();
    while let Some(s) = next {
        out.push_str(": ");
        out.push_str(&s.to_string());
        next = s.source();
    }
    out
}

/// `G` independent rollouts of one query, run concurrently. The group
/// survives individual failures as long as two episodes remain.
pub fn run_group(
    policy: &dyn PolicyOracle,
    query: &AnnotatedQuery,
    catalog: &Catalog,
    search: &dyn ToolSearch,
    env: &dyn ToolEnvironment,
    config: &RolloutConfig,
) -> Result<RolloutGroup, RuntimeError> {
    if config.group_size < 2 {
        return Err(RuntimeError::GroupTooSmall(config.group_size));
    }
    let results: Vec<Result<Episode, RuntimeError>> = (0..config.group_size)
        .into_par_iter()
        .map(|i| run_episode(policy, query, catalog, search, env, config, i))
        .collect();
    let mut episodes = Vec::new();
    let mut failures = Vec::new();
    let mut cause = None;
    for (rollout_index, result) in results.into_iter().enumerate() {
        match result {
            Ok(ep) => episodes.push(ep),
            Err(e) => {
                log::warn!(
                    "rollout {rollout_index} of {} failed: {}",
                    query.query_id,
                    error_chain(&e)
                );
                failures.push(RolloutFailure {
                    rollout_index,
                    message: error_chain(&e),
                });
                cause.get_or_insert(Box::new(e));
            }
        }
    }
    if episodes.len() < 2 {
        return Err(RuntimeError::GroupFailed {
            query_id: query.query_id.clone(),
            succeeded: episodes.len(),
            requested: config.group_size,
            cause,
        });
    }
    Ok(RolloutGroup {
        query_id: query.query_id.clone(),
        question: query.question.clone(),
        gold: query.gold.clone(),
        episodes,
        failures,
    })
}
