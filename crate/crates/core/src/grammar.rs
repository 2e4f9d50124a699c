//! Tagged transcript grammar for both agent phases.
//!
//! Retrieval transcripts follow `(Search Information)+ FinalTools`; execution
//! transcripts follow `(Reasoning ToolCall Information)* Reasoning Answer`.
//! Parsing is total: malformed regions become [`Violation`]s rather than
//! errors, and [`RetrievalTrajectory::check_format`] /
//! [`ExecutionTrajectory::check_format`] turn the fatal ones into the binary
//! format verdict used by the rewards.
//!
//! Tags are matched literally and case-sensitively, never nest, and spans are
//! byte offsets into the raw text.

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::catalog::ToolRecord;
use crate::retrieval::{format_information, InfoRecord};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum GrammarError {
    #[error("trajectory has {0} violation(s); refusing to serialize")]
    HasViolations(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Retrieval,
    Execution,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Retrieval => "retrieval",
            Phase::Execution => "execution",
        })
    }
}

impl std::str::FromStr for Phase {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "retrieval" => Ok(Phase::Retrieval),
            "execution" => Ok(Phase::Execution),
            other => Err(format!(
                "unknown phase {other:?} (expected retrieval|execution)"
            )),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Tag {
    Search,
    Information,
    FinalTools,
    Reasoning,
    ToolCall,
    Answer,
}

impl Tag {
    pub const ALL: [Tag; 6] = [
        Tag::Search,
        Tag::Information,
        Tag::FinalTools,
        Tag::Reasoning,
        Tag::ToolCall,
        Tag::Answer,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Tag::Search => "search",
            Tag::Information => "information",
            Tag::FinalTools => "final_tools",
            Tag::Reasoning => "reasoning",
            Tag::ToolCall => "tool_call",
            Tag::Answer => "answer",
        }
    }

    pub fn open(self) -> &'static str {
        match self {
            Tag::Search => "<search>",
            Tag::Information => "<information>",
            Tag::FinalTools => "<final_tools>",
            Tag::Reasoning => "<reasoning>",
            Tag::ToolCall => "<tool_call>",
            Tag::Answer => "<answer>",
        }
    }

    pub fn close(self) -> &'static str {
        match self {
            Tag::Search => "</search>",
            Tag::Information => "</information>",
            Tag::FinalTools => "</final_tools>",
            Tag::Reasoning => "</reasoning>",
            Tag::ToolCall => "</tool_call>",
            Tag::Answer => "</answer>",
        }
    }

    fn allowed_in(self, phase: Phase) -> bool {
        match self {
            Tag::Information => true,
            Tag::Search | Tag::FinalTools => phase == Phase::Retrieval,
            Tag::Reasoning | Tag::ToolCall | Tag::Answer => phase == Phase::Execution,
        }
    }
}

/// Byte range `[start, end)` in a transcript.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    pub fn point(at: usize) -> Self {
        Self { start: at, end: at }
    }
}

/// Diagnostic rule identifiers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Rule {
    UnclosedTag,
    NestedTag,
    StrayClose,
    MismatchedClose,
    StrayText,
    ForeignTag,
    BadInformation,
    BadFinalTools,
    DuplicateId,
    BadToolCall,
    InformationWithoutSearch,
    SearchWithoutInformation,
    FinalWithoutSearch,
    MultipleFinal,
    EventAfterFinal,
    MissingFinal,
    UninformedSelection,
    ReasoningBeforeCall,
    ReasoningWithoutAction,
    CallWithoutInformation,
    InformationWithoutCall,
    AnswerWithoutReasoning,
    MultipleAnswer,
    EventAfterAnswer,
    MissingAnswer,
    UnknownTool,
}

impl Rule {
    pub fn id(self) -> &'static str {
        match self {
            Rule::UnclosedTag => "unclosed-tag",
            Rule::NestedTag => "nested-tag",
            Rule::StrayClose => "stray-close",
            Rule::MismatchedClose => "mismatched-close",
            Rule::StrayText => "stray-text",
            Rule::ForeignTag => "foreign-tag",
            Rule::BadInformation => "bad-information",
            Rule::BadFinalTools => "bad-final-tools",
            Rule::DuplicateId => "duplicate-id",
            Rule::BadToolCall => "bad-tool-call",
            Rule::InformationWithoutSearch => "information-without-search",
            Rule::SearchWithoutInformation => "search-without-information",
            Rule::FinalWithoutSearch => "final-without-search",
            Rule::MultipleFinal => "multiple-final",
            Rule::EventAfterFinal => "event-after-final",
            Rule::MissingFinal => "missing-final",
            Rule::UninformedSelection => "uninformed-selection",
            Rule::ReasoningBeforeCall => "reasoning-before-call",
            Rule::ReasoningWithoutAction => "reasoning-without-action",
            Rule::CallWithoutInformation => "call-without-information",
            Rule::InformationWithoutCall => "information-without-call",
            Rule::AnswerWithoutReasoning => "answer-without-reasoning",
            Rule::MultipleAnswer => "multiple-answer",
            Rule::EventAfterAnswer => "event-after-answer",
            Rule::MissingAnswer => "missing-answer",
            Rule::UnknownTool => "unknown-tool",
        }
    }

    /// Whether the rule zeroes the format verdict. Duplicate final ids and
    /// prose between tags are logged but tolerated.
    pub fn is_fatal(self) -> bool {
        !matches!(self, Rule::DuplicateId | Rule::StrayText)
    }
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub rule: Rule,
    pub span: Span,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub detail: String,
}

impl Violation {
    fn new(rule: Rule, span: Span, detail: impl Into<String>) -> Self {
        Self {
            rule,
            span,
            detail: detail.into(),
        }
    }
}

/// Binary format compliance plus the fatal violations behind a zero.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FormatVerdict {
    pub value: u8,
    pub violations: Vec<Violation>,
}

impl FormatVerdict {
    fn from_violations(violations: Vec<Violation>) -> Self {
        Self {
            value: u8::from(violations.is_empty()),
            violations,
        }
    }

    pub fn passed(&self) -> bool {
        self.value == 1
    }
}

// ----- events ---------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum InformationBlock {
    Records(Vec<InfoRecord>),
    Opaque(String),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum RetrievalEvent {
    Search { query: String },
    Information { block: InformationBlock },
    FinalTools { ids: Vec<u64> },
}

/// A normalized tool invocation. `category` and `api_name` may be omitted by
/// the model; they are resolved against the available tools at dispatch.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolCall {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
    pub tool_name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_name: Option<String>,
    #[serde(default)]
    pub tool_input: Map<String, Value>,
}

impl ToolCall {
    pub fn new(
        category: Option<&str>,
        tool_name: &str,
        api_name: Option<&str>,
        tool_input: Map<String, Value>,
    ) -> Self {
        Self {
            category: category.map(str::to_string),
            tool_name: tool_name.to_string(),
            api_name: api_name.map(str::to_string),
            tool_input,
        }
    }

    /// Whether the call names `record` (absent fields match anything).
    pub fn refers_to(&self, record: &ToolRecord) -> bool {
        record.matches(
            self.category.as_deref(),
            &self.tool_name,
            self.api_name.as_deref(),
        )
    }

    /// First record in `tools` the call names.
    pub fn resolve<'a>(&self, tools: &'a [ToolRecord]) -> Option<&'a ToolRecord> {
        tools.iter().find(|r| self.refers_to(r))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("tool call serializes")
    }

    /// Parses a tool-call body, accepting `tool`/`api`/`input` as aliases of
    /// `tool_name`/`api_name`/`tool_input`. Unrecognized top-level keys are
    /// folded into `tool_input`; a string-encoded `tool_input` object is
    /// decoded.
    pub fn parse(body: &str) -> Result<Self, String> {
        let value: Value =
            serde_json::from_str(body.trim()).map_err(|e| format!("invalid JSON: {e}"))?;
        let Value::Object(mut object) = value else {
            return Err("tool call body must be a JSON object".into());
        };
        let mut take_string =
            |canonical: &str, alias: Option<&str>| -> Result<Option<String>, String> {
                let primary = object.remove(canonical);
                let secondary = alias.and_then(|a| object.remove(a));
                match primary.or(secondary) {
                    None | Some(Value::Null) => Ok(None),
                    Some(Value::String(s)) => Ok(Some(s)),
                    Some(other) => Err(format!("{canonical} must be a string, got {other}")),
                }
            };
        let category = take_string("category", None)?;
        let tool_name = take_string("tool_name", Some("tool"))?.ok_or("missing tool_name")?;
        let api_name = take_string("api_name", Some("api"))?;
        let input = object
            .remove("tool_input")
            .or_else(|| object.remove("input"));
        let mut tool_input = match input {
            None | Some(Value::Null) => Map::new(),
            Some(Value::Object(map)) => map,
            Some(Value::String(s)) if s.trim().is_empty() => Map::new(),
            Some(Value::String(s)) => match serde_json::from_str::<Value>(&s) {
                Ok(Value::Object(map)) => map,
                _ => return Err("tool_input string is not a JSON object".into()),
            },
            Some(other) => return Err(format!("tool_input must be an object, got {other}")),
        };
        for (key, value) in object {
            tool_input.entry(key).or_insert(value);
        }
        Ok(Self {
            category,
            tool_name,
            api_name,
            tool_input,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ToolCallBody {
    Parsed(ToolCall),
    Opaque(String),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ExecutionEvent {
    Reasoning { text: String },
    ToolCall { body: ToolCallBody },
    Information { observation: String },
    Answer { text: String },
}

/// Shared behavior of the two event alphabets.
pub trait PhaseEvent: Clone + PartialEq {
    const PHASE: Phase;

    fn render(&self) -> String;
}

impl PhaseEvent for RetrievalEvent {
    const PHASE: Phase = Phase::Retrieval;

    fn render(&self) -> String {
        match self {
            RetrievalEvent::Search { query } => wrap(Tag::Search, query),
            RetrievalEvent::Information {
                block: InformationBlock::Records(records),
            } => format_information(records),
            RetrievalEvent::Information {
                block: InformationBlock::Opaque(raw),
            } => wrap(Tag::Information, raw),
            RetrievalEvent::FinalTools { ids } => wrap(
                Tag::FinalTools,
                &serde_json::to_string(ids).expect("ids serialize"),
            ),
        }
    }
}

impl PhaseEvent for ExecutionEvent {
    const PHASE: Phase = Phase::Execution;

    fn render(&self) -> String {
        match self {
            ExecutionEvent::Reasoning { text } => wrap(Tag::Reasoning, text),
            ExecutionEvent::ToolCall {
                body: ToolCallBody::Parsed(call),
            } => wrap(Tag::ToolCall, &call.to_json()),
            ExecutionEvent::ToolCall {
                body: ToolCallBody::Opaque(raw),
            } => wrap(Tag::ToolCall, raw),
            ExecutionEvent::Information { observation } => wrap(Tag::Information, observation),
            ExecutionEvent::Answer { text } => wrap(Tag::Answer, text),
        }
    }
}

fn wrap(tag: Tag, content: &str) -> String {
    format!("{}{content}{}", tag.open(), tag.close())
}

/// Canonical text for a sequence of events: tagged regions joined by `\n`.
pub fn render_events<E: PhaseEvent>(events: &[E]) -> String {
    events
        .iter()
        .map(PhaseEvent::render)
        .collect::<Vec<_>>()
        .join("\n")
}

/// A parsed transcript of one phase.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trajectory<E> {
    pub events: Vec<E>,
    pub spans: Vec<Span>,
    pub raw_text: String,
    pub complete: bool,
    pub violations: Vec<Violation>,
}

pub type RetrievalTrajectory = Trajectory<RetrievalEvent>;
pub type ExecutionTrajectory = Trajectory<ExecutionEvent>;

impl<E: PhaseEvent> Trajectory<E> {
    pub fn empty() -> Self {
        Self {
            events: Vec::new(),
            spans: Vec::new(),
            raw_text: String::new(),
            complete: false,
            violations: Vec::new(),
        }
    }

    /// Equality of everything a transcript means, ignoring layout.
    pub fn structurally_eq(&self, other: &Self) -> bool {
        self.events == other.events && self.complete == other.complete
    }

    /// Canonical text. Refuses trajectories carrying any violation.
    pub fn serialize(&self) -> Result<String, GrammarError> {
        if !self.violations.is_empty() {
            return Err(GrammarError::HasViolations(self.violations.len()));
        }
        Ok(render_events(&self.events))
    }

    fn fatal_violations(&self) -> Vec<Violation> {
        self.violations
            .iter()
            .filter(|v| v.rule.is_fatal())
            .cloned()
            .collect()
    }

    pub fn phase(&self) -> Phase {
        E::PHASE
    }
}

impl RetrievalTrajectory {
    /// Ids in the (first) FinalTools event, after dedup.
    pub fn final_tools(&self) -> Option<&[u64]> {
        self.events.iter().find_map(|e| match e {
            RetrievalEvent::FinalTools { ids } => Some(ids.as_slice()),
            _ => None,
        })
    }

    pub fn search_count(&self) -> usize {
        self.events
            .iter()
            .filter(|e| matches!(e, RetrievalEvent::Search { .. }))
            .count()
    }

    /// Format verdict: 1 iff no fatal violation was found.
    pub fn check_format(&self) -> FormatVerdict {
        FormatVerdict::from_violations(self.fatal_violations())
    }
}

impl ExecutionTrajectory {
    pub fn answer(&self) -> Option<&str> {
        self.events.iter().rev().find_map(|e| match e {
            ExecutionEvent::Answer { text } => Some(text.as_str()),
            _ => None,
        })
    }

    pub fn tool_calls(&self) -> impl Iterator<Item = &ToolCall> {
        self.events.iter().filter_map(|e| match e {
            ExecutionEvent::ToolCall {
                body: ToolCallBody::Parsed(call),
            } => Some(call),
            _ => None,
        })
    }

    /// Format verdict. With `available`, every parsed call must also name one
    /// of those tools.
    pub fn check_format(&self, available: Option<&[ToolRecord]>) -> FormatVerdict {
        let mut violations = self.fatal_violations();
        if let Some(tools) = available {
            for (event, span) in self.events.iter().zip(&self.spans) {
                if let ExecutionEvent::ToolCall {
                    body: ToolCallBody::Parsed(call),
                } = event
                {
                    if call.resolve(tools).is_none() {
                        violations.push(Violation::new(
                            Rule::UnknownTool,
                            *span,
                            format!("{} is not among the available tools", call.tool_name),
                        ));
                    }
                }
            }
            violations.sort_by_key(|v| (v.span.start, v.span.end));
        }
        FormatVerdict::from_violations(violations)
    }
}

// ----- lexing ---------------------------------------------------------------

#[derive(Clone, Copy, Debug)]
struct TagToken {
    tag: Tag,
    closing: bool,
    start: usize,
    end: usize,
}

fn lex(text: &str) -> Vec<TagToken> {
    let mut tokens = Vec::new();
    for (pos, _) in text.match_indices('<') {
        let rest = &text[pos..];
        for tag in Tag::ALL {
            let (literal, closing) = if rest.starts_with(tag.close()) {
                (tag.close(), true)
            } else if rest.starts_with(tag.open()) {
                (tag.open(), false)
            } else {
                continue;
            };
            tokens.push(TagToken {
                tag,
                closing,
                start: pos,
                end: pos + literal.len(),
            });
            break;
        }
    }
    tokens
}

struct Region<'a> {
    tag: Tag,
    content: &'a str,
    span: Span,
}

/// Splits text into closed, non-nested tagged regions, logging every
/// structural defect.
fn regions<'a>(text: &'a str, violations: &mut Vec<Violation>) -> Vec<Region<'a>> {
    let mut out = Vec::new();
    let mut open: Option<TagToken> = None;
    let mut outside_from = 0usize;
    let stray = |from: usize, to: usize, violations: &mut Vec<Violation>| {
        if text[from..to].chars().any(|c| !c.is_whitespace()) {
            violations.push(Violation::new(
                Rule::StrayText,
                Span::new(from, to),
                "text outside tags",
            ));
        }
    };
    for token in lex(text) {
        match open {
            None if token.closing => {
                stray(outside_from, token.start, violations);
                violations.push(Violation::new(
                    Rule::StrayClose,
                    Span::new(token.start, token.end),
                    format!("{} without opening tag", token.tag.close()),
                ));
                outside_from = token.end;
            }
            None => {
                stray(outside_from, token.start, violations);
                open = Some(token);
            }
            Some(current) if token.closing && token.tag == current.tag => {
                out.push(Region {
                    tag: current.tag,
                    content: &text[current.end..token.start],
                    span: Span::new(current.start, token.end),
                });
                open = None;
                outside_from = token.end;
            }
            Some(current) if token.closing => {
                violations.push(Violation::new(
                    Rule::MismatchedClose,
                    Span::new(current.start, token.end),
                    format!("{} closed by {}", current.tag.open(), token.tag.close()),
                ));
                open = None;
                outside_from = token.end;
            }
            Some(current) => {
                violations.push(Violation::new(
                    Rule::NestedTag,
                    Span::new(current.start, token.end),
                    format!("{} opened inside {}", token.tag.open(), current.tag.open()),
                ));
                open = Some(token);
            }
        }
    }
    match open {
        Some(current) => violations.push(Violation::new(
            Rule::UnclosedTag,
            Span::new(current.start, text.len()),
            format!("{} never closed", current.tag.open()),
        )),
        None => stray(outside_from, text.len(), violations),
    }
    out
}

// ----- retrieval parsing ----------------------------------------------------

fn parse_id_list(content: &str) -> Result<Vec<u64>, String> {
    let values: Vec<Value> =
        serde_json::from_str(content.trim()).map_err(|e| format!("invalid id list: {e}"))?;
    values
        .into_iter()
        .map(|v| match v {
            Value::Number(n) => n
                .as_u64()
                .ok_or_else(|| format!("{n} is not a non-negative integer")),
            Value::String(s) => s
                .trim()
                .parse::<u64>()
                .map_err(|_| format!("{s:?} is not an id")),
            other => Err(format!("{other} is not an id")),
        })
        .collect()
}

/// Parses a retrieval-phase transcript. Never fails.
pub fn parse_retrieval(text: &str) -> RetrievalTrajectory {
    let mut violations = Vec::new();
    let mut events = Vec::new();
    let mut spans = Vec::new();
    for region in regions(text, &mut violations) {
        if !region.tag.allowed_in(Phase::Retrieval) {
            violations.push(Violation::new(
                Rule::ForeignTag,
                region.span,
                format!("{} is not a retrieval tag", region.tag.open()),
            ));
            continue;
        }
        let event = match region.tag {
            Tag::Search => RetrievalEvent::Search {
                query: region.content.to_string(),
            },
            Tag::Information => {
                let block = match serde_json::from_str::<Vec<InfoRecord>>(region.content.trim()) {
                    Ok(records) => InformationBlock::Records(records),
                    Err(e) => {
                        violations.push(Violation::new(
                            Rule::BadInformation,
                            region.span,
                            e.to_string(),
                        ));
                        InformationBlock::Opaque(region.content.to_string())
                    }
                };
                RetrievalEvent::Information { block }
            }
            Tag::FinalTools => match parse_id_list(region.content) {
                Ok(raw) => {
                    let mut seen = HashSet::new();
                    let mut ids = Vec::with_capacity(raw.len());
                    for id in raw {
                        if seen.insert(id) {
                            ids.push(id);
                        } else {
                            violations.push(Violation::new(
                                Rule::DuplicateId,
                                region.span,
                                format!("api_id {id} listed more than once"),
                            ));
                        }
                    }
                    RetrievalEvent::FinalTools { ids }
                }
                Err(e) => {
                    violations.push(Violation::new(Rule::BadFinalTools, region.span, e));
                    continue;
                }
            },
            _ => unreachable!("filtered by allowed_in"),
        };
        events.push(event);
        spans.push(region.span);
    }
    check_retrieval_sequence(&events, &spans, text.len(), &mut violations);
    let finals = events
        .iter()
        .filter(|e| matches!(e, RetrievalEvent::FinalTools { .. }))
        .count();
    let complete = finals == 1 && matches!(events.last(), Some(RetrievalEvent::FinalTools { .. }));
    violations.sort_by_key(|v| (v.span.start, v.span.end));
    Trajectory {
        events,
        spans,
        raw_text: text.to_string(),
        complete,
        violations,
    }
}

fn check_retrieval_sequence(
    events: &[RetrievalEvent],
    spans: &[Span],
    len: usize,
    out: &mut Vec<Violation>,
) {
    #[derive(Clone, Copy, PartialEq)]
    enum State {
        Start,
        AfterSearch,
        AfterInformation,
        Done,
    }
    let mut state = State::Start;
    let mut informed: HashSet<u64> = HashSet::new();
    for (event, &span) in events.iter().zip(spans) {
        let mut flag = |rule: Rule, detail: &str| out.push(Violation::new(rule, span, detail));
        if state == State::Done {
            if matches!(event, RetrievalEvent::FinalTools { .. }) {
                flag(Rule::MultipleFinal, "final_tools emitted more than once");
            } else {
                flag(Rule::EventAfterFinal, "events after final_tools");
            }
            continue;
        }
        state = match event {
            RetrievalEvent::Search { .. } => {
                if state == State::AfterSearch {
                    flag(
                        Rule::SearchWithoutInformation,
                        "search not answered by information",
                    );
                }
                State::AfterSearch
            }
            RetrievalEvent::Information { block } => {
                if state != State::AfterSearch {
                    flag(
                        Rule::InformationWithoutSearch,
                        "information not preceded by search",
                    );
                }
                if let InformationBlock::Records(records) = block {
                    informed.extend(records.iter().map(|r| r.api_id));
                }
                State::AfterInformation
            }
            RetrievalEvent::FinalTools { ids } => {
                match state {
                    State::Start => flag(Rule::FinalWithoutSearch, "final_tools before any search"),
                    State::AfterSearch => flag(
                        Rule::SearchWithoutInformation,
                        "search not answered by information",
                    ),
                    _ => {}
                }
                for id in ids.iter().filter(|id| !informed.contains(id)) {
                    flag(
                        Rule::UninformedSelection,
                        &format!("api_id {id} never appeared in an information block"),
                    );
                }
                State::Done
            }
        };
    }
    if state != State::Done {
        out.push(Violation::new(
            Rule::MissingFinal,
            Span::point(len),
            "no final_tools",
        ));
    }
}

// ----- execution parsing ----------------------------------------------------

/// Parses an execution-phase transcript. Never fails.
pub fn parse_execution(text: &str) -> ExecutionTrajectory {
    let mut violations = Vec::new();
    let mut events = Vec::new();
    let mut spans = Vec::new();
    for region in regions(text, &mut violations) {
        if !region.tag.allowed_in(Phase::Execution) {
            violations.push(Violation::new(
                Rule::ForeignTag,
                region.span,
                format!("{} is not an execution tag", region.tag.open()),
            ));
            continue;
        }
        let content = region.content.to_string();
        let event = match region.tag {
            Tag::Reasoning => ExecutionEvent::Reasoning { text: content },
            Tag::Information => ExecutionEvent::Information {
                observation: content,
            },
            Tag::Answer => ExecutionEvent::Answer { text: content },
            Tag::ToolCall => {
                let body = match ToolCall::parse(&content) {
                    Ok(call) => ToolCallBody::Parsed(call),
                    Err(e) => {
                        violations.push(Violation::new(Rule::BadToolCall, region.span, e));
                        ToolCallBody::Opaque(content)
                    }
                };
                ExecutionEvent::ToolCall { body }
            }
            _ => unreachable!("filtered by allowed_in"),
        };
        events.push(event);
        spans.push(region.span);
    }
    check_execution_sequence(&events, &spans, text.len(), &mut violations);
    let answers = events
        .iter()
        .filter(|e| matches!(e, ExecutionEvent::Answer { .. }))
        .count();
    let complete = answers == 1 && matches!(events.last(), Some(ExecutionEvent::Answer { .. }));
    violations.sort_by_key(|v| (v.span.start, v.span.end));
    Trajectory {
        events,
        spans,
        raw_text: text.to_string(),
        complete,
        violations,
    }
}

fn check_execution_sequence(
    events: &[ExecutionEvent],
    spans: &[Span],
    len: usize,
    out: &mut Vec<Violation>,
) {
    #[derive(Clone, Copy, PartialEq)]
    enum State {
        /// Start of transcript or right after an observation.
        Fresh,
        AfterReasoning,
        AfterCall,
        Done,
    }
    let mut state = State::Fresh;
    for (event, &span) in events.iter().zip(spans) {
        let mut flag = |rule: Rule, detail: &str| out.push(Violation::new(rule, span, detail));
        if state == State::Done {
            if matches!(event, ExecutionEvent::Answer { .. }) {
                flag(Rule::MultipleAnswer, "answer emitted more than once");
            } else {
                flag(Rule::EventAfterAnswer, "events after answer");
            }
            continue;
        }
        if state == State::AfterCall && !matches!(event, ExecutionEvent::Information { .. }) {
            flag(
                Rule::CallWithoutInformation,
                "tool call not followed by information",
            );
            state = State::Fresh;
        }
        state = match event {
            ExecutionEvent::Reasoning { .. } => {
                if state == State::AfterReasoning {
                    flag(
                        Rule::ReasoningWithoutAction,
                        "reasoning not followed by a call or answer",
                    );
                }
                State::AfterReasoning
            }
            ExecutionEvent::ToolCall { .. } => {
                if state != State::AfterReasoning {
                    flag(
                        Rule::ReasoningBeforeCall,
                        "tool call not preceded by reasoning",
                    );
                }
                State::AfterCall
            }
            ExecutionEvent::Information { .. } => {
                if state != State::AfterCall {
                    flag(
                        Rule::InformationWithoutCall,
                        "information not preceded by a tool call",
                    );
                }
                State::Fresh
            }
            ExecutionEvent::Answer { .. } => {
                if state != State::AfterReasoning {
                    flag(
                        Rule::AnswerWithoutReasoning,
                        "answer without prior reasoning",
                    );
                }
                State::Done
            }
        };
    }
    if state != State::Done {
        out.push(Violation::new(
            Rule::MissingAnswer,
            Span::point(len),
            "no answer",
        ));
    }
}

/// Line-delimited trajectory record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub query_id: String,
    pub phase: Phase,
    pub raw_text: String,
    pub events: Value,
    pub complete: bool,
    pub violations: Vec<Violation>,
}

impl TrajectoryRecord {
    pub fn new<E: PhaseEvent + Serialize>(
        query_id: impl Into<String>,
        traj: &Trajectory<E>,
    ) -> Self {
        Self {
            query_id: query_id.into(),
            phase: E::PHASE,
            raw_text: traj.raw_text.clone(),
            events: serde_json::to_value(&traj.events).expect("events serialize"),
            complete: traj.complete,
            violations: traj.violations.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn info(ids: &[u64]) -> String {
        let records: Vec<InfoRecord> = ids
            .iter()
            .map(|&id| InfoRecord {
                api_id: id,
                category: "Data".into(),
                tool_name: format!("t{id}"),
                api_name: "a".into(),
                api_description: "d".into(),
            })
            .collect();
        format_information(&records)
    }

    fn rules(v: &[Violation]) -> Vec<Rule> {
        v.iter().map(|v| v.rule).collect()
    }

    #[test]
    fn final_tools_example_parses_in_order() {
        let text = format!(
            "<search>q</search>{}<final_tools>[2,0,1]</final_tools>",
            info(&[2, 0, 1])
        );
        let t = parse_retrieval(&text);
        assert!(t.complete);
        assert_eq!(t.final_tools(), Some(&[2, 0, 1][..]));
        assert!(t.violations.is_empty(), "{:?}", t.violations);
        assert!(t.check_format().passed());
    }

    #[test]
    fn empty_text_is_incomplete() {
        let t = parse_retrieval("");
        assert!(!t.complete);
        assert!(t.events.is_empty());
        assert_eq!(t.check_format().value, 0);
    }

    #[test]
    fn duplicate_final_ids_dedup_without_zeroing_format() {
        let text = format!(
            "<search>q</search>{}<final_tools>[2, 2, 0]</final_tools>",
            info(&[2, 0])
        );
        let t = parse_retrieval(&text);
        assert_eq!(t.final_tools(), Some(&[2, 0][..]));
        assert_eq!(rules(&t.violations), vec![Rule::DuplicateId]);
        assert!(t.check_format().passed());
        assert!(t.serialize().is_err());
    }

    #[test]
    fn uninformed_selection_fails_format() {
        let text = format!(
            "<search>q</search>{}<final_tools>[9]</final_tools>",
            info(&[1])
        );
        let verdict = parse_retrieval(&text).check_format();
        assert_eq!(verdict.value, 0);
        assert_eq!(rules(&verdict.violations), vec![Rule::UninformedSelection]);
    }

    #[test]
    fn tool_call_example() {
        let text = r#"<reasoning>r</reasoning><tool_call>{"tool_name": "genderize","tool_input": {"name": "john"}}</tool_call><information>{}</information><reasoning>ok</reasoning><answer>male</answer>"#;
        let t = parse_execution(text);
        let call = t.tool_calls().next().unwrap();
        assert_eq!(call.tool_name, "genderize");
        assert_eq!(call.tool_input.get("name"), Some(&Value::from("john")));
        assert!(call.category.is_none() && call.api_name.is_none());
        assert!(t.complete && t.violations.is_empty());
        assert_eq!(t.answer(), Some("male"));
    }

    #[test]
    fn case_study_aliases() {
        let call = ToolCall::parse(
            r#"{"tool": "Watchmode", "api": "New Titles", "input": {"types": "movie"}}"#,
        )
        .unwrap();
        assert_eq!(call.tool_name, "Watchmode");
        assert_eq!(call.api_name.as_deref(), Some("New Titles"));
        assert_eq!(call.tool_input.get("types"), Some(&Value::from("movie")));
    }

    #[test]
    fn free_keys_and_string_input() {
        let call = ToolCall::parse(
            r#"{"tool": "OTT details", "api": "Title Details", "imdbid": "tt0111161"}"#,
        )
        .unwrap();
        assert_eq!(
            call.tool_input.get("imdbid"),
            Some(&Value::from("tt0111161"))
        );
        let call = ToolCall::parse(r#"{"tool_name": "x", "tool_input": "{\"a\": 1}"}"#).unwrap();
        assert_eq!(call.tool_input.get("a"), Some(&Value::from(1)));
        assert!(ToolCall::parse(r#"{"api": "y"}"#).is_err());
        assert!(ToolCall::parse("[1]").is_err());
    }

    #[test]
    fn lone_answer_flags_missing_reasoning() {
        let t = parse_execution("<answer>x</answer>");
        assert_eq!(t.events.len(), 1);
        assert_eq!(rules(&t.violations), vec![Rule::AnswerWithoutReasoning]);
        assert!(t.complete);
        assert_eq!(t.check_format(None).value, 0);
    }

    #[test]
    fn call_without_reasoning_rejected() {
        let t = parse_execution(
            r#"<tool_call>{"tool_name":"a"}</tool_call><information>o</information><reasoning>r</reasoning><answer>x</answer>"#,
        );
        let verdict = t.check_format(None);
        assert_eq!(verdict.value, 0);
        assert_eq!(rules(&verdict.violations), vec![Rule::ReasoningBeforeCall]);
    }

    #[test]
    fn bad_tool_call_is_retained_as_opaque() {
        let t = parse_execution("<reasoning>r</reasoning><tool_call>{oops</tool_call><information>o</information><reasoning>r</reasoning><answer>x</answer>");
        assert!(matches!(
            t.events[1],
            ExecutionEvent::ToolCall { body: ToolCallBody::Opaque(ref s) } if s == "{oops"
        ));
        assert_eq!(rules(&t.violations), vec![Rule::BadToolCall]);
    }

    #[test]
    fn unknown_tool_only_with_subset() {
        let text = r#"<reasoning>r</reasoning><tool_call>{"tool_name":"ghost"}</tool_call><information>o</information><reasoning>r</reasoning><answer>x</answer>"#;
        let t = parse_execution(text);
        assert!(t.check_format(None).passed());
        let tools = vec![ToolRecord {
            api_id: 1,
            category: "c".into(),
            tool_name: "real".into(),
            api_name: "a".into(),
            description: "d".into(),
            input_schema: vec![],
        }];
        let verdict = t.check_format(Some(&tools));
        assert_eq!(rules(&verdict.violations), vec![Rule::UnknownTool]);
    }

    #[test]
    fn structural_defects() {
        assert_eq!(
            rules(&parse_retrieval("<search>a").violations),
            vec![Rule::UnclosedTag, Rule::MissingFinal]
        );
        assert_eq!(
            rules(&parse_retrieval("<search>a<search>b</search>").violations)[..1],
            [Rule::NestedTag]
        );
        assert!(rules(&parse_retrieval("</search>").violations).contains(&Rule::StrayClose));
        assert!(
            rules(&parse_retrieval("<search>a</final_tools>").violations)
                .contains(&Rule::MismatchedClose)
        );
        assert!(
            rules(&parse_retrieval("<answer>a</answer>").violations).contains(&Rule::ForeignTag)
        );
        // Case-sensitive: an uppercase tag is plain text.
        let t = parse_retrieval("<SEARCH>a</SEARCH>");
        assert!(t.events.is_empty());
        assert!(rules(&t.violations).contains(&Rule::StrayText));
    }

    #[test]
    fn stray_text_is_not_fatal() {
        let text = format!(
            "I will search.<search>q</search>{}<final_tools>[1]</final_tools>",
            info(&[1])
        );
        let t = parse_retrieval(&text);
        assert_eq!(rules(&t.violations), vec![Rule::StrayText]);
        assert!(t.check_format().passed());
    }

    #[test]
    fn spans_cover_regions() {
        let text = "<search>q</search>\n<search>r</search>";
        let t = parse_retrieval(text);
        assert_eq!(t.spans, vec![Span::new(0, 18), Span::new(19, text.len())]);
        assert_eq!(
            &text[t.spans[1].start..t.spans[1].end],
            "<search>r</search>"
        );
    }

    #[test]
    fn empty_events_serialize_to_empty_string() {
        let t = RetrievalTrajectory::empty();
        assert_eq!(t.serialize().unwrap(), "");
    }

    #[test]
    fn multiple_final_and_trailing_events() {
        let text = format!(
            "<search>q</search>{}<final_tools>[1]</final_tools><final_tools>[1]</final_tools>",
            info(&[1])
        );
        let t = parse_retrieval(&text);
        assert!(!t.complete);
        assert_eq!(rules(&t.violations), vec![Rule::MultipleFinal]);
    }
}
