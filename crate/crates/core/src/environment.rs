//! Hybrid tool environment: exact-match replay of recorded responses first,
//! then a seeded simulator for everything else.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use thiserror::Error;

use crate::catalog::{Catalog, ToolRecord};
use crate::grammar::ToolCall;
use crate::hash::{fnv1a, mix};

pub const MISSING_PARAMS: &str = "Missing input parameters.";
pub const AUTH_ERROR: &str = "Authentication error: invalid or missing API key.";
pub const TIMEOUT: &str = "Service timeout: the request took too long to complete.";
pub const TOOL_NOT_FOUND: &str = "tool not found";
pub const NOT_AVAILABLE: &str = "tool not in available tools";
pub const INVALID_CALL: &str = "invalid tool call format";

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("failed to read replay store")]
    Io(#[from] std::io::Error),
    #[error("replay store line {line}")]
    Parse {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("invalid simulator profile: {0}")]
    Profile(String),
    #[error("{}", path.display())]
    File {
        path: std::path::PathBuf,
        #[source]
        source: Box<EnvError>,
    },
}

/// Two-field feedback shape rendered inside `<information>` tags.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Observation {
    pub error: String,
    pub response: String,
}

impl Observation {
    pub fn success(response: impl Into<String>) -> Self {
        Self {
            error: String::new(),
            response: response.into(),
        }
    }

    pub fn failure(error: impl Into<String>) -> Self {
        Self {
            error: error.into(),
            response: String::new(),
        }
    }

    pub fn is_error(&self) -> bool {
        !self.error.is_empty()
    }

    /// Compact JSON, e.g. `{"error":"Missing input parameters.","response":""}`.
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("observation serializes")
    }
}

/// Key-sorted, whitespace-free JSON text of a value.
pub fn canonical_json(value: &Value) -> String {
    let mut out = String::new();
    write_canonical(value, &mut out);
    out
}

fn write_canonical(value: &Value, out: &mut String) {
    match value {
        Value::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            out.push('{');
            for (i, key) in keys.into_iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                out.push_str(&serde_json::to_string(key).expect("key serializes"));
                out.push(':');
                write_canonical(&map[key], out);
            }
            out.push('}');
        }
        Value::Array(items) => {
            out.push('[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write_canonical(item, out);
            }
            out.push(']');
        }
        scalar => out.push_str(&serde_json::to_string(scalar).expect("scalar serializes")),
    }
}

pub fn canonical_input(input: &Map<String, Value>) -> String {
    canonical_json(&Value::Object(input.clone()))
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ReplayKey {
    pub category: String,
    pub tool_name: String,
    pub api_name: String,
    pub canonical_input: String,
}

impl ReplayKey {
    pub fn new(record: &ToolRecord, input: &Map<String, Value>) -> Self {
        Self {
            category: record.category.clone(),
            tool_name: record.tool_name.clone(),
            api_name: record.api_name.clone(),
            canonical_input: canonical_input(input),
        }
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum StoredObservation {
    Full(Observation),
    Response(String),
}

#[derive(Deserialize)]
struct ReplayLine {
    category: String,
    tool_name: String,
    api_name: String,
    canonical_input: String,
    observation: StoredObservation,
}

#[derive(Serialize)]
struct ReplayLineOut<'a> {
    category: &'a str,
    tool_name: &'a str,
    api_name: &'a str,
    canonical_input: &'a str,
    observation: &'a Observation,
}

/// Recorded real-world responses keyed by tool identity and canonical input.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ReplayStore {
    entries: BTreeMap<ReplayKey, Observation>,
}

/// Summary reported by `env stats`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ReplayStats {
    pub entries: usize,
    pub error_entries: usize,
    pub apis: usize,
    pub per_category: BTreeMap<String, usize>,
}

impl ReplayStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, key: &ReplayKey) -> Option<&Observation> {
        self.entries.get(key)
    }

    /// Stores `observation` under `key`; the last write wins. Returns the
    /// replaced observation, if any. Replacing with a different observation
    /// is logged.
    pub fn record(&mut self, key: ReplayKey, observation: Observation) -> Option<Observation> {
        let previous = self.entries.insert(key.clone(), observation);
        if previous
            .as_ref()
            .is_some_and(|p| Some(p) != self.entries.get(&key))
        {
            log::warn!(
                "replay entry for {}/{}/{} {} overwritten",
                key.category,
                key.tool_name,
                key.api_name,
                key.canonical_input
            );
        }
        previous
    }

    /// Records a parsed call. Returns `None` without recording when the call
    /// does not resolve in `catalog`.
    pub fn record_call(
        &mut self,
        call: &ToolCall,
        observation: Observation,
        catalog: &Catalog,
    ) -> Option<ReplayKey> {
        let record = catalog.find(
            call.category.as_deref(),
            &call.tool_name,
            call.api_name.as_deref(),
        )?;
        let key = ReplayKey::new(record, &call.tool_input);
        self.record(key.clone(), observation);
        Some(key)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ReplayKey, &Observation)> {
        self.entries.iter()
    }

    pub fn from_reader(reader: impl BufRead) -> Result<Self, EnvError> {
        let mut store = Self::new();
        for (idx, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: ReplayLine =
                serde_json::from_str(&line).map_err(|source| EnvError::Parse {
                    line: idx + 1,
                    source,
                })?;
            // Re-canonicalize so hand-written fixtures match however they were formatted.
            let canonical = match serde_json::from_str::<Value>(&parsed.canonical_input) {
                Ok(value) => canonical_json(&value),
                Err(_) => parsed.canonical_input,
            };
            let observation = match parsed.observation {
                StoredObservation::Full(o) => o,
                StoredObservation::Response(r) => Observation::success(r),
            };
            store.record(
                ReplayKey {
                    category: parsed.category,
                    tool_name: parsed.tool_name,
                    api_name: parsed.api_name,
                    canonical_input: canonical,
                },
                observation,
            );
        }
        Ok(store)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, EnvError> {
        let path = path.as_ref();
        File::open(path)
            .map_err(EnvError::from)
            .and_then(|file| Self::from_reader(BufReader::new(file)))
            .map_err(|source| EnvError::File {
                path: path.to_path_buf(),
                source: Box::new(source),
            })
    }

    /// Writes entries in key order, one JSON object per line.
    pub fn write_to(&self, mut writer: impl Write) -> std::io::Result<()> {
        for (key, observation) in &self.entries {
            let line = ReplayLineOut {
                category: &key.category,
                tool_name: &key.tool_name,
                api_name: &key.api_name,
                canonical_input: &key.canonical_input,
                observation,
            };
            serde_json::to_writer(&mut writer, &line)?;
            writer.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn stats(&self) -> ReplayStats {
        let mut per_category = BTreeMap::new();
        let mut apis = std::collections::BTreeSet::new();
        for key in self.entries.keys() {
            *per_category.entry(key.category.clone()).or_insert(0) += 1;
            apis.insert((&key.category, &key.tool_name, &key.api_name));
        }
        ReplayStats {
            entries: self.entries.len(),
            error_entries: self.entries.values().filter(|o| o.is_error()).count(),
            apis: apis.len(),
            per_category,
        }
    }
}

/// Relative weights of injected failure modes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorMix {
    pub missing_params: f64,
    pub auth_error: f64,
    pub timeout: f64,
}

impl Default for ErrorMix {
    fn default() -> Self {
        Self {
            missing_params: 1.0 / 3.0,
            auth_error: 1.0 / 3.0,
            timeout: 1.0 / 3.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorKind {
    MissingParams,
    AuthError,
    Timeout,
}

impl ErrorKind {
    pub fn message(self) -> &'static str {
        match self {
            ErrorKind::MissingParams => MISSING_PARAMS,
            ErrorKind::AuthError => AUTH_ERROR,
            ErrorKind::Timeout => TIMEOUT,
        }
    }
}

/// Seeded behavior of the fallback simulator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimProfile {
    pub seed: u64,
    pub error_rate: f64,
    pub error_mix: ErrorMix,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub latency_ms: Option<u64>,
}

impl Default for SimProfile {
    fn default() -> Self {
        Self {
            seed: 0,
            error_rate: 0.0,
            error_mix: ErrorMix::default(),
            latency_ms: None,
        }
    }
}

impl SimProfile {
    pub fn new(seed: u64, error_rate: f64) -> Self {
        Self {
            seed,
            error_rate,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        if !(0.0..=1.0).contains(&self.error_rate) {
            return Err(EnvError::Profile(format!(
                "error_rate {} outside [0, 1]",
                self.error_rate
            )));
        }
        let m = self.error_mix;
        let weights = [m.missing_params, m.auth_error, m.timeout];
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(EnvError::Profile(
                "error_mix weights must be non-negative".into(),
            ));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(EnvError::Profile(format!(
                "error_mix weights sum to {total}, expected 1"
            )));
        }
        Ok(())
    }

    fn pick_error(&self, u: f64) -> ErrorKind {
        let m = self.error_mix;
        if u < m.missing_params {
            ErrorKind::MissingParams
        } else if u < m.missing_params + m.auth_error {
            ErrorKind::AuthError
        } else {
            ErrorKind::Timeout
        }
    }
}

/// Answers calls that had no replay hit and passed parameter validation.
pub trait Simulator: Send + Sync {
    fn simulate(&self, record: &ToolRecord, call: &ToolCall, canonical_input: &str) -> Observation;
}

/// Deterministic stand-in for a learned API simulator. Randomness is derived
/// per call from `seed` and the call's content, so concurrent callers need no
/// shared RNG.
#[derive(Clone, Debug)]
pub struct TemplatedSimulator {
    profile: SimProfile,
}

impl TemplatedSimulator {
    pub fn new(profile: SimProfile) -> Result<Self, EnvError> {
        profile.validate()?;
        Ok(Self { profile })
    }

    pub fn profile(&self) -> &SimProfile {
        &self.profile
    }
}

impl Simulator for TemplatedSimulator {
    fn simulate(
        &self,
        record: &ToolRecord,
        _call: &ToolCall,
        canonical_input: &str,
    ) -> Observation {
        if let Some(ms) = self.profile.latency_ms {
            std::thread::sleep(Duration::from_millis(ms));
        }
        let fingerprint = format!(
            "{}\u{1f}{}\u{1f}{}\u{1f}{}",
            record.category, record.tool_name, record.api_name, canonical_input
        );
        let mut rng =
            ChaCha8Rng::seed_from_u64(mix(self.profile.seed, fnv1a(fingerprint.as_bytes())));
        if rng.random::<f64>() < self.profile.error_rate {
            return Observation::failure(self.profile.pick_error(rng.random::<f64>()).message());
        }
        let input: Value = serde_json::from_str(canonical_input).unwrap_or(Value::Null);
        let payload = json!({
            "api": record.api_name,
            "tool": record.tool_name,
            "input": input,
            "result": {
                "id": rng.random_range(1..100_000u32),
                "token": format!("{:016x}", rng.next_u64()),
                "count": rng.random_range(0..50u32),
            },
        });
        Observation::success(canonical_json(&payload))
    }
}

/// Environment handle used by the execution loop.
pub trait ToolEnvironment: Send + Sync {
    fn invoke(&self, call: &ToolCall) -> Observation;
}

/// Replay first, simulator second.
pub struct HybridEnvironment<S = TemplatedSimulator> {
    pub store: ReplayStore,
    pub catalog: Arc<Catalog>,
    pub simulator: S,
}

impl<S: Simulator> HybridEnvironment<S> {
    pub fn new(store: ReplayStore, catalog: Arc<Catalog>, simulator: S) -> Self {
        Self {
            store,
            catalog,
            simulator,
        }
    }
}

impl<S: Simulator> ToolEnvironment for HybridEnvironment<S> {
    fn invoke(&self, call: &ToolCall) -> Observation {
        dispatch(call, &self.store, &self.catalog, &self.simulator)
    }
}

fn missing_required(record: &ToolRecord, input: &Map<String, Value>) -> bool {
    record
        .required_params()
        .any(|name| matches!(input.get(name), None | Some(Value::Null)))
}

fn dispatch(
    call: &ToolCall,
    store: &ReplayStore,
    catalog: &Catalog,
    simulator: &dyn Simulator,
) -> Observation {
    let Some(record) = catalog.find(
        call.category.as_deref(),
        &call.tool_name,
        call.api_name.as_deref(),
    ) else {
        return Observation::failure(TOOL_NOT_FOUND);
    };
    let key = ReplayKey::new(record, &call.tool_input);
    if let Some(recorded) = store.get(&key) {
        return recorded.clone();
    }
    if missing_required(record, &call.tool_input) {
        return Observation::failure(MISSING_PARAMS);
    }
    simulator.simulate(record, call, &key.canonical_input)
}

/// One-shot invocation against the templated simulator.
pub fn invoke(
    call: &ToolCall,
    store: &ReplayStore,
    profile: &SimProfile,
    catalog: &Catalog,
) -> Result<Observation, EnvError> {
    let simulator = TemplatedSimulator::new(profile.clone())?;
    Ok(dispatch(call, store, catalog, &simulator))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::ParamSpec;

    fn catalog() -> Catalog {
        Catalog::from_records(vec![
            ToolRecord {
                api_id: 0,
                category: "Advertising".into(),
                tool_name: "Reqres".into(),
                api_name: "Users".into(),
                description: "List users".into(),
                input_schema: vec![ParamSpec::new("page", "integer", true)],
            },
            ToolRecord {
                api_id: 1,
                category: "Advertising".into(),
                tool_name: "Reqres".into(),
                api_name: "User by id".into(),
                description: "One user".into(),
                input_schema: vec![ParamSpec::new("id", "string", true)],
            },
        ])
        .unwrap()
    }

    fn call(api: &str, input: Value) -> ToolCall {
        let Value::Object(map) = input else { panic!() };
        ToolCall::new(Some("Advertising"), "Reqres", Some(api), map)
    }

    #[test]
    fn missing_parameter_matches_feedback_box() {
        let obs = invoke(
            &call("Users", json!({})),
            &ReplayStore::new(),
            &SimProfile::new(42, 0.0),
            &catalog(),
        )
        .unwrap();
        assert_eq!(
            obs.to_json(),
            r#"{"error":"Missing input parameters.","response":""}"#
        );
    }

    #[test]
    fn replay_hit_is_verbatim_and_beats_injection() {
        let cat = catalog();
        let mut store = ReplayStore::new();
        let recorded = Observation::success(r#"{"user_id": 1, "name": "John Doe"}"#);
        let c = call("User by id", json!({"id": "1"}));
        store.record_call(&c, recorded.clone(), &cat).unwrap();
        let always_fail = SimProfile::new(1, 1.0);
        assert_eq!(invoke(&c, &store, &always_fail, &cat).unwrap(), recorded);
    }

    #[test]
    fn replay_even_for_recorded_missing_param_call() {
        let cat = catalog();
        let mut store = ReplayStore::new();
        let c = call("Users", json!({}));
        store.record_call(&c, Observation::success("[]"), &cat);
        assert_eq!(
            invoke(&c, &store, &SimProfile::default(), &cat)
                .unwrap()
                .response,
            "[]"
        );
    }

    #[test]
    fn templated_success_is_deterministic() {
        let cat = catalog();
        let c = call("User by id", json!({"id": "7"}));
        let profile = SimProfile::new(42, 0.0);
        let a = invoke(&c, &ReplayStore::new(), &profile, &cat).unwrap();
        let b = invoke(&c, &ReplayStore::new(), &profile, &cat).unwrap();
        assert!(!a.is_error());
        assert_eq!(a, b);
        let other = invoke(&c, &ReplayStore::new(), &SimProfile::new(43, 0.0), &cat).unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn unknown_tool_is_an_observation() {
        let c = ToolCall::new(None, "Nope", None, Map::new());
        let obs = invoke(&c, &ReplayStore::new(), &SimProfile::default(), &catalog()).unwrap();
        assert_eq!(obs, Observation::failure(TOOL_NOT_FOUND));
    }

    #[test]
    fn last_write_wins() {
        let cat = catalog();
        let mut store = ReplayStore::new();
        let c = call("User by id", json!({"id": "1"}));
        store.record_call(&c, Observation::success("a"), &cat);
        store.record_call(&c, Observation::success("b"), &cat);
        assert_eq!(store.len(), 1);
        assert_eq!(
            invoke(&c, &store, &SimProfile::default(), &cat)
                .unwrap()
                .response,
            "b"
        );
    }

    #[test]
    fn canonical_input_sorts_keys() {
        let a = call("User by id", json!({"a": 1, "b": 2}));
        let b = call("User by id", json!({"b": 2, "a": 1}));
        assert_eq!(
            canonical_input(&a.tool_input),
            canonical_input(&b.tool_input)
        );
        assert_eq!(
            canonical_json(&json!({"b": [ {"d": 1, "c": 2} ], "a": "x y"})),
            r#"{"a":"x y","b":[{"c":2,"d":1}]}"#
        );
    }

    #[test]
    fn profile_validation() {
        assert!(TemplatedSimulator::new(SimProfile::new(0, 1.5)).is_err());
        let mut p = SimProfile::new(0, 0.5);
        p.error_mix = ErrorMix {
            missing_params: 0.5,
            auth_error: 0.2,
            timeout: 0.2,
        };
        assert!(p.validate().is_err());
    }

    #[test]
    fn replay_file_round_trip() {
        let text = r#"{"category":"Advertising","tool_name":"Reqres","api_name":"User by id","canonical_input":"{ \"id\" : \"1\" }","observation":{"error":"","response":"ok"}}
{"category":"Advertising","tool_name":"Reqres","api_name":"Users","canonical_input":"{\"page\":1}","observation":"plain"}"#;
        let store = ReplayStore::from_reader(text.as_bytes()).unwrap();
        assert_eq!(store.len(), 2);
        let hit = invoke(
            &call("User by id", json!({"id": "1"})),
            &store,
            &SimProfile::default(),
            &catalog(),
        )
        .unwrap();
        assert_eq!(hit.response, "ok");
        let mut out = Vec::new();
        store.write_to(&mut out).unwrap();
        assert_eq!(ReplayStore::from_reader(out.as_slice()).unwrap(), store);
        assert_eq!(store.stats().apis, 2);
    }
}
