//! Run configuration. Layers, lowest to highest: built-in defaults, a TOML
//! file, `TOOLFORGE_*` environment variables, command-line flags.
//!
//! Environment keys map onto the TOML tree with `__` separating levels, so
//! `TOOLFORGE_ROLLOUT__GROUP_SIZE=8` sets `rollout.group_size`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use toolforge_core::retrieval::TRIGRAM_DIMS;
use toolforge_core::rl::{DEFAULT_ADVANTAGE_EPS, DEFAULT_CLIP_EPS};
use toolforge_core::runtime::{
    RolloutConfig, DEFAULT_GROUP_SIZE, DEFAULT_TURN_CHAR_CAP, EXECUTION_BUDGET, RETRIEVAL_BUDGET,
};
use toolforge_core::{ConvMode, GateMode, RewardWeights, SimProfile};

pub const ENV_PREFIX: &str = "TOOLFORGE_";
pub const MAX_K: usize = 9;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parsing config")]
    Parse(#[from] toml::de::Error),
    #[error("environment override {key}: {message}")]
    Env { key: String, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IndexSection {
    pub dims: usize,
    pub k: usize,
}

impl Default for IndexSection {
    fn default() -> Self {
        Self {
            dims: TRIGRAM_DIMS,
            k: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RolloutSection {
    pub retrieval_budget: usize,
    pub execution_budget: usize,
    pub group_size: usize,
    pub seed: u64,
    pub gate: GateMode,
    pub turn_char_cap: usize,
    pub prepend_retrieval: bool,
}

impl Default for RolloutSection {
    fn default() -> Self {
        Self {
            retrieval_budget: RETRIEVAL_BUDGET,
            execution_budget: EXECUTION_BUDGET,
            group_size: DEFAULT_GROUP_SIZE,
            seed: 0,
            gate: GateMode::Subset,
            turn_char_cap: DEFAULT_TURN_CHAR_CAP,
            prepend_retrieval: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub weights: RewardWeights,
    pub conv: ConvMode,
    pub advantage_eps: f64,
    pub clip_eps: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            weights: RewardWeights::default(),
            conv: ConvMode::Gold,
            advantage_eps: DEFAULT_ADVANTAGE_EPS,
            clip_eps: DEFAULT_CLIP_EPS,
        }
    }
}

/// Remote services. Any endpoint left unset falls back to the matching
/// fixture or in-process implementation.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EndpointSection {
    pub policy: Option<String>,
    pub judge: Option<String>,
    pub embedder: Option<String>,
    pub simulator: Option<String>,
    pub retrieval: Option<String>,
    pub timeout_secs: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FixtureSection {
    pub scripts: Option<PathBuf>,
    pub replay: Option<PathBuf>,
    pub verdicts: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub catalog: PathBuf,
    pub queries: PathBuf,
    pub out_dir: PathBuf,
    pub index: IndexSection,
    pub rollout: RolloutSection,
    pub train: TrainSection,
    pub simulator: SimProfile,
    pub endpoints: EndpointSection,
    pub fixtures: FixtureSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            catalog: PathBuf::from("catalog.jsonl"),
            queries: PathBuf::from("queries.jsonl"),
            out_dir: PathBuf::from("out"),
            index: IndexSection::default(),
            rollout: RolloutSection::default(),
            train: TrainSection::default(),
            simulator: SimProfile::default(),
            endpoints: EndpointSection::default(),
            fixtures: FixtureSection::default(),
        }
    }
}

/// Parses an environment value as a TOML scalar or array, falling back to a
/// plain string.
fn env_value(raw: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t
            .remove("v")
            .unwrap_or_else(|| toml::Value::String(raw.to_string())),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn apply_env(
    table: &mut toml::Table,
    vars: impl IntoIterator<Item = (String, String)>,
) -> Result<(), ConfigError> {
    for (key, raw) in vars {
        let Some(rest) = key.strip_prefix(ENV_PREFIX) else {
            continue;
        };
        let path: Vec<String> = rest.split("__").map(|p| p.to_ascii_lowercase()).collect();
        if path.iter().any(String::is_empty) {
            return Err(ConfigError::Env {
                key,
                message: "empty key segment".into(),
            });
        }
        let mut node = &mut *table;
        for part in &path[..path.len() - 1] {
            let entry = node
                .entry(part.clone())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
            node = match entry {
                toml::Value::Table(t) => t,
                _ => {
                    return Err(ConfigError::Env {
                        key,
                        message: format!("{part} is not a section"),
                    })
                }
            };
        }
        node.insert(path[path.len() - 1].clone(), env_value(&raw));
        if let Err(e) = toml::Value::Table(table.clone()).try_into::<RunConfig>() {
            return Err(ConfigError::Env {
                key,
                message: e.message().trim().to_string(),
            });
        }
    }
    Ok(())
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        Ok(toml::from_str(text)?)
    }

    /// File (if any) plus environment overrides from `vars`.
    pub fn layered(
        path: Option<&Path>,
        vars: impl IntoIterator<Item = (String, String)>,
    ) -> Result<Self, ConfigError> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|source| ConfigError::Read {
                    path: p.to_path_buf(),
                    source,
                })?;
                let mut table: toml::Table = toml::from_str(&text)?;
                if let Some(dir) = p.parent() {
                    resolve_paths(&mut table, dir);
                }
                table
            }
            None => toml::Table::new(),
        };
        toml::Value::Table(table.clone()).try_into::<RunConfig>()?;
        apply_env(&mut table, vars)?;
        Ok(toml::Value::Table(table).try_into()?)
    }

    /// File plus the process environment.
    pub fn load(path: Option<&Path>) -> Result<Self, ConfigError> {
        Self::layered(path, std::env::vars())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.rollout.group_size < 2 {
            return bad(format!(
                "rollout.group_size = {} but group-relative advantages need at least 2",
                self.rollout.group_size
            ));
        }
        if !(1..=MAX_K).contains(&self.index.k) {
            return bad(format!("index.k = {} must be in 1..={MAX_K}", self.index.k));
        }
        if self.index.dims == 0 {
            return bad("index.dims must be positive".into());
        }
        if self.rollout.retrieval_budget == 0 || self.rollout.execution_budget == 0 {
            return bad("turn budgets must be at least 1".into());
        }
        if self.rollout.turn_char_cap == 0 {
            return bad("rollout.turn_char_cap must be positive".into());
        }
        self.train
            .weights
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if !(self.train.advantage_eps.is_finite() && self.train.advantage_eps >= 0.0) {
            return bad("train.advantage_eps must be finite and non-negative".into());
        }
        if !(self.train.clip_eps.is_finite() && (0.0..1.0).contains(&self.train.clip_eps)) {
            return bad("train.clip_eps must be in [0, 1)".into());
        }
        self.simulator
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(())
    }

    pub fn rollout_config(&self) -> RolloutConfig {
        RolloutConfig {
            k: self.index.k,
            retrieval_budget: self.rollout.retrieval_budget,
            execution_budget: self.rollout.execution_budget,
            group_size: self.rollout.group_size,
            base_seed: self.rollout.seed,
            gate: self.rollout.gate,
            turn_char_cap: self.rollout.turn_char_cap,
            prepend_retrieval: self.rollout.prepend_retrieval,
        }
    }

    /// Same config with every file path made absolute, so the echoed copy
    /// resolves identically from any directory.
    pub fn absolutized(&self) -> Self {
        let abs = |p: &Path| std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf());
        let mut c = self.clone();
        c.catalog = abs(&c.catalog);
        c.queries = abs(&c.queries);
        c.out_dir = abs(&c.out_dir);
        for slot in [
            &mut c.fixtures.scripts,
            &mut c.fixtures.replay,
            &mut c.fixtures.verdicts,
        ] {
            if let Some(p) = slot.as_mut() {
                *p = abs(p);
            }
        }
        c
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Relative file paths in a config file are taken relative to that file.
fn resolve_paths(table: &mut toml::Table, base: &Path) {
    let fix = |v: &mut toml::Value| {
        if let toml::Value::String(s) = v {
            let p = Path::new(s.as_str());
            if p.is_relative() {
                *s = base.join(p).to_string_lossy().into_owned();
            }
        }
    };
    for key in ["catalog", "queries", "out_dir"] {
        if let Some(v) = table.get_mut(key) {
            fix(v);
        }
    }
    if let Some(toml::Value::Table(f)) = table.get_mut("fixtures") {
        for (_, v) in f.iter_mut() {
            fix(v);
        }
    }
}
