//! Two-phase tool agents over large API catalogs: proactive retrieval of a
//! tool subset, grounded execution over it, and the decoupled group-relative
//! policy-optimization signals that train both phases.
//!
//! The numeric modules are generic over [`Real`]; the aliases below fix the
//! scalar to `f64`.

pub mod catalog;
pub mod curation;
pub mod environment;
pub mod eval;
pub mod grammar;
pub mod hash;
pub mod retrieval;
pub mod rl;
pub mod runtime;
pub mod scalar;
pub mod synthetic;

pub use catalog::{load_catalog, Catalog, CatalogError, ParamSpec, ToolRecord};
pub use curation::{AnnotatedQuery, Difficulty, Polarity};
pub use environment::{
    HybridEnvironment, Observation, ReplayStore, SimProfile, TemplatedSimulator, ToolEnvironment,
};
pub use eval::{FixtureJudge, Judge, MetricReport, Preference, Verdict};
pub use grammar::{
    parse_execution, parse_retrieval, ExecutionTrajectory, Phase, RetrievalTrajectory, ToolCall,
};
pub use retrieval::{Embedder, LocalSearch, ToolSearch, TrigramEmbedder};
pub use rl::{ConvMode, Task, TokenMask};
pub use runtime::{
    Episode, GateMode, PolicyOracle, RolloutConfig, RolloutGroup, ScriptBook, ScriptedPolicy,
};
pub use scalar::Real;

pub type VectorIndex64 = retrieval::VectorIndex<f64>;
pub type RankedHit64 = retrieval::RankedHit<f64>;
pub type LocalSearch64 = retrieval::LocalSearch<f64, TrigramEmbedder>;
pub type RewardWeights = rl::RewardWeights<f64>;
pub type RewardBreakdown = rl::RewardBreakdown<f64>;
pub type ScoreConfig = rl::ScoreConfig<f64>;
pub type AdvantageSet = rl::AdvantageSet<f64>;
pub type QueryAdvantages = rl::QueryAdvantages<f64>;
pub type GroupRewards = rl::GroupRewards<f64>;
pub type EpisodeTerms<'a> = rl::EpisodeTerms<'a, f64>;
