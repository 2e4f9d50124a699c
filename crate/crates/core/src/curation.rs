//! Training-data curation: difficulty strata, seeded pool sampling,
//! rejection sampling of retrieval rollouts, and positive/negative mixing.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::retrieval::{RetrievalError, ToolSearch};
use crate::rl::recall_reward;
use crate::runtime::Episode;

/// Default hard:easy sampling ratio.
pub const DEFAULT_HARD_PER_EASY: usize = 3;
pub const DEFAULT_POSITIVE_FRACTION: f64 = 0.7;

#[derive(Debug, Error)]
pub enum CurationError {
    #[error("query {0} has no gold tools")]
    EmptyGold(String),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error("{stratum} stratum has {available} queries, {requested} requested")]
    InsufficientStratum {
        stratum: Difficulty,
        requested: usize,
        available: usize,
    },
    #[error("{polarity} pool has {available} records, {requested} requested")]
    PoolExhausted {
        polarity: Polarity,
        requested: usize,
        available: usize,
    },
    #[error("positive fraction {0} is outside [0, 1]")]
    BadFraction(f64),
}

#[derive(
    Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(rename_all = "snake_case")]
pub enum Difficulty {
    Easy,
    Hard,
    #[default]
    Unlabeled,
}

impl std::fmt::Display for Difficulty {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Difficulty::Easy => "easy",
            Difficulty::Hard => "hard",
            Difficulty::Unlabeled => "unlabeled",
        })
    }
}

/// A user query with its annotated gold tools.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotatedQuery {
    pub query_id: String,
    pub question: String,
    #[serde(default)]
    pub gold: Vec<u64>,
    #[serde(default)]
    pub difficulty: Difficulty,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<String>,
}

impl AnnotatedQuery {
    pub fn new(query_id: impl Into<String>, question: impl Into<String>, gold: Vec<u64>) -> Self {
        Self {
            query_id: query_id.into(),
            question: question.into(),
            gold,
            difficulty: Difficulty::Unlabeled,
            split: None,
        }
    }

    pub fn with_split(mut self, split: impl Into<String>) -> Self {
        self.split = Some(split.into());
        self
    }
}

/// Easy iff one retrieval on the raw question already surfaces every gold
/// tool in its top `k`.
pub fn stratify(
    query: &AnnotatedQuery,
    search: &dyn ToolSearch,
    k: usize,
) -> Result<Difficulty, CurationError> {
    if query.gold.is_empty() {
        return Err(CurationError::EmptyGold(query.query_id.clone()));
    }
    let hits = search.search(&query.question, k)?.ids;
    Ok(if query.gold.iter().all(|g| hits.contains(g)) {
        Difficulty::Easy
    } else {
        Difficulty::Hard
    })
}

#[derive(Debug, Default)]
pub struct StratifyReport {
    pub labeled: Vec<AnnotatedQuery>,
    pub rejected: Vec<(String, CurationError)>,
}

/// Labels every query in parallel; input order is preserved in both lists.
pub fn stratify_all(
    queries: &[AnnotatedQuery],
    search: &dyn ToolSearch,
    k: usize,
) -> StratifyReport {
    let results: Vec<Result<AnnotatedQuery, CurationError>> = queries
        .par_iter()
        .map(|q| {
            stratify(q, search, k).map(|d| AnnotatedQuery {
                difficulty: d,
                ..q.clone()
            })
        })
        .collect();
    let mut report = StratifyReport::default();
    for (q, r) in queries.iter().zip(results) {
        match r {
            Ok(labeled) => report.labeled.push(labeled),
            Err(e) => report.rejected.push((q.query_id.clone(), e)),
        }
    }
    report
}

fn draw<T: Clone>(pool: &[T], n: usize, rng: &mut ChaCha8Rng) -> Vec<T> {
    let mut items = pool.to_vec();
    items.shuffle(rng);
    items.truncate(n);
    items
}

/// Seeded sample of `hard_n` Hard and `easy_n` Easy queries, shuffled together.
pub fn sample_pool(
    queries: &[AnnotatedQuery],
    hard_n: usize,
    easy_n: usize,
    seed: u64,
) -> Result<Vec<AnnotatedQuery>, CurationError> {
    let stratum = |d: Difficulty| -> Vec<AnnotatedQuery> {
        queries
            .iter()
            .filter(|q| q.difficulty == d)
            .cloned()
            .collect()
    };
    let hard = stratum(Difficulty::Hard);
    let easy = stratum(Difficulty::Easy);
    for (d, pool, n) in [
        (Difficulty::Hard, &hard, hard_n),
        (Difficulty::Easy, &easy, easy_n),
    ] {
        if pool.len() < n {
            return Err(CurationError::InsufficientStratum {
                stratum: d,
                requested: n,
                available: pool.len(),
            });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = draw(&hard, hard_n, &mut rng);
    out.extend(draw(&easy, easy_n, &mut rng));
    out.shuffle(&mut rng);
    Ok(out)
}

/// Keeps episodes whose cumulative retrieval covers all gold tools and whose
/// retrieval transcript is well formed.
pub fn rejection_filter(episodes: &[Episode]) -> Vec<&Episode> {
    episodes
        .iter()
        .filter(|e| {
            let retrieved: Vec<u64> = e.cumulative_retrieved.iter().copied().collect();
            recall_reward::<f64>(&e.gold, &retrieved) == 1.0 && e.retrieval.check_format().passed()
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Polarity {
    Positive,
    Negative,
}

impl std::fmt::Display for Polarity {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Polarity::Positive => "positive",
            Polarity::Negative => "negative",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixRecord<T> {
    pub polarity: Polarity,
    /// Loss weight for downstream SFT.
    pub weight: f64,
    pub record: T,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MixConfig {
    pub pos_fraction: f64,
    pub negative_weight: f64,
}

impl Default for MixConfig {
    fn default() -> Self {
        Self {
            pos_fraction: DEFAULT_POSITIVE_FRACTION,
            negative_weight: 1.0,
        }
    }
}

/// Draws `total` records, `round(total · pos_fraction)` of them positive,
/// and interleaves them in seeded order.
pub fn compose_mix<T: Clone>(
    positives: &[T],
    negatives: &[T],
    total: usize,
    config: MixConfig,
    seed: u64,
) -> Result<Vec<MixRecord<T>>, CurationError> {
    if !(0.0..=1.0).contains(&config.pos_fraction) {
        return Err(CurationError::BadFraction(config.pos_fraction));
    }
    let n_pos = (total as f64 * config.pos_fraction).round() as usize;
    let n_neg = total - n_pos.min(total);
    for (polarity, pool, n) in [
        (Polarity::Positive, positives, n_pos),
        (Polarity::Negative, negatives, n_neg),
    ] {
        if pool.len() < n {
            return Err(CurationError::PoolExhausted {
                polarity,
                requested: n,
                available: pool.len(),
            });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tag = |polarity, weight| {
        move |record| MixRecord {
            polarity,
            weight,
            record,
        }
    };
    let mut out: Vec<MixRecord<T>> = draw(positives, n_pos, &mut rng)
        .into_iter()
        .map(tag(Polarity::Positive, 1.0))
        .collect();
    out.extend(
        draw(negatives, n_neg, &mut rng)
            .into_iter()
            .map(tag(Polarity::Negative, config.negative_weight)),
    );
    out.shuffle(&mut rng);
    Ok(out)
}
