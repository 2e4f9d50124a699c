//! Dense tool retrieval: embed tool documents once, then answer top-k cosine
//! queries against the stored unit vectors.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::{Catalog, CatalogError};
use crate::hash::fnv1a;
use crate::scalar::Real;

/// Dimension of the bundled trigram embedder.
pub const TRIGRAM_DIMS: usize = 256;
/// Default retrieval depth.
pub const DEFAULT_K: usize = 5;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("embedder failed: {0}")]
    Embed(String),
    #[error("embedder failed on api_id {api_id}: {message}")]
    EmbedRecord { api_id: u64, message: String },
    #[error("expected {expected} dimensions, got {actual}")]
    Dimension { expected: usize, actual: usize },
    #[error("cannot build an index over an empty catalog")]
    EmptyCatalog,
    #[error("index is empty")]
    EmptyIndex,
    #[error("k must be at least 1")]
    ZeroK,
    #[error("non-finite value in vector for api_id {0}")]
    NonFinite(u64),
    #[error(transparent)]
    Catalog(#[from] CatalogError),
    #[error("remote retrieval failed")]
    Remote(#[source] Box<dyn std::error::Error + Send + Sync>),
}

/// Text-to-vector contract. Implementations must return `dims()` finite values.
pub trait Embedder<T: Real>: Send + Sync {
    fn dims(&self) -> usize;

    fn embed(&self, text: &str) -> Result<Vec<T>, RetrievalError>;

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<T>>, RetrievalError> {
        texts.iter().map(|t| self.embed(t)).collect()
    }
}

/// Deterministic lexical embedder: character trigrams of the lowercased,
/// space-padded text hashed into `dims` buckets, then L2-normalized.
#[derive(Clone, Copy, Debug)]
pub struct TrigramEmbedder {
    dims: usize,
}

impl TrigramEmbedder {
    pub fn new(dims: usize) -> Self {
        assert!(dims > 0, "embedding dimension must be positive");
        Self { dims }
    }
}

impl Default for TrigramEmbedder {
    fn default() -> Self {
        Self::new(TRIGRAM_DIMS)
    }
}

impl<T: Real> Embedder<T> for TrigramEmbedder {
    fn dims(&self) -> usize {
        self.dims
    }

    fn embed(&self, text: &str) -> Result<Vec<T>, RetrievalError> {
        let padded: Vec<char> = std::iter::once(' ')
            .chain(text.to_lowercase().chars())
            .chain(std::iter::once(' '))
            .collect();
        let mut counts = vec![0u32; self.dims];
        let mut buf = [0u8; 12];
        for window in padded.windows(3) {
            let mut len = 0;
            for c in window {
                len += c.encode_utf8(&mut buf[len..]).len();
            }
            let bucket = (fnv1a(&buf[..len]) % self.dims as u64) as usize;
            counts[bucket] += 1;
        }
        let mut vector: Vec<T> = counts.into_iter().map(|c| T::count(c as usize)).collect();
        normalize(&mut vector);
        Ok(vector)
    }
}

/// Scales `v` to unit length in place; a zero vector is left as is.
pub fn normalize<T: Real>(v: &mut [T]) {
    let norm = v.iter().map(|&x| x * x).sum::<T>().sqrt();
    if norm > T::zero() {
        for x in v.iter_mut() {
            *x = *x / norm;
        }
    }
}

pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

/// One retrieval result.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedHit<T> {
    pub api_id: u64,
    pub score: T,
    pub rank: usize,
}

/// Heap entry ordered so the *worst* candidate sits at the top: lower score,
/// then higher api_id.
struct Candidate<T> {
    score: T,
    api_id: u64,
}

impl<T: Real> PartialEq for Candidate<T> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl<T: Real> Eq for Candidate<T> {}

impl<T: Real> PartialOrd for Candidate<T> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<T: Real> Ord for Candidate<T> {
    fn cmp(&self, other: &Self) -> Ordering {
        // "Greater" means worse, so BinaryHeap::peek yields the eviction candidate.
        other
            .score
            .partial_cmp(&self.score)
            .unwrap_or(Ordering::Equal)
            .then(self.api_id.cmp(&other.api_id))
    }
}

/// Immutable set of unit-normalized tool vectors aligned with a catalog.
#[derive(Clone, Debug)]
pub struct VectorIndex<T> {
    dims: usize,
    ids: Vec<u64>,
    data: Vec<T>,
    catalog: Arc<Catalog>,
}

impl<T: Real> VectorIndex<T> {
    /// Embeds every catalog record's document text.
    pub fn build(
        catalog: Arc<Catalog>,
        embedder: &dyn Embedder<T>,
    ) -> Result<Self, RetrievalError> {
        if catalog.is_empty() {
            return Err(RetrievalError::EmptyCatalog);
        }
        let docs: Vec<String> = catalog.iter().map(|r| r.document_text()).collect();
        let vectors = match embedder.embed_batch(&docs) {
            Ok(vectors) => vectors,
            Err(batch_err) => {
                // Re-embed one by one to name the record that fails.
                for (record, doc) in catalog.iter().zip(&docs) {
                    if let Err(e) = embedder.embed(doc) {
                        return Err(RetrievalError::EmbedRecord {
                            api_id: record.api_id,
                            message: e.to_string(),
                        });
                    }
                }
                return Err(batch_err);
            }
        };
        if vectors.len() != catalog.len() {
            return Err(RetrievalError::Embed(format!(
                "embedder returned {} vectors for {} documents",
                vectors.len(),
                catalog.len()
            )));
        }
        let entries = catalog.ids().zip(vectors).collect();
        Self::from_vectors(catalog, embedder.dims(), entries)
    }

    /// Builds an index from precomputed vectors (normalized here). Entry ids
    /// must be exactly the catalog ids in catalog order.
    pub fn from_vectors(
        catalog: Arc<Catalog>,
        dims: usize,
        entries: Vec<(u64, Vec<T>)>,
    ) -> Result<Self, RetrievalError> {
        if catalog.is_empty() {
            return Err(RetrievalError::EmptyCatalog);
        }
        if entries.len() != catalog.len() {
            return Err(RetrievalError::Embed(format!(
                "{} vectors for {} catalog records",
                entries.len(),
                catalog.len()
            )));
        }
        let mut ids = Vec::with_capacity(entries.len());
        let mut data = Vec::with_capacity(entries.len() * dims);
        for ((api_id, mut vector), record) in entries.into_iter().zip(catalog.iter()) {
            if api_id != record.api_id {
                return Err(CatalogError::UnknownId(api_id).into());
            }
            if vector.len() != dims {
                return Err(RetrievalError::Dimension {
                    expected: dims,
                    actual: vector.len(),
                });
            }
            if vector.iter().any(|x| !x.is_finite()) {
                return Err(RetrievalError::NonFinite(api_id));
            }
            normalize(&mut vector);
            ids.push(api_id);
            data.extend(vector);
        }
        Ok(Self {
            dims,
            ids,
            data,
            catalog,
        })
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn catalog(&self) -> &Arc<Catalog> {
        &self.catalog
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn vector(&self, position: usize) -> &[T] {
        &self.data[position * self.dims..(position + 1) * self.dims]
    }

    pub fn entries(&self) -> impl Iterator<Item = (u64, &[T])> + '_ {
        self.ids
            .iter()
            .copied()
            .zip(self.data.chunks_exact(self.dims))
    }

    /// Embeds `query` and returns the `k` best hits.
    pub fn retrieve_topk(
        &self,
        query: &str,
        k: usize,
        embedder: &dyn Embedder<T>,
    ) -> Result<Vec<RankedHit<T>>, RetrievalError> {
        let mut vector = embedder.embed(query)?;
        if vector.len() != self.dims {
            return Err(RetrievalError::Dimension {
                expected: self.dims,
                actual: vector.len(),
            });
        }
        normalize(&mut vector);
        self.search_vector(&vector, k, |_| true)
    }

    /// Top-k over entries accepted by `keep`; ties go to the lower api_id.
    pub fn search_vector(
        &self,
        query: &[T],
        k: usize,
        keep: impl Fn(u64) -> bool,
    ) -> Result<Vec<RankedHit<T>>, RetrievalError> {
        if k == 0 {
            return Err(RetrievalError::ZeroK);
        }
        if self.is_empty() {
            return Err(RetrievalError::EmptyIndex);
        }
        if query.len() != self.dims {
            return Err(RetrievalError::Dimension {
                expected: self.dims,
                actual: query.len(),
            });
        }
        let mut heap: BinaryHeap<Candidate<T>> = BinaryHeap::with_capacity(k + 1);
        for (api_id, vector) in self.entries() {
            if !keep(api_id) {
                continue;
            }
            let candidate = Candidate {
                score: dot(query, vector),
                api_id,
            };
            if heap.len() < k {
                heap.push(candidate);
            } else if heap.peek().is_some_and(|worst| candidate < *worst) {
                heap.pop();
                heap.push(candidate);
            }
        }
        Ok(heap
            .into_sorted_vec()
            .into_iter()
            .enumerate()
            .map(|(i, c)| RankedHit {
                api_id: c.api_id,
                score: c.score,
                rank: i + 1,
            })
            .collect())
    }
}

/// Record shape inside a retrieval `<information>` block.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InfoRecord {
    pub api_id: u64,
    pub category: String,
    pub tool_name: String,
    pub api_name: String,
    pub api_description: String,
}

/// Renders hits, in rank order, as one `<information>[...]</information>` block.
pub fn render_information_block<T>(
    hits: &[RankedHit<T>],
    catalog: &Catalog,
) -> Result<String, RetrievalError> {
    let ids: Vec<u64> = hits.iter().map(|h| h.api_id).collect();
    render_information_ids(&ids, catalog)
}

pub fn render_information_ids(ids: &[u64], catalog: &Catalog) -> Result<String, RetrievalError> {
    let records = ids
        .iter()
        .map(|&id| {
            let r = catalog.lookup(id)?;
            Ok(InfoRecord {
                api_id: r.api_id,
                category: r.category.clone(),
                tool_name: r.tool_name.clone(),
                api_name: r.api_name.clone(),
                api_description: r.description.clone(),
            })
        })
        .collect::<Result<Vec<_>, RetrievalError>>()?;
    Ok(format_information(&records))
}

pub fn format_information(records: &[InfoRecord]) -> String {
    let body = serde_json::to_string(records).expect("info records serialize");
    format!("<information>{body}</information>")
}

/// Result of one search request as seen by the agent runtime.
#[derive(Clone, Debug, PartialEq)]
pub struct SearchOutcome {
    pub ids: Vec<u64>,
    pub information: String,
}

/// Search-server handle used by the runtime and curation; must tolerate
/// concurrent calls.
pub trait ToolSearch: Send + Sync {
    fn search(&self, query: &str, k: usize) -> Result<SearchOutcome, RetrievalError>;
}

/// In-process search over a [`VectorIndex`].
pub struct LocalSearch<T, E> {
    pub index: VectorIndex<T>,
    pub embedder: E,
}

impl<T: Real, E: Embedder<T>> LocalSearch<T, E> {
    pub fn new(index: VectorIndex<T>, embedder: E) -> Self {
        Self { index, embedder }
    }

    pub fn hits(&self, query: &str, k: usize) -> Result<Vec<RankedHit<T>>, RetrievalError> {
        self.index.retrieve_topk(query, k, &self.embedder)
    }
}

impl<T: Real, E: Embedder<T>> ToolSearch for LocalSearch<T, E> {
    fn search(&self, query: &str, k: usize) -> Result<SearchOutcome, RetrievalError> {
        let hits = self.hits(query, k)?;
        let information = render_information_block(&hits, self.index.catalog())?;
        Ok(SearchOutcome {
            ids: hits.into_iter().map(|h| h.api_id).collect(),
            information,
        })
    }
}
