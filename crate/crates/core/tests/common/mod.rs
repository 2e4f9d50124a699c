#![allow(dead_code)]

use std::sync::Arc;

use toolforge_core::environment::{HybridEnvironment, ReplayStore, SimProfile, TemplatedSimulator};
use toolforge_core::retrieval::{
    LocalSearch, ToolSearch, TrigramEmbedder, VectorIndex, TRIGRAM_DIMS,
};
use toolforge_core::runtime::{Script, ScriptedPolicy};
use toolforge_core::synthetic::generate_catalog;
use toolforge_core::Catalog;

pub struct World {
    pub catalog: Arc<Catalog>,
    pub search: LocalSearch<f64, TrigramEmbedder>,
    pub env: HybridEnvironment,
}

pub fn world(n: usize, seed: u64) -> World {
    let catalog = Arc::new(generate_catalog(n, seed));
    let embedder = TrigramEmbedder::new(TRIGRAM_DIMS);
    let index = VectorIndex::build(catalog.clone(), &embedder).expect("index builds");
    let simulator = TemplatedSimulator::new(SimProfile::new(seed, 0.0)).expect("profile valid");
    World {
        env: HybridEnvironment::new(ReplayStore::new(), catalog.clone(), simulator),
        search: LocalSearch::new(index, embedder),
        catalog,
    }
}

impl World {
    /// Ids the server returns for `query` at `k`.
    pub fn hits(&self, query: &str, k: usize) -> Vec<u64> {
        self.search.search(query, k).expect("search").ids
    }

    /// A query string whose top-k contains `id`: the record's own document.
    pub fn query_hitting(&self, id: u64) -> String {
        self.catalog.get(id).expect("id exists").document_text()
    }

    /// Execution call JSON for `id` with every required parameter filled.
    pub fn call_json(&self, id: u64) -> String {
        let r = self.catalog.get(id).expect("id exists");
        let input: serde_json::Map<String, serde_json::Value> = r
            .input_schema
            .iter()
            .map(|p| (p.name.clone(), serde_json::Value::String("x".into())))
            .collect();
        serde_json::json!({"tool_name": r.tool_name, "api_name": r.api_name, "tool_input": input})
            .to_string()
    }
}

pub fn script(retrieval: &[&str], execution: &[&str]) -> Script {
    Script {
        retrieval: retrieval.iter().map(|s| s.to_string()).collect(),
        execution: execution.iter().map(|s| s.to_string()).collect(),
    }
}

pub fn policy(retrieval: &[&str], execution: &[&str]) -> ScriptedPolicy {
    ScriptedPolicy::single(script(retrieval, execution))
}
