//! Blocking HTTP clients for the external services a run can depend on.

use std::sync::Arc;
use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;
use toolforge_core::environment::{Observation, Simulator, TIMEOUT};
use toolforge_core::eval::{EvalError, Judge, JudgeRequest, Verdict};
use toolforge_core::grammar::ToolCall;
use toolforge_core::retrieval::{
    render_information_ids, Embedder, RankedHit, RetrievalError, SearchOutcome, ToolSearch,
};
use toolforge_core::runtime::{GenerateRequest, Generation, PolicyError, PolicyOracle};
use toolforge_core::{Catalog, ToolRecord};

pub const DEFAULT_TIMEOUT_SECS: u64 = 60;

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("{service} endpoint {url} is unreachable: {message}")]
    Unreachable {
        service: &'static str,
        url: String,
        message: String,
    },
    #[error("{service} endpoint {url} answered with an error: {message}")]
    BadResponse {
        service: &'static str,
        url: String,
        message: String,
    },
}

/// JSON-over-POST transport shared by the typed clients.
#[derive(Clone)]
pub struct HttpClient {
    agent: ureq::Agent,
    base: String,
    service: &'static str,
}

impl HttpClient {
    pub fn new(service: &'static str, base: impl Into<String>, timeout_secs: u64) -> Self {
        let secs = if timeout_secs == 0 {
            DEFAULT_TIMEOUT_SECS
        } else {
            timeout_secs
        };
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(secs)))
            .build()
            .into();
        Self {
            agent,
            base: base.into().trim_end_matches('/').to_string(),
            service,
        }
    }

    pub fn url(&self, path: &str) -> String {
        format!("{}{}", self.base, path)
    }

    pub fn post<B: Serialize, R: DeserializeOwned>(
        &self,
        path: &str,
        body: &B,
    ) -> Result<R, ClientError> {
        let url = self.url(path);
        let mut response = self
            .agent
            .post(&url)
            .send_json(body)
            .map_err(|e| self.classify(&url, e))?;
        response
            .body_mut()
            .read_json::<R>()
            .map_err(|e| ClientError::BadResponse {
                service: self.service,
                url,
                message: e.to_string(),
            })
    }

    pub fn get_text(&self, path: &str) -> Result<String, ClientError> {
        let url = self.url(path);
        let mut response = self
            .agent
            .get(&url)
            .call()
            .map_err(|e| self.classify(&url, e))?;
        response
            .body_mut()
            .read_to_string()
            .map_err(|e| ClientError::BadResponse {
                service: self.service,
                url,
                message: e.to_string(),
            })
    }

    fn classify(&self, url: &str, e: ureq::Error) -> ClientError {
        match e {
            ureq::Error::StatusCode(code) => ClientError::BadResponse {
                service: self.service,
                url: url.to_string(),
                message: format!("HTTP {code}"),
            },
            other => ClientError::Unreachable {
                service: self.service,
                url: url.to_string(),
                message: other.to_string(),
            },
        }
    }
}

// ----- policy ---------------------------------------------------------------

#[derive(Serialize)]
struct GenerateBody<'a> {
    prompt: &'a str,
    history: &'a str,
    stop: &'a [&'a str],
    seed: u64,
}

/// `POST /generate {prompt, history, stop, seed}` → `{text, token_logprobs?}`.
#[derive(Clone)]
pub struct HttpPolicy {
    http: HttpClient,
}

impl HttpPolicy {
    pub fn new(base: &str, timeout_secs: u64) -> Self {
        Self {
            http: HttpClient::new("policy", base, timeout_secs),
        }
    }
}

impl PolicyOracle for HttpPolicy {
    fn generate(&self, request: &GenerateRequest<'_>) -> Result<Generation, PolicyError> {
        let body = GenerateBody {
            prompt: request.prompt,
            history: request.history,
            stop: request.stop,
            seed: request.seed,
        };
        self.http
            .post::<_, Generation>("/generate", &body)
            .map_err(|e| PolicyError::Transport(Box::new(e)))
    }
}

// ----- judge ----------------------------------------------------------------

/// `POST /judge {question, answer, trajectory}` → `{solved: 0|1, vs_reference?}`.
pub struct HttpJudge {
    http: HttpClient,
}

impl HttpJudge {
    pub fn new(base: &str, timeout_secs: u64) -> Self {
        Self {
            http: HttpClient::new("judge", base, timeout_secs),
        }
    }
}

impl Judge for HttpJudge {
    fn judge(&self, request: &JudgeRequest<'_>) -> Result<Verdict, EvalError> {
        let body = json!({
            "question": request.question,
            "answer": request.answer,
            "trajectory": request.trajectory,
        });
        self.http
            .post::<_, Verdict>("/judge", &body)
            .map_err(|e| EvalError::Remote(Box::new(e)))
    }
}

// ----- embedder -------------------------------------------------------------

#[derive(Serialize)]
struct EmbedBody<'a> {
    texts: &'a [String],
}

#[derive(Deserialize)]
struct EmbedResponse {
    vectors: Vec<Vec<f64>>,
}

/// `POST {url} {texts}` → `{vectors}`. The dimension is fixed at
/// construction and checked on every response.
pub struct HttpEmbedder {
    http: HttpClient,
    dims: usize,
}

impl HttpEmbedder {
    pub fn new(url: &str, dims: usize, timeout_secs: u64) -> Self {
        Self {
            http: HttpClient::new("embedder", url, timeout_secs),
            dims,
        }
    }
}

impl Embedder<f64> for HttpEmbedder {
    fn dims(&self) -> usize {
        self.dims
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, RetrievalError> {
        let mut out = self.embed_batch(&[text.to_string()])?;
        out.pop()
            .ok_or_else(|| RetrievalError::Embed("empty response".into()))
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, RetrievalError> {
        let response: EmbedResponse = self
            .http
            .post("", &EmbedBody { texts })
            .map_err(|e| RetrievalError::Remote(Box::new(e)))?;
        if response.vectors.len() != texts.len() {
            return Err(RetrievalError::Embed(format!(
                "{} vectors for {} texts",
                response.vectors.len(),
                texts.len()
            )));
        }
        if let Some(v) = response.vectors.iter().find(|v| v.len() != self.dims) {
            return Err(RetrievalError::Dimension {
                expected: self.dims,
                actual: v.len(),
            });
        }
        Ok(response.vectors)
    }
}

// ----- simulator ------------------------------------------------------------

/// `POST /simulate {call}` → `{error, response}`. Transport failures become
/// timeout observations so an episode can continue.
pub struct HttpSimulator {
    http: HttpClient,
}

impl HttpSimulator {
    pub fn new(base: &str, timeout_secs: u64) -> Self {
        Self {
            http: HttpClient::new("simulator", base, timeout_secs),
        }
    }
}

impl Simulator for HttpSimulator {
    fn simulate(
        &self,
        _record: &ToolRecord,
        call: &ToolCall,
        _canonical_input: &str,
    ) -> Observation {
        match self
            .http
            .post::<_, Observation>("/simulate", &json!({ "call": call }))
        {
            Ok(obs) => obs,
            Err(e) => {
                log::warn!("{e}");
                Observation::failure(TIMEOUT)
            }
        }
    }
}

// ----- remote retrieval -----------------------------------------------------

#[derive(Serialize)]
struct RetrieveBody<'a> {
    query: &'a str,
    k: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    domain: Option<&'a str>,
}

#[derive(Deserialize)]
pub struct RetrieveResponse {
    pub hits: Vec<RankedHit<f64>>,
    #[serde(default)]
    pub information: Option<String>,
}

/// Client for a running `/retrieve` service. Information blocks come from
/// the server when it supplies them and are rendered from the local catalog
/// otherwise.
pub struct RemoteSearch {
    http: HttpClient,
    catalog: Arc<Catalog>,
    domain: Option<String>,
}

impl RemoteSearch {
    pub fn new(base: &str, catalog: Arc<Catalog>, timeout_secs: u64) -> Self {
        Self {
            http: HttpClient::new("retrieval", base, timeout_secs),
            catalog,
            domain: None,
        }
    }

    pub fn with_domain(mut self, domain: impl Into<String>) -> Self {
        self.domain = Some(domain.into());
        self
    }

    pub fn retrieve(&self, query: &str, k: usize) -> Result<RetrieveResponse, ClientError> {
        self.http.post(
            "/retrieve",
            &RetrieveBody {
                query,
                k,
                domain: self.domain.as_deref(),
            },
        )
    }
}

impl ToolSearch for RemoteSearch {
    fn search(&self, query: &str, k: usize) -> Result<SearchOutcome, RetrievalError> {
        let response = self
            .retrieve(query, k)
            .map_err(|e| RetrievalError::Remote(Box::new(e)))?;
        let ids: Vec<u64> = response.hits.iter().map(|h| h.api_id).collect();
        let information = match response.information {
            Some(text) => text,
            None => render_information_ids(&ids, &self.catalog)?,
        };
        Ok(SearchOutcome { ids, information })
    }
}
