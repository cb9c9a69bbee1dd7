//! Class-description sets: cache loading, LLM-backed generation, and the
//! client abstraction with an offline mock.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use thiserror::Error;

use super::{DataError, DatasetManifest};

pub const ENV_LLM_ENDPOINT: &str = "NOLA_LLM_ENDPOINT";
pub const ENV_LLM_KEY: &str = "NOLA_LLM_KEY";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DescriptionSource {
    CacheFile,
    LlmClient,
}

/// Per-class text descriptions with template provenance. Construction
/// guarantees every manifest class has at least one non-empty description.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptionSet {
    pub dataset: String,
    pub templates: Vec<String>,
    pub per_class: BTreeMap<String, Vec<String>>,
    /// Manifest class order; the canonical row order for classifier building.
    pub class_order: Vec<String>,
    pub source: DescriptionSource,
}

impl DescriptionSet {
    pub fn total_descriptions(&self) -> usize {
        self.per_class.values().map(Vec::len).sum()
    }

    pub fn descriptions_for(&self, class: &str) -> Option<&[String]> {
        self.per_class.get(class).map(Vec::as_slice)
    }
}

/// On-disk cache schema: `{dataset, templates: [..], classes: {name: [..]}}`.
#[derive(Serialize, Deserialize)]
struct CacheFile {
    dataset: String,
    templates: Vec<String>,
    classes: BTreeMap<String, Vec<String>>,
}

fn validate_against_manifest(
    classes: &BTreeMap<String, Vec<String>>,
    manifest: &DatasetManifest,
) -> Result<(), DataError> {
    let missing: Vec<String> = manifest
        .class_names
        .iter()
        .filter(|c| classes.get(*c).map_or(true, |d| d.is_empty()))
        .cloned()
        .collect();
    if !missing.is_empty() {
        return Err(DataError::MissingClass(missing));
    }
    for (class, descs) in classes {
        if descs.iter().any(|d| d.trim().is_empty()) {
            return Err(DataError::SchemaViolation {
                field: format!("classes.{class}"),
                detail: "empty description string".into(),
            });
        }
    }
    Ok(())
}

/// Load a description cache and check it covers the manifest's classes.
pub fn load_descriptions(
    path: &Path,
    manifest: &DatasetManifest,
) -> Result<DescriptionSet, DataError> {
    if !path.exists() {
        return Err(DataError::MissingFile(path.to_path_buf()));
    }
    let text = std::fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let file: CacheFile =
        serde_json::from_str(&text).map_err(|e| DataError::ParseError(e.to_string()))?;
    validate_against_manifest(&file.classes, manifest)?;
    Ok(DescriptionSet {
        dataset: file.dataset,
        templates: file.templates,
        per_class: file.classes,
        class_order: manifest.class_names.clone(),
        source: DescriptionSource::CacheFile,
    })
}

/// Write a description set in the cache format that [`load_descriptions`]
/// reads back.
pub fn save_descriptions(set: &DescriptionSet, path: &Path) -> Result<(), DataError> {
    let file = CacheFile {
        dataset: set.dataset.clone(),
        templates: set.templates.clone(),
        classes: set.per_class.clone(),
    };
    let text = serde_json::to_string_pretty(&file).expect("cache schema serializes");
    std::fs::write(path, text).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("client unavailable: {0}")]
    Unavailable(String),
    #[error("rate limited{}", retry_after.map(|s| format!(", retry after {s}s")).unwrap_or_default())]
    RateLimited { retry_after: Option<u64> },
    #[error("request timed out")]
    Timeout,
    #[error("malformed response: {0}")]
    Malformed(String),
}

/// Prompt in, list of generated strings out. Implemented by the offline mock
/// and the HTTP backend.
pub trait LlmClient: Send + Sync {
    fn complete(&self, prompt: &str) -> Result<Vec<String>, LlmError>;
}

/// Offline mock: echoes `desc(<prompt>)`, optionally failing on a chosen
/// call for fault-injection tests.
pub struct MockLlmClient {
    pub responses_per_prompt: usize,
    pub fail_on_call: Option<usize>,
    calls: AtomicUsize,
}

impl MockLlmClient {
    pub fn new() -> Self {
        MockLlmClient {
            responses_per_prompt: 1,
            fail_on_call: None,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn failing_on(call: usize) -> Self {
        MockLlmClient {
            fail_on_call: Some(call),
            ..Self::new()
        }
    }

    pub fn calls_made(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }
}

impl Default for MockLlmClient {
    fn default() -> Self {
        Self::new()
    }
}

impl LlmClient for MockLlmClient {
    fn complete(&self, prompt: &str) -> Result<Vec<String>, LlmError> {
        let call = self.calls.fetch_add(1, Ordering::Relaxed) + 1;
        if self.fail_on_call == Some(call) {
            return Err(LlmError::Timeout);
        }
        Ok((0..self.responses_per_prompt.max(1))
            .map(|i| {
                if i == 0 {
                    format!("desc({prompt})")
                } else {
                    format!("desc{i}({prompt})")
                }
            })
            .collect())
    }
}

/// HTTP backend. POSTs `{"prompt": ...}` with a bearer key to the endpoint
/// named by `NOLA_LLM_ENDPOINT` / `NOLA_LLM_KEY` and expects
/// `{"descriptions": ["...", ...]}` back.
pub struct HttpLlmClient {
    endpoint: String,
    key: Option<String>,
    client: reqwest::blocking::Client,
}

impl HttpLlmClient {
    pub fn new(endpoint: String, key: Option<String>) -> Result<Self, LlmError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(std::time::Duration::from_secs(60))
            .build()
            .map_err(|e| LlmError::Unavailable(e.to_string()))?;
        Ok(HttpLlmClient {
            endpoint,
            key,
            client,
        })
    }

    pub fn from_env() -> Result<Self, LlmError> {
        let endpoint = std::env::var(ENV_LLM_ENDPOINT)
            .map_err(|_| LlmError::Unavailable(format!("{ENV_LLM_ENDPOINT} not set")))?;
        let key = std::env::var(ENV_LLM_KEY).ok();
        Self::new(endpoint, key)
    }
}

#[derive(Serialize)]
struct LlmRequest<'a> {
    prompt: &'a str,
}

#[derive(Deserialize)]
struct LlmResponse {
    descriptions: Vec<String>,
}

impl LlmClient for HttpLlmClient {
    fn complete(&self, prompt: &str) -> Result<Vec<String>, LlmError> {
        let mut req = self.client.post(&self.endpoint).json(&LlmRequest { prompt });
        if let Some(key) = &self.key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| {
            if e.is_timeout() {
                LlmError::Timeout
            } else {
                LlmError::Unavailable(e.to_string())
            }
        })?;
        if resp.status().as_u16() == 429 {
            let retry_after = resp
                .headers()
                .get("retry-after")
                .and_then(|v| v.to_str().ok())
                .and_then(|v| v.parse().ok());
            return Err(LlmError::RateLimited { retry_after });
        }
        if !resp.status().is_success() {
            return Err(LlmError::Unavailable(format!("status {}", resp.status())));
        }
        let body: LlmResponse = resp
            .json()
            .map_err(|e| LlmError::Malformed(e.to_string()))?;
        Ok(body.descriptions)
    }
}

/// One (class, template) request that did not complete.
#[derive(Debug, Clone)]
pub struct GenerateFailure {
    pub class: String,
    pub template: String,
    pub error: String,
}

#[derive(Debug, Error)]
pub enum GenerateError {
    #[error("llm client unavailable: {0}")]
    ClientUnavailable(String),
    #[error("template `{0}` has no {{}} placeholder")]
    PlaceholderMissing(String),
    #[error("templates list is empty")]
    NoTemplates,
    #[error(
        "rate limited: {} of {} requests completed; retry {} pairs",
        completed, total, failures.len()
    )]
    RateLimited {
        completed: usize,
        total: usize,
        failures: Vec<GenerateFailure>,
        /// Descriptions gathered before/around the failures, preserved so a
        /// retry can resume instead of starting over.
        partial: DescriptionSet,
    },
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Query the client once per (class, template) pair, in manifest class
/// order, and write the result through to the cache format at `cache_path`
/// so later runs take the [`load_descriptions`] path.
///
/// Transient per-request failures (timeout, rate limit) do not abort the
/// sweep: remaining pairs still run, and the error reports what completed.
pub fn generate_descriptions(
    client: &dyn LlmClient,
    manifest: &DatasetManifest,
    templates: &[String],
    cache_path: &Path,
) -> Result<DescriptionSet, GenerateError> {
    if templates.is_empty() {
        return Err(GenerateError::NoTemplates);
    }
    for t in templates {
        if !t.contains("{}") {
            return Err(GenerateError::PlaceholderMissing(t.clone()));
        }
    }

    let total = manifest.class_names.len() * templates.len();
    let mut per_class: BTreeMap<String, Vec<String>> = BTreeMap::new();
    let mut failures = Vec::new();
    let mut completed = 0usize;
    for class in &manifest.class_names {
        let entry = per_class.entry(class.clone()).or_default();
        for template in templates {
            let prompt = template.replace("{}", class);
            match client.complete(&prompt) {
                Ok(descs) => {
                    completed += 1;
                    entry.extend(descs.into_iter().filter(|d| !d.trim().is_empty()));
                }
                Err(LlmError::Unavailable(msg)) => {
                    return Err(GenerateError::ClientUnavailable(msg));
                }
                Err(e) => failures.push(GenerateFailure {
                    class: class.clone(),
                    template: template.clone(),
                    error: e.to_string(),
                }),
            }
        }
    }

    let set = DescriptionSet {
        dataset: manifest.name.clone(),
        templates: templates.to_vec(),
        per_class,
        class_order: manifest.class_names.clone(),
        source: DescriptionSource::LlmClient,
    };

    if !failures.is_empty() {
        return Err(GenerateError::RateLimited {
            completed,
            total,
            failures,
            partial: set,
        });
    }

    save_descriptions(&set, cache_path)?;
    Ok(set)
}
