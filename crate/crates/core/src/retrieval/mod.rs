//! Search-API client and bounded documentation fetcher.

mod html;
mod stub;

use std::io::Read;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;
use url::Url;

pub use html::{collapse_whitespace, truncate_bytes, visible_text};
pub use stub::StubServer;

use crate::gateway::redaction_marker;
use crate::vault::Secret;

const MAX_RESPONSE_BYTES: u64 = 4 << 20;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchHit {
    pub title: String,
    pub link: String,
    #[serde(default)]
    pub snippet: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchResults {
    pub query: String,
    pub results: Vec<SearchHit>,
}

#[derive(Debug, Error)]
pub enum SearchError {
    #[error("search query is blank")]
    BlankQuery,
    #[error("search endpoint rejected the API key (HTTP {0})")]
    Auth(u16),
    #[error("search endpoint returned HTTP {0}")]
    Http(u16),
    #[error("search response is not valid JSON: {0}")]
    Malformed(String),
    #[error("search request failed: {0}")]
    Transport(String),
}

impl SearchError {
    pub fn is_auth(&self) -> bool {
        matches!(self, SearchError::Auth(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct FetchLimits {
    pub max_pages: usize,
    pub max_bytes_per_page: usize,
    /// Cap on all snippet and page text in one bundle.
    pub max_total_bytes: usize,
}

impl Default for FetchLimits {
    fn default() -> Self {
        Self {
            max_pages: 2,
            max_bytes_per_page: 32 * 1024,
            max_total_bytes: 72 * 1024,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FetchedPage {
    pub url: String,
    pub extracted_text: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApiDocBundle {
    pub api_name: String,
    pub snippets: Vec<SearchHit>,
    pub fetched_pages: Vec<FetchedPage>,
    pub notes: Vec<String>,
}

impl ApiDocBundle {
    pub fn empty(api_name: impl Into<String>, note: impl Into<String>) -> Self {
        Self {
            api_name: api_name.into(),
            notes: vec![note.into()],
            ..Default::default()
        }
    }

    pub fn is_empty(&self) -> bool {
        self.snippets.is_empty() && self.fetched_pages.is_empty()
    }

    pub fn text_bytes(&self) -> usize {
        let snippets: usize = self
            .snippets
            .iter()
            .map(|s| s.title.len() + s.link.len() + s.snippet.len())
            .sum();
        snippets + self.fetched_pages.iter().map(|p| p.extracted_text.len()).sum::<usize>()
    }
}

#[derive(Debug, Clone)]
pub struct SearchClient {
    endpoint: Url,
    http: reqwest::blocking::Client,
}

impl SearchClient {
    pub fn new(endpoint: &str) -> Result<Self, SearchError> {
        let mut endpoint = Url::parse(endpoint).map_err(|e| SearchError::Transport(format!("bad endpoint: {e}")))?;
        if !endpoint.path().ends_with('/') {
            let path = format!("{}/", endpoint.path());
            endpoint.set_path(&path);
        }
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(30))
            .build()
            .map_err(|e| SearchError::Transport(e.to_string()))?;
        Ok(Self { endpoint, http })
    }

    pub fn endpoint(&self) -> &Url {
        &self.endpoint
    }

    fn search_url(&self, query: &str, key: &str) -> Url {
        let mut url = self.endpoint.join("search").expect("relative join");
        url.query_pairs_mut().append_pair("q", query).append_pair("api_key", key);
        url
    }

    /// The request URL with the key replaced by its redaction marker.
    pub fn redacted_url(&self, query: &str, key: &Secret) -> String {
        self.search_url(query, &redaction_marker(key)).to_string()
    }

    pub fn search(&self, query: &str, key: &Secret) -> Result<SearchResults, SearchError> {
        if query.trim().is_empty() {
            return Err(SearchError::BlankQuery);
        }
        let resp = self
            .http
            .get(self.search_url(query, key.expose()))
            .send()
            .map_err(|e| SearchError::Transport(e.without_url().to_string()))?;
        let status = resp.status().as_u16();
        if status == 401 || status == 403 {
            return Err(SearchError::Auth(status));
        }
        if !resp.status().is_success() {
            return Err(SearchError::Http(status));
        }
        let body = read_capped(resp).map_err(|e| SearchError::Transport(e.to_string()))?;
        let value: Value = serde_json::from_slice(&body).map_err(|e| SearchError::Malformed(e.to_string()))?;
        Ok(SearchResults {
            query: query.to_string(),
            results: parse_organic_results(&value),
        })
    }

    /// Fetches up to `limits.max_pages` result links in order and assembles
    /// a size-capped bundle. Page failures become notes.
    pub fn fetch_pages(&self, api_name: &str, results: &SearchResults, limits: FetchLimits) -> ApiDocBundle {
        let mut bundle = ApiDocBundle {
            api_name: api_name.to_string(),
            ..Default::default()
        };
        let mut budget = limits.max_total_bytes;
        for hit in &results.results {
            let size = hit.title.len() + hit.link.len() + hit.snippet.len();
            if size > budget {
                bundle.notes.push("snippet list truncated at size cap".into());
                break;
            }
            budget -= size;
            bundle.snippets.push(hit.clone());
        }
        for hit in results.results.iter().take(limits.max_pages) {
            if budget == 0 {
                bundle.notes.push(format!("skipped {}: size cap reached", hit.link));
                continue;
            }
            match self.fetch_page(&hit.link) {
                Ok(text) => {
                    let cap = limits.max_bytes_per_page.min(budget);
                    let text = truncate_bytes(&text, cap).to_string();
                    budget -= text.len();
                    bundle.fetched_pages.push(FetchedPage {
                        url: hit.link.clone(),
                        extracted_text: text,
                    });
                }
                Err(e) => bundle.notes.push(format!("failed to fetch {}: {e}", hit.link)),
            }
        }
        bundle
    }

    fn fetch_page(&self, link: &str) -> Result<String, String> {
        let resp = self.http.get(link).send().map_err(|e| e.without_url().to_string())?;
        if !resp.status().is_success() {
            return Err(format!("HTTP {}", resp.status().as_u16()));
        }
        let body = read_capped(resp).map_err(|e| e.to_string())?;
        Ok(visible_text(&String::from_utf8_lossy(&body)))
    }
}

fn read_capped(resp: reqwest::blocking::Response) -> std::io::Result<Vec<u8>> {
    let mut body = Vec::new();
    resp.take(MAX_RESPONSE_BYTES).read_to_end(&mut body)?;
    Ok(body)
}

/// Entries of `organic_results` with an absolute http(s) link. A missing or
/// non-array field yields no results.
pub fn parse_organic_results(value: &Value) -> Vec<SearchHit> {
    let Some(items) = value.get("organic_results").and_then(Value::as_array) else {
        return Vec::new();
    };
    items
        .iter()
        .filter_map(|item| {
            let text = |k: &str| item.get(k).and_then(Value::as_str).unwrap_or("").to_string();
            let link = text("link");
            let absolute = Url::parse(&link).is_ok_and(|u| matches!(u.scheme(), "http" | "https"));
            absolute.then(|| SearchHit {
                title: text("title"),
                link,
                snippet: text("snippet"),
            })
        })
        .collect()
}

/// The query used to look up documentation for an API.
pub fn docs_query(api_name: &str) -> String {
    format!("{api_name} API documentation python example")
}
